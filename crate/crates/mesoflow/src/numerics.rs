//! Shared numerical kernels: explicit ODE stepping, central finite
//! differences, and periodic quadrature for Fourier coefficients.
//!
//! Everything here is a pure function of its inputs and safe to call from
//! many workers at once. These kernels double as the independent oracles
//! used by the physics tests, so they deliberately stay simple: fixed-step
//! RK4, classical central stencils, composite midpoint quadrature.

use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

/// Failure reported by a field/scalar sampler while a kernel is running.
///
/// The kernels only propagate these; the caller decides what each variant
/// means (e.g. the flow tracer maps `OutOfDomain` to a domain-exit
/// termination).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SampleError {
    #[error("sample point outside the field domain")]
    OutOfDomain,
    #[error("sample magnitude below the configured floor")]
    BelowFloor,
    #[error("non-finite sample value")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: sampler failed: {source}")]
    Sample {
        op: &'static str,
        #[source]
        source: SampleError,
    },
    #[error("{op}: non-finite evaluation at stage {stage}")]
    NonFinite { op: &'static str, stage: usize },
    #[error("invalid step control: {0}")]
    InvalidStepControl(String),
}

/// Step-size policy for the fixed-step RK4 tracers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl {
    /// Nominal step (m). The tracers advance by this unless a sample fails.
    pub initial_step: f64,
    /// Smallest step allowed while retrying a failed sample (m).
    pub min_step: f64,
    /// Hard cap on the distance between consecutive points (m).
    pub max_step: f64,
    /// Target relative local error; used to derive a step from a length scale.
    pub rel_tol: f64,
    /// Hard cap on the number of accepted steps per trace.
    pub max_steps: usize,
}

impl StepControl {
    pub fn new(
        initial_step: f64,
        min_step: f64,
        max_step: f64,
        rel_tol: f64,
        max_steps: usize,
    ) -> Result<Self, NumericsError> {
        let mut problems = Vec::new();
        if !(min_step > 0.0) {
            problems.push("min_step must be > 0".to_string());
        }
        if !(min_step <= initial_step) {
            problems.push("min_step must be <= initial_step".to_string());
        }
        if !(initial_step <= max_step) {
            problems.push("initial_step must be <= max_step".to_string());
        }
        if !(rel_tol > 0.0) {
            problems.push("rel_tol must be > 0".to_string());
        }
        if max_steps == 0 {
            problems.push("max_steps must be > 0".to_string());
        }
        if problems.is_empty() {
            Ok(Self {
                initial_step,
                min_step,
                max_step,
                rel_tol,
                max_steps,
            })
        } else {
            Err(NumericsError::InvalidStepControl(problems.join("; ")))
        }
    }

    /// Derive a fixed step from a field length scale and a target relative
    /// local error. For classical RK4 the local error per unit length is
    /// ~h^4/120 on a curve of unit curvature, so h = (120 tol)^(1/4) L.
    pub fn for_scale(length_scale: f64, rel_tol: f64, max_steps: usize) -> Self {
        let h = (120.0 * rel_tol).powf(0.25) * length_scale;
        Self {
            initial_step: h,
            min_step: h * 2f64.powi(-20),
            max_step: h,
            rel_tol,
            max_steps,
        }
    }
}

/// Order of a central finite-difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdOrder {
    Two,
    Four,
}

/// Central finite-difference stencil: spacing plus accuracy order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FDStencil {
    pub spacing: f64,
    pub order: FdOrder,
}

impl FDStencil {
    pub fn new(spacing: f64, order: FdOrder) -> Self {
        assert!(spacing > 0.0, "stencil spacing must be > 0");
        Self { spacing, order }
    }
}

/// Dimensions a Laplacian is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaplacianDims {
    /// x and y only (transverse plane).
    Transverse,
    /// Full three-dimensional Laplacian.
    ThreeD,
}

impl LaplacianDims {
    fn axes(self) -> &'static [usize] {
        match self {
            LaplacianDims::Transverse => &[0, 1],
            LaplacianDims::ThreeD => &[0, 1, 2],
        }
    }
}

/// One classical 4th-order Runge-Kutta step for dy/dt = f(y).
///
/// Deterministic: the result depends only on `f`, `y` and `h`. Any
/// non-finite stage derivative aborts with the stage index.
pub fn rk4_step<const N: usize>(
    mut f: impl FnMut(&[f64; N]) -> Result<[f64; N], SampleError>,
    y: &[f64; N],
    h: f64,
) -> Result<[f64; N], NumericsError> {
    const OP: &str = "rk4_step";
    let mut eval = |state: &[f64; N], stage: usize| -> Result<[f64; N], NumericsError> {
        let d = f(state).map_err(|source| NumericsError::Sample { op: OP, source })?;
        if d.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: OP, stage });
        }
        Ok(d)
    };

    let k1 = eval(y, 1)?;
    let k2 = eval(&add_scaled(y, &k1, 0.5 * h), 2)?;
    let k3 = eval(&add_scaled(y, &k2, 0.5 * h), 3)?;
    let k4 = eval(&add_scaled(y, &k3, h), 4)?;

    let mut out = *y;
    for i in 0..N {
        out[i] += (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(out)
}

fn add_scaled<const N: usize>(y: &[f64; N], d: &[f64; N], s: f64) -> [f64; N] {
    let mut out = *y;
    for i in 0..N {
        out[i] += s * d[i];
    }
    out
}

/// Central-difference gradient of a scalar sampler, error O(h^order).
pub fn fd_gradient(
    mut g: impl FnMut(&[f64; 3]) -> Result<f64, SampleError>,
    x: &[f64; 3],
    st: &FDStencil,
) -> Result<[f64; 3], NumericsError> {
    const OP: &str = "fd_gradient";
    let h = st.spacing;
    let mut grad = [0.0; 3];
    for (axis, slot) in grad.iter_mut().enumerate() {
        let sample = |g: &mut dyn FnMut(&[f64; 3]) -> Result<f64, SampleError>,
                      offset: f64|
         -> Result<f64, NumericsError> {
            let mut p = *x;
            p[axis] += offset;
            let v = g(&p).map_err(|source| NumericsError::Sample { op: OP, source })?;
            if !v.is_finite() {
                return Err(NumericsError::NonFinite { op: OP, stage: axis });
            }
            Ok(v)
        };
        *slot = match st.order {
            FdOrder::Two => {
                let fp = sample(&mut g, h)?;
                let fm = sample(&mut g, -h)?;
                (fp - fm) / (2.0 * h)
            }
            FdOrder::Four => {
                let fp2 = sample(&mut g, 2.0 * h)?;
                let fp1 = sample(&mut g, h)?;
                let fm1 = sample(&mut g, -h)?;
                let fm2 = sample(&mut g, -2.0 * h)?;
                (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * h)
            }
        };
    }
    Ok(grad)
}

/// Central-difference Laplacian over the requested dimensions.
pub fn fd_laplacian(
    mut g: impl FnMut(&[f64; 3]) -> Result<f64, SampleError>,
    x: &[f64; 3],
    st: &FDStencil,
    dims: LaplacianDims,
) -> Result<f64, NumericsError> {
    const OP: &str = "fd_laplacian";
    let h = st.spacing;
    let mut sample = |p: &[f64; 3], stage: usize| -> Result<f64, NumericsError> {
        let v = g(p).map_err(|source| NumericsError::Sample { op: OP, source })?;
        if !v.is_finite() {
            return Err(NumericsError::NonFinite { op: OP, stage });
        }
        Ok(v)
    };
    let center = sample(x, 0)?;
    let mut lap = 0.0;
    for &axis in dims.axes() {
        let at = |offset: f64| {
            let mut p = *x;
            p[axis] += offset;
            p
        };
        lap += match st.order {
            FdOrder::Two => {
                let fp = sample(&at(h), axis + 1)?;
                let fm = sample(&at(-h), axis + 1)?;
                (fp - 2.0 * center + fm) / (h * h)
            }
            FdOrder::Four => {
                let fp2 = sample(&at(2.0 * h), axis + 1)?;
                let fp1 = sample(&at(h), axis + 1)?;
                let fm1 = sample(&at(-h), axis + 1)?;
                let fm2 = sample(&at(-2.0 * h), axis + 1)?;
                (-fp2 + 16.0 * fp1 - 30.0 * center + 16.0 * fm1 - fm2) / (12.0 * h * h)
            }
        };
    }
    Ok(lap)
}

/// Panels used by [`fourier_coefficient`]. Power of two so that binary duty
/// cycles place their jumps exactly on panel boundaries.
pub const FOURIER_PANELS: usize = 1 << 14;

/// n-th complex Fourier coefficient of a function with period 1:
/// c_n = ∫₀¹ t(ξ) exp(-2πi n ξ) dξ.
///
/// Composite midpoint rule with [`FOURIER_PANELS`] panels; the oscillatory
/// factor is integrated exactly over each panel (midpoint sum times
/// sinc(πn/N)), so a piecewise-constant transmittance whose jumps sit on
/// panel boundaries is integrated to round-off.
pub fn fourier_coefficient(
    transmittance: impl Fn(f64) -> f64,
    n: i32,
) -> Result<Complex64, NumericsError> {
    const OP: &str = "fourier_coefficient";
    let panels = FOURIER_PANELS;
    let w = 2.0 * PI * f64::from(n);
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..panels {
        let xi = (j as f64 + 0.5) / panels as f64;
        let t = transmittance(xi);
        if !t.is_finite() {
            return Err(NumericsError::NonFinite { op: OP, stage: j });
        }
        acc += t * Complex64::new(0.0, -w * xi).exp();
    }
    acc /= panels as f64;
    // Exact panel integral of exp(-2πinξ) = midpoint value times sinc(πn/N).
    let x = PI * f64::from(n) / panels as f64;
    let sinc = if n == 0 { 1.0 } else { x.sin() / x };
    Ok(acc * sinc)
}
