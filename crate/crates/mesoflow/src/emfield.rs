//! Physical E and B fields assembled from the scalar modes, with the
//! derived flow quantities: time-averaged Poynting vector, classical
//! energy density, quantum-potential density Q, and the interpolating
//! meso-density rho_mes = rho_cl + (1 - lambda) Q.
//!
//! Complex time-averaging convention: <X Y> = Re(X conj(Y)) / 2 for
//! monochromatic exp(-iωt) fields.

use crate::modes::{grating_psi, lg_u, ComplexSample, GratingScene, LGScene, PhysicalConstants};
use crate::numerics::{fd_laplacian, FDStencil, FdOrder, LaplacianDims, NumericsError, SampleError};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmFieldError {
    #[error(transparent)]
    Modes(#[from] crate::modes::ModesError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid meso parameters: {0}")]
    InvalidMeso(String),
    #[error("mode amplitude below the node floor at ({0}, {1}, {2})", at[0], at[1], at[2])]
    Node { at: [f64; 3] },
    #[error("amplitude sampler failed: {0}")]
    AmplitudeSample(SampleError),
}

/// Complex monochromatic field sample: E in V/m, B in T.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EMSample {
    pub e: [Complex64; 3],
    pub b: [Complex64; 3],
}

impl EMSample {
    pub fn zero() -> Self {
        let z = Complex64::new(0.0, 0.0);
        Self { e: [z; 3], b: [z; 3] }
    }

    pub fn is_finite(&self) -> bool {
        let ok = |c: &Complex64| c.re.is_finite() && c.im.is_finite();
        self.e.iter().all(ok) && self.b.iter().all(ok)
    }
}

/// Spatial reduction used for the quantum-potential Laplacian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QReduction {
    /// Full three-dimensional Laplacian of the mode modulus.
    #[default]
    #[serde(rename = "3d")]
    ThreeD,
    /// Laplacian over the transverse (x, y) plane only.
    Transverse,
}

impl QReduction {
    fn dims(self) -> LaplacianDims {
        match self {
            QReduction::ThreeD => LaplacianDims::ThreeD,
            QReduction::Transverse => LaplacianDims::Transverse,
        }
    }
}

/// Parameters of the quantum-classical interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MesoParams {
    /// Coupling lambda in [0, 1]: 1 is the classical limit, 0 the quantum one.
    pub coupling: f64,
    /// Dimensionless scale knob on the quantum potential.
    pub q_scale: f64,
    /// Laplacian reduction used for Q.
    pub reduction: QReduction,
    /// Reference density (J/m^3); the peak classical density of the scene.
    pub rho_ref: f64,
    /// Absolute amplitude floor below which a point counts as a node.
    pub amp_floor: f64,
}

impl MesoParams {
    pub fn new(
        coupling: f64,
        q_scale: f64,
        reduction: QReduction,
        rho_ref: f64,
        amp_floor: f64,
    ) -> Result<Self, EmFieldError> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&coupling) {
            problems.push(format!("coupling {coupling} must lie in [0, 1]"));
        }
        if !(q_scale >= 0.0 && q_scale.is_finite()) {
            problems.push(format!("q_scale {q_scale} must be >= 0 and finite"));
        }
        if !(rho_ref > 0.0 && rho_ref.is_finite()) {
            problems.push(format!("rho_ref {rho_ref} must be > 0 and finite"));
        }
        if !(amp_floor >= 0.0 && amp_floor.is_finite()) {
            problems.push(format!("amp_floor {amp_floor} must be >= 0 and finite"));
        }
        if problems.is_empty() {
            Ok(Self {
                coupling,
                q_scale,
                reduction,
                rho_ref,
                amp_floor,
            })
        } else {
            Err(EmFieldError::InvalidMeso(problems.join("; ")))
        }
    }

    /// Default floor: 1e-12 of the given peak amplitude.
    pub fn default_floor(peak_amplitude: f64) -> f64 {
        1e-12 * peak_amplitude
    }
}

/// Pointwise density bookkeeping along a flow line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityBreakdown {
    pub rho_cl: f64,
    pub q: f64,
    pub rho_mes: f64,
}

/// E and B fields diffracted by the grating, from the scalar mode and its
/// analytic gradient. The transverse H pair and longitudinal E take the
/// +/- signs selected by the scene's sign branch; both branches solve the
/// monochromatic Maxwell pair exactly (the curl-residual tests pin this).
///
/// The amplitudes A and B carry H-field units (A/m), making E Z0-scaled.
pub fn grating_em(
    scene: &GratingScene,
    consts: &PhysicalConstants,
    x: f64,
    y: f64,
) -> Result<EMSample, EmFieldError> {
    let psi = grating_psi(scene, x, y)?;
    Ok(assemble_grating_em(scene, consts, &psi))
}

fn assemble_grating_em(
    scene: &GratingScene,
    consts: &PhysicalConstants,
    psi: &ComplexSample,
) -> EMSample {
    let i = Complex64::new(0.0, 1.0);
    let k = scene.wavenumber();
    let omega = consts.c * k;
    let a = scene.amp_a();
    let b = scene.amp_b();
    let sgn = scene.sign_branch().sign();
    let (dpsi_dx, dpsi_dy) = (psi.grad[0], psi.grad[1]);

    let e_t = i * (a / (consts.eps0 * omega));
    let e = [
        e_t * dpsi_dy,
        -e_t * dpsi_dx,
        Complex64::new(sgn * k * b / (consts.eps0 * omega), 0.0) * psi.value,
    ];
    let h_t = -sgn * i * (b / k);
    let h = [
        h_t * dpsi_dy,
        -h_t * dpsi_dx,
        Complex64::new(a, 0.0) * psi.value,
    ];
    EMSample {
        e,
        b: [h[0] * consts.mu0, h[1] * consts.mu0, h[2] * consts.mu0],
    }
}

/// Paraxial E and B of the Laguerre-Gauss beam: the linearly polarized
/// pair E = ik (u, 0, (i/k) du/dx) e^{ikz}, B = (ik/c)(0, u, (i/k) du/dy)
/// e^{ikz}. The 1/c keeps B in teslas so |S| ~ c rho_cl holds.
pub fn lg_em(scene: &LGScene, consts: &PhysicalConstants, x: f64, y: f64, z: f64) -> EMSample {
    let r = x.hypot(y);
    let phi = y.atan2(x);
    let u = lg_u(scene, r, phi, z);
    let k = scene.wavenumber();
    let phase = Complex64::new(0.0, k * z).exp();
    let ik = Complex64::new(0.0, k);
    let e = [ik * u.value * phase, Complex64::new(0.0, 0.0), -u.grad[0] * phase];
    let b = [
        Complex64::new(0.0, 0.0),
        ik * u.value * phase / consts.c,
        -u.grad[1] * phase / consts.c,
    ];
    EMSample { e, b }
}

/// Time-averaged Poynting vector S = Re(E x conj(B)) / (2 mu0) in W/m^2.
pub fn poynting_avg(s: &EMSample, consts: &PhysicalConstants) -> [f64; 3] {
    let cross = |a: &[Complex64; 3], b: &[Complex64; 3]| {
        [
            a[1] * b[2].conj() - a[2] * b[1].conj(),
            a[2] * b[0].conj() - a[0] * b[2].conj(),
            a[0] * b[1].conj() - a[1] * b[0].conj(),
        ]
    };
    let exb = cross(&s.e, &s.b);
    [
        exb[0].re / (2.0 * consts.mu0),
        exb[1].re / (2.0 * consts.mu0),
        exb[2].re / (2.0 * consts.mu0),
    ]
}

/// Closed-form time-averaged Poynting vector behind the grating:
/// S_{x,y} = (A^2 + B^2) Im(conj(psi) d psi / d{x,y}) / (2 eps0 omega),
/// S_z = 0 exactly.
pub fn grating_poynting_closed(
    scene: &GratingScene,
    consts: &PhysicalConstants,
    x: f64,
    y: f64,
) -> Result<[f64; 3], EmFieldError> {
    let psi = grating_psi(scene, x, y)?;
    let omega = consts.c * scene.wavenumber();
    let factor =
        (scene.amp_a() * scene.amp_a() + scene.amp_b() * scene.amp_b()) / (2.0 * consts.eps0 * omega);
    Ok([
        factor * (psi.value.conj() * psi.grad[0]).im,
        factor * (psi.value.conj() * psi.grad[1]).im,
        0.0,
    ])
}

/// Closed-form spiral Poynting vector of the Laguerre-Gauss beam, in
/// cylindrical components (S_r, S_phi, S_z):
///
/// S = (eps0 c k^2 / 2) [ r z/(z^2 + z_R^2) |u|^2 r_hat
///                        + l/(k r) |u|^2 phi_hat + |u|^2 z_hat ].
///
/// The prefactor normalizes the bracketed form so its z component equals
/// the assembled-field average Re(E x conj(B))_z / (2 mu0).
pub fn lg_poynting_closed(
    scene: &LGScene,
    consts: &PhysicalConstants,
    r: f64,
    phi: f64,
    z: f64,
) -> [f64; 3] {
    let u = lg_u(scene, r, phi, z);
    let k = scene.wavenumber();
    let zr = scene.rayleigh_range();
    let pref = 0.5 * consts.eps0 * consts.c * k * k * u.value.norm_sqr();
    let s_r = pref * r * z / (z * z + zr * zr);
    let s_phi = if r > 0.0 {
        pref * f64::from(scene.azimuthal_index()) / (k * r)
    } else {
        0.0
    };
    [s_r, s_phi, pref]
}

/// Cylindrical (S_r, S_phi, S_z) at azimuth phi to Cartesian (Sx, Sy, Sz).
pub fn cylindrical_to_cartesian(s: &[f64; 3], phi: f64) -> [f64; 3] {
    let (sin, cos) = phi.sin_cos();
    [
        s[0] * cos - s[1] * sin,
        s[0] * sin + s[1] * cos,
        s[2],
    ]
}

/// Time-averaged classical energy density of a complex monochromatic
/// field: (eps0 |E|^2 + |B|^2 / mu0) / 4 in J/m^3.
pub fn classical_density(s: &EMSample, consts: &PhysicalConstants) -> f64 {
    let e2: f64 = s.e.iter().map(|c| c.norm_sqr()).sum();
    let b2: f64 = s.b.iter().map(|c| c.norm_sqr()).sum();
    0.25 * (consts.eps0 * e2 + b2 / consts.mu0)
}

/// Relative fraction of the free-space wavelength used as the
/// quantum-potential stencil spacing (lambda / 200).
const Q_STENCIL_WAVELENGTH_FRACTION: f64 = PI / 100.0;

/// Quantum-potential density from the modulus of the underlying scalar
/// mode: Q = -q_scale rho_ref (lap |u|) / (k^2 |u|), with the Laplacian
/// taken over the dimensions selected by the reduction variant and
/// approximated by a second-order stencil of spacing lambda/200.
///
/// Invariant under rescaling of the mode amplitude; reported values depend
/// on the reduction variant and the q_scale knob, which callers are
/// expected to surface alongside any output.
pub fn quantum_potential(
    mut amp: impl FnMut(&[f64; 3]) -> Result<f64, SampleError>,
    x: &[f64; 3],
    meso: &MesoParams,
    k: f64,
) -> Result<f64, EmFieldError> {
    let a0 = amp(x).map_err(EmFieldError::AmplitudeSample)?;
    if !a0.is_finite() {
        return Err(EmFieldError::AmplitudeSample(SampleError::NonFinite));
    }
    if a0 <= meso.amp_floor {
        return Err(EmFieldError::Node { at: *x });
    }
    let st = FDStencil::new(Q_STENCIL_WAVELENGTH_FRACTION / k, FdOrder::Two);
    let lap = fd_laplacian(&mut amp, x, &st, meso.reduction.dims())?;
    Ok(-meso.q_scale * meso.rho_ref * lap / (k * k * a0))
}

/// Interpolated meso-density rho_mes = rho_cl + (1 - coupling) Q.
pub fn meso_density(rho_cl: f64, q: f64, coupling: f64) -> DensityBreakdown {
    debug_assert!((0.0..=1.0).contains(&coupling));
    DensityBreakdown {
        rho_cl,
        q,
        rho_mes: rho_cl + (1.0 - coupling) * q,
    }
}
