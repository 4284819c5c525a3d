//! Analytic synthesis of the complex scalar modes and their first
//! derivatives: the plane-wave (diffraction-order) expansion behind a
//! binary amplitude grating, and the paraxial Laguerre-Gauss beam.
//!
//! Both evaluators return the mode value together with its analytic
//! Cartesian gradient so the field assembly never needs numerical
//! differentiation. The time convention is exp(-iωt) throughout.

use crate::numerics::{fourier_coefficient, NumericsError};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Largest supported Laguerre degree; the recurrence is stable well past
/// this but factorial-scale intermediates start to lose accuracy.
pub const MAX_LAGUERRE_DEGREE: u32 = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModesError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("unsupported Laguerre degree p = {p} (max {MAX_LAGUERRE_DEGREE})")]
    UnsupportedDegree { p: u32 },
    #[error("point ({x}, {y}) is outside the field domain (y >= 0)")]
    BehindGrating { x: f64, y: f64 },
    #[error("mode evaluation produced a non-finite value at ({x}, {y}, {z})")]
    NonFinite { x: f64, y: f64, z: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// SI electromagnetic constants; the single source of truth for every
/// physics module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhysicalConstants {
    /// Vacuum permittivity (F/m).
    pub eps0: f64,
    /// Vacuum permeability (H/m).
    pub mu0: f64,
    /// Speed of light (m/s).
    pub c: f64,
    /// Reduced Planck constant (J s).
    pub hbar: f64,
}

impl PhysicalConstants {
    /// SI values with eps0 derived from mu0 and c so that
    /// eps0 * mu0 = 1/c^2 holds to round-off.
    pub fn si() -> Self {
        let c = 299_792_458.0;
        let mu0 = 4.0e-7 * PI;
        Self {
            eps0: 1.0 / (mu0 * c * c),
            mu0,
            c,
            hbar: 1.054_571_817e-34,
        }
    }
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self::si()
    }
}

/// Mode value plus analytic Cartesian gradient (d/dx, d/dy, d/dz).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexSample {
    pub value: Complex64,
    pub grad: [Complex64; 3],
}

impl ComplexSample {
    pub fn is_finite(&self) -> bool {
        let finite = |c: Complex64| c.re.is_finite() && c.im.is_finite();
        finite(self.value) && self.grad.iter().copied().all(finite)
    }
}

/// Sign choice for the two +/- branches of the grating field pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignBranch {
    #[default]
    Upper,
    Lower,
}

impl SignBranch {
    pub fn sign(self) -> f64 {
        match self {
            SignBranch::Upper => 1.0,
            SignBranch::Lower => -1.0,
        }
    }
}

/// Binary amplitude grating illuminated at normal incidence.
///
/// The diffracted scalar mode is a truncated plane-wave expansion
/// psi(x, y) = sum_n c_n exp(i (q_n x + beta_n y)) with q_n = 2 pi n / d
/// and beta_n = sqrt(k^2 - q_n^2) on the branch with Im beta >= 0, so
/// orders beyond the light cone decay into y > 0. The c_n are the Fourier
/// coefficients of the open-slit top hat (open fraction `duty`, centred on
/// x = 0), which is the classic Born & Wolf construction; each term solves
/// the Helmholtz equation exactly.
#[derive(Debug, Clone)]
pub struct GratingScene {
    wavelength: f64,
    period: f64,
    duty: f64,
    orders: u32,
    amp_a: f64,
    amp_b: f64,
    sign_branch: SignBranch,
    /// Fourier coefficients c_n for n in [-orders, orders].
    coefficients: Vec<Complex64>,
    /// (q_n, beta_n) per retained order.
    wavenumbers: Vec<(f64, Complex64)>,
}

impl GratingScene {
    pub fn new(
        wavelength: f64,
        period: f64,
        duty: f64,
        orders: u32,
        amp_a: f64,
        amp_b: f64,
        sign_branch: SignBranch,
    ) -> Result<Self, ModesError> {
        let mut problems = Vec::new();
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            problems.push("wavelength must be positive and finite".to_string());
        }
        if !(period > 0.0 && period.is_finite()) {
            problems.push("period must be positive and finite".to_string());
        }
        if !(duty > 0.0 && duty <= 1.0) {
            problems.push("duty must lie in (0, 1]".to_string());
        }
        if orders < 1 {
            problems.push("orders must be >= 1".to_string());
        }
        if !(amp_a.is_finite() && amp_b.is_finite()) {
            problems.push("amplitudes must be finite".to_string());
        }
        if amp_a == 0.0 && amp_b == 0.0 {
            problems.push("at least one of amp_a, amp_b must be nonzero".to_string());
        }
        if !problems.is_empty() {
            return Err(ModesError::InvalidScene(problems.join("; ")));
        }

        let k = 2.0 * PI / wavelength;
        let half = duty / 2.0;
        let top_hat = move |xi: f64| {
            let frac = xi.rem_euclid(1.0);
            if frac.min(1.0 - frac) <= half {
                1.0
            } else {
                0.0
            }
        };
        let n_orders = orders as i32;
        let mut coefficients = Vec::with_capacity(2 * orders as usize + 1);
        let mut wavenumbers = Vec::with_capacity(2 * orders as usize + 1);
        for n in -n_orders..=n_orders {
            coefficients.push(fourier_coefficient(top_hat, n)?);
            let q = 2.0 * PI * f64::from(n) / period;
            let disc = k * k - q * q;
            // Outgoing/decaying branch: real beta for propagating orders,
            // +i sqrt(q^2 - k^2) for evanescent ones.
            let beta = if disc >= 0.0 {
                Complex64::new(disc.sqrt(), 0.0)
            } else {
                Complex64::new(0.0, (-disc).sqrt())
            };
            wavenumbers.push((q, beta));
        }

        Ok(Self {
            wavelength,
            period,
            duty,
            orders,
            amp_a,
            amp_b,
            sign_branch,
            coefficients,
            wavenumbers,
        })
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn duty(&self) -> f64 {
        self.duty
    }

    pub fn orders(&self) -> u32 {
        self.orders
    }

    pub fn amp_a(&self) -> f64 {
        self.amp_a
    }

    pub fn amp_b(&self) -> f64 {
        self.amp_b
    }

    pub fn sign_branch(&self) -> SignBranch {
        self.sign_branch
    }

    /// Free-space wavenumber k = 2 pi / wavelength.
    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Transverse wavenumber q_n = 2 pi n / d of diffraction order n.
    pub fn transverse_wavenumber(&self, n: i32) -> f64 {
        2.0 * PI * f64::from(n) / self.period
    }

    /// Longitudinal wavenumber beta_n of diffraction order n.
    pub fn longitudinal_wavenumber(&self, n: i32) -> Complex64 {
        let idx = (n + self.orders as i32) as usize;
        self.wavenumbers[idx].1
    }

    /// Fourier coefficient c_n of the grating transmittance.
    pub fn coefficient(&self, n: i32) -> Complex64 {
        let idx = (n + self.orders as i32) as usize;
        self.coefficients[idx]
    }
}

/// Diffracted scalar mode psi(x, y) with its analytic gradient.
///
/// Defined for y >= 0 (downstream of the grating plane).
pub fn grating_psi(scene: &GratingScene, x: f64, y: f64) -> Result<ComplexSample, ModesError> {
    if y < 0.0 {
        return Err(ModesError::BehindGrating { x, y });
    }
    let i = Complex64::new(0.0, 1.0);
    let mut value = Complex64::new(0.0, 0.0);
    let mut grad_x = Complex64::new(0.0, 0.0);
    let mut grad_y = Complex64::new(0.0, 0.0);
    for (c, &(q, beta)) in scene.coefficients.iter().zip(&scene.wavenumbers) {
        let phase = (i * (q * x) + i * beta * y).exp();
        let term = c * phase;
        value += term;
        grad_x += term * i * q;
        grad_y += term * i * beta;
    }
    let sample = ComplexSample {
        value,
        grad: [grad_x, grad_y, Complex64::new(0.0, 0.0)],
    };
    if !sample.is_finite() {
        return Err(ModesError::NonFinite { x, y, z: 0.0 });
    }
    Ok(sample)
}

/// Paraxial Laguerre-Gauss beam with waist at z = 0 propagating along +z.
#[derive(Debug, Clone, Copy)]
pub struct LGScene {
    p: u32,
    l: i32,
    waist: f64,
    wavelength: f64,
    amplitude: f64,
}

impl LGScene {
    pub fn new(
        p: u32,
        l: i32,
        waist: f64,
        wavelength: f64,
        amplitude: f64,
    ) -> Result<Self, ModesError> {
        let mut problems = Vec::new();
        if p > MAX_LAGUERRE_DEGREE {
            return Err(ModesError::UnsupportedDegree { p });
        }
        if !(waist > 0.0 && waist.is_finite()) {
            problems.push("waist must be positive and finite".to_string());
        }
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            problems.push("wavelength must be positive and finite".to_string());
        }
        if !(amplitude.is_finite() && amplitude != 0.0) {
            problems.push("amplitude must be finite and nonzero".to_string());
        }
        if !problems.is_empty() {
            return Err(ModesError::InvalidScene(problems.join("; ")));
        }
        Ok(Self {
            p,
            l,
            waist,
            wavelength,
            amplitude,
        })
    }

    pub fn radial_index(&self) -> u32 {
        self.p
    }

    pub fn azimuthal_index(&self) -> i32 {
        self.l
    }

    pub fn waist(&self) -> f64 {
        self.waist
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Rayleigh range z_R = pi w0^2 / lambda.
    pub fn rayleigh_range(&self) -> f64 {
        PI * self.waist * self.waist / self.wavelength
    }

    /// Beam radius w(z) = w0 sqrt(1 + z^2/z_R^2).
    pub fn beam_radius(&self, z: f64) -> f64 {
        let zr = self.rayleigh_range();
        self.waist * (1.0 + (z / zr).powi(2)).sqrt()
    }
}

/// Associated Laguerre polynomial L_p^l(x) by the three-term recurrence
/// in the degree p.
pub fn laguerre_poly(p: u32, l: u32, x: f64) -> Result<f64, ModesError> {
    if p > MAX_LAGUERRE_DEGREE {
        return Err(ModesError::UnsupportedDegree { p });
    }
    let l = f64::from(l);
    if p == 0 {
        return Ok(1.0);
    }
    let mut prev = 1.0;
    let mut cur = 1.0 + l - x;
    for k in 1..p {
        let k = f64::from(k);
        let next = ((2.0 * k + 1.0 + l - x) * cur - (k + l) * prev) / (k + 1.0);
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

/// Derivative d/dx L_p^l(x) = -L_{p-1}^{l+1}(x) (zero for p = 0).
pub fn laguerre_poly_deriv(p: u32, l: u32, x: f64) -> Result<f64, ModesError> {
    if p == 0 {
        Ok(0.0)
    } else {
        Ok(-laguerre_poly(p - 1, l + 1, x)?)
    }
}

/// Laguerre-Gauss amplitude u_pl(r, phi, z) with its analytic Cartesian
/// gradient.
///
/// All factors of the standard mode are present: the 1/sqrt(1 + z^2/z_R^2)
/// amplitude, the (sqrt(2) r / w)^|l| envelope, the associated Laguerre
/// polynomial, the Gaussian, the spherical phase exp(-i k r^2 z / (2 (z^2 +
/// z_R^2))), the azimuthal phase exp(-i l phi) and the Gouy phase
/// exp(i (2p + |l| + 1) atan(z / z_R)). The radial envelope and polynomial
/// use |l|; the sign of l only sets the sense of the azimuthal phase.
///
/// The r-dependence is grouped as t^|l| g(r^2, z) with t = sqrt(2) s / w and
/// s = x - i sgn(l) y, which keeps the gradient finite on the axis (the
/// closed phase-derivative form would divide by r there) and free of
/// overflow for large |l|.
pub fn lg_u(scene: &LGScene, r: f64, phi: f64, z: f64) -> ComplexSample {
    debug_assert!(r >= 0.0, "radial coordinate must be non-negative");
    let big_l = scene.l.unsigned_abs();
    let lf = f64::from(big_l);
    let sgn = if scene.l >= 0 { 1.0 } else { -1.0 };

    let k = scene.wavenumber();
    let zr = scene.rayleigh_range();
    let gamma = 1.0 + (z / zr) * (z / zr);
    let w2 = scene.waist * scene.waist * gamma;
    let w = w2.sqrt();
    let rho = r * r;
    let xi = 2.0 * rho / w2;
    let zz = z * z + zr * zr; // = zr^2 gamma

    // Far tail: the Gaussian factor underflows long before anything else
    // can overflow, and every derivative carries it too.
    if rho / w2 > 700.0 {
        let zero = Complex64::new(0.0, 0.0);
        return ComplexSample {
            value: zero,
            grad: [zero; 3],
        };
    }

    let x = r * phi.cos();
    let y = r * phi.sin();
    // t^|l| = (sqrt(2) r / w)^|l| exp(-i l phi)
    let t = Complex64::new(x, -sgn * y) * (2.0f64.sqrt() / w);
    let t_pow = t.powu(big_l);

    let lp = laguerre_poly(scene.p, big_l, xi).expect("degree validated at construction");
    let lp_deriv = laguerre_poly_deriv(scene.p, big_l, xi).expect("degree validated");

    let gouy = f64::from(2 * scene.p) + lf + 1.0;
    // Exponent of the scalar factor h = C gamma^(-1/2) exp(e_exp).
    let e_exp = Complex64::new(-rho / w2, -k * rho * z / (2.0 * zz) + gouy * (z / zr).atan());
    let h = scene.amplitude / gamma.sqrt() * e_exp.exp();
    let g = h * lp;

    // d/d(rho) of the scalar factor.
    let de_drho = Complex64::new(-1.0 / w2, -k * z / (2.0 * zz));
    let dg_drho = h * (de_drho * lp + lp_deriv * (2.0 / w2));

    // d/dz, with the -|l| w'/w term from the envelope's 1/w^|l| kept here.
    let dlnh_dz = Complex64::new(
        -z / (zr * zr * gamma) + 2.0 * rho * z / (zr * zr * gamma * w2),
        -k * rho / 2.0 * (zr * zr - z * z) / (zz * zz) + gouy * zr / zz,
    );
    let dxi_dz = -2.0 * xi * z / (zr * zr * gamma);
    let dg_dz = h * (dlnh_dz * lp + lp_deriv * dxi_dz);
    let envelope_dz = -lf * z / (zr * zr * gamma);

    let value = t_pow * g;
    let mut grad = [
        t_pow * dg_drho * (2.0 * x),
        t_pow * dg_drho * (2.0 * y),
        t_pow * (dg_dz + envelope_dz * g),
    ];
    if big_l >= 1 {
        let t_lower = t.powu(big_l - 1) * (2.0f64.sqrt() / w) * lf;
        grad[0] += t_lower * g;
        grad[1] += t_lower * Complex64::new(0.0, -sgn) * g;
    }

    ComplexSample { value, grad }
}
