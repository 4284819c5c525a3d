//! Discrete Hamiltonian-form Maxwell evolution on a staggered periodic
//! lattice, with energy and Poynting-theorem bookkeeping.
//!
//! E components live on cell edges and B components on cell faces (Yee
//! placement), which makes the two discrete curls exact adjoints on the
//! periodic box; the leapfrog update
//!
//!   B -= dt/2 curl E;  E += dt (c^2 curl B - j/eps0);  B -= dt/2 curl E
//!
//! is then time-reversible and free of secular energy growth. A 2-D run is
//! the same lattice with a single periodic cell along z, so every z
//! difference vanishes identically.

use crate::modes::PhysicalConstants;
use ndarray::Array3;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvolverError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("field state shape {found:?} does not match the grid {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("poynting residual needs at least two consecutive states")]
    HistoryTooShort,
}

/// Spatial dimensionality of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GridDims {
    Two,
    Three,
}

impl GridDims {
    pub fn count(self) -> usize {
        match self {
            GridDims::Two => 2,
            GridDims::Three => 3,
        }
    }
}

/// Periodic lattice layout and time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub dims: GridDims,
    /// Cells per non-trivial axis.
    pub cells: usize,
    /// Lattice spacing h (m).
    pub spacing: f64,
    /// Time step (s); negative values step backwards.
    pub dt: f64,
    /// Number of steps a run should take.
    pub steps: usize,
}

impl GridSpec {
    pub fn new(
        dims: GridDims,
        cells: usize,
        spacing: f64,
        dt: f64,
        steps: usize,
        consts: &PhysicalConstants,
    ) -> Result<Self, EvolverError> {
        let mut problems = Vec::new();
        if cells < 8 {
            problems.push(format!("cells = {cells}, need >= 8 per axis"));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            problems.push("spacing must be positive and finite".to_string());
        }
        if !(dt != 0.0 && dt.is_finite()) {
            problems.push("dt must be nonzero and finite".to_string());
        }
        let limit = spacing / (dims.count() as f64).sqrt();
        if !(consts.c * dt.abs() < limit) {
            problems.push(format!(
                "CFL violated: c |dt| = {} must stay below h/sqrt(dims) = {}",
                consts.c * dt.abs(),
                limit
            ));
        }
        if problems.is_empty() {
            Ok(Self {
                dims,
                cells,
                spacing,
                dt,
                steps,
            })
        } else {
            Err(EvolverError::InvalidGrid(problems.join("; ")))
        }
    }

    /// Array shape (nx, ny, nz); a 2-D run has one periodic cell along z.
    pub fn shape(&self) -> (usize, usize, usize) {
        match self.dims {
            GridDims::Two => (self.cells, self.cells, 1),
            GridDims::Three => (self.cells, self.cells, self.cells),
        }
    }

    /// Volume element of one cell (m^3); the 2-D box is one cell deep.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(3)
    }

    /// Same grid stepping backwards in time.
    pub fn reversed(&self) -> Self {
        Self {
            dt: -self.dt,
            ..*self
        }
    }
}

/// E on cell edges, B on cell faces, co-timed at `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub ex: Array3<f64>,
    pub ey: Array3<f64>,
    pub ez: Array3<f64>,
    pub bx: Array3<f64>,
    pub by: Array3<f64>,
    pub bz: Array3<f64>,
    /// Physical time of this state (s).
    pub time: f64,
    /// Number of steps taken to reach this state.
    pub time_index: u64,
}

impl FieldState {
    pub fn zeros(spec: &GridSpec) -> Self {
        let shape = spec.shape();
        Self {
            ex: Array3::zeros(shape),
            ey: Array3::zeros(shape),
            ez: Array3::zeros(shape),
            bx: Array3::zeros(shape),
            by: Array3::zeros(shape),
            bz: Array3::zeros(shape),
            time: 0.0,
            time_index: 0,
        }
    }

    pub fn uniform(spec: &GridSpec, e0: [f64; 3], b0: [f64; 3]) -> Self {
        let shape = spec.shape();
        Self {
            ex: Array3::from_elem(shape, e0[0]),
            ey: Array3::from_elem(shape, e0[1]),
            ez: Array3::from_elem(shape, e0[2]),
            bx: Array3::from_elem(shape, b0[0]),
            by: Array3::from_elem(shape, b0[1]),
            bz: Array3::from_elem(shape, b0[2]),
            time: 0.0,
            time_index: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.ex.dim()
    }

    fn check_shape(&self, spec: &GridSpec) -> Result<(), EvolverError> {
        if self.shape() != spec.shape() {
            return Err(EvolverError::ShapeMismatch {
                expected: spec.shape(),
                found: self.shape(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        [&self.ex, &self.ey, &self.ez, &self.bx, &self.by, &self.bz]
            .iter()
            .all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Relative L2 distance to another state over all six components.
    pub fn rel_l2_distance(&self, other: &Self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        let pairs = [
            (&self.ex, &other.ex),
            (&self.ey, &other.ey),
            (&self.ez, &other.ez),
            (&self.bx, &other.bx),
            (&self.by, &other.by),
            (&self.bz, &other.bz),
        ];
        for (a, b) in pairs {
            for (va, vb) in a.iter().zip(b.iter()) {
                num += (va - vb) * (va - vb);
                den += vb * vb;
            }
        }
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }
}

type SourceFn = dyn Fn(&[f64; 3], f64) -> [f64; 3] + Send + Sync;

/// Optional source current j_q(x, t) in A/m^2, sampled at the E stagger
/// points during the update.
pub struct SourceCurrent {
    f: Option<Box<SourceFn>>,
}

impl SourceCurrent {
    pub fn none() -> Self {
        Self { f: None }
    }

    pub fn new(f: impl Fn(&[f64; 3], f64) -> [f64; 3] + Send + Sync + 'static) -> Self {
        Self { f: Some(Box::new(f)) }
    }

    pub fn is_none(&self) -> bool {
        self.f.is_none()
    }

    fn eval(&self, p: &[f64; 3], t: f64) -> [f64; 3] {
        match &self.f {
            Some(f) => f(p, t),
            None => [0.0; 3],
        }
    }
}

fn wrap(i: usize, delta: isize, n: usize) -> usize {
    (i as isize + delta).rem_euclid(n as isize) as usize
}

/// Discrete curl of the edge field E, landing on the faces.
fn curl_e(
    ex: &Array3<f64>,
    ey: &Array3<f64>,
    ez: &Array3<f64>,
    h: f64,
) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
    let (nx, ny, nz) = ex.dim();
    let mut cx = Array3::zeros((nx, ny, nz));
    let mut cy = Array3::zeros((nx, ny, nz));
    let mut cz = Array3::zeros((nx, ny, nz));
    for i in 0..nx {
        let ip = wrap(i, 1, nx);
        for j in 0..ny {
            let jp = wrap(j, 1, ny);
            for k in 0..nz {
                let kp = wrap(k, 1, nz);
                cx[(i, j, k)] = (ez[(i, jp, k)] - ez[(i, j, k)]) / h
                    - (ey[(i, j, kp)] - ey[(i, j, k)]) / h;
                cy[(i, j, k)] = (ex[(i, j, kp)] - ex[(i, j, k)]) / h
                    - (ez[(ip, j, k)] - ez[(i, j, k)]) / h;
                cz[(i, j, k)] = (ey[(ip, j, k)] - ey[(i, j, k)]) / h
                    - (ex[(i, jp, k)] - ex[(i, j, k)]) / h;
            }
        }
    }
    (cx, cy, cz)
}

/// Discrete curl of the face field B, landing back on the edges; the exact
/// adjoint of [`curl_e`] on the periodic lattice.
fn curl_b(
    bx: &Array3<f64>,
    by: &Array3<f64>,
    bz: &Array3<f64>,
    h: f64,
) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
    let (nx, ny, nz) = bx.dim();
    let mut cx = Array3::zeros((nx, ny, nz));
    let mut cy = Array3::zeros((nx, ny, nz));
    let mut cz = Array3::zeros((nx, ny, nz));
    for i in 0..nx {
        let im = wrap(i, -1, nx);
        for j in 0..ny {
            let jm = wrap(j, -1, ny);
            for k in 0..nz {
                let km = wrap(k, -1, nz);
                cx[(i, j, k)] = (bz[(i, j, k)] - bz[(i, jm, k)]) / h
                    - (by[(i, j, k)] - by[(i, j, km)]) / h;
                cy[(i, j, k)] = (bx[(i, j, k)] - bx[(i, j, km)]) / h
                    - (bz[(i, j, k)] - bz[(im, j, k)]) / h;
                cz[(i, j, k)] = (by[(i, j, k)] - by[(im, j, k)]) / h
                    - (bx[(i, j, k)] - bx[(i, jm, k)]) / h;
            }
        }
    }
    (cx, cy, cz)
}

/// One leapfrog step and the energy it hands to the source charges.
pub struct StepOutcome {
    pub state: FieldState,
    /// Work done on the charges this step, sum E_mid . j dV dt (J). The
    /// field energy changes by minus this for a free-divergence source.
    pub source_work: f64,
}

/// Advance one step: half-kick B, full E update with the source sampled at
/// the half step, half-kick B again. Deterministic; CFL is enforced by the
/// grid spec.
pub fn step(
    state: &FieldState,
    spec: &GridSpec,
    src: &SourceCurrent,
    consts: &PhysicalConstants,
) -> Result<StepOutcome, EvolverError> {
    state.check_shape(spec)?;
    let h = spec.spacing;
    let dt = spec.dt;
    let c2 = consts.c * consts.c;

    let mut next = state.clone();

    // B(t) -> B(t + dt/2)
    let (kx, ky, kz) = curl_e(&next.ex, &next.ey, &next.ez, h);
    next.bx.zip_mut_with(&kx, |b, &k| *b -= 0.5 * dt * k);
    next.by.zip_mut_with(&ky, |b, &k| *b -= 0.5 * dt * k);
    next.bz.zip_mut_with(&kz, |b, &k| *b -= 0.5 * dt * k);

    // E(t) -> E(t + dt)
    let (cx, cy, cz) = curl_b(&next.bx, &next.by, &next.bz, h);
    let t_half = state.time + 0.5 * dt;
    let mut work = 0.0;
    let (nx, ny, nz) = spec.shape();
    let dv = spec.cell_volume();
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let (x, y, z) = (i as f64 * h, j as f64 * h, k as f64 * h);
                let j_at = |p: [f64; 3]| src.eval(&p, t_half);
                let jx = j_at([x + 0.5 * h, y, z])[0];
                let jy = j_at([x, y + 0.5 * h, z])[1];
                let jz = j_at([x, y, z + 0.5 * h])[2];

                let old = [next.ex[(i, j, k)], next.ey[(i, j, k)], next.ez[(i, j, k)]];
                let new = [
                    old[0] + dt * (c2 * cx[(i, j, k)] - jx / consts.eps0),
                    old[1] + dt * (c2 * cy[(i, j, k)] - jy / consts.eps0),
                    old[2] + dt * (c2 * cz[(i, j, k)] - jz / consts.eps0),
                ];
                next.ex[(i, j, k)] = new[0];
                next.ey[(i, j, k)] = new[1];
                next.ez[(i, j, k)] = new[2];
                // E j work accumulated at the half step with the midpoint E.
                work += 0.5
                    * ((old[0] + new[0]) * jx + (old[1] + new[1]) * jy + (old[2] + new[2]) * jz)
                    * dv
                    * dt;
            }
        }
    }

    // B(t + dt/2) -> B(t + dt)
    let (kx, ky, kz) = curl_e(&next.ex, &next.ey, &next.ez, h);
    next.bx.zip_mut_with(&kx, |b, &k| *b -= 0.5 * dt * k);
    next.by.zip_mut_with(&ky, |b, &k| *b -= 0.5 * dt * k);
    next.bz.zip_mut_with(&kz, |b, &k| *b -= 0.5 * dt * k);

    next.time = state.time + dt;
    next.time_index = state.time_index + 1;
    Ok(StepOutcome {
        state: next,
        source_work: work,
    })
}

/// Midpoint-rule integral of the discrete energy density over the box:
/// sum of eps0 E^2/2 + B^2/(2 mu0) per component times the cell volume.
pub fn total_energy(state: &FieldState, spec: &GridSpec, consts: &PhysicalConstants) -> f64 {
    let e2: f64 = state.ex.iter().map(|v| v * v).sum::<f64>()
        + state.ey.iter().map(|v| v * v).sum::<f64>()
        + state.ez.iter().map(|v| v * v).sum::<f64>();
    let b2: f64 = state.bx.iter().map(|v| v * v).sum::<f64>()
        + state.by.iter().map(|v| v * v).sum::<f64>()
        + state.bz.iter().map(|v| v * v).sum::<f64>();
    (0.5 * consts.eps0 * e2 + 0.5 * b2 / consts.mu0) * spec.cell_volume()
}

/// Max and L2 (root-mean-square) norms of the pointwise Poynting-theorem
/// residual between two consecutive states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualNorms {
    pub max_abs: f64,
    pub rms: f64,
}

/// Cell-centred collocation of one state: (E, B, rho, S) per cell.
fn collocate(
    state: &FieldState,
    consts: &PhysicalConstants,
) -> (Vec<[f64; 3]>, Vec<f64>, Vec<[f64; 3]>) {
    let (nx, ny, nz) = state.shape();
    let mut e_c = Vec::with_capacity(nx * ny * nz);
    let mut rho = Vec::with_capacity(nx * ny * nz);
    let mut s = Vec::with_capacity(nx * ny * nz);
    for i in 0..nx {
        let ip = wrap(i, 1, nx);
        for j in 0..ny {
            let jp = wrap(j, 1, ny);
            for k in 0..nz {
                let kp = wrap(k, 1, nz);
                let ex = 0.25
                    * (state.ex[(i, j, k)]
                        + state.ex[(i, jp, k)]
                        + state.ex[(i, j, kp)]
                        + state.ex[(i, jp, kp)]);
                let ey = 0.25
                    * (state.ey[(i, j, k)]
                        + state.ey[(ip, j, k)]
                        + state.ey[(i, j, kp)]
                        + state.ey[(ip, j, kp)]);
                let ez = 0.25
                    * (state.ez[(i, j, k)]
                        + state.ez[(ip, j, k)]
                        + state.ez[(i, jp, k)]
                        + state.ez[(ip, jp, k)]);
                let bx = 0.5 * (state.bx[(i, j, k)] + state.bx[(ip, j, k)]);
                let by = 0.5 * (state.by[(i, j, k)] + state.by[(i, jp, k)]);
                let bz = 0.5 * (state.bz[(i, j, k)] + state.bz[(i, j, kp)]);
                let e = [ex, ey, ez];
                let b = [bx, by, bz];
                e_c.push(e);
                rho.push(
                    0.5 * (consts.eps0 * (ex * ex + ey * ey + ez * ez)
                        + (bx * bx + by * by + bz * bz) / consts.mu0),
                );
                s.push([
                    (e[1] * b[2] - e[2] * b[1]) / consts.mu0,
                    (e[2] * b[0] - e[0] * b[2]) / consts.mu0,
                    (e[0] * b[1] - e[1] * b[0]) / consts.mu0,
                ]);
            }
        }
    }
    (e_c, rho, s)
}

/// Pointwise residual of d rho / dt + div S + E . j between two states,
/// centred at their midpoint time, using second-order differences.
pub fn residual_between(
    a: &FieldState,
    b: &FieldState,
    spec: &GridSpec,
    consts: &PhysicalConstants,
    src: &SourceCurrent,
) -> Result<ResidualNorms, EvolverError> {
    a.check_shape(spec)?;
    b.check_shape(spec)?;
    let (nx, ny, nz) = spec.shape();
    let h = spec.spacing;
    let dt = b.time - a.time;
    let (e_a, rho_a, s_a) = collocate(a, consts);
    let (e_b, rho_b, s_b) = collocate(b, consts);
    let t_mid = 0.5 * (a.time + b.time);
    let idx = |i: usize, j: usize, k: usize| (i * ny + j) * nz + k;

    let mut max_abs = 0.0f64;
    let mut sum_sq = 0.0f64;
    for i in 0..nx {
        let (ip, im) = (wrap(i, 1, nx), wrap(i, -1, nx));
        for j in 0..ny {
            let (jp, jm) = (wrap(j, 1, ny), wrap(j, -1, ny));
            for k in 0..nz {
                let (kp, km) = (wrap(k, 1, nz), wrap(k, -1, nz));
                let c = idx(i, j, k);
                let d_rho = (rho_b[c] - rho_a[c]) / dt;
                let avg_sx = |q: usize| 0.5 * (s_a[q][0] + s_b[q][0]);
                let avg_sy = |q: usize| 0.5 * (s_a[q][1] + s_b[q][1]);
                let avg_sz = |q: usize| 0.5 * (s_a[q][2] + s_b[q][2]);
                let div_s = (avg_sx(idx(ip, j, k)) - avg_sx(idx(im, j, k))) / (2.0 * h)
                    + (avg_sy(idx(i, jp, k)) - avg_sy(idx(i, jm, k))) / (2.0 * h)
                    + (avg_sz(idx(i, j, kp)) - avg_sz(idx(i, j, km))) / (2.0 * h);
                let center = [
                    (i as f64 + 0.5) * h,
                    (j as f64 + 0.5) * h,
                    (k as f64 + 0.5) * h,
                ];
                let jv = src.eval(&center, t_mid);
                let e_mid = [
                    0.5 * (e_a[c][0] + e_b[c][0]),
                    0.5 * (e_a[c][1] + e_b[c][1]),
                    0.5 * (e_a[c][2] + e_b[c][2]),
                ];
                let e_dot_j = e_mid[0] * jv[0] + e_mid[1] * jv[1] + e_mid[2] * jv[2];
                let r = d_rho + div_s + e_dot_j;
                max_abs = max_abs.max(r.abs());
                sum_sq += r * r;
            }
        }
    }
    Ok(ResidualNorms {
        max_abs,
        rms: (sum_sq / (nx * ny * nz) as f64).sqrt(),
    })
}

/// Residual norms for every consecutive pair in a recorded history.
pub fn poynting_residual(
    history: &[FieldState],
    spec: &GridSpec,
    consts: &PhysicalConstants,
    src: &SourceCurrent,
) -> Result<Vec<ResidualNorms>, EvolverError> {
    if history.len() < 2 {
        return Err(EvolverError::HistoryTooShort);
    }
    history
        .windows(2)
        .map(|w| residual_between(&w[0], &w[1], spec, consts, src))
        .collect()
}

/// Per-step record of a full evolution.
#[derive(Debug)]
pub struct EvolveReport {
    /// Total energy before each step plus after the last one (steps + 1).
    pub energies: Vec<f64>,
    /// Cumulative work done on the charges after each step (steps + 1,
    /// starting at zero).
    pub work_cumulative: Vec<f64>,
    /// Residual norms per step pair (empty unless requested).
    pub residuals: Vec<ResidualNorms>,
    /// max_i |energies[i] - energies[0]| / max(energies).
    pub energy_drift: f64,
    pub final_state: FieldState,
}

/// Run `spec.steps` leapfrog steps, recording energy, source work and
/// (optionally) per-step Poynting residual norms.
pub fn run_evolution(
    initial: FieldState,
    spec: &GridSpec,
    src: &SourceCurrent,
    consts: &PhysicalConstants,
    record_residuals: bool,
) -> Result<EvolveReport, EvolverError> {
    initial.check_shape(spec)?;
    let mut energies = Vec::with_capacity(spec.steps + 1);
    let mut work_cumulative = Vec::with_capacity(spec.steps + 1);
    let mut residuals = Vec::new();
    let mut state = initial;
    let mut work = 0.0;
    energies.push(total_energy(&state, spec, consts));
    work_cumulative.push(0.0);
    for _ in 0..spec.steps {
        let out = step(&state, spec, src, consts)?;
        if record_residuals {
            residuals.push(residual_between(&state, &out.state, spec, consts, src)?);
        }
        work += out.source_work;
        state = out.state;
        energies.push(total_energy(&state, spec, consts));
        work_cumulative.push(work);
    }
    let e0 = energies[0];
    let peak = energies.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let energy_drift = energies
        .iter()
        .map(|e| (e - e0).abs())
        .fold(0.0, f64::max)
        / peak;
    Ok(EvolveReport {
        energies,
        work_cumulative,
        residuals,
        energy_drift,
        final_state: state,
    })
}

/// A grid-aligned transverse plane-wave eigenmode of the discrete update:
/// E_y = E0 cos(k x), B_z = (E0/c) chi cos(k x) on their stagger points,
/// where chi = sqrt(1 - (c dt sin(k h / 2)/h)^2) is the discrete impedance
/// correction. Seeded this way the mode evolves exactly time-harmonically,
/// so every quadratic functional of the fields is constant to round-off.
pub fn plane_wave_eigenmode(
    spec: &GridSpec,
    consts: &PhysicalConstants,
    mode: usize,
    amplitude: f64,
) -> FieldState {
    let (nx, _, _) = spec.shape();
    let h = spec.spacing;
    let k = 2.0 * std::f64::consts::PI * mode as f64 / (nx as f64 * h);
    let alpha = consts.c * spec.dt * (0.5 * k * h).sin() / h;
    let chi = (1.0 - alpha * alpha).sqrt();
    let mut state = FieldState::zeros(spec);
    let (sx, sy, sz) = spec.shape();
    for i in 0..sx {
        let e_val = amplitude * (k * (i as f64) * h).cos();
        let b_val = amplitude / consts.c * chi * (k * (i as f64 + 0.5) * h).cos();
        for j in 0..sy {
            for kk in 0..sz {
                state.ey[(i, j, kk)] = e_val;
                state.bz[(i, j, kk)] = b_val;
            }
        }
    }
    state
}

/// Continuum traveling-wave reference for the eigenmode above, sampled on
/// the same stagger points at time t.
pub fn plane_wave_reference(
    spec: &GridSpec,
    consts: &PhysicalConstants,
    mode: usize,
    amplitude: f64,
    t: f64,
) -> FieldState {
    let (nx, _, _) = spec.shape();
    let h = spec.spacing;
    let k = 2.0 * std::f64::consts::PI * mode as f64 / (nx as f64 * h);
    let omega = consts.c * k;
    let mut state = FieldState::zeros(spec);
    let (sx, sy, sz) = spec.shape();
    for i in 0..sx {
        let e_val = amplitude * (k * (i as f64) * h - omega * t).cos();
        let b_val = amplitude / consts.c * (k * (i as f64 + 0.5) * h - omega * t).cos();
        for j in 0..sy {
            for kk in 0..sz {
                state.ey[(i, j, kk)] = e_val;
                state.bz[(i, j, kk)] = b_val;
            }
        }
    }
    state.time = t;
    state
}
