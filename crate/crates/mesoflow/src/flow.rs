//! Energy-flow line tracing over the time-averaged Poynting field.
//!
//! Two parametrizations share one fixed-step RK4 core:
//!
//! * geometric traces integrate dr/dsigma = S/|S| (unit-speed tangent), the
//!   path shape of the flow;
//! * timed traces advance the same path while accumulating transit time
//!   through dt/dsigma = rho_mes/|S|, which is the arc-length form of
//!   c dr/ds = S/rho_mes.
//!
//! Integrating in arc length keeps the point sets of traces with different
//! couplings identical; the coupling only reweights the recorded times and
//! speeds. Where rho_mes crosses zero a timed trace stops at the crossing
//! with an explicit `reversal` terminal instead of integrating through the
//! sign flip.

use crate::emfield::{
    classical_density, cylindrical_to_cartesian, grating_em, grating_poynting_closed, lg_em,
    lg_poynting_closed, meso_density, quantum_potential, EmFieldError,
    MesoParams, QReduction,
};
use crate::modes::{grating_psi, lg_u, GratingScene, LGScene, ModesError, PhysicalConstants};
use crate::numerics::{rk4_step, NumericsError, SampleError, StepControl};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

/// Stagnation floor relative to the scene's peak |S|.
pub const STAGNATION_FLOOR_REL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("seed ({0}, {1}, {2}) lies outside the trace domain", seed[0], seed[1], seed[2])]
    SeedOutOfDomain { seed: [f64; 3] },
    #[error("meso density is not positive at the seed ({0}, {1}, {2})", seed[0], seed[1], seed[2])]
    DegenerateSeedDensity { seed: [f64; 3] },
    #[error("non-finite {op} at ({0}, {1}, {2})", point[0], point[1], point[2])]
    NonFinite { op: &'static str, point: [f64; 3] },
    #[error(transparent)]
    EmField(#[from] EmFieldError),
    #[error(transparent)]
    Modes(#[from] ModesError),
}

/// Why a trace stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Terminal {
    DomainExit,
    MaxSteps,
    Stagnation,
    Node,
    Reversal,
}

impl Terminal {
    pub fn as_str(self) -> &'static str {
        match self {
            Terminal::DomainExit => "domain-exit",
            Terminal::MaxSteps => "max-steps",
            Terminal::Stagnation => "stagnation",
            Terminal::Node => "node",
            Terminal::Reversal => "reversal",
        }
    }
}

/// Per-point diagnostics recorded along a flow line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointDiag {
    /// Time-averaged Poynting vector (W/m^2).
    pub s: [f64; 3],
    /// Classical density (J/m^3).
    pub rho_cl: f64,
    /// Quantum-potential density (J/m^3). Zero at degenerate seed points
    /// where the amplitude sits below the node floor.
    pub q: f64,
    /// Interpolated meso-density (J/m^3).
    pub rho_mes: f64,
}

/// One traced energy-flow line.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowLine {
    pub seed: [f64; 3],
    pub points: Vec<[f64; 3]>,
    /// Cumulative arc length per point (m); strictly increasing.
    pub arc_s: Vec<f64>,
    /// Cumulative transit time per point (s); empty for geometric traces.
    pub time_t: Vec<f64>,
    pub diag: Vec<PointDiag>,
    pub terminal: Terminal,
}

impl FlowLine {
    /// Local flow speed |S|/rho_mes at a recorded point (m/s).
    pub fn speed(&self, index: usize) -> f64 {
        let d = &self.diag[index];
        norm3(&d.s) / d.rho_mes
    }

    pub fn total_arc(&self) -> f64 {
        *self.arc_s.last().unwrap_or(&0.0)
    }

    /// Linear interpolation of the polyline at a given arc length.
    pub fn point_at_arc(&self, s: f64) -> [f64; 3] {
        if self.points.len() <= 1 || s <= 0.0 {
            return self.points[0];
        }
        let last = self.total_arc();
        if s >= last {
            return *self.points.last().unwrap();
        }
        let idx = match self
            .arc_s
            .binary_search_by(|a| a.partial_cmp(&s).unwrap())
        {
            Ok(i) => return self.points[i],
            Err(i) => i,
        };
        let (s0, s1) = (self.arc_s[idx - 1], self.arc_s[idx]);
        let w = (s - s0) / (s1 - s0);
        let (p0, p1) = (self.points[idx - 1], self.points[idx]);
        [
            p0[0] + w * (p1[0] - p0[0]),
            p0[1] + w * (p1[1] - p0[1]),
            p0[2] + w * (p1[2] - p0[2]),
        ]
    }

    /// Check the structural invariants; used by tests.
    pub fn check_invariants(&self, max_step: f64) -> Result<(), String> {
        if self.points.len() != self.diag.len() || self.points.len() != self.arc_s.len() {
            return Err("diag/arc arrays must match the point count".to_string());
        }
        if !self.time_t.is_empty() && self.time_t.len() != self.points.len() {
            return Err("time array must match the point count when present".to_string());
        }
        for i in 1..self.points.len() {
            if self.arc_s[i] <= self.arc_s[i - 1] {
                return Err(format!("arc length not strictly increasing at {i}"));
            }
            let d = dist3(&self.points[i], &self.points[i - 1]);
            if d > max_step * (1.0 + 1e-12) {
                return Err(format!("step {i} exceeds max_step: {d}"));
            }
        }
        Ok(())
    }
}

/// Evenly spaced seed points on a segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeedSpec {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub count: usize,
}

impl SeedSpec {
    pub fn new(start: [f64; 3], end: [f64; 3], count: usize) -> Result<Self, FlowError> {
        if count == 0 {
            return Err(FlowError::NonFinite {
                op: "seed count must be >= 1",
                point: start,
            });
        }
        Ok(Self { start, end, count })
    }

    pub fn seeds(&self) -> Vec<[f64; 3]> {
        if self.count == 1 {
            return vec![self.start];
        }
        (0..self.count)
            .map(|i| {
                let w = i as f64 / (self.count - 1) as f64;
                [
                    self.start[0] + w * (self.end[0] - self.start[0]),
                    self.start[1] + w * (self.end[1] - self.start[1]),
                    self.start[2] + w * (self.end[2] - self.start[2]),
                ]
            })
            .collect()
    }
}

/// Axis-aligned box a trace is allowed to roam in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceDomain {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl TraceDomain {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// A scene exposed to the tracer: Poynting vector, classical density and
/// the scalar-mode modulus that feeds the quantum potential.
///
/// Implementations check only the physical domain of the field (such as
/// y >= 0 behind a grating); the trace box is enforced by the tracer.
pub trait EnergyFlowField: Sync {
    fn poynting(&self, p: &[f64; 3]) -> Result<[f64; 3], SampleError>;
    fn rho_cl(&self, p: &[f64; 3]) -> Result<f64, SampleError>;
    fn amplitude(&self, p: &[f64; 3]) -> Result<f64, SampleError>;
    fn wavenumber(&self) -> f64;
    fn domain(&self) -> TraceDomain;
    /// Peak |S| scale of the scene (for the relative stagnation floor).
    fn peak_poynting(&self) -> f64;
    /// Peak classical density of the scene (the rho_ref of eq-style Q).
    fn peak_rho_cl(&self) -> f64;
    /// Peak mode modulus of the scene (for the node floor).
    fn peak_amplitude(&self) -> f64;

    /// Meso parameters bound to this scene's reference scales.
    fn meso_params(
        &self,
        coupling: f64,
        q_scale: f64,
        reduction: QReduction,
    ) -> Result<MesoParams, EmFieldError> {
        MesoParams::new(
            coupling,
            q_scale,
            reduction,
            self.peak_rho_cl(),
            MesoParams::default_floor(self.peak_amplitude()),
        )
    }
}

/// dy/dx slope of the in-plane flow, S_y / S_x.
pub fn slope(sx: f64, sy: f64) -> Result<f64, FlowError> {
    if sx == 0.0 {
        return Err(FlowError::NonFinite {
            op: "slope: vertical tangent (S_x = 0)",
            point: [0.0; 3],
        });
    }
    Ok(sy / sx)
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Outcome of sampling the full diagnostics at a point.
enum DiagOutcome {
    Ok(PointDiag),
    Terminal(Terminal),
    Hard(FlowError),
}

fn diag_at<F: EnergyFlowField + ?Sized>(
    field: &F,
    meso: &MesoParams,
    p: &[f64; 3],
    floor: f64,
) -> DiagOutcome {
    let s = match field.poynting(p) {
        Ok(s) => s,
        Err(SampleError::OutOfDomain) => return DiagOutcome::Terminal(Terminal::DomainExit),
        Err(SampleError::BelowFloor) => return DiagOutcome::Terminal(Terminal::Stagnation),
        Err(SampleError::NonFinite) => {
            return DiagOutcome::Hard(FlowError::NonFinite {
                op: "poynting sample",
                point: *p,
            })
        }
    };
    let n = norm3(&s);
    if !n.is_finite() {
        return DiagOutcome::Hard(FlowError::NonFinite {
            op: "poynting sample",
            point: *p,
        });
    }
    if n < floor {
        return DiagOutcome::Terminal(Terminal::Stagnation);
    }
    let rho_cl = match field.rho_cl(p) {
        Ok(v) => v,
        Err(SampleError::OutOfDomain) => return DiagOutcome::Terminal(Terminal::DomainExit),
        Err(_) => {
            return DiagOutcome::Hard(FlowError::NonFinite {
                op: "classical density sample",
                point: *p,
            })
        }
    };
    let q = match quantum_potential(|x| field.amplitude(x), p, meso, field.wavenumber()) {
        Ok(q) => q,
        Err(EmFieldError::Node { .. }) => return DiagOutcome::Terminal(Terminal::Node),
        Err(EmFieldError::AmplitudeSample(SampleError::OutOfDomain))
        | Err(EmFieldError::Numerics(NumericsError::Sample {
            source: SampleError::OutOfDomain,
            ..
        })) => return DiagOutcome::Terminal(Terminal::DomainExit),
        Err(_) => {
            return DiagOutcome::Hard(FlowError::NonFinite {
                op: "quantum potential",
                point: *p,
            })
        }
    };
    let d = meso_density(rho_cl, q, meso.coupling);
    if !(d.rho_cl.is_finite() && d.q.is_finite() && d.rho_mes.is_finite()) {
        return DiagOutcome::Hard(FlowError::NonFinite {
            op: "density breakdown",
            point: *p,
        });
    }
    DiagOutcome::Ok(PointDiag {
        s,
        rho_cl: d.rho_cl,
        q: d.q,
        rho_mes: d.rho_mes,
    })
}

/// Degenerate diagnostics for a seed that is already terminal; Q is
/// recorded as zero because the amplitude quotient is undefined there.
fn seed_diag<F: EnergyFlowField + ?Sized>(
    field: &F,
    meso: &MesoParams,
    p: &[f64; 3],
) -> Result<PointDiag, FlowError> {
    let s = field.poynting(p).unwrap_or([0.0; 3]);
    let rho_cl = field.rho_cl(p).unwrap_or(0.0);
    let d = meso_density(rho_cl, 0.0, meso.coupling);
    Ok(PointDiag {
        s,
        rho_cl: d.rho_cl,
        q: d.q,
        rho_mes: d.rho_mes,
    })
}

struct TraceBuilder {
    seed: [f64; 3],
    points: Vec<[f64; 3]>,
    arc_s: Vec<f64>,
    time_t: Vec<f64>,
    diag: Vec<PointDiag>,
}

impl TraceBuilder {
    fn new(seed: [f64; 3], timed: bool, first: PointDiag) -> Self {
        Self {
            seed,
            points: vec![seed],
            arc_s: vec![0.0],
            time_t: if timed { vec![0.0] } else { Vec::new() },
            diag: vec![first],
        }
    }

    fn push(&mut self, p: [f64; 3], s: f64, t: Option<f64>, d: PointDiag) {
        self.points.push(p);
        self.arc_s.push(s);
        if let Some(t) = t {
            self.time_t.push(t);
        }
        self.diag.push(d);
    }

    fn finish(self, terminal: Terminal) -> FlowLine {
        FlowLine {
            seed: self.seed,
            points: self.points,
            arc_s: self.arc_s,
            time_t: self.time_t,
            diag: self.diag,
            terminal,
        }
    }
}

/// Geometric trace: integrates the unit tangent of S. The trace of this
/// curve equals the trace of the timed flow wherever rho_mes > 0, so the
/// path shape is independent of the coupling by construction.
pub fn trace_geometric<F: EnergyFlowField + ?Sized>(
    field: &F,
    meso: &MesoParams,
    seed: [f64; 3],
    ctl: &StepControl,
) -> Result<FlowLine, FlowError> {
    trace_inner(field, meso, seed, ctl, false)
}

/// Timed trace: same path as the geometric trace plus cumulative transit
/// time from dt/dsigma = rho_mes/|S|. Requires rho_mes(seed) > 0; if
/// rho_mes crosses zero along the path the trace ends at the crossing with
/// terminal `reversal`.
pub fn trace_timed<F: EnergyFlowField + ?Sized>(
    field: &F,
    meso: &MesoParams,
    seed: [f64; 3],
    ctl: &StepControl,
) -> Result<FlowLine, FlowError> {
    trace_inner(field, meso, seed, ctl, true)
}

fn trace_inner<F: EnergyFlowField + ?Sized>(
    field: &F,
    meso: &MesoParams,
    seed: [f64; 3],
    ctl: &StepControl,
    timed: bool,
) -> Result<FlowLine, FlowError> {
    let domain = field.domain();
    if !domain.contains(&seed) {
        return Err(FlowError::SeedOutOfDomain { seed });
    }
    let floor = STAGNATION_FLOOR_REL * field.peak_poynting();

    let first = match diag_at(field, meso, &seed, floor) {
        DiagOutcome::Ok(d) => d,
        DiagOutcome::Terminal(t) => {
            let d = seed_diag(field, meso, &seed)?;
            return Ok(TraceBuilder::new(seed, timed, d).finish(t));
        }
        DiagOutcome::Hard(e) => return Err(e),
    };
    if timed && first.rho_mes <= 0.0 {
        return Err(FlowError::DegenerateSeedDensity { seed });
    }

    // dr/dsigma = S/|S|; the optional fourth component integrates
    // dt/dsigma = rho_mes/|S|.
    let deriv = |p: &[f64; 3]| -> Result<[f64; 4], SampleError> {
        let s = field.poynting(p)?;
        let n = norm3(&s);
        if !n.is_finite() {
            return Err(SampleError::NonFinite);
        }
        if n < floor {
            return Err(SampleError::BelowFloor);
        }
        let dt = if timed {
            let rho_cl = field.rho_cl(p)?;
            let q = match quantum_potential(|x| field.amplitude(x), p, meso, field.wavenumber()) {
                Ok(q) => q,
                Err(EmFieldError::Node { .. }) => return Err(SampleError::BelowFloor),
                Err(EmFieldError::AmplitudeSample(e)) => return Err(e),
                Err(EmFieldError::Numerics(NumericsError::Sample { source, .. })) => {
                    return Err(source)
                }
                Err(_) => return Err(SampleError::NonFinite),
            };
            meso_density(rho_cl, q, meso.coupling).rho_mes / n
        } else {
            0.0
        };
        Ok([s[0] / n, s[1] / n, s[2] / n, dt])
    };
    let step_from = |state: &[f64; 4], h: f64| -> Result<[f64; 4], NumericsError> {
        rk4_step(
            |y: &[f64; 4]| {
                let p = [y[0], y[1], y[2]];
                deriv(&p)
            },
            state,
            h,
        )
    };

    let mut builder = TraceBuilder::new(seed, timed, first);
    let mut state = [seed[0], seed[1], seed[2], 0.0];
    let mut arc = 0.0;
    let nominal = ctl.initial_step.min(ctl.max_step);

    let terminal = 'walk: loop {
        if builder.points.len() > ctl.max_steps {
            break Terminal::MaxSteps;
        }

        // Fixed step; halve only while a sample fails inside the stage
        // evaluations, and stop with the failure's meaning at min_step.
        let mut h = nominal;
        let next = loop {
            match step_from(&state, h) {
                Ok(next) => break next,
                Err(NumericsError::Sample { source, .. }) => {
                    let would_be = match source {
                        SampleError::OutOfDomain => Terminal::DomainExit,
                        // Node floors inside the stage also surface as
                        // BelowFloor; the accepted-point diag is what
                        // distinguishes a node from a stagnation point.
                        SampleError::BelowFloor => Terminal::Stagnation,
                        SampleError::NonFinite => {
                            return Err(FlowError::NonFinite {
                                op: "flow derivative",
                                point: [state[0], state[1], state[2]],
                            })
                        }
                    };
                    h *= 0.5;
                    if h < ctl.min_step {
                        break 'walk would_be;
                    }
                }
                Err(NumericsError::NonFinite { .. }) => {
                    return Err(FlowError::NonFinite {
                        op: "flow derivative",
                        point: [state[0], state[1], state[2]],
                    })
                }
                Err(e) => {
                    return Err(FlowError::EmField(EmFieldError::Numerics(e)));
                }
            }
        };

        let next_p = [next[0], next[1], next[2]];
        if !domain.contains(&next_p) {
            break Terminal::DomainExit;
        }
        let d = match diag_at(field, meso, &next_p, floor) {
            DiagOutcome::Ok(d) => d,
            DiagOutcome::Terminal(t) => break t,
            DiagOutcome::Hard(e) => return Err(e),
        };
        if timed && d.rho_mes <= 0.0 {
            // Locate the rho_mes crossing along this step by bisecting the
            // substep length, then stop there.
            let mut lo = 0.0f64;
            let mut hi = h;
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                let probe = match step_from(&state, mid) {
                    Ok(p) => p,
                    Err(_) => break,
                };
                let pp = [probe[0], probe[1], probe[2]];
                match diag_at(field, meso, &pp, floor) {
                    DiagOutcome::Ok(pd) if pd.rho_mes > 0.0 => lo = mid,
                    _ => hi = mid,
                }
            }
            if lo > 0.0 {
                if let Ok(cross) = step_from(&state, lo) {
                    let cp = [cross[0], cross[1], cross[2]];
                    if let DiagOutcome::Ok(cd) = diag_at(field, meso, &cp, floor) {
                        arc += lo;
                        builder.push(cp, arc, timed.then_some(cross[3]), cd);
                    }
                }
            }
            break Terminal::Reversal;
        }

        arc += h;
        state = next;
        builder.push(next_p, arc, timed.then_some(next[3]), d);
    };

    Ok(builder.finish(terminal))
}

/// Largest pointwise distance between two lines compared at matched arc
/// lengths over their common arc range.
pub fn matched_arc_deviation(a: &FlowLine, b: &FlowLine) -> f64 {
    let common = a.total_arc().min(b.total_arc());
    let samples = 257;
    let mut max_dev = 0.0f64;
    for i in 0..samples {
        let s = common * i as f64 / (samples - 1) as f64;
        max_dev = max_dev.max(dist3(&a.point_at_arc(s), &b.point_at_arc(s)));
    }
    max_dev
}

/// Trace parametrization requested from a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceMode {
    Geometric,
    Timed,
}

/// Deviation metric for one coupling pair of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairDeviation {
    pub coupling_a: f64,
    pub coupling_b: f64,
    pub max_deviation: f64,
}

/// Result of a coupling sweep: one batch of lines per coupling, identical
/// seeds, plus matched-arc path-deviation metrics per coupling pair.
#[derive(Debug)]
pub struct SweepResult {
    pub couplings: Vec<f64>,
    /// lines[coupling_index][seed_index]
    pub lines: Vec<Vec<Result<FlowLine, FlowError>>>,
    pub pair_deviations: Vec<PairDeviation>,
    pub max_path_deviation: f64,
}

/// Trace every seed under every coupling. Individual line failures are
/// recorded without aborting the batch; output order is fixed by the
/// (coupling, seed) indices regardless of worker scheduling.
pub fn sweep_coupling<F: EnergyFlowField + ?Sized>(
    field: &F,
    seeds: &SeedSpec,
    couplings: &[f64],
    ctl: &StepControl,
    mode: TraceMode,
    q_scale: f64,
    reduction: QReduction,
) -> Result<SweepResult, FlowError> {
    let seed_points = seeds.seeds();
    let mut jobs = Vec::new();
    for (ci, &coupling) in couplings.iter().enumerate() {
        let meso = field.meso_params(coupling, q_scale, reduction)?;
        for (si, &seed) in seed_points.iter().enumerate() {
            jobs.push((ci, si, meso, seed));
        }
    }

    let mut results: Vec<Vec<Result<FlowLine, FlowError>>> = couplings
        .iter()
        .map(|_| Vec::with_capacity(seed_points.len()))
        .collect();
    let traced: Vec<(usize, usize, Result<FlowLine, FlowError>)> = jobs
        .into_par_iter()
        .map(|(ci, si, meso, seed)| {
            let line = match mode {
                TraceMode::Geometric => trace_geometric(field, &meso, seed, ctl),
                TraceMode::Timed => trace_timed(field, &meso, seed, ctl),
            };
            (ci, si, line)
        })
        .collect();
    let mut ordered = traced;
    ordered.sort_by_key(|(ci, si, _)| (*ci, *si));
    for (ci, _, line) in ordered {
        results[ci].push(line);
    }

    let mut pair_deviations = Vec::new();
    let mut max_path_deviation = 0.0f64;
    for i in 0..couplings.len() {
        for j in (i + 1)..couplings.len() {
            let mut pair_max = 0.0f64;
            for (la, lb) in results[i].iter().zip(&results[j]) {
                if let (Ok(a), Ok(b)) = (la, lb) {
                    pair_max = pair_max.max(matched_arc_deviation(a, b));
                }
            }
            max_path_deviation = max_path_deviation.max(pair_max);
            pair_deviations.push(PairDeviation {
                coupling_a: couplings[i],
                coupling_b: couplings[j],
                max_deviation: pair_max,
            });
        }
    }

    Ok(SweepResult {
        couplings: couplings.to_vec(),
        lines: results,
        pair_deviations,
        max_path_deviation,
    })
}

/// Grating scene adapter: closed-form Poynting flow in the x-y plane with
/// z frozen (S_z = 0 exactly), densities from the assembled fields.
pub struct GratingFlowField {
    scene: GratingScene,
    consts: PhysicalConstants,
    domain: TraceDomain,
    peak_s: f64,
    peak_rho: f64,
    peak_amp: f64,
}

impl GratingFlowField {
    /// Probes the peak field scales over one period of the scene inside
    /// the domain (deterministic coarse grid).
    pub fn new(
        scene: GratingScene,
        consts: PhysicalConstants,
        domain: TraceDomain,
    ) -> Result<Self, FlowError> {
        let y_lo = domain.min[1].max(0.0);
        let y_hi = domain.max[1].max(y_lo);
        let mut peak_s = 0.0f64;
        let mut peak_rho = 0.0f64;
        let mut peak_amp = 0.0f64;
        let n = 64;
        for i in 0..n {
            let x = scene.period() * (i as f64 + 0.5) / n as f64;
            for j in 0..=n {
                let y = y_lo + (y_hi - y_lo) * j as f64 / n as f64;
                let s = grating_poynting_closed(&scene, &consts, x, y)?;
                peak_s = peak_s.max((s[0] * s[0] + s[1] * s[1]).sqrt());
                let em = grating_em(&scene, &consts, x, y)?;
                peak_rho = peak_rho.max(classical_density(&em, &consts));
                peak_amp = peak_amp.max(grating_psi(&scene, x, y)?.value.norm());
            }
        }
        Ok(Self {
            scene,
            consts,
            domain,
            peak_s,
            peak_rho,
            peak_amp,
        })
    }

    pub fn scene(&self) -> &GratingScene {
        &self.scene
    }

    pub fn constants(&self) -> &PhysicalConstants {
        &self.consts
    }
}

fn modes_err_to_sample(e: &ModesError) -> SampleError {
    match e {
        ModesError::BehindGrating { .. } => SampleError::OutOfDomain,
        _ => SampleError::NonFinite,
    }
}

impl EnergyFlowField for GratingFlowField {
    fn poynting(&self, p: &[f64; 3]) -> Result<[f64; 3], SampleError> {
        grating_poynting_closed(&self.scene, &self.consts, p[0], p[1]).map_err(|e| match e {
            EmFieldError::Modes(m) => modes_err_to_sample(&m),
            _ => SampleError::NonFinite,
        })
    }

    fn rho_cl(&self, p: &[f64; 3]) -> Result<f64, SampleError> {
        let em = grating_em(&self.scene, &self.consts, p[0], p[1]).map_err(|e| match e {
            EmFieldError::Modes(m) => modes_err_to_sample(&m),
            _ => SampleError::NonFinite,
        })?;
        Ok(classical_density(&em, &self.consts))
    }

    fn amplitude(&self, p: &[f64; 3]) -> Result<f64, SampleError> {
        grating_psi(&self.scene, p[0], p[1])
            .map(|s| s.value.norm())
            .map_err(|e| modes_err_to_sample(&e))
    }

    fn wavenumber(&self) -> f64 {
        self.scene.wavenumber()
    }

    fn domain(&self) -> TraceDomain {
        self.domain
    }

    fn peak_poynting(&self) -> f64 {
        self.peak_s
    }

    fn peak_rho_cl(&self) -> f64 {
        self.peak_rho
    }

    fn peak_amplitude(&self) -> f64 {
        self.peak_amp
    }
}

/// Laguerre-Gauss scene adapter traced in full 3-space. The flow follows
/// the closed-form spiral Poynting field; densities come from the
/// assembled paraxial E and B.
pub struct LGFlowField {
    scene: LGScene,
    consts: PhysicalConstants,
    domain: TraceDomain,
    peak_s: f64,
    peak_rho: f64,
    peak_amp: f64,
}

impl LGFlowField {
    /// Probes peak scales over an (r, z) slice; |u| is azimuthally
    /// invariant so one azimuth suffices.
    pub fn new(scene: LGScene, consts: PhysicalConstants, domain: TraceDomain) -> Self {
        let r_max = domain.max[0]
            .abs()
            .max(domain.max[1].abs())
            .max(domain.min[0].abs())
            .max(domain.min[1].abs())
            .max(3.0 * scene.waist());
        let mut peak_s = 0.0f64;
        let mut peak_rho = 0.0f64;
        let mut peak_amp = 0.0f64;
        let (nr, nz) = (96, 33);
        for i in 0..=nr {
            let r = r_max * i as f64 / nr as f64;
            for j in 0..=nz {
                let z = domain.min[2] + (domain.max[2] - domain.min[2]) * j as f64 / nz as f64;
                let s = lg_poynting_closed(&scene, &consts, r, 0.0, z);
                peak_s = peak_s.max(norm3(&s));
                let em = lg_em(&scene, &consts, r, 0.0, z);
                peak_rho = peak_rho.max(classical_density(&em, &consts));
                peak_amp = peak_amp.max(lg_u(&scene, r, 0.0, z).value.norm());
            }
        }
        Self {
            scene,
            consts,
            domain,
            peak_s,
            peak_rho,
            peak_amp,
        }
    }

    pub fn scene(&self) -> &LGScene {
        &self.scene
    }

    pub fn constants(&self) -> &PhysicalConstants {
        &self.consts
    }
}

impl EnergyFlowField for LGFlowField {
    fn poynting(&self, p: &[f64; 3]) -> Result<[f64; 3], SampleError> {
        let r = p[0].hypot(p[1]);
        let phi = p[1].atan2(p[0]);
        let s = lg_poynting_closed(&self.scene, &self.consts, r, phi, p[2]);
        Ok(cylindrical_to_cartesian(&s, phi))
    }

    fn rho_cl(&self, p: &[f64; 3]) -> Result<f64, SampleError> {
        let em = lg_em(&self.scene, &self.consts, p[0], p[1], p[2]);
        Ok(classical_density(&em, &self.consts))
    }

    fn amplitude(&self, p: &[f64; 3]) -> Result<f64, SampleError> {
        let r = p[0].hypot(p[1]);
        let phi = p[1].atan2(p[0]);
        Ok(lg_u(&self.scene, r, phi, p[2]).value.norm())
    }

    fn wavenumber(&self) -> f64 {
        self.scene.wavenumber()
    }

    fn domain(&self) -> TraceDomain {
        self.domain
    }

    fn peak_poynting(&self) -> f64 {
        self.peak_s
    }

    fn peak_rho_cl(&self) -> f64 {
        self.peak_rho
    }

    fn peak_amplitude(&self) -> f64 {
        self.peak_amp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modes::SignBranch;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    /// Synthetic field with a constant Poynting vector.
    struct UniformField(pub [f64; 3]);

    impl EnergyFlowField for UniformField {
        fn poynting(&self, _p: &[f64; 3]) -> Result<[f64; 3], SampleError> {
            Ok(self.0)
        }
        fn rho_cl(&self, _p: &[f64; 3]) -> Result<f64, SampleError> {
            Ok(1.0)
        }
        fn amplitude(&self, _p: &[f64; 3]) -> Result<f64, SampleError> {
            Ok(1.0)
        }
        fn wavenumber(&self) -> f64 {
            1.0
        }
        fn domain(&self) -> TraceDomain {
            TraceDomain {
                min: [-100.0; 3],
                max: [100.0; 3],
            }
        }
        fn peak_poynting(&self) -> f64 {
            norm3(&self.0)
        }
        fn peak_rho_cl(&self) -> f64 {
            1.0
        }
        fn peak_amplitude(&self) -> f64 {
            1.0
        }
    }

    /// Synthetic circular field S = phi_hat, scaled by an arbitrary factor.
    struct CircularField {
        scale: f64,
    }

    impl EnergyFlowField for CircularField {
        fn poynting(&self, p: &[f64; 3]) -> Result<[f64; 3], SampleError> {
            let r = p[0].hypot(p[1]);
            if r == 0.0 {
                return Ok([0.0; 3]);
            }
            Ok([-self.scale * p[1] / r, self.scale * p[0] / r, 0.0])
        }
        fn rho_cl(&self, _p: &[f64; 3]) -> Result<f64, SampleError> {
            Ok(1.0)
        }
        fn amplitude(&self, _p: &[f64; 3]) -> Result<f64, SampleError> {
            Ok(1.0)
        }
        fn wavenumber(&self) -> f64 {
            1.0
        }
        fn domain(&self) -> TraceDomain {
            TraceDomain {
                min: [-10.0; 3],
                max: [10.0; 3],
            }
        }
        fn peak_poynting(&self) -> f64 {
            self.scale
        }
        fn peak_rho_cl(&self) -> f64 {
            1.0
        }
        fn peak_amplitude(&self) -> f64 {
            1.0
        }
    }

    fn meso_unit(coupling: f64) -> MesoParams {
        MesoParams::new(coupling, 1.0, QReduction::Transverse, 1.0, 0.0).unwrap()
    }

    #[test]
    fn uniform_flow_is_a_straight_line() {
        let field = UniformField([0.0, 2.5, 0.0]);
        let ctl = StepControl::new(0.1, 1e-6, 0.1, 1e-8, 50).unwrap();
        let line = trace_geometric(&field, &meso_unit(1.0), [1.0, 0.0, 0.0], &ctl).unwrap();
        assert_eq!(line.terminal, Terminal::MaxSteps);
        for p in &line.points {
            assert_relative_eq!(p[0], 1.0, epsilon = 1e-14);
            assert_eq!(p[2], 0.0);
        }
        assert_relative_eq!(line.total_arc(), 5.0, max_relative = 1e-12);
        line.check_invariants(0.1).unwrap();
    }

    #[test]
    fn circular_flow_closes_on_itself() {
        let field = CircularField { scale: 1.0 };
        let ctl = StepControl::for_scale(1.0, 1e-8, 400);
        let line = trace_geometric(&field, &meso_unit(1.0), [1.0, 0.0, 0.0], &ctl).unwrap();
        // Walk just past one revolution and check the radius drift.
        let mut max_drift = 0.0f64;
        for p in &line.points {
            if line.total_arc() >= 2.0 * PI {
                max_drift = max_drift.max((p[0].hypot(p[1]) - 1.0).abs());
            }
        }
        assert!(line.total_arc() > 2.0 * PI, "trace too short");
        assert!(max_drift < 1e-6, "radius drift {max_drift}");
    }

    #[test]
    fn geometric_trace_ignores_field_scaling() {
        let a = CircularField { scale: 1.0 };
        let b = CircularField { scale: 3.7e5 };
        let ctl = StepControl::for_scale(1.0, 1e-8, 150);
        let seed = [1.0, 0.0, 0.0];
        let la = trace_geometric(&a, &meso_unit(1.0), seed, &ctl).unwrap();
        let lb = trace_geometric(&b, &meso_unit(1.0), seed, &ctl).unwrap();
        assert_eq!(la.points.len(), lb.points.len());
        for (pa, pb) in la.points.iter().zip(&lb.points) {
            assert!(dist3(pa, pb) <= 1e-9);
        }
    }

    #[test]
    fn stagnation_seed_yields_zero_length_line() {
        let field = CircularField { scale: 1.0 };
        let ctl = StepControl::new(0.1, 1e-6, 0.1, 1e-8, 50).unwrap();
        let line = trace_geometric(&field, &meso_unit(1.0), [0.0, 0.0, 0.0], &ctl).unwrap();
        assert_eq!(line.terminal, Terminal::Stagnation);
        assert_eq!(line.points.len(), 1);
        assert_eq!(line.total_arc(), 0.0);
    }

    #[test]
    fn domain_exit_terminates_cleanly() {
        let field = UniformField([0.0, 1.0, 0.0]);
        let ctl = StepControl::new(0.5, 1e-6, 0.5, 1e-8, 100_000).unwrap();
        let line = trace_geometric(&field, &meso_unit(1.0), [0.0, 99.0, 0.0], &ctl).unwrap();
        assert_eq!(line.terminal, Terminal::DomainExit);
        assert!(line.points.last().unwrap()[1] <= 100.0);
    }

    #[test]
    fn slope_basics() {
        assert_eq!(slope(1.0, 2.0).unwrap(), 2.0);
        assert_eq!(slope(3.0, 0.0).unwrap(), 0.0);
        assert!(slope(0.0, 1.0).is_err());
    }

    fn grating_field(duty: f64) -> GratingFlowField {
        let lambda = 1.0e-6;
        let scene =
            GratingScene::new(lambda, 5.0 * lambda, duty, 8, 1.0, 0.0, SignBranch::Upper).unwrap();
        let domain = TraceDomain {
            min: [-20.0 * lambda, 0.0, -lambda],
            max: [20.0 * lambda, 15.0 * lambda, lambda],
        };
        GratingFlowField::new(scene, PhysicalConstants::si(), domain).unwrap()
    }

    #[test]
    fn slope_matches_closed_form_ratio() {
        let field = grating_field(0.5);
        let p = [0.7e-6, 2.1e-6, 0.0];
        let s = field.poynting(&p).unwrap();
        let closed =
            grating_poynting_closed(field.scene(), field.constants(), p[0], p[1]).unwrap();
        assert_relative_eq!(
            slope(s[0], s[1]).unwrap(),
            closed[1] / closed[0],
            max_relative = 1e-14
        );
    }

    #[test]
    fn plane_wave_timed_trace_moves_at_light_speed() {
        // duty = 1 turns the grating into a single forward plane wave with
        // |S| = c rho_cl exactly.
        let field = grating_field(1.0);
        let lambda = field.scene().wavelength();
        let c = field.constants().c;
        let ctl = StepControl::new(lambda / 20.0, 1e-9 * lambda, lambda / 20.0, 1e-8, 40).unwrap();
        let meso = field.meso_params(1.0, 1.0, QReduction::Transverse).unwrap();
        let line = trace_timed(&field, &meso, [0.3e-6, 0.5e-6, 0.0], &ctl).unwrap();
        assert!(line.points.len() > 30);
        for i in 0..line.points.len() {
            assert_relative_eq!(line.speed(i), c, max_relative = 1e-10);
        }
        // Cumulative time equals arc length over c.
        for (s, t) in line.arc_s.iter().zip(&line.time_t) {
            assert_relative_eq!(*t, s / c, max_relative = 1e-9, epsilon = 1e-30);
        }
        // Q vanishes for the uniform plane wave, so the timed path
        // coincides with the geometric one for any coupling.
        for coupling in [0.0, 0.5] {
            let m = field.meso_params(coupling, 1.0, QReduction::Transverse).unwrap();
            let timed = trace_timed(&field, &m, [0.3e-6, 0.5e-6, 0.0], &ctl).unwrap();
            let geo = trace_geometric(&field, &m, [0.3e-6, 0.5e-6, 0.0], &ctl).unwrap();
            assert_eq!(timed.points, geo.points);
        }
    }

    #[test]
    fn coupling_rescales_time_but_not_points() {
        let lambda = 6.33e-7;
        let kw0 = 100.0;
        let w0 = kw0 * lambda / (2.0 * PI);
        let scene = LGScene::new(0, 1, w0, lambda, 1.0).unwrap();
        let zr = scene.rayleigh_range();
        let domain = TraceDomain {
            min: [-4.0 * w0, -4.0 * w0, -0.2 * zr],
            max: [4.0 * w0, 4.0 * w0, 0.2 * zr],
        };
        let field = LGFlowField::new(scene, PhysicalConstants::si(), domain);
        let ctl = StepControl::new(w0 / 50.0, 1e-9 * w0, w0 / 50.0, 1e-8, 60).unwrap();
        let seed = [w0 / 2f64.sqrt(), 0.0, -0.05 * zr];
        let quantum = field.meso_params(0.0, 1.0, QReduction::Transverse).unwrap();
        let classical = field.meso_params(1.0, 1.0, QReduction::Transverse).unwrap();
        let lq = trace_timed(&field, &quantum, seed, &ctl).unwrap();
        let lc = trace_timed(&field, &classical, seed, &ctl).unwrap();
        let n = lq.points.len().min(lc.points.len());
        assert!(n > 40);
        for i in 0..n {
            assert_eq!(lq.points[i], lc.points[i], "point sets must be identical");
            // Quantum over classical speed = rho_cl / (rho_cl + Q).
            let expected = lq.diag[i].rho_cl / (lq.diag[i].rho_cl + lq.diag[i].q);
            if lq.diag[i].rho_mes > 0.0 {
                assert_relative_eq!(
                    lq.speed(i) / lc.speed(i),
                    expected,
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn vortex_axis_seed_stagnates_immediately() {
        let lambda = 6.33e-7;
        let w0 = 100.0 * lambda / (2.0 * PI);
        let scene = LGScene::new(0, 2, w0, lambda, 1.0).unwrap();
        let zr = scene.rayleigh_range();
        let domain = TraceDomain {
            min: [-4.0 * w0, -4.0 * w0, -0.2 * zr],
            max: [4.0 * w0, 4.0 * w0, 0.2 * zr],
        };
        let field = LGFlowField::new(scene, PhysicalConstants::si(), domain);
        let ctl = StepControl::new(w0 / 50.0, 1e-9 * w0, w0 / 50.0, 1e-8, 50).unwrap();
        let meso = field.meso_params(0.5, 1.0, QReduction::Transverse).unwrap();
        let line = trace_geometric(&field, &meso, [0.0, 0.0, 0.0], &ctl).unwrap();
        assert!(matches!(
            line.terminal,
            Terminal::Stagnation | Terminal::Node
        ));
        assert_eq!(line.points.len(), 1);
    }

    #[test]
    fn lg_spiral_rate_tracks_orbital_index() {
        let lambda = 6.33e-7;
        let w0 = 100.0 * lambda / (2.0 * PI);
        let l = 2;
        let scene = LGScene::new(0, l, w0, lambda, 1.0).unwrap();
        let k = scene.wavenumber();
        let zr = scene.rayleigh_range();
        let domain = TraceDomain {
            min: [-4.0 * w0, -4.0 * w0, -0.2 * zr],
            max: [4.0 * w0, 4.0 * w0, 0.2 * zr],
        };
        let field = LGFlowField::new(scene, PhysicalConstants::si(), domain);
        let ctl = StepControl::new(w0 / 100.0, 1e-9 * w0, w0 / 100.0, 1e-8, 400).unwrap();
        let meso = field.meso_params(1.0, 1.0, QReduction::Transverse).unwrap();
        let seed = [w0 / 2f64.sqrt(), 0.0, -0.05 * zr];
        let line = trace_geometric(&field, &meso, seed, &ctl).unwrap();
        let mut checked = 0;
        for i in 1..line.points.len() {
            let (p0, p1) = (line.points[i - 1], line.points[i]);
            if p0[2].abs() > 0.1 * zr || p1[2].abs() > 0.1 * zr {
                continue;
            }
            let phi0 = p0[1].atan2(p0[0]);
            let phi1 = p1[1].atan2(p1[0]);
            let mut dphi = phi1 - phi0;
            if dphi > PI {
                dphi -= 2.0 * PI;
            }
            if dphi < -PI {
                dphi += 2.0 * PI;
            }
            let dz = p1[2] - p0[2];
            let r_mid = 0.5 * (p0[0].hypot(p0[1]) + p1[0].hypot(p1[1]));
            let expected = f64::from(l) / (k * r_mid * r_mid);
            assert_relative_eq!(dphi / dz, expected, max_relative = 0.01);
            checked += 1;
        }
        assert!(checked > 50, "only {checked} segments inside the window");
    }

    #[test]
    fn sweep_grating_paths_are_coupling_invariant() {
        let field = grating_field(0.5);
        let lambda = field.scene().wavelength();
        let d = field.scene().period();
        let seeds = SeedSpec::new(
            [-d / 2.0, 0.1 * lambda, 0.0],
            [d / 2.0, 0.1 * lambda, 0.0],
            7,
        )
        .unwrap();
        let ctl = StepControl::new(lambda / 40.0, 1e-9 * lambda, lambda / 40.0, 1e-8, 300).unwrap();
        let sweep = sweep_coupling(
            &field,
            &seeds,
            &[0.0, 0.5, 1.0],
            &ctl,
            TraceMode::Geometric,
            1.0,
            QReduction::Transverse,
        )
        .unwrap();
        assert_eq!(sweep.lines.len(), 3);
        for lines in &sweep.lines {
            assert_eq!(lines.len(), 7);
            for line in lines {
                line.as_ref().unwrap().check_invariants(lambda / 40.0).unwrap();
            }
        }
        assert_eq!(sweep.max_path_deviation, 0.0);
        assert_eq!(sweep.pair_deviations.len(), 3);

        // A single-coupling sweep is trivially self-consistent.
        let single = sweep_coupling(
            &field,
            &seeds,
            &[1.0],
            &ctl,
            TraceMode::Geometric,
            1.0,
            QReduction::Transverse,
        )
        .unwrap();
        assert_eq!(single.lines.len(), 1);
        assert!(single.pair_deviations.is_empty());
        assert_eq!(single.max_path_deviation, 0.0);
    }

    #[test]
    fn matched_arc_deviation_of_identical_lines_is_zero() {
        let field = UniformField([1.0, 1.0, 0.0]);
        let ctl = StepControl::new(0.2, 1e-6, 0.2, 1e-8, 30).unwrap();
        let a = trace_geometric(&field, &meso_unit(1.0), [0.0; 3], &ctl).unwrap();
        let b = trace_geometric(&field, &meso_unit(0.3), [0.0; 3], &ctl).unwrap();
        assert_eq!(matched_arc_deviation(&a, &b), 0.0);
    }

    #[test]
    fn timed_seed_with_nonpositive_density_is_rejected() {
        // A quantum-limit seed close to the vortex axis has rho_mes < 0:
        // rho_cl ~ r^2|l| while Q diverges negatively.
        let lambda = 6.33e-7;
        let w0 = 100.0 * lambda / (2.0 * PI);
        let scene = LGScene::new(0, 2, w0, lambda, 1.0).unwrap();
        let zr = scene.rayleigh_range();
        let domain = TraceDomain {
            min: [-4.0 * w0, -4.0 * w0, -0.2 * zr],
            max: [4.0 * w0, 4.0 * w0, 0.2 * zr],
        };
        let field = LGFlowField::new(scene, PhysicalConstants::si(), domain);
        let ctl = StepControl::new(w0 / 50.0, 1e-9 * w0, w0 / 50.0, 1e-8, 50).unwrap();
        let meso = field.meso_params(0.0, 1.0, QReduction::Transverse).unwrap();
        let err = trace_timed(&field, &meso, [0.02 * w0, 0.0, 0.0], &ctl).unwrap_err();
        assert!(matches!(err, FlowError::DegenerateSeedDensity { .. }));
    }
}
