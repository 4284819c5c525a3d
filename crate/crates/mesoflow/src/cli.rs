//! Batch front end: scene configs, presets, the run pipeline and the disk
//! artifacts (flowlines.csv, density_map.csv, report.json).
//!
//! Config values merge in priority order preset < file < command-line
//! flags; the fully resolved config is embedded in report.json so a run
//! can be reproduced from its own report. All compute fans out to a rayon
//! pool and every artifact is written by a single writer afterwards, so
//! identical configs give byte-identical CSV bodies regardless of worker
//! count.

use crate::emfield::{quantum_potential, EmFieldError, QReduction};
use crate::evolver::{
    plane_wave_eigenmode, run_evolution, FieldState, GridDims, GridSpec, ResidualNorms,
    SourceCurrent,
};
use crate::flow::{
    sweep_coupling, EnergyFlowField, FlowLine, GratingFlowField, LGFlowField, PairDeviation,
    SeedSpec, TraceDomain, TraceMode,
};
use crate::modes::{GratingScene, LGScene, PhysicalConstants, SignBranch};
use crate::numerics::{SampleError, StepControl};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  - {}", problems.join("\n  - "))]
    Validation { problems: Vec<String> },
    #[error("failed to read config {path}: {source}")]
    ConfigRead {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to parse config {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("non-finite value from {op} at ({0}, {1}, {2})", point[0], point[1], point[2])]
    NonFinite { op: String, point: [f64; 3] },
    #[error("malformed flowlines csv: {0}")]
    MalformedCsv(String),
    #[error(transparent)]
    Evolver(#[from] crate::evolver::EvolverError),
    #[error(transparent)]
    Flow(#[from] crate::flow::FlowError),
}

impl CliError {
    fn validation(problems: Vec<String>) -> Self {
        CliError::Validation { problems }
    }

    /// Process exit code: 2 validation, 3 completed-with-flags (set by the
    /// caller), 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation { .. }
            | CliError::ConfigRead { .. }
            | CliError::ConfigParse { .. } => 2,
            _ => 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Config model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Grating,
    DoubleSlit,
    Lg,
    Evolve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Geometric,
    Timed,
    Both,
}

impl RunMode {
    fn trace_modes(self) -> Vec<TraceMode> {
        match self {
            RunMode::Geometric => vec![TraceMode::Geometric],
            RunMode::Timed => vec![TraceMode::Timed],
            RunMode::Both => vec![TraceMode::Geometric, TraceMode::Timed],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GratingConfig {
    pub wavelength: Option<f64>,
    pub period: Option<f64>,
    pub duty: Option<f64>,
    pub orders: Option<u32>,
    pub amp_a: Option<f64>,
    pub amp_b: Option<f64>,
    pub sign_branch: Option<SignBranch>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LgConfig {
    pub p: Option<u32>,
    pub l: Option<i32>,
    pub waist: Option<f64>,
    pub wavelength: Option<f64>,
    pub amplitude: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MesoConfig {
    pub q_scale: Option<f64>,
    pub reduction: Option<QReduction>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsConfig {
    pub start: Option<[f64; 3]>,
    pub end: Option<[f64; 3]>,
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    /// Fixed integrator step (m).
    pub step: Option<f64>,
    pub max_steps: Option<usize>,
    pub domain_min: Option<[f64; 3]>,
    pub domain_max: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Cells per axis of the density map grid.
    pub map_cells: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveConfig {
    pub dims: Option<usize>,
    pub cells: Option<usize>,
    pub spacing: Option<f64>,
    /// Courant number as a fraction of the stability limit.
    pub cfl: Option<f64>,
    /// Run length in periods of the seeded mode.
    pub periods: Option<f64>,
    /// Plane-wave mode index along x.
    pub mode_index: Option<usize>,
    pub amplitude: Option<f64>,
    /// "none" or "gaussian" (a localized oscillating current).
    pub source: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub kind: Option<SceneKind>,
    pub out_dir: Option<PathBuf>,
    pub mode: Option<RunMode>,
    pub couplings: Option<Vec<f64>>,
    pub grating: Option<GratingConfig>,
    pub lg: Option<LgConfig>,
    pub meso: Option<MesoConfig>,
    pub seeds: Option<SeedsConfig>,
    pub trace: Option<TraceConfig>,
    pub output: Option<OutputConfig>,
    pub evolve: Option<EvolveConfig>,
}

macro_rules! merge_fields {
    ($base:expr, $over:expr, $($field:ident),+ $(,)?) => {{
        $($over.$field = $over.$field.take().or($base.$field.take());)+
        $over
    }};
}

impl SceneConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|source| CliError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigRead {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    /// Overlay `over` on top of `self`; set fields in `over` win.
    pub fn merged(mut self, mut over: SceneConfig) -> SceneConfig {
        over.grating = match (self.grating.take(), over.grating.take()) {
            (Some(mut b), Some(mut o)) => {
                Some(merge_fields!(b, o, wavelength, period, duty, orders, amp_a, amp_b, sign_branch))
            }
            (b, o) => o.or(b),
        };
        over.lg = match (self.lg.take(), over.lg.take()) {
            (Some(mut b), Some(mut o)) => Some(merge_fields!(b, o, p, l, waist, wavelength, amplitude)),
            (b, o) => o.or(b),
        };
        over.meso = match (self.meso.take(), over.meso.take()) {
            (Some(mut b), Some(mut o)) => Some(merge_fields!(b, o, q_scale, reduction)),
            (b, o) => o.or(b),
        };
        over.seeds = match (self.seeds.take(), over.seeds.take()) {
            (Some(mut b), Some(mut o)) => Some(merge_fields!(b, o, start, end, count)),
            (b, o) => o.or(b),
        };
        over.trace = match (self.trace.take(), over.trace.take()) {
            (Some(mut b), Some(mut o)) => {
                Some(merge_fields!(b, o, step, max_steps, domain_min, domain_max))
            }
            (b, o) => o.or(b),
        };
        over.output = match (self.output.take(), over.output.take()) {
            (Some(mut b), Some(mut o)) => Some(merge_fields!(b, o, map_cells)),
            (b, o) => o.or(b),
        };
        over.evolve = match (self.evolve.take(), over.evolve.take()) {
            (Some(mut b), Some(mut o)) => Some(merge_fields!(
                b, o, dims, cells, spacing, cfl, periods, mode_index, amplitude, source
            )),
            (b, o) => o.or(b),
        };
        merge_fields!(self, over, kind, out_dir, mode, couplings)
    }
}

/// Canned parameter sets reachable via `--preset`.
pub fn preset(name: &str) -> Result<SceneConfig, CliError> {
    let grating_preset = |period_in_wavelengths: f64, seeds: usize, orders: u32| {
        let wavelength = 5.0e-7;
        let d = period_in_wavelengths * wavelength;
        SceneConfig {
            kind: Some(SceneKind::Grating),
            out_dir: Some(PathBuf::from("mesoflow-out")),
            mode: Some(RunMode::Geometric),
            couplings: Some(vec![0.0, 1.0]),
            grating: Some(GratingConfig {
                wavelength: Some(wavelength),
                period: Some(d),
                duty: Some(0.5),
                orders: Some(orders),
                amp_a: Some(1.0),
                amp_b: Some(0.0),
                sign_branch: Some(SignBranch::Upper),
            }),
            meso: Some(MesoConfig {
                q_scale: Some(1.0),
                reduction: Some(QReduction::Transverse),
            }),
            seeds: Some(SeedsConfig {
                start: Some([-d / 2.0, 0.1 * wavelength, 0.0]),
                end: Some([d / 2.0, 0.1 * wavelength, 0.0]),
                count: Some(seeds),
            }),
            trace: Some(TraceConfig {
                step: Some(wavelength / 50.0),
                max_steps: Some(1500),
                domain_min: Some([-3.0 * d, 0.0, -wavelength]),
                domain_max: Some([3.0 * d, 12.0 * wavelength, wavelength]),
            }),
            output: Some(OutputConfig {
                map_cells: Some(81),
            }),
            lg: None,
            evolve: None,
        }
    };
    match name {
        // The double slit is a Ronchi grating evaluated over a window of
        // two open periods.
        "double-slit" => Ok(SceneConfig {
            kind: Some(SceneKind::DoubleSlit),
            ..grating_preset(5.0, 21, 12)
        }),
        "ronchi" => Ok(grating_preset(10.0, 33, 16)),
        "lg-donut" => {
            let wavelength = 6.33e-7;
            let kw0 = 100.0;
            let w0 = kw0 * wavelength / (2.0 * std::f64::consts::PI);
            let zr = std::f64::consts::PI * w0 * w0 / wavelength;
            Ok(SceneConfig {
                kind: Some(SceneKind::Lg),
                out_dir: Some(PathBuf::from("mesoflow-out")),
                mode: Some(RunMode::Both),
                couplings: Some(vec![0.0, 1.0]),
                lg: Some(LgConfig {
                    p: Some(0),
                    l: Some(2),
                    waist: Some(w0),
                    wavelength: Some(wavelength),
                    amplitude: Some(1.0),
                }),
                meso: Some(MesoConfig {
                    q_scale: Some(1.0),
                    reduction: Some(QReduction::Transverse),
                }),
                seeds: Some(SeedsConfig {
                    start: Some([w0 / 2.0f64.sqrt(), 0.0, -0.05 * zr]),
                    end: Some([1.3 * w0, 0.0, -0.05 * zr]),
                    count: Some(8),
                }),
                trace: Some(TraceConfig {
                    step: Some(w0 / 100.0),
                    max_steps: Some(3000),
                    domain_min: Some([-4.0 * w0, -4.0 * w0, -0.1 * zr]),
                    domain_max: Some([4.0 * w0, 4.0 * w0, 0.1 * zr]),
                }),
                output: Some(OutputConfig {
                    map_cells: Some(81),
                }),
                grating: None,
                evolve: None,
            })
        }
        "evolve-plane-wave" => Ok(SceneConfig {
            kind: Some(SceneKind::Evolve),
            out_dir: Some(PathBuf::from("mesoflow-out")),
            mode: Some(RunMode::Geometric),
            couplings: Some(vec![1.0]),
            evolve: Some(EvolveConfig {
                dims: Some(2),
                cells: Some(64),
                spacing: Some(1.0e-6),
                cfl: Some(0.5),
                periods: Some(10.0),
                mode_index: Some(1),
                amplitude: Some(1.0),
                source: Some("none".to_string()),
            }),
            output: Some(OutputConfig {
                map_cells: Some(64),
            }),
            grating: None,
            lg: None,
            meso: None,
            seeds: None,
            trace: None,
        }),
        other => Err(CliError::validation(vec![format!(
            "unknown preset '{other}' (expected double-slit, ronchi, lg-donut or evolve-plane-wave)"
        )])),
    }
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

enum ResolvedField {
    Grating(GratingFlowField),
    Lg(LGFlowField),
}

impl ResolvedField {
    fn as_dyn(&self) -> &dyn EnergyFlowField {
        match self {
            ResolvedField::Grating(f) => f,
            ResolvedField::Lg(f) => f,
        }
    }
}

struct ResolvedFlow {
    field: ResolvedField,
    seeds: SeedSpec,
    ctl: StepControl,
    couplings: Vec<f64>,
    modes: Vec<TraceMode>,
    q_scale: f64,
    reduction: QReduction,
    map_cells: usize,
}

struct ResolvedEvolve {
    spec: GridSpec,
    mode_index: usize,
    amplitude: f64,
    gaussian_source: bool,
    map_cells: usize,
}

// One-shot value on the run path; the size skew is irrelevant.
#[allow(clippy::large_enum_variant)]
enum Resolved {
    Flow(ResolvedFlow),
    Evolve(ResolvedEvolve),
}

fn resolve(config: &SceneConfig) -> Result<(Resolved, SceneConfig, PathBuf), CliError> {
    let mut problems = Vec::new();
    let consts = PhysicalConstants::si();
    let mut resolved = config.clone();

    let kind = match config.kind {
        Some(k) => k,
        None => {
            problems.push("kind is required (grating, double-slit, lg or evolve)".to_string());
            SceneKind::Grating
        }
    };
    let out_dir = config
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("mesoflow-out"));
    resolved.out_dir = Some(out_dir.clone());

    let couplings = config.couplings.clone().unwrap_or_else(|| vec![1.0]);
    if couplings.is_empty() {
        problems.push("couplings must contain at least one value".to_string());
    }
    for &c in &couplings {
        if !(0.0..=1.0).contains(&c) || !c.is_finite() {
            problems.push(format!("coupling {c} must lie in [0, 1]"));
        }
    }
    resolved.couplings = Some(couplings.clone());

    let mode = config.mode.unwrap_or(RunMode::Geometric);
    resolved.mode = Some(mode);

    let meso = config.meso.clone().unwrap_or_default();
    let q_scale = meso.q_scale.unwrap_or(1.0);
    let reduction = meso.reduction.unwrap_or_default();
    if !(q_scale >= 0.0 && q_scale.is_finite()) {
        problems.push(format!("meso.q_scale {q_scale} must be >= 0 and finite"));
    }
    resolved.meso = Some(MesoConfig {
        q_scale: Some(q_scale),
        reduction: Some(reduction),
    });

    let output = config.output.clone().unwrap_or_default();
    let map_cells = output.map_cells.unwrap_or(81);
    if map_cells < 2 {
        problems.push("output.map_cells must be >= 2".to_string());
    }
    resolved.output = Some(OutputConfig {
        map_cells: Some(map_cells),
    });

    match kind {
        SceneKind::Grating | SceneKind::DoubleSlit => {
            let g = config.grating.clone().unwrap_or_default();
            let wavelength = g.wavelength.unwrap_or(5.0e-7);
            let period = g.period.unwrap_or(5.0 * wavelength);
            let duty = g.duty.unwrap_or(0.5);
            let orders = g.orders.unwrap_or(12);
            let amp_a = g.amp_a.unwrap_or(1.0);
            let amp_b = g.amp_b.unwrap_or(0.0);
            let branch = g.sign_branch.unwrap_or_default();
            resolved.grating = Some(GratingConfig {
                wavelength: Some(wavelength),
                period: Some(period),
                duty: Some(duty),
                orders: Some(orders),
                amp_a: Some(amp_a),
                amp_b: Some(amp_b),
                sign_branch: Some(branch),
            });
            resolved.lg = None;
            resolved.evolve = None;

            let scene = match GratingScene::new(wavelength, period, duty, orders, amp_a, amp_b, branch)
            {
                Ok(s) => Some(s),
                Err(e) => {
                    problems.push(e.to_string());
                    None
                }
            };

            let trace = config.trace.clone().unwrap_or_default();
            let domain_min = trace.domain_min.unwrap_or([-3.0 * period, 0.0, -wavelength]);
            let domain_max = trace
                .domain_max
                .unwrap_or([3.0 * period, 12.0 * wavelength, wavelength]);
            let step = trace.step.unwrap_or(wavelength / 50.0);
            let max_steps = trace.max_steps.unwrap_or(1500);
            resolved.trace = Some(TraceConfig {
                step: Some(step),
                max_steps: Some(max_steps),
                domain_min: Some(domain_min),
                domain_max: Some(domain_max),
            });

            let seeds_cfg = config.seeds.clone().unwrap_or_default();
            let start = seeds_cfg
                .start
                .unwrap_or([-period / 2.0, 0.1 * wavelength, 0.0]);
            let end = seeds_cfg.end.unwrap_or([period / 2.0, 0.1 * wavelength, 0.0]);
            let count = seeds_cfg.count.unwrap_or(21);
            resolved.seeds = Some(SeedsConfig {
                start: Some(start),
                end: Some(end),
                count: Some(count),
            });

            finish_flow_resolution(
                &mut problems,
                scene.map(|s| {
                    let domain = TraceDomain {
                        min: domain_min,
                        max: domain_max,
                    };
                    GratingFlowField::new(s, consts, domain).map(ResolvedField::Grating)
                }),
                start,
                end,
                count,
                step,
                max_steps,
                domain_min,
                domain_max,
                couplings,
                mode,
                q_scale,
                reduction,
                map_cells,
                resolved,
                out_dir,
            )
        }
        SceneKind::Lg => {
            let lg = config.lg.clone().unwrap_or_default();
            let p = lg.p.unwrap_or(0);
            let l = lg.l.unwrap_or(2);
            let wavelength = lg.wavelength.unwrap_or(6.33e-7);
            let waist = lg
                .waist
                .unwrap_or(100.0 * wavelength / (2.0 * std::f64::consts::PI));
            let amplitude = lg.amplitude.unwrap_or(1.0);
            resolved.lg = Some(LgConfig {
                p: Some(p),
                l: Some(l),
                waist: Some(waist),
                wavelength: Some(wavelength),
                amplitude: Some(amplitude),
            });
            resolved.grating = None;
            resolved.evolve = None;

            let scene = match LGScene::new(p, l, waist, wavelength, amplitude) {
                Ok(s) => Some(s),
                Err(e) => {
                    problems.push(e.to_string());
                    None
                }
            };
            let zr = std::f64::consts::PI * waist * waist / wavelength;

            let trace = config.trace.clone().unwrap_or_default();
            let domain_min = trace
                .domain_min
                .unwrap_or([-4.0 * waist, -4.0 * waist, -0.1 * zr]);
            let domain_max = trace.domain_max.unwrap_or([4.0 * waist, 4.0 * waist, 0.1 * zr]);
            let step = trace.step.unwrap_or(waist / 100.0);
            let max_steps = trace.max_steps.unwrap_or(3000);
            resolved.trace = Some(TraceConfig {
                step: Some(step),
                max_steps: Some(max_steps),
                domain_min: Some(domain_min),
                domain_max: Some(domain_max),
            });

            let seeds_cfg = config.seeds.clone().unwrap_or_default();
            let start = seeds_cfg
                .start
                .unwrap_or([waist / 2.0f64.sqrt(), 0.0, -0.05 * zr]);
            let end = seeds_cfg.end.unwrap_or([1.3 * waist, 0.0, -0.05 * zr]);
            let count = seeds_cfg.count.unwrap_or(8);
            resolved.seeds = Some(SeedsConfig {
                start: Some(start),
                end: Some(end),
                count: Some(count),
            });

            finish_flow_resolution(
                &mut problems,
                scene.map(|s| {
                    let domain = TraceDomain {
                        min: domain_min,
                        max: domain_max,
                    };
                    Ok(ResolvedField::Lg(LGFlowField::new(s, consts, domain)))
                }),
                start,
                end,
                count,
                step,
                max_steps,
                domain_min,
                domain_max,
                couplings,
                mode,
                q_scale,
                reduction,
                map_cells,
                resolved,
                out_dir,
            )
        }
        SceneKind::Evolve => {
            let ev = config.evolve.clone().unwrap_or_default();
            let dims = ev.dims.unwrap_or(2);
            let cells = ev.cells.unwrap_or(64);
            let spacing = ev.spacing.unwrap_or(1.0e-6);
            let cfl = ev.cfl.unwrap_or(0.5);
            let periods = ev.periods.unwrap_or(10.0);
            let mode_index = ev.mode_index.unwrap_or(1);
            let amplitude = ev.amplitude.unwrap_or(1.0);
            let source = ev.source.clone().unwrap_or_else(|| "none".to_string());
            resolved.evolve = Some(EvolveConfig {
                dims: Some(dims),
                cells: Some(cells),
                spacing: Some(spacing),
                cfl: Some(cfl),
                periods: Some(periods),
                mode_index: Some(mode_index),
                amplitude: Some(amplitude),
                source: Some(source.clone()),
            });
            resolved.grating = None;
            resolved.lg = None;
            resolved.seeds = None;
            resolved.trace = None;

            let grid_dims = match dims {
                2 => GridDims::Two,
                3 => GridDims::Three,
                other => {
                    problems.push(format!("evolve.dims {other} must be 2 or 3"));
                    GridDims::Two
                }
            };
            if !(cfl > 0.0 && cfl < 1.0) {
                problems.push(format!("evolve.cfl {cfl} must lie in (0, 1)"));
            }
            if !(periods > 0.0 && periods.is_finite()) {
                problems.push(format!("evolve.periods {periods} must be > 0"));
            }
            if mode_index == 0 || mode_index >= cells.max(1) / 2 {
                problems.push(format!(
                    "evolve.mode_index {mode_index} must be in [1, cells/2)"
                ));
            }
            let gaussian_source = match source.as_str() {
                "none" => false,
                "gaussian" => true,
                other => {
                    problems.push(format!(
                        "evolve.source '{other}' must be 'none' or 'gaussian'"
                    ));
                    false
                }
            };

            let dt = cfl * spacing / (consts.c * (grid_dims.count() as f64).sqrt());
            let box_len = cells as f64 * spacing;
            let period = box_len / (mode_index.max(1) as f64 * consts.c);
            let steps = (periods * period / dt).ceil() as usize;
            let spec = match GridSpec::new(grid_dims, cells, spacing, dt, steps, &consts) {
                Ok(s) => Some(s),
                Err(e) => {
                    problems.push(e.to_string());
                    None
                }
            };
            if !problems.is_empty() {
                return Err(CliError::validation(problems));
            }
            Ok((
                Resolved::Evolve(ResolvedEvolve {
                    spec: spec.expect("validated above"),
                    mode_index,
                    amplitude,
                    gaussian_source,
                    map_cells,
                }),
                resolved,
                out_dir,
            ))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_flow_resolution(
    problems: &mut Vec<String>,
    field: Option<Result<ResolvedField, crate::flow::FlowError>>,
    start: [f64; 3],
    end: [f64; 3],
    count: usize,
    step: f64,
    max_steps: usize,
    domain_min: [f64; 3],
    domain_max: [f64; 3],
    couplings: Vec<f64>,
    mode: RunMode,
    q_scale: f64,
    reduction: QReduction,
    map_cells: usize,
    resolved: SceneConfig,
    out_dir: PathBuf,
) -> Result<(Resolved, SceneConfig, PathBuf), CliError> {
    if count == 0 {
        problems.push("seeds.count must be >= 1".to_string());
    }
    if !(step > 0.0 && step.is_finite()) {
        problems.push(format!("trace.step {step} must be > 0"));
    }
    if max_steps == 0 {
        problems.push("trace.max_steps must be >= 1".to_string());
    }
    for axis in 0..3 {
        if !(domain_min[axis] < domain_max[axis]) {
            problems.push(format!(
                "trace domain must have positive extent on axis {axis}"
            ));
        }
    }
    let field = match field {
        Some(Ok(f)) => Some(f),
        Some(Err(e)) => {
            problems.push(e.to_string());
            None
        }
        None => None,
    };
    if !problems.is_empty() {
        return Err(CliError::validation(std::mem::take(problems)));
    }
    let field = field.expect("field built when no problems were recorded");
    let seeds = SeedSpec::new(start, end, count)?;
    let ctl = StepControl::new(step, step * 2f64.powi(-20), step, 1e-8, max_steps)
        .map_err(|e| CliError::validation(vec![e.to_string()]))?;
    Ok((
        Resolved::Flow(ResolvedFlow {
            field,
            seeds,
            ctl,
            couplings,
            modes: mode.trace_modes(),
            q_scale,
            reduction,
            map_cells,
        }),
        resolved,
        out_dir,
    ))
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct LineReport {
    pub line_id: usize,
    pub mode: TraceMode,
    pub coupling: f64,
    pub seed: [f64; 3],
    pub terminal: Option<String>,
    pub error: Option<String>,
    pub points: usize,
    pub arc_length: f64,
    pub flagged: bool,
}

#[derive(Debug, Serialize)]
pub struct InvarianceReport {
    pub max_path_deviation: f64,
    pub pair_deviations: Vec<PairDeviation>,
}

#[derive(Debug, Serialize)]
pub struct EvolveSummary {
    pub cells: usize,
    pub spacing: f64,
    pub dt: f64,
    pub steps: usize,
    pub energy_drift: f64,
    pub reversal_distance: f64,
    pub work_total: f64,
    pub residual_rms_max: f64,
    pub residual_max_abs: f64,
    pub energies: Vec<f64>,
    pub work_cumulative: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub version: String,
    pub kind: SceneKind,
    pub config: SceneConfig,
    pub flagged_lines: usize,
    pub invariance: Option<InvarianceReport>,
    pub lines: Vec<LineReport>,
    pub evolve: Option<EvolveSummary>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    /// 0 clean, 3 completed with flagged lines.
    pub fn exit_code(&self) -> i32 {
        if self.report.flagged_lines > 0 {
            3
        } else {
            0
        }
    }
}

// ---------------------------------------------------------------------------
// Serialization helpers
// ---------------------------------------------------------------------------

/// 17 significant digits, enough to round-trip an f64 exactly.
fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn ensure_finite(op: &str, point: [f64; 3], values: &[f64]) -> Result<(), CliError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::NonFinite {
            op: op.to_string(),
            point,
        });
    }
    Ok(())
}

pub const FLOWLINES_HEADER: &str =
    "line_id,step,x,y,z,s,t,Sx,Sy,Sz,rho_cl,Q,rho_mes,terminal";

/// One traced line bound for flowlines.csv.
pub struct ExportLine<'a> {
    pub line_id: usize,
    pub line: &'a FlowLine,
}

/// Serialize traced lines to the fixed CSV schema: rows ordered by
/// (line_id, step), floats with 17 significant digits, the line's terminal
/// repeated on every row. Geometric traces carry t = 0.
pub fn flowlines_csv(lines: &[ExportLine<'_>]) -> Result<String, CliError> {
    let mut out = String::new();
    out.push_str(FLOWLINES_HEADER);
    out.push('\n');
    for export in lines {
        let line = export.line;
        for (step, point) in line.points.iter().enumerate() {
            let t = line.time_t.get(step).copied().unwrap_or(0.0);
            let d = &line.diag[step];
            let row = [
                point[0], point[1], point[2], line.arc_s[step], t, d.s[0], d.s[1], d.s[2],
                d.rho_cl, d.q, d.rho_mes,
            ];
            ensure_finite("flowline export", *point, &row)?;
            let _ = write!(out, "{},{}", export.line_id, step);
            for v in row {
                let _ = write!(out, ",{}", fmt_float(v));
            }
            let _ = writeln!(out, ",{}", line.terminal.as_str());
        }
    }
    Ok(out)
}

/// Parse a flowlines.csv body and re-serialize it; used to verify that the
/// serializer is a fixed point of parse -> format.
pub fn reserialize_flowlines(content: &str) -> Result<String, CliError> {
    let mut lines = content.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::MalformedCsv("empty file".to_string()))?;
    if header != FLOWLINES_HEADER {
        return Err(CliError::MalformedCsv(format!("unexpected header {header}")));
    }
    let mut out = String::new();
    out.push_str(FLOWLINES_HEADER);
    out.push('\n');
    for (lineno, row) in lines.enumerate() {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 14 {
            return Err(CliError::MalformedCsv(format!(
                "row {lineno}: expected 14 fields, got {}",
                fields.len()
            )));
        }
        let line_id: usize = fields[0]
            .parse()
            .map_err(|_| CliError::MalformedCsv(format!("row {lineno}: bad line_id")))?;
        let step: usize = fields[1]
            .parse()
            .map_err(|_| CliError::MalformedCsv(format!("row {lineno}: bad step")))?;
        let _ = write!(out, "{line_id},{step}");
        for field in &fields[2..13] {
            let v: f64 = field
                .parse()
                .map_err(|_| CliError::MalformedCsv(format!("row {lineno}: bad float {field}")))?;
            let _ = write!(out, ",{}", fmt_float(v));
        }
        let _ = writeln!(out, ",{}", fields[13]);
    }
    Ok(out)
}

pub const DENSITY_MAP_HEADER: &str = "coupling,x,y,z,rho_cl,Q,rho_mes";

// ---------------------------------------------------------------------------
// Run pipeline
// ---------------------------------------------------------------------------

/// Run a resolved scene config end to end: trace (or evolve), then write
/// flowlines.csv, density_map.csv and report.json into the output
/// directory. `threads` caps the rayon pool (None lets rayon decide).
pub fn run(config: &SceneConfig, threads: Option<usize>) -> Result<RunOutcome, CliError> {
    let (resolved, resolved_config, out_dir) = resolve(config)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::validation(vec![format!("thread pool: {e}")]))?;

    std::fs::create_dir_all(&out_dir).map_err(|source| CliError::Io {
        path: out_dir.clone(),
        source,
    })?;

    let report = match resolved {
        Resolved::Flow(flow) => pool.install(|| run_flow(flow, resolved_config, &out_dir))?,
        Resolved::Evolve(ev) => run_evolve(ev, resolved_config, &out_dir)?,
    };

    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_artifact(&out_dir.join("report.json"), &report_json)?;

    Ok(RunOutcome { report, out_dir })
}

fn write_artifact(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run_flow(
    flow: ResolvedFlow,
    resolved_config: SceneConfig,
    out_dir: &Path,
) -> Result<RunReport, CliError> {
    let field = flow.field.as_dyn();
    let mut line_reports = Vec::new();
    let mut exports: Vec<(usize, FlowLine)> = Vec::new();
    let mut max_path_deviation = 0.0f64;
    let mut pair_deviations = Vec::new();
    let mut line_id = 0usize;
    let mut flagged = 0usize;

    for mode in &flow.modes {
        let sweep = sweep_coupling(
            field,
            &flow.seeds,
            &flow.couplings,
            &flow.ctl,
            *mode,
            flow.q_scale,
            flow.reduction,
        )?;
        max_path_deviation = max_path_deviation.max(sweep.max_path_deviation);
        pair_deviations.extend(sweep.pair_deviations.iter().copied());
        let seed_points = flow.seeds.seeds();
        for (ci, lines) in sweep.lines.into_iter().enumerate() {
            for (si, outcome) in lines.into_iter().enumerate() {
                match outcome {
                    Ok(line) => {
                        line_reports.push(LineReport {
                            line_id,
                            mode: *mode,
                            coupling: flow.couplings[ci],
                            seed: line.seed,
                            terminal: Some(line.terminal.as_str().to_string()),
                            error: None,
                            points: line.points.len(),
                            arc_length: line.total_arc(),
                            flagged: false,
                        });
                        exports.push((line_id, line));
                    }
                    Err(e) => {
                        flagged += 1;
                        line_reports.push(LineReport {
                            line_id,
                            mode: *mode,
                            coupling: flow.couplings[ci],
                            seed: seed_points[si],
                            terminal: None,
                            error: Some(e.to_string()),
                            points: 0,
                            arc_length: 0.0,
                            flagged: true,
                        });
                    }
                }
                line_id += 1;
            }
        }
    }

    let export_refs: Vec<ExportLine<'_>> = exports
        .iter()
        .map(|(id, line)| ExportLine {
            line_id: *id,
            line,
        })
        .collect();
    let csv = flowlines_csv(&export_refs)?;
    write_artifact(&out_dir.join("flowlines.csv"), &csv)?;

    let map = density_map_csv(&flow, field)?;
    write_artifact(&out_dir.join("density_map.csv"), &map)?;

    Ok(RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        kind: resolved_config.kind.expect("resolved"),
        config: resolved_config,
        flagged_lines: flagged,
        invariance: Some(InvarianceReport {
            max_path_deviation,
            pair_deviations,
        }),
        lines: line_reports,
        evolve: None,
    })
}

/// Density map over the (x, y) plane at the domain's mid z, one block per
/// coupling. Q is recorded as zero where the amplitude sits below the node
/// floor or its stencil leaves the field domain.
fn density_map_csv(
    flow: &ResolvedFlow,
    field: &dyn EnergyFlowField,
) -> Result<String, CliError> {
    let mut out = String::new();
    out.push_str(DENSITY_MAP_HEADER);
    out.push('\n');
    let domain = field.domain();
    let n = flow.map_cells;
    let z = 0.5 * (domain.min[2] + domain.max[2]);
    for &coupling in &flow.couplings {
        let meso = field
            .meso_params(coupling, flow.q_scale, flow.reduction)
            .map_err(|e| CliError::validation(vec![e.to_string()]))?;
        for i in 0..n {
            let x = domain.min[0] + (domain.max[0] - domain.min[0]) * i as f64 / (n - 1) as f64;
            for j in 0..n {
                let y =
                    domain.min[1] + (domain.max[1] - domain.min[1]) * j as f64 / (n - 1) as f64;
                let p = [x, y, z];
                let rho_cl = match field.rho_cl(&p) {
                    Ok(v) => v,
                    Err(SampleError::OutOfDomain) => continue,
                    Err(_) => {
                        return Err(CliError::NonFinite {
                            op: "density map rho_cl".to_string(),
                            point: p,
                        })
                    }
                };
                let q = match quantum_potential(
                    |pp| field.amplitude(pp),
                    &p,
                    &meso,
                    field.wavenumber(),
                ) {
                    Ok(q) => q,
                    Err(EmFieldError::Node { .. })
                    | Err(EmFieldError::AmplitudeSample(SampleError::OutOfDomain)) => 0.0,
                    Err(EmFieldError::Numerics(_)) => 0.0,
                    Err(_) => {
                        return Err(CliError::NonFinite {
                            op: "density map quantum potential".to_string(),
                            point: p,
                        })
                    }
                };
                let rho_mes = rho_cl + (1.0 - coupling) * q;
                ensure_finite("density map", p, &[rho_cl, q, rho_mes])?;
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    fmt_float(coupling),
                    fmt_float(x),
                    fmt_float(y),
                    fmt_float(z),
                    fmt_float(rho_cl),
                    fmt_float(q),
                    fmt_float(rho_mes)
                );
            }
        }
    }
    Ok(out)
}

fn run_evolve(
    ev: ResolvedEvolve,
    resolved_config: SceneConfig,
    out_dir: &Path,
) -> Result<RunReport, CliError> {
    let consts = PhysicalConstants::si();
    let spec = ev.spec;
    let initial = plane_wave_eigenmode(&spec, &consts, ev.mode_index, ev.amplitude);

    let src = if ev.gaussian_source {
        let box_len = spec.cells as f64 * spec.spacing;
        let sigma = box_len / 10.0;
        let omega = 2.0 * std::f64::consts::PI * consts.c / box_len;
        let x0 = box_len / 2.0;
        SourceCurrent::new(move |p, t| {
            let d2 = (p[0] - x0).powi(2) + (p[1] - x0).powi(2);
            [
                0.0,
                1.0e-3 * (-d2 / (sigma * sigma)).exp() * (omega * t).sin(),
                0.0,
            ]
        })
    } else {
        SourceCurrent::none()
    };

    let report = run_evolution(initial.clone(), &spec, &src, &consts, true)?;
    let reversed = run_evolution(
        report.final_state.clone(),
        &spec.reversed(),
        &src,
        &consts,
        false,
    )?;
    let reversal_distance = reversed.final_state.rel_l2_distance(&initial);

    let residual_rms_max = report
        .residuals
        .iter()
        .map(|r| r.rms)
        .fold(0.0f64, f64::max);
    let residual_max_abs = report
        .residuals
        .iter()
        .map(|r| r.max_abs)
        .fold(0.0f64, f64::max);

    // Artifact schema is shared with the flow scenes: flowlines.csv is
    // header-only, the density map carries the final instantaneous energy
    // density with no quantum split.
    write_artifact(
        &out_dir.join("flowlines.csv"),
        &format!("{FLOWLINES_HEADER}\n"),
    )?;
    let map = evolve_density_csv(&report.final_state, &spec, &consts, ev.map_cells)?;
    write_artifact(&out_dir.join("density_map.csv"), &map)?;

    let summary = EvolveSummary {
        cells: spec.cells,
        spacing: spec.spacing,
        dt: spec.dt,
        steps: spec.steps,
        energy_drift: report.energy_drift,
        reversal_distance,
        work_total: *report.work_cumulative.last().unwrap_or(&0.0),
        residual_rms_max,
        residual_max_abs,
        energies: report.energies,
        work_cumulative: report.work_cumulative,
    };

    Ok(RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        kind: SceneKind::Evolve,
        config: resolved_config,
        flagged_lines: 0,
        invariance: None,
        lines: Vec::new(),
        evolve: Some(summary),
    })
}

fn evolve_density_csv(
    state: &FieldState,
    spec: &GridSpec,
    consts: &PhysicalConstants,
    map_cells: usize,
) -> Result<String, CliError> {
    let mut out = String::new();
    out.push_str(DENSITY_MAP_HEADER);
    out.push('\n');
    let (nx, ny, _) = spec.shape();
    let h = spec.spacing;
    let stride_x = (nx / map_cells.max(1)).max(1);
    let stride_y = (ny / map_cells.max(1)).max(1);
    for i in (0..nx).step_by(stride_x) {
        for j in (0..ny).step_by(stride_y) {
            let k = 0;
            let e2 = state.ex[(i, j, k)].powi(2)
                + state.ey[(i, j, k)].powi(2)
                + state.ez[(i, j, k)].powi(2);
            let b2 = state.bx[(i, j, k)].powi(2)
                + state.by[(i, j, k)].powi(2)
                + state.bz[(i, j, k)].powi(2);
            let rho = 0.5 * (consts.eps0 * e2 + b2 / consts.mu0);
            let p = [i as f64 * h, j as f64 * h, 0.0];
            ensure_finite("evolve density map", p, &[rho])?;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                fmt_float(1.0),
                fmt_float(p[0]),
                fmt_float(p[1]),
                fmt_float(p[2]),
                fmt_float(rho),
                fmt_float(0.0),
                fmt_float(rho)
            );
        }
    }
    Ok(out)
}

/// Residual norms of a recorded evolve run; re-exported for the binary's
/// reporting only.
pub type EvolveResiduals = Vec<ResidualNorms>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_priority_is_flags_over_file_over_preset() {
        let base = preset("double-slit").unwrap();
        let file = SceneConfig {
            couplings: Some(vec![0.25]),
            grating: Some(GratingConfig {
                duty: Some(0.4),
                ..Default::default()
            }),
            ..Default::default()
        };
        let flags = SceneConfig {
            couplings: Some(vec![0.5, 1.0]),
            ..Default::default()
        };
        let merged = base.merged(file).merged(flags);
        assert_eq!(merged.couplings, Some(vec![0.5, 1.0]));
        let g = merged.grating.unwrap();
        assert_eq!(g.duty, Some(0.4));
        // Untouched preset values survive.
        assert_eq!(g.wavelength, Some(5.0e-7));
        assert_eq!(merged.kind, Some(SceneKind::DoubleSlit));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = SceneConfig::from_toml_str(
            "kind = \"lg\"\nbogus_key = 1\n",
            Path::new("test.toml"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
        let err = SceneConfig::from_toml_str(
            "kind = \"lg\"\n[lg]\nnot_a_field = 2\n",
            Path::new("test.toml"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("not_a_field"));
    }

    #[test]
    fn validation_aggregates_every_problem() {
        let cfg = SceneConfig {
            kind: Some(SceneKind::Grating),
            couplings: Some(vec![2.0, -0.5]),
            grating: Some(GratingConfig {
                wavelength: Some(-1.0),
                duty: Some(1.5),
                ..Default::default()
            }),
            seeds: Some(SeedsConfig {
                count: Some(0),
                ..Default::default()
            }),
            ..Default::default()
        };
        let err = run(&cfg, Some(1)).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("2"), "coupling 2 reported: {text}");
        assert!(text.contains("-0.5"), "coupling -0.5 reported");
        assert!(text.contains("duty"), "duty reported");
        assert!(text.contains("count"), "seed count reported");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn float_format_has_17_significant_digits_and_round_trips() {
        assert_eq!(fmt_float(0.5), "5.0000000000000000e-1");
        assert_eq!(fmt_float(0.0), "0.0000000000000000e0");
        for v in [1.0 / 3.0, -2.718281828459045e-7, 6.02214076e23] {
            let s = fmt_float(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back, v, "round trip of {v} through {s}");
        }
    }

    #[test]
    fn unknown_preset_is_a_validation_error() {
        let err = preset("not-a-preset").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn non_finite_values_abort_the_export_with_a_diagnostic() {
        use crate::flow::{FlowLine, PointDiag, Terminal};
        let line = FlowLine {
            seed: [0.0; 3],
            points: vec![[1.0, 2.0, 3.0]],
            arc_s: vec![0.0],
            time_t: vec![],
            diag: vec![PointDiag {
                s: [0.0, f64::NAN, 0.0],
                rho_cl: 1.0,
                q: 0.0,
                rho_mes: 1.0,
            }],
            terminal: Terminal::MaxSteps,
        };
        let err = flowlines_csv(&[ExportLine { line_id: 0, line: &line }]).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("flowline export"), "diagnostic names the op: {text}");
        assert!(text.contains('1') && text.contains('2'), "diagnostic names the point: {text}");
        assert_eq!(err.exit_code(), 1);
    }
}
