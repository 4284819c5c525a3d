use clap::{Parser, Subcommand};
use mesoflow::cli::{self, RunMode, SceneConfig};
use mesoflow::emfield::QReduction;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "mesoflow",
    version,
    about = "Electromagnetic energy-flow lines under a tunable quantum-classical interpolation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scene config and write flowlines.csv, density_map.csv and
    /// report.json to the output directory.
    Run {
        /// TOML scene config; optional when --preset supplies the scene.
        config: Option<PathBuf>,
        /// Canned parameter set: double-slit, ronchi, lg-donut or
        /// evolve-plane-wave. File and flag values override it.
        #[arg(long)]
        preset: Option<String>,
        /// Comma-separated coupling values in [0, 1].
        #[arg(long, value_delimiter = ',')]
        coupling: Option<Vec<f64>>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of seed points.
        #[arg(long)]
        seeds: Option<usize>,
        /// Trace parametrization: geometric, timed or both.
        #[arg(long)]
        mode: Option<String>,
        /// Dimensionless scale knob on the quantum potential.
        #[arg(long = "q-scale")]
        q_scale: Option<f64>,
        /// Quantum-potential Laplacian reduction: 3d or transverse.
        #[arg(long)]
        reduction: Option<String>,
    },
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = Cli::parse();
    let Command::Run {
        config,
        preset,
        coupling,
        out,
        seeds,
        mode,
        q_scale,
        reduction,
    } = cli.command;

    if config.is_none() && preset.is_none() {
        eprintln!("error: provide a config file, a --preset, or both");
        return 2;
    }

    let mode = match mode.as_deref() {
        None => None,
        Some("geometric") => Some(RunMode::Geometric),
        Some("timed") => Some(RunMode::Timed),
        Some("both") => Some(RunMode::Both),
        Some(other) => {
            eprintln!("error: --mode '{other}' must be geometric, timed or both");
            return 2;
        }
    };
    let reduction = match reduction.as_deref() {
        None => None,
        Some("3d") => Some(QReduction::ThreeD),
        Some("transverse") => Some(QReduction::Transverse),
        Some(other) => {
            eprintln!("error: --reduction '{other}' must be 3d or transverse");
            return 2;
        }
    };

    let mut merged = match preset.as_deref().map(cli::preset).transpose() {
        Ok(p) => p.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if let Some(path) = &config {
        match SceneConfig::load(path) {
            Ok(file_cfg) => merged = merged.merged(file_cfg),
            Err(e) => {
                eprintln!("error: {e}");
                return e.exit_code();
            }
        }
    }
    let overlay = SceneConfig {
        out_dir: out,
        mode,
        couplings: coupling,
        seeds: seeds.map(|count| cli::SeedsConfig {
            count: Some(count),
            ..Default::default()
        }),
        meso: if q_scale.is_some() || reduction.is_some() {
            Some(cli::MesoConfig {
                q_scale,
                reduction,
            })
        } else {
            None
        },
        ..Default::default()
    };
    let merged = merged.merged(overlay);

    let threads = match std::env::var("MESOFLOW_THREADS") {
        Err(_) => None,
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Some(n),
            _ => {
                eprintln!("error: MESOFLOW_THREADS='{raw}' must be a positive integer");
                return 2;
            }
        },
    };

    match cli::run(&merged, threads) {
        Ok(outcome) => {
            let report = &outcome.report;
            println!(
                "wrote {} ({} lines, {} flagged)",
                outcome.out_dir.display(),
                report.lines.len(),
                report.flagged_lines
            );
            if let Some(inv) = &report.invariance {
                println!("max matched-arc path deviation: {:e}", inv.max_path_deviation);
            }
            if let Some(ev) = &report.evolve {
                println!(
                    "energy drift: {:e}, reversal distance: {:e}",
                    ev.energy_drift, ev.reversal_distance
                );
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
