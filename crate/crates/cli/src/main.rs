//! `pidgraph`: extract a connection graph from a P&ID raster, score results
//! against ground truth, draw debug overlays and write synthetic fixtures.
//!
//! Exit status: 0 success, 1 configuration error, 2 input error, 3 pipeline
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use pidgraph_core::detect::write_annotations;
use pidgraph_core::export::export_json;
use pidgraph_core::pipeline::{
    render_table, run_debug_overlay, run_eval, run_extract, write_eval_outputs, EvalMode, ExtractRequest,
};
use pidgraph_core::synth::{
    generate_synthetic_plan, minimal_layout, pump_tee_layout, random_layout, Perturbation, RandomLayoutParams,
};
use pidgraph_core::topology::matrix_to_graph;
use pidgraph_core::{DetectorMode, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "pidgraph", version, about = "P&ID raster to connection graph")]
struct Cli {
    /// TOML config layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on one plan image.
    Extract {
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `detector.mode`. Defaults to `annotations` when
        /// `--annotations` is given.
        #[arg(long)]
        detector_mode: Option<String>,
        /// Annotation or external detection JSON for the plan.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Score predictions against ground truth, matched by file stem.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "connections")]
        mode: String,
        /// Also write report.json and pr_curve.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw segments, crossings, boxes and edges over the plan as SVG.
    Overlay {
        plan: PathBuf,
        /// Output directory of a previous `extract` run.
        #[arg(long)]
        stage: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic plan with its annotations and true topology.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Layout::Random)]
        layout: Layout,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gaussian intensity noise, grey levels.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Largest glyph rotation, degrees.
        #[arg(long, default_value_t = 0.0)]
        skew: f64,
        /// Allow four-way crossovers in random layouts.
        #[arg(long)]
        crossovers: bool,
        #[arg(long, default_value = "plan")]
        name: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Random,
    PumpTee,
    Minimal,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pidgraph: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    match cli.cmd {
        Command::Extract { plan, out, detector_mode, annotations } => {
            match detector_mode {
                Some(m) => cfg.detector.mode = m.parse().map_err(PipelineError::Input)?,
                None if annotations.is_some() => cfg.detector.mode = DetectorMode::Annotations,
                None => {}
            }
            let req = ExtractRequest { plan, out_dir: out, annotations, config_path: cli.config };
            let m = run_extract(&req, &cfg)?;
            let s = &m.summary;
            println!(
                "{} symbols, {} segments, {} crossings, {} edges in {:.2}s",
                s.symbols, s.segments, s.crossings, s.edges, m.total_seconds
            );
        }
        Command::Eval { pred, truth, mode, out } => {
            let mode: EvalMode = mode.parse().map_err(PipelineError::Input)?;
            let report = run_eval(&pred, &truth, mode, &cfg)?;
            print!("{}", render_table(&report));
            if let Some(dir) = out {
                for f in write_eval_outputs(&report, &dir)? {
                    info!("wrote {}", dir.join(f).display());
                }
            }
        }
        Command::Overlay { plan, stage, out } => run_debug_overlay(&plan, &stage, &out)?,
        Command::Synth { out, layout, seed, noise, skew, crossovers, name } => {
            let spec = match layout {
                Layout::Random => random_layout(seed, &RandomLayoutParams { crossovers, ..Default::default() }),
                Layout::PumpTee => pump_tee_layout(),
                Layout::Minimal => minimal_layout(),
            };
            let perturb = Perturbation { noise_sigma: noise, max_rotation_deg: skew, ..Default::default() };
            let plan =
                generate_synthetic_plan(&spec, seed, &perturb).map_err(|e| PipelineError::Input(e.to_string()))?;
            write_synth(&out, &name, &plan)?;
        }
    }
    Ok(())
}

/// `<out>/<name>.png`, `<out>/annotations/<name>.json` and
/// `<out>/truth/<name>.json` (topology JSON).
fn write_synth(out: &Path, name: &str, plan: &pidgraph_core::synth::SyntheticPlan) -> Result<(), PipelineError> {
    let io = |e: std::io::Error| PipelineError::Input(format!("{}: {e}", out.display()));
    for sub in ["annotations", "truth"] {
        std::fs::create_dir_all(out.join(sub)).map_err(io)?;
    }
    let png = out.join(format!("{name}.png"));
    plan.image.to_gray_image().save(&png).map_err(|e| PipelineError::Input(format!("{}: {e}", png.display())))?;
    std::fs::write(out.join("annotations").join(format!("{name}.json")), write_annotations(name, &plan.truth_symbols))
        .map_err(io)?;
    let graph = matrix_to_graph(&plan.truth_matrix, &plan.truth_symbols, name).map_err(PipelineError::Pipeline)?;
    let json = export_json(&graph).map_err(|e| PipelineError::Pipeline(e.to_string()))?;
    std::fs::write(out.join("truth").join(format!("{name}.json")), json).map_err(io)?;
    println!("{} symbols, {} true connections -> {}", plan.truth_symbols.len(), graph.edges.len(), png.display());
    Ok(())
}
