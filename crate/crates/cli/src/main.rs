//! `headscan`: command-line front end for the scan-to-print pipeline.
//!
//! `run` executes every stage; the stage subcommands (`scan-sim`,
//! `reconstruct`, `select`, `scale`, `export`, `evaluate`) execute one
//! step each, reading the previous step's files from the output
//! directory. `evaluate` doubles as a standalone mesh-distance tool
//! when given two mesh paths instead of a config.
//!
//! Exit codes: 0 success, 1 configuration or usage error, then one code
//! per failing stage: 2 simulate, 3 reconstruct, 4 select, 5 scale,
//! 6 export, 7 evaluate.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use headscan_core::evaluation::{hausdorff_report, Sampling};
use headscan_core::io::mesh::read_mesh;
use headscan_core::pipeline::{
    run_pipeline, stage_evaluate, stage_export, stage_reconstruct, stage_scale, stage_select,
    stage_simulate, template_toml, write_demo_scene, PipelineConfig, SelectionMode, StageReport,
};
use headscan_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "headscan",
    version,
    about = "Scan a head with a synthetic orbiting depth camera, reconstruct it, and prepare it for 3D printing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print an annotated configuration template (or write it with --out).
    Template(TemplateArgs),
    /// Write a ready-to-run example: head mesh, head-on-table scene, config.
    DemoScene(DemoSceneArgs),
    /// Run every stage in order: simulate, reconstruct, select, scale,
    /// export, evaluate.
    Run(StageArgs),
    /// Render the synthetic scan: depth frames plus true and sensor poses.
    #[command(name = "scan-sim", alias = "simulate")]
    ScanSim(StageArgs),
    /// Fuse the scan into the voxel volume and extract the raw surface.
    Reconstruct(StageArgs),
    /// Isolate the head from the raw reconstruction.
    Select(StageArgs),
    /// Scale the selected head to the printer's build volume.
    Scale(StageArgs),
    /// Write the print-ready binary STL.
    Export(StageArgs),
    /// Compare the selected head against the configured reference, or —
    /// given two mesh paths — compare any two meshes directly.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct TemplateArgs {
    /// Write the template here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DemoSceneArgs {
    /// Directory receiving head.obj, scene.obj, and config.toml.
    #[arg(long, default_value = "demo")]
    out: PathBuf,
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured head-selection mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Copy, Clone, ValueEnum)]
enum ModeArg {
    Table,
    Human,
}

impl From<ModeArg> for SelectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Table => SelectionMode::Table,
            ModeArg::Human => SelectionMode::Human,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Two meshes to compare directly (.stl, .ply, or .obj).
    #[arg(value_name = "MESH", num_args = 0..=2)]
    meshes: Vec<PathBuf>,
    /// Pipeline configuration file (stage mode).
    #[arg(long, conflicts_with = "meshes")]
    config: Option<PathBuf>,
    /// Override the configured master seed (stage mode).
    #[arg(long, requires = "config")]
    seed: Option<u64>,
    /// Override the configured output directory (stage mode).
    #[arg(long, requires = "config")]
    out: Option<PathBuf>,
    /// Print the full report as JSON instead of a summary (direct mode).
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Template(args) => cmd_template(&args),
        Command::DemoScene(args) => cmd_demo_scene(&args),
        Command::Run(args) => cmd_run(&args),
        Command::ScanSim(args) => cmd_stage(&args, stage_simulate, "simulate"),
        Command::Reconstruct(args) => cmd_stage(&args, stage_reconstruct, "reconstruct"),
        Command::Select(args) => cmd_stage(&args, stage_select, "select"),
        Command::Scale(args) => cmd_stage(&args, stage_scale, "scale"),
        Command::Export(args) => cmd_stage(&args, stage_export, "export"),
        Command::Evaluate(args) => cmd_evaluate(&args),
    };
    ExitCode::from(code)
}

fn print_error(e: &Error) {
    eprintln!("error: {e}");
    let mut source = std::error::Error::source(e);
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
}

/// Exit code for a failure inside the named stage.
fn stage_code(stage: &str) -> u8 {
    match stage {
        "simulate" => 2,
        "reconstruct" => 3,
        "select" => 4,
        "scale" => 5,
        "export" => 6,
        "evaluate" => 7,
        _ => 1,
    }
}

fn load_config(args: &StageArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::from_file(&args.config)?;
    apply_overrides(&mut cfg, args.seed, args.out.as_ref(), args.mode);
    Ok(cfg)
}

fn apply_overrides(
    cfg: &mut PipelineConfig,
    seed: Option<u64>,
    out: Option<&PathBuf>,
    mode: Option<ModeArg>,
) {
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.output_dir = out.clone();
    }
    if let Some(mode) = mode {
        cfg.selection.mode = mode.into();
    }
}

fn report_line(report: &StageReport) {
    println!("{}: {} [{:.3} s]", report.name, report.detail, report.seconds);
}

fn cmd_template(args: &TemplateArgs) -> u8 {
    match &args.out {
        None => {
            print!("{}", template_toml());
            0
        }
        Some(path) => match std::fs::write(path, template_toml()) {
            Ok(()) => {
                println!("wrote configuration template to {}", path.display());
                0
            }
            Err(e) => {
                print_error(&Error::Io {
                    path: path.clone(),
                    source: e,
                });
                1
            }
        },
    }
}

fn cmd_demo_scene(args: &DemoSceneArgs) -> u8 {
    match write_demo_scene(&args.out) {
        Ok(demo) => {
            println!("wrote {}", demo.head.display());
            println!("wrote {}", demo.scene.display());
            println!("wrote {}", demo.config.display());
            println!();
            println!("next: headscan run --config {}", demo.config.display());
            0
        }
        Err(e) => {
            print_error(&e);
            1
        }
    }
}

fn cmd_run(args: &StageArgs) -> u8 {
    let cfg = match load_config(args) {
        Ok(cfg) => cfg,
        Err(e) => {
            print_error(&e);
            return 1;
        }
    };
    match run_pipeline(&cfg) {
        Ok(summary) => {
            for report in &summary.stages {
                report_line(report);
            }
            println!("artifacts in {}", cfg.output_dir.display());
            0
        }
        Err(e) => {
            print_error(&e);
            match &e {
                Error::Stage { stage, .. } => stage_code(stage),
                _ => 1,
            }
        }
    }
}

fn cmd_stage(
    args: &StageArgs,
    stage: fn(&PipelineConfig) -> Result<StageReport>,
    name: &'static str,
) -> u8 {
    let cfg = match load_config(args) {
        Ok(cfg) => cfg,
        Err(e) => {
            print_error(&e);
            return 1;
        }
    };
    match stage(&cfg) {
        Ok(report) => {
            report_line(&report);
            0
        }
        Err(e) => {
            print_error(&e);
            stage_code(name)
        }
    }
}

fn cmd_evaluate(args: &EvaluateArgs) -> u8 {
    if let Some(config) = &args.config {
        let stage_args = StageArgs {
            config: config.clone(),
            seed: args.seed,
            out: args.out.clone(),
            mode: None,
        };
        return cmd_stage(&stage_args, stage_evaluate, "evaluate");
    }
    if args.meshes.len() != 2 {
        eprintln!("error: evaluate needs either --config FILE or two mesh paths");
        return 1;
    }
    match evaluate_pair(&args.meshes[0], &args.meshes[1], args.json) {
        Ok(()) => 0,
        Err(e) => {
            print_error(&e);
            stage_code("evaluate")
        }
    }
}

/// Standalone two-mesh comparison; percentages are relative to the first
/// mesh's bounding-box diagonal.
fn evaluate_pair(first: &PathBuf, second: &PathBuf, json: bool) -> Result<()> {
    let a = read_mesh(first)?;
    let b = read_mesh(second)?;
    let report = hausdorff_report(&a, &b, &Sampling::Vertices)?;
    if json {
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::InvalidInput(format!("could not serialize report: {e}")))?;
        println!("{text}");
    } else {
        println!(
            "reference diagonal: {:.4} m ({} -> {} and back)",
            report.bbox_diagonal_m,
            first.display(),
            second.display()
        );
        for (direction, m) in [
            ("forward ", &report.forward),
            ("backward", &report.backward),
            ("symmetric", &report.symmetric),
        ] {
            println!(
                "{direction}: mean {:.4} cm ({:.4}%), rms {:.4} cm ({:.4}%), max {:.4} cm ({:.4}%)",
                m.mean_cm, m.mean_bbox_pct, m.rms_cm, m.rms_bbox_pct, m.max_cm, m.max_bbox_pct
            );
        }
    }
    Ok(())
}
