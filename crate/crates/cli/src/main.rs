use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use meningrade_core::eval::{counting_error, pr_sweep, read_jsonl, EvalReport};
use meningrade_core::pipeline::cmd_process;
use meningrade_core::report::{cmd_report, render_text};
use meningrade_core::synth::{synthesize, Ki67Params, SynthParams};
use meningrade_core::{EngineConfig, Error, Result};

#[derive(Parser)]
#[command(name = "meningrade", version, about = "Meningioma grading engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run detectors and aggregation over a case and write its outputs.
    Process {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        bindings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// TOML engine configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render a synthetic case with planted findings.
    Synth(SynthArgs),
    /// Precision-recall sweep (or counting error with `--counts`) of detector output.
    Eval {
        /// JSONL of `{key, score}` (or `{key, count}`).
        #[arg(long)]
        pred: PathBuf,
        /// JSONL of `{key, label}` (or `{key, count}`).
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        counts: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write report.json and report.txt for a processed case.
    Report {
        /// Output directory of `process`.
        #[arg(long = "case")]
        case_dir: PathBuf,
        /// Session directory whose actions are folded in.
        #[arg(long)]
        session: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve cases and review sessions over HTTP.
    Serve {
        /// A processed case directory, or a directory of them.
        #[arg(long)]
        cases: PathBuf,
        #[arg(long, default_value = "sessions")]
        sessions: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON file of synthesis parameters; flags below override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    case_id: Option<String>,
    #[arg(long)]
    slide_px: Option<u32>,
    #[arg(long)]
    mitoses: Option<u32>,
    #[arg(long)]
    necrosis: Option<u32>,
    #[arg(long)]
    sheeting: Option<u32>,
    #[arg(long)]
    prominent_nucleoli: Option<u32>,
    #[arg(long)]
    small_cell_patches: Option<u32>,
    #[arg(long)]
    brain_invasion: bool,
    /// Add a Ki-67 slide with `POS:NEG` planted nuclei.
    #[arg(long, value_parser = parse_ki67)]
    ki67: Option<Ki67Params>,
}

fn parse_ki67(s: &str) -> std::result::Result<Ki67Params, String> {
    let (p, n) = s.split_once(':').ok_or("expected POS:NEG")?;
    Ok(Ki67Params {
        positive: p.parse().map_err(|e| format!("{e}"))?,
        negative: n.parse().map_err(|e| format!("{e}"))?,
    })
}

fn synth_params(a: &SynthArgs) -> Result<SynthParams> {
    let mut p = match &a.params {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|_| Error::MissingFile(path.clone()))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Schema { path: path.clone(), msg: e.to_string() })?
        }
        None => SynthParams::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f.clone() { p.$f = v; })* };
    }
    set!(seed, case_id, slide_px, mitoses, necrosis, sheeting, prominent_nucleoli, small_cell_patches);
    p.brain_invasion |= a.brain_invasion;
    if a.ki67.is_some() {
        p.ki67 = a.ki67.clone();
    }
    Ok(p)
}

fn write_json(path: &Path, value: &EvalReport) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Process { manifest, bindings, out, workers, config } => {
            let cfg = match config {
                Some(p) => EngineConfig::load(&p)?,
                None => EngineConfig::default(),
            };
            let (pc, derived) = cmd_process(&manifest, &bindings, &out, &cfg, workers)?;
            info!("{} detections across {} slides", pc.detections.len(), pc.slides.len());
            for r in &derived.regions {
                println!("{} {:?} {} value={}", r.slide_id, r.kind, r.rect, r.value);
            }
            println!(
                "grade {:?} main={}",
                derived.grade.grade,
                derived.grade.main_contributing.map_or("none", |c| c.as_str())
            );
        }
        Cmd::Synth(a) => {
            let p = synth_params(&a)?;
            let s = synthesize(&p, &a.out)?;
            println!("manifest {}", s.manifest_path.display());
            println!("bindings {}", s.bindings_path.display());
        }
        Cmd::Eval { pred, truth, counts, out } => {
            let report: EvalReport = if counts {
                counting_error(read_jsonl(&pred)?, read_jsonl(&truth)?)?
            } else {
                pr_sweep(read_jsonl(&pred)?, read_jsonl(&truth)?)?
            };
            match out {
                Some(path) => write_json(&path, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            if let Some(b) = &report.best_f1 {
                eprintln!("best F1 {:.4} at threshold {}", b.f1, b.threshold);
            }
            if let Some(e) = report.counting_error_percent {
                eprintln!("counting error {e:.2}%");
            }
        }
        Cmd::Report { case_dir, session, out } => {
            let r = cmd_report(&case_dir, session.as_deref(), &out)?;
            print!("{}", render_text(&r));
        }
        Cmd::Serve { cases, sessions, addr } => {
            let state = meningrade_server::AppState::open(&cases, &sessions)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io { path: PathBuf::new(), source: e })?;
            info!("listening on {addr}");
            rt.block_on(meningrade_server::serve(state, &addr)).map_err(|e| Error::Io { path: PathBuf::new(), source: e })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
