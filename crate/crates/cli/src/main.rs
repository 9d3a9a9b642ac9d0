mod config;
mod evaluate;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::{error, info};
use serde::Serialize;

use scribble_guidance::experiment::{final_regions, run_trial, Trial};
use scribble_guidance::gradcheck::run_gradcheck;
use scribble_guidance::io::encode_pgm;
use scribble_guidance::toyworld::ObjectTruth;
use scribble_guidance::{Rng, ScribbleFile, ScribbleSet, StepDiagnostics, World};

use config::RunConfig;
use evaluate::{load_reports, Aggregate, Comparison};

#[derive(Parser)]
#[command(name = "scribble", version, about = "Scribble-guided sampling on a toy diffusion world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample one image per seed and write images, diagnostics and metrics.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scribbles: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic guidance gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true, default_value_t = 1.0)]
        corrupt_gradient: f64,
    },
    /// Summarize the metrics of one run directory, or compare two.
    Evaluate {
        dir: PathBuf,
        other: Option<PathBuf>,
    },
}

enum Failure {
    Input(anyhow::Error),
    Check,
    Numerical(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check => 1,
            Failure::Input(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

fn classify(e: scribble_guidance::Error) -> Failure {
    match e {
        scribble_guidance::Error::Numerical { .. } => Failure::Numerical(e.into()),
        other => Failure::Input(other.into()),
    }
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    seed: u64,
    target: usize,
    decoded_template: usize,
    decoded_objects: &'a [ObjectTruth],
    final_region_cells: Vec<usize>,
    steps: &'a [StepDiagnostics],
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_trial(dir: &Path, trial: &Trial<f64>) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let pgm = encode_pgm(&trial.output.final_state.x);
    std::fs::write(dir.join("image.pgm"), pgm).with_context(|| format!("writing {}", dir.display()))?;
    let diag = Diagnostics {
        seed: trial.seed,
        target: trial.target,
        decoded_template: trial.decoded.template,
        decoded_objects: &trial.decoded.objects,
        final_region_cells: final_regions(trial).iter().map(|m| m.count()).collect(),
        steps: &trial.output.steps,
    };
    write_json(&dir.join("diagnostics.json"), &diag)?;
    write_json(&dir.join("metrics.json"), &trial.report)
}

fn generate(config: &Path, scribbles: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let world = World::build(&cfg.world).map_err(classify)?;
    let schedule = cfg.schedule.build::<f64>().map_err(classify)?;
    let guidance = cfg.guidance.validated().map_err(classify)?;
    if let Some(t) = cfg.target {
        if t >= world.templates().len() {
            return Err(anyhow::anyhow!("target {t} out of range ({} templates)", world.templates().len()).into());
        }
    }
    let text = std::fs::read_to_string(scribbles).with_context(|| format!("reading {}", scribbles.display()))?;
    let file = ScribbleFile::from_json(&text).with_context(|| format!("parsing {}", scribbles.display()))?;
    let n = world.resolution();
    let input = ScribbleSet::from_file(&file, n, n).with_context(|| format!("loading {}", scribbles.display()))?;

    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let resolved = RunConfig { output_dir: out.clone(), guidance: guidance.clone(), ..cfg.clone() };
    write_json(&out.join("resolved_config.json"), &resolved)?;

    let workers = cfg.worker_count();
    info!("{} seeds on {} workers", cfg.seeds.len(), workers);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(), Failure>>>> = Mutex::new((0..cfg.seeds.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = cfg.seeds.get(i) else { break };
                let mut rng = Rng::new(seed);
                let r = run_trial(&world, &input, cfg.target, &guidance, &schedule, seed, &mut rng)
                    .map_err(classify)
                    .and_then(|trial| {
                        info!(
                            "seed {seed}: ratio {:.4} miou {:.4} orientation {:.2}",
                            trial.report.scribble_ratio, trial.report.miou, trial.report.orientation_error_deg
                        );
                        write_trial(&out.join(format!("seed_{seed}")), &trial).map_err(Failure::from)
                    });
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    for r in results.into_inner().expect("results lock").into_iter().flatten() {
        r?;
    }
    let reports = load_reports(&out)?;
    write_json(&out.join("summary.json"), &Aggregate::of(&reports))?;
    Ok(())
}

fn gradcheck(config: Option<&Path>, corrupt: f64) -> Result<(), Failure> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let world = World::build(&cfg.world).map_err(classify)?;
    let schedule = cfg.schedule.build::<f64>().map_err(classify)?;
    let report = run_gradcheck(&world, &schedule, &cfg.guidance, &cfg.gradcheck, corrupt).map_err(classify)?;
    for c in &report.components {
        println!(
            "{:<18} max relative error {:.3e} (tol {:.0e}) {}",
            c.component,
            c.max_relative_error,
            c.tolerance,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn summarize(dir: &Path, other: Option<&Path>) -> Result<(), Failure> {
    let a = Aggregate::of(&load_reports(dir)?);
    let text = match other {
        None => serde_json::to_string_pretty(&a),
        Some(o) => serde_json::to_string_pretty(&Comparison::new(a, Aggregate::of(&load_reports(o)?))),
    }
    .map_err(anyhow::Error::from)?;
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { config, scribbles, out } => generate(config, scribbles, out.clone()),
        Command::Gradcheck { config, corrupt_gradient } => gradcheck(config.as_deref(), *corrupt_gradient),
        Command::Evaluate { dir, other } => summarize(dir, other.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Input(e) | Failure::Numerical(e) => error!("{e:#}"),
                Failure::Check => error!("gradient check failed"),
            }
            ExitCode::from(f.code())
        }
    }
}
