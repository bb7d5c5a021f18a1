use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use bridgecond::checkpoint::Checkpoint;
use bridgecond::config::{RunConfig, SEED_ENV};
use bridgecond::datapipe::manifest::{Manifest, MANIFEST_FILE};
use bridgecond::datapipe::pipeline::run_pipeline_parallel;
use bridgecond::datapipe::scorer::{ScorerAdapter, DEFAULT_TIMEOUT};
use bridgecond::datapipe::world::gen_scene;
use bridgecond::gradcheck;
use bridgecond::metrics::{evaluate_parallel, MetricReport};
use bridgecond::model::Model;
use bridgecond::raster::RasterImage;
use bridgecond::training::{load_dataset, train_stage, TrainState};

const EXIT_USAGE: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Instruction-based image editing at desk scale: synthetic data, staged
/// training, editing and evaluation.
#[derive(Parser)]
#[command(name = "bridgecond", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes with their JSON specs.
    GenWorld {
        /// Number of scenes.
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// First scene seed.
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an edit dataset (images + manifest) from synthetic scenes.
    BuildDataset {
        /// Number of scenes to process.
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        /// Run config file; built-in defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// First scene seed.
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        /// Quality threshold override, in [0, 10].
        #[arg(long)]
        tau_q: Option<f64>,
        /// Scorer: "mock" or a shell command speaking the JSON-lines protocol; overrides the config.
        #[arg(long)]
        scorer: Option<String>,
        /// Seconds to wait for each external scorer reply.
        #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs())]
        timeout_secs: u64,
        /// Worker threads; output is identical for any count.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage and write its checkpoint and loss trace.
    Train {
        /// Stage to run.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Dataset manifest, or the directory holding it.
        #[arg(long)]
        data: PathBuf,
        /// Previous-stage checkpoint (required for stages 2 and 3), or a same-stage checkpoint to resume.
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
        /// Run config file; built-in defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for initialisation, shuffling and noise; the config seed when absent.
        #[arg(long, env = SEED_ENV)]
        seed: Option<u64>,
        /// Output directory for stage<N>.ckpt and stage<N>_trace.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Edit one image with a trained checkpoint.
    Edit {
        /// Checkpoint, normally from stage 3.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source image (PPM).
        #[arg(long)]
        image: PathBuf,
        /// Editing instruction.
        #[arg(long)]
        instruction: String,
        /// Image-condition weight.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Sampling steps, at most the checkpoint's diffusion steps.
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Sampler seed.
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        /// Output image path (PPM).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a dataset manifest.
    Eval {
        /// Dataset manifest, or the directory holding it.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of predictions named <row id>.ppm.
        #[arg(long)]
        pred: PathBuf,
        /// Scorer: "mock", "none", or a shell command speaking the JSON-lines protocol.
        #[arg(long, default_value = "mock")]
        scorer: String,
        /// Seconds to wait for each external scorer reply.
        #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs())]
        timeout_secs: u64,
        /// Worker threads; output is identical for any count.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Output CSV report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// "all" or one block name.
        #[arg(long, default_value = "all")]
        module: String,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let numeric = error
            .chain()
            .any(|e| matches!(e.downcast_ref::<bridgecond::Error>(), Some(bridgecond::Error::NonFinite(_))));
        Failure {
            code: if numeric { EXIT_NUMERIC } else { EXIT_USAGE },
            error,
        }
    }
}

impl From<bridgecond::Error> for Failure {
    fn from(e: bridgecond::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<u8, Failure> {
    match command {
        Command::GenWorld { count, seed, out } => gen_world(count, seed, &out),
        Command::BuildDataset {
            scenes,
            config,
            seed,
            tau_q,
            scorer,
            timeout_secs,
            workers,
            out,
        } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            if let Some(t) = tau_q {
                cfg.tau_q = t;
            }
            let spec = scorer.unwrap_or_else(|| cfg.scorer.clone());
            build_dataset(&cfg, scenes, seed, &spec, Duration::from_secs(timeout_secs), workers, &out)
        }
        Command::Train {
            stage,
            data,
            from_checkpoint,
            config,
            seed,
            out,
        } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            train(&cfg, stage, &data, from_checkpoint.as_deref(), &out)
        }
        Command::Edit {
            checkpoint,
            image,
            instruction,
            lambda,
            steps,
            seed,
            out,
        } => edit(&checkpoint, &image, &instruction, lambda, steps, seed, &out),
        Command::Eval {
            manifest,
            pred,
            scorer,
            timeout_secs,
            workers,
            out,
        } => eval(&manifest, &pred, &scorer, Duration::from_secs(timeout_secs), workers, &out),
        Command::Gradcheck { module } => {
            let rows = gradcheck::run(&module)?;
            print!("{}", gradcheck::format_table(&rows));
            Ok(if rows.iter().all(|r| r.passed()) { 0 } else { EXIT_NUMERIC })
        }
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn gen_world(count: usize, seed: u64, out: &Path) -> Result<u8, Failure> {
    create_dir(out)?;
    for s in seed..seed + count as u64 {
        let (spec, image) = gen_scene(s);
        image.save_ppm(&out.join(format!("scene_{s:06}.ppm")))?;
        let json = serde_json::to_string_pretty(&spec).map_err(|e| anyhow!(e))?;
        let path = out.join(format!("scene_{s:06}.json"));
        fs::write(&path, json + "\n").with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(0)
}

fn build_dataset(
    cfg: &RunConfig,
    scenes: usize,
    seed: u64,
    scorer: &str,
    timeout: Duration,
    workers: usize,
    out: &Path,
) -> Result<u8, Failure> {
    let pc = cfg.pipeline_config(scenes, seed);
    let output = run_pipeline_parallel(&pc, || ScorerAdapter::from_spec(scorer, timeout), workers, out)?;
    let s = &output.stats;
    println!("scenes processed: {}", s.scenes);
    println!("objects found: {}", s.objects_found);
    println!("masks kept: {}", s.masks_kept);
    println!("pairs built: {}", s.pairs_built);
    println!("rows written: {}", s.rows);
    println!("pairs accepted: {}", s.accepted);
    println!("rows unscored: {}", s.unscored);
    println!("manifest: {}", out.join(MANIFEST_FILE).display());
    if output.partial_failure() {
        eprintln!("warning: {} rows could not be scored", s.unscored);
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn train(cfg: &RunConfig, stage: u8, data: &Path, from: Option<&Path>, out: &Path) -> Result<u8, Failure> {
    let schedule = cfg.stage_schedule(stage)?;
    let (mut model, mut state) = match from {
        None if stage > 1 => {
            return Err(anyhow!("stage {stage} requires a stage {} checkpoint (pass --from-checkpoint)", stage - 1).into())
        }
        None => {
            let mut model = Model::new(&cfg.model_config())?;
            let state = TrainState::new(&mut model, stage, cfg.seed)?;
            (model, state)
        }
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut expected = cfg.model_config();
            expected.seed = ck.config.seed;
            ck.check_config(&expected)
                .with_context(|| format!("checkpoint {} does not match the run config", path.display()))?;
            if ck.stage == stage {
                ck.resume()?
            } else if ck.stage + 1 == stage {
                let mut model = ck.model()?;
                let state = TrainState::new(&mut model, stage, cfg.seed)?;
                (model, state)
            } else {
                return Err(anyhow!(
                    "stage {stage} requires a stage {} checkpoint, but {} is from stage {}",
                    stage.saturating_sub(1).max(1),
                    path.display(),
                    ck.stage
                )
                .into())
            }
        }
    };
    let dataset = load_dataset(&manifest_path(data))?;
    println!("stage {stage}: {} samples, {} steps from step {}", dataset.len(), schedule.steps, state.step);
    let trace = train_stage(&mut model, &mut state, &schedule, &dataset)?;
    for row in trace.rows.iter().filter(|r| r.step % 50 == 0 || r.step == schedule.steps) {
        println!("step {:>5} total {:.6}", row.step, row.total);
    }
    create_dir(out)?;
    let ck_path = out.join(format!("stage{stage}.ckpt"));
    Checkpoint::capture(&model, &state).save(&ck_path)?;
    trace.write(&out.join(format!("stage{stage}_trace.csv")))?;
    println!("checkpoint: {}", ck_path.display());
    Ok(0)
}

fn edit(checkpoint: &Path, image: &Path, instruction: &str, lambda: f64, steps: usize, seed: u64, out: &Path) -> Result<u8, Failure> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.stage < 3 {
        eprintln!("warning: checkpoint is from stage {}, not stage 3; proceeding", ck.stage);
    }
    if !(lambda >= 0.0) {
        return Err(anyhow!("--lambda must be non-negative").into());
    }
    let model = ck.model()?;
    let source = RasterImage::load_ppm(image)?;
    let edited = model.edit(&source, instruction, lambda, steps, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    edited.save_ppm(out)?;
    println!("wrote {}", out.display());
    Ok(0)
}

fn eval(manifest: &Path, pred: &Path, scorer: &str, timeout: Duration, workers: usize, out: &Path) -> Result<u8, Failure> {
    let path = manifest_path(manifest);
    let m = Manifest::read(&path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let make = move || ScorerAdapter::from_spec(scorer, timeout);
    let maker: Option<&(dyn Fn() -> ScorerAdapter + Sync)> = if scorer == "none" { None } else { Some(&make) };
    let report: MetricReport = evaluate_parallel(&m, root, pred, maker, workers)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    report.write_csv(out)?;
    print!("{}", report.summary_table());
    let missing = report.missing();
    if missing > 0 {
        eprintln!("warning: {missing} predictions missing");
    }
    if report.unscored > 0 {
        eprintln!("warning: {} rows could not be scored", report.unscored);
    }
    Ok(if report.partial_failure() { EXIT_PARTIAL } else { 0 })
}
