use std::f64::consts::FRAC_PI_4;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dpd_core::checkpoint::{self, Checkpoint, Container};
use dpd_core::config::{RunConfig, TrainRun};
use dpd_core::diffusion::LatentSeq;
use dpd_core::error::DpdError;
use dpd_core::sampler::{continue_latent, inpaint, sample, ContinuationState, SamplerConfig};
use dpd_core::schedule::ScheduleKind;
use dpd_core::training::{
    ablate_schedules, ablate_schedules_oracle, si_snri_eval, synth_dataset, train, velocity_mse_eval, SynthDatasetSpec,
};
use dpd_core::verify::{self, Suite};

/// Angle-parameterized dual-path latent diffusion toolkit.
#[derive(Parser)]
#[command(name = "dpd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write an angle schedule as CSV (t, omega, delta).
    Schedule {
        #[arg(long, default_value = "uniform")]
        kind: ScheduleKind,
        #[arg(long)]
        steps: usize,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic (tokens, latent) examples to a directory.
    Synth {
        /// Run configuration; only the `model.*` and `data.*` keys matter.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of examples; defaults to `data.num_examples`.
        #[arg(long)]
        count: Option<usize>,
        /// Emit held-out examples (indices past the training set).
        #[arg(long)]
        held_out: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on synthetic data.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory for the loss curve, checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one window from tokens.
    Sample {
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Token ids, whitespace- or comma-separated.
        #[arg(long)]
        tokens: PathBuf,
        /// Latent output (`.csv` for CSV, otherwise a container).
        #[arg(long)]
        out: PathBuf,
    },
    /// Extend a window by one chunk.
    Continue {
        #[command(flatten)]
        sampling: SamplingArgs,
        /// The current window (latent file).
        #[arg(long)]
        input: PathBuf,
        /// Tokens describing the current window.
        #[arg(long)]
        tokens: PathBuf,
        /// Tokens for the new chunk.
        #[arg(long)]
        new_tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate the masked frames of a latent.
    Inpaint {
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        input: PathBuf,
        /// One 0/1 entry per frame; 1 marks frames to regenerate.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Velocity MSE and SI-SNRi on held-out synthetic data.
    Metrics {
        #[arg(long)]
        checkpoint: PathBuf,
        /// The training run's configuration, for its dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        examples: usize,
        /// Angle for SI-SNRi, in radians.
        #[arg(long, default_value_t = FRAC_PI_4)]
        delta: f64,
        /// Comma-separated angles for the velocity MSE.
        #[arg(long, default_value = "0.39269908169872414,0.7853981633974483,1.1780972450961724")]
        angles: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report file (`key = value`); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare schedules across step counts on held-out data.
    Ablate {
        /// Model to evaluate; omit with `--oracle`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use each example's analytic point-mass velocity instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        examples: usize,
        #[arg(long = "steps-list", default_value = "10,20")]
        steps_list: String,
        #[arg(long, default_value = "uniform,linear")]
        schedules: String,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        chunks: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV report; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in verification suites.
    Verify {
        #[arg(default_value = "all")]
        suite: Suite,
    },
    /// Describe a container file.
    CheckpointInfo { path: PathBuf },
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    schedule: Option<ScheduleKind>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Window length; defaults to the checkpoint's.
    #[arg(long)]
    frames: Option<usize>,
    /// Chunks per window; defaults to the checkpoint's.
    #[arg(long)]
    chunks: Option<usize>,
}

impl SamplingArgs {
    fn load(&self) -> Result<(Checkpoint, SamplerConfig)> {
        let ck = Checkpoint::load(&self.checkpoint).with_context(|| format!("loading {}", self.checkpoint.display()))?;
        let d = &ck.sampler;
        let cfg = SamplerConfig {
            schedule: self.schedule.unwrap_or(d.schedule).build(self.steps.unwrap_or(d.steps))?,
            cfg_scale: self.cfg_scale.unwrap_or(d.cfg_scale),
            seed: self.seed,
            chunk_count: self.chunks.unwrap_or(d.chunk_count),
            frames: self.frames.unwrap_or(d.frames),
        };
        cfg.validate()?;
        Ok((ck, cfg))
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => checkpoint::write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display())),
        None => {
            print_stdout(text);
            Ok(())
        }
    }
}

/// Writes to stdout, treating a closed pipe as a normal end of output.
fn print_stdout(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn read_tokens(path: &Path) -> Result<Vec<u32>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(checkpoint::parse_tokens(&text)?)
}

fn read_latent(path: &Path) -> Result<LatentSeq> {
    checkpoint::load_latent(path).with_context(|| format!("reading {}", path.display()))
}

fn dataset_spec(config: Option<&Path>) -> Result<SynthDatasetSpec> {
    match config {
        Some(p) => Ok(TrainRun::from_config(&RunConfig::load(p)?)?.data),
        None => Ok(TrainRun::default().data),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| anyhow::anyhow!("bad {what} {x:?}")))
        .collect()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Schedule { kind, steps, out } => emit(out.as_deref(), &kind.build(steps)?.to_csv())?,
        Command::Synth { config, seed, count, held_out, out } => {
            let mut spec = dataset_spec(config.as_deref())?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let count = count.unwrap_or(spec.num_examples);
            let ds = synth_dataset(&spec)?;
            fs::create_dir_all(&out)?;
            let first = if held_out { spec.num_examples } else { 0 };
            for i in first..first + count {
                let ex = ds.example(i)?;
                checkpoint::write_atomic(&out.join(format!("example_{i:05}.tokens")), checkpoint::tokens_to_text(&ex.tokens).as_bytes())?;
                checkpoint::save_latent(&ex.latent, &out.join(format!("example_{i:05}.csv")))?;
            }
            eprintln!("wrote {count} examples to {}", out.display());
        }
        Command::Train { config, seed, steps, out } => {
            let cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let mut run = TrainRun::from_config(&cfg)?;
            if let Some(s) = seed {
                run.train.seed = s;
            }
            if let Some(s) = steps {
                run.train.steps = s;
            }
            run.validate()?;
            train_command(&run, &out)?;
        }
        Command::Sample { sampling, tokens, out } => {
            let (ck, cfg) = sampling.load()?;
            let z = sample(&read_tokens(&tokens)?, &ck.model, &cfg)?;
            checkpoint::save_latent(&z, &out)?;
        }
        Command::Continue { sampling, input, tokens, new_tokens, out } => {
            let (ck, mut cfg) = sampling.load()?;
            let window = read_latent(&input)?;
            cfg.frames = window.frames();
            let new = read_tokens(&new_tokens)?;
            let state = ContinuationState::from_window(&window, &read_tokens(&tokens)?, new.len(), cfg.chunk_count)?;
            let z = continue_latent(&state, &new, &ck.model, &cfg)?;
            checkpoint::save_latent(&z, &out)?;
        }
        Command::Inpaint { sampling, input, mask, tokens, out } => {
            let (ck, cfg) = sampling.load()?;
            let given = read_latent(&input)?;
            let mask = checkpoint::parse_mask(&fs::read_to_string(&mask).with_context(|| format!("reading {}", mask.display()))?)?;
            let z = inpaint(&given, &mask, &read_tokens(&tokens)?, &ck.model, &cfg)?;
            checkpoint::save_latent(&z, &out)?;
        }
        Command::Metrics { checkpoint, config, examples, delta, angles, seed, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = synth_dataset(&dataset_spec(config.as_deref())?)?;
            let held = ds.held_out(examples)?;
            let angles: Vec<f64> = parse_list(&angles, "angle")?;
            let vmse = velocity_mse_eval(&ck.model, &held, &angles, seed)?;
            let gain = si_snri_eval(&ck.model, &held, delta, seed)?;
            emit(
                out.as_deref(),
                &format!("examples = {examples}\nvelocity_mse = {vmse:?}\nsi_snri_db = {gain:?}\nsi_snri_delta = {delta:?}\n"),
            )?;
        }
        Command::Ablate { checkpoint, oracle, config, examples, steps_list, schedules, cfg_scale, chunks, seed, out } => {
            let spec = dataset_spec(config.as_deref())?;
            let ds = synth_dataset(&spec)?;
            let held = ds.held_out(examples)?;
            let steps: Vec<usize> = parse_list(&steps_list, "step count")?;
            let kinds: Vec<ScheduleKind> = parse_list(&schedules, "schedule")?;
            let [a, b] = kinds[..] else { bail!("--schedules takes exactly two kinds") };
            let ck = match (&checkpoint, oracle) {
                (Some(p), false) => Some(Checkpoint::load(p)?),
                (None, true) => None,
                _ => bail!("give exactly one of --checkpoint and --oracle"),
            };
            let base = SamplerConfig {
                schedule: ScheduleKind::Uniform.build(1)?,
                cfg_scale: cfg_scale.unwrap_or(ck.as_ref().map_or(1.0, |c| c.sampler.cfg_scale)),
                seed,
                chunk_count: chunks.unwrap_or(ck.as_ref().map_or(4, |c| c.sampler.chunk_count)),
                frames: spec.frames,
            };
            let report = match &ck {
                Some(c) => ablate_schedules(&c.model, &held, &steps, [a, b], &base)?,
                None => ablate_schedules_oracle(&held, &steps, [a, b], &base)?,
            };
            emit(out.as_deref(), &report.to_csv())?;
        }
        Command::Verify { suite } => {
            let report = verify::run(suite)?;
            print_stdout(&format!("{report}\n"));
            return Ok(report.passed());
        }
        Command::CheckpointInfo { path } => {
            let c = Container::load(&path)?;
            let mut text = String::new();
            for (k, v) in &c.entries {
                text.push_str(&format!("{k} = {v}\n"));
            }
            let mut total = 0usize;
            for t in &c.tensors {
                let n: usize = t.shape.iter().product();
                total += n;
                text.push_str(&format!("tensor {} {:?} {}\n", t.name, t.shape, n));
            }
            text.push_str(&format!("tensors = {}\nparameters = {total}\n", c.tensors.len()));
            print_stdout(&text);
        }
    }
    Ok(true)
}

fn train_command(run: &TrainRun, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    checkpoint::write_atomic(&out.join("config.txt"), run.to_text().as_bytes())?;
    let ds = synth_dataset(&run.data)?;
    let held = ds.held_out(run.eval_examples)?;
    let angles = [FRAC_PI_4 / 2.0, FRAC_PI_4, 3.0 * FRAC_PI_4 / 2.0];
    let mut model = dpd_core::dualpath::DpdModel::new(run.model.clone())?;
    let sampler = checkpoint::SamplerDefaults {
        chunk_count: run.train.chunk_count,
        frames: run.data.frames,
        ..Default::default()
    };
    let mut history: Vec<(usize, f64)> = Vec::new();
    let mut recent: Vec<f64> = Vec::new();
    let result = train(&mut model, &ds, &run.train, |step, loss, m| {
        recent.push(loss);
        if step % run.train.eval_every == 0 {
            let vmse = velocity_mse_eval(m, &held, &angles, run.data.seed)?;
            history.push((step, vmse));
            eprintln!("step {step}: loss {loss:.4}, held-out velocity MSE {vmse:.5}");
            let ck = Checkpoint {
                model: m.clone(),
                sampler: sampler.clone(),
                metadata: vec![("step".into(), step.to_string())],
            };
            ck.save(&out.join(format!("checkpoint_{step:06}.dpd1")))?;
        }
        Ok(())
    });
    let report = match result {
        Ok(r) => r,
        Err(e @ DpdError::Divergence { .. }) => {
            let tail: Vec<String> = recent.iter().rev().take(20).rev().map(|l| format!("{l:?}")).collect();
            let dump = format!("error = {e}\nlast_losses = {}\n", tail.join(","));
            checkpoint::write_atomic(&out.join("divergence.txt"), dump.as_bytes())?;
            Checkpoint { model, sampler, metadata: vec![("diverged".into(), "true".into())] }.save(&out.join("diverged.dpd1"))?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    checkpoint::write_atomic(&out.join("loss.csv"), report.loss_csv().as_bytes())?;
    let steps_run = report.losses.len();
    Checkpoint { model: model.clone(), sampler, metadata: vec![("step".into(), steps_run.to_string())] }.save(&out.join("model.dpd1"))?;
    let vmse = velocity_mse_eval(&model, &held, &angles, run.data.seed)?;
    let gain = si_snri_eval(&model, &held, FRAC_PI_4, run.data.seed)?;
    let mut metrics = format!(
        "steps_run = {steps_run}\nstopped_early = {}\nearly_average_loss = {:?}\nfinal_average_loss = {:?}\nloss_ratio = {:?}\nvelocity_mse = {vmse:?}\nsi_snri_db = {gain:?}\n",
        report.stopped_early,
        report.early_average,
        report.final_average,
        report.ratio()
    );
    for (step, v) in history {
        metrics.push_str(&format!("velocity_mse_step_{step} = {v:?}\n"));
    }
    checkpoint::write_atomic(&out.join("metrics.txt"), metrics.as_bytes())?;
    eprint!("{metrics}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
