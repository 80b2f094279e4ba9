//! Toy training: synthetic token-conditioned latents, the multi-chunk
//! velocity objective, AdamW, and evaluation metrics.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::OnceLock;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::conditioning::ConditionBundle;
use crate::diffusion::{
    build_angle_vector, build_multichunk_noisy, build_velocity_target, chunk_boundaries, forward_diffuse, ChunkAngles, LatentSeq,
    VelocityTarget,
};
use crate::dualpath::{Branch, DpdModel, ParamGrads};
use crate::error::{DpdError, Result};
use crate::sampler::{sample_traced, DiracOracle, SamplerConfig, VelocityModel};
use crate::schedule::{CompensatedSum, ScheduleKind};

/// Bound on `|value|` of every synthetic latent entry.
pub const SYNTH_AMPLITUDE: f64 = 0.95;
/// Reported in place of `±∞` dB.
pub const SI_SNR_CAP_DB: f64 = 200.0;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 0.01;
pub const GRAD_CLIP_NORM: f64 = 1.0;

/// Environment variable capping the worker threads used for per-example
/// gradients and evaluation.
pub const THREADS_ENV: &str = "DPD_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDatasetSpec {
    pub num_examples: usize,
    pub frames: usize,
    pub channels: usize,
    pub tokens_per_example: usize,
    pub vocab: usize,
    pub seed: u64,
    pub frames_per_token: usize,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        Self {
            num_examples: 64,
            frames: 160,
            channels: 4,
            tokens_per_example: 16,
            vocab: 16,
            seed: 0,
            frames_per_token: 10,
        }
    }
}

impl SynthDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_token == 0 || self.frames % self.frames_per_token != 0 {
            return Err(DpdError::Config(format!(
                "{} frames are not divisible by {} frames per token",
                self.frames, self.frames_per_token
            )));
        }
        if self.frames != self.tokens_per_example * self.frames_per_token {
            return Err(DpdError::Config(format!(
                "{} frames != {} tokens × {} frames per token",
                self.frames, self.tokens_per_example, self.frames_per_token
            )));
        }
        if self.channels == 0 || self.vocab == 0 || self.frames == 0 {
            return Err(DpdError::Config("dataset dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub latent: LatentSeq,
}

/// Token-to-pattern tables drawn from the dataset seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthDatasetSpec,
    /// Cycles over the window per token id, indexed `u − 1`.
    frequencies: Vec<f64>,
    /// `vocab × channels`, each in `[0.3, 0.95]`.
    amplitudes: Array2<f64>,
    phases: Vec<f64>,
    pub examples: Vec<Example>,
}

impl SynthDataset {
    pub fn token_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(index as u64 + 1);
        rng
    }

    /// Latent for an arbitrary token sequence of the dataset's length.
    pub fn latent_for(&self, tokens: &[u32]) -> Result<LatentSeq> {
        let spec = &self.spec;
        crate::conditioning::check_tokens(tokens, spec.vocab)?;
        if tokens.len() != spec.tokens_per_example {
            return Err(DpdError::Token(format!(
                "{} tokens, dataset windows hold {}",
                tokens.len(),
                spec.tokens_per_example
            )));
        }
        let l_total = spec.frames as f64;
        let data = Array2::from_shape_fn((spec.frames, spec.channels), |(l, d)| {
            let u = tokens[l / spec.frames_per_token] as usize - 1;
            let phase = 2.0 * PI * self.frequencies[u] * l as f64 / l_total + self.phases[d];
            self.amplitudes[[u, d]] * phase.sin()
        });
        LatentSeq::new(data)
    }

    /// Example `index`; indices past `num_examples` give held-out data.
    pub fn example(&self, index: usize) -> Result<Example> {
        let mut rng = self.token_rng(index);
        let tokens: Vec<u32> = (0..self.spec.tokens_per_example)
            .map(|_| rng.gen_range(1..=self.spec.vocab as u32))
            .collect();
        let latent = self.latent_for(&tokens)?;
        Ok(Example { tokens, latent })
    }

    pub fn held_out(&self, count: usize) -> Result<Vec<Example>> {
        (self.spec.num_examples..self.spec.num_examples + count)
            .map(|i| self.example(i))
            .collect()
    }
}

/// Builds the dataset; a pure function of `spec`.
pub fn synth_dataset(spec: &SynthDatasetSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let frequencies = (0..spec.vocab).map(|_| rng.gen_range(1.0..6.0)).collect();
    let amplitudes = Array2::from_shape_simple_fn((spec.vocab, spec.channels), || rng.gen_range(0.3..=SYNTH_AMPLITUDE));
    let phases = (0..spec.channels).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let mut ds = SynthDataset { spec: spec.clone(), frequencies, amplitudes, phases, examples: Vec::new() };
    ds.examples = (0..spec.num_examples).map(|i| ds.example(i)).collect::<Result<_>>()?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub chunk_count: usize,
    pub cfg_dropout_prob: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Stop once the trailing moving-average loss falls to this fraction of
    /// the first-window average.
    pub early_stop_ratio: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 5e-4,
            chunk_count: 4,
            cfg_dropout_prob: 0.1,
            seed: 0,
            eval_every: 100,
            early_stop_ratio: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.chunk_count == 0 || self.eval_every == 0 {
            return Err(DpdError::Config("steps, batch_size, chunk_count and eval_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout_prob) {
            return Err(DpdError::Config(format!("cfg_dropout_prob {} outside [0, 1]", self.cfg_dropout_prob)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(DpdError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if let Some(r) = self.early_stop_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(DpdError::Config(format!("early_stop_ratio {r} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u32,
}

impl AdamW {
    pub fn new(model: &DpdModel, learning_rate: f64) -> Self {
        let zeros: Vec<Array2<f64>> = model.store().ids().map(|id| Array2::zeros(model.store().value(id).raw_dim())).collect();
        Self { learning_rate, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// Applies one update from the gradients accumulated in the store.
    pub fn update(&mut self, model: &mut DpdModel) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let lr = self.learning_rate;
        let store = model.store_mut();
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let (value, grad) = store.value_grad_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(value).and(grad).and(m).and(v).for_each(|w, &g, m, v| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let step = (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                *w -= lr * (step + WEIGHT_DECAY * *w);
            });
        }
    }
}

/// One example with its noise, angles and branch already drawn.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub z_noisy: LatentSeq,
    pub cond: ConditionBundle,
    pub target: VelocityTarget,
    pub branch: Branch,
}

/// Draws, in order, `M` chunk angles, the `L × D` noise and one uniform for
/// the guidance-dropout decision.
pub fn prepare_example<R: Rng + ?Sized>(example: &Example, chunks: usize, dropout: f64, rng: &mut R) -> Result<PreparedExample> {
    let angles = ChunkAngles::sample(chunks, rng);
    let eps = LatentSeq::gaussian(example.latent.frames(), example.latent.channels(), rng);
    let branch = if rng.gen::<f64>() < dropout { Branch::Unconditional } else { Branch::Conditional };
    prepare_with(example, &eps, &angles, branch)
}

pub fn prepare_with(example: &Example, eps: &LatentSeq, angles: &ChunkAngles, branch: Branch) -> Result<PreparedExample> {
    let layout = chunk_boundaries(example.latent.frames(), angles.as_slice().len())?;
    Ok(PreparedExample {
        z_noisy: build_multichunk_noisy(&example.latent, eps, &layout, angles)?,
        target: build_velocity_target(&example.latent, eps, &layout, angles)?,
        cond: ConditionBundle::new(example.tokens.clone(), build_angle_vector(&layout, angles)?)?,
        branch,
    })
}

fn thread_pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = std::env::var(THREADS_ENV).ok()?.trim().parse::<usize>().ok()?;
        (n > 1).then(|| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok())?
    })
    .as_ref()
}

/// Ordered map over `items`, fanned out when `DPD_THREADS > 1`.
fn ordered_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    match thread_pool() {
        Some(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        None => items.iter().map(f).collect(),
    }
}

/// Mean per-example loss over `batch`; mean gradients go to the store's
/// accumulators (after zeroing them).
pub fn batch_loss_and_grads(model: &mut DpdModel, batch: &[PreparedExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(DpdError::Argument("empty batch".into()));
    }
    let results: Vec<Result<(f64, ParamGrads)>> = {
        let m = &*model;
        ordered_map(batch, |ex| m.loss_and_grads(&ex.z_noisy, &ex.cond, &ex.target, ex.branch))
    };
    let scale = 1.0 / batch.len() as f64;
    let store = model.store_mut();
    store.zero_grads();
    let mut total = CompensatedSum::default();
    for r in results {
        let (loss, grads) = r?;
        total.add(loss);
        store.accumulate_dense(&grads, scale);
    }
    Ok(total.value() * scale)
}

/// One optimization step: draw the batch's randomness, compute the mean
/// loss and gradients, clip to global norm 1 and apply AdamW.
pub fn train_step<R: Rng + ?Sized>(
    batch: &[Example],
    model: &mut DpdModel,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    let prepared = batch
        .iter()
        .map(|ex| prepare_example(ex, cfg.chunk_count, cfg.cfg_dropout_prob, rng))
        .collect::<Result<Vec<_>>>()?;
    let loss = batch_loss_and_grads(model, &prepared)?;
    let norm = model.store().grad_norm();
    if !loss.is_finite() || !norm.is_finite() {
        return Err(DpdError::Divergence {
            step: opt.steps_taken() as usize + 1,
            detail: format!("loss {loss}, gradient norm {norm}"),
        });
    }
    if norm > GRAD_CLIP_NORM {
        model.store_mut().scale_grads(GRAD_CLIP_NORM / norm);
    }
    opt.update(model);
    if !model.store().all_finite() {
        return Err(DpdError::Divergence {
            step: opt.steps_taken() as usize,
            detail: "non-finite parameter after update".into(),
        });
    }
    Ok(loss)
}

/// Mean of the first `window` values.
pub fn early_average(losses: &[f64], window: usize) -> Option<f64> {
    (losses.len() >= window && window > 0).then(|| losses[..window].iter().sum::<f64>() / window as f64)
}

/// Mean of the last `window` values.
pub fn trailing_average(losses: &[f64], window: usize) -> Option<f64> {
    (losses.len() >= window && window > 0).then(|| losses[losses.len() - window..].iter().sum::<f64>() / window as f64)
}

/// Window of the moving averages used for progress checks.
pub const LOSS_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub early_average: f64,
    pub final_average: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn ratio(&self) -> f64 {
        self.final_average / self.early_average
    }

    /// `step,loss` lines.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{},{:.16e}\n", i + 1, l));
        }
        out
    }
}

/// Runs `cfg.steps` steps (or fewer with early stopping). `on_step` sees
/// the 1-based step, its loss and the model after the update.
pub fn train(
    model: &mut DpdModel,
    dataset: &SynthDataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64, &DpdModel) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.examples.is_empty() {
        return Err(DpdError::Data("dataset has no examples".into()));
    }
    if dataset.spec.channels != model.config().latent_dim || dataset.spec.vocab > model.config().vocab {
        return Err(DpdError::Config("dataset does not match the model's latent_dim / vocab".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model, cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut stopped_early = false;
    for step in 1..=cfg.steps {
        let batch: Vec<Example> = (0..cfg.batch_size)
            .map(|_| dataset.examples[rng.gen_range(0..dataset.examples.len())].clone())
            .collect();
        let loss = train_step(&batch, model, &mut opt, cfg, &mut rng)?;
        losses.push(loss);
        on_step(step, loss, model)?;
        if let (Some(ratio), Some(early), Some(recent)) = (
            cfg.early_stop_ratio,
            early_average(&losses, LOSS_WINDOW),
            trailing_average(&losses, LOSS_WINDOW),
        ) {
            if step >= 2 * LOSS_WINDOW && recent <= ratio * early {
                stopped_early = step < cfg.steps;
                break;
            }
        }
    }
    let window = LOSS_WINDOW.min(losses.len());
    Ok(TrainReport {
        early_average: early_average(&losses, window).expect("at least one step"),
        final_average: trailing_average(&losses, window).expect("at least one step"),
        losses,
        stopped_early,
    })
}

/// Fixed evaluation noise for example `index`.
fn eval_noise(example: &Example, index: usize, seed: u64) -> LatentSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    LatentSeq::gaussian(example.latent.frames(), example.latent.channels(), &mut rng)
}

/// Pairwise (tree) sum; its grouping is independent of thread count.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Mean per-element squared error between `v_tgt` and `v̂` over every
/// example and every evaluation angle (all frames share the angle).
pub fn velocity_mse_eval<M: VelocityModel + Sync + ?Sized>(model: &M, examples: &[Example], angles: &[f64], seed: u64) -> Result<f64> {
    if examples.is_empty() || angles.is_empty() {
        return Err(DpdError::Argument("velocity MSE needs examples and angles".into()));
    }
    let jobs: Vec<(usize, f64)> = (0..examples.len()).flat_map(|i| angles.iter().map(move |&a| (i, a))).collect();
    let per_job = ordered_map(&jobs, |&(i, delta)| -> Result<f64> {
        let ex = &examples[i];
        let eps = eval_noise(ex, i, seed);
        let angles = ChunkAngles::uniform(1, delta)?;
        let prepared = prepare_with(ex, &eps, &angles, Branch::Conditional)?;
        let v = model.velocity(&prepared.z_noisy, &prepared.cond, Branch::Conditional)?;
        let n = v.data().len() as f64;
        Ok(crate::diffusion::diffusion_loss(&prepared.target, &v)? / n)
    });
    let values = per_job.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&values) / values.len() as f64)
}

/// Scale-invariant SNR in dB over all entries, clamped to `±200`.
pub fn si_snr(estimate: &LatentSeq, reference: &LatentSeq) -> Result<f64> {
    if estimate.shape() != reference.shape() {
        return Err(crate::error::shape_err("estimate", &estimate.shape(), &reference.shape()));
    }
    let s = reference.data();
    let e = estimate.data();
    let energy: f64 = s.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(DpdError::Domain("reference signal is all zero".into()));
    }
    let alpha = e.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / energy;
    let signal = alpha * alpha * energy;
    let noise: f64 = e.iter().zip(s).map(|(a, b)| (a - alpha * b).powi(2)).sum();
    // Residuals at rounding level of the projected signal count as exact.
    if noise <= signal * 1e-20 {
        return Ok(SI_SNR_CAP_DB);
    }
    Ok((10.0 * (signal / noise).log10()).clamp(-SI_SNR_CAP_DB, SI_SNR_CAP_DB))
}

/// Mean over `examples` of `si_snr(ẑ, z) − si_snr(z_δ, z)` with
/// `ẑ = cos δ · z_δ − sin δ · v̂(z_δ)`.
pub fn si_snri_eval<M: VelocityModel + Sync + ?Sized>(model: &M, examples: &[Example], delta: f64, seed: u64) -> Result<f64> {
    if !(delta > 0.0 && delta < FRAC_PI_2) {
        return Err(DpdError::Domain(format!("evaluation angle {delta} outside (0, π/2)")));
    }
    if examples.is_empty() {
        return Err(DpdError::Argument("SI-SNRi needs examples".into()));
    }
    let idx: Vec<usize> = (0..examples.len()).collect();
    let per = ordered_map(&idx, |&i| -> Result<f64> {
        let ex = &examples[i];
        let eps = eval_noise(ex, i, seed);
        let z_delta = forward_diffuse(&ex.latent, &eps, delta)?;
        let cond = ConditionBundle::new(ex.tokens.clone(), vec![delta; ex.latent.frames()])?;
        let v = model.velocity(&z_delta, &cond, Branch::Conditional)?;
        let z_hat = crate::diffusion::z_from_v(&z_delta, &v, delta)?;
        Ok(si_snr(&z_hat, &ex.latent)? - si_snr(&z_delta, &ex.latent)?)
    });
    let values = per.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&values) / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub schedule: ScheduleKind,
    pub steps: usize,
    /// Mean squared latent error of the final sample.
    pub mse: f64,
    /// Mean squared error after each step, `t = T` first.
    pub step_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// `schedule,steps,mse,step_errors` with step errors `;`-separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("schedule,steps,mse,step_errors\n");
        for r in &self.rows {
            let steps: Vec<String> = r.step_errors.iter().map(|e| format!("{e:.16e}")).collect();
            out.push_str(&format!("{},{},{:.16e},{}\n", r.schedule, r.steps, r.mse, steps.join(";")));
        }
        out
    }
}

/// Differences below this are treated as rounding noise when comparing
/// ablation errors across step counts.
pub const ABLATION_FLOOR: f64 = 1e-24;

impl AblationReport {
    /// Whether `kind`'s error never grows with `T` (beyond [`ABLATION_FLOOR`]).
    pub fn non_increasing(&self, kind: ScheduleKind) -> bool {
        let mut rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.schedule == kind).collect();
        rows.sort_by_key(|r| r.steps);
        rows.windows(2).all(|w| w[1].mse <= w[0].mse + ABLATION_FLOOR)
    }
}

fn mse(a: &LatentSeq, b: &LatentSeq) -> f64 {
    let n = a.data().len() as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n
}

/// Samples each example's tokens with every `T` in `steps` under both
/// schedule slots and reports the error against the example's latent.
pub fn ablate_schedules<M: VelocityModel + ?Sized>(
    model: &M,
    examples: &[Example],
    steps: &[usize],
    schedules: [ScheduleKind; 2],
    base: &SamplerConfig,
) -> Result<AblationReport> {
    ablate_with(examples, steps, schedules, base, |ex, cfg, observe| sample_traced(&ex.tokens, model, cfg, observe))
}

/// [`ablate_schedules`] with each example's own Dirac oracle as the model.
pub fn ablate_schedules_oracle(
    examples: &[Example],
    steps: &[usize],
    schedules: [ScheduleKind; 2],
    base: &SamplerConfig,
) -> Result<AblationReport> {
    ablate_with(examples, steps, schedules, base, |ex, cfg, observe| {
        sample_traced(&ex.tokens, &DiracOracle::new(ex.latent.clone()), cfg, observe)
    })
}

type Observer<'a> = &'a mut dyn FnMut(usize, &LatentSeq);

fn ablate_with(
    examples: &[Example],
    steps: &[usize],
    schedules: [ScheduleKind; 2],
    base: &SamplerConfig,
    mut run: impl FnMut(&Example, &SamplerConfig, Observer<'_>) -> Result<LatentSeq>,
) -> Result<AblationReport> {
    if examples.is_empty() || steps.is_empty() {
        return Err(DpdError::Argument("ablation needs examples and step counts".into()));
    }
    let mut rows = Vec::with_capacity(steps.len() * 2);
    for &t in steps {
        for kind in schedules {
            let mut step_sum = vec![0.0; t];
            let mut total = 0.0;
            for ex in examples {
                let cfg = SamplerConfig { schedule: kind.build(t)?, frames: ex.latent.frames(), ..base.clone() };
                let out = run(ex, &cfg, &mut |remaining, z| step_sum[t - remaining] += mse(z, &ex.latent))?;
                total += mse(&out, &ex.latent);
            }
            let n = examples.len() as f64;
            rows.push(AblationRow {
                schedule: kind,
                steps: t,
                mse: total / n,
                step_errors: step_sum.into_iter().map(|e| e / n).collect(),
            });
        }
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dualpath::DpdConfig;

    fn small_spec() -> SynthDatasetSpec {
        SynthDatasetSpec { num_examples: 4, frames: 24, channels: 2, tokens_per_example: 6, vocab: 5, seed: 3, frames_per_token: 4 }
    }

    fn small_model() -> DpdModel {
        DpdModel::new(DpdConfig {
            latent_dim: 2,
            hidden_dim: 8,
            block_count: 2,
            segment_size: 4,
            vocab: 5,
            heads: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn dataset_is_deterministic_and_bounded() {
        let a = synth_dataset(&small_spec()).unwrap();
        let b = synth_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        for ex in &a.examples {
            assert!(ex.latent.data().iter().all(|v| v.abs() <= SYNTH_AMPLITUDE));
            assert_eq!(a.latent_for(&ex.tokens).unwrap(), ex.latent);
        }
        let other = synth_dataset(&SynthDatasetSpec { seed: 4, ..small_spec() }).unwrap();
        assert_ne!(a.examples[0].latent, other.latent_for(&a.examples[0].tokens).unwrap());
        assert!(synth_dataset(&SynthDatasetSpec { frames: 25, ..small_spec() }).is_err());
        assert!(synth_dataset(&SynthDatasetSpec { tokens_per_example: 5, ..small_spec() }).is_err());
        let held = a.held_out(2).unwrap();
        assert_eq!(held[0], a.example(4).unwrap());
    }

    #[test]
    fn changing_one_token_changes_only_its_span() {
        let ds = synth_dataset(&small_spec()).unwrap();
        let base = ds.examples[0].tokens.clone();
        let mut changed = base.clone();
        changed[2] = if base[2] == 1 { 2 } else { 1 };
        let (a, b) = (ds.latent_for(&base).unwrap(), ds.latent_for(&changed).unwrap());
        for l in 0..24 {
            let same = a.data().row(l) == b.data().row(l);
            assert_eq!(same, !(8..12).contains(&l), "frame {l}");
        }
    }

    #[test]
    fn forced_full_noise_loss_matches_scalar_loop() {
        let ds = synth_dataset(&small_spec()).unwrap();
        let mut model = small_model();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<PreparedExample> = ds.examples[..2]
            .iter()
            .map(|ex| {
                let eps = LatentSeq::gaussian(24, 2, &mut r);
                prepare_with(ex, &eps, &ChunkAngles::uniform(4, FRAC_PI_2).unwrap(), Branch::Conditional).unwrap()
            })
            .collect();
        for (p, ex) in batch.iter().zip(&ds.examples) {
            let neg: Vec<f64> = ex.latent.data().iter().map(|v| -v).collect();
            let tgt: Vec<f64> = p.target.latent().data().iter().copied().collect();
            assert!(neg.iter().zip(&tgt).all(|(a, b)| (a - b).abs() < 1e-15));
        }
        let mut want = 0.0;
        for (p, ex) in batch.iter().zip(&ds.examples) {
            let v = model.velocity_forward(&p.z_noisy, &p.cond).unwrap();
            let mut acc = 0.0;
            for l in 0..24 {
                for d in 0..2 {
                    let e = v.data()[[l, d]] + ex.latent.data()[[l, d]];
                    acc += e * e;
                }
            }
            want += acc / 2.0;
        }
        let got = batch_loss_and_grads(&mut model, &batch).unwrap();
        assert!((got - want).abs() < 1e-10 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn train_steps_are_reproducible_and_finite() {
        let ds = synth_dataset(&small_spec()).unwrap();
        let cfg = TrainConfig { steps: 3, batch_size: 2, ..Default::default() };
        let run = || {
            let mut model = small_model();
            let mut opt = AdamW::new(&model, cfg.learning_rate);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let losses: Vec<f64> = (0..3)
                .map(|_| train_step(&ds.examples[..2], &mut model, &mut opt, &cfg, &mut rng).unwrap())
                .collect();
            (losses, model)
        };
        let (la, ma) = run();
        let (lb, mb) = run();
        assert_eq!(la, lb);
        assert!(la.iter().all(|l| l.is_finite() && *l > 0.0));
        for id in ma.store().ids() {
            assert_eq!(ma.store().value(id), mb.store().value(id));
        }
    }

    #[test]
    fn dropout_consumes_one_draw_per_example() {
        let ds = synth_dataset(&small_spec()).unwrap();
        let ex = &ds.examples[0];
        for p in [0.0, 1.0] {
            let mut r = ChaCha8Rng::seed_from_u64(2);
            let prep = prepare_example(ex, 4, p, &mut r).unwrap();
            assert_eq!(prep.branch, if p == 0.0 { Branch::Conditional } else { Branch::Unconditional });
            let mut reference = ChaCha8Rng::seed_from_u64(2);
            ChunkAngles::sample(4, &mut reference);
            LatentSeq::gaussian(24, 2, &mut reference);
            reference.gen::<f64>();
            assert_eq!(r.gen::<u64>(), reference.gen::<u64>());
        }
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let mut model = small_model();
        let id = model.params().w_in;
        let before = model.store().value(id).clone();
        model.store_mut().zero_grads();
        let g = Array2::from_elem(before.raw_dim(), 0.3);
        let ids: Vec<_> = model.store().ids().collect();
        let dense: Vec<Array2<f64>> = ids
            .iter()
            .map(|&i| if i == id { g.clone() } else { Array2::zeros(model.store().value(i).raw_dim()) })
            .collect();
        model.store_mut().accumulate_dense(&dense, 1.0);
        let mut opt = AdamW::new(&model, 1e-2);
        opt.update(&mut model);
        let after = model.store().value(id);
        for (a, b) in after.iter().zip(&before) {
            let want = b - 1e-2 * (0.3 / (0.3 + ADAM_EPS) + WEIGHT_DECAY * b);
            assert!((a - want).abs() < 1e-15);
        }
    }

    #[test]
    fn si_snr_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let s = LatentSeq::gaussian(20, 3, &mut r);
        assert_eq!(si_snr(&s, &s).unwrap(), SI_SNR_CAP_DB);
        let twice = LatentSeq::new(s.data() * 2.0).unwrap();
        assert_eq!(si_snr(&twice, &s).unwrap(), SI_SNR_CAP_DB);
        // Orthogonal noise of equal energy.
        let n = LatentSeq::gaussian(20, 3, &mut r);
        let ss: f64 = s.data().iter().map(|v| v * v).sum();
        let proj = n.data().iter().zip(s.data()).map(|(a, b)| a * b).sum::<f64>() / ss;
        let mut orth = n.data() - &(s.data() * proj);
        let on: f64 = orth.iter().map(|v| v * v).sum();
        orth *= (ss / on).sqrt();
        let est = LatentSeq::new(s.data() + &orth).unwrap();
        assert!(si_snr(&est, &s).unwrap().abs() < 1e-9);
        // Scale invariance.
        let noisy = LatentSeq::new(s.data() + &(n.data() * 0.3)).unwrap();
        let base = si_snr(&noisy, &s).unwrap();
        let scaled = LatentSeq::new(noisy.data() * 3.7).unwrap();
        assert!((si_snr(&scaled, &s).unwrap() - base).abs() < 1e-9);
        let both = LatentSeq::new(s.data() * 0.2).unwrap();
        assert!((si_snr(&LatentSeq::new(noisy.data() * 0.2).unwrap(), &both).unwrap() - base).abs() < 1e-9);
        assert!(matches!(si_snr(&s, &LatentSeq::zeros(20, 3)), Err(DpdError::Domain(_))));
    }

    #[test]
    fn oracle_metrics() {
        let ds = synth_dataset(&small_spec()).unwrap();
        let ex = ds.examples[1].clone();
        let oracle = DiracOracle::new(ex.latent.clone());
        let mse = velocity_mse_eval(&oracle, std::slice::from_ref(&ex), &[0.3, 0.8, 1.4], 1).unwrap();
        assert!(mse < 1e-25, "{mse}");
        // Oracle: ẑ is exact, so the first term hits the cap.
        let eps = eval_noise(&ex, 0, 1);
        let z_delta = forward_diffuse(&ex.latent, &eps, 0.7).unwrap();
        let cond = ConditionBundle::new(ex.tokens.clone(), vec![0.7; 24]).unwrap();
        let v = oracle.velocity(&z_delta, &cond, Branch::Conditional).unwrap();
        let z_hat = crate::diffusion::z_from_v(&z_delta, &v, 0.7).unwrap();
        assert_eq!(si_snr(&z_hat, &ex.latent).unwrap(), SI_SNR_CAP_DB);
        let gain = si_snri_eval(&oracle, &[ex], 0.7, 1).unwrap();
        assert!(gain > 100.0);
        assert!(si_snri_eval(&oracle, &ds.examples[..1], 0.0, 1).is_err());
    }

    #[test]
    fn velocity_mse_matches_scalar_recomputation() {
        let ds = synth_dataset(&small_spec()).unwrap();
        let model = small_model();
        let angles = [0.4, 1.1];
        let got = velocity_mse_eval(&model, &ds.examples, &angles, 9).unwrap();
        let mut total = 0.0;
        let mut count = 0.0;
        for (i, ex) in ds.examples.iter().enumerate() {
            let eps = eval_noise(ex, i, 9);
            for &a in &angles {
                let (c, s) = (f64::cos(a), f64::sin(a));
                let zn = LatentSeq::new(ex.latent.data() * c + eps.data() * s).unwrap();
                let cond = ConditionBundle::new(ex.tokens.clone(), vec![a; 24]).unwrap();
                let v = model.velocity_forward(&zn, &cond).unwrap();
                let mut acc = 0.0;
                for l in 0..24 {
                    for d in 0..2 {
                        let t = c * eps.data()[[l, d]] - s * ex.latent.data()[[l, d]];
                        acc += (t - v.data()[[l, d]]).powi(2);
                    }
                }
                total += acc / 48.0;
                count += 1.0;
            }
        }
        assert!((got - total / count).abs() < 1e-10);
    }

    #[test]
    fn zero_velocity_si_snri_matches_closed_form() {
        // v̂ ≡ 0 ⇒ ẑ = cos δ · z_δ, a rescaling of z_δ: the improvement is 0 dB,
        // and si_snr(z_δ, z) ≈ 10 log10(cos²δ / sin²δ) for unit-variance z, ε.
        struct Zero;
        impl VelocityModel for Zero {
            fn latent_dim(&self) -> usize {
                4
            }
            fn velocity(&self, z: &LatentSeq, _: &ConditionBundle, _: Branch) -> Result<LatentSeq> {
                Ok(LatentSeq::zeros(z.frames(), z.channels()))
            }
        }
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let z = LatentSeq::gaussian(25_000, 4, &mut r);
        let ex = Example { tokens: vec![1], latent: z.clone() };
        let delta: f64 = 0.6;
        let gain = si_snri_eval(&Zero, std::slice::from_ref(&ex), delta, 3).unwrap();
        assert!(gain.abs() < 1e-9);
        let eps = eval_noise(&ex, 0, 3);
        let z_delta = forward_diffuse(&z, &eps, delta).unwrap();
        let closed = 10.0 * (delta.cos().powi(2) / delta.sin().powi(2)).log10();
        assert!((si_snr(&z_delta, &z).unwrap() - closed).abs() < 0.1);
    }

    #[test]
    fn ablation_structure_on_oracle() {
        let ds = synth_dataset(&small_spec()).unwrap();
        let ex = ds.examples[0].clone();
        let oracle = DiracOracle::new(ex.latent.clone());
        let base = SamplerConfig {
            schedule: ScheduleKind::Uniform.build(1).unwrap(),
            cfg_scale: 1.0,
            seed: 4,
            chunk_count: 4,
            frames: 24,
        };
        let rep = ablate_schedules(&oracle, std::slice::from_ref(&ex), &[10, 20], [ScheduleKind::Uniform, ScheduleKind::Linear], &base).unwrap();
        assert_eq!(rep.rows.len(), 4);
        assert_eq!(rep.to_csv().lines().count(), 5);
        assert!(rep.rows.iter().all(|r| r.mse < 1e-20 && r.step_errors.len() == r.steps));
        let same = ablate_schedules(&oracle, std::slice::from_ref(&ex), &[5], [ScheduleKind::Linear; 2], &base).unwrap();
        assert_eq!(same.rows[0].mse, same.rows[1].mse);
        assert_eq!(same.rows[0].step_errors, same.rows[1].step_errors);
        let per_example = ablate_schedules_oracle(&ds.examples, &[5, 10], [ScheduleKind::Uniform, ScheduleKind::Linear], &base).unwrap();
        assert!(per_example.rows.iter().all(|r| r.mse < 1e-20));
        assert!(per_example.non_increasing(ScheduleKind::Uniform) && per_example.non_increasing(ScheduleKind::Linear));
        let mut grown = per_example.clone();
        grown.rows[2].mse = 1.0;
        assert!(!grown.non_increasing(ScheduleKind::Uniform));
        assert!(ablate_schedules_oracle(&[], &[5], [ScheduleKind::Uniform; 2], &base).is_err());
    }

    #[test]
    fn moving_averages() {
        let l: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        assert_eq!(early_average(&l, 10), Some(5.5));
        assert_eq!(trailing_average(&l, 10), Some(15.5));
        assert_eq!(early_average(&l[..5], 10), None);
    }
}
