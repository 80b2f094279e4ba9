//! Angular DDIM sampling, classifier-free guidance, continuation and
//! inpainting.

use std::f64::consts::FRAC_PI_2;

use ndarray::{s, Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::ConditionBundle;
use crate::diffusion::{chunk_boundaries, ChunkLayout, LatentSeq};
use crate::dualpath::{Branch, DpdModel};
use crate::error::{shape_err, DpdError, Result};
use crate::schedule::AngleSchedule;

/// Guidance scale used when none is given.
pub const DEFAULT_CFG_SCALE: f64 = 2.5;

/// Anything that predicts a velocity for a noisy latent and a condition.
pub trait VelocityModel {
    fn latent_dim(&self) -> usize;

    fn velocity(&self, z: &LatentSeq, cond: &ConditionBundle, branch: Branch) -> Result<LatentSeq>;
}

impl VelocityModel for DpdModel {
    fn latent_dim(&self) -> usize {
        self.config().latent_dim
    }

    fn velocity(&self, z: &LatentSeq, cond: &ConditionBundle, branch: Branch) -> Result<LatentSeq> {
        DpdModel::velocity(self, z, cond, branch)
    }
}

/// Exact velocity for a data distribution that is a point mass at `target`.
///
/// Frame `l` at angle `δ` gets `cos δ · ε̂ − sin δ · z*` with
/// `ε̂ = (z − cos δ · z*) / sin δ`, and `ε̂ = 0` once `sin δ ≤ 1e-9`.
#[derive(Debug, Clone)]
pub struct DiracOracle {
    pub target: LatentSeq,
}

impl DiracOracle {
    pub fn new(target: LatentSeq) -> Self {
        Self { target }
    }
}

impl VelocityModel for DiracOracle {
    fn latent_dim(&self) -> usize {
        self.target.channels()
    }

    fn velocity(&self, z: &LatentSeq, cond: &ConditionBundle, _branch: Branch) -> Result<LatentSeq> {
        if z.shape() != self.target.shape() {
            return Err(shape_err("oracle input", &z.shape(), &self.target.shape()));
        }
        cond.check_frames(z.frames())?;
        let mut v = Array2::zeros(z.data().raw_dim());
        for (l, &delta) in cond.angle_vector.iter().enumerate() {
            let (c, sn) = (delta.cos(), delta.sin());
            for d in 0..z.channels() {
                let zs = self.target.data()[[l, d]];
                let eps = if sn > 1e-9 { (z.data()[[l, d]] - c * zs) / sn } else { 0.0 };
                v[[l, d]] = c * eps - sn * zs;
            }
        }
        LatentSeq::new(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub schedule: AngleSchedule,
    pub cfg_scale: f64,
    pub seed: u64,
    pub chunk_count: usize,
    /// Length `L` of a freshly generated window.
    pub frames: usize,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 0.0) {
            return Err(DpdError::Argument(format!("guidance scale must be ≥ 0, got {}", self.cfg_scale)));
        }
        if self.chunk_count == 0 || self.frames < self.chunk_count {
            return Err(DpdError::Argument(format!(
                "{} frames cannot hold {} chunks",
                self.frames, self.chunk_count
            )));
        }
        Ok(())
    }

    /// Frames added by one continuation, `⌈L/M⌉`.
    pub fn new_chunk_frames(&self) -> usize {
        self.frames.div_ceil(self.chunk_count)
    }
}

/// `z_{δ−ω} = cos ω · z_δ − sin ω · v̂`.
pub fn ddim_step(z_delta: &LatentSeq, v_hat: &LatentSeq, omega: f64) -> Result<LatentSeq> {
    check_step(z_delta, v_hat, omega)?;
    let (c, sn) = (omega.cos(), omega.sin());
    let out = Zip::from(z_delta.data())
        .and(v_hat.data())
        .map_collect(|&z, &v| c * z - sn * v);
    Ok(LatentSeq::from_array(out))
}

fn check_step(z: &LatentSeq, v: &LatentSeq, omega: f64) -> Result<()> {
    if z.shape() != v.shape() {
        return Err(shape_err("velocity", &v.shape(), &z.shape()));
    }
    if !(omega > 0.0 && omega <= FRAC_PI_2) {
        return Err(DpdError::Domain(format!("step size {omega} outside (0, π/2]")));
    }
    Ok(())
}

/// [`ddim_step`] applied only to rows where `update` is true.
fn ddim_step_rows(z: &mut LatentSeq, v: &LatentSeq, omega: f64, update: &[bool]) -> Result<()> {
    check_step(z, v, omega)?;
    let (c, sn) = (omega.cos(), omega.sin());
    for (l, _) in update.iter().enumerate().filter(|(_, u)| **u) {
        let vrow = v.data().row(l);
        z.data_mut()
            .row_mut(l)
            .iter_mut()
            .zip(vrow)
            .for_each(|(z, &v)| *z = c * *z - sn * v);
    }
    Ok(())
}

/// `v_u + s·(v_c − v_u)`; `s = 1` returns `v_c` unchanged.
pub fn cfg_velocity(v_cond: &LatentSeq, v_uncond: &LatentSeq, scale: f64) -> Result<LatentSeq> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(shape_err("unconditional velocity", &v_uncond.shape(), &v_cond.shape()));
    }
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    let out = Zip::from(v_cond.data())
        .and(v_uncond.data())
        .map_collect(|&c, &u| u + scale * (c - u));
    Ok(LatentSeq::from_array(out))
}

/// Guided velocity; the unconditional pass is skipped when `s = 1`.
fn guided<M: VelocityModel + ?Sized>(model: &M, z: &LatentSeq, cond: &ConditionBundle, scale: f64) -> Result<LatentSeq> {
    let v_c = model.velocity(z, cond, Branch::Conditional)?;
    if scale == 1.0 {
        return Ok(v_c);
    }
    let v_u = model.velocity(z, cond, Branch::Unconditional)?;
    cfg_velocity(&v_c, &v_u, scale)
}

/// Runs the reverse schedule over the rows flagged in `update`; the other
/// rows are held at angle 0 and never change.
fn denoise<M: VelocityModel + ?Sized>(
    model: &M,
    mut z: LatentSeq,
    update: &[bool],
    tokens: &[u32],
    config: &SamplerConfig,
    mut observe: impl FnMut(usize, &LatentSeq),
) -> Result<LatentSeq> {
    let steps = config.schedule.step_count();
    for (i, (delta, omega)) in config.schedule.sampling_steps().enumerate() {
        let angles = update.iter().map(|&u| if u { delta } else { 0.0 }).collect();
        let cond = ConditionBundle::new(tokens.to_vec(), angles)?;
        let v = guided(model, &z, &cond, config.cfg_scale)?;
        ddim_step_rows(&mut z, &v, omega, update)?;
        observe(steps - i, &z);
    }
    Ok(z)
}

fn check_model<M: VelocityModel + ?Sized>(model: &M, config: &SamplerConfig) -> Result<()> {
    config.validate()?;
    if model.latent_dim() == 0 {
        return Err(DpdError::Config("model has no latent channels".into()));
    }
    Ok(())
}

/// Generates one window of `config.frames` frames from Gaussian noise.
pub fn sample<M: VelocityModel + ?Sized>(tokens: &[u32], model: &M, config: &SamplerConfig) -> Result<LatentSeq> {
    sample_traced(tokens, model, config, |_, _| {})
}

/// [`sample`], reporting the latent after each step `t = T..1`.
pub fn sample_traced<M: VelocityModel + ?Sized>(
    tokens: &[u32],
    model: &M,
    config: &SamplerConfig,
    observe: impl FnMut(usize, &LatentSeq),
) -> Result<LatentSeq> {
    check_model(model, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let z = LatentSeq::gaussian(config.frames, model.latent_dim(), &mut rng);
    denoise(model, z, &vec![true; config.frames], tokens, config, observe)
}

/// Clean frames to extend, plus the tokens that describe them.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationState {
    pub context_latent: LatentSeq,
    pub context_tokens: Vec<u32>,
    pub layout: ChunkLayout,
}

impl ContinuationState {
    /// Keeps the last `L − ⌈L/M⌉` frames of `window` as context.
    pub fn from_window(window: &LatentSeq, tokens: &[u32], new_tokens: usize, chunk_count: usize) -> Result<Self> {
        let layout = chunk_boundaries(window.frames(), chunk_count)?;
        let keep = window.frames() - window.frames().div_ceil(chunk_count);
        if new_tokens >= tokens.len() {
            return Err(DpdError::Input(format!(
                "{} tokens leave no context after dropping {new_tokens}",
                tokens.len()
            )));
        }
        Ok(Self {
            context_latent: window.rows(window.frames() - keep..window.frames()),
            context_tokens: tokens[new_tokens..].to_vec(),
            layout,
        })
    }
}

/// Angle vector for step anchor `delta`: zeros on `context` frames, then
/// `delta` on the `fresh` new frames.
pub fn continuation_angles(context: usize, fresh: usize, delta: f64) -> Vec<f64> {
    let mut v = vec![0.0; context + fresh];
    v[context..].fill(delta);
    v
}

/// Appends one chunk to the context, returning the full `L`-frame window.
pub fn continue_latent<M: VelocityModel + ?Sized>(
    state: &ContinuationState,
    new_tokens: &[u32],
    model: &M,
    config: &SamplerConfig,
) -> Result<LatentSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    continue_with(state, new_tokens, model, config, &mut rng)
}

fn continue_with<M: VelocityModel + ?Sized>(
    state: &ContinuationState,
    new_tokens: &[u32],
    model: &M,
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LatentSeq> {
    check_model(model, config)?;
    let frames = state.layout.frames();
    let fresh = frames.div_ceil(state.layout.chunk_count());
    let context = frames - fresh;
    if state.context_latent.frames() != context || state.context_latent.channels() != model.latent_dim() {
        return Err(shape_err(
            "continuation context",
            &state.context_latent.shape(),
            &[context, model.latent_dim()],
        ));
    }
    if new_tokens.is_empty() {
        return Err(DpdError::Input("no tokens for the new chunk".into()));
    }
    let noise = LatentSeq::gaussian(fresh, model.latent_dim(), rng);
    let mut z = Array2::zeros((frames, model.latent_dim()));
    z.slice_mut(s![..context, ..]).assign(state.context_latent.data());
    z.slice_mut(s![context.., ..]).assign(noise.data());
    let tokens: Vec<u32> = state.context_tokens.iter().chain(new_tokens).copied().collect();
    let update: Vec<bool> = (0..frames).map(|l| l >= context).collect();
    denoise(model, LatentSeq::from_array(z), &update, &tokens, config, |_, _| {})
}

/// Number of continuations needed to reach `total` frames.
pub fn continuation_count(total: usize, frames: usize, chunk_count: usize) -> usize {
    total.saturating_sub(frames).div_ceil(frames.div_ceil(chunk_count))
}

/// One window, then continuations of `⌈L/M⌉` frames until `total_frames`
/// are available; the result is trimmed to exactly `total_frames`.
///
/// `token_stream` starts with the `window_tokens` tokens of the first
/// window; each continuation consumes the next `⌈window_tokens/M⌉`.
pub fn generate_long<M: VelocityModel + ?Sized>(
    total_frames: usize,
    token_stream: &[u32],
    window_tokens: usize,
    model: &M,
    config: &SamplerConfig,
) -> Result<LatentSeq> {
    check_model(model, config)?;
    let (frames, m) = (config.frames, config.chunk_count);
    if total_frames < frames {
        return Err(DpdError::Argument(format!("total_frames {total_frames} is shorter than one window ({frames})")));
    }
    let per_chunk = window_tokens.div_ceil(m);
    if window_tokens == 0 || per_chunk >= window_tokens {
        return Err(DpdError::Argument(format!(
            "{window_tokens} tokens per window cannot be split into {m} chunks"
        )));
    }
    let rounds = continuation_count(total_frames, frames, m);
    let needed = window_tokens + rounds * per_chunk;
    if token_stream.len() < needed {
        return Err(DpdError::Input(format!(
            "token stream exhausted: {} tokens for {needed} needed",
            token_stream.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let first = LatentSeq::gaussian(frames, model.latent_dim(), &mut rng);
    let mut tokens = token_stream[..window_tokens].to_vec();
    let mut window = denoise(model, first, &vec![true; frames], &tokens, config, |_, _| {})?;
    let mut out: Vec<f64> = window.data().iter().copied().collect();
    let mut cursor = window_tokens;
    for _ in 0..rounds {
        let state = ContinuationState::from_window(&window, &tokens, per_chunk, m)?;
        let new = &token_stream[cursor..cursor + per_chunk];
        cursor += per_chunk;
        window = continue_with(&state, new, model, config, &mut rng)?;
        tokens = state.context_tokens.iter().chain(new).copied().collect();
        let fresh = frames.div_ceil(m);
        out.extend(window.data().slice(s![frames - fresh.., ..]).iter());
    }
    let d = model.latent_dim();
    let all = Array2::from_shape_vec((out.len() / d, d), out).expect("row-major frames");
    Ok(LatentSeq::from_array(all.slice(s![..total_frames, ..]).to_owned()))
}

/// Regenerates the frames where `mask` is true; the rest stay bit-identical.
pub fn inpaint<M: VelocityModel + ?Sized>(
    z_given: &LatentSeq,
    mask: &[bool],
    tokens: &[u32],
    model: &M,
    config: &SamplerConfig,
) -> Result<LatentSeq> {
    if mask.len() != z_given.frames() {
        return Err(DpdError::Shape(format!(
            "mask has {} entries for {} frames",
            mask.len(),
            z_given.frames()
        )));
    }
    if !mask.iter().any(|m| *m) {
        return Ok(z_given.clone());
    }
    let config = SamplerConfig { frames: z_given.frames(), ..config.clone() };
    check_model(model, &config)?;
    if z_given.channels() != model.latent_dim() {
        return Err(shape_err("inpaint input", &z_given.shape(), &[z_given.frames(), model.latent_dim()]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = LatentSeq::gaussian(z_given.frames(), model.latent_dim(), &mut rng);
    let mut z = z_given.clone();
    for (l, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        z.data_mut().row_mut(l).assign(&noise.data().row(l));
    }
    denoise(model, z, mask, tokens, &config, |_, _| {})
}
