//! Self-contained, seeded verification suites: algebraic identities,
//! finite-difference gradient checks and analytic-oracle sampling.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{Checkpoint, Container};
use crate::conditioning::{pooled_tokens, AngleEncoderMode, AngleEncoderParams, ConditionBundle, TokenEncoderParams};
use crate::diffusion::{
    build_angle_vector, build_multichunk_noisy, build_velocity_target, chunk_boundaries, diffusion_loss, eps_from_v, forward_diffuse,
    z_from_v, ChunkAngles, LatentSeq,
};
use crate::dualpath::{merged_width, overlap_add, segment, Branch, DpdConfig, DpdModel};
use crate::error::{DpdError, Result};
use crate::graph::{AttentionLayout, Graph, RowMap, SruLayout, Var};
use crate::primitives::{AttentionParams, BiSru, Bound, Film, MlpBlock, ParamStore};
use crate::sampler::{continue_latent, ddim_step, inpaint, sample, ContinuationState, DiracOracle, SamplerConfig};
use crate::schedule::{AngleSchedule, ScheduleKind};

/// Central-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor of [`relative_error`]; below it errors are absolute.
pub const REL_FLOOR: f64 = 1e-3;
pub const IDENTITY_TOL: f64 = 1e-12;
pub const ORACLE_TOL: f64 = 1e-6;
/// Random configurations per gradient check.
pub const GRAD_CONFIGS: u64 = 3;
pub const ORACLE_STEPS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Identities,
    Gradients,
    Oracle,
    All,
}

impl FromStr for Suite {
    type Err = DpdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identities" => Ok(Suite::Identities),
            "gradients" => Ok(Suite::Gradients),
            "oracle" => Ok(Suite::Oracle),
            "all" => Ok(Suite::All),
            _ => Err(DpdError::Argument(format!("unknown suite {s:?}"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Identities => "identities",
            Suite::Gradients => "gradients",
            Suite::Oracle => "oracle",
            Suite::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(suite: &'static str, name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        Self { suite, name: name.into(), error, tolerance }
    }

    /// Exact checks use tolerance 0 and pass only at error 0.
    pub fn passed(&self) -> bool {
        self.error.is_finite() && (self.error < self.tolerance || (self.tolerance == 0.0 && self.error == 0.0))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}/{}: error {:.3e} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.error,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed())
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

pub fn run(suite: Suite) -> Result<Report> {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Identities | Suite::All) {
        checks.extend(identity_checks()?);
    }
    if matches!(suite, Suite::Oracle | Suite::All) {
        checks.extend(oracle_checks()?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        checks.extend(gradient_checks()?);
    }
    Ok(Report { checks })
}

// ---------------------------------------------------------------- identities

/// `(max |Σω − π/2|, max telescoping error, max linear-increment error)` over
/// `T = 1..=max_steps` for `kind`.
pub fn schedule_errors(kind: ScheduleKind, max_steps: usize) -> Result<(f64, f64, f64)> {
    let (mut sum_err, mut tel_err, mut inc_err) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=max_steps {
        let s = kind.build(t)?;
        let (om, de) = (s.omegas(), s.deltas());
        let total: f64 = om.iter().sum();
        sum_err = sum_err.max((total - FRAC_PI_2).abs());
        let mut prev = 0.0;
        for (o, d) in om.iter().zip(de) {
            tel_err = tel_err.max((d - prev - o).abs());
            prev = *d;
        }
        tel_err = tel_err.max((de[t - 1] - FRAC_PI_2).abs());
        if kind == ScheduleKind::Linear && t > 1 {
            let step = 2.0 * std::f64::consts::PI / (3.0 * t as f64 * (t as f64 + 1.0));
            for w in om.windows(2) {
                if w[1] <= w[0] {
                    inc_err = f64::INFINITY;
                }
                inc_err = inc_err.max((w[1] - w[0] - step).abs());
            }
        }
    }
    Ok((sum_err, tel_err, inc_err))
}

fn random_latent(frames: usize, channels: usize, rng: &mut ChaCha8Rng) -> LatentSeq {
    LatentSeq::gaussian(frames, channels, rng)
}

/// Worst error of `z_from_v`/`eps_from_v` recovering `(z, ε)` over `n` draws.
pub fn round_trip_error(n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (z, eps) = (random_latent(6, 3, &mut rng), random_latent(6, 3, &mut rng));
        let delta = rng.gen_range(0.0..=FRAC_PI_2);
        let z_delta = forward_diffuse(&z, &eps, delta)?;
        let v = LatentSeq::new(eps.data() * delta.cos() - z.data() * delta.sin())?;
        worst = worst
            .max(z_from_v(&z_delta, &v, delta)?.max_abs_diff(&z))
            .max(eps_from_v(&z_delta, &v, delta)?.max_abs_diff(&eps));
    }
    Ok(worst)
}

/// Worst gap between [`ddim_step`] and the composition "recover `ẑ`, `ε̂`,
/// then re-noise to `δ − ω`", with `(δ, ω)` taken from valid schedules.
pub fn ddim_form_error(n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let kind = if rng.gen() { ScheduleKind::Uniform } else { ScheduleKind::Linear };
        let s = kind.build(rng.gen_range(1..=100))?;
        let t = rng.gen_range(0..s.step_count());
        let (delta, omega) = (s.deltas()[t], s.omegas()[t]);
        let (z, v) = (random_latent(6, 3, &mut rng), random_latent(6, 3, &mut rng));
        let fast = ddim_step(&z, &v, omega)?;
        let z_hat = z.data() * delta.cos() - v.data() * delta.sin();
        let e_hat = z.data() * delta.sin() + v.data() * delta.cos();
        let target = delta - omega;
        let slow = LatentSeq::new(z_hat * target.cos() + e_hat * target.sin())?;
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    Ok(worst)
}

pub const SEGMENT_FRAMES: [usize; 5] = [1, 17, 64, 100, 2500];
pub const SEGMENT_SIZES: [usize; 4] = [4, 8, 16, 64];

pub fn segmentation_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for l in SEGMENT_FRAMES {
        for k in SEGMENT_SIZES {
            let h = Array2::from_shape_simple_fn((l, 3), || rng.sample::<f64, _>(StandardNormal));
            let back = overlap_add(&segment(&h, k)?)?;
            worst = worst.max(back.iter().zip(&h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    Ok(worst)
}

/// Single-byte payload corruptions (out of `trials`) that loaded cleanly.
pub fn undetected_corruptions(trials: usize, seed: u64) -> Result<usize> {
    let model = DpdModel::new(DpdConfig { hidden_dim: 8, heads: 2, block_count: 2, ..Default::default() })?;
    let bytes = Checkpoint::new(model).to_container()?.to_bytes()?;
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("preamble")) as usize;
    let start = 16 + header_len;
    let payload_end = bytes.len() - 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut missed = 0;
    for _ in 0..trials {
        let mut bad = bytes.clone();
        bad[rng.gen_range(start..payload_end)] ^= rng.gen_range(1..=255u8);
        if Container::from_bytes(&bad).is_ok() {
            missed += 1;
        }
    }
    Ok(missed)
}

/// Worst `|loaded − f32(saved)|` over a save/load cycle.
pub fn checkpoint_round_trip_error(seed: u64) -> Result<f64> {
    let model = DpdModel::new(DpdConfig { seed, ..Default::default() })?;
    let back = Checkpoint::from_container(&Container::from_bytes(&Checkpoint::new(model.clone()).to_container()?.to_bytes()?)?)?.model;
    let mut worst = 0.0f64;
    for id in model.store().ids() {
        let other = back
            .store()
            .id(model.store().name(id))
            .ok_or_else(|| DpdError::Validation(format!("{} missing after reload", model.store().name(id))))?;
        for (a, b) in model.store().value(id).iter().zip(back.store().value(other)) {
            worst = worst.max(((*a as f32) as f64 - b).abs());
        }
    }
    Ok(worst)
}

pub fn identity_checks() -> Result<Vec<Check>> {
    const S: &str = "identities";
    let mut out = Vec::new();
    for kind in [ScheduleKind::Uniform, ScheduleKind::Linear] {
        let (sum, tel, inc) = schedule_errors(kind, 1000)?;
        out.push(Check::new(S, format!("{kind} schedule sums to π/2 (T ≤ 1000)"), sum, IDENTITY_TOL));
        out.push(Check::new(S, format!("{kind} schedule telescopes (T ≤ 1000)"), tel, IDENTITY_TOL));
        if kind == ScheduleKind::Linear {
            out.push(Check::new(S, "linear schedule increments are constant", inc, IDENTITY_TOL));
        }
    }
    let bounds = chunk_boundaries(2500, 4)?;
    let exact = |ok: bool| if ok { 0.0 } else { 1.0 };
    out.push(Check::new(S, "chunk boundaries for L=2500, M=4", exact(bounds.boundaries() == [0, 625, 1250, 1875, 2500]), 0.0));
    let segs = segment(&Array2::zeros((2500, 1)), 64)?.segments();
    out.push(Check::new(S, "segment count for L=2500, K=64 is 80", exact(segs == 80), 0.0));
    let widths = (1..=8).map(|i| merged_width(64, i, 8)).collect::<Result<Vec<_>>>()?;
    out.push(Check::new(S, "sandglass widths for K=64, N=8", exact(widths == [64, 32, 16, 8, 8, 16, 32, 64]), 0.0));
    out.push(Check::new(S, "z/ε recovery from velocity (1000 draws)", round_trip_error(1000, 11)?, IDENTITY_TOL));
    out.push(Check::new(S, "DDIM step equals recover-and-renoise (1000 draws)", ddim_form_error(1000, 12)?, IDENTITY_TOL));
    out.push(Check::new(S, "overlap-add inverts segmentation", segmentation_error(13)?, IDENTITY_TOL));
    out.push(Check::new(S, "checkpoint round trip at f32", checkpoint_round_trip_error(14)?, 0.0));
    out.push(Check::new(S, "payload digest catches 100 corruptions", undetected_corruptions(100, 15)? as f64, 0.0));
    Ok(out)
}

// ------------------------------------------------------------------- oracle

/// A 60-frame point mass: the first 48 frames form the window, the last
/// 48 the window after one continuation.
fn oracle_case(seed: u64) -> (LatentSeq, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = LatentSeq::new(Array2::from_shape_simple_fn((60, 4), || rng.gen_range(-0.95..0.95))).expect("finite");
    (z, (1..=10).collect())
}

fn sampler_config(schedule: AngleSchedule, seed: u64) -> SamplerConfig {
    SamplerConfig { schedule, cfg_scale: 1.0, seed, chunk_count: 4, frames: 48 }
}

/// `‖z_out − z*‖_∞` of sample, continue and inpaint against the Dirac
/// oracle for one `(kind, T)`.
pub fn oracle_errors(kind: ScheduleKind, steps: usize, seed: u64) -> Result<[f64; 3]> {
    let (stream, all_tokens) = oracle_case(seed);
    let target = stream.rows(0..48);
    let tokens = &all_tokens[..8];
    let oracle = DiracOracle::new(target.clone());
    let cfg = sampler_config(kind.build(steps)?, seed);
    let sampled = sample(tokens, &oracle, &cfg)?.max_abs_diff(&target);

    let shifted = stream.rows(12..60);
    let state = ContinuationState::from_window(&target, tokens, 2, 4)?;
    let continued = continue_latent(&state, &all_tokens[8..], &DiracOracle::new(shifted.clone()), &cfg)?.max_abs_diff(&shifted);

    let mask: Vec<bool> = (0..48).map(|l| (16..32).contains(&l)).collect();
    let mut given = target.clone();
    given.data_mut().slice_mut(ndarray::s![16..32, ..]).fill(0.0);
    let inpainted = inpaint(&given, &mask, tokens, &oracle, &cfg)?.max_abs_diff(&target);
    Ok([sampled, continued, inpainted])
}

pub fn oracle_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for kind in [ScheduleKind::Uniform, ScheduleKind::Linear] {
        for t in ORACLE_STEPS {
            let [a, b, c] = oracle_errors(kind, t, 100 + t as u64)?;
            out.push(Check::new("oracle", format!("sample, {kind} T={t}"), a, ORACLE_TOL));
            out.push(Check::new("oracle", format!("continue, {kind} T={t}"), b, ORACLE_TOL));
            out.push(Check::new("oracle", format!("inpaint, {kind} T={t}"), c, ORACLE_TOL));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- gradients

/// `|n − a| / max(|n|, |a|, REL_FLOOR)`.
pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(REL_FLOOR)
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

/// Checks `d⟨w, f(inputs)⟩/d inputs` for every input entry; `build` makes
/// `f` from leaf variables. Returns the worst relative error.
pub fn graph_gradient_error(inputs: &[Array2<f64>], seed: u64, build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = build(&mut g, &vars);
    let (r, c) = g.shape(out);
    let w = random(r, c, &mut rng);
    let root = g.dot_const(out, w.clone());
    let grads = g.backward(root);
    let eval = |xs: &[Array2<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = build(&mut g, &vars);
        (g.value(out) * &w).sum()
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (vi, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[vi]).cloned().unwrap_or_else(|| Array2::zeros(x.raw_dim()));
        for (idx, &orig) in x.iter().enumerate() {
            let (row, col) = (idx / x.ncols(), idx % x.ncols());
            xs[vi][[row, col]] = orig + FD_STEP;
            let plus = eval(&xs);
            xs[vi][[row, col]] = orig - FD_STEP;
            let minus = eval(&xs);
            xs[vi][[row, col]] = orig;
            worst = worst.max(relative_error((plus - minus) / (2.0 * FD_STEP), analytic[[row, col]]));
        }
    }
    worst
}

/// Adds `N(0, scale²)` noise to every parameter so that zero-initialized
/// biases and unit gains do not hide gradient errors.
pub fn jitter_store(store: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        store.value_mut(id).mapv_inplace(|v| v + scale * rng.sample::<f64, _>(StandardNormal));
    }
}

/// Like [`graph_gradient_error`] but differentiates a block's parameters
/// (every entry) and its inputs.
pub fn block_gradient_error(
    store: &ParamStore,
    inputs: &[Array2<f64>],
    seed: u64,
    build: impl Fn(&mut Graph, &Bound, &[Var]) -> Var,
) -> f64 {
    // Parameters followed by inputs, all as plain leaves.
    let all: Vec<Array2<f64>> = store.ids().map(|id| store.value(id).clone()).chain(inputs.iter().cloned()).collect();
    let n = store.len();
    graph_gradient_error(&all, seed, move |g, vars| {
        let bound = Bound::from_vars(vars[..n].to_vec());
        build(g, &bound, &vars[n..])
    })
}

/// Central differences against [`DpdModel::loss_and_grads`] on
/// `entries_per_tensor` random entries of every parameter tensor.
pub fn model_gradient_error(
    model: &DpdModel,
    z_noisy: &LatentSeq,
    cond: &ConditionBundle,
    target: &crate::diffusion::VelocityTarget,
    branch: Branch,
    entries_per_tensor: usize,
    seed: u64,
) -> Result<(f64, String)> {
    let (_, grads) = model.loss_and_grads(z_noisy, cond, target, branch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut worst = (0.0f64, String::new());
    let ids: Vec<_> = model.store().ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let len = model.store().value(id).len();
        let cols = model.store().value(id).ncols();
        for _ in 0..entries_per_tensor.min(len) {
            let idx = rng.gen_range(0..len);
            let (r, c) = (idx / cols, idx % cols);
            let orig = model.store().value(id)[[r, c]];
            let mut loss_at = |x: f64| -> Result<f64> {
                probe.store_mut().value_mut(id)[[r, c]] = x;
                let v = probe.velocity(z_noisy, cond, branch)?;
                diffusion_loss(target, &v)
            };
            let numeric = (loss_at(orig + FD_STEP)? - loss_at(orig - FD_STEP)?) / (2.0 * FD_STEP);
            probe.store_mut().value_mut(id)[[r, c]] = orig;
            let err = relative_error(numeric, grads[i][[r, c]]);
            if err > worst.0 {
                worst = (err, format!("{}[{r},{c}]", model.store().name(id)));
            }
        }
    }
    Ok(worst)
}

/// The toy network used by the full-model gradient check.
pub fn gradient_model_config(variant: u64) -> DpdConfig {
    DpdConfig {
        latent_dim: 4,
        hidden_dim: 32,
        block_count: 4,
        segment_size: 8,
        vocab: 16,
        heads: [8, 4, 2][variant as usize % 3],
        angle_encoder_mode: if variant % 2 == 0 { AngleEncoderMode::Slerp } else { AngleEncoderMode::Verbatim },
        seed: 1000 + variant,
    }
}

/// Worst relative error of the full network at `L = 64` for one variant.
pub fn full_model_gradient_error(variant: u64, entries_per_tensor: usize) -> Result<(f64, String)> {
    let config = gradient_model_config(variant);
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + variant);
    let mut model = DpdModel::new(config)?;
    jitter_store(model.store_mut(), 0.1, &mut rng);
    let frames = 64;
    let chunks = [4, 2, 1][variant as usize % 3];
    let z = LatentSeq::new(Array2::from_shape_simple_fn((frames, 4), || rng.gen_range(-0.95..0.95)))?;
    let eps = LatentSeq::gaussian(frames, 4, &mut rng);
    let angles = ChunkAngles::sample(chunks, &mut rng);
    let layout = chunk_boundaries(frames, chunks)?;
    let tokens: Vec<u32> = (0..16).map(|_| rng.gen_range(1..=16)).collect();
    let cond = ConditionBundle::new(tokens, build_angle_vector(&layout, &angles)?)?;
    let z_noisy = build_multichunk_noisy(&z, &eps, &layout, &angles)?;
    let target = build_velocity_target(&z, &eps, &layout, &angles)?;
    let branch = if variant == 1 { Branch::Unconditional } else { Branch::Conditional };
    model_gradient_error(&model, &z_noisy, &cond, &target, branch, entries_per_tensor, 3000 + variant)
}

type PrimitiveCheck = fn(u64) -> Result<f64>;

fn op_checks() -> Vec<(&'static str, PrimitiveCheck)> {
    fn r(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        random(rows, cols, rng)
    }
    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }
    vec![
        ("matmul", |s| {
            let mut g = rng(s);
            Ok(graph_gradient_error(&[r(&mut g, 3, 4), r(&mut g, 4, 2)], s, |g, v| g.matmul(v[0], v[1])))
        }),
        ("add/sub/mul/scale", |s| {
            let mut g = rng(s);
            Ok(graph_gradient_error(&[r(&mut g, 3, 4), r(&mut g, 3, 4)], s, |g, v| {
                let m = g.mul(v[0], v[1]);
                let d = g.sub(m, v[1]);
                let a = g.add(d, v[0]);
                g.scale(a, -1.7)
            }))
        }),
        ("add_row/mul_row", |s| {
            let mut g = rng(s);
            Ok(graph_gradient_error(&[r(&mut g, 3, 4), r(&mut g, 1, 4)], s, |g, v| {
                let x = g.add_row(v[0], v[1]);
                g.mul_row(x, v[1])
            }))
        }),
        ("gelu", |s| {
            let mut g = rng(s);
            Ok(graph_gradient_error(&[r(&mut g, 4, 5).mapv(|v| 3.0 * v)], s, |g, v| g.gelu(v[0])))
        }),
        ("rms_norm", |s| {
            let mut g = rng(s);
            Ok(graph_gradient_error(&[r(&mut g, 3, 6), r(&mut g, 1, 6)], s, |g, v| g.rms_norm(v[0], v[1], 1e-8)))
        }),
        ("rows/cols/concat_cols", |s| {
            let mut g = rng(s);
            let mut map = RowMap::new(3, 4);
            for _ in 0..6 {
                map.push(g.gen_range(0..3), g.gen_range(0..4), g.gen_range(-1.0..1.0));
            }
            let map = Rc::new(map);
            Ok(graph_gradient_error(&[r(&mut g, 4, 5)], s, move |g, v| {
                let x = g.rows(v[0], map.clone());
                let a = g.cols(x, 1, 4);
                let b = g.cols(x, 0, 2);
                g.concat_cols(&[a, b, a])
            }))
        }),
        ("sq_error", |s| {
            let mut g = rng(s);
            let t = r(&mut g, 3, 3);
            Ok(graph_gradient_error(&[r(&mut g, 3, 3)], s, move |g, v| g.sq_error(v[0], t.clone())))
        }),
        ("attention (rotary, per-group kv)", |s| {
            let mut g = rng(s);
            let layout = AttentionLayout { heads: 2, groups: 2, q_len: 3, kv_len: 3, shared_kv: false, rotary: true };
            Ok(graph_gradient_error(&[r(&mut g, 6, 4), r(&mut g, 6, 4), r(&mut g, 6, 4)], s, move |g, v| {
                g.attention(v[0], v[1], v[2], layout)
            }))
        }),
        ("attention (rotary, shared kv)", |s| {
            let mut g = rng(s);
            let layout = AttentionLayout { heads: 1, groups: 3, q_len: 2, kv_len: 4, shared_kv: true, rotary: true };
            Ok(graph_gradient_error(&[r(&mut g, 6, 4), r(&mut g, 4, 4), r(&mut g, 4, 4)], s, move |g, v| {
                g.attention(v[0], v[1], v[2], layout)
            }))
        }),
        ("attention (plain)", |s| {
            let mut g = rng(s);
            let layout = AttentionLayout { heads: 2, groups: 1, q_len: 4, kv_len: 3, shared_kv: false, rotary: false };
            Ok(graph_gradient_error(&[r(&mut g, 4, 4), r(&mut g, 3, 4), r(&mut g, 3, 4)], s, move |g, v| {
                g.attention(v[0], v[1], v[2], layout)
            }))
        }),
        ("sru (both directions)", |s| {
            let mut g = rng(s);
            let inputs = [r(&mut g, 6, 8), r(&mut g, 1, 2), r(&mut g, 1, 2), r(&mut g, 1, 2), r(&mut g, 1, 2)];
            Ok(graph_gradient_error(&inputs, s, |g, v| {
                let a = g.sru(v[0], v[1], v[2], v[3], v[4], SruLayout { seqs: 2, steps: 3, reverse: false });
                let b = g.sru(v[0], v[1], v[2], v[3], v[4], SruLayout { seqs: 2, steps: 3, reverse: true });
                g.concat_cols(&[a, b])
            }))
        }),
    ]
}

fn block_checks() -> Vec<(&'static str, PrimitiveCheck)> {
    fn setup(seed: u64) -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
    }
    vec![
        ("mlp block", |s| {
            let (mut st, mut rng) = setup(s);
            let mlp = MlpBlock::new(&mut st, "m", 3, 4, &mut rng)?;
            jitter_store(&mut st, 0.3, &mut rng);
            Ok(block_gradient_error(&st, &[random(5, 3, &mut rng)], s, move |g, p, v| mlp.forward(g, p, v[0])))
        }),
        ("film", |s| {
            let (mut st, mut rng) = setup(s);
            let film = Film::new(&mut st, "f", 4, &mut rng)?;
            jitter_store(&mut st, 0.3, &mut rng);
            Ok(block_gradient_error(&st, &[random(3, 4, &mut rng), random(1, 4, &mut rng)], s, move |g, p, v| {
                film.forward(g, p, v[0], v[1])
            }))
        }),
        ("film (grouped)", |s| {
            let (mut st, mut rng) = setup(s);
            let film = Film::new(&mut st, "f", 4, &mut rng)?;
            jitter_store(&mut st, 0.3, &mut rng);
            let expand = Rc::new(RowMap::gather(2, &[0, 0, 1, 1, 1]));
            Ok(block_gradient_error(&st, &[random(5, 4, &mut rng), random(2, 4, &mut rng)], s, move |g, p, v| {
                film.forward_grouped(g, p, v[0], v[1], &expand)
            }))
        }),
        ("bidirectional sru stack", |s| {
            let (mut st, mut rng) = setup(s);
            let sru = BiSru::new(&mut st, "s", 4, 2, &mut rng)?;
            jitter_store(&mut st, 0.3, &mut rng);
            Ok(block_gradient_error(&st, &[random(6, 4, &mut rng)], s, move |g, p, v| sru.forward(g, p, v[0], 2, 3)))
        }),
        ("grouped rotary self-attention", |s| {
            let (mut st, mut rng) = setup(s);
            let attn = AttentionParams::new(&mut st, "a", 8, 2, &mut rng)?;
            Ok(block_gradient_error(&st, &[random(6, 8, &mut rng)], s, move |g, p, v| attn.forward(g, p, v[0], v[0], 2, false)))
        }),
        ("shared-context cross-attention", |s| {
            let (mut st, mut rng) = setup(s);
            let attn = AttentionParams::new(&mut st, "a", 4, 2, &mut rng)?;
            Ok(block_gradient_error(&st, &[random(6, 4, &mut rng), random(3, 4, &mut rng)], s, move |g, p, v| {
                attn.forward(g, p, v[0], v[1], 3, true)
            }))
        }),
        ("angle encoder (slerp)", |s| angle_encoder_error(s, AngleEncoderMode::Slerp)),
        ("angle encoder (verbatim)", |s| angle_encoder_error(s, AngleEncoderMode::Verbatim)),
        ("token encoder + pooling", |s| {
            let (mut st, mut rng) = setup(s);
            let enc = TokenEncoderParams::new(&mut st, "t", 5, 4, &mut rng)?;
            jitter_store(&mut st, 0.3, &mut rng);
            let tokens: Vec<u32> = (0..4).map(|_| rng.gen_range(1..=5)).collect();
            Ok(block_gradient_error(&st, &[], s, move |g, p, _| {
                let e = enc.forward(g, p, &tokens);
                let m = pooled_tokens(g, e);
                let m = g.rows(m, Rc::new(RowMap::gather(1, &[0; 4])));
                g.concat_cols(&[e, m])
            }))
        }),
    ]
}

fn angle_encoder_error(seed: u64, mode: AngleEncoderMode) -> Result<f64> {
    let mut st = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = AngleEncoderParams::new(&mut st, "a", 4, mode, &mut rng)?;
    jitter_store(&mut st, 0.3, &mut rng);
    let angles: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..=FRAC_PI_2)).collect();
    Ok(block_gradient_error(&st, &[], seed, move |g, p, _| enc.forward(g, p, &angles)))
}

/// Entries probed per tensor in the full-network check.
pub const MODEL_ENTRIES_PER_TENSOR: usize = 3;

pub fn gradient_checks() -> Result<Vec<Check>> {
    const S: &str = "gradients";
    let mut out = Vec::new();
    for (name, f) in op_checks().into_iter().chain(block_checks()) {
        let mut worst = 0.0f64;
        for seed in 0..GRAD_CONFIGS {
            worst = worst.max(f(seed)?);
        }
        out.push(Check::new(S, format!("{name} ({GRAD_CONFIGS} configurations)"), worst, GRAD_REL_TOL));
    }
    for variant in 0..GRAD_CONFIGS {
        let (err, at) = full_model_gradient_error(variant, MODEL_ENTRIES_PER_TENSOR)?;
        out.push(Check::new(S, format!("full network, configuration {variant} (worst at {at})"), err, GRAD_REL_TOL));
    }
    Ok(out)
}
