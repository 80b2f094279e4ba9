//! The dual-path velocity network.
//!
//! A latent sequence is projected to `d_hid` channels, cut into `S`
//! half-overlapping segments of `K` frames and passed through `N` blocks.
//! Each block runs a coarse path (attention across segments over merged
//! columns) and a fine path (a recurrent scan inside each segment), then the
//! segments are overlap-added back to a sequence and projected out.
//!
//! Internally a segment tensor `S × K × d_hid` is a matrix with row `s·K + k`;
//! merged tensors are stored column-major (`j·S + s`) so each merged column is
//! a contiguous attention sequence.

use std::fmt;
use std::rc::Rc;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{check_angles, check_tokens, pooled_tokens, AngleEncoderMode, AngleEncoderParams, ConditionBundle, TokenEncoderParams};
use crate::diffusion::{LatentSeq, VelocityTarget};
use crate::error::{DpdError, Result};
use crate::graph::{Graph, RowMap, Var};
use crate::primitives::{check_heads, rmsnorm, AttentionParams, BiSru, Bound, Film, Init, MlpBlock, ParamId, ParamStore};

/// Recurrent layers per direction in the fine path.
pub const SRU_LAYERS: usize = 2;
pub const DEFAULT_HEADS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct DpdConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub block_count: usize,
    pub segment_size: usize,
    pub vocab: usize,
    pub heads: usize,
    pub angle_encoder_mode: AngleEncoderMode,
    pub seed: u64,
}

impl Default for DpdConfig {
    /// The desk-scale reference configuration.
    fn default() -> Self {
        Self {
            latent_dim: 4,
            hidden_dim: 32,
            block_count: 4,
            segment_size: 8,
            vocab: 16,
            heads: DEFAULT_HEADS,
            angle_encoder_mode: AngleEncoderMode::Slerp,
            seed: 0,
        }
    }
}

impl DpdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DpdError::Config(msg));
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if self.hidden_dim == 0 || self.hidden_dim % 2 != 0 {
            return bad(format!("hidden_dim must be even and positive, got {}", self.hidden_dim));
        }
        if self.block_count == 0 {
            return bad("block_count must be at least 1".into());
        }
        if self.segment_size < 2 || self.segment_size % 2 != 0 {
            return bad(format!("segment_size must be even and ≥ 2, got {}", self.segment_size));
        }
        if self.vocab == 0 {
            return bad("vocab must be positive".into());
        }
        check_heads(self.hidden_dim, self.heads)
    }

    /// `key = value` lines, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("latent_dim", self.latent_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("block_count", self.block_count.to_string()),
            ("segment_size", self.segment_size.to_string()),
            ("vocab", self.vocab.to_string()),
            ("heads", self.heads.to_string()),
            ("angle_encoder_mode", self.angle_encoder_mode.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from its textual form; returns `false` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| DpdError::Config(format!("invalid value {v:?} for {key}")))
        }
        match key {
            "latent_dim" => self.latent_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "block_count" => self.block_count = num(key, value)?,
            "segment_size" => self.segment_size = num(key, value)?,
            "vocab" => self.vocab = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "angle_encoder_mode" => self.angle_encoder_mode = value.trim().parse()?,
            "seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Which variant of the coarse path's second attention sublayer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Branch {
    /// Cross-attention to the token embeddings.
    #[default]
    Conditional,
    /// The same sublayer as self-attention over the coarse sequence.
    Unconditional,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Conditional => "conditional",
            Branch::Unconditional => "unconditional",
        })
    }
}

/// `⌈2L/K⌉ + 1`.
pub fn segment_count(frames: usize, k: usize) -> usize {
    (2 * frames).div_ceil(k) + 1
}

/// Merge window width `g = 2^{min(i, N−i+1)}` for 1-based block `i`.
pub fn merge_factor(block: usize, blocks: usize) -> Result<usize> {
    if block == 0 || block > blocks {
        return Err(DpdError::Argument(format!("block index {block} outside 1..={blocks}")));
    }
    Ok(1 << block.min(blocks - block + 1))
}

/// `K_MS = ⌈K / 2^{min(i, N−i+1) − 1}⌉`.
pub fn merged_width(k: usize, block: usize, blocks: usize) -> Result<usize> {
    Ok(k.div_ceil(merge_factor(block, blocks)? / 2))
}

/// A `S × K × width` segment tensor plus the zero padding used to build it.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTensor {
    pub data: Array3<f64>,
    pub pad_front: usize,
    pub pad_back: usize,
}

impl SegmentTensor {
    pub fn segments(&self) -> usize {
        self.data.dim().0
    }

    pub fn segment_size(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// The sequence length the padding metadata implies.
    pub fn frames(&self) -> Result<usize> {
        let (s, k, _) = self.data.dim();
        let padded = (s + 1) * k / 2;
        if k < 2 || k % 2 != 0 || self.pad_front != k / 2 || self.pad_front + self.pad_back >= padded {
            return Err(self.inconsistent());
        }
        let frames = padded - self.pad_front - self.pad_back;
        if segment_count(frames, k) != s {
            return Err(self.inconsistent());
        }
        Ok(frames)
    }

    fn inconsistent(&self) -> DpdError {
        DpdError::Shape(format!(
            "inconsistent segment tensor {:?} with padding ({}, {})",
            self.data.dim(),
            self.pad_front,
            self.pad_back
        ))
    }

    fn to_rows(&self) -> Array2<f64> {
        let (s, k, d) = self.data.dim();
        self.data.as_standard_layout().into_owned().into_shape_with_order((s * k, d)).expect("contiguous")
    }

    fn from_rows(rows: Array2<f64>, segments: usize, pad_front: usize, pad_back: usize) -> Self {
        let (n, d) = rows.dim();
        let data = rows.into_shape_with_order((segments, n / segments, d)).expect("row count");
        Self { data, pad_front, pad_back }
    }
}

/// `S·K × L` map: row `s·K + k` reads padded frame `s·K/2 + k`.
fn segment_map(frames: usize, k: usize) -> RowMap {
    let s_count = segment_count(frames, k);
    let mut map = RowMap::new(s_count * k, frames);
    for s in 0..s_count {
        for kk in 0..k {
            let p = s * k / 2 + kk;
            if p >= k / 2 && p - k / 2 < frames {
                map.push(s * k + kk, p - k / 2, 1.0);
            }
        }
    }
    map
}

/// `L × S·K` map summing every window position of a frame, divided by the
/// number of windows covering it.
fn overlap_add_map(frames: usize, k: usize) -> RowMap {
    let s_count = segment_count(frames, k);
    let mut map = RowMap::new(frames, s_count * k);
    for l in 0..frames {
        let p = l + k / 2;
        let covering: Vec<usize> = (0..s_count)
            .filter(|&s| s * k / 2 <= p && p < s * k / 2 + k)
            .map(|s| s * k + p - s * k / 2)
            .collect();
        for &row in &covering {
            map.push(l, row, 1.0 / covering.len() as f64);
        }
    }
    map
}

/// Merged column `j` averages original columns `[j·g/2 − g/2, j·g/2 + g/2)`,
/// zero beyond `0..K`, always dividing by `g`.
fn merge_windows(k: usize, g: usize) -> Vec<Vec<usize>> {
    let half = g / 2;
    (0..k.div_ceil(half))
        .map(|j| {
            let lo = (j * half).saturating_sub(half);
            let hi = (j * half + half).min(k);
            (lo..hi).collect()
        })
        .collect()
}

fn merge_map(segments: usize, k: usize, g: usize) -> RowMap {
    let windows = merge_windows(k, g);
    let mut map = RowMap::new(windows.len() * segments, segments * k);
    for (j, cols) in windows.iter().enumerate() {
        for s in 0..segments {
            for &c in cols {
                map.push(j * segments + s, s * k + c, 1.0 / g as f64);
            }
        }
    }
    map
}

/// Each original column receives the mean of the merged columns whose window
/// covers it.
fn repeat_map(segments: usize, k: usize, g: usize) -> RowMap {
    let windows = merge_windows(k, g);
    let mut cover: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (j, cols) in windows.iter().enumerate() {
        for &c in cols {
            cover[c].push(j);
        }
    }
    let mut map = RowMap::new(segments * k, windows.len() * segments);
    for (c, js) in cover.iter().enumerate() {
        for &j in js {
            for s in 0..segments {
                map.push(s * k + c, j * segments + s, 1.0 / js.len() as f64);
            }
        }
    }
    map
}

/// Cuts `h` (`L × width`) into half-overlapping windows.
pub fn segment(h: &Array2<f64>, k: usize) -> Result<SegmentTensor> {
    if k < 2 || k % 2 != 0 {
        return Err(DpdError::Argument(format!("segment size must be even and ≥ 2, got {k}")));
    }
    let frames = h.nrows();
    if frames == 0 {
        return Err(DpdError::Shape("cannot segment an empty sequence".into()));
    }
    let s = segment_count(frames, k);
    let rows = segment_map(frames, k).apply(h);
    Ok(SegmentTensor::from_rows(rows, s, k / 2, s * k / 2 - frames))
}

/// Inverse of [`segment`].
pub fn overlap_add(t: &SegmentTensor) -> Result<Array2<f64>> {
    let frames = t.frames()?;
    Ok(overlap_add_map(frames, t.segment_size()).apply(&t.to_rows()))
}

/// `S × K × d → S × K_MS × d` column averaging for block `i` of `N`.
pub fn merge_segments(t: &Array3<f64>, block: usize, blocks: usize) -> Result<Array3<f64>> {
    let g = merge_factor(block, blocks)?;
    let (s, k, d) = t.dim();
    let rows = t.as_standard_layout().into_owned().into_shape_with_order((s * k, d)).expect("contiguous");
    let merged = merge_map(s, k, g).apply(&rows);
    let k_ms = merged.nrows() / s.max(1);
    // (j, s) rows back to S × K_MS.
    Ok(Array3::from_shape_fn((s, k_ms, d), |(ss, j, c)| merged[[j * s + ss, c]]))
}

/// `S × K_MS × d → S × K × d` broadcast back for block `i` of `N`.
pub fn repeat_segments(t: &Array3<f64>, block: usize, blocks: usize, k: usize) -> Result<Array3<f64>> {
    let g = merge_factor(block, blocks)?;
    let (s, k_ms, d) = t.dim();
    if k_ms != k.div_ceil(g / 2) {
        return Err(DpdError::Shape(format!("merged width {k_ms} inconsistent with K = {k}, g = {g}")));
    }
    let rows = Array2::from_shape_fn((k_ms * s, d), |(r, c)| t[[r % s, r / s, c]]);
    let out = repeat_map(s, k, g).apply(&rows);
    Ok(out.into_shape_with_order((s, k, d)).expect("row count"))
}

#[derive(Debug, Clone, Copy)]
pub struct CoarseParams {
    pub self_norm: ParamId,
    pub self_attn: AttentionParams,
    pub cross_norm: ParamId,
    pub cross_attn: AttentionParams,
    pub mlp_norm: ParamId,
    pub mlp: MlpBlock,
    /// Output projection of the coarse path.
    pub w_out: ParamId,
}

#[derive(Debug, Clone)]
pub struct FineParams {
    pub sru: BiSru,
    pub film: Film,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    /// 1-based position in the stack.
    pub index: usize,
    pub coarse: CoarseParams,
    pub fine: FineParams,
    pub fine_in_norm: ParamId,
    pub out_norm: ParamId,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub w_in: ParamId,
    pub in_norm: ParamId,
    pub angle: AngleEncoderParams,
    pub tokens: TokenEncoderParams,
    pub blocks: Vec<BlockParams>,
    pub out_norm: ParamId,
    pub w_out: ParamId,
}

/// Row maps for one sequence length.
struct Plan {
    frames: usize,
    segments: usize,
    segment: Rc<RowMap>,
    overlap_add: Rc<RowMap>,
    /// Per block: merge, repeat, merged width.
    merges: Vec<(Rc<RowMap>, Rc<RowMap>, usize)>,
    /// Picks `E_δ[⌊sL/S⌋]` for each segment.
    film_index: Rc<RowMap>,
    /// Spreads one row per segment over that segment's `K` rows.
    film_expand: Rc<RowMap>,
}

impl Plan {
    fn new(frames: usize, k: usize, blocks: usize) -> Self {
        let segments = segment_count(frames, k);
        let merges = (1..=blocks)
            .map(|i| {
                let g = merge_factor(i, blocks).expect("valid block");
                (
                    Rc::new(merge_map(segments, k, g)),
                    Rc::new(repeat_map(segments, k, g)),
                    k.div_ceil(g / 2),
                )
            })
            .collect();
        let index: Vec<usize> = (0..segments).map(|s| s * frames / segments).collect();
        let expand: Vec<usize> = (0..segments * k).map(|r| r / k).collect();
        Self {
            frames,
            segments,
            segment: Rc::new(segment_map(frames, k)),
            overlap_add: Rc::new(overlap_add_map(frames, k)),
            merges,
            film_index: Rc::new(RowMap::gather(frames, &index)),
            film_expand: Rc::new(RowMap::gather(segments, &expand)),
        }
    }
}

/// The velocity network together with its parameters.
#[derive(Debug, Clone)]
pub struct DpdModel {
    config: DpdConfig,
    store: ParamStore,
    params: ModelParams,
}

/// Dense gradients in parameter order.
pub type ParamGrads = Vec<Array2<f64>>;

impl DpdModel {
    /// Builds the network with seeded initialization.
    pub fn new(config: DpdConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let r = &mut rng;
        let mut store = ParamStore::new();
        let (d, h) = (config.latent_dim, config.hidden_dim);
        let w_in = store.add("w_in", &[d, h], Init::FanIn(d), r)?;
        let in_norm = store.add("in_norm.gain", &[h], Init::Ones, r)?;
        let angle = AngleEncoderParams::new(&mut store, "angle", h, config.angle_encoder_mode, r)?;
        let tokens = TokenEncoderParams::new(&mut store, "token", config.vocab, h, r)?;
        let mut blocks = Vec::with_capacity(config.block_count);
        for i in 1..=config.block_count {
            let pre = format!("block{i}");
            let coarse = CoarseParams {
                self_norm: store.add(&format!("{pre}.coarse.self_norm.gain"), &[h], Init::Ones, r)?,
                self_attn: AttentionParams::new(&mut store, &format!("{pre}.coarse.self_attn"), h, config.heads, r)?,
                cross_norm: store.add(&format!("{pre}.coarse.cross_norm.gain"), &[h], Init::Ones, r)?,
                cross_attn: AttentionParams::new(&mut store, &format!("{pre}.coarse.cross_attn"), h, config.heads, r)?,
                mlp_norm: store.add(&format!("{pre}.coarse.mlp_norm.gain"), &[h], Init::Ones, r)?,
                mlp: MlpBlock::new(&mut store, &format!("{pre}.coarse.mlp"), h, h, r)?,
                w_out: store.add(&format!("{pre}.coarse.w_out"), &[h, h], Init::FanIn(h), r)?,
            };
            let fine = FineParams {
                sru: BiSru::new(&mut store, &format!("{pre}.fine.sru"), h, SRU_LAYERS, r)?,
                film: Film::new(&mut store, &format!("{pre}.fine.film"), h, r)?,
            };
            blocks.push(BlockParams {
                index: i,
                coarse,
                fine,
                fine_in_norm: store.add(&format!("{pre}.fine_in_norm.gain"), &[h], Init::Ones, r)?,
                out_norm: store.add(&format!("{pre}.out_norm.gain"), &[h], Init::Ones, r)?,
            });
        }
        let out_norm = store.add("out_norm.gain", &[h], Init::Ones, r)?;
        let w_out = store.add("w_out", &[h, d], Init::FanIn(h), r)?;
        let params = ModelParams { w_in, in_norm, angle, tokens, blocks, out_norm, w_out };
        Ok(Self { config, store, params })
    }

    /// Builds the network for `config` and takes every tensor from `store`,
    /// matched by name and shape.
    pub fn from_store(config: DpdConfig, store: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        if store.len() != model.store.len() {
            return Err(DpdError::Shape(format!(
                "parameter count {} does not match the configuration ({})",
                store.len(),
                model.store.len()
            )));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let src = store
                .id(&name)
                .ok_or_else(|| DpdError::Shape(format!("missing parameter {name}")))?;
            if store.shape(src) != model.store.shape(id) {
                return Err(DpdError::Shape(format!(
                    "parameter {name}: shape {:?}, configuration expects {:?}",
                    store.shape(src),
                    model.store.shape(id)
                )));
            }
            model.store.value_mut(id).assign(store.value(src));
        }
        Ok(model)
    }

    pub fn config(&self) -> &DpdConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn check_inputs(&self, z: &LatentSeq, cond: &ConditionBundle) -> Result<()> {
        if z.channels() != self.config.latent_dim || z.frames() == 0 {
            return Err(DpdError::Shape(format!(
                "latent {:?} vs model latent_dim {}",
                z.shape(),
                self.config.latent_dim
            )));
        }
        cond.check_frames(z.frames())?;
        check_angles(&cond.angle_vector)?;
        check_tokens(&cond.tokens, self.config.vocab)
    }

    /// `v̂_θ(z; c)` on the conditional branch.
    pub fn velocity_forward(&self, z: &LatentSeq, cond: &ConditionBundle) -> Result<LatentSeq> {
        self.velocity(z, cond, Branch::Conditional)
    }

    pub fn velocity(&self, z: &LatentSeq, cond: &ConditionBundle, branch: Branch) -> Result<LatentSeq> {
        self.check_inputs(z, cond)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = g.constant(z.data().clone());
        let out = self.build(&mut g, &p, x, cond, branch);
        LatentSeq::new(g.value(out).clone())
    }

    /// Diffusion loss `‖v_tgt − v̂‖²` and its gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        z_noisy: &LatentSeq,
        cond: &ConditionBundle,
        target: &VelocityTarget,
        branch: Branch,
    ) -> Result<(f64, ParamGrads)> {
        self.check_inputs(z_noisy, cond)?;
        if target.latent().shape() != z_noisy.shape() {
            return Err(DpdError::Shape(format!(
                "target {:?} vs input {:?}",
                target.latent().shape(),
                z_noisy.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = g.constant(z_noisy.data().clone());
        let out = self.build(&mut g, &p, x, cond, branch);
        let loss = g.sq_error(out, target.latent().data().clone());
        let value = g.value(loss)[[0, 0]];
        let mut grads = g.backward(loss);
        let dense = self
            .store
            .ids()
            .map(|id| grads.take(p[id]).unwrap_or_else(|| Array2::zeros(self.store.value(id).raw_dim())))
            .collect();
        Ok((value, dense))
    }

    /// Graph of the full network. Inputs must already be validated.
    pub(crate) fn build(&self, g: &mut Graph, p: &Bound, z: Var, cond: &ConditionBundle, branch: Branch) -> Var {
        let mp = &self.params;
        let plan = Plan::new(g.shape(z).0, self.config.segment_size, self.config.block_count);
        let e_delta = mp.angle.forward(g, p, &cond.angle_vector);
        let e_st = mp.tokens.forward(g, p, &cond.tokens);
        let h = g.matmul(z, p[mp.w_in]);
        let h = g.add(h, e_delta);
        let h = rmsnorm(g, h, p[mp.in_norm]);
        let mut t = g.rows(h, plan.segment.clone());
        for block in &mp.blocks {
            t = self.block_graph(g, p, block, &plan, t, e_delta, e_st, branch);
        }
        let h = g.rows(t, plan.overlap_add.clone());
        let h = rmsnorm(g, h, p[mp.out_norm]);
        g.matmul(h, p[mp.w_out])
    }

    #[allow(clippy::too_many_arguments)]
    fn block_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        block: &BlockParams,
        plan: &Plan,
        t: Var,
        e_delta: Var,
        e_st: Var,
        branch: Branch,
    ) -> Var {
        let c = self.coarse_graph(g, p, block, plan, t, e_st, branch);
        let f_in = g.add(t, c);
        let f_in = rmsnorm(g, f_in, p[block.fine_in_norm]);
        let f_out = self.fine_graph(g, p, block, plan, f_in, e_delta, e_st);
        let next = g.add(f_in, f_out);
        rmsnorm(g, next, p[block.out_norm])
    }

    /// Merge → pre-norm Roformer over each merged column → projection → repeat.
    #[allow(clippy::too_many_arguments)]
    fn coarse_graph(&self, g: &mut Graph, p: &Bound, block: &BlockParams, plan: &Plan, t: Var, e_st: Var, branch: Branch) -> Var {
        let cp = &block.coarse;
        let (merge, repeat, k_ms) = &plan.merges[block.index - 1];
        let x = g.rows(t, merge.clone());
        let n = rmsnorm(g, x, p[cp.self_norm]);
        let a = cp.self_attn.forward(g, p, n, n, *k_ms, false);
        let x = g.add(x, a);
        let n = rmsnorm(g, x, p[cp.cross_norm]);
        let a = match branch {
            Branch::Conditional => cp.cross_attn.forward(g, p, n, e_st, *k_ms, true),
            Branch::Unconditional => cp.cross_attn.forward(g, p, n, n, *k_ms, false),
        };
        let x = g.add(x, a);
        let n = rmsnorm(g, x, p[cp.mlp_norm]);
        let m = cp.mlp.forward(g, p, n);
        let x = g.add(x, m);
        let y = g.matmul(x, p[cp.w_out]);
        g.rows(y, repeat.clone())
    }

    /// Bidirectional SRU inside each segment, then FiLM with
    /// `E_δ[⌊sL/S⌋] + mean(E_ST)` per segment.
    #[allow(clippy::too_many_arguments)]
    fn fine_graph(&self, g: &mut Graph, p: &Bound, block: &BlockParams, plan: &Plan, t: Var, e_delta: Var, e_st: Var) -> Var {
        let fp = &block.fine;
        let h = fp.sru.forward(g, p, t, plan.segments, self.config.segment_size);
        let pooled = pooled_tokens(g, e_st);
        let m = g.rows(e_delta, plan.film_index.clone());
        let m = g.add_row(m, pooled);
        fp.film.forward_grouped(g, p, h, m, &plan.film_expand)
    }

    fn block(&self, index: usize) -> Result<&BlockParams> {
        self.params
            .blocks
            .get(index.wrapping_sub(1))
            .ok_or_else(|| DpdError::Argument(format!("block index {index} outside 1..={}", self.config.block_count)))
    }

    fn check_segments(&self, t: &SegmentTensor) -> Result<Plan> {
        let frames = t.frames()?;
        if t.segment_size() != self.config.segment_size || t.width() != self.config.hidden_dim {
            return Err(DpdError::Shape(format!(
                "segment tensor {:?} vs K = {}, d_hid = {}",
                t.data.dim(),
                self.config.segment_size,
                self.config.hidden_dim
            )));
        }
        Ok(Plan::new(frames, self.config.segment_size, self.config.block_count))
    }

    fn check_embedding(&self, e: &Array2<f64>, rows: Option<usize>, what: &str) -> Result<()> {
        if e.ncols() != self.config.hidden_dim || e.nrows() == 0 || rows.is_some_and(|r| r != e.nrows()) {
            return Err(DpdError::Shape(format!("{what} embedding {:?} does not fit", e.dim())));
        }
        Ok(())
    }

    /// Evaluates one sublayer on constant inputs.
    fn eval_segments(
        &self,
        t: &SegmentTensor,
        plan: &Plan,
        extra: &[&Array2<f64>],
        f: impl FnOnce(&mut Graph, &Bound, &Plan, Var, &[Var]) -> Var,
    ) -> SegmentTensor {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = g.constant(t.to_rows());
        let vars: Vec<Var> = extra.iter().map(|e| g.constant((*e).clone())).collect();
        let out = f(&mut g, &p, plan, x, &vars);
        SegmentTensor::from_rows(g.value(out).clone(), plan.segments, t.pad_front, t.pad_back)
    }

    /// `ℍ_c-out` of block `index` (1-based).
    pub fn coarse_path_eval(&self, index: usize, t: &SegmentTensor, e_st: &Array2<f64>, branch: Branch) -> Result<SegmentTensor> {
        let block = self.block(index)?;
        let plan = self.check_segments(t)?;
        self.check_embedding(e_st, None, "token")?;
        Ok(self.eval_segments(t, &plan, &[e_st], |g, p, plan, x, v| {
            self.coarse_graph(g, p, block, plan, x, v[0], branch)
        }))
    }

    /// `ℍ_f-out` of block `index` for fine-path input `t`.
    pub fn fine_path_eval(&self, index: usize, t: &SegmentTensor, e_delta: &Array2<f64>, e_st: &Array2<f64>) -> Result<SegmentTensor> {
        let block = self.block(index)?;
        let plan = self.check_segments(t)?;
        self.check_embedding(e_delta, Some(plan.frames), "angle")?;
        self.check_embedding(e_st, None, "token")?;
        Ok(self.eval_segments(t, &plan, &[e_delta, e_st], |g, p, plan, x, v| {
            self.fine_graph(g, p, block, plan, x, v[0], v[1])
        }))
    }

    pub fn dual_path_block_eval(
        &self,
        index: usize,
        t: &SegmentTensor,
        e_delta: &Array2<f64>,
        e_st: &Array2<f64>,
        branch: Branch,
    ) -> Result<SegmentTensor> {
        let block = self.block(index)?;
        let plan = self.check_segments(t)?;
        self.check_embedding(e_delta, Some(plan.frames), "angle")?;
        self.check_embedding(e_st, None, "token")?;
        Ok(self.eval_segments(t, &plan, &[e_delta, e_st], |g, p, plan, x, v| {
            self.block_graph(g, p, block, plan, x, v[0], v[1], branch)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{encode_angles_eval, encode_tokens_eval, pooled_tokens_eval};
    use crate::primitives::{cross_attention_eval, film_eval, mlp_eval, rmsnorm_eval, rotary_self_attention_eval, sru_bidirectional_eval};
    use ndarray::{s, Axis};
    use rand::Rng;

    fn random(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || r.gen_range(-1.0..1.0))
    }

    fn toy(d_hid: usize, heads: usize, k: usize, n: usize) -> DpdModel {
        let cfg = DpdConfig {
            latent_dim: 3,
            hidden_dim: d_hid,
            block_count: n,
            segment_size: k,
            vocab: 5,
            heads,
            angle_encoder_mode: AngleEncoderMode::Slerp,
            seed: 3,
        };
        let mut m = DpdModel::new(cfg).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(99);
        for id in m.store.ids().collect::<Vec<_>>() {
            let scale = if m.store.name(id).ends_with("gain") { 0.3 } else { 0.6 };
            m.store.value_mut(id).mapv_inplace(|v| v + r.gen_range(-scale..scale));
        }
        m
    }

    #[test]
    fn segment_counts() {
        assert_eq!(segment_count(2500, 64), 80);
        assert_eq!(segment_count(4, 4), 3);
        assert_eq!(segment_count(1, 2), 2);
        let h = Array2::from_shape_fn((4, 1), |(i, _)| (i + 1) as f64);
        let t = segment(&h, 4).unwrap();
        assert_eq!(t.data.dim(), (3, 4, 1));
        let flat: Vec<f64> = t.data.iter().cloned().collect();
        assert_eq!(flat, vec![0.0, 0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 0.0, 0.0]);
        assert_eq!((t.pad_front, t.pad_back), (2, 2));
        assert!(segment(&h, 3).is_err());
        assert!(segment(&h, 0).is_err());
    }

    #[test]
    fn segmentation_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for l in [1, 17, 64, 100] {
            for k in [2, 4, 8, 16] {
                let h = random(l, 3, &mut r);
                let t = segment(&h, k).unwrap();
                assert_eq!(t.segments(), segment_count(l, k));
                let back = overlap_add(&t).unwrap();
                assert!((&back - &h).iter().all(|d| d.abs() <= 1e-12), "L={l} K={k}");
            }
        }
        let zero = segment(&Array2::zeros((9, 2)), 4).unwrap();
        assert!(overlap_add(&zero).unwrap().iter().all(|v| *v == 0.0));
        let mut bad = segment(&Array2::ones((5, 2)), 4).unwrap();
        bad.pad_back += 2;
        assert!(overlap_add(&bad).is_err());
    }

    #[test]
    fn sandglass_widths() {
        let widths: Vec<usize> = (1..=8).map(|i| merged_width(64, i, 8).unwrap()).collect();
        assert_eq!(widths, vec![64, 32, 16, 8, 8, 16, 32, 64]);
        for n in 1..10 {
            for i in 1..=n {
                assert_eq!(merged_width(16, i, n).unwrap(), merged_width(16, n - i + 1, n).unwrap());
            }
        }
        assert!(merge_factor(0, 4).is_err());
        assert!(merge_factor(5, 4).is_err());
    }

    /// Explicit window loops over one segment's columns.
    fn oracle_merge(cols: &[f64], g: usize) -> Vec<f64> {
        let k = cols.len();
        let half = g / 2;
        let k_ms = k.div_ceil(half);
        (0..k_ms)
            .map(|j| {
                let mut acc = 0.0;
                for w in 0..g {
                    let c = (j * half + w) as isize - half as isize;
                    if c >= 0 && (c as usize) < k {
                        acc += cols[c as usize];
                    }
                }
                acc / g as f64
            })
            .collect()
    }

    fn oracle_repeat(merged: &[f64], g: usize, k: usize) -> Vec<f64> {
        let half = g / 2;
        (0..k)
            .map(|c| {
                let mut sum = 0.0;
                let mut count = 0;
                for (j, v) in merged.iter().enumerate() {
                    let lo = (j * half) as isize - half as isize;
                    if (c as isize) >= lo && (c as isize) < lo + g as isize {
                        sum += v;
                        count += 1;
                    }
                }
                sum / count as f64
            })
            .collect()
    }

    #[test]
    fn merge_and_repeat_match_window_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        // K = 8 with N = 4: blocks 2 and 3 use g = 4.
        let t = Array3::from_shape_simple_fn((3, 8, 2), || r.gen_range(-1.0..1.0));
        for (i, g) in [(1, 2), (2, 4), (3, 4), (4, 2)] {
            assert_eq!(merge_factor(i, 4).unwrap(), g);
            let m = merge_segments(&t, i, 4).unwrap();
            assert_eq!(m.dim(), (3, 8 / (g / 2), 2));
            let rep = repeat_segments(&m, i, 4, 8).unwrap();
            for s in 0..3 {
                for c in 0..2 {
                    let col: Vec<f64> = (0..8).map(|k| t[[s, k, c]]).collect();
                    let want = oracle_merge(&col, g);
                    let got: Vec<f64> = (0..m.dim().1).map(|j| m[[s, j, c]]).collect();
                    assert!(want.iter().zip(&got).all(|(a, b)| (a - b).abs() < 1e-15));
                    let want = oracle_repeat(&got, g, 8);
                    assert!((0..8).all(|k| (rep[[s, k, c]] - want[k]).abs() < 1e-15));
                }
            }
        }
        assert!(repeat_segments(&Array3::zeros((3, 3, 2)), 2, 4, 8).is_err());
    }

    #[test]
    fn constants_survive_merge_and_repeat_in_the_interior() {
        let t = Array3::from_elem((2, 16, 3), 0.7);
        for i in 1..=6 {
            let g = merge_factor(i, 6).unwrap();
            let m = merge_segments(&t, i, 6).unwrap();
            let k_ms = m.dim().1;
            for j in 1..k_ms - 1 {
                assert!((m[[0, j, 0]] - 0.7).abs() < 1e-15);
            }
            let rep = repeat_segments(&m, i, 6, 16).unwrap();
            // Columns whose covering windows are all interior.
            for k in g..16 - g {
                assert!((rep[[1, k, 2]] - 0.7).abs() < 1e-15, "i={i} k={k}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(DpdConfig::default().validate().is_ok());
        for f in [
            |c: &mut DpdConfig| c.segment_size = 7,
            |c: &mut DpdConfig| c.hidden_dim = 30,
            |c: &mut DpdConfig| c.block_count = 0,
            |c: &mut DpdConfig| c.heads = 3,
            |c: &mut DpdConfig| c.vocab = 0,
        ] {
            let mut c = DpdConfig::default();
            f(&mut c);
            assert!(matches!(DpdModel::new(c), Err(DpdError::Config(_))));
        }
        let mut c = DpdConfig::default();
        for (k, v) in (DpdConfig { seed: 9, heads: 4, ..Default::default() }).to_pairs() {
            assert!(c.set(k, &v).unwrap());
        }
        assert_eq!(c.seed, 9);
        assert_eq!(c.heads, 4);
        assert!(!c.set("nope", "1").unwrap());
        assert!(c.set("heads", "x").is_err());
    }

    fn bundle(l: usize, tokens: Vec<u32>, r: &mut ChaCha8Rng) -> ConditionBundle {
        ConditionBundle::new(tokens, (0..l).map(|_| r.gen_range(0.0..1.5)).collect()).unwrap()
    }

    #[test]
    fn forward_shape_and_determinism() {
        let model = DpdModel::new(DpdConfig { latent_dim: 4, seed: 1, ..Default::default() }).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let z = LatentSeq::new(random(64, 4, &mut r)).unwrap();
        let c = bundle(64, vec![1, 5, 16, 2], &mut r);
        let a = model.velocity_forward(&z, &c).unwrap();
        let b = model.velocity_forward(&z, &c).unwrap();
        assert_eq!(a.shape(), [64, 4]);
        assert_eq!(a, b);
        let u = model.velocity(&z, &c, Branch::Unconditional).unwrap();
        assert!(a.max_abs_diff(&u) > 1e-9);
        let short = ConditionBundle::new(vec![1], vec![0.3; 63]).unwrap();
        assert!(model.velocity_forward(&z, &short).is_err());
        let bad_tok = ConditionBundle::new(vec![17], vec![0.3; 64]).unwrap();
        assert!(matches!(model.velocity_forward(&z, &bad_tok), Err(DpdError::Token(_))));
        assert!(model.velocity_forward(&LatentSeq::zeros(64, 3), &c).is_err());
    }

    #[test]
    fn from_store_round_trip() {
        let a = toy(4, 1, 4, 2);
        let b = DpdModel::from_store(a.config().clone(), a.store()).unwrap();
        for id in a.store().ids() {
            assert_eq!(a.store().value(id), b.store().value(id));
        }
        let other = DpdConfig { block_count: 3, ..a.config().clone() };
        assert!(DpdModel::from_store(other, a.store()).is_err());
    }

    fn rows_to_tensor(rows: &Array2<f64>, s: usize) -> Array3<f64> {
        let (n, d) = rows.dim();
        rows.clone().into_shape_with_order((s, n / s, d)).unwrap()
    }

    /// Merge, then each merged column as its own sequence through the
    /// single-sequence primitives, then repeat.
    fn oracle_coarse(m: &DpdModel, i: usize, t: &SegmentTensor, e_st: &Array2<f64>, branch: Branch) -> Array3<f64> {
        let st = m.store();
        let cp = &m.params().blocks[i - 1].coarse;
        let gain = |id: ParamId| st.value(id).row(0).to_vec();
        let merged = merge_segments(&t.data, i, m.config().block_count).unwrap();
        let (s, k_ms, d) = merged.dim();
        let mut out = Array3::zeros((s, k_ms, d));
        for j in 0..k_ms {
            let x = merged.slice(s![.., j, ..]).to_owned();
            let n = rmsnorm_eval(&x, &gain(cp.self_norm)).unwrap();
            let x = &x + &rotary_self_attention_eval(&n, &cp.self_attn, st).unwrap();
            let n = rmsnorm_eval(&x, &gain(cp.cross_norm)).unwrap();
            let a = match branch {
                Branch::Conditional => cross_attention_eval(&n, e_st, &cp.cross_attn, st).unwrap(),
                Branch::Unconditional => rotary_self_attention_eval(&n, &cp.cross_attn, st).unwrap(),
            };
            let x = &x + &a;
            let n = rmsnorm_eval(&x, &gain(cp.mlp_norm)).unwrap();
            let x = &x + &mlp_eval(&n, &cp.mlp, st).unwrap();
            out.slice_mut(s![.., j, ..]).assign(&x.dot(st.value(cp.w_out)));
        }
        repeat_segments(&out, i, m.config().block_count, t.segment_size()).unwrap()
    }

    fn oracle_fine(m: &DpdModel, i: usize, t: &SegmentTensor, e_delta: &Array2<f64>, e_st: &Array2<f64>) -> Array3<f64> {
        let st = m.store();
        let fp = &m.params().blocks[i - 1].fine;
        let pooled = pooled_tokens_eval(e_st).unwrap();
        let (s, k, d) = t.data.dim();
        let l = e_delta.nrows();
        let mut out = Array3::zeros((s, k, d));
        for seg in 0..s {
            let x = t.data.index_axis(Axis(0), seg).to_owned();
            let h = sru_bidirectional_eval(&x, &fp.sru, st).unwrap();
            let mv: Vec<f64> = (0..d).map(|c| e_delta[[seg * l / s, c]] + pooled[c]).collect();
            out.index_axis_mut(Axis(0), seg).assign(&film_eval(&h, &mv, &fp.film, st).unwrap());
        }
        out
    }

    fn close3(a: &Array3<f64>, b: &Array3<f64>, tol: f64) -> bool {
        a.dim() == b.dim() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn coarse_path_matches_composed_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let m = toy(4, 1, 4, 3);
        // L = 4, K = 4 → S = 3.
        let t = segment(&random(4, 4, &mut r), 4).unwrap();
        assert_eq!(t.segments(), 3);
        let e_st = random(2, 4, &mut r);
        for i in 1..=3 {
            for branch in [Branch::Conditional, Branch::Unconditional] {
                let got = m.coarse_path_eval(i, &t, &e_st, branch).unwrap();
                assert_eq!(got.data.dim(), t.data.dim());
                let want = oracle_coarse(&m, i, &t, &e_st, branch);
                assert!(close3(&got.data, &want, 1e-10), "block {i} {branch}");
            }
        }
    }

    #[test]
    fn fine_path_matches_composed_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let m = toy(4, 2, 4, 2);
        let t = segment(&random(7, 4, &mut r), 4).unwrap();
        let e_delta = random(7, 4, &mut r);
        let e_st = random(3, 4, &mut r);
        let got = m.fine_path_eval(2, &t, &e_delta, &e_st).unwrap();
        assert!(close3(&got.data, &oracle_fine(&m, 2, &t, &e_delta, &e_st), 1e-12));
        assert!(m.fine_path_eval(2, &t, &random(6, 4, &mut r), &e_st).is_err());
        assert!(m.fine_path_eval(3, &t, &e_delta, &e_st).is_err());
    }

    #[test]
    fn fine_path_is_segmentwise() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let m = toy(4, 2, 4, 1);
        let mut t = segment(&random(6, 4, &mut r), 4).unwrap();
        let seg0 = t.data.index_axis(Axis(0), 1).to_owned();
        t.data.index_axis_mut(Axis(0), 2).assign(&seg0);
        // Both segments read the same angle row.
        let mut e_delta = random(6, 4, &mut r);
        let (a, b) = (6 / t.segments(), 2 * 6 / t.segments());
        let row = e_delta.row(a).to_owned();
        e_delta.row_mut(b).assign(&row);
        let out = m.fine_path_eval(1, &t, &e_delta, &random(2, 4, &mut r)).unwrap();
        assert_eq!(out.data.index_axis(Axis(0), 1), out.data.index_axis(Axis(0), 2));
    }

    #[test]
    fn block_matches_composed_oracle_and_reduces_to_norms() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut m = toy(4, 1, 4, 2);
        let t = segment(&random(5, 4, &mut r), 4).unwrap();
        let e_delta = random(5, 4, &mut r);
        let e_st = random(2, 4, &mut r);
        let bp = m.params().blocks[0].clone();
        let gain = |m: &DpdModel, id: ParamId| m.store().value(id).row(0).to_vec();
        let norm3 = |x: &Array3<f64>, gain: &[f64]| {
            let (s, k, d) = x.dim();
            let rows = x.clone().into_shape_with_order((s * k, d)).unwrap();
            rows_to_tensor(&rmsnorm_eval(&rows, gain).unwrap(), s)
        };
        let got = m.dual_path_block_eval(1, &t, &e_delta, &e_st, Branch::Conditional).unwrap();
        let c = oracle_coarse(&m, 1, &t, &e_st, Branch::Conditional);
        let f_in = norm3(&(&t.data + &c), &gain(&m, bp.fine_in_norm));
        let f_in_t = SegmentTensor { data: f_in.clone(), ..t.clone() };
        let f_out = oracle_fine(&m, 1, &f_in_t, &e_delta, &e_st);
        let want = norm3(&(&f_in + &f_out), &gain(&m, bp.out_norm));
        assert!(close3(&got.data, &want, 1e-10));

        m.store_mut().value_mut(bp.coarse.w_out).fill(0.0);
        let film_out = bp.fine.film.out;
        m.store_mut().value_mut(film_out.w2).fill(0.0);
        m.store_mut().value_mut(film_out.b2).fill(0.0);
        let got = m.dual_path_block_eval(1, &t, &e_delta, &e_st, Branch::Conditional).unwrap();
        let want = norm3(&norm3(&t.data, &gain(&m, bp.fine_in_norm)), &gain(&m, bp.out_norm));
        assert!(close3(&got.data, &want, 1e-12));
    }

    #[test]
    fn single_segment_column_attention_is_value_projection() {
        // With S = 1 impossible (S ≥ 2), check a one-row sequence through the
        // self-attention primitive the coarse path uses.
        let m = toy(4, 1, 2, 1);
        let cp = &m.params().blocks[0].coarse;
        let x = Array2::from_shape_vec((1, 4), vec![0.1, -0.4, 0.8, 0.3]).unwrap();
        let out = rotary_self_attention_eval(&x, &cp.self_attn, m.store()).unwrap();
        let want = x.dot(m.store().value(cp.self_attn.wv)).dot(m.store().value(cp.self_attn.wo));
        assert!((&out - &want).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn full_forward_matches_composition_of_parts() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let m = toy(4, 2, 4, 2);
        let z = random(6, 3, &mut r);
        let cond = bundle(6, vec![2, 5, 1], &mut r);
        let got = m.velocity_forward(&LatentSeq::new(z.clone()).unwrap(), &cond).unwrap();
        let mp = m.params();
        let st = m.store();
        let gain = |id: ParamId| st.value(id).row(0).to_vec();
        let e_delta = encode_angles_eval(&cond.angle_vector, &mp.angle, st).unwrap();
        let e_st = encode_tokens_eval(&cond.tokens, &mp.tokens, st).unwrap();
        let h = rmsnorm_eval(&(z.dot(st.value(mp.w_in)) + &e_delta), &gain(mp.in_norm)).unwrap();
        let mut t = segment(&h, 4).unwrap();
        for i in 1..=2 {
            t = m.dual_path_block_eval(i, &t, &e_delta, &e_st, Branch::Conditional).unwrap();
        }
        let h = rmsnorm_eval(&overlap_add(&t).unwrap(), &gain(mp.out_norm)).unwrap();
        let want = h.dot(st.value(mp.w_out));
        assert!((got.data() - &want).iter().all(|d| d.abs() < 1e-12));
    }
}
