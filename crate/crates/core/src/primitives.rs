//! Parameter storage and differentiable building blocks.
//!
//! Blocks hold [`ParamId`]s into a [`ParamStore`]. A forward pass binds the
//! store to a [`Graph`] (one leaf per tensor) and composes graph operations,
//! so every block gets its backward pass from the graph.

use std::collections::HashMap;
use std::ops::Index;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{DpdError, Result};
use crate::graph::{AttentionLayout, Grads, Graph, RowMap, SruLayout, Var};

/// Stabilizer inside every RMSNorm.
pub const RMS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `Normal(0, 1/fan_in)`.
    FanIn(usize),
    /// `Normal(0, std²)`.
    Normal(f64),
    Zeros,
    Ones,
}

/// Named parameter tensors with paired gradient accumulators.
///
/// Vectors are stored as `1 × n` matrices; `shape` keeps the logical shape.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Array2<f64>>,
    grads: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

fn matrix_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [n] => Ok((1, n)),
        [r, c] => Ok((r, c)),
        _ => Err(DpdError::Shape(format!("unsupported parameter rank {shape:?}"))),
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<ParamId> {
        let dims = matrix_dims(shape)?;
        let value = match init {
            Init::FanIn(fan_in) => {
                let std = (1.0 / fan_in.max(1) as f64).sqrt();
                Array2::from_shape_simple_fn(dims, || std * rng.sample::<f64, _>(StandardNormal))
            }
            Init::Normal(std) => Array2::from_shape_simple_fn(dims, || std * rng.sample::<f64, _>(StandardNormal)),
            Init::Zeros => Array2::zeros(dims),
            Init::Ones => Array2::ones(dims),
        };
        self.insert(name, shape.to_vec(), value)
    }

    /// Adds a tensor with an explicit value.
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, value: Array2<f64>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(DpdError::Config(format!("duplicate parameter name {name:?}")));
        }
        if matrix_dims(&shape)? != value.dim() {
            return Err(DpdError::Shape(format!(
                "parameter {name}: shape {shape:?} vs value {:?}",
                value.dim()
            )));
        }
        let id = self.names.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Array2::zeros(value.raw_dim()));
        self.values.push(value);
        self.shapes.push(shape);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub(crate) fn value_grad_mut(&mut self, id: ParamId) -> (&mut Array2<f64>, &Array2<f64>) {
        (&mut self.values[id.0], &self.grads[id.0])
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Copies every tensor into `graph` as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound(self.values.iter().map(|v| graph.leaf(v.clone())).collect())
    }

    /// Copies every tensor into `graph` as a constant (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Bound {
        Bound(self.values.iter().map(|v| graph.constant(v.clone())).collect())
    }

    /// Adds `scale ·` the gradients held in `grads` to the accumulators.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Grads, scale: f64) {
        for (acc, var) in self.grads.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(*var) {
                acc.scaled_add(scale, g);
            }
        }
    }

    /// Adds `scale ·` dense gradients, given in [`ParamId`] order.
    pub fn accumulate_dense(&mut self, grads: &[Array2<f64>], scale: f64) {
        for (acc, g) in self.grads.iter_mut().zip(grads) {
            acc.scaled_add(scale, g);
        }
    }

    /// Sum of squares of all gradient entries, square-rooted.
    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn scale_grads(&mut self, c: f64) {
        self.grads.iter_mut().for_each(|g| *g *= c);
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Graph handles for every tensor of a [`ParamStore`], indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles in [`ParamId`] order, for graphs that create the leaves themselves.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

pub fn rmsnorm(g: &mut Graph, x: Var, gain: Var) -> Var {
    g.rms_norm(x, gain, RMS_EPS)
}

/// `RMSNorm(GELU(x W1 + b1) W2 + b2)`, mapping `d_in` to `d_hid` columns.
#[derive(Debug, Clone, Copy)]
pub struct MlpBlock {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub gain: ParamId,
    pub d_in: usize,
    pub d_hid: usize,
}

impl MlpBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_in: usize, d_hid: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w1: store.add(&format!("{prefix}.w1"), &[d_in, d_hid], Init::FanIn(d_in), rng)?,
            b1: store.add(&format!("{prefix}.b1"), &[d_hid], Init::Zeros, rng)?,
            w2: store.add(&format!("{prefix}.w2"), &[d_hid, d_hid], Init::FanIn(d_hid), rng)?,
            b2: store.add(&format!("{prefix}.b2"), &[d_hid], Init::Zeros, rng)?,
            gain: store.add(&format!("{prefix}.gain"), &[d_hid], Init::Ones, rng)?,
            d_in,
            d_hid,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = g.matmul(x, p[self.w1]);
        let h = g.add_row(h, p[self.b1]);
        let h = g.gelu(h);
        let y = g.matmul(h, p[self.w2]);
        let y = g.add_row(y, p[self.b2]);
        rmsnorm(g, y, p[self.gain])
    }
}

/// Feature-wise modulation `MLP_3((x ⊗ MLP_1(m)) + MLP_2(m))`.
#[derive(Debug, Clone, Copy)]
pub struct Film {
    pub scale: MlpBlock,
    pub shift: MlpBlock,
    pub out: MlpBlock,
}

impl Film {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_hid: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            scale: MlpBlock::new(store, &format!("{prefix}.mlp1"), d_hid, d_hid, rng)?,
            shift: MlpBlock::new(store, &format!("{prefix}.mlp2"), d_hid, d_hid, rng)?,
            out: MlpBlock::new(store, &format!("{prefix}.mlp3"), d_hid, d_hid, rng)?,
        })
    }

    /// One modulation vector `m` (1 × d_hid) for every row of `x`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, m: Var) -> Var {
        let a = self.scale.forward(g, p, m);
        let b = self.shift.forward(g, p, m);
        let y = g.mul_row(x, a);
        let y = g.add_row(y, b);
        self.out.forward(g, p, y)
    }

    /// Row-wise modulation: `m` has one row per group and `expand` maps the
    /// groups onto the rows of `x`.
    pub fn forward_grouped(&self, g: &mut Graph, p: &Bound, x: Var, m: Var, expand: &Rc<RowMap>) -> Var {
        let a = self.scale.forward(g, p, m);
        let b = self.shift.forward(g, p, m);
        let a = g.rows(a, expand.clone());
        let b = g.rows(b, expand.clone());
        let y = g.mul(x, a);
        let y = g.add(y, b);
        self.out.forward(g, p, y)
    }
}

/// One direction of one SRU layer.
#[derive(Debug, Clone, Copy)]
pub struct SruDirection {
    /// `d_in × 4·hd` projection: candidate, forget, reset and highway blocks.
    pub w: ParamId,
    pub vf: ParamId,
    pub vr: ParamId,
    pub bf: ParamId,
    pub br: ParamId,
}

impl SruDirection {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_in: usize, hd: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: store.add(&format!("{prefix}.w"), &[d_in, 4 * hd], Init::FanIn(d_in), rng)?,
            vf: store.add(&format!("{prefix}.vf"), &[hd], Init::Zeros, rng)?,
            vr: store.add(&format!("{prefix}.vr"), &[hd], Init::Zeros, rng)?,
            bf: store.add(&format!("{prefix}.bf"), &[hd], Init::Zeros, rng)?,
            br: store.add(&format!("{prefix}.br"), &[hd], Init::Zeros, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, layout: SruLayout) -> Var {
        let pre = g.matmul(x, p[self.w]);
        g.sru(pre, p[self.vf], p[self.vr], p[self.bf], p[self.br], layout)
    }
}

/// Stack of bidirectional SRU layers. Each direction has width `d/2`; the
/// two outputs are concatenated `[forward, backward]`.
#[derive(Debug, Clone)]
pub struct BiSru {
    pub layers: Vec<[SruDirection; 2]>,
    pub width: usize,
}

impl BiSru {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, layers: usize, rng: &mut R) -> Result<Self> {
        if width % 2 != 0 || width == 0 {
            return Err(DpdError::Config(format!(
                "bidirectional SRU needs an even positive width, got {width}"
            )));
        }
        let hd = width / 2;
        let layers = (0..layers)
            .map(|l| {
                Ok([
                    SruDirection::new(store, &format!("{prefix}.l{l}.fwd"), width, hd, rng)?,
                    SruDirection::new(store, &format!("{prefix}.l{l}.bwd"), width, hd, rng)?,
                ])
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, width })
    }

    /// Runs over `seqs` contiguous sequences of `steps` rows each.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, seqs: usize, steps: usize) -> Var {
        let mut h = x;
        for [fwd, bwd] in &self.layers {
            let a = fwd.forward(g, p, h, SruLayout { seqs, steps, reverse: false });
            let b = bwd.forward(g, p, h, SruLayout { seqs, steps, reverse: true });
            h = g.concat_cols(&[a, b]);
        }
        h
    }
}

/// Projections of one attention sublayer (no biases).
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

pub fn check_heads(width: usize, heads: usize) -> Result<()> {
    if heads == 0 || width % heads != 0 {
        return Err(DpdError::Config(format!("{heads} heads do not divide width {width}")));
    }
    if (width / heads) % 2 != 0 {
        return Err(DpdError::Config(format!(
            "rotary embedding needs an even head dimension, got {}",
            width / heads
        )));
    }
    Ok(())
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(width, heads)?;
        let mut mat = |n: &str| store.add(&format!("{prefix}.{n}"), &[width, width], Init::FanIn(width), rng);
        Ok(Self {
            wq: mat("wq")?,
            wk: mat("wk")?,
            wv: mat("wv")?,
            wo: mat("wo")?,
            heads,
        })
    }

    /// Queries from `x` (`groups × q_len` rows), keys/values from `ctx`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, ctx: Var, groups: usize, shared_ctx: bool) -> Var {
        let q_rows = g.shape(x).0;
        let kv_rows = g.shape(ctx).0;
        let layout = AttentionLayout {
            heads: self.heads,
            groups,
            q_len: q_rows / groups,
            kv_len: if shared_ctx { kv_rows } else { kv_rows / groups },
            shared_kv: shared_ctx,
            rotary: true,
        };
        let q = g.matmul(x, p[self.wq]);
        let k = g.matmul(ctx, p[self.wk]);
        let v = g.matmul(ctx, p[self.wv]);
        let a = g.attention(q, k, v, layout);
        g.matmul(a, p[self.wo])
    }
}

/// Evaluates a one-output graph built by `f` over constant inputs.
fn eval(inputs: &[&Array2<f64>], store: &ParamStore, f: impl FnOnce(&mut Graph, &Bound, &[Var]) -> Var) -> Array2<f64> {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let vars: Vec<Var> = inputs.iter().map(|x| g.constant((*x).clone())).collect();
    let out = f(&mut g, &p, &vars);
    g.value(out).clone()
}

/// Row-wise RMSNorm of a matrix with the given gain vector.
pub fn rmsnorm_eval(x: &Array2<f64>, gain: &[f64]) -> Result<Array2<f64>> {
    if gain.len() != x.ncols() {
        return Err(DpdError::Shape(format!("gain length {} vs width {}", gain.len(), x.ncols())));
    }
    let gain = Array2::from_shape_vec((1, gain.len()), gain.to_vec()).expect("1 × n");
    Ok(eval(&[x, &gain], &ParamStore::new(), |g, _, v| rmsnorm(g, v[0], v[1])))
}

pub fn gelu_eval(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(crate::graph::gelu_scalar)
}

pub fn mlp_eval(x: &Array2<f64>, block: &MlpBlock, store: &ParamStore) -> Result<Array2<f64>> {
    if x.ncols() != block.d_in {
        return Err(DpdError::Shape(format!("MLP input width {} vs {}", x.ncols(), block.d_in)));
    }
    Ok(eval(&[x], store, |g, p, v| block.forward(g, p, v[0])))
}

pub fn film_eval(x: &Array2<f64>, m: &[f64], film: &Film, store: &ParamStore) -> Result<Array2<f64>> {
    let d = film.out.d_in;
    if x.ncols() != d || m.len() != film.scale.d_in {
        return Err(DpdError::Shape(format!(
            "FiLM input width {} / modulation {} vs {d}",
            x.ncols(),
            m.len()
        )));
    }
    let m = Array2::from_shape_vec((1, m.len()), m.to_vec()).expect("1 × n");
    Ok(eval(&[x, &m], store, |g, p, v| film.forward(g, p, v[0], v[1])))
}

/// Bidirectional SRU over one sequence (rows are time steps).
pub fn sru_bidirectional_eval(x: &Array2<f64>, sru: &BiSru, store: &ParamStore) -> Result<Array2<f64>> {
    if x.nrows() == 0 || x.ncols() != sru.width {
        return Err(DpdError::Shape(format!("SRU input {:?} vs width {}", x.dim(), sru.width)));
    }
    Ok(eval(&[x], store, |g, p, v| sru.forward(g, p, v[0], 1, x.nrows())))
}

pub fn rotary_self_attention_eval(x: &Array2<f64>, attn: &AttentionParams, store: &ParamStore) -> Result<Array2<f64>> {
    check_heads(x.ncols(), attn.heads)?;
    Ok(eval(&[x], store, |g, p, v| attn.forward(g, p, v[0], v[0], 1, false)))
}

pub fn cross_attention_eval(x: &Array2<f64>, ctx: &Array2<f64>, attn: &AttentionParams, store: &ParamStore) -> Result<Array2<f64>> {
    check_heads(x.ncols(), attn.heads)?;
    if ctx.ncols() != x.ncols() || ctx.nrows() == 0 {
        return Err(DpdError::Shape(format!("context {:?} vs query width {}", ctx.dim(), x.ncols())));
    }
    Ok(eval(&[x, ctx], store, |g, p, v| attn.forward(g, p, v[0], v[1], 1, true)))
}
