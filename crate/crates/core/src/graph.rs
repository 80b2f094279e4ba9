//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Every node stores its forward value; [`Graph::backward`] walks the nodes
//! in reverse creation order and applies each operation's analytic adjoint.
//! Attention and the SRU recurrence are fused operations with hand-written
//! backward passes so the tape stays small.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse linear map over rows: `out[o] += w · in[i]` for each entry.
///
/// Segmentation, overlap-add, segment merging/repeating, row permutations,
/// gathers and mean pooling are all instances.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMap {
    pub out_rows: usize,
    pub in_rows: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl RowMap {
    pub fn new(out_rows: usize, in_rows: usize) -> Self {
        Self {
            out_rows,
            in_rows,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, out: usize, input: usize, weight: f64) {
        debug_assert!(out < self.out_rows && input < self.in_rows);
        self.entries.push((out, input, weight));
    }

    /// Row gather: output row `o` is input row `indices[o]`.
    pub fn gather(in_rows: usize, indices: &[usize]) -> Self {
        let mut m = Self::new(indices.len(), in_rows);
        for (o, &i) in indices.iter().enumerate() {
            m.push(o, i, 1.0);
        }
        m
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.in_rows, "row map input rows");
        let mut out = Array2::zeros((self.out_rows, x.ncols()));
        for &(o, i, w) in &self.entries {
            out.row_mut(o).scaled_add(w, &x.row(i));
        }
        out
    }

    pub fn apply_transpose(&self, g: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.in_rows, g.ncols()));
        for &(o, i, w) in &self.entries {
            out.row_mut(i).scaled_add(w, &g.row(o));
        }
        out
    }
}

/// Row layout of a fused multi-head attention call.
///
/// Queries are `groups` contiguous sequences of `q_len` rows. Keys/values are
/// either one sequence per group (`shared_kv = false`) or a single sequence
/// of `kv_len` rows shared by every group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub groups: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub shared_kv: bool,
    pub rotary: bool,
}

/// Row layout of a fused SRU recurrence: `seqs` contiguous sequences of
/// `steps` rows, scanned forward or in reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SruLayout {
    pub seqs: usize,
    pub steps: usize,
    pub reverse: bool,
}

pub const ROPE_BASE: f64 = 10_000.0;

/// `(cos, sin)` of the rotary angle for `position` and pair `pair`.
pub fn rope_angle(position: usize, pair: usize, head_dim: usize) -> (f64, f64) {
    let theta = ROPE_BASE.powf(-2.0 * pair as f64 / head_dim as f64);
    let a = position as f64 * theta;
    (a.cos(), a.sin())
}

/// Rotates each head's column pairs of `x` in place; `position(row)` gives
/// the row's sequence position. `sign = -1` applies the inverse rotation.
fn rotate_rows(x: &mut Array2<f64>, heads: usize, position: impl Fn(usize) -> usize, sign: f64) {
    let d = x.ncols() / heads;
    for (row_idx, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        let p = position(row_idx);
        for pair in 0..d / 2 {
            let (c, s) = rope_angle(p, pair, d);
            let s = sign * s;
            for h in 0..heads {
                let i0 = h * d + 2 * pair;
                let (a, b) = (row[i0], row[i0 + 1]);
                row[i0] = a * c - b * s;
                row[i0 + 1] = a * s + b * c;
            }
        }
    }
}

fn flat(x: &Array2<f64>) -> &[f64] {
    x.as_slice().expect("standard layout")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Rows(Var, Rc<RowMap>),
    Cols(Var, usize),
    ConcatCols(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        q_rot: Array2<f64>,
        k_rot: Array2<f64>,
        probs: Vec<f64>,
    },
    Sru {
        pre: Var,
        vf: Var,
        vr: Var,
        bf: Var,
        br: Var,
        layout: SruLayout,
        cells: Array2<f64>,
        forget: Array2<f64>,
        reset: Array2<f64>,
    },
    SqError(Var, Array2<f64>),
    DotConst(Var, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.0[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input (parameter or checked input).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "add");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "sub");
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "mul");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a + row` with `row` (1 × n) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "add_row");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `a ⊙ row` with `row` (1 × n) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "mul_row");
        let value = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu_scalar);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols();
        assert_eq!(self.shape(gain), (1, n), "rms_norm gain");
        let inv_rms: Vec<f64> = xv
            .axis_iter(Axis(0))
            .map(|r| 1.0 / (r.dot(&r) / n as f64 + eps).sqrt())
            .collect();
        let mut value = xv.clone();
        for (mut row, inv) in value.axis_iter_mut(Axis(0)).zip(&inv_rms) {
            row *= *inv;
        }
        value *= self.value(gain);
        let ng = self.ng(x) || self.ng(gain);
        self.push(value, Op::RmsNorm { x, gain, inv_rms }, ng)
    }

    pub fn rows(&mut self, x: Var, map: Rc<RowMap>) -> Var {
        let value = map.apply(self.value(x));
        let ng = self.ng(x);
        self.push(value, Op::Rows(x, map), ng)
    }

    /// Columns `start..end` of `x`.
    pub fn cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        let ng = self.ng(x);
        self.push(value, Op::Cols(x, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat rows agree");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Scaled dot-product multi-head attention with optional rotary
    /// position embedding on queries and keys.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Var {
        let width = self.shape(q).1;
        let kv_groups = if layout.shared_kv { 1 } else { layout.groups };
        assert_eq!(self.shape(q).0, layout.groups * layout.q_len, "attention q rows");
        assert_eq!(self.shape(k).0, kv_groups * layout.kv_len, "attention k rows");
        assert_eq!(self.shape(k), self.shape(v), "attention k/v");
        assert_eq!(self.shape(k).1, width, "attention width");
        assert!(width % layout.heads == 0, "heads must divide width");
        let d = width / layout.heads;

        let mut q_rot = self.value(q).as_standard_layout().into_owned();
        let mut k_rot = self.value(k).as_standard_layout().into_owned();
        if layout.rotary {
            rotate_rows(&mut q_rot, layout.heads, |r| r % layout.q_len, 1.0);
            rotate_rows(&mut k_rot, layout.heads, |r| r % layout.kv_len, 1.0);
        }
        let vv = self.value(v).as_standard_layout();
        let (qs, ks, vs) = (flat(&q_rot), flat(&k_rot), vv.as_slice().expect("standard layout"));
        let scale = 1.0 / (d as f64).sqrt();
        let (tq, tk) = (layout.q_len, layout.kv_len);
        let mut probs = vec![0.0; layout.groups * layout.heads * tq * tk];
        let mut out = vec![0.0; layout.groups * tq * width];
        let mut scores = vec![0.0; tk];
        for g in 0..layout.groups {
            let kg = if layout.shared_kv { 0 } else { g };
            for h in 0..layout.heads {
                for i in 0..tq {
                    let qo = (g * tq + i) * width + h * d;
                    let qi = &qs[qo..qo + d];
                    let mut max = f64::NEG_INFINITY;
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let ko = (kg * tk + j) * width + h * d;
                        *sc = dot(qi, &ks[ko..ko + d]) * scale;
                        max = max.max(*sc);
                    }
                    let mut total = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        total += *sc;
                    }
                    let base = ((g * layout.heads + h) * tq + i) * tk;
                    let orow = &mut out[qo..qo + d];
                    for (j, sc) in scores.iter().enumerate() {
                        let p = sc / total;
                        probs[base + j] = p;
                        let ko = (kg * tk + j) * width + h * d;
                        axpy(orow, p, &vs[ko..ko + d]);
                    }
                }
            }
        }
        let out = Array2::from_shape_vec((layout.groups * tq, width), out).expect("attention output");
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                q_rot,
                k_rot,
                probs,
            },
            ng,
        )
    }

    /// Simple recurrent unit scan.
    ///
    /// `pre` holds four column blocks of width `hd`: candidate `Wx`, forget
    /// pre-activation `W_f x`, reset pre-activation `W_r x`, highway `W_h x`.
    /// `vf`, `vr`, `bf`, `br` are `1 × hd`. Per step, with `c_0 = 0`:
    /// `f = σ(W_f x + v_f⊙c' + b_f)`, `r = σ(W_r x + v_r⊙c' + b_r)`,
    /// `c = f⊙c' + (1−f)⊙Wx`, `h = r⊙c + (1−r)⊙W_h x`.
    pub fn sru(&mut self, pre: Var, vf: Var, vr: Var, bf: Var, br: Var, layout: SruLayout) -> Var {
        let (rows, width) = self.shape(pre);
        assert_eq!(width % 4, 0, "sru pre-activation width");
        let hd = width / 4;
        assert_eq!(rows, layout.seqs * layout.steps, "sru rows");
        for p in [vf, vr, bf, br] {
            assert_eq!(self.shape(p), (1, hd), "sru vector parameter");
        }
        let p = self.value(pre);
        let (vfv, vrv) = (self.value(vf).row(0), self.value(vr).row(0));
        let (bfv, brv) = (self.value(bf).row(0), self.value(br).row(0));
        let mut cells = Array2::zeros((rows, hd));
        let mut forget = Array2::zeros((rows, hd));
        let mut reset = Array2::zeros((rows, hd));
        let mut out = Array2::zeros((rows, hd));
        let mut c_prev = vec![0.0; hd];
        for b in 0..layout.seqs {
            c_prev.iter_mut().for_each(|c| *c = 0.0);
            for t in 0..layout.steps {
                let step = if layout.reverse { layout.steps - 1 - t } else { t };
                let r = b * layout.steps + step;
                let prow = p.row(r);
                for j in 0..hd {
                    let f = sigmoid(prow[hd + j] + vfv[j] * c_prev[j] + bfv[j]);
                    let rr = sigmoid(prow[2 * hd + j] + vrv[j] * c_prev[j] + brv[j]);
                    let c = f * c_prev[j] + (1.0 - f) * prow[j];
                    out[[r, j]] = rr * c + (1.0 - rr) * prow[3 * hd + j];
                    cells[[r, j]] = c;
                    forget[[r, j]] = f;
                    reset[[r, j]] = rr;
                    c_prev[j] = c;
                }
            }
        }
        let ng = [pre, vf, vr, bf, br].iter().any(|v| self.ng(*v));
        self.push(
            out,
            Op::Sru {
                pre,
                vf,
                vr,
                bf,
                br,
                layout,
                cells,
                forget,
                reset,
            },
            ng,
        )
    }

    /// `Σ (x − target)²` as a 1 × 1 node.
    pub fn sq_error(&mut self, x: Var, target: Array2<f64>) -> Var {
        assert_eq!(self.shape(x), target.dim(), "sq_error");
        let s = Zip::from(self.value(x))
            .and(&target)
            .fold(0.0, |acc, a, b| acc + (a - b) * (a - b));
        let ng = self.ng(x);
        self.push(Array2::from_elem((1, 1), s), Op::SqError(x, target), ng)
    }

    /// `Σ x ⊙ weights` as a 1 × 1 node.
    pub fn dot_const(&mut self, x: Var, weights: Array2<f64>) -> Var {
        assert_eq!(self.shape(x), weights.dim(), "dot_const");
        let s = (self.value(x) * &weights).sum();
        let ng = self.ng(x);
        self.push(Array2::from_elem((1, 1), s), Op::DotConst(x, weights), ng)
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// depends on a differentiable leaf.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g * self.value(*row));
                }
                if self.ng(*row) {
                    let gr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::Gelu(a) => {
                let ga = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| g * gelu_grad(x));
                self.accumulate(grads, *a, ga);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gainv = self.value(*gain);
                let n = xv.ncols() as f64;
                let mut xhat = xv.clone();
                for (mut row, inv) in xhat.axis_iter_mut(Axis(0)).zip(inv_rms) {
                    row *= *inv;
                }
                if self.ng(*gain) {
                    let gg = (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gain, gg);
                }
                if self.ng(*x) {
                    let mut dx = g * gainv;
                    for ((mut drow, xrow), inv) in dx
                        .axis_iter_mut(Axis(0))
                        .zip(xhat.axis_iter(Axis(0)))
                        .zip(inv_rms)
                    {
                        let proj = drow.dot(&xrow) / n;
                        Zip::from(&mut drow)
                            .and(&xrow)
                            .for_each(|d, &xh| *d = inv * (*d - xh * proj));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Rows(x, map) => self.accumulate(grads, *x, map.apply_transpose(g)),
            Op::Cols(x, start) => {
                let mut full = Array2::zeros(self.value(*x).raw_dim());
                full.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *x, full);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.ng(*p) {
                        self.accumulate(grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                q_rot,
                k_rot,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, q_rot, k_rot, probs, g, grads),
            Op::Sru {
                pre,
                vf,
                vr,
                bf,
                br,
                layout,
                cells,
                forget,
                reset,
            } => {
                let p = self.value(*pre);
                let hd = p.ncols() / 4;
                let (vfv, vrv) = (self.value(*vf).row(0), self.value(*vr).row(0));
                let mut dpre = Array2::<f64>::zeros(p.raw_dim());
                let mut dvf = Array2::<f64>::zeros((1, hd));
                let mut dvr = Array2::<f64>::zeros((1, hd));
                let mut dbf = Array2::<f64>::zeros((1, hd));
                let mut dbr = Array2::<f64>::zeros((1, hd));
                let mut dc_next = vec![0.0; hd];
                for b in 0..layout.seqs {
                    dc_next.iter_mut().for_each(|c| *c = 0.0);
                    for t in (0..layout.steps).rev() {
                        let (step, prev_step) = if layout.reverse {
                            (layout.steps - 1 - t, (t > 0).then(|| layout.steps - t))
                        } else {
                            (t, t.checked_sub(1))
                        };
                        let r = b * layout.steps + step;
                        let prev = prev_step.map(|ps| b * layout.steps + ps);
                        for j in 0..hd {
                            let c_prev = prev.map_or(0.0, |pr| cells[[pr, j]]);
                            let (c, f, rr) = (cells[[r, j]], forget[[r, j]], reset[[r, j]]);
                            let dh = g[[r, j]];
                            let xc = p[[r, j]];
                            let hw = p[[r, 3 * hd + j]];
                            let dr_pre = dh * (c - hw) * rr * (1.0 - rr);
                            dpre[[r, 3 * hd + j]] = dh * (1.0 - rr);
                            let dc = dh * rr + dc_next[j];
                            dpre[[r, j]] = dc * (1.0 - f);
                            let df_pre = dc * (c_prev - xc) * f * (1.0 - f);
                            dpre[[r, hd + j]] = df_pre;
                            dpre[[r, 2 * hd + j]] = dr_pre;
                            dvf[[0, j]] += df_pre * c_prev;
                            dvr[[0, j]] += dr_pre * c_prev;
                            dbf[[0, j]] += df_pre;
                            dbr[[0, j]] += dr_pre;
                            dc_next[j] = dc * f + df_pre * vfv[j] + dr_pre * vrv[j];
                        }
                    }
                }
                self.accumulate(grads, *pre, dpre);
                self.accumulate(grads, *vf, dvf);
                self.accumulate(grads, *vr, dvr);
                self.accumulate(grads, *bf, dbf);
                self.accumulate(grads, *br, dbr);
            }
            Op::SqError(x, target) => {
                let gs = g[[0, 0]];
                let dx = Zip::from(self.value(*x))
                    .and(target)
                    .map_collect(|&a, &b| 2.0 * gs * (a - b));
                self.accumulate(grads, *x, dx);
            }
            Op::DotConst(x, w) => self.accumulate(grads, *x, w * g[[0, 0]]),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        q_rot: &Array2<f64>,
        k_rot: &Array2<f64>,
        probs: &[f64],
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        let width = q_rot.ncols();
        let d = width / layout.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (tq, tk) = (layout.q_len, layout.kv_len);
        let vv = self.value(v).as_standard_layout();
        let gg = g.as_standard_layout();
        let (qs, ks) = (flat(q_rot), flat(k_rot));
        let (vs, gs) = (vv.as_slice().expect("standard layout"), gg.as_slice().expect("standard layout"));
        let mut dq = vec![0.0; q_rot.len()];
        let mut dk = vec![0.0; k_rot.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; tk];
        for gi in 0..layout.groups {
            let kg = if layout.shared_kv { 0 } else { gi };
            for h in 0..layout.heads {
                for i in 0..tq {
                    let base = ((gi * layout.heads + h) * tq + i) * tk;
                    let p = &probs[base..base + tk];
                    let qo = (gi * tq + i) * width + h * d;
                    let go = &gs[qo..qo + d];
                    let mut weighted = 0.0;
                    for j in 0..tk {
                        let ko = (kg * tk + j) * width + h * d;
                        dp[j] = dot(go, &vs[ko..ko + d]);
                        weighted += p[j] * dp[j];
                        axpy(&mut dv[ko..ko + d], p[j], go);
                    }
                    let qi = &qs[qo..qo + d];
                    for j in 0..tk {
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ko = (kg * tk + j) * width + h * d;
                        axpy(&mut dq[qo..qo + d], ds, &ks[ko..ko + d]);
                        axpy(&mut dk[ko..ko + d], ds, qi);
                    }
                }
            }
        }
        let mut dq = Array2::from_shape_vec(q_rot.raw_dim(), dq).expect("dq");
        let mut dk = Array2::from_shape_vec(k_rot.raw_dim(), dk).expect("dk");
        let dv = Array2::from_shape_vec(vv.raw_dim(), dv).expect("dv");
        if layout.rotary {
            rotate_rows(&mut dq, layout.heads, |r| r % tq, -1.0);
            rotate_rows(&mut dk, layout.heads, |r| r % tk, -1.0);
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}
