//! Encoders for the frame-level angle vector and the semantic token sequence.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;

use crate::error::{DpdError, Result};
use crate::graph::{Graph, RowMap, Var};
use crate::primitives::{Bound, Init, MlpBlock, ParamId, ParamStore};

/// Width of the two learnable angle basis vectors.
pub const ANGLE_BASIS_WIDTH: usize = 256;

/// How the two angle basis vectors are interpolated per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AngleEncoderMode {
    /// `cos(δ)·e_start + sin(δ)·e_end`.
    #[default]
    Slerp,
    /// `sin(δ)·e_start + sin(δ)·e_end`, the formula as printed.
    Verbatim,
}

impl AngleEncoderMode {
    /// Weights `(w_start, w_end)` for angle `delta`.
    pub fn weights(self, delta: f64) -> (f64, f64) {
        match self {
            AngleEncoderMode::Slerp => (delta.cos(), delta.sin()),
            AngleEncoderMode::Verbatim => (delta.sin(), delta.sin()),
        }
    }
}

impl fmt::Display for AngleEncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AngleEncoderMode::Slerp => "slerp",
            AngleEncoderMode::Verbatim => "verbatim",
        })
    }
}

impl FromStr for AngleEncoderMode {
    type Err = DpdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slerp" => Ok(Self::Slerp),
            "verbatim" => Ok(Self::Verbatim),
            other => Err(DpdError::Config(format!("unknown angle encoder mode {other:?}"))),
        }
    }
}

pub fn check_angles(angles: &[f64]) -> Result<()> {
    if let Some(a) = angles.iter().find(|a| !(0.0..=FRAC_PI_2).contains(*a)) {
        return Err(DpdError::Domain(format!("angle {a} outside [0, π/2]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct AngleEncoderParams {
    pub e_start: ParamId,
    pub e_end: ParamId,
    pub mlp: MlpBlock,
    pub mode: AngleEncoderMode,
}

impl AngleEncoderParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_hid: usize, mode: AngleEncoderMode, rng: &mut R) -> Result<Self> {
        Ok(Self {
            e_start: store.add(&format!("{prefix}.e_start"), &[ANGLE_BASIS_WIDTH], Init::Normal(1.0), rng)?,
            e_end: store.add(&format!("{prefix}.e_end"), &[ANGLE_BASIS_WIDTH], Init::Normal(1.0), rng)?,
            mlp: MlpBlock::new(store, &format!("{prefix}.mlp"), ANGLE_BASIS_WIDTH, d_hid, rng)?,
            mode,
        })
    }

    /// Per-frame interpolation of the basis vectors, before the MLP.
    pub fn interpolate(&self, g: &mut Graph, p: &Bound, angles: &[f64]) -> Var {
        let n = angles.len();
        let (ws, we): (Vec<f64>, Vec<f64>) = angles.iter().map(|&d| self.mode.weights(d)).unzip();
        let ws = g.constant(Array2::from_shape_vec((n, 1), ws).expect("column"));
        let we = g.constant(Array2::from_shape_vec((n, 1), we).expect("column"));
        let a = g.matmul(ws, p[self.e_start]);
        let b = g.matmul(we, p[self.e_end]);
        g.add(a, b)
    }

    /// `E_δ`, one `d_hid` row per frame. Angles must already be validated.
    pub fn forward(&self, g: &mut Graph, p: &Bound, angles: &[f64]) -> Var {
        let x = self.interpolate(g, p, angles);
        self.mlp.forward(g, p, x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TokenEncoderParams {
    /// `V_ST × d_hid` lookup table; token `u` (1-based) selects row `u − 1`.
    pub table: ParamId,
    pub mlp: MlpBlock,
    pub vocab: usize,
}

impl TokenEncoderParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, vocab: usize, d_hid: usize, rng: &mut R) -> Result<Self> {
        if vocab == 0 {
            return Err(DpdError::Config("vocabulary must be non-empty".into()));
        }
        Ok(Self {
            table: store.add(&format!("{prefix}.table"), &[vocab, d_hid], Init::Normal(1.0), rng)?,
            mlp: MlpBlock::new(store, &format!("{prefix}.mlp"), d_hid, d_hid, rng)?,
            vocab,
        })
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        check_tokens(tokens, self.vocab)
    }

    /// `E_ST`, one row per token. Tokens must already be validated.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: &[u32]) -> Var {
        let rows: Vec<usize> = tokens.iter().map(|&u| u as usize - 1).collect();
        let e = g.rows(p[self.table], Rc::new(RowMap::gather(self.vocab, &rows)));
        self.mlp.forward(g, p, e)
    }
}

pub fn check_tokens(tokens: &[u32], vocab: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(DpdError::Token("token sequence is empty".into()));
    }
    if let Some(u) = tokens.iter().find(|&&u| u == 0 || u as usize > vocab) {
        return Err(DpdError::Token(format!("token id {u} outside 1..={vocab}")));
    }
    Ok(())
}

/// Mean over the rows of `e`, as a `1 × width` node.
pub fn pooled_tokens(g: &mut Graph, e: Var) -> Var {
    let rows = g.shape(e).0;
    let mut map = RowMap::new(1, rows);
    for r in 0..rows {
        map.push(0, r, 1.0 / rows as f64);
    }
    g.rows(e, Rc::new(map))
}

/// Condition for one velocity evaluation: tokens plus a per-frame angle.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub tokens: Vec<u32>,
    pub angle_vector: Vec<f64>,
}

impl ConditionBundle {
    pub fn new(tokens: Vec<u32>, angle_vector: Vec<f64>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(DpdError::Token("token sequence is empty".into()));
        }
        check_angles(&angle_vector)?;
        Ok(Self { tokens, angle_vector })
    }

    pub fn check_frames(&self, frames: usize) -> Result<()> {
        if self.angle_vector.len() != frames {
            return Err(DpdError::Shape(format!(
                "angle vector has {} entries for {frames} frames",
                self.angle_vector.len()
            )));
        }
        Ok(())
    }
}

pub fn encode_angles_eval(angles: &[f64], params: &AngleEncoderParams, store: &ParamStore) -> Result<Array2<f64>> {
    check_angles(angles)?;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let out = params.forward(&mut g, &p, angles);
    Ok(g.value(out).clone())
}

pub fn encode_tokens_eval(tokens: &[u32], params: &TokenEncoderParams, store: &ParamStore) -> Result<Array2<f64>> {
    params.check_tokens(tokens)?;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let out = params.forward(&mut g, &p, tokens);
    Ok(g.value(out).clone())
}

pub fn pooled_tokens_eval(e: &Array2<f64>) -> Result<Vec<f64>> {
    if e.nrows() == 0 {
        return Err(DpdError::Token("cannot pool zero token rows".into()));
    }
    let mut g = Graph::new();
    let v = g.constant(e.clone());
    let out = pooled_tokens(&mut g, v);
    Ok(g.value(out).row(0).to_vec())
}
