//! Forward diffusion, multi-chunk inputs/targets and velocity conversions.
//!
//! All operations act on `L × D` latent matrices. A training input is split
//! into `M` contiguous chunks `[L_{m-1}, L_m)` with `L_m = ⌊mL/M⌋`, each
//! diffused at its own angle `δ_m`.

use std::f64::consts::FRAC_PI_2;
use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, DpdError, Result};

/// An `L × D` matrix of latent frames (rows) and channels (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq {
    data: Array2<f64>,
    /// Frames per second of the latent stream, when known.
    pub frame_rate_hint: Option<f64>,
}

impl LatentSeq {
    /// Wraps `data`, rejecting non-finite entries.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(DpdError::Data(format!("non-finite latent entry {bad}")));
        }
        Ok(Self::from_array(data))
    }

    /// Wraps `data` without scanning it. Callers guarantee finiteness.
    pub(crate) fn from_array(data: Array2<f64>) -> Self {
        Self {
            data,
            frame_rate_hint: None,
        }
    }

    pub fn zeros(frames: usize, channels: usize) -> Self {
        Self::from_array(Array2::zeros((frames, channels)))
    }

    /// Standard-normal noise drawn row-major from `rng`.
    pub fn gaussian<R: Rng + ?Sized>(frames: usize, channels: usize, rng: &mut R) -> Self {
        Self::from_array(Array2::from_shape_simple_fn((frames, channels), || {
            rng.sample(StandardNormal)
        }))
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.frames(), self.channels()]
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    /// Copy of rows `range`.
    pub fn rows(&self, range: Range<usize>) -> LatentSeq {
        LatentSeq::from_array(self.data.slice(s![range, ..]).to_owned())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &LatentSeq) -> f64 {
        Zip::from(&self.data)
            .and(&other.data)
            .fold(0.0f64, |m, a, b| m.max((a - b).abs()))
    }

    fn check_same_shape(&self, other: &LatentSeq, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(what, &self.shape(), &other.shape()));
        }
        Ok(())
    }
}

impl From<LatentSeq> for Array2<f64> {
    fn from(l: LatentSeq) -> Self {
        l.data
    }
}

/// Chunk boundaries `L_0 = 0 < L_1 < … < L_M = L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkLayout {
    boundaries: Vec<usize>,
}

impl ChunkLayout {
    pub fn chunk_count(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn frames(&self) -> usize {
        *self.boundaries.last().expect("layout has L_0")
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Frame range of chunk `m` (0-based).
    pub fn chunk(&self, m: usize) -> Range<usize> {
        self.boundaries[m]..self.boundaries[m + 1]
    }

    pub fn chunks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.boundaries.windows(2).map(|w| w[0]..w[1])
    }
}

/// `L_m = ⌊mL/M⌋` for `m = 0..=M`. Requires `L ≥ M ≥ 1` so no chunk is empty.
pub fn chunk_boundaries(frames: usize, chunks: usize) -> Result<ChunkLayout> {
    if chunks == 0 {
        return Err(DpdError::Argument("chunk count must be positive".into()));
    }
    if frames < chunks {
        return Err(DpdError::Argument(format!(
            "{frames} frames cannot be split into {chunks} non-empty chunks"
        )));
    }
    let boundaries = (0..=chunks).map(|m| m * frames / chunks).collect();
    Ok(ChunkLayout { boundaries })
}

/// Per-chunk noise angles `δ_m ∈ [0, π/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkAngles(Vec<f64>);

impl ChunkAngles {
    pub fn new(angles: Vec<f64>) -> Result<Self> {
        if let Some(a) = angles.iter().find(|a| !(0.0..=FRAC_PI_2).contains(*a)) {
            return Err(DpdError::Domain(format!("chunk angle {a} outside [0, π/2]")));
        }
        Ok(Self(angles))
    }

    /// One independent `Uniform[0, π/2]` draw per chunk.
    pub fn sample<R: Rng + ?Sized>(chunks: usize, rng: &mut R) -> Self {
        Self((0..chunks).map(|_| rng.gen_range(0.0..=FRAC_PI_2)).collect())
    }

    pub fn uniform(chunks: usize, delta: f64) -> Result<Self> {
        Self::new(vec![delta; chunks])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Multi-chunk velocity target `v_1 ⊕ … ⊕ v_M`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityTarget(pub LatentSeq);

impl VelocityTarget {
    pub fn latent(&self) -> &LatentSeq {
        &self.0
    }
}

/// Mean coefficient and variance of `q(z_{δt} | z_{δs})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionKernel {
    pub mean_coeff: f64,
    pub variance: f64,
}

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..=FRAC_PI_2).contains(&delta) {
        return Err(DpdError::Domain(format!("angle {delta} outside [0, π/2]")));
    }
    Ok(())
}

/// `a·x + b·y` elementwise.
fn lincomb(a: f64, x: &Array2<f64>, b: f64, y: &Array2<f64>) -> Array2<f64> {
    Zip::from(x).and(y).map_collect(|&x, &y| a * x + b * y)
}

/// `z_δ = cos(δ)·z + sin(δ)·ε`.
pub fn forward_diffuse(z: &LatentSeq, eps: &LatentSeq, delta: f64) -> Result<LatentSeq> {
    z.check_same_shape(eps, "forward_diffuse")?;
    check_delta(delta)?;
    Ok(LatentSeq::from_array(lincomb(
        delta.cos(),
        &z.data,
        delta.sin(),
        &eps.data,
    )))
}

/// Parameters of the Gaussian kernel from angle `δ_s` forward to `δ_t`.
///
/// `variance = σ_t² − (α_t/α_s)² σ_s²`, the exact composition of two
/// variance-preserving marginals.
pub fn transition_kernel_params(delta_s: f64, delta_t: f64) -> Result<TransitionKernel> {
    check_delta(delta_s)?;
    check_delta(delta_t)?;
    if delta_s >= delta_t {
        return Err(DpdError::Argument(format!(
            "kernel needs δ_s < δ_t, got {delta_s} ≥ {delta_t}"
        )));
    }
    if delta_s == FRAC_PI_2 {
        return Err(DpdError::Domain("α(δ_s) = 0: division by zero".into()));
    }
    let (a_s, s_s) = (delta_s.cos(), delta_s.sin());
    let (a_t, s_t) = (delta_t.cos(), delta_t.sin());
    let ratio = a_t / a_s;
    Ok(TransitionKernel {
        mean_coeff: ratio,
        variance: s_t * s_t - ratio * ratio * s_s * s_s,
    })
}

fn check_layout(z: &LatentSeq, eps: &LatentSeq, layout: &ChunkLayout, angles: &ChunkAngles) -> Result<()> {
    z.check_same_shape(eps, "latent vs noise")?;
    if layout.frames() != z.frames() {
        return Err(shape_err("layout vs latent frames", &[layout.frames()], &[z.frames()]));
    }
    if layout.chunk_count() != angles.0.len() {
        return Err(shape_err(
            "chunk count vs angle count",
            &[layout.chunk_count()],
            &[angles.0.len()],
        ));
    }
    Ok(())
}

/// Applies `f(cos δ_m, sin δ_m, z_chunk, ε_chunk)` chunk by chunk.
fn per_chunk(
    z: &LatentSeq,
    eps: &LatentSeq,
    layout: &ChunkLayout,
    angles: &ChunkAngles,
    f: impl Fn(f64, f64, f64, f64) -> f64,
) -> Array2<f64> {
    let mut out = Array2::zeros(z.data.raw_dim());
    for (range, &delta) in layout.chunks().zip(&angles.0) {
        let (c, s) = (delta.cos(), delta.sin());
        Zip::from(out.slice_mut(s![range.clone(), ..]))
            .and(z.data.slice(s![range.clone(), ..]))
            .and(eps.data.slice(s![range, ..]))
            .for_each(|o, &zv, &ev| *o = f(c, s, zv, ev));
    }
    out
}

/// Noisy input whose chunk `m` is `cos(δ_m)·z + sin(δ_m)·ε`.
pub fn build_multichunk_noisy(
    z: &LatentSeq,
    eps: &LatentSeq,
    layout: &ChunkLayout,
    angles: &ChunkAngles,
) -> Result<LatentSeq> {
    check_layout(z, eps, layout, angles)?;
    Ok(LatentSeq::from_array(per_chunk(z, eps, layout, angles, |c, s, zv, ev| {
        c * zv + s * ev
    })))
}

/// Velocity target whose chunk `m` is `cos(δ_m)·ε − sin(δ_m)·z`.
pub fn build_velocity_target(
    z: &LatentSeq,
    eps: &LatentSeq,
    layout: &ChunkLayout,
    angles: &ChunkAngles,
) -> Result<VelocityTarget> {
    check_layout(z, eps, layout, angles)?;
    Ok(VelocityTarget(LatentSeq::from_array(per_chunk(
        z,
        eps,
        layout,
        angles,
        |c, s, zv, ev| c * ev - s * zv,
    ))))
}

/// Clean latent from a noisy latent and its velocity: `cos(δ)·z_δ − sin(δ)·v`.
pub fn z_from_v(z_delta: &LatentSeq, v: &LatentSeq, delta: f64) -> Result<LatentSeq> {
    z_delta.check_same_shape(v, "z_from_v")?;
    Ok(LatentSeq::from_array(lincomb(
        delta.cos(),
        &z_delta.data,
        -delta.sin(),
        &v.data,
    )))
}

/// Noise from a noisy latent and its velocity: `sin(δ)·z_δ + cos(δ)·v`.
pub fn eps_from_v(z_delta: &LatentSeq, v: &LatentSeq, delta: f64) -> Result<LatentSeq> {
    z_delta.check_same_shape(v, "eps_from_v")?;
    Ok(LatentSeq::from_array(lincomb(
        delta.sin(),
        &z_delta.data,
        delta.cos(),
        &v.data,
    )))
}

/// Squared L2 norm of `v_target − v_hat`, summed over all `L × D` entries.
pub fn diffusion_loss(v_target: &VelocityTarget, v_hat: &LatentSeq) -> Result<f64> {
    v_target.0.check_same_shape(v_hat, "diffusion_loss")?;
    Ok(Zip::from(&v_target.0.data)
        .and(&v_hat.data)
        .fold(0.0, |acc, a, b| acc + (a - b) * (a - b)))
}

/// Frame-level angle vector: frame `l` carries `δ_m` of the chunk holding `l`.
pub fn build_angle_vector(layout: &ChunkLayout, angles: &ChunkAngles) -> Result<Vec<f64>> {
    if layout.chunk_count() != angles.0.len() {
        return Err(shape_err(
            "chunk count vs angle count",
            &[layout.chunk_count()],
            &[angles.0.len()],
        ));
    }
    let mut out = Vec::with_capacity(layout.frames());
    for (range, &delta) in layout.chunks().zip(&angles.0) {
        out.extend(std::iter::repeat(delta).take(range.len()));
    }
    Ok(out)
}

/// Maps raw encoder outputs into `[-1, 1]`: `clip(x / 3, -1, 1)`.
pub fn clamp_latent(raw: &LatentSeq) -> Result<LatentSeq> {
    LatentSeq::new(raw.data.mapv(|x| (x / 3.0).clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    fn lat(a: Array2<f64>) -> LatentSeq {
        LatentSeq::new(a).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn chunk_boundary_examples() {
        assert_eq!(
            chunk_boundaries(2500, 4).unwrap().boundaries(),
            &[0, 625, 1250, 1875, 2500]
        );
        assert_eq!(chunk_boundaries(10, 1).unwrap().boundaries(), &[0, 10]);
        assert_eq!(chunk_boundaries(7, 3).unwrap().boundaries(), &[0, 2, 4, 7]);
        assert!(matches!(chunk_boundaries(3, 4), Err(DpdError::Argument(_))));
        assert!(chunk_boundaries(3, 0).is_err());
    }

    #[test]
    fn forward_diffuse_examples() {
        let mut r = rng(1);
        let z = LatentSeq::gaussian(3, 2, &mut r);
        let e = LatentSeq::gaussian(3, 2, &mut r);
        assert_eq!(forward_diffuse(&z, &e, 0.0).unwrap(), z);
        // cos(π/2) is 6e-17, not 0, so compare with a tolerance.
        assert!(forward_diffuse(&z, &e, FRAC_PI_2).unwrap().max_abs_diff(&e) < 1e-15);
        let out = forward_diffuse(&lat(array![[1.0, 0.0]]), &lat(array![[0.0, 1.0]]), PI / 4.0).unwrap();
        assert!((out.data()[[0, 0]] - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((out.data()[[0, 1]] - FRAC_1_SQRT_2).abs() < 1e-15);
        let bad = LatentSeq::zeros(2, 2);
        assert!(matches!(forward_diffuse(&z, &bad, 0.1), Err(DpdError::Shape(_))));
    }

    #[test]
    fn transition_kernel_examples() {
        let k = transition_kernel_params(0.0, 0.7).unwrap();
        assert!((k.mean_coeff - 0.7f64.cos()).abs() < 1e-15);
        assert!((k.variance - 0.7f64.sin().powi(2)).abs() < 1e-15);
        let k = transition_kernel_params(PI / 6.0, PI / 3.0).unwrap();
        assert!((k.mean_coeff - 0.5773502691896258).abs() < 1e-12);
        assert!((k.variance - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            transition_kernel_params(0.5, 0.5),
            Err(DpdError::Argument(_))
        ));
        assert!(transition_kernel_params(0.6, 0.5).is_err());
    }

    #[test]
    fn transition_kernel_composes_with_marginal() {
        // Monte-Carlo moments of z_s -> z_t against q(z_t | z) for a fixed scalar z.
        let (ds, dt, z) = (0.4, 1.1, 0.8);
        let k = transition_kernel_params(ds, dt).unwrap();
        let mut r = rng(7);
        let n = 200_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let e1: f64 = r.sample(StandardNormal);
            let e2: f64 = r.sample(StandardNormal);
            let zs = ds.cos() * z + ds.sin() * e1;
            let zt = k.mean_coeff * zs + k.variance.sqrt() * e2;
            sum += zt;
            sq += zt * zt;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let target_var = dt.sin().powi(2);
        let se_mean = (target_var / n as f64).sqrt();
        let se_var = target_var * (2.0 / n as f64).sqrt();
        assert!((mean - dt.cos() * z).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - target_var).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn multichunk_examples() {
        let mut r = rng(3);
        let z = LatentSeq::gaussian(4, 3, &mut r);
        let e = LatentSeq::gaussian(4, 3, &mut r);
        let one = chunk_boundaries(4, 1).unwrap();
        let a = ChunkAngles::new(vec![0.9]).unwrap();
        assert_eq!(
            build_multichunk_noisy(&z, &e, &one, &a).unwrap(),
            forward_diffuse(&z, &e, 0.9).unwrap()
        );
        let two = chunk_boundaries(4, 2).unwrap();
        let zero = ChunkAngles::uniform(2, 0.0).unwrap();
        assert_eq!(build_multichunk_noisy(&z, &e, &two, &zero).unwrap(), z);
        let split = ChunkAngles::new(vec![0.0, FRAC_PI_2]).unwrap();
        let out = build_multichunk_noisy(&z, &e, &two, &split).unwrap();
        assert_eq!(out.rows(0..2), z.rows(0..2));
        assert!(out.rows(2..4).max_abs_diff(&e.rows(2..4)) < 1e-15);
    }

    #[test]
    fn velocity_target_examples() {
        let mut r = rng(4);
        let z = LatentSeq::gaussian(4, 2, &mut r);
        let e = LatentSeq::gaussian(4, 2, &mut r);
        let layout = chunk_boundaries(4, 2).unwrap();
        let v = build_velocity_target(&z, &e, &layout, &ChunkAngles::uniform(2, 0.0).unwrap()).unwrap();
        assert_eq!(v.0, e);
        let v = build_velocity_target(&z, &e, &layout, &ChunkAngles::uniform(2, FRAC_PI_2).unwrap()).unwrap();
        assert!(v.0.max_abs_diff(&LatentSeq::from_array(-z.data().clone())) < 1e-15);

        let deltas = [PI / 6.0, PI / 3.0];
        let v = build_velocity_target(&z, &e, &layout, &ChunkAngles::new(deltas.to_vec()).unwrap()).unwrap();
        for l in 0..4 {
            let d = deltas[l / 2];
            for c in 0..2 {
                let want = d.cos() * e.data()[[l, c]] - d.sin() * z.data()[[l, c]];
                assert!((v.0.data()[[l, c]] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn layout_mismatch_is_shape_error() {
        let z = LatentSeq::zeros(5, 2);
        let layout = chunk_boundaries(4, 2).unwrap();
        let a = ChunkAngles::uniform(2, 0.1).unwrap();
        assert!(matches!(
            build_velocity_target(&z, &z, &layout, &a),
            Err(DpdError::Shape(_))
        ));
        let layout = chunk_boundaries(5, 2).unwrap();
        let a3 = ChunkAngles::uniform(3, 0.1).unwrap();
        assert!(build_multichunk_noisy(&z, &z, &layout, &a3).is_err());
    }

    #[test]
    fn conversions_recover_z_and_eps() {
        let mut r = rng(5);
        let z = LatentSeq::gaussian(6, 3, &mut r);
        let e = LatentSeq::gaussian(6, 3, &mut r);
        for &d in &[0.0, 0.3, 1.0, FRAC_PI_2] {
            let zd = forward_diffuse(&z, &e, d).unwrap();
            let v = LatentSeq::from_array(lincomb(d.cos(), e.data(), -d.sin(), z.data()));
            assert!(z_from_v(&zd, &v, d).unwrap().max_abs_diff(&z) < 1e-12);
            assert!(eps_from_v(&zd, &v, d).unwrap().max_abs_diff(&e) < 1e-12);
        }
        assert_eq!(z_from_v(&z, &e, 0.0).unwrap(), z);
        assert!(eps_from_v(&z, &e, FRAC_PI_2).unwrap().max_abs_diff(&z) < 1e-15);
    }

    #[test]
    fn loss_examples() {
        let t = VelocityTarget(lat(array![[0.0]]));
        assert_eq!(diffusion_loss(&t, &lat(array![[2.0]])).unwrap(), 4.0);
        let mut r = rng(6);
        let a = LatentSeq::gaussian(4, 2, &mut r);
        let b = LatentSeq::gaussian(4, 2, &mut r);
        let t = VelocityTarget(a.clone());
        assert_eq!(diffusion_loss(&t, &a).unwrap(), 0.0);
        let mut want = 0.0;
        for i in 0..4 {
            for j in 0..2 {
                let d = a.data()[[i, j]] - b.data()[[i, j]];
                want += d * d;
            }
        }
        assert!((diffusion_loss(&t, &b).unwrap() - want).abs() < 1e-12);
        assert!(diffusion_loss(&t, &LatentSeq::zeros(2, 2)).is_err());
    }

    #[test]
    fn angle_vector_examples() {
        let (a, b, c) = (0.1, 0.2, 0.3);
        let v = build_angle_vector(&chunk_boundaries(4, 2).unwrap(), &ChunkAngles::new(vec![a, b]).unwrap()).unwrap();
        assert_eq!(v, vec![a, a, b, b]);
        let v = build_angle_vector(&chunk_boundaries(5, 1).unwrap(), &ChunkAngles::new(vec![c]).unwrap()).unwrap();
        assert_eq!(v, vec![c; 5]);
        let v = build_angle_vector(&chunk_boundaries(7, 3).unwrap(), &ChunkAngles::new(vec![a, b, c]).unwrap()).unwrap();
        assert_eq!(v, vec![a, a, b, b, c, c, c]);
    }

    #[test]
    fn clamp_examples() {
        let out = clamp_latent(&lat(array![[0.0, 4.5, -1.5, -9.0]])).unwrap();
        assert_eq!(out.data(), &array![[0.0, 1.0, -0.5, -1.0]]);
        let mut raw = LatentSeq::zeros(1, 1);
        raw.data_mut()[[0, 0]] = f64::NAN;
        assert!(matches!(clamp_latent(&raw), Err(DpdError::Data(_))));
    }

    #[test]
    fn chunk_angles_validate_range() {
        assert!(ChunkAngles::new(vec![0.0, FRAC_PI_2]).is_ok());
        assert!(matches!(ChunkAngles::new(vec![1.6]), Err(DpdError::Domain(_))));
        let mut r = rng(9);
        let a = ChunkAngles::sample(100, &mut r);
        assert!(a.as_slice().iter().all(|d| (0.0..=FRAC_PI_2).contains(d)));
    }

    #[test]
    fn forward_diffuse_preserves_unit_variance() {
        let mut r = rng(11);
        let n = 100_000;
        let z = LatentSeq::gaussian(n, 1, &mut r);
        let e = LatentSeq::gaussian(n, 1, &mut r);
        let out = forward_diffuse(&z, &e, 0.6).unwrap();
        let mean = out.data().mean().unwrap();
        let var = out.data().mapv(|x| (x - mean).powi(2)).sum() / n as f64;
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "var {var}");
    }
}
