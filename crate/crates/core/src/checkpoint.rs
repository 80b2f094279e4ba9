//! Named-tensor container (`DPD1`) for model checkpoints and latents, plus
//! the CSV and token/mask text formats.
//!
//! Layout: `"DPD1"`, `u32` version, `u64` header length, UTF-8 header of
//! `key = value` lines, little-endian payload, trailing `u64` FNV-1a digest
//! of the payload. Tensor lines read `tensor.<name> = <dtype> <shape> <offset>`.

use std::fmt::Write as _;
use std::hash::Hasher;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::diffusion::LatentSeq;
use crate::dualpath::{DpdConfig, DpdModel};
use crate::error::{DpdError, Result};
use crate::primitives::ParamStore;

pub const MAGIC: [u8; 4] = *b"DPD1";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;
const DIGEST_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Values as stored (f32 tensors hold f32-representable numbers).
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: &str, dtype: Dtype, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DpdError::Shape(format!("tensor {name}: shape {shape:?} needs {n} values, got {}", data.len())));
        }
        let data = match dtype {
            Dtype::F32 => data.into_iter().map(|v| v as f32 as f64).collect(),
            Dtype::F64 => data,
        };
        Ok(Self { name: name.to_string(), dtype, shape, data })
    }
}

/// Header entries plus tensors, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub entries: Vec<(String, String)>,
    pub tensors: Vec<Tensor>,
}

/// 64-bit FNV-1a over `bytes`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn shape_text(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", parts.join(","))
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    let inner = s
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| DpdError::Header(format!("bad shape {s:?}")))?;
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|d| d.trim().parse().map_err(|_| DpdError::Header(format!("bad shape {s:?}"))))
        .collect()
}

impl Container {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        for (k, v) in &self.entries {
            if k.is_empty() || k.contains(['=', '\n']) || k.starts_with("tensor.") || v.contains('\n') {
                return Err(DpdError::Header(format!("unencodable entry {k:?}")));
            }
            writeln!(header, "{k} = {v}").expect("string write");
        }
        let mut payload = Vec::new();
        for t in &self.tensors {
            if t.name.is_empty() || t.name.contains([' ', '=', '\n']) {
                return Err(DpdError::Header(format!("unencodable tensor name {:?}", t.name)));
            }
            writeln!(header, "tensor.{} = {} {} {}", t.name, t.dtype.name(), shape_text(&t.shape), payload.len()).expect("string write");
            for &v in &t.data {
                match t.dtype {
                    Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len() + DIGEST_LEN);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(DpdError::Truncated(format!("{} bytes, no magic", bytes.len())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(DpdError::BadMagic(magic));
        }
        if bytes.len() < PREAMBLE {
            return Err(DpdError::Truncated(format!("{} bytes, preamble needs {PREAMBLE}", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(DpdError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|h| h.checked_add(PREAMBLE))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| DpdError::Truncated(format!("header of {header_len} bytes exceeds the file")))?;
        let header = std::str::from_utf8(&bytes[PREAMBLE..header_end]).map_err(|e| DpdError::Header(format!("not UTF-8: {e}")))?;
        if bytes.len() < header_end + DIGEST_LEN {
            return Err(DpdError::Truncated("missing payload digest".into()));
        }
        let payload = &bytes[header_end..bytes.len() - DIGEST_LEN];

        let mut entries = Vec::new();
        let mut specs = Vec::new();
        for (i, line) in header.lines().enumerate() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| DpdError::Header(format!("line {}: expected `key = value`", i + 1)))?;
            match k.strip_prefix("tensor.") {
                Some(name) => {
                    let mut parts = v.split(' ');
                    let (dtype, shape, offset) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                        (Some(d), Some(s), Some(o), None) => (d, s, o),
                        _ => return Err(DpdError::Header(format!("tensor {name}: expected `dtype shape offset`"))),
                    };
                    let dtype = match dtype {
                        "f32" => Dtype::F32,
                        "f64" => Dtype::F64,
                        other => return Err(DpdError::Header(format!("tensor {name}: unknown dtype {other:?}"))),
                    };
                    let offset: usize = offset.parse().map_err(|_| DpdError::Header(format!("tensor {name}: bad offset {offset:?}")))?;
                    specs.push((name.to_string(), dtype, parse_shape(shape)?, offset));
                }
                None => entries.push((k.to_string(), v.to_string())),
            }
        }

        // Offsets must tile the payload in order, without gaps or overlaps.
        let mut expected_offset = 0usize;
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, dtype, shape, offset) in specs {
            if tensors.iter().any(|t: &Tensor| t.name == name) {
                return Err(DpdError::Header(format!("tensor {name} listed twice")));
            }
            if offset != expected_offset {
                return Err(DpdError::Header(format!("tensor {name}: offset {offset}, expected {expected_offset}")));
            }
            let len = shape
                .iter()
                .try_fold(dtype.width(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| DpdError::Header(format!("tensor {name}: shape overflows")))?;
            let end = offset + len;
            if end > payload.len() {
                return Err(DpdError::Truncated(format!("tensor {name} ends at {end}, payload has {} bytes", payload.len())));
            }
            let raw = &payload[offset..end];
            let data = match dtype {
                Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
                Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
            };
            tensors.push(Tensor { name, dtype, shape, data });
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(DpdError::Header(format!(
                "payload has {} bytes, tensors cover {expected_offset}",
                payload.len()
            )));
        }
        let stored = u64::from_le_bytes(bytes[bytes.len() - DIGEST_LEN..].try_into().expect("8 bytes"));
        let computed = fnv1a64(payload);
        if stored != computed {
            return Err(DpdError::DigestMismatch { stored, computed });
        }
        Ok(Self { entries, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| DpdError::Io(e.error))?;
    Ok(())
}

/// Sampler defaults stored alongside a model.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerDefaults {
    pub schedule: crate::schedule::ScheduleKind,
    pub steps: usize,
    pub cfg_scale: f64,
    pub chunk_count: usize,
    pub frames: usize,
}

impl Default for SamplerDefaults {
    fn default() -> Self {
        Self {
            schedule: crate::schedule::ScheduleKind::Uniform,
            steps: 20,
            cfg_scale: crate::sampler::DEFAULT_CFG_SCALE,
            chunk_count: 4,
            frames: 160,
        }
    }
}

impl SamplerDefaults {
    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("sampler.schedule".into(), self.schedule.to_string()),
            ("sampler.steps".into(), self.steps.to_string()),
            ("sampler.cfg_scale".into(), format!("{:?}", self.cfg_scale)),
            ("sampler.chunk_count".into(), self.chunk_count.to_string()),
            ("sampler.frames".into(), self.frames.to_string()),
        ]
    }

    fn from_container(c: &Container) -> Result<Self> {
        fn field<T: std::str::FromStr>(c: &Container, key: &str, default: T) -> Result<T> {
            match c.get(key) {
                None => Ok(default),
                Some(v) => v.parse().map_err(|_| DpdError::Header(format!("bad value {v:?} for {key}"))),
            }
        }
        let d = Self::default();
        Ok(Self {
            schedule: match c.get("sampler.schedule") {
                None => d.schedule,
                Some(v) => v.parse().map_err(|_| DpdError::Header(format!("bad schedule {v:?}")))?,
            },
            steps: field(c, "sampler.steps", d.steps)?,
            cfg_scale: field(c, "sampler.cfg_scale", d.cfg_scale)?,
            chunk_count: field(c, "sampler.chunk_count", d.chunk_count)?,
            frames: field(c, "sampler.frames", d.frames)?,
        })
    }
}

/// A model together with its sampler defaults and free-form metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DpdModel,
    pub sampler: SamplerDefaults,
    /// `meta.*` entries, without the prefix.
    pub metadata: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(model: DpdModel) -> Self {
        Self { model, sampler: SamplerDefaults::default(), metadata: Vec::new() }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut entries = vec![("kind".to_string(), "model".to_string())];
        entries.extend(self.model.config().to_pairs().into_iter().map(|(k, v)| (format!("config.{k}"), v)));
        entries.extend(self.sampler.to_pairs());
        entries.extend([
            ("optimizer.beta1", crate::training::ADAM_BETA1),
            ("optimizer.beta2", crate::training::ADAM_BETA2),
            ("optimizer.eps", crate::training::ADAM_EPS),
            ("optimizer.weight_decay", crate::training::WEIGHT_DECAY),
            ("optimizer.grad_clip", crate::training::GRAD_CLIP_NORM),
        ]
        .map(|(k, v)| (k.to_string(), format!("{v:?}"))));
        entries.push(("meta.creator".into(), format!("dpd {}", env!("CARGO_PKG_VERSION"))));
        entries.extend(self.metadata.iter().filter(|(k, _)| k != "creator").map(|(k, v)| (format!("meta.{k}"), v.clone())));
        let store = self.model.store();
        let tensors = store
            .ids()
            .map(|id| Tensor::new(store.name(id), Dtype::F32, store.shape(id).to_vec(), store.value(id).iter().copied().collect()))
            .collect::<Result<_>>()?;
        Ok(Container { entries, tensors })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        match c.get("kind") {
            Some("model") => {}
            other => return Err(DpdError::Header(format!("expected a model container, found kind {other:?}"))),
        }
        let mut config = DpdConfig::default();
        for (k, v) in &c.entries {
            if let Some(key) = k.strip_prefix("config.") {
                if !config.set(key, v).map_err(|e| DpdError::Header(e.to_string()))? {
                    return Err(DpdError::Header(format!("unknown config key {key:?}")));
                }
            }
        }
        config.validate()?;
        let mut store = ParamStore::new();
        for t in &c.tensors {
            if t.dtype != Dtype::F32 {
                return Err(DpdError::Header(format!("parameter {} stored as {}, expected f32", t.name, t.dtype.name())));
            }
            let (rows, cols) = match t.shape[..] {
                [n] => (1, n),
                [r, c] => (r, c),
                _ => return Err(DpdError::Shape(format!("parameter {} has rank {}", t.name, t.shape.len()))),
            };
            let value = Array2::from_shape_vec((rows, cols), t.data.clone()).expect("length checked on load");
            store.insert(&t.name, t.shape.clone(), value)?;
        }
        let model = DpdModel::from_store(config, &store)?;
        let metadata = c
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Self { model, sampler: SamplerDefaults::from_container(c)?, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

pub fn save_checkpoint(model: &DpdModel, path: &Path) -> Result<()> {
    Checkpoint::new(model.clone()).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<DpdModel> {
    Ok(Checkpoint::load(path)?.model)
}

/// Latent as a single-tensor container (lossless f64).
pub fn latent_container(z: &LatentSeq) -> Container {
    Container {
        entries: vec![("kind".into(), "latent".into())],
        tensors: vec![Tensor {
            name: "latent".into(),
            dtype: Dtype::F64,
            shape: vec![z.frames(), z.channels()],
            data: z.data().iter().copied().collect(),
        }],
    }
}

pub fn latent_from_container(c: &Container) -> Result<LatentSeq> {
    let t = c
        .tensor("latent")
        .ok_or_else(|| DpdError::Header("container holds no `latent` tensor".into()))?;
    let [frames, channels] = t.shape[..] else {
        return Err(DpdError::Shape(format!("latent tensor has shape {:?}", t.shape)));
    };
    LatentSeq::new(Array2::from_shape_vec((frames, channels), t.data.clone()).expect("length checked on load"))
}

/// One row per frame, 17 significant digits, with a `d0,d1,…` header.
pub fn latent_to_csv(z: &LatentSeq) -> String {
    let header: Vec<String> = (0..z.channels()).map(|d| format!("d{d}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for row in z.data().rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn latent_from_csv(text: &str) -> Result<LatentSeq> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with('d')) {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>().map_err(|_| DpdError::Input(format!("line {}: bad number {c:?}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(DpdError::Input(format!("line {}: {} columns, expected {}", i + 1, row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DpdError::Input("no latent rows".into()));
    }
    let (frames, channels) = (rows.len(), rows[0].len());
    LatentSeq::new(Array2::from_shape_vec((frames, channels), rows.concat()).expect("rectangular"))
}

/// Writes a latent as CSV when `path` ends in `.csv`, else as a container.
pub fn save_latent(z: &LatentSeq, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        write_atomic(path, latent_to_csv(z).as_bytes())
    } else {
        latent_container(z).save(path)
    }
}

/// Reads either format, recognizing the container by its magic.
pub fn load_latent(path: &Path) -> Result<LatentSeq> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(&MAGIC) {
        latent_from_container(&Container::from_bytes(&bytes)?)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| DpdError::Input(format!("{} is neither a container nor UTF-8 CSV", path.display())))?;
        latent_from_csv(&text)
    }
}

/// Integers separated by whitespace or commas; `#` starts a comment.
pub fn parse_tokens(text: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("");
        for item in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()) {
            out.push(item.parse().map_err(|_| DpdError::Token(format!("bad token id {item:?}")))?);
        }
    }
    Ok(out)
}

pub fn tokens_to_text(tokens: &[u32]) -> String {
    let items: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
    items.join(" ") + "\n"
}

/// One `0`/`1` per frame, separated like tokens.
pub fn parse_mask(text: &str) -> Result<Vec<bool>> {
    parse_tokens(text)
        .map_err(|e| DpdError::Input(e.to_string()))?
        .into_iter()
        .map(|v| match v {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(DpdError::Input(format!("mask entries must be 0 or 1, got {v}"))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> DpdModel {
        DpdModel::new(DpdConfig { latent_dim: 2, hidden_dim: 8, block_count: 2, segment_size: 4, vocab: 5, heads: 2, ..Default::default() }).unwrap()
    }

    fn fnv_oracle(bytes: &[u8]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    #[test]
    fn fnv_matches_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
        let data: Vec<u8> = (0..=255).collect();
        assert_eq!(fnv1a64(&data), fnv_oracle(&data));
    }

    #[test]
    fn model_round_trip_is_exact_at_f32() {
        let model = small_model();
        let mut ck = Checkpoint::new(model.clone());
        ck.metadata.push(("steps".into(), "12".into()));
        let bytes = ck.to_container().unwrap().to_bytes().unwrap();
        let back = Checkpoint::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.model.config(), model.config());
        assert_eq!(back.sampler, ck.sampler);
        assert!(back.metadata.contains(&("steps".to_string(), "12".to_string())));
        for id in model.store().ids() {
            let saved: Vec<f64> = model.store().value(id).iter().map(|&v| v as f32 as f64).collect();
            let loaded: Vec<f64> = back.model.store().value(back.model.store().id(model.store().name(id)).unwrap()).iter().copied().collect();
            assert_eq!(saved, loaded, "{}", model.store().name(id));
        }
        // A second save of the loaded model is byte-identical.
        let again = Checkpoint { model: back.model, sampler: back.sampler, metadata: vec![("steps".into(), "12".into())] };
        assert_eq!(again.to_container().unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn empty_container_round_trips() {
        let c = Container { entries: vec![("kind".into(), "empty".into())], tensors: vec![] };
        let bytes = c.to_bytes().unwrap();
        assert_eq!(bytes.len(), PREAMBLE + "kind = empty\n".len() + DIGEST_LEN);
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn distinct_diagnostics() {
        let bytes = latent_container(&LatentSeq::zeros(3, 2)).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(DpdError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Container::from_bytes(&bad), Err(DpdError::VersionMismatch { found: 9, .. })));
        assert!(matches!(Container::from_bytes(&bytes[..10]), Err(DpdError::Truncated(_))));
        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 12]), Err(DpdError::Truncated(_))));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - DIGEST_LEN - 1] ^= 0x40;
        assert!(matches!(Container::from_bytes(&bad), Err(DpdError::DigestMismatch { .. })));
        // A model header whose tensor shape disagrees with the config.
        let mut c = Checkpoint::new(small_model()).to_container().unwrap();
        c.entries.iter_mut().find(|(k, _)| k == "config.hidden_dim").unwrap().1 = "12".into();
        assert!(Checkpoint::from_container(&c).is_err());
    }

    #[test]
    fn every_single_byte_payload_corruption_is_detected() {
        let bytes = Checkpoint::new(small_model()).to_container().unwrap().to_bytes().unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let start = PREAMBLE + header_len;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let mut bad = bytes.clone();
            let pos = rng.gen_range(start..bytes.len());
            bad[pos] ^= rng.gen_range(1..=255u8);
            assert!(Container::from_bytes(&bad).is_err(), "byte {pos}");
        }
    }

    #[test]
    fn latent_formats_are_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = LatentSeq::gaussian(7, 3, &mut rng);
        assert_eq!(latent_from_csv(&latent_to_csv(&z)).unwrap(), z);
        assert_eq!(latent_from_container(&Container::from_bytes(&latent_container(&z).to_bytes().unwrap()).unwrap()).unwrap(), z);
        let dir = tempfile::tempdir().unwrap();
        for name in ["z.csv", "z.dpd1"] {
            let p = dir.path().join(name);
            save_latent(&z, &p).unwrap();
            assert_eq!(load_latent(&p).unwrap(), z);
        }
        assert!(latent_from_csv("1,2\n3\n").is_err());
    }

    #[test]
    fn token_and_mask_text() {
        assert_eq!(parse_tokens("1 2,3\n# c\n4 # tail\n").unwrap(), vec![1, 2, 3, 4]);
        assert!(parse_tokens("1 x").is_err());
        assert_eq!(parse_tokens(&tokens_to_text(&[5, 6])).unwrap(), vec![5, 6]);
        assert_eq!(parse_mask("0 1 1 0").unwrap(), vec![false, true, true, false]);
        assert!(parse_mask("2").is_err());
    }

    #[test]
    fn file_round_trip_via_atomic_write() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dpd1");
        let model = small_model();
        save_checkpoint(&model, &p).unwrap();
        save_checkpoint(&model, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.store().len(), model.store().len());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
