//! Seeded parameter initialisation and the flat `LVLM` parameter file.
//!
//! File layout, all little-endian:
//!
//! ```text
//! magic "LVLM" | version u32 | record count u32
//! record := path_len u32 | path utf8 | rank u32 | dims u32 * rank | payload f32 * prod(dims)
//! ```
//!
//! Records are written in lexicographic path order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PARAM_MAGIC: &[u8; 4] = b"LVLM";
pub const PARAM_VERSION: u32 = 1;

/// Hyper-parameters of a transformer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 8 {
            return Err(Error::Config(format!("vocab_size {} < 8", self.vocab_size)));
        }
        if self.max_seq == 0 || self.d_ff == 0 {
            return Err(Error::Config("max_seq and d_ff must be >= 1".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Derives an independent generator for one parameter.
///
/// The stream is keyed by `(seed, role_tag, path)` through SHA-256, so it is
/// stable across runs and platforms and independent of initialisation order.
pub fn keyed_rng(seed: u64, role_tag: &str, path: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(role_tag.as_bytes());
    h.update([0u8]);
    h.update(path.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Uniform `[-scale, scale)` tensor drawn from the keyed stream.
pub fn seeded_tensor(seed: u64, role_tag: &str, path: &str, shape: &[usize], scale: f32) -> Tensor {
    let mut rng = keyed_rng(seed, role_tag, path);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

/// Named collection of tensors. Names carry the role prefix (`llm.`, `vit.`, ...).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Merges `other` into `self`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every `from*` entry to `to*`, keeping the suffix.
    pub fn rename_prefix(&self, from: &str, to: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| {
                    k.strip_prefix(from)
                        .map(|rest| (format!("{to}{rest}"), v.clone()))
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != PARAM_MAGIC {
            return Err(Error::Format("missing LVLM magic".into()));
        }
        let version = r.u32()?;
        if version != PARAM_VERSION {
            return Err(Error::Format(format!("unsupported param version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("param path is not utf-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized form.
    pub fn checksum(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        let mut p = ParamSet::new();
        for (n, t) in iter {
            p.insert(n, t);
        }
        p
    }
}

/// Writes the parameters of one pre-norm transformer layer under `prefix`.
pub(crate) fn init_layer(
    params: &mut ParamSet,
    seed: u64,
    role_tag: &str,
    prefix: &str,
    d: usize,
    d_ff: usize,
) {
    let s_in = (1.0 / d as f32).sqrt();
    let s_ff = (1.0 / d_ff as f32).sqrt();
    for w in ["wq", "wk", "wv", "wo"] {
        let path = format!("{prefix}{w}");
        params.insert(
            format!("{role_tag}{path}"),
            seeded_tensor(seed, role_tag, &path, &[d, d], s_in),
        );
    }
    params.insert(format!("{role_tag}{prefix}ln1.g"), Tensor::full(&[d], 1.0));
    params.insert(format!("{role_tag}{prefix}ln1.b"), Tensor::zeros(&[d]));
    params.insert(format!("{role_tag}{prefix}ln2.g"), Tensor::full(&[d], 1.0));
    params.insert(format!("{role_tag}{prefix}ln2.b"), Tensor::zeros(&[d]));
    let w1 = format!("{prefix}w1");
    let w2 = format!("{prefix}w2");
    params.insert(
        format!("{role_tag}{w1}"),
        seeded_tensor(seed, role_tag, &w1, &[d, d_ff], s_in),
    );
    params.insert(format!("{role_tag}{prefix}b1"), Tensor::zeros(&[d_ff]));
    params.insert(
        format!("{role_tag}{w2}"),
        seeded_tensor(seed, role_tag, &w2, &[d_ff, d], s_ff),
    );
    params.insert(format!("{role_tag}{prefix}b2"), Tensor::zeros(&[d]));
}

/// Parameters of a decoder-only language model described by `config`.
///
/// Names: `{role}tok_emb`, `{role}pos_emb`, `{role}layer{i}.*`, `{role}ln_f.{g,b}`,
/// `{role}lm_head`.
pub fn seeded_init(config: &ModelConfig, role_tag: &str) -> Result<ParamSet> {
    config.validate()?;
    let d = config.d_model;
    let seed = config.seed;
    let mut p = ParamSet::new();
    p.insert(
        format!("{role_tag}tok_emb"),
        seeded_tensor(seed, role_tag, "tok_emb", &[config.vocab_size, d], 1.0),
    );
    p.insert(
        format!("{role_tag}pos_emb"),
        seeded_tensor(seed, role_tag, "pos_emb", &[config.max_seq, d], 0.1),
    );
    for i in 0..config.n_layers {
        init_layer(&mut p, seed, role_tag, &format!("layer{i}."), d, config.d_ff);
    }
    p.insert(format!("{role_tag}ln_f.g"), Tensor::full(&[d], 1.0));
    p.insert(format!("{role_tag}ln_f.b"), Tensor::zeros(&[d]));
    p.insert(
        format!("{role_tag}lm_head"),
        seeded_tensor(seed, role_tag, "lm_head", &[d, config.vocab_size], (1.0 / d as f32).sqrt()),
    );
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            vocab_size: 10,
            max_seq: 6,
            seed,
        }
    }

    #[test]
    fn keyed_streams_are_reproducible() {
        let a = seeded_tensor(7, "vit.", "layer0.wq", &[4, 4], 1.0);
        let b = seeded_tensor(7, "vit.", "layer0.wq", &[4, 4], 1.0);
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    }

    #[test]
    fn keyed_streams_differ_by_tag_and_seed() {
        let a = seeded_tensor(7, "", "a", &[4], 1.0);
        let b = seeded_tensor(7, "", "b", &[4], 1.0);
        assert_ne!(a.data()[0], b.data()[0]);
        let c = seeded_tensor(8, "", "a", &[4], 1.0);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(1);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = cfg(1);
        c.vocab_size = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn file_roundtrip_and_corruption() {
        let p = seeded_init(&cfg(3), "llm.").unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"LVLM");
        let q = ParamSet::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert!(ParamSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamSet::from_bytes(&bad).is_err());
    }

    #[test]
    fn prefix_views() {
        let p = seeded_init(&cfg(3), "llm.").unwrap();
        let layer = p.with_prefix("llm.layer0.");
        assert_eq!(layer.len(), 12);
        let renamed = layer.rename_prefix("llm.layer0.", "toksel.layer.");
        assert!(renamed.contains("toksel.layer.wq"));
    }
}
