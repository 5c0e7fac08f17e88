//! `.lvcs` corpus files and the scene-disjoint train/validation split.
//!
//! Layout (little-endian):
//!
//! ```text
//! "LVCS" | version u32 | n_scenes u32 | n_queries u32 | has_images u8
//! n_scenes  × (len u32 | scene payload [| 6 × f32 planes 3·448·896 if has_images])
//! n_queries × (len u32 | query payload)
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::query::{gen_query, QuerySample};
use super::scene::{gen_scene, render_view, BBox, ObjectClass, SceneObject, SceneSpec, VIEW_HEIGHT, VIEW_WIDTH};
use super::tables::{templates, NUM_VIEWS};
use crate::error::{Error, Result};
use crate::nn::params::{keyed_rng, ByteReader};

pub const CORPUS_MAGIC: &[u8; 4] = b"LVCS";
pub const CORPUS_VERSION: u32 = 1;

/// Validation share of scenes: 150 of 1500.
pub const DEFAULT_VAL_FRACTION: f64 = 150.0 / 1500.0;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub scenes: Vec<SceneSpec>,
    pub queries: Vec<QuerySample>,
}

impl Corpus {
    pub fn scene(&self, scene_id: u32) -> Option<&SceneSpec> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    pub fn scene_ids(&self) -> Vec<u32> {
        self.scenes.iter().map(|s| s.scene_id).collect()
    }

    /// Pairs every query with its scene, in query order.
    pub fn samples(&self) -> impl Iterator<Item = (&SceneSpec, &QuerySample)> {
        self.queries.iter().filter_map(move |q| self.scene(q.scene_id).map(|s| (s, q)))
    }

    pub fn to_bytes(&self, with_images: bool) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CORPUS_MAGIC);
        out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.scenes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.queries.len() as u32).to_le_bytes());
        out.push(with_images as u8);
        for s in &self.scenes {
            let rec = encode_scene(s);
            out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
            out.extend_from_slice(&rec);
            if with_images {
                for v in 0..NUM_VIEWS {
                    out.extend_from_slice(&render_view(s, v).pixels.to_le_bytes());
                }
            }
        }
        for q in &self.queries {
            let rec = encode_query(q);
            out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
            out.extend_from_slice(&rec);
        }
        out
    }

    /// Parses a corpus; stored image planes are checked against a re-render.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CORPUS_MAGIC {
            return Err(Error::Format("missing LVCS magic".into()));
        }
        let version = r.u32()?;
        if version != CORPUS_VERSION {
            return Err(Error::Format(format!("unsupported corpus version {version}")));
        }
        let n_scenes = r.u32()? as usize;
        let n_queries = r.u32()? as usize;
        let with_images = r.u8()? != 0;
        let mut scenes = Vec::with_capacity(n_scenes);
        for _ in 0..n_scenes {
            let len = r.u32()? as usize;
            let s = decode_scene(r.take(len)?)?;
            if with_images {
                for v in 0..NUM_VIEWS {
                    let plane = r.take(3 * VIEW_HEIGHT * VIEW_WIDTH * 4)?;
                    if plane != render_view(&s, v).pixels.to_le_bytes().as_slice() {
                        return Err(Error::Format(format!(
                            "stored image of scene {} view {v} disagrees with its spec",
                            s.scene_id
                        )));
                    }
                }
            }
            scenes.push(s);
        }
        let mut queries = Vec::with_capacity(n_queries);
        for _ in 0..n_queries {
            let len = r.u32()? as usize;
            queries.push(decode_query(r.take(len)?)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in corpus".into()));
        }
        Ok(Self { scenes, queries })
    }

    pub fn save(&self, path: &Path, with_images: bool) -> Result<()> {
        std::fs::write(path, self.to_bytes(with_images)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn encode_scene(s: &SceneSpec) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&s.scene_id.to_le_bytes());
    b.extend_from_slice(&s.seed.to_le_bytes());
    for v in &s.views {
        b.extend_from_slice(&(v.len() as u32).to_le_bytes());
        for o in v {
            b.push(o.class.as_u8());
            for x in [o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h] {
                b.extend_from_slice(&x.to_le_bytes());
            }
            for c in o.color {
                b.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    b
}

fn decode_scene(bytes: &[u8]) -> Result<SceneSpec> {
    let mut r = ByteReader { bytes, pos: 0 };
    let scene_id = r.u32()?;
    let seed = r.u64()?;
    let mut views = Vec::with_capacity(NUM_VIEWS);
    for _ in 0..NUM_VIEWS {
        let n = r.u32()? as usize;
        let mut objs = Vec::with_capacity(n);
        for _ in 0..n {
            let class = ObjectClass::from_u8(r.u8()?)
                .ok_or_else(|| Error::Format("bad object class".into()))?;
            let bbox = BBox {
                x: r.u32()?,
                y: r.u32()?,
                w: r.u32()?,
                h: r.u32()?,
            };
            if !bbox.in_view_bounds() {
                return Err(Error::Format(format!("box {bbox:?} outside view")));
            }
            let color = [r.f32()?, r.f32()?, r.f32()?];
            objs.push(SceneObject { class, bbox, color });
        }
        views.push(objs);
    }
    Ok(SceneSpec {
        scene_id,
        seed,
        views,
    })
}

fn encode_query(q: &QuerySample) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&q.scene_id.to_le_bytes());
    b.extend_from_slice(&(q.template_id as u32).to_le_bytes());
    b.push(q.explicit as u8);
    b.push(q.label_bits());
    b.extend_from_slice(&(q.raw.len() as u32).to_le_bytes());
    b.extend_from_slice(q.raw.as_bytes());
    b.extend_from_slice(&(q.answer_ids.len() as u32).to_le_bytes());
    for id in &q.answer_ids {
        b.extend_from_slice(&id.to_le_bytes());
    }
    b
}

fn decode_query(bytes: &[u8]) -> Result<QuerySample> {
    let mut r = ByteReader { bytes, pos: 0 };
    let scene_id = r.u32()?;
    let template_id = r.u32()? as usize;
    let explicit = r.u8()? != 0;
    let bits = r.u8()?;
    let len = r.u32()? as usize;
    let raw = String::from_utf8(r.take(len)?.to_vec())
        .map_err(|_| Error::Format("query text is not utf-8".into()))?;
    let n = r.u32()? as usize;
    let answer_ids = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let mut view_labels = [false; NUM_VIEWS];
    for (i, l) in view_labels.iter_mut().enumerate() {
        *l = bits & (1 << i) != 0;
    }
    Ok(QuerySample {
        scene_id,
        template_id,
        raw,
        view_labels,
        answer_ids,
        explicit,
    })
}

/// Generates `n_scenes` scenes with `queries_per_scene` queries each and
/// splits them by scene into train and validation corpora.
pub fn build_corpus(
    n_scenes: usize,
    queries_per_scene: usize,
    split_seed: u64,
    val_fraction: f64,
) -> Result<(Corpus, Corpus)> {
    if n_scenes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 scenes, got {n_scenes}")));
    }
    let n_val = ((n_scenes as f64 * val_fraction).round() as usize).clamp(1, n_scenes - 1);
    let mut ids: Vec<u32> = (0..n_scenes as u32).collect();
    let mut rng = keyed_rng(split_seed, "split.", "scenes");
    ids.shuffle(&mut rng);
    let mut val_ids = ids[..n_val].to_vec();
    val_ids.sort_unstable();

    let n_templates = templates().len();
    let (mut train, mut val) = (Corpus::default(), Corpus::default());
    for id in 0..n_scenes as u32 {
        let spec = gen_scene(id, split_seed);
        let mut qrng = keyed_rng(split_seed, "queries.", &id.to_string());
        let target = if val_ids.binary_search(&id).is_ok() { &mut val } else { &mut train };
        for _ in 0..queries_per_scene {
            let t = qrng.gen_range(0..n_templates);
            let qseed = qrng.gen::<u64>();
            target.queries.push(gen_query(&spec, t, qseed)?);
        }
        target.scenes.push(spec);
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_scene_disjoint_and_exact() {
        let (train, val) = build_corpus(40, 3, 9, DEFAULT_VAL_FRACTION).unwrap();
        let t = train.scene_ids();
        assert!(val.scene_ids().iter().all(|id| !t.contains(id)));
        assert_eq!(train.scenes.len() + val.scenes.len(), 40);
        assert_eq!(val.scenes.len(), 4);
        assert_eq!(train.queries.len() + val.queries.len(), 120);
        assert!(build_corpus(1, 3, 9, 0.1).is_err());
    }

    #[test]
    fn bytes_roundtrip_and_rebuild_is_identical() {
        let (train, _) = build_corpus(6, 4, 2, 0.2).unwrap();
        let bytes = train.to_bytes(false);
        assert_eq!(Corpus::from_bytes(&bytes).unwrap(), train);
        let (again, _) = build_corpus(6, 4, 2, 0.2).unwrap();
        assert_eq!(again.to_bytes(false), bytes);
        assert!(Corpus::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn image_planes_roundtrip() {
        let (_, val) = build_corpus(2, 1, 5, 0.5).unwrap();
        let bytes = val.to_bytes(true);
        assert_eq!(Corpus::from_bytes(&bytes).unwrap(), val);
    }
}
