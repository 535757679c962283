//! Dataset container and its binary file format.
//!
//! Layout (little-endian): magic `BICA`, u32 format version, u32 scene count,
//! u32 vocabulary byte length and the newline-delimited vocabulary, then per
//! scene: u64 seed, u32 point count, u32 feature width, f32 xyz, f32 features,
//! u32 box count, and per box f32 center[3], f32 size[3], u32 class, u32
//! reference count, and per reference u32 length followed by u16 token ids.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::Reader;
use crate::error::{BicaError, Result};
use crate::geom::Box3D;
use crate::numerics::Tensor;

use super::scene::{make_scene_with, SceneOptions, SceneSample};
use super::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"BICA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub scenes: Vec<SceneSample>,
}

impl Dataset {
    pub fn n_objects(&self) -> usize {
        self.scenes.iter().map(|s| s.boxes.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.extend_from_slice(&(self.scenes.len() as u32).to_le_bytes());
        let vt = self.vocab.to_text();
        w.extend_from_slice(&(vt.len() as u32).to_le_bytes());
        w.extend_from_slice(vt.as_bytes());
        let f32s = |w: &mut Vec<u8>, xs: &[f32]| {
            xs.iter()
                .for_each(|x| w.extend_from_slice(&x.to_le_bytes()))
        };
        for s in &self.scenes {
            w.extend_from_slice(&s.seed.to_le_bytes());
            w.extend_from_slice(&(s.xyz.rows() as u32).to_le_bytes());
            w.extend_from_slice(&(s.feats.cols() as u32).to_le_bytes());
            f32s(&mut w, s.xyz.data());
            f32s(&mut w, s.feats.data());
            w.extend_from_slice(&(s.boxes.len() as u32).to_le_bytes());
            for (b, refs) in s.boxes.iter().zip(&s.captions) {
                f32s(&mut w, &b.center);
                f32s(&mut w, &b.size);
                w.extend_from_slice(&(b.class_id as u32).to_le_bytes());
                w.extend_from_slice(&(refs.len() as u32).to_le_bytes());
                for r in refs {
                    w.extend_from_slice(&(r.len() as u32).to_le_bytes());
                    r.iter()
                        .for_each(|&t| w.extend_from_slice(&(t as u16).to_le_bytes()));
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        if r.take(4)? != MAGIC {
            return Err(BicaError::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(BicaError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let n_scenes = r.u32()? as usize;
        let vlen = r.u32()? as usize;
        let vtext = std::str::from_utf8(r.take(vlen)?)
            .map_err(|_| BicaError::Format("vocabulary is not UTF-8".into()))?;
        let vocab = Vocabulary::from_text(vtext)?;
        let mut scenes = Vec::with_capacity(n_scenes.min(1 << 16));
        for _ in 0..n_scenes {
            let seed = r.u64()?;
            let n = r.u32()? as usize;
            let f = r.u32()? as usize;
            let xyz = Tensor::new(vec![n, 3], r.f32s(n * 3)?)?;
            let feats = Tensor::new(vec![n, f], r.f32s(n * f)?)?;
            let nb = r.u32()? as usize;
            let mut boxes = Vec::with_capacity(nb.min(64));
            let mut captions = Vec::with_capacity(nb.min(64));
            for _ in 0..nb {
                let c = r.f32s(3)?;
                let s = r.f32s(3)?;
                let class = r.u32()? as usize;
                boxes.push(Box3D::new([c[0], c[1], c[2]], [s[0], s[1], s[2]], class));
                let nr = r.u32()? as usize;
                let mut refs = Vec::with_capacity(nr.min(64));
                for _ in 0..nr {
                    let len = r.u32()? as usize;
                    let toks = (0..len)
                        .map(|_| r.u16().map(usize::from))
                        .collect::<Result<Vec<_>>>()?;
                    if let Some(&t) = toks.iter().find(|&&t| t >= vocab.len()) {
                        return Err(BicaError::Format(format!(
                            "token id {t} outside vocabulary"
                        )));
                    }
                    refs.push(toks);
                }
                captions.push(refs);
            }
            scenes.push(SceneSample {
                seed,
                xyz,
                feats,
                boxes,
                captions,
            });
        }
        if !r.at_end() {
            return Err(BicaError::Format("trailing bytes after last scene".into()));
        }
        Ok(Dataset { vocab, scenes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

/// `n_scenes` scenes with object counts drawn uniformly from `min_obj..=max_obj`.
pub fn generate_dataset(
    seed: u64,
    n_scenes: usize,
    min_obj: usize,
    max_obj: usize,
    opts: &SceneOptions,
) -> Result<Dataset> {
    if min_obj < 2 || max_obj > super::scene::MAX_OBJECTS || min_obj > max_obj {
        return Err(BicaError::Invalid(format!(
            "object range {min_obj}..={max_obj} must lie within 2..={}",
            super::scene::MAX_OBJECTS
        )));
    }
    let scenes = (0..n_scenes)
        .map(|i| {
            let s = scene_seed(seed, i);
            let n = min_obj + (s % (max_obj - min_obj + 1) as u64) as usize;
            make_scene_with(s, n, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        vocab: Vocabulary::standard(),
        scenes,
    })
}
