//! Checkpoint files: configuration snapshot, parameters, optimizer state and
//! training progress.
//!
//! Layout (little-endian): magic `BICK`, u32 format version, config text,
//! vocabulary text, u32 class count, u32 completed stage, u32 current stage,
//! u64 steps done in the current stage, u64 global step, u32 boundary count
//! with (u32 stage, u64 global step) pairs, u32 parameter count and per
//! parameter name, u8 group, u32 rank, u32 dims, f32 values; then a u8 flag
//! for optimizer state followed by its hyperparameters (5 × f64), u64 step
//! count and the first and second moments in parameter order. Strings are a
//! u32 byte length followed by UTF-8.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::config::Config;
use crate::error::{BicaError, Result};
use crate::numerics::{AdamWConfig, OptimizerState, ParamGroup, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BICK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub vocab_text: String,
    pub n_class: usize,
    /// Last fully completed stage (0 before stage 1 ends).
    pub completed_stage: u32,
    /// Stage in progress (equal to `completed_stage` at a boundary).
    pub stage: u32,
    pub stage_step: u64,
    pub global_step: u64,
    /// `(stage, global step at its end)` for every completed stage.
    pub boundaries: Vec<(u32, u64)>,
    pub params: Vec<ParamRecord>,
    pub optimizer: Option<OptimizerState>,
}

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Detector => 0,
        ParamGroup::Caption => 1,
        ParamGroup::Fixed => 2,
    }
}

impl Checkpoint {
    pub fn config(&self) -> Result<Config> {
        Config::from_text(&self.config_text)
    }

    pub fn capture_params(store: &ParamStore) -> Vec<ParamRecord> {
        store
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                group: p.group,
                value: p.value.clone(),
            })
            .collect()
    }

    /// Copies the stored values into `store`, which must hold the same
    /// parameters in the same order with the same shapes.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(BicaError::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (rec, p) in self.params.iter().zip(store.iter_mut()) {
            if rec.name != p.name || rec.value.shape() != p.value.shape() || rec.group != p.group {
                return Err(BicaError::Format(format!(
                    "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                    rec.name,
                    rec.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = rec.value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.string(&self.config_text);
        w.string(&self.vocab_text);
        w.u32(self.n_class as u32);
        w.u32(self.completed_stage);
        w.u32(self.stage);
        w.u64(self.stage_step);
        w.u64(self.global_step);
        w.u32(self.boundaries.len() as u32);
        for &(s, g) in &self.boundaries {
            w.u32(s);
            w.u64(g);
        }
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.string(&p.name);
            w.u8(group_code(p.group));
            w.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                w.u32(d as u32);
            }
            w.f32s(p.value.data());
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                let c = o.config;
                for v in [c.beta1, c.beta2, c.eps, c.weight_decay, c.clip_norm] {
                    w.f64(v);
                }
                w.u64(o.step);
                for t in o.m.iter().chain(&o.v) {
                    w.f32s(t.data());
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(BicaError::Format(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(BicaError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config_text = r.string()?;
        let vocab_text = r.string()?;
        let n_class = r.u32()? as usize;
        let completed_stage = r.u32()?;
        let stage = r.u32()?;
        let stage_step = r.u64()?;
        let global_step = r.u64()?;
        let nb = r.u32()? as usize;
        let mut boundaries = Vec::with_capacity(nb.min(8));
        for _ in 0..nb {
            boundaries.push((r.u32()?, r.u64()?));
        }
        let np = r.u32()? as usize;
        let mut params = Vec::with_capacity(np.min(4096));
        for _ in 0..np {
            let name = r.string()?;
            let group = match r.u8()? {
                0 => ParamGroup::Detector,
                1 => ParamGroup::Caption,
                2 => ParamGroup::Fixed,
                g => return Err(BicaError::Format(format!("unknown parameter group {g}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| BicaError::Format("parameter size overflow".into()))?;
            let value = Tensor::new(shape, r.f32s(n)?)?;
            params.push(ParamRecord { name, group, value });
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let mut c = [0.0; 5];
                for v in &mut c {
                    *v = r.f64()?;
                }
                let config = AdamWConfig {
                    beta1: c[0],
                    beta2: c[1],
                    eps: c[2],
                    weight_decay: c[3],
                    clip_norm: c[4],
                };
                let step = r.u64()?;
                let mut read_all = || -> Result<Vec<Tensor<f32>>> {
                    params
                        .iter()
                        .map(|p| Tensor::new(p.value.shape().to_vec(), r.f32s(p.value.len())?))
                        .collect()
                };
                let m = read_all()?;
                let v = read_all()?;
                Some(OptimizerState { config, step, m, v })
            }
            f => return Err(BicaError::Format(format!("bad optimizer flag {f}"))),
        };
        if !r.at_end() {
            return Err(BicaError::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            config_text,
            vocab_text,
            n_class,
            completed_stage,
            stage,
            stage_step,
            global_step,
            boundaries,
            params,
            optimizer,
        })
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// Fails unless `cfg` equals the stored configuration; `force` downgrades
    /// the mismatch to acceptance of the stored one.
    pub fn check_config(&self, cfg: &Config, force: bool) -> Result<()> {
        let stored = self.config()?;
        if !force && stored.hash() != cfg.hash() {
            return Err(BicaError::Config(format!(
                "checkpoint config {} differs from requested config {} (use --force to override)",
                stored.hash(),
                cfg.hash()
            )));
        }
        Ok(())
    }
}
