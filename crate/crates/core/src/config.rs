//! Model and training hyperparameters with the `paper` and `tiny` presets,
//! stored as a flat `key = value` text file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{BicaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Vo,
    VoKnn,
    VoO4c,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vo, Variant::VoKnn, Variant::VoO4c, Variant::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vo => "vo",
            Variant::VoKnn => "vo+knn",
            Variant::VoO4c => "vo+o4c",
            Variant::Full => "full",
        }
    }
}

impl FromStr for Variant {
    type Err = BicaError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                BicaError::Config(format!(
                    "unknown variant '{s}' (expected vo, vo+knn, vo+o4c or full)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub preset: String,
    pub seed: u64,

    // input and tokenizer
    pub in_feats: usize,
    pub n_tokens: usize,
    pub tok_radius: f64,
    pub tok_nsample: usize,
    pub tok_hidden: usize,

    // encoder
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub enc_mask_radius: f64,
    pub n_enc: usize,
    pub enc_ds_radius: f64,
    pub enc_ds_nsample: usize,
    pub enc_plain_layers: usize,

    // queries
    pub n_inst: usize,
    pub inst_radius: f64,
    pub inst_nsample: usize,
    pub n_ctx_seeds: usize,
    pub n_ctx: usize,
    pub ctx_radius: f64,
    pub ctx_nsample: usize,

    // decoders
    pub dec_layers: usize,
    pub pe_sigma: f64,
    pub pe_norm: f64,

    // bica and captioning
    pub variant: Variant,
    pub knn_k: usize,
    pub cap_layers: usize,
    pub cap_heads: usize,
    pub max_len: usize,
    pub beam: usize,

    // heads
    pub size_scale: f64,
    pub iou_head: bool,

    // losses
    pub alpha: [f64; 4],
    pub beta: [f64; 3],
    pub noobj_weight: f64,
    pub vote_margin: f64,

    // optimization
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub s1_lr: f64,
    pub s1_min_lr: f64,
    pub s2_det_lr: f64,
    pub s2_cap_lr: f64,
    pub s2_cap_min_lr: f64,
    pub s3_lr: f64,
    pub epochs: [usize; 3],
    pub batch: [usize; 3],
    pub log_every: usize,

    // evaluation
    pub nms_iou: f64,
    pub obj_threshold: f64,
}

impl Config {
    pub fn paper() -> Self {
        Config {
            preset: "paper".into(),
            seed: 0,
            in_feats: 3,
            n_tokens: 2048,
            tok_radius: 0.2,
            tok_nsample: 64,
            tok_hidden: 128,
            d_model: 256,
            n_heads: 4,
            ffn_mult: 4,
            enc_mask_radius: 0.4,
            n_enc: 1024,
            enc_ds_radius: 0.4,
            enc_ds_nsample: 32,
            enc_plain_layers: 2,
            n_inst: 256,
            inst_radius: 0.3,
            inst_nsample: 16,
            n_ctx_seeds: 512,
            n_ctx: 64,
            ctx_radius: 1.2,
            ctx_nsample: 64,
            dec_layers: 8,
            pe_sigma: 1.0,
            pe_norm: 10.0,
            variant: Variant::Full,
            knn_k: 16,
            cap_layers: 2,
            cap_heads: 4,
            max_len: 24,
            beam: 5,
            size_scale: 1.0,
            iou_head: false,
            alpha: [10.0, 1.0, 5.0, 1.0],
            beta: [10.0, 1.0, 5.0],
            noobj_weight: 0.1,
            vote_margin: 0.05,
            weight_decay: 0.1,
            clip_norm: 0.1,
            s1_lr: 5e-4,
            s1_min_lr: 1e-6,
            s2_det_lr: 1e-6,
            s2_cap_lr: 1e-4,
            s2_cap_min_lr: 1e-6,
            s3_lr: 1e-6,
            epochs: [1080, 720, 180],
            batch: [8, 8, 2],
            log_every: 1,
            nms_iou: 0.5,
            obj_threshold: 0.5,
        }
    }

    pub fn tiny() -> Self {
        Config {
            preset: "tiny".into(),
            n_tokens: 512,
            tok_radius: 0.5,
            tok_nsample: 8,
            tok_hidden: 32,
            d_model: 64,
            n_enc: 256,
            enc_ds_radius: 0.6,
            enc_ds_nsample: 8,
            n_inst: 64,
            n_ctx_seeds: 128,
            n_ctx: 16,
            ctx_nsample: 32,
            dec_layers: 2,
            knn_k: 4,
            max_len: 16,
            beam: 3,
            s1_lr: 1e-3,
            s1_min_lr: 1e-4,
            s2_det_lr: 1e-5,
            s2_cap_lr: 2e-3,
            s2_cap_min_lr: 1e-4,
            s3_lr: 1e-5,
            epochs: [400, 600, 200],
            batch: [1, 4, 4],
            log_every: 50,
            ..Config::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Config::paper()),
            "tiny" => Ok(Config::tiny()),
            _ => Err(BicaError::Config(format!(
                "unknown preset '{name}' (expected paper or tiny)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BicaError::Config(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.cap_heads == 0 || !self.d_model.is_multiple_of(self.cap_heads) {
            return bad(format!(
                "d_model {} not divisible by cap_heads {}",
                self.d_model, self.cap_heads
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return bad("d_model must be even for the Fourier encoding".into());
        }
        if self.n_enc > self.n_tokens {
            return bad(format!(
                "n_enc {} exceeds n_tokens {}",
                self.n_enc, self.n_tokens
            ));
        }
        if self.n_inst > self.n_enc
            || self.n_ctx_seeds > self.n_enc
            || self.n_ctx > self.n_ctx_seeds
        {
            return bad(
                "query counts must satisfy n_inst, n_ctx_seeds <= n_enc and n_ctx <= n_ctx_seeds"
                    .into(),
            );
        }
        if self.knn_k == 0 || self.knn_k > self.n_ctx {
            return bad(format!(
                "knn_k {} must be in 1..={}",
                self.knn_k, self.n_ctx
            ));
        }
        if self.dec_layers == 0 || self.cap_layers == 0 || self.beam == 0 || self.max_len == 0 {
            return bad("dec_layers, cap_layers, beam and max_len must be positive".into());
        }
        if self.batch.contains(&0) {
            return bad("batch sizes must be positive".into());
        }
        for r in [
            self.tok_radius,
            self.enc_ds_radius,
            self.inst_radius,
            self.ctx_radius,
        ] {
            if !(r > 0.0) {
                return bad("radii must be positive".into());
            }
        }
        Ok(())
    }

    /// Ordered `(key, value)` pairs; the order is stable and used for hashing.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        fn list<T: ToString>(v: &[T]) -> String {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        }
        vec![
            ("preset", self.preset.clone()),
            ("seed", self.seed.to_string()),
            ("in_feats", self.in_feats.to_string()),
            ("n_tokens", self.n_tokens.to_string()),
            ("tok_radius", self.tok_radius.to_string()),
            ("tok_nsample", self.tok_nsample.to_string()),
            ("tok_hidden", self.tok_hidden.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("enc_mask_radius", self.enc_mask_radius.to_string()),
            ("n_enc", self.n_enc.to_string()),
            ("enc_ds_radius", self.enc_ds_radius.to_string()),
            ("enc_ds_nsample", self.enc_ds_nsample.to_string()),
            ("enc_plain_layers", self.enc_plain_layers.to_string()),
            ("n_inst", self.n_inst.to_string()),
            ("inst_radius", self.inst_radius.to_string()),
            ("inst_nsample", self.inst_nsample.to_string()),
            ("n_ctx_seeds", self.n_ctx_seeds.to_string()),
            ("n_ctx", self.n_ctx.to_string()),
            ("ctx_radius", self.ctx_radius.to_string()),
            ("ctx_nsample", self.ctx_nsample.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("pe_sigma", self.pe_sigma.to_string()),
            ("pe_norm", self.pe_norm.to_string()),
            ("variant", self.variant.as_str().to_string()),
            ("knn_k", self.knn_k.to_string()),
            ("cap_layers", self.cap_layers.to_string()),
            ("cap_heads", self.cap_heads.to_string()),
            ("max_len", self.max_len.to_string()),
            ("beam", self.beam.to_string()),
            ("size_scale", self.size_scale.to_string()),
            ("iou_head", self.iou_head.to_string()),
            ("alpha", list(&self.alpha)),
            ("beta", list(&self.beta)),
            ("noobj_weight", self.noobj_weight.to_string()),
            ("vote_margin", self.vote_margin.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("s1_lr", self.s1_lr.to_string()),
            ("s1_min_lr", self.s1_min_lr.to_string()),
            ("s2_det_lr", self.s2_det_lr.to_string()),
            ("s2_cap_lr", self.s2_cap_lr.to_string()),
            ("s2_cap_min_lr", self.s2_cap_min_lr.to_string()),
            ("s3_lr", self.s3_lr.to_string()),
            ("epochs", list(&self.epochs)),
            ("batch", list(&self.batch)),
            ("log_every", self.log_every.to_string()),
            ("nms_iou", self.nms_iou.to_string()),
            ("obj_threshold", self.obj_threshold.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| BicaError::Config(format!("bad value '{v}' for {key}")))
        }
        fn arr<T: FromStr + Copy + Default, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
            let parts: Vec<&str> = v.split(',').collect();
            if parts.len() != N {
                return Err(BicaError::Config(format!(
                    "{key} expects {N} comma-separated values"
                )));
            }
            let mut out = [T::default(); N];
            for (o, s) in out.iter_mut().zip(parts) {
                *o = p(key, s)?;
            }
            Ok(out)
        }
        let v = value.trim();
        match key {
            "preset" => self.preset = v.to_string(),
            "seed" => self.seed = p(key, v)?,
            "in_feats" => self.in_feats = p(key, v)?,
            "n_tokens" => self.n_tokens = p(key, v)?,
            "tok_radius" => self.tok_radius = p(key, v)?,
            "tok_nsample" => self.tok_nsample = p(key, v)?,
            "tok_hidden" => self.tok_hidden = p(key, v)?,
            "d_model" => self.d_model = p(key, v)?,
            "n_heads" => self.n_heads = p(key, v)?,
            "ffn_mult" => self.ffn_mult = p(key, v)?,
            "enc_mask_radius" => self.enc_mask_radius = p(key, v)?,
            "n_enc" => self.n_enc = p(key, v)?,
            "enc_ds_radius" => self.enc_ds_radius = p(key, v)?,
            "enc_ds_nsample" => self.enc_ds_nsample = p(key, v)?,
            "enc_plain_layers" => self.enc_plain_layers = p(key, v)?,
            "n_inst" => self.n_inst = p(key, v)?,
            "inst_radius" => self.inst_radius = p(key, v)?,
            "inst_nsample" => self.inst_nsample = p(key, v)?,
            "n_ctx_seeds" => self.n_ctx_seeds = p(key, v)?,
            "n_ctx" => self.n_ctx = p(key, v)?,
            "ctx_radius" => self.ctx_radius = p(key, v)?,
            "ctx_nsample" => self.ctx_nsample = p(key, v)?,
            "dec_layers" => self.dec_layers = p(key, v)?,
            "pe_sigma" => self.pe_sigma = p(key, v)?,
            "pe_norm" => self.pe_norm = p(key, v)?,
            "variant" => self.variant = v.parse()?,
            "knn_k" => self.knn_k = p(key, v)?,
            "cap_layers" => self.cap_layers = p(key, v)?,
            "cap_heads" => self.cap_heads = p(key, v)?,
            "max_len" => self.max_len = p(key, v)?,
            "beam" => self.beam = p(key, v)?,
            "size_scale" => self.size_scale = p(key, v)?,
            "iou_head" => self.iou_head = p(key, v)?,
            "alpha" => self.alpha = arr(key, v)?,
            "beta" => self.beta = arr(key, v)?,
            "noobj_weight" => self.noobj_weight = p(key, v)?,
            "vote_margin" => self.vote_margin = p(key, v)?,
            "weight_decay" => self.weight_decay = p(key, v)?,
            "clip_norm" => self.clip_norm = p(key, v)?,
            "s1_lr" => self.s1_lr = p(key, v)?,
            "s1_min_lr" => self.s1_min_lr = p(key, v)?,
            "s2_det_lr" => self.s2_det_lr = p(key, v)?,
            "s2_cap_lr" => self.s2_cap_lr = p(key, v)?,
            "s2_cap_min_lr" => self.s2_cap_min_lr = p(key, v)?,
            "s3_lr" => self.s3_lr = p(key, v)?,
            "epochs" => self.epochs = arr(key, v)?,
            "batch" => self.batch = arr(key, v)?,
            "log_every" => self.log_every = p(key, v)?,
            "nms_iou" => self.nms_iou = p(key, v)?,
            "obj_threshold" => self.obj_threshold = p(key, v)?,
            _ => return Err(BicaError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses a config file. A `preset` line, if present, must come first and
    /// selects the base values; other keys override it. Blank lines and `#`
    /// comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg: Option<Config> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                BicaError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                if cfg.is_some() {
                    return Err(BicaError::Config("preset must be the first key".into()));
                }
                cfg = Some(Config::preset(v)?);
                continue;
            }
            cfg.get_or_insert_with(Config::tiny).set(k, v)?;
        }
        let cfg = cfg.unwrap_or_else(Config::tiny);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Config::from_text(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical text form, first 16 hex digits.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// Optimizer steps in a stage for a dataset of `n_scenes`.
    pub fn stage_steps(&self, stage: usize, n_scenes: usize) -> usize {
        let per_epoch = n_scenes.div_ceil(self.batch[stage - 1]);
        self.epochs[stage - 1] * per_epoch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_constants() {
        let c = Config::paper();
        assert_eq!(
            (c.n_enc, c.d_model, c.n_inst, c.n_ctx, c.dec_layers),
            (1024, 256, 256, 64, 8)
        );
        assert_eq!(
            (c.inst_radius, c.ctx_radius, c.inst_nsample, c.ctx_nsample),
            (0.3, 1.2, 16, 64)
        );
        assert_eq!(c.beam, 5);
        assert_eq!(c.alpha, [10.0, 1.0, 5.0, 1.0]);
        assert_eq!(c.beta, [10.0, 1.0, 5.0]);
        assert_eq!(
            (c.s1_lr, c.s1_min_lr, c.weight_decay, c.clip_norm),
            (5e-4, 1e-6, 0.1, 0.1)
        );
        assert_eq!((c.epochs, c.batch), ([1080, 720, 180], [8, 8, 2]));
        assert_eq!(c.knn_k, 16);
        c.validate().unwrap();
        Config::tiny().validate().unwrap();
    }

    #[test]
    fn text_round_trip_and_overrides() {
        let c = Config::tiny();
        assert_eq!(Config::from_text(&c.to_text()).unwrap(), c);
        let p =
            Config::from_text("preset = paper\nbeam = 3 # narrower\nvariant = vo+knn\n").unwrap();
        assert_eq!(p.beam, 3);
        assert_eq!(p.variant, Variant::VoKnn);
        assert_eq!(p.d_model, 256);
        assert!(Config::from_text("beam = 3\npreset = paper\n").is_err());
        assert!(Config::from_text("nope = 1\n").is_err());
        assert!(Config::from_text("n_heads = 5\n").is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let a = Config::tiny();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 9;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn variants_parse() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("o4c".parse::<Variant>().is_err());
    }
}
