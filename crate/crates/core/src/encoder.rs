//! Scene encoder: set-abstraction tokenizer, one radius-masked transformer
//! layer, a set-abstraction downsample and plain transformer layers.

use std::sync::Arc;

use crate::config::Config;
use crate::geom::SetAbstraction;
use crate::numerics::{
    Activation, AttnMask, Graph, Init, LayerNorm, Mlp, MultiHeadAttention, Real, Tensor, Var,
};

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl EncoderLayer {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, heads: usize, ffn_mult: usize) -> Self {
        init.scoped(name, |i| EncoderLayer {
            ln1: LayerNorm::new(i, "ln1", d),
            attn: MultiHeadAttention::new(i, "attn", d, heads),
            ln2: LayerNorm::new(i, "ln2", d),
            ffn: Mlp::new(i, "ffn", &[d, d * ffn_mult, d], Activation::Gelu),
        })
    }

    /// Returns the block output and the attention node.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        mask: Option<Arc<AttnMask>>,
    ) -> (Var, Var) {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, h, mask);
        let x = g.add(x, a.out);
        let h = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, h);
        (g.add(x, f), a.attn)
    }
}

/// Encoded scene: token positions `p_enc[n_enc×3]` and features `f_enc[n_enc×d]`.
#[derive(Clone, Debug)]
pub struct SceneTokens {
    pub p_enc: Var,
    pub f_enc: Var,
    /// Rows of the tokenizer output kept by the downsample.
    pub kept: Vec<usize>,
    pub token_xyz: Var,
    pub attn: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SceneEncoder {
    pub tokenizer: SetAbstraction,
    pub masked: EncoderLayer,
    pub mask_radius: f64,
    pub downsample: SetAbstraction,
    pub plain: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

impl SceneEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &Config) -> Self {
        let d = cfg.d_model;
        init.scoped("encoder", |i| SceneEncoder {
            tokenizer: SetAbstraction::new(
                i,
                "tokenizer",
                cfg.n_tokens,
                cfg.tok_radius,
                cfg.tok_nsample,
                cfg.in_feats,
                &[cfg.tok_hidden, d],
            ),
            masked: EncoderLayer::new(i, "masked", d, cfg.n_heads, cfg.ffn_mult),
            mask_radius: cfg.enc_mask_radius,
            downsample: SetAbstraction::new(
                i,
                "downsample",
                cfg.n_enc,
                cfg.enc_ds_radius,
                cfg.enc_ds_nsample,
                d,
                &[d],
            ),
            plain: (0..cfg.enc_plain_layers)
                .map(|k| EncoderLayer::new(i, &format!("plain{k}"), d, cfg.n_heads, cfg.ffn_mult))
                .collect(),
            norm: LayerNorm::new(i, "norm", d),
        })
    }

    /// Tokens `(xyz, feats)` from raw points.
    pub fn tokenize<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        xyz: Var,
        feats: Option<Var>,
    ) -> (Var, Var) {
        let out = self.tokenizer.forward(g, xyz, feats);
        (out.centers, out.feats)
    }

    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        token_xyz: Var,
        tokens: Var,
    ) -> SceneTokens {
        let pos: Tensor<f32> = g.value(token_xyz).cast();
        let mask = Arc::new(AttnMask::radius(&pos, &pos, self.mask_radius as f32));
        let (x, a0) = self.masked.forward(g, tokens, Some(mask));
        let ds = self.downsample.forward(g, token_xyz, Some(x));
        let mut attn = vec![a0];
        let mut h = ds.feats;
        for layer in &self.plain {
            let (o, a) = layer.forward(g, h, None);
            h = o;
            attn.push(a);
        }
        let f_enc = self.norm.forward(g, h);
        SceneTokens {
            p_enc: ds.centers,
            f_enc,
            kept: ds.center_idx,
            token_xyz,
            attn,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        xyz: Var,
        feats: Option<Var>,
    ) -> SceneTokens {
        let (tx, tf) = self.tokenize(g, xyz, feats);
        self.encode(g, tx, tf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamGroup, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(seed: u64, n: usize, f: usize) -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xyz = Tensor::new(
            vec![n, 3],
            (0..n * 3).map(|_| rng.gen_range(0.0..4.0)).collect(),
        )
        .unwrap();
        let feats = Tensor::new(
            vec![n, f],
            (0..n * f).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        (xyz, feats)
    }

    fn small_cfg() -> Config {
        Config {
            n_tokens: 64,
            n_enc: 32,
            d_model: 16,
            tok_hidden: 8,
            ..Config::tiny()
        }
    }

    #[test]
    fn tiny_preset_shapes() {
        let cfg = Config::tiny();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = SceneEncoder::new(
            &mut Init::new(&mut store, &mut rng, ParamGroup::Detector),
            &cfg,
        );
        let (xyz, feats) = points(1, 2048, 3);
        let mut g = Graph::<f32>::new(&store);
        let x = g.constant(xyz);
        let f = g.constant(feats);
        let (tx, tf) = enc.tokenize(&mut g, x, Some(f));
        assert_eq!(g.shape(tx), &[512, 3]);
        assert_eq!(g.shape(tf), &[512, 64]);
        let st = enc.encode(&mut g, tx, tf);
        assert_eq!(g.shape(st.p_enc), &[256, 3]);
        assert_eq!(g.shape(st.f_enc), &[256, 64]);
        assert!(g.value(st.f_enc).is_finite());
        let tokens = g.value(tx);
        for (r, &k) in st.kept.iter().enumerate() {
            assert_eq!(g.value(st.p_enc).row(r), tokens.row(k));
        }
    }

    #[test]
    fn paper_tokenizer_width() {
        let cfg = Config::paper();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = SceneEncoder::new(
            &mut Init::new(&mut store, &mut rng, ParamGroup::Detector),
            &cfg,
        );
        assert_eq!(enc.tokenizer.npoint, 2048);
        assert_eq!(enc.tokenizer.out_dim(3), 256);
        assert_eq!(enc.downsample.npoint, 1024);
    }

    #[test]
    fn duplicate_points_still_fill_token_count() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = SceneEncoder::new(
            &mut Init::new(&mut store, &mut rng, ParamGroup::Detector),
            &cfg,
        );
        let xyz = Tensor::new(vec![100, 3], [1.0f32, 2.0, 0.5].repeat(100)).unwrap();
        let mut g = Graph::<f32>::new(&store);
        let x = g.constant(xyz);
        let f = g.constant(Tensor::zeros(&[100, 3]));
        let st = enc.forward(&mut g, x, Some(f));
        assert_eq!(g.shape(st.token_xyz), &[64, 3]);
        assert_eq!(g.shape(st.p_enc), &[32, 3]);
        assert!(g.value(st.f_enc).is_finite());
    }

    #[test]
    fn infinite_mask_radius_is_full_attention() {
        let cfg = Config {
            enc_mask_radius: f64::INFINITY,
            ..small_cfg()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = SceneEncoder::new(
            &mut Init::new(&mut store, &mut rng, ParamGroup::Detector),
            &cfg,
        );
        let (xyz, feats) = points(4, 200, 3);
        let mut g = Graph::<f32>::new(&store);
        let x = g.constant(xyz);
        let f = g.constant(feats);
        let (tx, tf) = enc.tokenize(&mut g, x, Some(f));
        let pos = g.value(tx).clone();
        let mask = Some(Arc::new(AttnMask::radius(&pos, &pos, f32::INFINITY)));
        let (masked, _) = enc.masked.forward(&mut g, tf, mask);
        let (plain, _) = enc.masked.forward(&mut g, tf, None);
        assert_eq!(g.value(masked).data(), g.value(plain).data());
    }

    #[test]
    fn outputs_finite_and_rows_normalized_across_seeds() {
        let cfg = small_cfg();
        for seed in 0..100 {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let enc = SceneEncoder::new(
                &mut Init::new(&mut store, &mut rng, ParamGroup::Detector),
                &cfg,
            );
            let (xyz, feats) = points(seed + 1000, 96, 3);
            let mut g = Graph::<f32>::new(&store);
            let x = g.constant(xyz);
            let f = g.constant(feats);
            let st = enc.forward(&mut g, x, Some(f));
            assert!(g.value(st.f_enc).is_finite(), "seed {seed}");
            for &a in &st.attn {
                let w = g.attention_weights(a).unwrap();
                let nk = w.shape()[2];
                for row in w.data().chunks(nk) {
                    assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}
