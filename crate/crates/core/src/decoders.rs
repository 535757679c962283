//! Instance and context transformer decoders with Fourier position encodings.

use crate::config::Config;
use crate::geom::fourier_pe;
use crate::numerics::{
    Activation, Graph, Init, LayerNorm, Mlp, MultiHeadAttention, ParamId, Real, Var,
};

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: Mlp,
}

/// Attention nodes of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerAttn {
    pub self_attn: Var,
    pub cross_attn: Var,
}

impl DecoderLayer {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, heads: usize, ffn_mult: usize) -> Self {
        init.scoped(name, |i| DecoderLayer {
            ln1: LayerNorm::new(i, "ln1", d),
            self_attn: MultiHeadAttention::new(i, "self_attn", d, heads),
            ln2: LayerNorm::new(i, "ln2", d),
            cross_attn: MultiHeadAttention::new(i, "cross_attn", d, heads),
            ln3: LayerNorm::new(i, "ln3", d),
            ffn: Mlp::new(i, "ffn", &[d, d * ffn_mult, d], Activation::Gelu),
        })
    }

    /// `qpe` and `kpe` are added to the queries and keys of every attention.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        qpe: Var,
        mem: Var,
        kpe: Var,
    ) -> (Var, LayerAttn) {
        let h = self.ln1.forward(g, x);
        let q = g.add(h, qpe);
        let sa = self.self_attn.forward(g, q, q, h, None);
        let x = g.add(x, sa.out);
        let h = self.ln2.forward(g, x);
        let q = g.add(h, qpe);
        let k = g.add(mem, kpe);
        let ca = self.cross_attn.forward(g, q, k, mem, None);
        let x = g.add(x, ca.out);
        let h = self.ln3.forward(g, x);
        let f = self.ffn.forward(g, h);
        (
            g.add(x, f),
            LayerAttn {
                self_attn: sa.attn,
                cross_attn: ca.attn,
            },
        )
    }
}

#[derive(Clone, Debug)]
pub struct QueryDecoder {
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    /// Frozen Gaussian frequencies `[3×d/2]`.
    pub pe_b: ParamId,
    pub pe_norm: f64,
}

/// Per-layer normalized outputs (the last entry is the final layer).
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub layers: Vec<Var>,
    pub attn: Vec<LayerAttn>,
}

impl DecoderOutput {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("decoder has at least one layer")
    }
}

impl QueryDecoder {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &Config) -> Self {
        let d = cfg.d_model;
        init.scoped(name, |i| QueryDecoder {
            layers: (0..cfg.dec_layers)
                .map(|k| DecoderLayer::new(i, &format!("layer{k}"), d, cfg.n_heads, cfg.ffn_mult))
                .collect(),
            norm: LayerNorm::new(i, "norm", d),
            pe_b: i.gaussian_fixed("pe_b", &[3, d / 2], cfg.pe_sigma as f32),
            pe_norm: cfg.pe_norm,
        })
    }

    pub fn pe<T: Real>(&self, g: &mut Graph<'_, T>, xyz: Var) -> Var {
        let b = g.param(self.pe_b);
        let x = g.scale(xyz, 1.0 / self.pe_norm);
        fourier_pe(g, x, b)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        qxyz: Var,
        qfeat: Var,
        mem_xyz: Var,
        mem: Var,
    ) -> DecoderOutput {
        let qpe = self.pe(g, qxyz);
        let kpe = self.pe(g, mem_xyz);
        let mut x = qfeat;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, a) = layer.forward(g, x, qpe, mem, kpe);
            x = y;
            layers.push(self.norm.forward(g, x));
            attn.push(a);
        }
        DecoderOutput { layers, attn }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamGroup, ParamStore, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, n: usize, c: usize, hi: f32) -> Tensor<f32> {
        Tensor::new(
            vec![n, c],
            (0..n * c).map(|_| rng.gen_range(-hi..hi)).collect(),
        )
        .unwrap()
    }

    fn build(cfg: &Config, seed: u64, store: &mut ParamStore, name: &str) -> QueryDecoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QueryDecoder::new(
            &mut Init::new(store, &mut rng, ParamGroup::Detector),
            name,
            cfg,
        )
    }

    struct Inputs {
        qx: Tensor<f32>,
        qf: Tensor<f32>,
        mx: Tensor<f32>,
        mf: Tensor<f32>,
    }

    fn inputs(seed: u64, nq: usize, nk: usize, d: usize) -> Inputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Inputs {
            qx: rand_t(&mut rng, nq, 3, 5.0),
            qf: rand_t(&mut rng, nq, d, 1.0),
            mx: rand_t(&mut rng, nk, 3, 5.0),
            mf: rand_t(&mut rng, nk, d, 1.0),
        }
    }

    fn run(dec: &QueryDecoder, store: &ParamStore, inp: &Inputs) -> Vec<Tensor<f32>> {
        let mut g = Graph::<f32>::new(store);
        let (a, b, c, d) = (
            g.constant(inp.qx.clone()),
            g.constant(inp.qf.clone()),
            g.constant(inp.mx.clone()),
            g.constant(inp.mf.clone()),
        );
        let out = dec.forward(&mut g, a, b, c, d);
        out.layers.iter().map(|&v| g.value(v).clone()).collect()
    }

    #[test]
    fn layer_counts() {
        let mut store = ParamStore::new();
        assert_eq!(
            build(&Config::paper(), 0, &mut store, "dec").layers.len(),
            8
        );
        let cfg = Config::tiny();
        let mut store = ParamStore::new();
        let dec = build(&cfg, 0, &mut store, "dec");
        let out = run(&dec, &store, &inputs(1, 64, 256, 64));
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].shape(), &[64, 64]);
    }

    #[test]
    fn zero_cross_values_isolate_scene_features() {
        let cfg = Config::tiny();
        let mut store = ParamStore::new();
        let dec = build(&cfg, 2, &mut store, "dec");
        for l in &dec.layers {
            store
                .get_mut(l.cross_attn.v.w)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        let a = inputs(3, 8, 20, 64);
        let mut b = inputs(3, 8, 20, 64);
        b.mf = rand_t(&mut ChaCha8Rng::seed_from_u64(99), 20, 64, 1.0);
        assert_eq!(run(&dec, &store, &a), run(&dec, &store, &b));
    }

    #[test]
    fn cross_attention_rows_sum_to_one() {
        let cfg = Config::tiny();
        let mut store = ParamStore::new();
        let dec = build(&cfg, 4, &mut store, "dec");
        let inp = inputs(5, 16, 40, 64);
        let mut g = Graph::<f32>::new(&store);
        let (a, b, c, d) = (
            g.constant(inp.qx),
            g.constant(inp.qf),
            g.constant(inp.mx),
            g.constant(inp.mf),
        );
        let out = dec.forward(&mut g, a, b, c, d);
        for la in &out.attn {
            let w = g.attention_weights(la.cross_attn).unwrap();
            for row in w.data().chunks(40) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = Config::tiny();
        let mut store = ParamStore::new();
        let dec = build(&cfg, 6, &mut store, "ctx");
        let inp = inputs(7, 16, 50, 64);
        let perm: Vec<usize> = (0..16).rev().collect();
        let permuted = Inputs {
            qx: inp.qx.gather_rows(&perm),
            qf: inp.qf.gather_rows(&perm),
            mx: inp.mx.clone(),
            mf: inp.mf.clone(),
        };
        let a = run(&dec, &store, &inp).pop().unwrap();
        let b = run(&dec, &store, &permuted).pop().unwrap();
        let a = a.gather_rows(&perm);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn separate_decoders_do_not_share_parameters() {
        let cfg = Config::tiny();
        let mut store = ParamStore::new();
        let inst = build(&cfg, 8, &mut store, "inst");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ctx = QueryDecoder::new(
            &mut Init::new(&mut store, &mut rng, ParamGroup::Caption),
            "ctx",
            &cfg,
        );
        assert_ne!(
            store.hash_groups(&[ParamGroup::Detector]),
            store.hash_groups(&[ParamGroup::Caption])
        );
        let inp = inputs(10, 8, 30, 64);
        assert_ne!(run(&inst, &store, &inp), run(&ctx, &store, &inp));
    }
}
