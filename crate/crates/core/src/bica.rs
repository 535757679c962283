//! Bi-directional contextual attention: objects summarized for every context
//! (O4C), contexts fed back to objects (C4O), and the caption prefix.

use crate::config::{Config, Variant};
use crate::geom::knn;
use crate::numerics::{Graph, Init, Linear, ParamId, Real, Tensor, Var};

/// Single-head attention with its own projections and a per-channel gate on
/// the output.
#[derive(Clone, Debug)]
pub struct GatedAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub gate: ParamId,
}

impl GatedAttention {
    pub fn new(init: &mut Init<'_>, name: &str, gate_name: &str, d: usize) -> Self {
        init.scoped(name, |i| GatedAttention {
            q: Linear::new(i, "q", d, d),
            k: Linear::new(i, "k", d, d),
            v: Linear::new(i, "v", d, d),
            gate: i.constant(gate_name, &[d], 1.0),
        })
    }

    /// Returns the gated mixture and the attention node.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, query: Var, source: Var) -> (Var, Var) {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, source);
        let v = self.v.forward(g, source);
        let a = g.attention(q, k, v, 1, None);
        let gate = g.param(self.gate);
        (g.mul_row(a, gate), a)
    }
}

#[derive(Clone, Debug)]
pub struct Bica {
    pub o4c: GatedAttention,
    pub c4o: GatedAttention,
    pub prefix: Linear,
    pub variant: Variant,
    pub knn_k: usize,
}

#[derive(Clone, Debug)]
pub struct BicaOutput {
    pub vca: Var,
    pub voa: Var,
    /// `[Vo, Vca, Voa]` along the feature axis.
    pub va: Var,
    /// One caption prefix token per object.
    pub prefix: Var,
    pub o4c_attn: Option<Var>,
    pub c4o_attn: Option<Var>,
}

impl Bica {
    pub fn new(init: &mut Init<'_>, cfg: &Config) -> Self {
        let d = cfg.d_model;
        init.scoped("bica", |i| Bica {
            o4c: GatedAttention::new(i, "o4c", "gamma", d),
            c4o: GatedAttention::new(i, "c4o", "lambda", d),
            prefix: Linear::new(i, "prefix", 3 * d, d),
            variant: cfg.variant,
            knn_k: cfg.knn_k,
        })
    }

    pub fn o4c<T: Real>(&self, g: &mut Graph<'_, T>, vo: Var, vc: Var) -> (Var, Var) {
        self.o4c.forward(g, vo, vc)
    }

    pub fn c4o<T: Real>(&self, g: &mut Graph<'_, T>, vca: Var, vo: Var) -> (Var, Var) {
        self.c4o.forward(g, vca, vo)
    }

    pub fn assemble<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        vo: Var,
        vca: Var,
        voa: Var,
    ) -> (Var, Var) {
        let va = g.concat_cols(&[vo, vca, voa]);
        let p = self.prefix.forward(g, va);
        (va, p)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        vo: Var,
        vc: Var,
        p_o: Var,
        p_c: Var,
    ) -> BicaOutput {
        let shape = g.shape(vo).to_vec();
        let zeros = |g: &mut Graph<'_, T>| g.constant(Tensor::zeros(&shape));
        let (vca, voa, o4c_attn, c4o_attn) = match self.variant {
            Variant::Vo => (zeros(g), zeros(g), None, None),
            Variant::VoKnn => (
                knn_context(g, vc, p_o, p_c, self.knn_k),
                zeros(g),
                None,
                None,
            ),
            Variant::VoO4c => {
                let (vca, a) = self.o4c(g, vo, vc);
                (vca, zeros(g), Some(a), None)
            }
            Variant::Full => {
                let (vca, a) = self.o4c(g, vo, vc);
                let (voa, b) = self.c4o(g, vca, vo);
                (vca, voa, Some(a), Some(b))
            }
        };
        let (va, prefix) = self.assemble(g, vo, vca, voa);
        BicaOutput {
            vca,
            voa,
            va,
            prefix,
            o4c_attn,
            c4o_attn,
        }
    }
}

/// Mean of the `k` nearest context features for every object position.
pub fn knn_context<T: Real>(g: &mut Graph<'_, T>, vc: Var, p_o: Var, p_c: Var, k: usize) -> Var {
    let (qo, qc) = (g.value(p_o).clone(), g.value(p_c).clone());
    let (no, nc) = (qo.rows(), qc.rows());
    let idx = g.decide(|| knn(&qo, &qc, k).expect("knn_k exceeds context count"));
    let mut w = vec![T::zero(); no * nc];
    let inv = T::one() / T::lit(k as f64);
    for i in 0..no {
        for &j in &idx[i * k..(i + 1) * k] {
            w[i * nc + j] += inv;
        }
    }
    let w = g.constant(Tensor::new(vec![no, nc], w).expect("shape"));
    g.matmul(w, vc)
}
