//! Parameterized building blocks shared by every network component.

use std::sync::Arc;

use super::graph::{AttnMask, Graph, Var};
use super::params::{Init, ParamId};
use super::tensor::Real;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, din: usize, dout: usize) -> Self {
        init.scoped(name, |i| Linear {
            w: i.weight("w", din, dout),
            b: i.zeros("b", &[dout]),
            din,
            dout,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize) -> Self {
        init.scoped(name, |i| LayerNorm {
            gamma: i.constant("gamma", &[d], 1.0),
            beta: i.zeros("beta", &[d]),
            eps: 1e-5,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

/// Stack of linear layers with an activation between consecutive layers
/// (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    /// `dims` lists every width including input and output.
    pub fn new(init: &mut Init<'_>, name: &str, dims: &[usize], act: Activation) -> Self {
        assert!(
            dims.len() >= 2,
            "an MLP needs at least input and output widths"
        );
        init.scoped(name, |i| {
            let layers = dims
                .windows(2)
                .enumerate()
                .map(|(k, w)| Linear::new(i, &format!("l{k}"), w[0], w[1]))
                .collect();
            Mlp { layers, act }
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if k + 1 < self.layers.len() {
                h = self.act.apply(g, h);
            }
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.dout)
    }
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Output of an attention call: the projected result plus the raw attention
/// node, from which weights can be read with [`Graph::attention_weights`].
#[derive(Clone, Copy, Debug)]
pub struct AttnOutput {
    pub out: Var,
    pub attn: Var,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && d.is_multiple_of(heads),
            "d_model {d} not divisible by {heads} heads"
        );
        init.scoped(name, |i| MultiHeadAttention {
            q: Linear::new(i, "q", d, d),
            k: Linear::new(i, "k", d, d),
            v: Linear::new(i, "v", d, d),
            o: Linear::new(i, "o", d, d),
            heads,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<Arc<AttnMask>>,
    ) -> AttnOutput {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, key);
        let v = self.v.forward(g, value);
        let attn = g.attention(q, k, v, self.heads, mask);
        let out = self.o.forward(g, attn);
        AttnOutput { out, attn }
    }
}

/// Token embedding table `[vocab×d]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(init: &mut Init<'_>, name: &str, vocab: usize, dim: usize) -> Self {
        let bound = 1.0 / (dim as f32).sqrt();
        init.scoped(name, |i| Embedding {
            table: i.uniform("table", &[vocab, dim], bound),
            vocab,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }
}
