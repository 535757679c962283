//! Two-block causal transformer caption head. The projected object prefix
//! takes the place of a start token.

use std::sync::Arc;

use crate::config::Config;
use crate::encoder::EncoderLayer;
use crate::error::{BicaError, Result};
use crate::geom::sinusoid_pe;
use crate::numerics::{
    AttnMask, Embedding, Graph, Init, LayerNorm, Linear, ParamStore, Real, Tensor, Var,
};

use super::decode::StepModel;

#[derive(Clone, Debug)]
pub struct CaptionHead {
    pub embed: Embedding,
    pub blocks: Vec<EncoderLayer>,
    pub norm: LayerNorm,
    pub out: Linear,
    pub vocab: usize,
    pub dim: usize,
    pub max_len: usize,
}

impl CaptionHead {
    pub fn new(init: &mut Init<'_>, cfg: &Config, vocab: usize) -> Self {
        let d = cfg.d_model;
        init.scoped("caption", |i| CaptionHead {
            embed: Embedding::new(i, "embed", vocab, d),
            blocks: (0..cfg.cap_layers)
                .map(|k| EncoderLayer::new(i, &format!("block{k}"), d, cfg.cap_heads, cfg.ffn_mult))
                .collect(),
            norm: LayerNorm::new(i, "norm", d),
            out: Linear::new(i, "out", d, vocab),
            vocab,
            dim: d,
            max_len: cfg.max_len,
        })
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.vocab) {
            Some(t) => Err(BicaError::Invalid(format!(
                "token id {t} out of range for vocabulary of {}",
                self.vocab
            ))),
            None => Ok(()),
        }
    }

    /// Teacher-forced logits for several sequences at once. Item `(p, tokens)`
    /// reads prefix row `p`; its `T = tokens.len()` output rows are stacked in
    /// item order and row `t` predicts `tokens[t]` from the prefix and
    /// `tokens[..t]`.
    pub fn forward_batch<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        prefixes: Var,
        items: &[(usize, &[usize])],
    ) -> Var {
        let m = g.shape(prefixes)[0];
        let d = self.dim;
        let mut ids = Vec::new();
        let mut arrange = Vec::new();
        let mut pe = Vec::new();
        let mut spans = Vec::new();
        for &(p, toks) in items {
            assert!(p < m, "prefix row {p} out of range");
            assert!(!toks.is_empty(), "empty caption sequence");
            let start = arrange.len();
            arrange.push(p);
            for &t in &toks[..toks.len() - 1] {
                arrange.push(m + ids.len());
                ids.push(t);
            }
            for t in 0..toks.len() {
                pe.extend(sinusoid_pe(t as f64, d).into_iter().map(T::lit));
            }
            spans.push((start, toks.len()));
        }
        let n = arrange.len();
        let x = if ids.is_empty() {
            g.gather_rows(prefixes, &arrange)
        } else {
            let e = self.embed.forward(g, &ids);
            let all = g.concat_rows(&[prefixes, e]);
            g.gather_rows(all, &arrange)
        };
        let pe = g.constant(Tensor::new(vec![n, d], pe).expect("shape"));
        let mut h = g.add(x, pe);
        let mut rows = vec![Vec::new(); n];
        for &(start, len) in &spans {
            for t in 0..len {
                rows[start + t] = (start as u32..=(start + t) as u32).collect();
            }
        }
        let mask = Arc::new(AttnMask::from_allowed(n, rows));
        for b in &self.blocks {
            h = b.forward(g, h, Some(mask.clone())).0;
        }
        let h = self.norm.forward(g, h);
        self.out.forward(g, h)
    }

    /// Logits `[T×|V|]` for a single prefix row `[1×d]`.
    pub fn caption_forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        prefix: Var,
        tokens: &[usize],
    ) -> Var {
        self.forward_batch(g, prefix, &[(0, tokens)])
    }

    pub fn stepper<'a>(&'a self, store: &'a ParamStore, prefix: Tensor<f32>) -> CaptionStepper<'a> {
        CaptionStepper {
            head: self,
            store,
            prefix,
        }
    }
}

/// Next-token distributions of the caption head for one fixed prefix.
pub struct CaptionStepper<'a> {
    head: &'a CaptionHead,
    store: &'a ParamStore,
    prefix: Tensor<f32>,
}

impl StepModel for CaptionStepper<'_> {
    fn vocab_size(&self) -> usize {
        self.head.vocab
    }

    fn next_logprobs(&self, partials: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let mut g = Graph::<f32>::new(self.store);
        let p = g.constant(self.prefix.clone());
        let padded: Vec<Vec<usize>> = partials
            .iter()
            .map(|s| s.iter().copied().chain([0]).collect())
            .collect();
        let items: Vec<(usize, &[usize])> = padded.iter().map(|s| (0, s.as_slice())).collect();
        let logits = self.head.forward_batch(&mut g, p, &items);
        let lp = g.log_softmax(logits);
        let lv = g.value(lp);
        let mut row = 0;
        padded
            .iter()
            .map(|s| {
                row += s.len();
                lv.row(row - 1).iter().map(|&x| x as f64).collect()
            })
            .collect()
    }
}
