//! The full captioner: detector branch, context branch, BiCA and caption head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bica::{Bica, BicaOutput};
use crate::config::Config;
use crate::decoders::{DecoderOutput, QueryDecoder};
use crate::encoder::{SceneEncoder, SceneTokens};
use crate::heads::{BoxPreds, CaptionHead, LocHeads};
use crate::numerics::{Graph, Init, ParamGroup, ParamStore, Real, Tensor, Var};
use crate::queries::{QueryGenerator, QuerySet, VoteOffsets};

pub struct BicaModel {
    pub cfg: Config,
    pub n_class: usize,
    pub vocab: usize,
    pub encoder: SceneEncoder,
    pub queries: QueryGenerator,
    pub inst_decoder: QueryDecoder,
    pub ctx_decoder: QueryDecoder,
    pub loc: LocHeads,
    pub bica: Bica,
    pub caption: CaptionHead,
}

/// Everything the detector branch produces for one scene.
pub struct DetectorOutput {
    pub tokens: SceneTokens,
    pub instance: QuerySet,
    pub votes: VoteOffsets,
    pub decoded: DecoderOutput,
    /// Box predictions of every decoder layer, from the shared heads.
    pub preds: Vec<BoxPreds>,
}

impl DetectorOutput {
    pub fn vo(&self) -> Var {
        self.decoded.last()
    }

    pub fn final_preds(&self) -> &BoxPreds {
        self.preds.last().expect("at least one decoder layer")
    }
}

/// Context branch and BiCA output for one scene.
pub struct CaptionContext {
    pub context: QuerySet,
    pub vc: Var,
    pub bica: BicaOutput,
}

impl BicaModel {
    /// Registers all parameters in `store` in a fixed order, drawing from a
    /// generator seeded by `seed`.
    pub fn new(
        cfg: &Config,
        n_class: usize,
        vocab: usize,
        store: &mut ParamStore,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(store, &mut rng, ParamGroup::Detector);
        let encoder = SceneEncoder::new(&mut init, cfg);
        let (vote, sa_o) = QueryGenerator::new_instance(&mut init, cfg);
        let inst_decoder = QueryDecoder::new(&mut init, "inst_decoder", cfg);
        let loc = LocHeads::new(&mut init, cfg, n_class);
        let (sa_c, ctx_decoder, bica, caption) = init.with_group(ParamGroup::Caption, |i| {
            (
                QueryGenerator::new_context(i, cfg),
                QueryDecoder::new(i, "ctx_decoder", cfg),
                Bica::new(i, cfg),
                CaptionHead::new(i, cfg, vocab),
            )
        });
        BicaModel {
            cfg: cfg.clone(),
            n_class,
            vocab,
            encoder,
            queries: QueryGenerator {
                vote,
                sa_o,
                sa_c,
                n_ctx_seeds: cfg.n_ctx_seeds,
            },
            inst_decoder,
            ctx_decoder,
            loc,
            bica,
            caption,
        }
    }

    pub fn detect<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        xyz: &Tensor<f32>,
        feats: &Tensor<f32>,
    ) -> DetectorOutput {
        let x = g.constant_f32(xyz);
        let f = g.constant_f32(feats);
        let tokens = self.encoder.forward(g, x, Some(f));
        let (instance, votes) = self.queries.instance(g, &tokens);
        let decoded = self.inst_decoder.forward(
            g,
            instance.positions,
            instance.feats,
            tokens.p_enc,
            tokens.f_enc,
        );
        let preds = decoded
            .layers
            .iter()
            .map(|&v| self.loc.forward(g, v, instance.positions))
            .collect();
        DetectorOutput {
            tokens,
            instance,
            votes,
            decoded,
            preds,
        }
    }

    /// Context queries over the scene tokens, their decoding, and BiCA
    /// between `vo` (at `p_o`) and the decoded context.
    pub fn contextualize<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        p_enc: Var,
        f_enc: Var,
        vo: Var,
        p_o: Var,
    ) -> CaptionContext {
        let context = self.queries.context_at(g, p_enc, f_enc);
        let vc = self
            .ctx_decoder
            .forward(g, context.positions, context.feats, p_enc, f_enc)
            .last();
        let bica = self.bica.forward(g, vo, vc, p_o, context.positions);
        CaptionContext { context, vc, bica }
    }

    pub fn contextualize_detection<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        det: &DetectorOutput,
    ) -> CaptionContext {
        self.contextualize(
            g,
            det.tokens.p_enc,
            det.tokens.f_enc,
            det.vo(),
            det.instance.positions,
        )
    }
}

/// Detector outputs frozen as plain tensors, enough to rebuild the caption
/// branch without running the detector again.
#[derive(Clone, Debug)]
pub struct DetectorCache {
    pub p_enc: Tensor<f32>,
    pub f_enc: Tensor<f32>,
    pub vo: Tensor<f32>,
    pub p_o: Tensor<f32>,
}

impl DetectorCache {
    pub fn capture<T: Real>(g: &Graph<'_, T>, det: &DetectorOutput) -> Self {
        DetectorCache {
            p_enc: g.value(det.tokens.p_enc).cast(),
            f_enc: g.value(det.tokens.f_enc).cast(),
            vo: g.value(det.vo()).cast(),
            p_o: g.value(det.instance.positions).cast(),
        }
    }

    pub fn contextualize<T: Real>(
        &self,
        model: &BicaModel,
        g: &mut Graph<'_, T>,
    ) -> CaptionContext {
        let p_enc = g.constant_f32(&self.p_enc);
        let f_enc = g.constant_f32(&self.f_enc);
        let vo = g.constant_f32(&self.vo);
        let p_o = g.constant_f32(&self.p_o);
        model.contextualize(g, p_enc, f_enc, vo, p_o)
    }
}
