//! Per-scene losses for each training stage.

use super::hungarian::MatchAssignment;
use super::losses::{
    caption_mle_loss, detection_loss, match_layer, scst_loss, vote_loss, LossBreakdown, LossWeights,
};
use crate::datasynth::{SceneSample, EOS};
use crate::error::Result;
use crate::evalmetrics::CiderScorer;
use crate::heads::{beam_search, greedy_decode};
use crate::model::{BicaModel, DetectorCache};
use crate::numerics::{Graph, ParamStore, Real, Var};

pub struct SceneLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Final-layer assignment of predictions to GT objects.
    pub final_match: MatchAssignment,
}

/// Reference tokens without the trailing EOS, as scored by CIDEr.
pub fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.last() {
        Some(&EOS) => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}

/// Vote and per-layer detection losses, plus the teacher-forced caption
/// loss on the final-layer matches when `with_caption` is set.
pub fn supervised_loss<T: Real>(
    model: &BicaModel,
    g: &mut Graph<'_, T>,
    scene: &SceneSample,
    w: &LossWeights,
    with_caption: bool,
) -> Result<SceneLoss> {
    let det = model.detect(g, &scene.xyz, &scene.feats);
    let p_enc = g.value(det.tokens.p_enc).cast::<f32>();
    let vote = vote_loss(
        g,
        det.instance.positions,
        &det.instance.origin,
        &p_enc,
        &scene.boxes,
        w.vote_margin as f32,
    );
    let mut bd = LossBreakdown {
        vote: g.value(vote).item().as_f64(),
        ..Default::default()
    };
    let mut total = g.scale(vote, w.beta[0]);
    let mut final_match = MatchAssignment::default();
    for preds in &det.preds {
        let a = match_layer(g, preds, &scene.boxes, w)?;
        let terms = detection_loss(g, preds, &scene.boxes, &a, w);
        bd.det.push(terms.values(g));
        let wl = terms.weighted(g, w);
        let wl = g.scale(wl, w.beta[1]);
        total = g.add(total, wl);
        final_match = a;
    }
    if with_caption && !final_match.pairs.is_empty() {
        let ctx = model.contextualize_detection(g, &det);
        let mut items: Vec<(usize, &[usize])> = Vec::new();
        for &(p, j) in &final_match.pairs {
            for r in &scene.captions[j] {
                items.push((p, r.as_slice()));
            }
        }
        for (_, t) in &items {
            model.caption.check_tokens(t)?;
        }
        let targets: Vec<usize> = items.iter().flat_map(|(_, t)| t.iter().copied()).collect();
        let lens: Vec<usize> = items.iter().map(|(_, t)| t.len()).collect();
        let logits = model.caption.forward_batch(g, ctx.bica.prefix, &items);
        let mle = caption_mle_loss(g, logits, &targets, &lens);
        bd.cap_mle = g.value(mle).item().as_f64();
        let c = g.scale(mle, w.beta[2]);
        total = g.add(total, c);
    }
    bd.total = g.value(total).item().as_f64();
    Ok(SceneLoss {
        loss: total,
        breakdown: bd,
        final_match,
    })
}

/// What stage 3 keeps fixed per scene: the frozen detector's outputs and
/// its final-layer matches.
#[derive(Clone, Debug)]
pub struct ScstTarget {
    pub cache: DetectorCache,
    pub pairs: Vec<(usize, usize)>,
}

impl ScstTarget {
    pub fn build(
        model: &BicaModel,
        store: &ParamStore,
        scene: &SceneSample,
        w: &LossWeights,
    ) -> Result<Self> {
        let mut g = Graph::<f32>::new(store);
        let det = model.detect(&mut g, &scene.xyz, &scene.feats);
        let a = match_layer(&g, det.final_preds(), &scene.boxes, w)?;
        Ok(ScstTarget {
            cache: DetectorCache::capture(&g, &det),
            pairs: a.pairs,
        })
    }
}

/// Self-critical loss: for each matched object, the beam hypotheses are
/// rewarded by CIDEr against the object's references with the greedy
/// caption's reward as baseline. Averaged over objects.
pub fn scst_scene_loss(
    model: &BicaModel,
    g: &mut Graph<'_, f32>,
    target: &ScstTarget,
    scene: &SceneSample,
    scorer: &CiderScorer<usize>,
    w: &LossWeights,
) -> Result<SceneLoss> {
    let store = g.store();
    let ctx = target.cache.contextualize(model, g);
    let prefix = g.value(ctx.bica.prefix).clone();
    let cfg = &model.cfg;
    let mut items: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut rewards = Vec::new();
    let mut baselines = Vec::new();
    for &(p, j) in &target.pairs {
        let refs: Vec<&[usize]> = scene.captions[j].iter().map(|r| strip_eos(r)).collect();
        let stepper = model.caption.stepper(store, prefix.gather_rows(&[p]));
        let greedy = greedy_decode(&stepper, cfg.max_len);
        let b = scorer.score(strip_eos(&greedy.tokens), &refs);
        for h in beam_search(&stepper, cfg.beam, cfg.max_len) {
            rewards.push(scorer.score(strip_eos(&h.tokens), &refs));
            baselines.push(b);
            items.push((p, h.tokens));
        }
    }
    let mut bd = LossBreakdown::default();
    if items.is_empty() {
        let zero = g.constant(crate::numerics::Tensor::scalar(0.0));
        return Ok(SceneLoss {
            loss: zero,
            breakdown: bd,
            final_match: MatchAssignment::default(),
        });
    }
    let refs: Vec<(usize, &[usize])> = items.iter().map(|(p, t)| (*p, t.as_slice())).collect();
    let targets: Vec<usize> = items.iter().flat_map(|(_, t)| t.iter().copied()).collect();
    let lens: Vec<usize> = items.iter().map(|(_, t)| t.len()).collect();
    let logits = model.caption.forward_batch(g, ctx.bica.prefix, &refs);
    // each hypothesis carries its own object's baseline
    let adv: Vec<f64> = rewards.iter().zip(&baselines).map(|(r, b)| r - b).collect();
    let scale = 1.0 / target.pairs.len() as f64;
    let loss = scst_loss(g, logits, &targets, &lens, &adv, 0.0, scale);
    bd.cap_scst = g.value(loss).item() as f64;
    let total = g.scale(loss, w.beta[2]);
    bd.total = g.value(total).item() as f64;
    Ok(SceneLoss {
        loss: total,
        breakdown: bd,
        final_match: MatchAssignment {
            pairs: target.pairs.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::datasynth::{make_scene, Vocabulary, N_CLASSES};

    #[test]
    fn breakdown_total_recombines() {
        let cfg = Config::tiny();
        let mut store = ParamStore::new();
        let m = BicaModel::new(&cfg, N_CLASSES, Vocabulary::standard().len(), &mut store, 1);
        let s = make_scene(5, 3).unwrap();
        let w = LossWeights::from_config(&cfg);
        let mut g = Graph::<f64>::new(&store);
        let out = supervised_loss(&m, &mut g, &s, &w, true).unwrap();
        assert_eq!(out.breakdown.det.len(), cfg.dec_layers);
        assert_eq!(out.final_match.pairs.len(), 3);
        assert!(out.breakdown.cap_mle > 0.0);
        let r = out.breakdown.recombine(&w);
        assert!((r - out.breakdown.total).abs() < 1e-9 * r.abs());
    }

    #[test]
    fn scst_loss_is_finite() {
        let cfg = Config::tiny();
        let mut store = ParamStore::new();
        let m = BicaModel::new(&cfg, N_CLASSES, Vocabulary::standard().len(), &mut store, 1);
        let s = make_scene(5, 2).unwrap();
        let w = LossWeights::from_config(&cfg);
        let t = ScstTarget::build(&m, &store, &s, &w).unwrap();
        let corpus: Vec<Vec<Vec<usize>>> = s
            .captions
            .iter()
            .map(|rs| rs.iter().map(|r| strip_eos(r).to_vec()).collect())
            .collect();
        let scorer = CiderScorer::new(&corpus);
        let mut g = Graph::<f32>::new(&store);
        let out = scst_scene_loss(&m, &mut g, &t, &s, &scorer, &w).unwrap();
        assert!(out.breakdown.total.is_finite());
        let grads = g.backward(out.loss);
        assert!(!g.param_grads(&grads).is_empty());
    }
}
