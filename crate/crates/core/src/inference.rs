//! Detection and captioning of whole scenes, and dataset evaluation.

use crate::checkpoint::Checkpoint;
use crate::datasynth::{Dataset, SceneSample, Vocabulary};
use crate::error::{BicaError, Result};
use crate::evalmetrics::{evaluate, tokenize, DetectionScene, EvalScene, MetricsReport};
use crate::geom::nms_3d;
use crate::heads::{beam_search, greedy_decode, BoxPrediction, CaptionSequence};
use crate::model::BicaModel;
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::parallel::map_ordered;

/// Rebuilds the model, its parameters and vocabulary from a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(BicaModel, ParamStore, Vocabulary)> {
    let cfg = ck.config()?;
    let vocab = Vocabulary::from_text(&ck.vocab_text)?;
    let mut store = ParamStore::new();
    let model = BicaModel::new(&cfg, ck.n_class, vocab.len(), &mut store, cfg.seed);
    ck.restore_params(&mut store)?;
    Ok((model, store, vocab))
}

/// Fails unless `data` was written with the checkpoint's vocabulary.
pub fn check_vocab(vocab: &Vocabulary, data: &Dataset) -> Result<()> {
    if vocab.to_text() != data.vocab.to_text() {
        return Err(BicaError::Invalid(
            "dataset vocabulary differs from the checkpoint's".into(),
        ));
    }
    Ok(())
}

/// Final-layer boxes of every instance query and their caption prefixes.
pub struct ScenePrediction {
    pub boxes: Vec<BoxPrediction>,
    pub prefix: Tensor<f32>,
}

pub fn predict_scene(
    model: &BicaModel,
    store: &ParamStore,
    scene: &SceneSample,
) -> ScenePrediction {
    let mut g = Graph::<f32>::new(store);
    let det = model.detect(&mut g, &scene.xyz, &scene.feats);
    let ctx = model.contextualize_detection(&mut g, &det);
    ScenePrediction {
        boxes: det.final_preds().read(&g),
        prefix: g.value(ctx.bica.prefix).clone(),
    }
}

impl ScenePrediction {
    pub fn scores(&self) -> Vec<f64> {
        self.boxes.iter().map(|b| b.score()).collect()
    }

    /// NMS survivors by objectness.
    pub fn kept(&self, nms_iou: f64) -> Vec<usize> {
        let boxes: Vec<_> = self.boxes.iter().map(|b| b.to_box()).collect();
        nms_3d(&boxes, &self.scores(), nms_iou)
    }

    /// Caption of query `idx`; a beam of 1 is plain greedy decoding.
    pub fn caption(
        &self,
        model: &BicaModel,
        store: &ParamStore,
        idx: usize,
        beam: usize,
    ) -> CaptionSequence {
        let stepper = model
            .caption
            .stepper(store, self.prefix.gather_rows(&[idx]));
        if beam <= 1 {
            greedy_decode(&stepper, model.cfg.max_len)
        } else {
            beam_search(&stepper, beam, model.cfg.max_len).swap_remove(0)
        }
    }
}

pub fn words(vocab: &Vocabulary, tokens: &[usize]) -> Vec<String> {
    tokenize(&vocab.decode(tokens))
}

/// Runs the detector and caption head over every scene, captioning only the
/// predictions the m@k protocol reads.
pub fn eval_scenes(
    model: &BicaModel,
    store: &ParamStore,
    data: &Dataset,
    nms_iou: f64,
    beam: usize,
    threads: usize,
) -> Result<Vec<EvalScene>> {
    let idx: Vec<usize> = (0..data.scenes.len()).collect();
    map_ordered(threads, &idx, |i| {
        let scene = &data.scenes[i];
        let pred = predict_scene(model, store, scene);
        let mut es = EvalScene {
            det: DetectionScene {
                gt: scene.boxes.clone(),
                preds: pred.boxes.iter().map(|b| b.to_box()).collect(),
                scores: pred.scores(),
            },
            refs: scene
                .captions
                .iter()
                .map(|rs| rs.iter().map(|r| words(&data.vocab, r)).collect())
                .collect(),
            captions: vec![None; pred.boxes.len()],
        };
        for p in es.needed(nms_iou) {
            let c = pred.caption(model, store, p, beam);
            es.captions[p] = Some(words(&data.vocab, &c.tokens));
        }
        Ok(es)
    })
}

pub fn evaluate_model(
    model: &BicaModel,
    store: &ParamStore,
    data: &Dataset,
    nms_iou: f64,
    beam: usize,
    threads: usize,
) -> Result<MetricsReport> {
    evaluate(
        &eval_scenes(model, store, data, nms_iou, beam, threads)?,
        nms_iou,
    )
}
