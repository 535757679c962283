//! Detection-gated caption scoring (m@k) and detection diagnostics.

use crate::geom::{box_iou_3d, nms_3d, Box3D};

/// The surviving prediction with maximal IoU for one annotated object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtAssignment {
    pub pred: Option<usize>,
    pub iou: f64,
}

/// Assigns every GT box the prediction among `kept` with the highest IoU
/// (ties to the earlier entry of `kept`).
pub fn assign_gt(gt: &[Box3D], preds: &[Box3D], kept: &[usize]) -> Vec<GtAssignment> {
    gt.iter()
        .map(|b| {
            let mut best = GtAssignment {
                pred: None,
                iou: 0.0,
            };
            for &p in kept {
                let iou = box_iou_3d(b, &preds[p]);
                if best.pred.is_none() || iou > best.iou {
                    best = GtAssignment { pred: Some(p), iou };
                }
            }
            best
        })
        .collect()
}

/// `(1/N) Σ m_i · 𝟙[IoU_i ≥ k]` over all `N` annotated objects.
pub fn m_at_k(assign: &[GtAssignment], metric: &[f64], k: f64) -> f64 {
    assert_eq!(assign.len(), metric.len(), "one metric value per object");
    if assign.is_empty() {
        return 0.0;
    }
    let s: f64 = assign
        .iter()
        .zip(metric)
        .filter(|(a, _)| a.pred.is_some() && a.iou >= k)
        .map(|(_, m)| m)
        .sum();
    s / assign.len() as f64
}

/// One scene's predictions after the score threshold but before NMS.
#[derive(Clone, Debug, Default)]
pub struct DetectionScene {
    pub gt: Vec<Box3D>,
    pub preds: Vec<Box3D>,
    pub scores: Vec<f64>,
}

impl DetectionScene {
    pub fn kept(&self, nms_iou: f64) -> Vec<usize> {
        nms_3d(&self.preds, &self.scores, nms_iou)
    }
}

/// Fraction of GT objects whose best surviving prediction reaches `thr` IoU.
pub fn average_recall(scenes: &[DetectionScene], nms_iou: f64, thr: f64) -> f64 {
    let mut hit = 0usize;
    let mut n = 0usize;
    for s in scenes {
        let a = assign_gt(&s.gt, &s.preds, &s.kept(nms_iou));
        hit += a
            .iter()
            .filter(|a| a.pred.is_some() && a.iou >= thr)
            .count();
        n += s.gt.len();
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Area under the monotone precision envelope of one ranked list.
fn average_precision(mut ranked: Vec<(f64, bool)>, n_gt: usize) -> f64 {
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut prec = Vec::with_capacity(ranked.len());
    let mut rec = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (i, &(_, ok)) in ranked.iter().enumerate() {
        tp += ok as usize;
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in prec.into_iter().zip(rec) {
        ap += (r - last_r) * p;
        last_r = r;
    }
    ap
}

/// Class-wise all-point AP at `thr` IoU, averaged over classes present in the GT.
/// Predictions are matched greedily in score order to unmatched GT of their class.
pub fn mean_average_precision(scenes: &[DetectionScene], nms_iou: f64, thr: f64) -> f64 {
    let mut classes: Vec<usize> = scenes
        .iter()
        .flat_map(|s| s.gt.iter().map(|b| b.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let kept: Vec<Vec<usize>> = scenes.iter().map(|s| s.kept(nms_iou)).collect();
    let mut total = 0.0;
    for &c in &classes {
        let mut ranked = Vec::new();
        let mut n_gt = 0;
        for (s, kept) in scenes.iter().zip(&kept) {
            let gts: Vec<&Box3D> = s.gt.iter().filter(|b| b.class_id == c).collect();
            n_gt += gts.len();
            let mut used = vec![false; gts.len()];
            let mut order: Vec<usize> = kept
                .iter()
                .copied()
                .filter(|&p| s.preds[p].class_id == c)
                .collect();
            order.sort_by(|&i, &j| s.scores[j].total_cmp(&s.scores[i]).then(i.cmp(&j)));
            for p in order {
                let mut best: Option<(usize, f64)> = None;
                for (gi, gb) in gts.iter().enumerate() {
                    let iou = box_iou_3d(gb, &s.preds[p]);
                    if !used[gi] && iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((gi, iou));
                    }
                }
                if let Some((gi, _)) = best {
                    used[gi] = true;
                }
                ranked.push((s.scores[p], best.is_some()));
            }
        }
        total += average_precision(ranked, n_gt);
    }
    total / classes.len() as f64
}
