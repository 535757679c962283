//! Dataset-level evaluation and the text report.

use std::fmt::Write as _;

use super::captions::{bleu4, rouge_l, CiderScorer};
use super::detection::{assign_gt, average_recall, m_at_k, mean_average_precision, DetectionScene};
use crate::error::{BicaError, Result};
use crate::geom::Box3D;

pub const THRESHOLDS: [f64; 2] = [0.25, 0.5];

/// Predictions and references for one scene. `captions[i]` is the caption of
/// prediction `i`; it may be `None` for predictions that no object uses.
#[derive(Clone, Debug, Default)]
pub struct EvalScene {
    pub det: DetectionScene,
    pub refs: Vec<Vec<Vec<String>>>,
    pub captions: Vec<Option<Vec<String>>>,
}

impl EvalScene {
    /// Predictions that survive NMS and are the best match of some GT object,
    /// i.e. the only ones whose captions the report reads.
    pub fn needed(&self, nms_iou: f64) -> Vec<usize> {
        let mut v: Vec<usize> = assign_gt(&self.det.gt, &self.det.preds, &self.det.kept(nms_iou))
            .into_iter()
            .filter_map(|a| a.pred)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub n_objects: usize,
    /// `[cider, bleu4, rouge_l]` at each threshold in [`THRESHOLDS`].
    pub captioning: [[f64; 3]; 2],
    pub matched: [usize; 2],
    pub ar50: f64,
    pub map50: f64,
}

impl MetricsReport {
    pub fn cider50(&self) -> f64 {
        self.captioning[1][0]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "n_objects {}", self.n_objects).unwrap();
        for (t, k) in THRESHOLDS.iter().enumerate() {
            let [c, b, r] = self.captioning[t];
            writeln!(s, "cider@{k} {c:.6}").unwrap();
            writeln!(s, "bleu4@{k} {b:.6}").unwrap();
            writeln!(s, "rouge_l@{k} {r:.6}").unwrap();
            writeln!(s, "matched@{k} {}", self.matched[t]).unwrap();
        }
        writeln!(s, "det_ar@0.5 {:.6}", self.ar50).unwrap();
        writeln!(s, "det_map@0.5 {:.6}", self.map50).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vals = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| BicaError::Format(format!("bad report line {line:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| BicaError::Format(format!("bad value in {line:?}")))?;
            vals.insert(k.to_string(), v);
        }
        let get = |k: &str| {
            vals.get(k)
                .copied()
                .ok_or_else(|| BicaError::Format(format!("report lacks {k}")))
        };
        let mut captioning = [[0.0; 3]; 2];
        let mut matched = [0; 2];
        for (t, k) in THRESHOLDS.iter().enumerate() {
            captioning[t] = [
                get(&format!("cider@{k}"))?,
                get(&format!("bleu4@{k}"))?,
                get(&format!("rouge_l@{k}"))?,
            ];
            matched[t] = get(&format!("matched@{k}"))? as usize;
        }
        Ok(MetricsReport {
            n_objects: get("n_objects")? as usize,
            captioning,
            matched,
            ar50: get("det_ar@0.5")?,
            map50: get("det_map@0.5")?,
        })
    }
}

/// Runs the m@k protocol: NMS, max-IoU assignment per object, then each
/// caption metric gated at both thresholds. CIDEr document frequencies come
/// from the reference sets of all objects in `scenes`.
pub fn evaluate(scenes: &[EvalScene], nms_iou: f64) -> Result<MetricsReport> {
    let corpus: Vec<Vec<Vec<String>>> =
        scenes.iter().flat_map(|s| s.refs.iter().cloned()).collect();
    if corpus.is_empty() {
        return Err(BicaError::Invalid(
            "evaluation set has no annotated objects".into(),
        ));
    }
    let scorer = CiderScorer::new(&corpus);
    let mut assigns = Vec::new();
    let mut metrics: [Vec<f64>; 3] = Default::default();
    for s in scenes {
        if s.refs.len() != s.det.gt.len() {
            return Err(BicaError::Invalid(
                "one reference set per GT box required".into(),
            ));
        }
        for (a, refs) in assign_gt(&s.det.gt, &s.det.preds, &s.det.kept(nms_iou))
            .into_iter()
            .zip(&s.refs)
        {
            let cap: &[String] = a
                .pred
                .and_then(|p| s.captions.get(p).and_then(|c| c.as_deref()))
                .unwrap_or(&[]);
            metrics[0].push(scorer.score(cap, refs));
            metrics[1].push(bleu4(cap, refs));
            metrics[2].push(rouge_l(cap, refs));
            assigns.push(a);
        }
    }
    let mut captioning = [[0.0; 3]; 2];
    let mut matched = [0; 2];
    for (t, &k) in THRESHOLDS.iter().enumerate() {
        for m in 0..3 {
            captioning[t][m] = m_at_k(&assigns, &metrics[m], k);
        }
        matched[t] = assigns
            .iter()
            .filter(|a| a.pred.is_some() && a.iou >= k)
            .count();
    }
    let det: Vec<DetectionScene> = scenes.iter().map(|s| s.det.clone()).collect();
    Ok(MetricsReport {
        n_objects: assigns.len(),
        captioning,
        matched,
        ar50: average_recall(&det, nms_iou, 0.5),
        map50: mean_average_precision(&det, nms_iou, 0.5),
    })
}

/// Text form of predictions: one line per box,
/// `scene score cx cy cz sx sy sz class | caption words`.
pub fn predictions_to_text(scenes: &[EvalScene]) -> String {
    let mut s = String::new();
    for (i, sc) in scenes.iter().enumerate() {
        for (p, b) in sc.det.preds.iter().enumerate() {
            let cap = sc
                .captions
                .get(p)
                .and_then(|c| c.as_ref())
                .map(|c| c.join(" "))
                .unwrap_or_default();
            let [cx, cy, cz] = b.center;
            let [sx, sy, sz] = b.size;
            writeln!(
                s,
                "{i} {:?} {cx:?} {cy:?} {cz:?} {sx:?} {sy:?} {sz:?} {} | {cap}",
                sc.det.scores[p], b.class_id
            )
            .unwrap();
        }
    }
    s
}

/// Parses [`predictions_to_text`] output into `n_scenes` prediction lists
/// of `(box, score, caption)`.
#[allow(clippy::type_complexity)]
pub fn predictions_from_text(
    text: &str,
    n_scenes: usize,
) -> Result<Vec<Vec<(Box3D, f64, Vec<String>)>>> {
    let mut out = vec![Vec::new(); n_scenes];
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let bad = || BicaError::Format(format!("bad prediction line {line:?}"));
        let (head, cap) = line.split_once('|').ok_or_else(bad)?;
        let f: Vec<&str> = head.split_whitespace().collect();
        if f.len() != 9 {
            return Err(bad());
        }
        let scene: usize = f[0].parse().map_err(|_| bad())?;
        let num = |k: usize| f[k].parse::<f32>().map_err(|_| bad());
        let b = Box3D::new(
            [num(2)?, num(3)?, num(4)?],
            [num(5)?, num(6)?, num(7)?],
            f[8].parse().map_err(|_| bad())?,
        );
        let score: f64 = f[1].parse().map_err(|_| bad())?;
        out.get_mut(scene)
            .ok_or_else(bad)?
            .push((b, score, super::tokenize(cap)));
    }
    Ok(out)
}
