//! Loss terms: vote, per-layer detection, caption MLE and SCST.

use super::hungarian::{hungarian, MatchAssignment};
use crate::config::Config;
use crate::error::Result;
use crate::geom::{box_giou_3d, giou_rows, Box3D};
use crate::heads::{BoxPrediction, BoxPreds};
use crate::numerics::{softmax, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// giou, cls, cnt, size
    pub alpha: [f64; 4],
    /// vote, detection sum, caption
    pub beta: [f64; 3],
    pub noobj_weight: f64,
    pub vote_margin: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &Config) -> Self {
        LossWeights {
            alpha: cfg.alpha,
            beta: cfg.beta,
            noobj_weight: cfg.noobj_weight,
            vote_margin: cfg.vote_margin,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::from_config(&Config::paper())
    }
}

/// Scalar values of every loss component of one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub vote: f64,
    /// `[giou, cls, cnt, size]` per decoder layer.
    pub det: Vec<[f64; 4]>,
    pub cap_mle: f64,
    pub cap_scst: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn det_layer(&self, l: usize, w: &LossWeights) -> f64 {
        (0..4).map(|k| w.alpha[k] * self.det[l][k]).sum()
    }

    /// `β1·vote + β2·Σ_l det_l + β3·(mle + scst)`.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        let det: f64 = (0..self.det.len()).map(|l| self.det_layer(l, w)).sum();
        w.beta[0] * self.vote + w.beta[1] * det + w.beta[2] * (self.cap_mle + self.cap_scst)
    }

    /// Component sums over decoder layers.
    pub fn det_sums(&self) -> [f64; 4] {
        let mut s = [0.0; 4];
        for d in &self.det {
            for k in 0..4 {
                s[k] += d[k];
            }
        }
        s
    }

    /// Elementwise mean of several breakdowns (det layers aligned).
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len().max(1) as f64;
        let layers = parts.iter().map(|p| p.det.len()).max().unwrap_or(0);
        let mut out = LossBreakdown {
            det: vec![[0.0; 4]; layers],
            ..Default::default()
        };
        for p in parts {
            out.vote += p.vote / n;
            out.cap_mle += p.cap_mle / n;
            out.cap_scst += p.cap_scst / n;
            out.total += p.total / n;
            for (l, d) in p.det.iter().enumerate() {
                for k in 0..4 {
                    out.det[l][k] += d[k] / n;
                }
            }
        }
        out
    }
}

/// `Σ_i w_i x_i` as a graph scalar for constant weights.
pub fn weighted_sum<T: Real>(g: &mut Graph<'_, T>, x: Var, w: &[f64]) -> Var {
    let shape = g.shape(x).to_vec();
    let wt = g.constant(
        Tensor::new(shape, w.iter().map(|&v| T::lit(v)).collect()).expect("weight count"),
    );
    let p = g.mul(x, wt);
    g.sum(p)
}

fn l1(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).abs()).sum()
}

/// Matching cost `[n_pred × n_gt]`, row-major, with the detection-loss weights.
pub fn match_cost(preds: &[BoxPrediction], gts: &[Box3D], w: &LossWeights) -> Vec<f64> {
    let mut c = Vec::with_capacity(preds.len() * gts.len());
    for p in preds {
        let pb = Box3D::new(p.center, p.size, 0);
        let logits = Tensor::new(
            vec![1, p.class_logits.len()],
            p.class_logits.iter().map(|&x| x as f64).collect(),
        )
        .expect("logit row");
        let prob = softmax(&logits);
        for gt in gts {
            c.push(
                w.alpha[0] * (1.0 - box_giou_3d(&pb, gt)) - w.alpha[1] * prob.data()[gt.class_id]
                    + w.alpha[2] * l1(&p.center, &gt.center)
                    + w.alpha[3] * l1(&p.size, &gt.size),
            );
        }
    }
    c
}

/// Mean over the `M` instance queries of the L1 distance between the voted
/// position `p_o[i]` and the center of the GT box containing the query's
/// pre-vote point `p_enc[origin[i]]`. Queries from background add zero.
pub fn vote_loss<T: Real>(
    g: &mut Graph<'_, T>,
    p_o: Var,
    origin: &[usize],
    p_enc: &Tensor<f32>,
    gts: &[Box3D],
    margin: f32,
) -> Var {
    let m = origin.len();
    let mut target = vec![T::zero(); m * 3];
    let mut mask = vec![0.0; m * 3];
    for (i, &o) in origin.iter().enumerate() {
        if let Some(b) = gts.iter().find(|b| b.contains(p_enc.row(o), margin)) {
            for k in 0..3 {
                target[i * 3 + k] = T::lit(b.center[k] as f64);
                mask[i * 3 + k] = 1.0 / m as f64;
            }
        }
    }
    let t = g.constant(Tensor::new(vec![m, 3], target).expect("shape"));
    let d = g.sub(p_o, t);
    let d = g.abs(d);
    weighted_sum(g, d, &mask)
}

/// Differentiable detection terms of one decoder layer.
pub struct DetTerms {
    pub giou: Var,
    pub cls: Var,
    pub cnt: Var,
    pub size: Var,
}

impl DetTerms {
    pub fn values<T: Real>(&self, g: &Graph<'_, T>) -> [f64; 4] {
        [self.giou, self.cls, self.cnt, self.size].map(|v| g.value(v).item().as_f64())
    }

    pub fn weighted<T: Real>(&self, g: &mut Graph<'_, T>, w: &LossWeights) -> Var {
        let parts = [self.giou, self.cls, self.cnt, self.size];
        let mut acc = g.scale(parts[0], w.alpha[0]);
        for k in 1..4 {
            let s = g.scale(parts[k], w.alpha[k]);
            acc = g.add(acc, s);
        }
        acc
    }
}

/// Matches one layer's predictions to the GT by Hungarian assignment.
pub fn match_layer<T: Real>(
    g: &Graph<'_, T>,
    preds: &BoxPreds,
    gts: &[Box3D],
    w: &LossWeights,
) -> Result<MatchAssignment> {
    let read = preds.read(g);
    hungarian(&match_cost(&read, gts, w), read.len(), gts.len())
}

/// Detection loss of one layer under `assign` (pairs of prediction, GT).
/// GIoU, center and size terms sum over matched pairs divided by the GT
/// count. The class term is the weighted cross-entropy over all queries
/// (unmatched ones target "no object" with weight `noobj_weight`) plus the
/// mean objectness BCE.
pub fn detection_loss<T: Real>(
    g: &mut Graph<'_, T>,
    preds: &BoxPreds,
    gts: &[Box3D],
    assign: &MatchAssignment,
    w: &LossWeights,
) -> DetTerms {
    let logits_shape = g.shape(preds.class_logits).to_vec();
    let (n, n_class) = (logits_shape[0], logits_shape[1] - 1);
    let zero = g.constant(Tensor::scalar(T::zero()));
    let (giou, cnt, size) = if assign.pairs.is_empty() {
        (zero, zero, zero)
    } else {
        let rows: Vec<usize> = assign.pairs.iter().map(|p| p.0).collect();
        let targets: Vec<Box3D> = assign.pairs.iter().map(|p| gts[p.1]).collect();
        let inv = 1.0 / gts.len() as f64;
        let c = g.gather_rows(preds.center, &rows);
        let s = g.gather_rows(preds.size, &rows);
        let gi = giou_rows(g, c, s, &targets);
        let gsum = g.sum(gi);
        let giou = g.scale(gsum, -inv);
        let giou = g.add_scalar(giou, rows.len() as f64 * inv);
        let tc = g.constant(
            Tensor::new(
                vec![rows.len(), 3],
                targets
                    .iter()
                    .flat_map(|b| b.center.map(|x| T::lit(x as f64)))
                    .collect(),
            )
            .expect("shape"),
        );
        let ts = g.constant(
            Tensor::new(
                vec![rows.len(), 3],
                targets
                    .iter()
                    .flat_map(|b| b.size.map(|x| T::lit(x as f64)))
                    .collect(),
            )
            .expect("shape"),
        );
        let dc = g.sub(c, tc);
        let dc = g.abs(dc);
        let dc = g.sum(dc);
        let ds = g.sub(s, ts);
        let ds = g.abs(ds);
        let ds = g.sum(ds);
        (giou, g.scale(dc, inv), g.scale(ds, inv))
    };
    let mut cls_t = vec![n_class; n];
    let mut wts = vec![w.noobj_weight; n];
    let mut obj_t = vec![T::zero(); n];
    for &(r, c) in &assign.pairs {
        cls_t[r] = gts[c].class_id;
        wts[r] = 1.0;
        obj_t[r] = T::one();
    }
    let wsum: f64 = wts.iter().sum();
    let nll = g.nll_rows(preds.class_logits, &cls_t);
    let wn: Vec<f64> = wts.iter().map(|x| x / wsum).collect();
    let ce = weighted_sum(g, nll, &wn);
    let bce = g.bce_with_logits(preds.objectness, &obj_t);
    let bce = g.mean(bce);
    let cls = g.add(ce, bce);
    DetTerms {
        giou,
        cls,
        cnt,
        size,
    }
}

/// Row weights for `nll_rows` over stacked sequences, each row of sequence
/// `r` receiving `coef[r]`.
pub fn row_weights(lens: &[usize], coef: &[f64]) -> Vec<f64> {
    lens.iter()
        .zip(coef)
        .flat_map(|(&l, &c)| std::iter::repeat_n(c, l))
        .collect()
}

/// Teacher-forced NLL summed over tokens, averaged over sequences.
/// `logits` stacks `Σ lens` rows; `targets` the matching next tokens.
pub fn caption_mle_loss<T: Real>(
    g: &mut Graph<'_, T>,
    logits: Var,
    targets: &[usize],
    lens: &[usize],
) -> Var {
    let nll = g.nll_rows(logits, targets);
    let coef = vec![1.0 / lens.len().max(1) as f64; lens.len()];
    weighted_sum(g, nll, &row_weights(lens, &coef))
}

/// SCST coefficients `(R_r − b) / |c_r|`.
pub fn scst_coefficients(rewards: &[f64], baseline: f64, lens: &[usize]) -> Vec<f64> {
    rewards
        .iter()
        .zip(lens)
        .map(|(&r, &l)| (r - baseline) / l as f64)
        .collect()
}

/// `−Σ_r (R_r − b) · log P(c_r) / |c_r|` from known log-probabilities.
pub fn scst_value(rewards: &[f64], baseline: f64, logprobs: &[f64], lens: &[usize]) -> f64 {
    -scst_coefficients(rewards, baseline, lens)
        .iter()
        .zip(logprobs)
        .map(|(c, lp)| c * lp)
        .sum::<f64>()
}

/// Graph form of [`scst_value`]: since `log P = −Σ nll`, the loss is the
/// coefficient-weighted NLL. `scale` multiplies every coefficient (used to
/// average over objects). Rewards are constants.
pub fn scst_loss<T: Real>(
    g: &mut Graph<'_, T>,
    logits: Var,
    targets: &[usize],
    lens: &[usize],
    rewards: &[f64],
    baseline: f64,
    scale: f64,
) -> Var {
    let nll = g.nll_rows(logits, targets);
    let coef: Vec<f64> = scst_coefficients(rewards, baseline, lens)
        .into_iter()
        .map(|c| c * scale)
        .collect();
    weighted_sum(g, nll, &row_weights(lens, &coef))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;

    fn pred(center: [f32; 3], size: [f32; 3], logits: Vec<f32>) -> BoxPrediction {
        BoxPrediction {
            center,
            size,
            class_logits: logits,
            objectness_logit: 0.0,
        }
    }

    fn preds_var(g: &mut Graph<'_, f64>, ps: &[BoxPrediction]) -> BoxPreds {
        let n = ps.len();
        let c = ps[0].class_logits.len();
        let t = |v: Vec<f64>, cols| Tensor::new(vec![n, cols], v).unwrap();
        BoxPreds {
            center: g.constant(t(
                ps.iter().flat_map(|p| p.center.map(f64::from)).collect(),
                3,
            )),
            size: g.constant(t(
                ps.iter().flat_map(|p| p.size.map(f64::from)).collect(),
                3,
            )),
            class_logits: g.constant(t(
                ps.iter()
                    .flat_map(|p| p.class_logits.iter().map(|&x| x as f64))
                    .collect(),
                c,
            )),
            objectness: g.constant(t(ps.iter().map(|p| p.objectness_logit as f64).collect(), 1)),
            iou: None,
        }
    }

    #[test]
    fn vote_loss_hand_cases() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store);
        let gt = [Box3D::new([0.0; 3], [1.0; 3], 0)];
        let p_enc = Tensor::new(vec![2, 3], vec![0.2, 0.0, 0.0, 5.0, 5.0, 5.0]).unwrap();
        let p_o = g.constant(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap());
        let l = vote_loss(&mut g, p_o, &[0], &p_enc, &gt, 0.05);
        assert_eq!(g.value(l).item(), 1.0);
        let l = vote_loss(&mut g, p_o, &[1], &p_enc, &gt, 0.05);
        assert_eq!(g.value(l).item(), 0.0);
        let at = g.constant(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
        let l = vote_loss(&mut g, at, &[0], &p_enc, &gt, 0.05);
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn match_cost_cases() {
        let w = LossWeights::default();
        let gt = [Box3D::new([0.0; 3], [1.0; 3], 1)];
        let exact = pred([0.0; 3], [1.0; 3], vec![0.0, 20.0, 0.0]);
        let off = pred([0.5, 0.0, 0.0], [1.0; 3], vec![0.0, 0.0, 0.0]);
        let c = match_cost(&[exact.clone(), off.clone(), exact.clone()], &gt, &w);
        assert!(c[0] < c[1]);
        assert_eq!(c[0], c[2]);
        // off: shifted by 0.5 along x -> IoU = 0.5/1.5 = 1/3, enclosing = union so GIoU = 1/3
        let want = 10.0 * (1.0 - 1.0 / 3.0) - 1.0 / 3.0 + 5.0 * 0.5;
        assert!((c[1] - want).abs() < 1e-9);
    }

    #[test]
    fn detection_loss_perfect_and_hand_case() {
        let store = ParamStore::new();
        let w = LossWeights::default();
        let gt = [Box3D::new([0.0; 3], [1.0; 3], 1)];
        let mut g = Graph::<f64>::new(&store);
        let mut p = pred([0.0; 3], [1.0; 3], vec![0.0, 20.0, 0.0]);
        p.objectness_logit = 20.0;
        let pv = preds_var(&mut g, &[p]);
        let a = match_layer(&g, &pv, &gt, &w).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        let t = detection_loss(&mut g, &pv, &gt, &a, &w).values(&g);
        assert!(t[0].abs() < 1e-12 && t[2] == 0.0 && t[3] == 0.0);
        assert!(t[1] < 1e-3);

        let logits = vec![1.0f32, 2.0, 0.5];
        let mut p = pred([0.5, 0.0, 0.0], [1.0; 3], logits.clone());
        p.objectness_logit = 0.0;
        let pv = preds_var(&mut g, &[p]);
        let terms = detection_loss(&mut g, &pv, &gt, &a, &w);
        let total = terms.weighted(&mut g, &w);
        let lse = logits.iter().map(|&x| (x as f64).exp()).sum::<f64>().ln();
        let ce = lse - 2.0;
        let bce = 2f64.ln();
        let want = 10.0 * (2.0 / 3.0) + (ce + bce) + 5.0 * 0.5;
        assert!((g.value(total).item() - want).abs() < 1e-12);
    }

    #[test]
    fn detection_loss_without_gt_is_no_object_only() {
        let store = ParamStore::new();
        let w = LossWeights::default();
        let mut g = Graph::<f64>::new(&store);
        let pv = preds_var(&mut g, &[pred([0.0; 3], [1.0; 3], vec![0.0, 0.0, 0.0])]);
        let a = match_layer(&g, &pv, &[], &w).unwrap();
        let t = detection_loss(&mut g, &pv, &[], &a, &w).values(&g);
        assert_eq!([t[0], t[2], t[3]], [0.0; 3]);
        assert!((t[1] - (3f64.ln() + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn caption_mle_closed_forms() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store);
        let uniform = g.constant(Tensor::zeros(&[3, 8]));
        let l = caption_mle_loss(&mut g, uniform, &[1, 5, 0], &[3]);
        assert!((g.value(l).item() - 3.0 * 8f64.ln()).abs() < 1e-12);
        let mut peaked = vec![-1e3; 3 * 8];
        for (r, t) in [1, 5, 0].iter().enumerate() {
            peaked[r * 8 + t] = 0.0;
        }
        let peaked = g.constant(Tensor::new(vec![3, 8], peaked).unwrap());
        let l = caption_mle_loss(&mut g, peaked, &[1, 5, 0], &[3]);
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn scst_hand_case_and_sign() {
        assert_eq!(scst_value(&[10.0, 0.0], 5.0, &[-2.0, -4.0], &[2, 2]), -5.0);
        assert_eq!(scst_value(&[3.0, 3.0], 3.0, &[-2.0, -4.0], &[2, 2]), 0.0);
        // above-baseline beam: the loss falls as its log-probability rises
        assert!(scst_value(&[7.0], 5.0, &[-0.5], &[1]) < scst_value(&[7.0], 5.0, &[-1.0], &[1]));
        // graph form: two sequences of two tokens, uniform over 4 symbols
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store);
        let logits = g.constant(Tensor::zeros(&[4, 4]));
        let l = scst_loss(
            &mut g,
            logits,
            &[0, 1, 2, 3],
            &[2, 2],
            &[10.0, 0.0],
            5.0,
            1.0,
        );
        let lp = -2.0 * 4f64.ln();
        assert!(
            (g.value(l).item() - scst_value(&[10.0, 0.0], 5.0, &[lp, lp], &[2, 2])).abs() < 1e-12
        );
    }

    #[test]
    fn scst_gradient_raises_rewarded_sequence() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store);
        let logits = g.constant(Tensor::zeros(&[1, 3]));
        // the loss decreases when the rewarded token's logit grows
        let base = {
            let l = scst_loss(&mut g, logits, &[2], &[1], &[8.0], 5.0, 1.0);
            g.value(l).item()
        };
        let up = g.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.1]).unwrap());
        let l = scst_loss(&mut g, up, &[2], &[1], &[8.0], 5.0, 1.0);
        assert!(g.value(l).item() < base);
    }

    #[test]
    fn total_recombines() {
        let w = LossWeights::default();
        let zero = LossBreakdown {
            det: vec![[0.0; 4]; 8],
            ..Default::default()
        };
        assert_eq!(zero.recombine(&w), 0.0);
        let b = LossBreakdown {
            vote: 0.3,
            det: vec![[0.5, 1.5, 0.2, 0.1], [0.25, 1.0, 0.1, 0.05]],
            cap_mle: 2.0,
            cap_scst: 0.0,
            total: 0.0,
        };
        let det = (10.0 * 0.5 + 1.5 + 5.0 * 0.2 + 0.1) + (10.0 * 0.25 + 1.0 + 5.0 * 0.1 + 0.05);
        assert!((b.recombine(&w) - (10.0 * 0.3 + det + 5.0 * 2.0)).abs() < 1e-12);
        assert_eq!(w.alpha, [10.0, 1.0, 5.0, 1.0]);
        assert_eq!(w.beta, [10.0, 1.0, 5.0]);
    }
}
