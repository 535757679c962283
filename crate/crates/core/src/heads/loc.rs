//! Localization heads shared by every decoder layer.

use crate::config::Config;
use crate::geom::Box3D;
use crate::numerics::{Activation, Graph, Init, Mlp, Real, Var};

#[derive(Clone, Debug)]
pub struct LocHeads {
    pub center: Mlp,
    pub size: Mlp,
    pub class: Mlp,
    pub objectness: Mlp,
    /// Optional predicted-IoU head; carries no loss by default.
    pub iou: Option<Mlp>,
    pub size_scale: f64,
    pub n_class: usize,
}

/// Graph nodes of the head outputs for one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct BoxPreds {
    pub center: Var,
    pub size: Var,
    /// `[n×(n_class+1)]`, last column is "no object".
    pub class_logits: Var,
    pub objectness: Var,
    pub iou: Option<Var>,
}

/// Plain per-query prediction read back from a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxPrediction {
    pub center: [f32; 3],
    pub size: [f32; 3],
    pub class_logits: Vec<f32>,
    pub objectness_logit: f32,
}

impl BoxPrediction {
    pub fn score(&self) -> f64 {
        1.0 / (1.0 + (-(self.objectness_logit as f64)).exp())
    }

    /// Most likely real class (the "no object" column is ignored).
    pub fn class_id(&self) -> usize {
        let n = self.class_logits.len() - 1;
        (0..n).fold(0, |b, i| {
            if self.class_logits[i] > self.class_logits[b] {
                i
            } else {
                b
            }
        })
    }

    pub fn to_box(&self) -> Box3D {
        Box3D::new(self.center, self.size, self.class_id())
    }
}

impl LocHeads {
    pub fn new(init: &mut Init<'_>, cfg: &Config, n_class: usize) -> Self {
        let d = cfg.d_model;
        init.scoped("heads", |i| LocHeads {
            center: Mlp::new(i, "center", &[d, d, 3], Activation::Gelu),
            size: Mlp::new(i, "size", &[d, d, 3], Activation::Gelu),
            class: Mlp::new(i, "class", &[d, d, n_class + 1], Activation::Gelu),
            objectness: Mlp::new(i, "objectness", &[d, d, 1], Activation::Gelu),
            iou: cfg
                .iou_head
                .then(|| Mlp::new(i, "iou", &[d, d, 1], Activation::Gelu)),
            size_scale: cfg.size_scale,
            n_class,
        })
    }

    /// Centers are the query positions plus a predicted offset; sizes are
    /// `softplus(·)·size_scale`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, v: Var, positions: Var) -> BoxPreds {
        let off = self.center.forward(g, v);
        let center = g.add(positions, off);
        let s = self.size.forward(g, v);
        let s = g.softplus(s);
        let size = g.scale(s, self.size_scale);
        let class_logits = self.class.forward(g, v);
        let objectness = self.objectness.forward(g, v);
        let iou = self.iou.as_ref().map(|h| {
            let x = h.forward(g, v);
            g.sigmoid(x)
        });
        BoxPreds {
            center,
            size,
            class_logits,
            objectness,
            iou,
        }
    }
}

impl BoxPreds {
    pub fn read<T: Real>(&self, g: &Graph<'_, T>) -> Vec<BoxPrediction> {
        let (c, s, l, o) = (
            g.value(self.center),
            g.value(self.size),
            g.value(self.class_logits),
            g.value(self.objectness),
        );
        (0..c.rows())
            .map(|i| BoxPrediction {
                center: std::array::from_fn(|k| c.at(i, k).as_f32()),
                size: std::array::from_fn(|k| s.at(i, k).as_f32()),
                class_logits: l.row(i).iter().map(|x| x.as_f32()).collect(),
                objectness_logit: o.at(i, 0).as_f32(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamGroup, ParamStore, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(iou: bool) -> (ParamStore, LocHeads) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = Config {
            iou_head: iou,
            ..Config::tiny()
        };
        let h = LocHeads::new(
            &mut Init::new(&mut store, &mut rng, ParamGroup::Detector),
            &cfg,
            12,
        );
        (store, h)
    }

    fn zero_last(store: &mut ParamStore, m: &Mlp) {
        let l = m.layers.last().unwrap();
        store.get_mut(l.w).value.data_mut().fill(0.0);
        store.get_mut(l.b).value.data_mut().fill(0.0);
    }

    fn inputs(g: &mut Graph<'_, f32>, n: usize) -> (Var, Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = g.constant(
            Tensor::new(
                vec![n, 64],
                (0..n * 64).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap(),
        );
        let p = g.constant(
            Tensor::new(
                vec![n, 3],
                (0..n * 3).map(|_| rng.gen_range(0.0..10.0)).collect(),
            )
            .unwrap(),
        );
        (v, p)
    }

    #[test]
    fn zero_offset_and_size_closed_form() {
        let (mut store, h) = setup(false);
        zero_last(&mut store, &h.center);
        zero_last(&mut store, &h.size);
        let mut g = Graph::<f32>::new(&store);
        let (v, p) = inputs(&mut g, 5);
        let out = h.forward(&mut g, v, p);
        assert_eq!(g.value(out.center).data(), g.value(p).data());
        for &s in g.value(out.size).data() {
            assert!((s - std::f32::consts::LN_2).abs() < 1e-6);
        }
        assert_eq!(g.shape(out.class_logits), &[5, 13]);
        assert!(out.iou.is_none());
    }

    #[test]
    fn sizes_positive_and_optional_iou_head() {
        let (store, h) = setup(true);
        let mut g = Graph::<f32>::new(&store);
        let (v, p) = inputs(&mut g, 40);
        let out = h.forward(&mut g, v, p);
        assert!(g.value(out.size).data().iter().all(|&s| s > 0.0));
        assert_eq!(g.shape(out.iou.unwrap()), &[40, 1]);
        let preds = out.read(&g);
        assert_eq!(preds.len(), 40);
        assert!(preds
            .iter()
            .all(|b| b.class_id() < 12 && b.to_box().size.iter().all(|&s| s > 0.0)));
    }

    #[test]
    fn heads_share_parameters_across_layers() {
        let (store, h) = setup(false);
        let mut g = Graph::<f32>::new(&store);
        let (v3, p) = inputs(&mut g, 4);
        let v7 = g.scale(v3, 0.5);
        let a = h.forward(&mut g, v3, p);
        let b = h.forward(&mut g, v7, p);
        // the same parameter ids yield the same (memoized) parameter nodes
        let w = g.param(h.center.layers[0].w);
        assert_eq!(w, g.param(h.center.layers[0].w));
        assert_ne!(g.value(a.center).data(), g.value(b.center).data());
    }
}
