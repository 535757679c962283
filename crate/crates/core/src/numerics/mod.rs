//! Tensors, reverse-mode differentiation, layers and the optimizer.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{AttnMask, DecisionLog, Grads, Graph, Var, MASK_NEG};
pub use layers::{Activation, AttnOutput, Embedding, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use optim::{AdamWConfig, CosineSchedule, OptimizerState, StepStats};
pub use params::{Init, ParamGroup, ParamId, ParamStore, Parameter};
pub use tensor::{matmul, softmax, Real, Tensor};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::gradcheck::{check_gradients, sample_coords};
    use super::*;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap()
    }

    fn store_with(tensors: &[(&str, Tensor<f32>)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = tensors
            .iter()
            .map(|(n, t)| s.add(n, t.clone(), ParamGroup::Detector))
            .collect();
        (s, ids)
    }

    #[test]
    fn linear_identity_and_bias_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[3, 3]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let (s, ids) = store_with(&[("w", eye), ("b", Tensor::zeros(&[3]))]);
        let mut g = Graph::<f32>::new(&s);
        let xv = g.constant(x.clone());
        let (w, b) = (g.param(ids[0]), g.param(ids[1]));
        let y = g.linear(xv, w, b);
        assert_eq!(g.value(y).data(), x.data());

        let bias = Tensor::new(vec![2], vec![0.5, -1.5]).unwrap();
        let (s, ids) = store_with(&[("w", rand_tensor(&mut rng, &[3, 2])), ("b", bias)]);
        let mut g = Graph::<f32>::new(&s);
        let xv = g.constant(Tensor::zeros(&[4, 3]));
        let (w, b) = (g.param(ids[0]), g.param(ids[1]));
        let y = g.linear(xv, w, b);
        for i in 0..4 {
            assert_eq!(g.value(y).row(i), &[0.5, -1.5]);
        }
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 2]);
        let (s, ids) = store_with(&[("w", w.clone()), ("b", Tensor::zeros(&[2]))]);
        let mut g = Graph::<f32>::new(&s);
        let xv = g.constant(x.clone());
        let (wv, bv) = (g.param(ids[0]), g.param(ids[1]));
        let y = g.linear(xv, wv, bv);
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0f64;
                for k in 0..4 {
                    acc += x.at(i, k) as f64 * w.at(k, j) as f64;
                }
                assert!((g.value(y).at(i, j) as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let beta = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (s, ids) = store_with(&[("g", Tensor::full(&[4], 1.7)), ("b", beta.clone())]);
        let mut g = Graph::<f64>::new(&s);
        let x = g.constant(Tensor::full(&[2, 4], 3.25));
        let (ga, be) = (g.param(ids[0]), g.param(ids[1]));
        let y = g.layer_norm(x, ga, be, 1e-5);
        for i in 0..2 {
            for j in 0..4 {
                assert!((g.value(y).at(i, j) - beta.data()[j] as f64).abs() < 1e-12);
            }
        }

        let (s, ids) = store_with(&[("g", Tensor::full(&[8], 1.0)), ("b", Tensor::zeros(&[8]))]);
        let xr = rand_tensor(&mut rng, &[5, 8]);
        let mut g = Graph::<f32>::new(&s);
        let x = g.constant(xr.clone());
        let (ga, be) = (g.param(ids[0]), g.param(ids[1]));
        let y = g.layer_norm(x, ga, be, 1e-5);
        for i in 0..5 {
            let row = g.value(y).row(i);
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
            // scalar oracle
            let xin = xr.row(i);
            let m: f64 = xin.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
            let v: f64 = xin.iter().map(|&q| (q as f64 - m).powi(2)).sum::<f64>() / 8.0;
            for j in 0..8 {
                let want = (xin[j] as f64 - m) / (v + 1e-5).sqrt();
                assert!((row[j] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn attention_single_key_and_one_hot_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s, _) = store_with(&[]);
        let mut g = Graph::<f64>::new(&s);
        let q = g.constant(rand_tensor(&mut rng, &[3, 4]).cast());
        let k = g.constant(rand_tensor(&mut rng, &[1, 4]).cast());
        let vt: Tensor<f64> = rand_tensor(&mut rng, &[1, 4]).cast();
        let v = g.constant(vt.clone());
        let o = g.attention(q, k, v, 2, None);
        for i in 0..3 {
            assert_eq!(g.value(o).row(i), vt.row(0));
        }
        assert!(g
            .attention_weights(o)
            .unwrap()
            .data()
            .iter()
            .all(|&w| w == 1.0));

        let k = g.constant(rand_tensor(&mut rng, &[5, 4]).cast());
        let v = g.constant(rand_tensor(&mut rng, &[5, 4]).cast());
        let mut m = Tensor::full(&[3, 5], MASK_NEG);
        for i in 0..3 {
            m.data_mut()[i * 5 + 2] = 0.0;
        }
        let o = g.attention(q, k, v, 1, Some(Arc::new(AttnMask::from_additive(&m))));
        let w = g.attention_weights(o).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                assert_eq!(w.at(i, j), if j == 2 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn fully_masked_rows_are_uniform_and_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s, _) = store_with(&[]);
        let mut g = Graph::<f32>::new(&s);
        let q = g.constant(rand_tensor(&mut rng, &[2, 4]));
        let k = g.constant(rand_tensor(&mut rng, &[4, 4]));
        let v = g.constant(rand_tensor(&mut rng, &[4, 4]));
        let mut m = Tensor::zeros(&[2, 4]);
        m.row_mut(1).iter_mut().for_each(|x| *x = MASK_NEG);
        let o = g.attention(q, k, v, 2, Some(Arc::new(AttnMask::from_additive(&m))));
        assert_eq!(g.attention_flags(o).unwrap(), &[false, true]);
        let w = g.attention_weights(o).unwrap();
        for h in 0..2 {
            for j in 0..4 {
                assert_eq!(w.data()[(h * 2 + 1) * 4 + j], 0.25);
            }
        }
        assert!(g.value(o).is_finite());
    }

    #[test]
    fn attention_matches_hand_oracle() {
        // 2 queries x 3 keys, one head, identity projections
        let q = [[0.3f64, -0.2], [1.0, 0.5]];
        let k = [[0.1f64, 0.4], [-0.7, 0.2], [0.5, 0.5]];
        let v = [[1.0f64, 2.0], [3.0, -1.0], [0.0, 0.5]];
        let (s, _) = store_with(&[]);
        let mut g = Graph::<f64>::new(&s);
        let qv = g.constant(
            Tensor::from_rows(&q.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
        );
        let kv = g.constant(
            Tensor::from_rows(&k.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
        );
        let vv = g.constant(
            Tensor::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
        );
        let o = g.attention(qv, kv, vv, 1, None);
        for i in 0..2 {
            let sc: Vec<f64> = (0..3)
                .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt())
                .collect();
            let z: f64 = sc.iter().map(|s| s.exp()).sum();
            for c in 0..2 {
                let want: f64 = (0..3).map(|j| sc[j].exp() / z * v[j][c]).sum();
                assert!((g.value(o).at(i, c) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mha_rejects_indivisible_heads() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut s, &mut rng, ParamGroup::Detector);
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            MultiHeadAttention::new(&mut init, "a", 6, 4)
        }));
        assert!(r.is_err());
    }

    #[test]
    fn backward_outer_product_and_unused_param() {
        let x = Tensor::new(vec![1, 3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (s, ids) = store_with(&[
            ("w", rand_tensor(&mut rng, &[3, 2])),
            ("unused", rand_tensor(&mut rng, &[2])),
        ]);
        let mut g = Graph::<f64>::new(&s);
        let xv = g.constant_f32(&x);
        let w = g.param(ids[0]);
        let _ = g.param(ids[1]);
        let y = g.matmul(xv, w);
        let l = g.sum(y);
        let grads = g.backward(l);
        let pg = g.param_grads(&grads);
        let gw = &pg.iter().find(|(id, _)| *id == ids[0]).unwrap().1;
        assert_eq!(gw, &vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let unused = pg.iter().find(|(id, _)| *id == ids[1]);
        assert!(unused.is_none() || unused.unwrap().1.iter().all(|&v| v == 0.0));
    }

    fn op_store(rng: &mut ChaCha8Rng) -> (ParamStore, Vec<ParamId>) {
        store_with(&[
            ("x", rand_tensor(rng, &[4, 6])),
            ("w", rand_tensor(rng, &[6, 6])),
            ("b", rand_tensor(rng, &[6])),
            ("gamma", rand_tensor(rng, &[6])),
            ("beta", rand_tensor(rng, &[6])),
            ("kv", rand_tensor(rng, &[5, 6])),
        ])
    }

    fn assert_op_grad(seed: u64, build: impl Fn(&mut Graph<'_, f64>, &[ParamId]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, ids) = op_store(&mut rng);
        let coords = sample_coords(&s, 20, &[], &mut rng);
        let report = check_gradients(&s, &coords, 1e-3, |g| build(g, &ids));
        assert!(
            report.passes(1e-3),
            "max rel error {} in {:?}",
            report.max_rel_error(),
            report.checks
        );
    }

    /// Weighted sum so the check is sensitive to every output entry.
    fn probe(g: &mut Graph<'_, f64>, y: Var) -> Var {
        let n = g.value(y).len();
        let shape = g.shape(y).to_vec();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let wv = g.constant(Tensor::new(shape, w).unwrap());
        let p = g.mul(y, wv);
        g.sum(p)
    }

    #[test]
    fn gradcheck_linear() {
        assert_op_grad(10, |g, ids| {
            let (x, w, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
            let y = g.linear(x, w, b);
            probe(g, y)
        });
    }

    #[test]
    fn gradcheck_layer_norm() {
        assert_op_grad(11, |g, ids| {
            let (x, ga, be) = (g.param(ids[0]), g.param(ids[3]), g.param(ids[4]));
            let y = g.layer_norm(x, ga, be, 1e-5);
            probe(g, y)
        });
    }

    #[test]
    fn gradcheck_softmax_and_log_softmax() {
        assert_op_grad(12, |g, ids| {
            let x = g.param(ids[0]);
            let y = g.softmax(x);
            let z = g.log_softmax(x);
            let a = probe(g, y);
            let b = probe(g, z);
            g.add(a, b)
        });
    }

    #[test]
    fn gradcheck_attention_with_mask() {
        assert_op_grad(13, |g, ids| {
            let (x, kv, w) = (g.param(ids[0]), g.param(ids[5]), g.param(ids[1]));
            let q = g.matmul(x, w);
            let mut m = Tensor::zeros(&[4, 5]);
            m.data_mut()[3] = MASK_NEG;
            m.data_mut()[7] = -0.5;
            let y = g.attention(q, kv, kv, 2, Some(Arc::new(AttnMask::from_additive(&m))));
            probe(g, y)
        });
    }

    #[test]
    fn gradcheck_nll_bce_and_elementwise() {
        assert_op_grad(14, |g, ids| {
            let x = g.param(ids[0]);
            let kv = g.param(ids[5]);
            let n = g.nll_rows(x, &[0, 5, 2, 3]);
            let a = g.sum(n);
            let t: Vec<f64> = (0..30).map(|i| (i % 2) as f64).collect();
            let bce = g.bce_with_logits(kv, &t);
            let b = g.sum(bce);
            let sp = g.softplus(kv);
            let sg = g.sigmoid(kv);
            let ge = g.gelu(kv);
            let q = g.div(sp, sg);
            let r = g.mul(q, ge);
            let mx = g.maximum(r, sp);
            let mn = g.minimum(mx, sg);
            let c = probe(g, mn);
            let s1 = g.add(a, b);
            g.add(s1, c)
        });
    }

    #[test]
    fn gradcheck_structural_ops() {
        assert_op_grad(15, |g, ids| {
            let x = g.param(ids[0]);
            let kv = g.param(ids[5]);
            let cat = g.concat_rows(&[x, kv]);
            let gath = g.gather_rows(cat, &[0, 8, 3, 3, 6]);
            let gm = g.group_max(cat, &[0, 1, 2, 5, 6, 7], 3);
            let sl = g.slice_cols(gath, 1, 4);
            let sr = g.slice_rows(gm, 1, 1);
            let cc = g.concat_cols(&[sl, sl]);
            let t = g.transpose(cc);
            let sq = g.square(t);
            let sc = g.sum_cols(sq);
            let a = probe(g, sc);
            let b = probe(g, sr);
            g.add(a, b)
        });
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut s = ParamStore::new();
            let mha = {
                let mut init = Init::new(&mut s, &mut rng, ParamGroup::Detector);
                MultiHeadAttention::new(&mut init, "mha", 8, 2)
            };
            let x = rand_tensor(&mut rng, &[6, 8]);
            let mut g = Graph::<f32>::new(&s);
            let xv = g.constant(x);
            let o = mha.forward(&mut g, xv, xv, xv, None).out;
            g.value(o).clone()
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
