//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Values are computed
//! eagerly; [`Graph::backward`] walks the tape in reverse creation order and
//! accumulates gradients. Reductions always run in index order so that two runs
//! over the same inputs produce identical bits.
//!
//! Discrete choices made during the forward pass (sampling indices, groupings,
//! max-pool winners, matchings) can be recorded and replayed. The gradient
//! checker uses this to hold the piecewise structure of the network fixed while
//! it perturbs parameters.

use std::sync::Arc;

use super::params::{ParamGroup, ParamId, ParamStore};
use super::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, softmax_in_place, Real, Tensor};

/// Additive mask value for disallowed attention pairs.
pub const MASK_NEG: f32 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Abs,
    Relu,
    Gelu,
    Softplus,
    Sigmoid,
    Exp,
    Ln,
    Sin,
    Cos,
    Square,
}

/// Per-query allowed keys with their additive bias.
#[derive(Clone, Debug)]
pub struct AttnMask {
    nq: usize,
    nk: usize,
    rows: Vec<Vec<(u32, f32)>>,
}

impl AttnMask {
    /// Builds a mask from a dense additive `[nq×nk]` tensor. Entries at or below
    /// `MASK_NEG / 2` are treated as disallowed and skipped entirely.
    pub fn from_additive(t: &Tensor<f32>) -> Self {
        let (nq, nk) = (t.rows(), t.cols());
        let rows = (0..nq)
            .map(|i| {
                t.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v > MASK_NEG * 0.5)
                    .map(|(j, &v)| (j as u32, v))
                    .collect()
            })
            .collect();
        AttnMask { nq, nk, rows }
    }

    /// Query `i` sees exactly the keys listed in `allowed[i]`, without bias.
    pub fn from_allowed(nk: usize, allowed: Vec<Vec<u32>>) -> Self {
        assert!(
            allowed.iter().flatten().all(|&j| (j as usize) < nk),
            "key index out of range"
        );
        let rows = allowed
            .into_iter()
            .map(|r| r.into_iter().map(|j| (j, 0.0)).collect())
            .collect::<Vec<_>>();
        AttnMask {
            nq: rows.len(),
            nk,
            rows,
        }
    }

    /// Lower-triangular mask: query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        let rows = (0..n)
            .map(|i| (0..=i).map(|j| (j as u32, 0.0)).collect())
            .collect();
        AttnMask { nq: n, nk: n, rows }
    }

    /// Query `i` sees key `j` iff their positions are within `radius`.
    pub fn radius(q_xyz: &Tensor<f32>, k_xyz: &Tensor<f32>, radius: f32) -> Self {
        let r2 = radius * radius;
        let rows = (0..q_xyz.rows())
            .map(|i| {
                let a = q_xyz.row(i);
                (0..k_xyz.rows())
                    .filter(|&j| {
                        let b = k_xyz.row(j);
                        let d =
                            (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
                        d <= r2
                    })
                    .map(|j| (j as u32, 0.0))
                    .collect()
            })
            .collect();
        AttnMask {
            nq: q_xyz.rows(),
            nk: k_xyz.rows(),
            rows,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nq, self.nk)
    }

    pub fn allowed(&self, i: usize) -> &[(u32, f32)] {
        &self.rows[i]
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Nll {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    BceLogits {
        x: Var,
        targets: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
        mask: Option<Arc<AttnMask>>,
        flagged: Vec<bool>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    SumCols(Var),
    Reshape(Var),
    Transpose(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
enum DecisionMode {
    #[default]
    Off,
    Record,
    Replay,
}

/// Recorded discrete decisions of one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecisionLog {
    entries: Vec<Vec<usize>>,
}

impl DecisionLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<T>>,
    store: &'a ParamStore,
    param_vars: Vec<Option<Var>>,
    trainable: Vec<bool>,
    perturb: Option<(ParamId, usize, T)>,
    mode: DecisionMode,
    log: DecisionLog,
    cursor: usize,
}

impl<'a, T: Real> Graph<'a, T> {
    /// New graph over `store`. Every parameter outside the `Fixed` group is trainable.
    pub fn new(store: &'a ParamStore) -> Self {
        let trainable = store
            .iter()
            .map(|(_, p)| p.group != ParamGroup::Fixed)
            .collect();
        Graph {
            nodes: Vec::new(),
            store,
            param_vars: vec![None; store.len()],
            trainable,
            perturb: None,
            mode: DecisionMode::Off,
            log: DecisionLog::default(),
            cursor: 0,
        }
    }

    /// Restricts gradient flow to parameters of the given groups.
    pub fn with_trainable_groups(mut self, groups: &[ParamGroup]) -> Self {
        self.trainable = self
            .store
            .iter()
            .map(|(_, p)| groups.contains(&p.group))
            .collect();
        self
    }

    /// Adds `delta` to one scalar of one parameter when it is first read.
    pub fn with_perturbation(mut self, id: ParamId, index: usize, delta: T) -> Self {
        self.perturb = Some((id, index, delta));
        self
    }

    pub fn recording(mut self) -> Self {
        self.mode = DecisionMode::Record;
        self
    }

    pub fn replaying(mut self, log: DecisionLog) -> Self {
        self.mode = DecisionMode::Replay;
        self.log = log;
        self.cursor = 0;
        self
    }

    pub fn take_decisions(&mut self) -> DecisionLog {
        std::mem::take(&mut self.log)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Runs a discrete decision, or replays the recorded one.
    pub fn decide(&mut self, f: impl FnOnce() -> Vec<usize>) -> Vec<usize> {
        match self.mode {
            DecisionMode::Off => f(),
            DecisionMode::Record => {
                let d = f();
                self.log.entries.push(d.clone());
                d
            }
            DecisionMode::Replay => {
                let d = self
                    .log
                    .entries
                    .get(self.cursor)
                    .cloned()
                    .expect("decision log exhausted");
                self.cursor += 1;
                d
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_f32(&mut self, t: &Tensor<f32>) -> Var {
        self.push(t.cast(), Op::Leaf, false)
    }

    /// Leaf node for a parameter; repeated reads return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let mut value: Tensor<T> = self.store.get(id).value.cast();
        if let Some((pid, idx, delta)) = self.perturb {
            if pid == id {
                value.data_mut()[idx] += delta;
            }
        }
        let rg = self.trainable[id.0];
        let v = self.push(value, Op::Param, rg);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![T::zero(); n * m];
        matmul_acc(av.data(), bv.data(), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), rg)
    }

    /// `x·W + b` for `x[n×din]`, `W[din×dout]`, `b[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(r));
        let c = xv.cols();
        assert_eq!(rv.len(), c, "add_row {:?} + {:?}", xv.shape(), rv.shape());
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(r);
        self.push(out, Op::AddRow(x, r), rg)
    }

    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(r));
        let c = xv.cols();
        assert_eq!(rv.len(), c, "mul_row {:?} * {:?}", xv.shape(), rv.shape());
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        let rg = self.rg(x) || self.rg(r);
        self.push(out, Op::MulRow(x, r), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f = |x: T| -> T {
            match kind {
                Unary::Neg => -x,
                Unary::Abs => x.abs(),
                Unary::Relu => {
                    if x > T::zero() {
                        x
                    } else {
                        T::zero()
                    }
                }
                Unary::Gelu => gelu(x),
                Unary::Softplus => softplus(x),
                Unary::Sigmoid => sigmoid(x),
                Unary::Exp => x.exp(),
                Unary::Ln => x.ln(),
                Unary::Sin => x.sin(),
                Unary::Cos => x.cos(),
                Unary::Square => x * x,
            }
        };
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, Op::Unary(a, kind), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let n = xv.len() / d;
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(gv.len(), d);
        let eps = T::lit(eps);
        let inv_d = T::one() / T::lit(d as f64);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &xv.data()[i * d..(i + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = super::tensor::softmax(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Per-row negative log-likelihood `-log softmax(logits_i)[targets_i]`, shape `[n]`.
    pub fn nll_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let c = lv.cols();
        let n = lv.len() / c;
        assert_eq!(n, targets.len(), "nll target count");
        let mut probs = lv.data().to_vec();
        let mut out = vec![T::zero(); n];
        for i in 0..n {
            let row = &mut probs[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            out[i] = lse - row[targets[i]];
            softmax_in_place(row);
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::from_parts(vec![n], out),
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Elementwise binary cross-entropy with logits against constant targets.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[T]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), targets.len());
        let data = xv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| softplus(z) - z * t)
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(
            out,
            Op::BceLogits {
                x,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Scaled dot-product attention over pre-projected `q[nq×d]`, `k[nk×d]`,
    /// `v[nk×d]` split into `heads` heads. Rows with no allowed key receive
    /// uniform weights and are flagged.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<Arc<AttnMask>>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = (qv.rows(), qv.cols());
        let nk = kv.rows();
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.rows(), nk);
        assert_eq!(vv.cols(), d);
        assert!(
            heads > 0 && d % heads == 0,
            "d={d} not divisible by heads={heads}"
        );
        if let Some(m) = &mask {
            assert_eq!(m.shape(), (nq, nk), "mask shape");
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * d];
        let mut flagged = vec![false; nq];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut scores: Vec<T> = Vec::with_capacity(nk);
        let mut keys: Vec<usize> = Vec::with_capacity(nk);
        let mut bias: Vec<T> = Vec::with_capacity(nk);
        for i in 0..nq {
            keys.clear();
            bias.clear();
            match &mask {
                Some(m) if !m.allowed(i).is_empty() => {
                    for &(j, b) in m.allowed(i) {
                        keys.push(j as usize);
                        bias.push(T::lit(b as f64));
                    }
                }
                Some(_) => {
                    flagged[i] = true;
                    keys.extend(0..nk);
                    bias.extend(std::iter::repeat_n(T::zero(), nk));
                }
                None => {
                    keys.extend(0..nk);
                    bias.extend(std::iter::repeat_n(T::zero(), nk));
                }
            }
            for h in 0..heads {
                let qrow = &qd[i * d + h * dh..i * d + (h + 1) * dh];
                let prow = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                if flagged[i] {
                    let u = T::one() / T::lit(nk as f64);
                    prow.iter_mut().for_each(|p| *p = u);
                } else {
                    scores.clear();
                    for (&j, &b) in keys.iter().zip(&bias) {
                        let krow = &kd[j * d + h * dh..j * d + (h + 1) * dh];
                        let mut s = T::zero();
                        for (&a, &c) in qrow.iter().zip(krow) {
                            s += a * c;
                        }
                        scores.push(s * scale + b);
                    }
                    softmax_in_place(&mut scores);
                    for (&j, &p) in keys.iter().zip(&scores) {
                        prow[j] = p;
                    }
                }
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for &j in &keys {
                    let p = prow[j];
                    let vrow = &vd[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::from_parts(vec![nq, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                mask,
                flagged,
            },
            rg,
        )
    }

    /// Attention weights `[heads×nq×nk]` of an attention node.
    pub fn attention_weights(&self, node: Var) -> Option<Tensor<T>> {
        match &self.nodes[node.0].op {
            Op::Attention {
                q, k, heads, probs, ..
            } => {
                let nq = self.value(*q).rows();
                let nk = self.value(*k).rows();
                Some(Tensor::from_parts(vec![*heads, nq, nk], probs.clone()))
            }
            _ => None,
        }
    }

    /// Rows of an attention node that had every key masked out.
    pub fn attention_flags(&self, node: Var) -> Option<&[bool]> {
        match &self.nodes[node.0].op {
            Op::Attention { flagged, .. } => Some(flagged),
            _ => None,
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), n, "concat_cols row mismatch");
            for i in 0..n {
                out[i * total + off..i * total + off + w].copy_from_slice(pv.row(i));
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_parts(vec![n, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), c, "concat_rows col mismatch");
            data.extend_from_slice(pv.data());
            n += pv.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_parts(vec![n, c], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        assert!(start + len <= c);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![n, len], out),
            Op::SliceCols(x, start),
            rg,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(start + len <= xv.rows());
        let out = xv.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![len, c], out),
            Op::SliceRows(x, start),
            rg,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = self.value(x).gather_rows(idx);
        let rg = self.rg(x);
        self.push(out, Op::GatherRows(x, idx.to_vec()), rg)
    }

    /// Max-pool over groups of rows: `groups` holds `g·group_size` row indices of
    /// `x`; output row `i` is the columnwise max over its group. Winners are a
    /// recorded decision (first occurrence wins ties).
    pub fn group_max(&mut self, x: Var, groups: &[usize], group_size: usize) -> Var {
        assert!(group_size > 0 && groups.len().is_multiple_of(group_size));
        let ng = groups.len() / group_size;
        let (xd, c) = {
            let xv = self.value(x);
            (xv.data().to_vec(), xv.cols())
        };
        let argmax = self.decide(|| {
            let mut am = vec![0usize; ng * c];
            for gi in 0..ng {
                let members = &groups[gi * group_size..(gi + 1) * group_size];
                for col in 0..c {
                    let mut best = members[0];
                    let mut bv = xd[best * c + col];
                    for &r in &members[1..] {
                        let v = xd[r * c + col];
                        if v > bv {
                            bv = v;
                            best = r;
                        }
                    }
                    am[gi * c + col] = best;
                }
            }
            am
        });
        let mut out = vec![T::zero(); ng * c];
        for gi in 0..ng {
            for col in 0..c {
                out[gi * c + col] = xd[argmax[gi * c + col] * c + col];
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![ng, c], out),
            Op::GroupMax { x, argmax },
            rg,
        )
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sum, shape `[n]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let n = xv.len() / c.max(1);
        let mut out = vec![T::zero(); n];
        for (i, row) in xv.data().chunks(c).enumerate() {
            let mut s = T::zero();
            for &v in row {
                s += v;
            }
            out[i] = s;
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![n], out), Op::SumCols(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape size mismatch");
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    /// Gradients of every parameter read by this graph, in parameter order.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(ParamId, Vec<T>)> {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.nodes[v.0].requires_grad {
                    return None;
                }
                grads.get(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect()
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if rg(*a) {
                    let ga = slot(grads, *a, n * k);
                    matmul_a_bt_acc(g, bv.data(), ga, n, k, m);
                }
                if rg(*b) {
                    let gb = slot(grads, *b, k * m);
                    matmul_at_b_acc(av.data(), g, gb, n, k, m);
                }
            }
            Op::AddRow(x, r) => {
                let c = val(*r).len();
                if rg(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if rg(*r) {
                    let gr = slot(grads, *r, c);
                    for row in g.chunks(c) {
                        for (o, &v) in gr.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (val(*x), val(*r));
                let c = rv.len();
                if rg(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (grow, orow) in g.chunks(c).zip(gx.chunks_mut(c)) {
                        for j in 0..c {
                            orow[j] += grow[j] * rv.data()[j];
                        }
                    }
                }
                if rg(*r) {
                    let gr = slot(grads, *r, c);
                    for (grow, xrow) in g.chunks(c).zip(xv.data().chunks(c)) {
                        for j in 0..c {
                            gr[j] += grow[j] * xrow[j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if rg(*b) {
                    add_into(slot(grads, *b, g.len()), g);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if rg(*b) {
                    let gb = slot(grads, *b, g.len());
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if rg(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if rg(*b) {
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if rg(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] / bv[i];
                    }
                }
                if rg(*b) {
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let (av, bv) = (val(*a).data(), val(*b).data());
                let pick_a = |i: usize| {
                    if is_min {
                        av[i] <= bv[i]
                    } else {
                        av[i] >= bv[i]
                    }
                };
                if rg(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        if pick_a(i) {
                            ga[i] += g[i];
                        }
                    }
                }
                if rg(*b) {
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        if !pick_a(i) {
                            gb[i] += g[i];
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, g.len());
                for (o, &v) in ga.iter_mut().zip(g) {
                    *o += v * *s;
                }
            }
            Op::AddScalar(a) => add_into(slot(grads, *a, g.len()), g),
            Op::Unary(a, kind) => {
                let x = val(*a).data();
                let y = node.value.data();
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Neg => -T::one(),
                        Unary::Abs => {
                            if x[i] > T::zero() {
                                T::one()
                            } else if x[i] < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Relu => {
                            if x[i] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Gelu => gelu_grad(x[i]),
                        Unary::Softplus => sigmoid(x[i]),
                        Unary::Sigmoid => y[i] * (T::one() - y[i]),
                        Unary::Exp => y[i],
                        Unary::Ln => T::one() / x[i],
                        Unary::Sin => x[i].cos(),
                        Unary::Cos => -x[i].sin(),
                        Unary::Square => T::lit(2.0) * x[i],
                    };
                    ga[i] += g[i] * d;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).len();
                let gv = val(*gamma).data();
                let n = rstd.len();
                if rg(*gamma) {
                    let gg = slot(grads, *gamma, d);
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if rg(*beta) {
                    let gb = slot(grads, *beta, d);
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                }
                if rg(*x) {
                    let gx = slot(grads, *x, n * d);
                    let inv_d = T::one() / T::lit(d as f64);
                    for i in 0..n {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dy = g[i * d + j] * gv[j];
                            s1 += dy;
                            s2 += dy * xhat[i * d + j];
                        }
                        for j in 0..d {
                            let dy = g[i * d + j] * gv[j];
                            gx[i * d + j] +=
                                rstd[i] * (dy - inv_d * s1 - xhat[i * d + j] * inv_d * s2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let gx = slot(grads, *x, g.len());
                for ((grow, yrow), orow) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let mut dot = T::zero();
                    for j in 0..c {
                        dot += grow[j] * yrow[j];
                    }
                    for j in 0..c {
                        orow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let gx = slot(grads, *x, g.len());
                for ((grow, yrow), orow) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let mut s = T::zero();
                    for &v in grow {
                        s += v;
                    }
                    for j in 0..c {
                        orow[j] += grow[j] - yrow[j].exp() * s;
                    }
                }
            }
            Op::Nll {
                logits,
                targets,
                probs,
            } => {
                let c = val(*logits).cols();
                let gl = slot(grads, *logits, probs.len());
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let ind = if j == t { T::one() } else { T::zero() };
                        gl[i * c + j] += g[i] * (probs[i * c + j] - ind);
                    }
                }
            }
            Op::BceLogits { x, targets } => {
                let xv = val(*x).data();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * (sigmoid(xv[i]) - targets[i]);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                mask,
                flagged,
            } => {
                self.attention_backward(
                    *q,
                    *k,
                    *v,
                    *heads,
                    probs,
                    mask.as_deref(),
                    flagged,
                    g,
                    grads,
                );
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if rg(p) {
                        let gp = slot(grads, p, n * w);
                        for i in 0..n {
                            add_into(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * total + off..i * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if rg(p) {
                        add_into(slot(grads, p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let (n, c) = (xv.rows(), xv.cols());
                let w = node.value.cols();
                let gx = slot(grads, *x, n * c);
                for i in 0..n {
                    add_into(
                        &mut gx[i * c + start..i * c + start + w],
                        &g[i * w..(i + 1) * w],
                    );
                }
            }
            Op::SliceRows(x, start) => {
                let xv = val(*x);
                let c = xv.cols();
                let gx = slot(grads, *x, xv.len());
                add_into(&mut gx[start * c..start * c + g.len()], g);
            }
            Op::GatherRows(x, idx) => {
                let xv = val(*x);
                let c = xv.cols();
                let gx = slot(grads, *x, xv.len());
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut gx[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::GroupMax { x, argmax } => {
                let xv = val(*x);
                let c = xv.cols();
                let gx = slot(grads, *x, xv.len());
                for (pos, &src) in argmax.iter().enumerate() {
                    gx[src * c + pos % c] += g[pos];
                }
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                let gx = slot(grads, *x, n);
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
            Op::SumCols(x) => {
                let xv = val(*x);
                let c = xv.cols();
                let gx = slot(grads, *x, xv.len());
                for (i, row) in gx.chunks_mut(c).enumerate() {
                    for o in row.iter_mut() {
                        *o += g[i];
                    }
                }
            }
            Op::Reshape(x) => add_into(slot(grads, *x, g.len()), g),
            Op::Transpose(x) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let gx = slot(grads, *x, g.len());
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        mask: Option<&AttnMask>,
        flagged: &[bool],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (nq, d) = (qv.rows(), qv.cols());
        let nk = kv.rows();
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut gq = vec![T::zero(); nq * d];
        let mut gk = vec![T::zero(); nk * d];
        let mut gv = vec![T::zero(); nk * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let all: Vec<usize> = (0..nk).collect();
        let mut keys: Vec<usize> = Vec::with_capacity(nk);
        let mut dp: Vec<T> = Vec::with_capacity(nk);
        for i in 0..nq {
            keys.clear();
            match mask {
                Some(m) if !flagged[i] => {
                    keys.extend(m.allowed(i).iter().map(|&(j, _)| j as usize))
                }
                _ => keys.extend_from_slice(&all),
            }
            for h in 0..heads {
                let prow = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
                dp.clear();
                for &j in &keys {
                    let vrow = &vd[j * d + h * dh..j * d + (h + 1) * dh];
                    let mut s = T::zero();
                    for (&a, &b) in go.iter().zip(vrow) {
                        s += a * b;
                    }
                    dp.push(s);
                    let p = prow[j];
                    let gvrow = &mut gv[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &a) in gvrow.iter_mut().zip(go) {
                        *o += p * a;
                    }
                }
                if flagged[i] {
                    continue;
                }
                let mut t = T::zero();
                for (&j, &s) in keys.iter().zip(&dp) {
                    t += prow[j] * s;
                }
                let qrow = &qd[i * d + h * dh..i * d + (h + 1) * dh];
                for (&j, &s) in keys.iter().zip(&dp) {
                    let ds = prow[j] * (s - t) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = &kd[j * d + h * dh..j * d + (h + 1) * dh];
                    let gqrow = &mut gq[i * d + h * dh..i * d + (h + 1) * dh];
                    for (o, &b) in gqrow.iter_mut().zip(krow) {
                        *o += ds * b;
                    }
                    let gkrow = &mut gk[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &a) in gkrow.iter_mut().zip(qrow) {
                        *o += ds * a;
                    }
                }
            }
        }
        if self.nodes[q.0].requires_grad {
            add_into(slot(grads, q, nq * d), &gq);
        }
        if self.nodes[k.0].requires_grad {
            add_into(slot(grads, k, nk * d), &gk);
        }
        if self.nodes[v.0].requires_grad {
            add_into(slot(grads, v, nk * d), &gv);
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mut mx = T::neg_infinity();
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut s = T::zero();
    for &v in row {
        s += (v - mx).exp();
    }
    mx + s.ln()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    T::lit(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}
