//! Central finite-difference checks of analytic parameter gradients in f64.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamGroup, ParamId, ParamStore};

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is numerically zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub loss: f64,
    pub checks: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Draws `n` distinct (parameter, index) coordinates among trainable
/// parameters, always including one coordinate from each parameter listed in
/// `must_include`.
pub fn sample_coords(
    store: &ParamStore,
    n: usize,
    must_include: &[ParamId],
    rng: &mut ChaCha8Rng,
) -> Vec<(ParamId, usize)> {
    let mut all: Vec<(ParamId, usize)> = Vec::new();
    for (id, p) in store.iter() {
        if p.group == ParamGroup::Fixed {
            continue;
        }
        for i in 0..p.value.len() {
            all.push((id, i));
        }
    }
    let mut out: Vec<(ParamId, usize)> = must_include
        .iter()
        .map(|&id| (id, rng.gen_range(0..store.get(id).value.len())))
        .collect();
    all.shuffle(rng);
    for c in all {
        if out.len() >= n {
            break;
        }
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// Compares analytic gradients from one recorded backward pass against
/// central differences with step `h`. Discrete decisions recorded in the base
/// pass are replayed for every perturbed evaluation.
pub fn check_gradients<F>(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    build: F,
) -> GradCheckReport
where
    F: Fn(&mut Graph<'_, f64>) -> Var,
{
    let mut g = Graph::<f64>::new(store).recording();
    let loss = build(&mut g);
    let loss_value = g.value(loss).item();
    let grads = g.backward(loss);
    let analytic: Vec<(ParamId, Vec<f64>)> = g.param_grads(&grads);
    let log = g.take_decisions();

    let eval = |id: ParamId, idx: usize, delta: f64| -> f64 {
        let mut g = Graph::<f64>::new(store)
            .with_perturbation(id, idx, delta)
            .replaying(log.clone());
        let l = build(&mut g);
        g.value(l).item()
    };

    let checks = coords
        .iter()
        .map(|&(id, idx)| {
            let a = analytic
                .iter()
                .find(|(pid, _)| *pid == id)
                .map_or(0.0, |(_, gr)| gr[idx]);
            let n = (eval(id, idx, h) - eval(id, idx, -h)) / (2.0 * h);
            CoordCheck {
                param: store.get(id).name.clone(),
                index: idx,
                analytic: a,
                numeric: n,
                rel_error: rel_error(a, n),
            }
        })
        .collect();
    GradCheckReport {
        loss: loss_value,
        checks,
    }
}
