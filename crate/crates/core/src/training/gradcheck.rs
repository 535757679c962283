//! Finite-difference check of the full supervised loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::LossWeights;
use super::step::supervised_loss;
use crate::config::Config;
use crate::datasynth::{make_scene, Vocabulary, N_CLASSES};
use crate::error::Result;
use crate::model::BicaModel;
use crate::numerics::gradcheck::{check_gradients, sample_coords, GradCheckReport};
use crate::numerics::{ParamGroup, ParamId, ParamStore};

pub const GRADCHECK_STEP: f64 = 1e-3;
pub const GRADCHECK_TOL: f64 = 1e-3;

/// One parameter per top-level module (`encoder`, `queries.vote`, ...) plus
/// the BiCA gates, so every stage of the network is probed.
fn coverage(store: &ParamStore) -> Vec<ParamId> {
    let mut seen: Vec<String> = Vec::new();
    let mut out = Vec::new();
    for (id, p) in store.iter() {
        if p.group == ParamGroup::Fixed {
            continue;
        }
        let parts: Vec<&str> = p.name.split('.').collect();
        let module = if parts[0] == "queries" || parts[0] == "bica" {
            parts[..2.min(parts.len())].join(".")
        } else {
            parts[0].to_string()
        };
        let gate = p.name.ends_with("o4c.gamma") || p.name.ends_with("c4o.lambda");
        if gate || !seen.contains(&module) {
            seen.push(module);
            out.push(id);
        }
    }
    out
}

/// Checks `samples` parameter coordinates of the vote + detection + caption
/// loss on a two-object scene generated from `seed`, in f64 with central
/// differences of step [`GRADCHECK_STEP`].
pub fn model_gradcheck(cfg: &Config, samples: usize, seed: u64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let scene = make_scene(seed, 2)?;
    let mut store = ParamStore::new();
    let vocab = Vocabulary::standard();
    let model = BicaModel::new(cfg, N_CLASSES, vocab.len(), &mut store, cfg.seed);
    let w = LossWeights::from_config(cfg);
    // fail early on bad input rather than inside the closure
    supervised_loss(
        &model,
        &mut crate::numerics::Graph::<f64>::new(&store),
        &scene,
        &w,
        true,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample_coords(&store, samples, &coverage(&store), &mut rng);
    Ok(check_gradients(&store, &coords, GRADCHECK_STEP, |g| {
        supervised_loss(&model, g, &scene, &w, true)
            .expect("validated above")
            .loss
    }))
}
