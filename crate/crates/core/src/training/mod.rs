//! Matching, losses and the three-stage training driver.

mod ablation;
mod gradcheck;
mod hungarian;
mod losses;
mod step;
mod trainer;

pub use ablation::{run_ablation, AblationReport, AblationRun};
pub use gradcheck::{model_gradcheck, GRADCHECK_STEP, GRADCHECK_TOL};
pub use hungarian::{hungarian, MatchAssignment};
pub use losses::{
    caption_mle_loss, detection_loss, match_cost, match_layer, row_weights, scst_coefficients,
    scst_loss, scst_value, vote_loss, weighted_sum, DetTerms, LossBreakdown, LossWeights,
};
pub use step::{scst_scene_loss, strip_eos, supervised_loss, SceneLoss, ScstTarget};
pub use trainer::{Progress, RunOptions, StepRecord, Trainer};
