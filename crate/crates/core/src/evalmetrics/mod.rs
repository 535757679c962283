//! Caption metrics, the m@k protocol and detection diagnostics.

mod captions;
mod detection;
mod report;

pub use captions::{bleu4, rouge_l, tokenize, CiderScorer, BLEU_EPS, CIDER_SCALE, ROUGE_BETA};
pub use detection::{
    assign_gt, average_recall, m_at_k, mean_average_precision, DetectionScene, GtAssignment,
};
pub use report::{
    evaluate, predictions_from_text, predictions_to_text, EvalScene, MetricsReport, THRESHOLDS,
};
