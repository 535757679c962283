//! Localization heads and the caption head with its decoders.

pub mod caption;
pub mod decode;
pub mod loc;

pub use caption::{CaptionHead, CaptionStepper};
pub use decode::{beam_search, greedy_decode, CaptionSequence, StepModel};
pub use loc::{BoxPrediction, BoxPreds, LocHeads};
