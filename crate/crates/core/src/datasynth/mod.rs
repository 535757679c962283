//! Synthetic rooms of colored boxes with template captions.

pub mod dataset;
pub mod scene;
pub mod vocab;

pub use dataset::{generate_dataset, scene_seed, Dataset, FORMAT_VERSION};
pub use scene::{
    describe, make_scene, make_scene_with, CaptionMode, SceneOptions, SceneSample, N_CLASSES,
};
pub use vocab::{Vocabulary, COLORS, DIRECTIONS, EOS, PAD, SIZES};
