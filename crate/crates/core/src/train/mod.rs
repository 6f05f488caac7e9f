//! Training, persistence, prediction and evaluation.

mod checkpoint;
mod data;
mod optim;
mod predict;
mod trainer;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{
    load_scenes, scene_stems, split_scenes, LabeledScene, Normalization, PatchSampler, PreparedScene,
    SceneSplit,
};
pub use optim::{Adam, AdamConfig, Moments};
pub use predict::{
    ablate_bands, ablation_table, argmax_mask, evaluate, infer_tiled, predict, tile_starts, AblationRow,
    Prediction, Predictor, DEFAULT_OVERLAP, DEFAULT_TILE,
};
pub use trainer::{train, TrainConfig, TrainOutcome, Trainer, MIN_PATCH};
