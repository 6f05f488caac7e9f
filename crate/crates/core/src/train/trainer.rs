//! Training configuration and the optimization loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LossBreakdown, Model, ModelKind, ModelSpec};
use crate::sensor::{band_subset, BandSubset};

use super::checkpoint::{Checkpoint, RngState};
use super::data::{LabeledScene, Normalization, PatchSampler, PreparedScene};
use super::optim::{Adam, AdamConfig};

/// Smallest patch that still exceeds the receptive-field need of a block.
pub const MIN_PATCH: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: ModelKind,
    pub band_subset: BandSubset,
    /// Patch side in image pixels.
    pub patch_size: usize,
    pub batch_size: usize,
    /// Total optimizer steps.
    pub steps: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Fraction of scenes held out for validation and again for testing.
    pub eval_split_fraction: f64,
    pub stem_width: usize,
    pub bottleneck_width: usize,
    pub num_blocks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let spec = ModelSpec::new(ModelKind::Ours, 1);
        let adam = AdamConfig::default();
        Self {
            arch: ModelKind::Ours,
            band_subset: BandSubset::All,
            patch_size: 64,
            batch_size: 8,
            steps: 1000,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            seed: 0,
            checkpoint_every: 0,
            eval_split_fraction: 0.15,
            stem_width: spec.stem_width,
            bottleneck_width: spec.bottleneck_width,
            num_blocks: spec.num_blocks,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn model_spec(&self, input_channels: usize) -> ModelSpec {
        ModelSpec::new(self.arch, input_channels)
            .with_widths(self.stem_width, self.bottleneck_width)
            .with_blocks(self.num_blocks)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < MIN_PATCH {
            return Err(Error::invalid(format!(
                "patch size must be at least {MIN_PATCH}, got {}",
                self.patch_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        self.adam().validate()?;
        self.model_spec(1).validate()
    }
}

/// Mutable training state.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub optimizer: Adam<f32>,
    pub normalization: Normalization,
    pub step: u64,
    rng: ChaCha8Rng,
    scenes: Vec<PreparedScene>,
    sampler: PatchSampler,
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// One entry per optimizer step.
    pub trace: Vec<LossBreakdown>,
}

fn prepare(config: &TrainConfig, scenes: &[LabeledScene], norm: Option<Normalization>) -> Result<(Normalization, Vec<PreparedScene>)> {
    if scenes.is_empty() {
        return Err(Error::invalid("training needs at least one scene"));
    }
    let images = scenes
        .iter()
        .map(|s| band_subset(&s.image, config.band_subset))
        .collect::<Result<Vec<_>>>()?;
    let norm = match norm {
        Some(n) => n,
        None => Normalization::fit(&images.iter().collect::<Vec<_>>())?,
    };
    let prepared = scenes
        .iter()
        .map(|s| PreparedScene::new(s, &norm))
        .collect::<Result<Vec<_>>>()?;
    for p in &prepared {
        let (h, w) = p.size();
        if h < config.patch_size || w < config.patch_size {
            return Err(Error::invalid(format!(
                "patch size {} exceeds a {h}x{w} scene",
                config.patch_size
            )));
        }
    }
    Ok((norm, prepared))
}

impl Trainer {
    /// Fresh model and optimizer; normalization is fitted on `scenes`.
    pub fn new(config: TrainConfig, scenes: &[LabeledScene]) -> Result<Self> {
        config.validate()?;
        let (normalization, prepared) = prepare(&config, scenes, None)?;
        let model = Model::new(config.model_spec(normalization.bands.len()), config.seed)?;
        // the batch stream gets its own stream id so it never aliases the
        // initialization draws
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            optimizer: Adam::new(config.adam()),
            sampler: PatchSampler::new(config.patch_size),
            config,
            model,
            normalization,
            step: 0,
            rng,
            scenes: prepared,
        })
    }

    /// Continues from a checkpoint with the same training scenes.
    pub fn resume(checkpoint: Checkpoint, scenes: &[LabeledScene]) -> Result<Self> {
        let config = checkpoint.config.clone();
        config.validate()?;
        let (normalization, prepared) = prepare(&config, scenes, Some(checkpoint.normalization))?;
        Ok(Self {
            sampler: PatchSampler::new(config.patch_size),
            rng: checkpoint.rng.restore()?,
            config,
            model: checkpoint.model,
            optimizer: checkpoint.optimizer,
            normalization,
            step: checkpoint.step,
            scenes: prepared,
        })
    }

    /// One optimizer iteration on a freshly sampled batch.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let (x, target) = self
            .sampler
            .batch(&self.scenes, self.config.batch_size, &mut self.rng)?;
        self.model.zero_grad();
        let loss = self.model.loss_and_backward(x, &target)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                semantic: loss.semantic,
                density: loss.density,
            });
        }
        self.optimizer.step(&mut self.model)?;
        self.step += 1;
        Ok(loss)
    }

    /// Steps until `config.steps` is reached; `on_checkpoint` receives a
    /// snapshot every `checkpoint_every` steps.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>) -> Result<Vec<LossBreakdown>> {
        let mut trace = Vec::new();
        while self.step < self.config.steps {
            trace.push(self.step()?);
            let every = self.config.checkpoint_every;
            if every > 0 && self.step.is_multiple_of(every) {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(trace)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            normalization: self.normalization.clone(),
            config: self.config.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
        }
    }
}

/// Trains a model on every scene in `dataset` for `config.steps` steps.
pub fn train(config: &TrainConfig, dataset: &[LabeledScene]) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), dataset)?;
    let trace = trainer.run(|_| Ok(()))?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        trace,
    })
}
