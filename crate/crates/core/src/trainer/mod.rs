//! Alternating shared-encoder training.
//!
//! Every outer iteration visits the face sets in order. For set `i` it draws
//! a batch, augments it, reconstructs it through the encoder and decoder
//! `i`, and takes one ADAM step on both. Each set owns the optimizer state
//! for its encoder/decoder pair. All randomness comes from streams keyed by
//! `(seed, iteration, set, sample)`.

mod augment;
mod state;

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig};
pub use state::{load_state, save_state, state_path, STATE_MAGIC, STATE_VERSION};

use crate::error::{Error, Result};
use crate::facegeom::{LandmarkSet, CANONICAL_SIZE};
use crate::fatm::{FatmConfig, FatmModel, FACE_SIZE};
use crate::image::{Image, CHANNELS};
use crate::rng;
use crate::tensor::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

/// Aligned 80x80 faces of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSet {
    subject_id: String,
    faces: Vec<Image>,
    landmarks: Vec<LandmarkSet>,
}

impl FaceSet {
    /// `landmarks` are the source-frame landmarks, one per face, or empty.
    pub fn new(subject_id: &str, faces: Vec<Image>, landmarks: Vec<LandmarkSet>) -> Result<Self> {
        if subject_id.is_empty() {
            return Err(Error::InvalidData("face set has an empty subject id".into()));
        }
        if faces.is_empty() {
            return Err(Error::InvalidData(format!("face set `{subject_id}` is empty")));
        }
        if let Some(f) = faces.iter().find(|f| f.dims() != (CANONICAL_SIZE, CANONICAL_SIZE)) {
            return Err(Error::InvalidShape(format!(
                "face set `{subject_id}`: face is {:?}, expected {CANONICAL_SIZE}x{CANONICAL_SIZE}",
                f.dims()
            )));
        }
        if !landmarks.is_empty() && landmarks.len() != faces.len() {
            return Err(Error::InvalidData(format!(
                "face set `{subject_id}`: {} faces but {} landmark sets",
                faces.len(),
                landmarks.len()
            )));
        }
        Ok(FaceSet {
            subject_id: subject_id.to_string(),
            faces,
            landmarks,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn faces(&self) -> &[Image] {
        &self.faces
    }

    pub fn landmarks(&self) -> &[LandmarkSet] {
        &self.landmarks
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// The first `n` faces as one set and the rest as another.
    pub fn split_at(&self, n: usize) -> Result<(FaceSet, FaceSet)> {
        let lm = |r: std::ops::Range<usize>| if self.landmarks.is_empty() { Vec::new() } else { self.landmarks[r].to_vec() };
        let n = n.min(self.len());
        Ok((
            FaceSet::new(&self.subject_id, self.faces[..n].to_vec(), lm(0..n))?,
            FaceSet::new(&self.subject_id, self.faces[n..].to_vec(), lm(n..self.len()))?,
        ))
    }
}

fn default_iterations() -> u64 {
    1_000_000
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    5e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Iterations between checkpoints; 0 disables them.
    #[serde(default)]
    pub checkpoint_interval: u64,
    #[serde(default = "FatmConfig::full")]
    pub model: FatmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: default_iterations(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            augment: AugmentConfig::default(),
            checkpoint_interval: 0,
            model: FatmConfig::full(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        self.augment.validate()?;
        self.model.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Mean L1 of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub set_id: String,
    pub loss: f64,
}

/// `n` indices drawn uniformly with replacement.
pub fn sample_indices(len: usize, n: usize, rng: &mut rng::Rng) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::InvalidData("cannot sample from an empty face set".into()));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    Ok((0..n).map(|_| rng.gen_range(0..len as u64) as usize).collect())
}

pub fn sample_batch(set: &FaceSet, n: usize, rng: &mut rng::Rng) -> Result<Vec<Image>> {
    Ok(sample_indices(set.len(), n, rng)?.into_iter().map(|i| set.faces[i].clone()).collect())
}

/// Stacks 64x64 images into an `[N, 64, 64, 3]` tensor.
pub fn batch_tensor(images: &[Image]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * FACE_SIZE * FACE_SIZE * CHANNELS);
    for img in images {
        if img.dims() != (FACE_SIZE, FACE_SIZE) {
            return Err(Error::InvalidShape(format!("batch image is {:?}, expected 64x64", img.dims())));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[images.len(), FACE_SIZE, FACE_SIZE, CHANNELS], data)
}

const BATCH_KEY: &str = "batch";
const AUGMENT_KEY: &str = "augment";
const INIT_KEY: &str = "init";

/// Resumable training run.
pub struct Trainer<'a> {
    sets: &'a [FaceSet],
    config: TrainConfig,
    model: FatmModel<f32>,
    optimizers: Vec<AdamState<f32>>,
    iteration: u64,
    history: Vec<LossRecord>,
}

fn pair_params<'m>(model: &'m mut FatmModel<f32>, id: &str) -> Result<Vec<&'m mut Tensor<f32>>> {
    let (enc, dec) = model.encoder_and_decoder_mut(id)?;
    let mut params = enc.tensors_mut();
    params.extend(dec.tensors_mut());
    Ok(params)
}

impl<'a> Trainer<'a> {
    pub fn new(sets: &'a [FaceSet], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if sets.len() < 2 {
            return Err(Error::InvalidConfig(format!("training needs at least 2 face sets, got {}", sets.len())));
        }
        if let Some(s) = sets.iter().find(|s| s.is_empty()) {
            return Err(Error::InvalidData(format!("face set `{}` is empty", s.subject_id)));
        }
        let ids: Vec<&str> = sets.iter().map(|s| s.subject_id()).collect();
        let model = FatmModel::new(config.model, &ids, rng::derive_seed(config.seed, &[rng::name_key(INIT_KEY)]))?;
        let mut optimizers = Vec::with_capacity(sets.len());
        for s in sets {
            let enc = model.encoder().tensors().iter();
            let dec = model.decoder(s.subject_id())?.tensors().iter();
            optimizers.push(AdamState::new(config.adam(), &enc.chain(dec).collect::<Vec<_>>())?);
        }
        Ok(Trainer {
            sets,
            config,
            model,
            optimizers,
            iteration: 0,
            history: Vec::new(),
        })
    }

    /// Continues from a checkpoint and its optimizer sidecar.
    pub fn resume(sets: &'a [FaceSet], config: TrainConfig, checkpoint: &Path) -> Result<Self> {
        let mut t = Trainer::new(sets, config)?;
        let model = crate::fatm::load_checkpoint(checkpoint)?;
        if model.config() != t.model.config() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint model {:?} differs from configured {:?}",
                model.config(),
                t.model.config()
            )));
        }
        let donors: Vec<&str> = model.donor_ids().collect();
        let expected: Vec<&str> = sets.iter().map(|s| s.subject_id()).collect();
        if donors != expected {
            return Err(Error::InvalidConfig(format!("checkpoint donors {donors:?} differ from face sets {expected:?}")));
        }
        let (iteration, optimizers) = load_state(&state_path(checkpoint), &model, t.config.adam())?;
        t.model = model;
        t.optimizers = optimizers;
        t.iteration = iteration;
        Ok(t)
    }

    pub fn model(&self) -> &FatmModel<f32> {
        &self.model
    }

    pub fn into_model(self) -> FatmModel<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed outer iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// Augmented batch for set `set` at the current iteration.
    pub fn batch(&self, set: usize) -> Result<Vec<Image>> {
        let seed = self.config.seed;
        let keys = [self.iteration, set as u64];
        let mut r = rng::stream(seed, &[keys[0], keys[1], rng::name_key(BATCH_KEY)]);
        let faces = sample_batch(&self.sets[set], self.config.batch_size, &mut r)?;
        Ok(faces
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let mut r = rng::stream(seed, &[keys[0], keys[1], k as u64, rng::name_key(AUGMENT_KEY)]);
                augment(f, &self.config.augment, &mut r)
            })
            .collect())
    }

    /// Trains one batch of set `set`; returns its mean L1.
    pub fn step_set(&mut self, set: usize) -> Result<f64> {
        let batch = batch_tensor(&self.batch(set)?)?;
        let id = self.sets[set].subject_id();
        let loss = self.model.accumulate_reconstruction_grads(&batch, &batch, id)?;
        if !loss.is_finite() {
            return Err(Error::InvalidData(format!("non-finite loss at iteration {} for `{id}`", self.iteration)));
        }
        adam_step(&mut pair_params(&mut self.model, id)?, &mut self.optimizers[set])?;
        let loss = loss as f64;
        self.history.push(LossRecord {
            iteration: self.iteration,
            set_id: id.to_string(),
            loss,
        });
        Ok(loss)
    }

    /// One outer iteration over every set.
    pub fn step(&mut self) -> Result<()> {
        for s in 0..self.sets.len() {
            self.step_set(s)?;
        }
        self.iteration += 1;
        Ok(())
    }

    /// Writes the checkpoint and its optimizer sidecar.
    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        crate::fatm::save_checkpoint(&self.model, checkpoint)?;
        save_state(&state_path(checkpoint), self.iteration, &self.model, &self.optimizers)
    }

    /// Runs to the configured iteration count, calling `on_checkpoint` every
    /// `checkpoint_interval` iterations.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(&Trainer<'a>) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            self.step()?;
            let every = self.config.checkpoint_interval;
            if every > 0 && self.iteration % every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

/// Trains from scratch and returns the model with its loss history.
pub fn train(sets: &[FaceSet], config: &TrainConfig) -> Result<(FatmModel<f32>, Vec<LossRecord>)> {
    let mut t = Trainer::new(sets, config.clone())?;
    t.run(|_| Ok(()))?;
    let history = std::mem::take(&mut t.history);
    Ok((t.into_model(), history))
}

pub fn write_loss_csv(w: &mut impl Write, history: &[LossRecord], header: bool) -> std::io::Result<()> {
    if header {
        writeln!(w, "iteration,set_id,mean_l1")?;
    }
    for r in history {
        writeln!(w, "{},{},{}", r.iteration, r.set_id, r.loss)?;
    }
    Ok(())
}

/// Mean of the first or last `n` losses of one set.
pub fn window_mean(history: &[LossRecord], set_id: &str, n: usize, trailing: bool) -> Option<f64> {
    let losses: Vec<f64> = history.iter().filter(|r| r.set_id == set_id).map(|r| r.loss).collect();
    if losses.len() < n || n == 0 {
        return None;
    }
    let w = if trailing { &losses[losses.len() - n..] } else { &losses[..n] };
    Some(w.iter().sum::<f64>() / n as f64)
}
