//! Run configuration. One JSON file drives every command; relative paths
//! resolve against the file's directory, and command-line flags override
//! `seed`, `out` and `donor`.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "out": "run",
//!   "checkpoint": "run/model.fatm",
//!   "train": { "face_sets": ["toy/id0", "toy/id1"], "params": { "iterations": 5000 } },
//!   "deid": { "inputs": ["toy/id0"], "donor": "id1" },
//!   "eval": { "pairs": "toy/pairs.jsonl", "verifier": "toy/verifier.json" },
//!   "gen_toy": { "identities": [0, 1], "images": 500 }
//! }
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use deid_core::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `out` next to the config file.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Written by `train` (default `<out>/model.fatm`), read by `deid` and `eval`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub deid: DeidSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub gen_toy: GenToySection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Face-set directories, each holding PNGs and `landmarks.jsonl`. The
    /// directory name is the subject id.
    #[serde(default)]
    pub face_sets: Vec<PathBuf>,
    /// Continue from `checkpoint` and its optimizer sidecar when present.
    #[serde(default)]
    pub resume: bool,
    #[serde(default)]
    pub params: TrainConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DonorMode {
    /// One donor for every job.
    #[default]
    Fixed,
    /// Job `k` uses donor `k mod n` in checkpoint order.
    RoundRobin,
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeidSection {
    /// Frame directories; each is one job with one donor.
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    /// A JSON-lines file or a directory of `<stem>.json` files. Defaults to
    /// `<input>/landmarks.jsonl`; only meaningful with a single input.
    #[serde(default)]
    pub landmarks: Option<PathBuf>,
    /// Defaults to the checkpoint's first donor.
    #[serde(default)]
    pub donor: Option<String>,
    #[serde(default)]
    pub donor_mode: DonorMode,
    /// Multiplies the feather sigma.
    #[serde(default = "default_scale")]
    pub feather_scale: f64,
    /// Also write each feathered mask as `masks/<name>`.
    #[serde(default)]
    pub write_masks: bool,
}

impl Default for DeidSection {
    fn default() -> Self {
        DeidSection {
            inputs: Vec::new(),
            landmarks: None,
            donor: None,
            donor_mode: DonorMode::Fixed,
            feather_scale: default_scale(),
            write_masks: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// JSON lines `{"a": ..., "b": ...}`, image paths relative to the pairs
    /// file. Landmarks come from `landmarks.jsonl` beside each image.
    #[serde(default)]
    pub pairs: Option<PathBuf>,
    /// A serialized `ToyVerifier`.
    #[serde(default)]
    pub verifier: Option<PathBuf>,
    #[serde(default)]
    pub donor: Option<String>,
    #[serde(default = "default_scale")]
    pub feather_scale: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            pairs: None,
            verifier: None,
            donor: None,
            feather_scale: default_scale(),
        }
    }
}

fn default_identities() -> Vec<usize> {
    vec![0, 1]
}
fn default_images() -> usize {
    500
}
fn default_size() -> usize {
    deid_core::toyfaces::RENDER_SIZE
}
fn default_heldout() -> usize {
    50
}
fn default_pairs() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenToySection {
    /// Preset identity indices, written as subjects `id<k>`.
    #[serde(default = "default_identities")]
    pub identities: Vec<usize>,
    /// When nonzero, draw this many separable random identities instead,
    /// written as `subject<k>`.
    #[serde(default)]
    pub random_identities: usize,
    /// Training frames per subject.
    #[serde(default = "default_images")]
    pub images: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    /// Held-out frames per subject under `heldout/`, used to fit the
    /// verifier and to draw evaluation pairs.
    #[serde(default = "default_heldout")]
    pub heldout: usize,
    /// Same-subject held-out pairs written to `pairs.jsonl`.
    #[serde(default = "default_pairs")]
    pub pairs: usize,
}

impl Default for GenToySection {
    fn default() -> Self {
        GenToySection {
            identities: default_identities(),
            random_identities: 0,
            images: default_images(),
            size: default_size(),
            heldout: default_heldout(),
            pairs: default_pairs(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub donor: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads `path`, resolves relative paths against its directory and
    /// applies `overrides`.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.out.get_or_insert_with(|| PathBuf::from("out"));
        self.out.iter_mut().for_each(fix);
        self.checkpoint.iter_mut().for_each(fix);
        self.train.face_sets.iter_mut().for_each(fix);
        self.deid.inputs.iter_mut().for_each(fix);
        self.deid.landmarks.iter_mut().for_each(fix);
        self.eval.pairs.iter_mut().for_each(fix);
        self.eval.verifier.iter_mut().for_each(fix);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.donor {
            self.deid.donor = Some(d.clone());
            self.eval.donor = Some(d.clone());
        }
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(s) = self.seed {
            self.train.params.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("deid", self.deid.feather_scale), ("eval", self.eval.feather_scale)] {
            if !(s.is_finite() && s > 0.0) {
                bail!("{name}.feather_scale must be positive, got {s}");
            }
        }
        if self.gen_toy.size < 16 {
            bail!("gen_toy.size must be at least 16, got {}", self.gen_toy.size);
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir().join("model.fatm"))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}
