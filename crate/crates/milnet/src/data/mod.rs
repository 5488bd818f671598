//! Dataset ingestion, label handling, minibatch samplers, and the synthetic
//! dataset generator.
//!
//! A dataset directory is self-describing: WAV files next to
//! `weak_labels.csv` (clip tags), optionally `strong_labels.csv` (timed
//! events, evaluation only) and `split.txt` (explicit train/test listing;
//! without it the conventional head split applies). Extracted features may
//! be cached under `features/` as `.lmel` files.

pub mod labels;
pub mod prefetch;
pub mod resample;
pub mod sampler;
pub mod synth;
pub mod wav;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{self, FeatureMatrix};
use crate::tensor::Tensor;

pub use labels::{DatasetSplit, Recording, StrongEvent};
pub use sampler::{HnhSampler, PlainSampler};
pub use synth::{generate as synth_dataset, SynthConfig, SynthDataset};

/// Input stream flavour for a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Balanced half-and-half minibatches.
    Hnh,
    /// Conventional shuffled minibatches.
    #[default]
    Plain,
}

impl InputMode {
    pub fn parse(token: &str) -> Result<Self> {
        match token {
            "hnh" => Ok(InputMode::Hnh),
            "plain" => Ok(InputMode::Plain),
            other => Err(Error::Data(format!(
                "unknown input mode `{other}` (expected hnh or plain)"
            ))),
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            InputMode::Hnh => "hnh",
            InputMode::Plain => "plain",
        }
    }
}

/// Load the metadata of a dataset directory and split it. Errors name every
/// referenced WAV that is missing on disk.
pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let weak_path = dir.join("weak_labels.csv");
    let text = std::fs::read_to_string(&weak_path)
        .map_err(|e| Error::io(format!("reading {}", weak_path.display()), e))?;
    let mut recordings = labels::parse_weak_csv(&text)?;

    let mut missing = Vec::new();
    for r in &recordings {
        if !dir.join(format!("{}.wav", r.id)).exists() {
            missing.push(r.id.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "weak labels reference missing audio: {}",
            missing.join(", ")
        )));
    }

    let strong_path = dir.join("strong_labels.csv");
    let mut has_strong = BTreeSet::new();
    if strong_path.exists() {
        let text = std::fs::read_to_string(&strong_path)
            .map_err(|e| Error::io(format!("reading {}", strong_path.display()), e))?;
        let mut events = labels::parse_strong_csv(&text)?;
        for r in &mut recordings {
            if let Some(ev) = events.remove(&r.id) {
                has_strong.insert(r.id.clone());
                r.strong_labels = Some(ev);
                r.validate_consistency()?;
            } else if !r.is_positive() {
                // A negative recording has no event rows; the annotation is
                // the empty set. Positive recordings without rows stay
                // unannotated.
                has_strong.insert(r.id.clone());
                r.strong_labels = Some(Vec::new());
            }
        }
        if let Some(orphan) = events.keys().next() {
            return Err(Error::Data(format!(
                "strong labels reference unknown recording `{orphan}`"
            )));
        }
    }

    let split_path = dir.join("split.txt");
    let (train, test) = if split_path.exists() {
        let text = std::fs::read_to_string(&split_path)
            .map_err(|e| Error::io(format!("reading {}", split_path.display()), e))?;
        let listing = labels::parse_split_listing(&text)?;
        labels::split_by_listing(recordings, &listing)?
    } else {
        labels::split_by_convention(recordings, &has_strong)
    };
    Ok(DatasetSplit::from_recordings(train, test))
}

/// Longest clip accepted at ingestion; longer audio is cropped.
pub const MAX_CLIP_SECONDS: f64 = 5.0;

/// Read one recording's audio at the canonical rate, resampling if needed
/// and cropping to [`MAX_CLIP_SECONDS`].
pub fn load_audio(dir: &Path, id: &str) -> Result<Vec<f32>> {
    let (samples, rate) = wav::read_mono(&dir.join(format!("{id}.wav")))?;
    let mut samples = if rate == features::SAMPLE_RATE {
        samples
    } else {
        resample::resample(&samples, rate, features::SAMPLE_RATE)
    };
    let max_len = (MAX_CLIP_SECONDS * features::SAMPLE_RATE as f64) as usize;
    samples.truncate(max_len);
    Ok(samples)
}

/// A dataset with features extracted, padded to a common frame count, and
/// per-recording valid lengths retained for masking.
pub struct PreparedDataset {
    pub split: DatasetSplit,
    pub target_frames: usize,
    /// id → (padded grid, valid frame count).
    features: BTreeMap<String, (FeatureMatrix, usize)>,
}

impl PreparedDataset {
    /// Extract (or load cached) features for every recording and pad them
    /// to the longest natural frame count in the dataset.
    pub fn prepare(dir: &Path, split: DatasetSplit) -> Result<Self> {
        let cache_dir = dir.join("features");
        let mut raw = BTreeMap::new();
        for r in split.train.iter().chain(&split.test) {
            let cached = cache_dir.join(format!("{}.lmel", r.id));
            let fm = if cached.exists() {
                features::read_lmel(&cached)?
            } else {
                let samples = load_audio(dir, &r.id)?;
                features::extract_logmel(&samples, features::SAMPLE_RATE, &r.id)?
            };
            raw.insert(r.id.clone(), fm);
        }
        let target = raw.values().map(|f| f.frames).max().unwrap_or(0);
        if target == 0 {
            return Err(Error::Data("dataset has no recordings".into()));
        }
        let mut features_map = BTreeMap::new();
        for (id, fm) in raw {
            let (padded, valid) = features::pad_or_crop(&fm, target);
            features_map.insert(id, (padded, valid));
        }
        Ok(PreparedDataset {
            split,
            target_frames: target,
            features: features_map,
        })
    }

    pub fn features_of(&self, id: &str) -> Option<&(FeatureMatrix, usize)> {
        self.features.get(id)
    }

    /// Assemble a minibatch from recordings (of one split) by index list.
    pub fn minibatch(&self, recordings: &[Recording], indices: &[usize]) -> Result<Minibatch> {
        let batch = indices.len();
        let t = self.target_frames;
        let bands = features::N_BANDS;
        let n_labels = self.split.vocab.len();
        let mut feats = vec![0.0f32; batch * t * bands];
        let mut valid_frames = Vec::with_capacity(batch);
        let mut when_labels = Vec::with_capacity(batch);
        let mut who_targets = vec![0.0f32; batch * n_labels.max(1)];
        let mut ids = Vec::with_capacity(batch);
        for (row, &idx) in indices.iter().enumerate() {
            let rec = recordings.get(idx).ok_or_else(|| {
                Error::Data(format!("batch index {idx} out of range"))
            })?;
            let (fm, valid) = self.features.get(&rec.id).ok_or_else(|| {
                Error::Data(format!("no features prepared for {}", rec.id))
            })?;
            feats[row * t * bands..(row + 1) * t * bands].copy_from_slice(fm.values());
            valid_frames.push(*valid);
            when_labels.push(if rec.is_positive() { 1.0 } else { 0.0 });
            for class in &rec.weak_labels {
                if let Some(c) = self.split.class_index(class) {
                    who_targets[row * n_labels + c] = 1.0;
                }
            }
            ids.push(rec.id.clone());
        }
        Ok(Minibatch {
            features: Tensor::new(vec![batch, t, bands], feats)?,
            valid_frames,
            when_labels,
            who_targets: Tensor::new(vec![batch, n_labels.max(1)], who_targets)?,
            ids,
        })
    }
}

/// One training batch: padded feature block, per-recording valid lengths,
/// and both tasks' targets.
#[derive(Debug, Clone)]
pub struct Minibatch {
    /// `[B, T, 40]` log mel-band energies, padded rows at the log floor.
    pub features: Tensor<f32>,
    /// True (unpadded) frame count per recording.
    pub valid_frames: Vec<usize>,
    /// Bag label per recording (any event present).
    pub when_labels: Vec<f32>,
    /// `[B, num_labels]` multi-hot clip targets.
    pub who_targets: Tensor<f32>,
    pub ids: Vec<String>,
}

impl Minibatch {
    pub fn batch_size(&self) -> usize {
        self.valid_frames.len()
    }
}
