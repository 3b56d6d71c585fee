use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PipelineError;
use crate::audio_io::{load_wav, pad_or_truncate, AudioClip, LabelSet, SAMPLE_RATE_HZ};
use crate::features::FeatureExtractor;
use crate::synthdata::Split;
use crate::tensor_nn::Tensor;

/// A labelled manifest row joined with its split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub path: String,
    pub label: String,
    pub split: Split,
}

fn read_csv(path: &Path, header: &str) -> Result<Vec<(String, String)>, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(PipelineError::Config(format!(
            "{} must start with {header:?}",
            path.display()
        )));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.rsplit_once(',')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .ok_or_else(|| PipelineError::Config(format!("bad row {l:?} in {}", path.display())))
        })
        .collect()
}

/// Reads `manifest.csv` and `split.csv` from a dataset directory. Rows are
/// returned sorted by path so results do not depend on manifest order.
pub fn read_dataset(dir: &Path) -> Result<(LabelSet, Vec<DatasetEntry>), PipelineError> {
    let labels = read_csv(&dir.join("manifest.csv"), "path,label")?;
    let splits: BTreeMap<String, String> =
        read_csv(&dir.join("split.csv"), "path,split")?.into_iter().collect();
    let label_set = LabelSet::infer(labels.iter().map(|(_, l)| l.as_str()))
        .ok_or_else(|| PipelineError::Config("manifest labels match no known label set".into()))?;
    let mut entries = labels
        .into_iter()
        .map(|(path, label)| {
            let split = match splits.get(&path).map(String::as_str) {
                Some("train") => Split::Train,
                Some("test") => Split::Test,
                other => {
                    return Err(PipelineError::Config(format!("{path}: bad split {other:?}")))
                }
            };
            Ok(DatasetEntry { path, label, split })
        })
        .collect::<Result<Vec<_>, _>>()?;
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok((label_set, entries))
}

/// Log-mel features for a list of clips, each padded or cut to a fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub label_set: LabelSet,
    pub n_frames: usize,
    pub n_mels: usize,
    /// `len x n_frames x n_mels`, row-major.
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    pub paths: Vec<String>,
}

pub fn clip_samples(clip_seconds: f64) -> usize {
    (clip_seconds * SAMPLE_RATE_HZ as f64).round() as usize
}

impl FeatureSet {
    pub fn empty(label_set: LabelSet, n_frames: usize, n_mels: usize) -> Self {
        Self {
            label_set,
            n_frames,
            n_mels,
            data: Vec::new(),
            labels: Vec::new(),
            paths: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn frame_len(&self) -> usize {
        self.n_frames * self.n_mels
    }

    pub fn push(&mut self, features: &[f64], label: usize, path: String) {
        assert_eq!(features.len(), self.frame_len(), "feature size");
        self.data.extend_from_slice(features);
        self.labels.push(label);
        self.paths.push(path);
    }

    /// `B x 1 x n_frames x n_mels` batch of the given rows.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let fl = self.frame_len();
        let mut data = Vec::with_capacity(idx.len() * fl);
        for &i in idx {
            data.extend_from_slice(&self.data[i * fl..(i + 1) * fl]);
        }
        Tensor::new(&[idx.len(), 1, self.n_frames, self.n_mels], data).expect("sizes agree")
    }

    pub fn subset(&self, idx: &[usize]) -> FeatureSet {
        let mut out = FeatureSet::empty(self.label_set, self.n_frames, self.n_mels);
        let fl = self.frame_len();
        for &i in idx {
            out.push(&self.data[i * fl..(i + 1) * fl], self.labels[i], self.paths[i].clone());
        }
        out
    }

    /// `k` rows per class chosen with `seed`, kept in original order.
    pub fn per_class_subset(&self, k: usize, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for c in 0..self.label_set.len() {
            let mut rows: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            rows.shuffle(&mut rng);
            keep.extend(rows.into_iter().take(k));
        }
        keep.sort_unstable();
        self.subset(&keep)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_set.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Loads one clip the way the pipeline sees it: strict 16 kHz, fixed length.
pub fn load_clip(path: &Path, clip_seconds: f64) -> Result<AudioClip, PipelineError> {
    let clip = load_wav(path).map_err(|e| PipelineError::from_audio(path, e))?;
    pad_or_truncate(&clip, clip_samples(clip_seconds)).map_err(|e| PipelineError::from_audio(path, e))
}

pub fn featurize_clip(
    clip: &AudioClip,
    extractor: &FeatureExtractor,
) -> Result<(usize, Vec<f64>), PipelineError> {
    let spec = extractor
        .extract(clip)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok((spec.n_frames, spec.data))
}

/// Loads and featurizes every clip of one split.
pub fn load_split(
    dir: &Path,
    split: Split,
    extractor: &FeatureExtractor,
    clip_seconds: f64,
) -> Result<FeatureSet, PipelineError> {
    let (label_set, entries) = read_dataset(dir)?;
    let n_frames = extractor.stft.n_frames(clip_samples(clip_seconds));
    let mut set = FeatureSet::empty(label_set, n_frames, extractor.filterbank.n_mels);
    for e in entries.into_iter().filter(|e| e.split == split) {
        let clip = load_clip(&dir.join(&e.path), clip_seconds)?;
        let (_, feats) = featurize_clip(&clip, extractor)?;
        let label = label_set.index_of(&e.label).expect("label set inferred from these rows");
        set.push(&feats, label, e.path);
    }
    Ok(set)
}
