//! Clip-level audio contract: PCM16 mono 16 kHz WAV in, normalized float
//! samples out.

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use thiserror::Error;

/// The only sample rate accepted by the pipeline.
pub const SAMPLE_RATE_HZ: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt WAV header: {0}")]
    CorruptHeader(String),
    #[error("sample rate {found} Hz does not match required {expected} Hz")]
    SampleRateMismatch { found: u32, expected: u32 },
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono PCM audio with its sample rate.
#[derive(Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl fmt::Debug for AudioClip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AudioClip")
            .field("len", &self.samples.len())
            .field("sample_rate_hz", &self.sample_rate_hz)
            .finish()
    }
}

impl AudioClip {
    /// Builds a clip, checking that samples are non-empty, finite and within [-1, 1].
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(AudioError::InvalidClip("no samples".into()));
        }
        if sample_rate_hz == 0 {
            return Err(AudioError::InvalidClip("sample rate must be positive".into()));
        }
        if let Some(i) = samples
            .iter()
            .position(|s| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(AudioError::InvalidClip(format!(
                "sample {i} = {} is outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Multiplies every sample by `gain`, clamping to [-1, 1].
    pub fn scaled(&self, gain: f32) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|s| (s * gain).clamp(-1.0, 1.0))
                .collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// Which label vocabulary a clip is annotated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSet {
    /// Binary cry presence.
    Detection,
    /// Six cry reasons.
    Reason,
    /// Ten synthetic sound events used for warm-start pretraining.
    Pretrain,
}

const DETECTION_LABELS: [&str; 2] = ["no-cry", "cry"];
const REASON_LABELS: [&str; 6] = ["awake", "hug", "sleepy", "uncomfortable", "diaper", "hungry"];
const PRETRAIN_LABELS: [&str; 10] = [
    "event0", "event1", "event2", "event3", "event4", "event5", "event6", "event7", "event8",
    "event9",
];

impl LabelSet {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            LabelSet::Detection => &DETECTION_LABELS,
            LabelSet::Reason => &REASON_LABELS,
            LabelSet::Pretrain => &PRETRAIN_LABELS,
        }
    }

    pub fn len(self) -> usize {
        self.names().len()
    }

    pub fn index_of(self, name: &str) -> Option<usize> {
        self.names().iter().position(|n| *n == name)
    }

    /// Finds the label set whose vocabulary contains every given name.
    pub fn infer<'a>(mut names: impl Iterator<Item = &'a str>) -> Option<LabelSet> {
        let first = names.next()?;
        let candidates = [LabelSet::Detection, LabelSet::Reason, LabelSet::Pretrain];
        let mut possible: Vec<LabelSet> = candidates
            .into_iter()
            .filter(|s| s.index_of(first).is_some())
            .collect();
        for n in names {
            possible.retain(|s| s.index_of(n).is_some());
        }
        possible.first().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub clip: AudioClip,
    pub label: usize,
    pub label_set: LabelSet,
}

impl LabeledClip {
    pub fn new(clip: AudioClip, label: usize, label_set: LabelSet) -> Result<Self> {
        if label >= label_set.len() {
            return Err(AudioError::InvalidClip(format!(
                "label {label} out of range for {label_set:?}"
            )));
        }
        Ok(Self {
            clip,
            label,
            label_set,
        })
    }

    pub fn label_name(&self) -> &'static str {
        self.label_set.names()[self.label]
    }
}

/// Loads a PCM16 mono WAV file, requiring 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    load_wav_with(path, true)
}

/// Loads a PCM16 mono WAV file. With `strict` off, any sample rate is accepted.
pub fn load_wav_with(path: impl AsRef<Path>, strict: bool) -> Result<AudioClip> {
    let file = File::open(path.as_ref())?;
    let reader = hound::WavReader::new(BufReader::new(file)).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedFormat(format!(
            "{:?} {}-bit, expected PCM 16-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(AudioError::UnsupportedFormat(format!(
            "{} channels, expected mono",
            spec.channels
        )));
    }
    if strict && spec.sample_rate != SAMPLE_RATE_HZ {
        return Err(AudioError::SampleRateMismatch {
            found: spec.sample_rate,
            expected: SAMPLE_RATE_HZ,
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<f32>, _>>()
        .map_err(map_hound)?;
    AudioClip::new(samples, spec.sample_rate)
}

fn map_hound(e: hound::Error) -> AudioError {
    // The file itself opened fine, so read failures mean a malformed container.
    match e {
        hound::Error::Unsupported => AudioError::UnsupportedFormat("unsupported WAV encoding".into()),
        other => AudioError::CorruptHeader(other.to_string()),
    }
}

fn map_hound_write(e: hound::Error) -> AudioError {
    match e {
        hound::Error::IoError(io) => AudioError::Io(io),
        other => AudioError::UnsupportedFormat(other.to_string()),
    }
}

/// Converts a float sample to PCM16, rounding to nearest.
pub fn to_pcm16(sample: f32) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes a clip as PCM16 mono WAV.
pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(map_hound_write)?;
    for &s in &clip.samples {
        writer.write_sample(to_pcm16(s)).map_err(map_hound_write)?;
    }
    writer.finalize().map_err(map_hound_write)
}

/// Truncates (keeping the prefix) or zero-pads a clip to exactly `target_len` samples.
pub fn pad_or_truncate(clip: &AudioClip, target_len: usize) -> Result<AudioClip> {
    if target_len == 0 {
        return Err(AudioError::InvalidClip("target length must be positive".into()));
    }
    let mut samples = clip.samples.clone();
    samples.resize(target_len, 0.0);
    Ok(AudioClip {
        samples,
        sample_rate_hz: clip.sample_rate_hz,
    })
}

/// Scales the clip so its peak magnitude is exactly 1. Silent clips are returned unchanged.
pub fn peak_normalize(clip: &AudioClip) -> AudioClip {
    let peak = clip.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
    if peak == 0.0 {
        return clip.clone();
    }
    let samples = clip
        .samples
        .iter()
        .map(|&s| (s / peak).clamp(-1.0, 1.0))
        .collect();
    AudioClip {
        samples,
        sample_rate_hz: clip.sample_rate_hz,
    }
}
