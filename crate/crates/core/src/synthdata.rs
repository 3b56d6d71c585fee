//! Deterministic synthetic stand-ins for the cry datasets.
//!
//! Cry-like clips are amplitude-modulated harmonic stacks with periodic
//! bursts; adult speech is a low, quiet, irregular harmonic voice; background
//! is Voss-McCartney pink noise. Class differences live in the fixed tables
//! [`REASON_CLASSES`] and [`EVENT_CLASSES`].

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{save_wav, AudioClip, AudioError, LabelSet, LabeledClip, SAMPLE_RATE_HZ};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad synth spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Default clip length.
pub const CLIP_SECONDS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detect,
    Classify,
    Pretrain,
}

impl Task {
    pub fn label_set(self) -> LabelSet {
        match self {
            Task::Detect => LabelSet::Detection,
            Task::Classify => LabelSet::Reason,
            Task::Pretrain => LabelSet::Pretrain,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Detect => "detect",
            Task::Classify => "classify",
            Task::Pretrain => "pretrain",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Task::Detect => 1,
            Task::Classify => 2,
            Task::Pretrain => 3,
        }
    }
}

impl FromStr for Task {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detect" => Ok(Task::Detect),
            "classify" => Ok(Task::Classify),
            "pretrain" => Ok(Task::Pretrain),
            other => Err(SynthError::BadSpec(format!("unknown task {other:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pitch trajectory over one phonation, as a multiplier on the base F0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contour {
    Flat,
    Rising,
    Falling,
    Arch,
    Vibrato,
    Dip,
}

impl Contour {
    /// `u` is the position within the phonation in [0, 1], `t` absolute time.
    pub fn factor(self, u: f64, t: f64) -> f64 {
        match self {
            Contour::Flat => 1.0,
            Contour::Rising => 0.85 + 0.3 * u,
            Contour::Falling => 1.15 - 0.3 * u,
            Contour::Arch => 0.85 + 0.3 * (PI * u).sin(),
            Contour::Vibrato => 1.0 + 0.06 * (2.0 * PI * 6.0 * t).sin(),
            Contour::Dip => 1.15 - 0.3 * (PI * u).sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Periodic harmonic bursts (cries and pretraining events).
    Harmonic,
    /// Low-pitched, quiet voice with an irregular syllabic envelope.
    Adult,
    /// Pink noise only.
    Noise,
}

/// One row of a class table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassParams {
    pub contour: Contour,
    pub f0_hz: (f64, f64),
    pub burst_rate_hz: f64,
    /// Level change per harmonic step, in dB.
    pub harmonic_tilt_db: f64,
}

const CRY_F0: (f64, f64) = (350.0, 500.0);
const LOW_F0: (f64, f64) = (200.0, 300.0);
const HIGH_F0: (f64, f64) = (600.0, 800.0);

/// Reason classes, in label order (awake, hug, sleepy, uncomfortable, diaper, hungry).
pub const REASON_CLASSES: [ClassParams; 6] = [
    ClassParams { contour: Contour::Flat, f0_hz: CRY_F0, burst_rate_hz: 0.8, harmonic_tilt_db: -3.0 },
    ClassParams { contour: Contour::Rising, f0_hz: CRY_F0, burst_rate_hz: 1.0, harmonic_tilt_db: -6.0 },
    ClassParams { contour: Contour::Falling, f0_hz: CRY_F0, burst_rate_hz: 0.9, harmonic_tilt_db: -9.0 },
    ClassParams { contour: Contour::Arch, f0_hz: CRY_F0, burst_rate_hz: 1.5, harmonic_tilt_db: -3.0 },
    ClassParams { contour: Contour::Vibrato, f0_hz: CRY_F0, burst_rate_hz: 1.2, harmonic_tilt_db: -6.0 },
    ClassParams { contour: Contour::Dip, f0_hz: CRY_F0, burst_rate_hz: 1.3, harmonic_tilt_db: -4.0 },
];

/// Pretraining events: F0 outside the cry band, burst rates 2–5 Hz.
pub const EVENT_CLASSES: [ClassParams; 10] = [
    ClassParams { contour: Contour::Flat, f0_hz: LOW_F0, burst_rate_hz: 2.0, harmonic_tilt_db: -3.0 },
    ClassParams { contour: Contour::Rising, f0_hz: LOW_F0, burst_rate_hz: 2.5, harmonic_tilt_db: -6.0 },
    ClassParams { contour: Contour::Falling, f0_hz: HIGH_F0, burst_rate_hz: 3.0, harmonic_tilt_db: -3.0 },
    ClassParams { contour: Contour::Arch, f0_hz: HIGH_F0, burst_rate_hz: 2.0, harmonic_tilt_db: -9.0 },
    ClassParams { contour: Contour::Vibrato, f0_hz: LOW_F0, burst_rate_hz: 3.5, harmonic_tilt_db: -4.0 },
    ClassParams { contour: Contour::Dip, f0_hz: HIGH_F0, burst_rate_hz: 4.0, harmonic_tilt_db: -6.0 },
    ClassParams { contour: Contour::Flat, f0_hz: HIGH_F0, burst_rate_hz: 5.0, harmonic_tilt_db: -9.0 },
    ClassParams { contour: Contour::Rising, f0_hz: HIGH_F0, burst_rate_hz: 2.2, harmonic_tilt_db: -3.0 },
    ClassParams { contour: Contour::Falling, f0_hz: LOW_F0, burst_rate_hz: 4.5, harmonic_tilt_db: -6.0 },
    ClassParams { contour: Contour::Arch, f0_hz: LOW_F0, burst_rate_hz: 3.0, harmonic_tilt_db: -4.0 },
];

/// Fraction of each burst period that is voiced.
const DUTY: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub label_set: LabelSet,
    pub class_id: usize,
    pub source: Source,
    pub contour: Contour,
    /// The base F0 is drawn uniformly from this range.
    pub f0_hz: (f64, f64),
    pub burst_rate_hz: f64,
    pub harmonic_count: usize,
    pub harmonic_tilt_db: f64,
    /// Pink background level relative to the foreground peak.
    pub noise_floor: f64,
    /// Target peak amplitude of the final clip.
    pub peak: f64,
    pub duration_s: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Concrete spec for the `class_id` of a task, with per-clip variation
    /// (burst-rate jitter, harmonic count, levels) drawn from `seed`.
    pub fn for_class(task: Task, class_id: usize, duration_s: f64, seed: u64) -> Result<Self> {
        let label_set = task.label_set();
        if class_id >= label_set.len() {
            return Err(SynthError::BadSpec(format!(
                "class {class_id} out of range for {task}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
        let harmonic = |p: &ClassParams, rng: &mut ChaCha8Rng, peak: (f64, f64)| SynthSpec {
            label_set,
            class_id,
            source: Source::Harmonic,
            contour: p.contour,
            f0_hz: p.f0_hz,
            burst_rate_hz: p.burst_rate_hz * rng.gen_range(0.95..1.05),
            harmonic_count: rng.gen_range(4..=8),
            harmonic_tilt_db: p.harmonic_tilt_db,
            noise_floor: rng.gen_range(0.01..0.05),
            peak: rng.gen_range(peak.0..peak.1),
            duration_s,
            seed,
        };
        let spec = match task {
            Task::Classify => harmonic(&REASON_CLASSES[class_id], &mut rng, (0.7, 0.95)),
            Task::Pretrain => harmonic(&EVENT_CLASSES[class_id], &mut rng, (0.5, 0.95)),
            Task::Detect if class_id == 1 => {
                let row = rng.gen_range(0..REASON_CLASSES.len());
                harmonic(&REASON_CLASSES[row], &mut rng, (0.7, 0.95))
            }
            Task::Detect => {
                let adult = rng.gen_bool(0.5);
                SynthSpec {
                    label_set,
                    class_id,
                    source: if adult { Source::Adult } else { Source::Noise },
                    contour: Contour::Flat,
                    f0_hz: (120.0, 200.0),
                    burst_rate_hz: 3.0,
                    harmonic_count: 10,
                    harmonic_tilt_db: -6.0,
                    noise_floor: rng.gen_range(0.01..0.05),
                    peak: rng.gen_range(0.15..0.4),
                    duration_s,
                    seed,
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::BadSpec(m));
        let (lo, hi) = self.f0_hz;
        if !(lo > 80.0 && hi < 1000.0 && lo <= hi) {
            return bad(format!("f0 range {lo}..{hi} must lie within (80, 1000) Hz"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration {} must be positive", self.duration_s));
        }
        if !(self.burst_rate_hz > 0.0 && self.burst_rate_hz.is_finite()) {
            return bad(format!("burst rate {} must be positive", self.burst_rate_hz));
        }
        if self.harmonic_count == 0 {
            return bad("need at least one harmonic".into());
        }
        if !(self.peak > 0.0 && self.peak <= 1.0) {
            return bad(format!("peak {} must be in (0, 1]", self.peak));
        }
        if !(self.noise_floor >= 0.0 && self.noise_floor < 1.0) {
            return bad(format!("noise floor {} must be in [0, 1)", self.noise_floor));
        }
        if self.class_id >= self.label_set.len() {
            return bad(format!("class {} out of range", self.class_id));
        }
        Ok(())
    }
}

/// Voss-McCartney pink noise: 16 octave-spaced random rows plus a white
/// term, each row refreshed when its bit of the sample counter flips.
pub fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    const ROWS: usize = 16;
    let mut rows: Vec<f64> = (0..ROWS).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut sum: f64 = rows.iter().sum();
    let mut out = Vec::with_capacity(n);
    for i in 1..=n as u64 {
        let tz = i.trailing_zeros() as usize;
        if tz < ROWS {
            let v = rng.gen_range(-1.0..1.0);
            sum += v - rows[tz];
            rows[tz] = v;
        }
        out.push((sum + rng.gen_range(-1.0..1.0)) / (ROWS + 1) as f64);
    }
    out
}

fn harmonic_stack(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = SAMPLE_RATE_HZ as f64;
    let base = rng.gen_range(spec.f0_hz.0..=spec.f0_hz.1);
    let period = 1.0 / spec.burst_rate_hz;
    let offset = rng.gen_range(0.0..period);
    let amps: Vec<f64> = (0..spec.harmonic_count)
        .map(|k| 10f64.powf(spec.harmonic_tilt_db * k as f64 / 20.0))
        .collect();
    let mut phase = rng.gen_range(0.0..2.0 * PI);
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / fs;
        let u = ((t + offset) % period) / (period * DUTY);
        let f0 = base * spec.contour.factor(u.min(1.0), t);
        phase += 2.0 * PI * f0 / fs;
        if u >= 1.0 {
            continue;
        }
        let env = (PI * u).sin();
        let mut v = 0.0;
        for (k, a) in amps.iter().enumerate() {
            if (k + 1) as f64 * f0 < 0.45 * fs {
                v += a * ((k + 1) as f64 * phase).sin();
            }
        }
        *o = env * v;
    }
    out
}

fn adult_voice(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = SAMPLE_RATE_HZ as f64;
    let base = rng.gen_range(spec.f0_hz.0..=spec.f0_hz.1);
    let amps: Vec<f64> = (0..spec.harmonic_count)
        .map(|k| 10f64.powf(spec.harmonic_tilt_db * k as f64 / 20.0))
        .collect();
    // syllables of random length and level separated by random gaps
    let mut env = vec![0.0; n];
    let mut pos = (rng.gen_range(0.0..0.2) * fs) as usize;
    while pos < n {
        let len = (rng.gen_range(0.08..0.35) * fs) as usize;
        let level = rng.gen_range(0.4..1.0);
        for j in 0..len.min(n - pos) {
            env[pos + j] = level * (PI * j as f64 / len as f64).sin();
        }
        pos += len + (rng.gen_range(0.03..0.3) * fs) as usize;
    }
    let drift_rate = rng.gen_range(0.5..2.0);
    let drift_phase = rng.gen_range(0.0..2.0 * PI);
    let mut phase = 0.0;
    let mut jitter = 0.0;
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / fs;
        jitter = 0.995 * jitter + 0.005 * rng.gen_range(-1.0..1.0);
        let f0 = base * (1.0 + 0.08 * (2.0 * PI * drift_rate * t + drift_phase).sin() + 0.2 * jitter);
        phase += 2.0 * PI * f0 / fs;
        if env[i] == 0.0 {
            continue;
        }
        let shimmer = 1.0 + 0.3 * rng.gen_range(-1.0..1.0);
        let v: f64 = amps
            .iter()
            .enumerate()
            .map(|(k, a)| a * ((k + 1) as f64 * phase).sin())
            .sum();
        *o = env[i] * shimmer * v;
    }
    out
}

/// Renders one clip. The same spec always yields the same samples.
pub fn gen_clip(spec: &SynthSpec) -> Result<LabeledClip> {
    spec.validate()?;
    let n = (spec.duration_s * SAMPLE_RATE_HZ as f64).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fg = match spec.source {
        Source::Harmonic => harmonic_stack(spec, n, &mut rng),
        Source::Adult => adult_voice(spec, n, &mut rng),
        Source::Noise => vec![0.0; n],
    };
    let noise = pink_noise(n, &mut rng);
    let fg_peak = fg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let noise_peak = noise.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mix: Vec<f64> = if fg_peak > 0.0 {
        fg.iter()
            .zip(&noise)
            .map(|(f, z)| f / fg_peak + spec.noise_floor * z / noise_peak)
            .collect()
    } else {
        noise.iter().map(|z| z / noise_peak).collect()
    };
    let peak = mix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let samples = mix.iter().map(|v| (v * spec.peak / peak) as f32).collect();
    let clip = AudioClip::new(samples, SAMPLE_RATE_HZ)?;
    Ok(LabeledClip::new(clip, spec.class_id, spec.label_set)?)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-clip seed: the dataset seed (mixed with the task) xor the clip index.
pub fn clip_seed(task: Task, seed: u64, clip_index: usize) -> u64 {
    splitmix64(seed ^ (task.tag() << 56)) ^ clip_index as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    /// Every eleventh clip of a class goes to the test split (10:1).
    pub fn for_index(i: usize) -> Self {
        if i % 11 == 10 {
            Split::Test
        } else {
            Split::Train
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the dataset directory.
    pub path: String,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub label_set: LabelSet,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

/// Writes `n_per_class` clips per class as PCM16 WAVs under `out_dir`,
/// plus `manifest.csv` (`path,label`) and `split.csv` (`path,split`).
pub fn gen_dataset(task: Task, n_per_class: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    gen_dataset_with(task, n_per_class, seed, CLIP_SECONDS, out_dir)
}

pub fn gen_dataset_with(
    task: Task,
    n_per_class: usize,
    seed: u64,
    duration_s: f64,
    out_dir: &Path,
) -> Result<Manifest> {
    if n_per_class == 0 {
        return Err(SynthError::BadSpec("n_per_class must be positive".into()));
    }
    let label_set = task.label_set();
    let mut entries = Vec::new();
    for (class_id, label) in label_set.names().iter().enumerate() {
        let dir: PathBuf = out_dir.join(label);
        fs::create_dir_all(&dir)?;
        for i in 0..n_per_class {
            let index = class_id * n_per_class + i;
            let spec = SynthSpec::for_class(task, class_id, duration_s, clip_seed(task, seed, index))?;
            let clip = gen_clip(&spec)?;
            let rel = format!("{label}/{label}_{i:04}.wav");
            save_wav(&clip.clip, out_dir.join(&rel))?;
            entries.push(ManifestEntry {
                path: rel,
                label: label.to_string(),
                split: Split::for_index(i),
            });
        }
    }
    write_manifest(out_dir, &entries)?;
    Ok(Manifest { label_set, entries })
}

fn write_manifest(out_dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut manifest = fs::File::create(out_dir.join("manifest.csv"))?;
    let mut split = fs::File::create(out_dir.join("split.csv"))?;
    writeln!(manifest, "path,label")?;
    writeln!(split, "path,split")?;
    for e in entries {
        writeln!(manifest, "{},{}", e.path, e.label)?;
        writeln!(split, "{},{}", e.path, e.split.name())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{fft_in_place, hann};

    fn cry_spec(class_id: usize, duration_s: f64, seed: u64) -> SynthSpec {
        SynthSpec::for_class(Task::Classify, class_id, duration_s, seed).unwrap()
    }

    /// 10 ms RMS envelope.
    fn envelope(x: &[f32]) -> Vec<f64> {
        x.chunks(160)
            .map(|c| (c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / c.len() as f64).sqrt())
            .collect()
    }

    #[test]
    fn same_spec_same_samples() {
        for task in [Task::Detect, Task::Classify, Task::Pretrain] {
            let spec = SynthSpec::for_class(task, 1, 0.5, 42).unwrap();
            assert_eq!(gen_clip(&spec).unwrap(), gen_clip(&spec).unwrap());
        }
        let a = gen_clip(&cry_spec(0, 0.5, 1)).unwrap();
        let b = gen_clip(&cry_spec(0, 0.5, 2)).unwrap();
        assert_ne!(a.clip.samples(), b.clip.samples());
    }

    #[test]
    fn bad_specs_are_rejected() {
        let good = cry_spec(0, 1.0, 0);
        let cases = [
            SynthSpec { f0_hz: (50.0, 300.0), ..good },
            SynthSpec { f0_hz: (300.0, 1200.0), ..good },
            SynthSpec { duration_s: 0.0, ..good },
            SynthSpec { harmonic_count: 0, ..good },
            SynthSpec { burst_rate_hz: -1.0, ..good },
            SynthSpec { peak: 1.5, ..good },
            SynthSpec { class_id: 6, ..good },
        ];
        for spec in cases {
            assert!(matches!(gen_clip(&spec), Err(SynthError::BadSpec(_))), "{spec:?}");
        }
        assert!(SynthSpec::for_class(Task::Detect, 2, 1.0, 0).is_err());
    }

    #[test]
    fn cries_are_loud_adults_are_quiet() {
        for seed in 0..20 {
            let cry = gen_clip(&SynthSpec::for_class(Task::Detect, 1, 1.0, seed).unwrap()).unwrap();
            let peak = cry.clip.samples().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(peak >= 0.7 - 1e-6, "{peak}");
            let other = gen_clip(&SynthSpec::for_class(Task::Detect, 0, 1.0, seed).unwrap()).unwrap();
            let peak = other.clip.samples().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(peak <= 0.4 + 1e-6, "{peak}");
        }
        for row in REASON_CLASSES {
            assert!(row.f0_hz.0 >= 350.0 && row.f0_hz.1 <= 500.0);
            assert!((0.8..=1.5).contains(&row.burst_rate_hz));
        }
        for row in EVENT_CLASSES {
            assert!(row.f0_hz.1 < 350.0 || row.f0_hz.0 > 500.0);
            assert!((2.0..=5.0).contains(&row.burst_rate_hz));
        }
    }

    #[test]
    fn envelope_autocorrelation_peaks_at_burst_period() {
        for class_id in 0..6 {
            let spec = cry_spec(class_id, 8.0, 100 + class_id as u64);
            let clip = gen_clip(&spec).unwrap();
            let env = envelope(clip.clip.samples());
            let mean = env.iter().sum::<f64>() / env.len() as f64;
            let e: Vec<f64> = env.iter().map(|v| v - mean).collect();
            // biased estimator, lags 0.3 s to 1.9 s
            let acf = |lag: usize| e.iter().zip(&e[lag..]).map(|(a, b)| a * b).sum::<f64>();
            let best = (30..190).max_by(|&a, &b| acf(a).total_cmp(&acf(b))).unwrap();
            let period = 1.0 / spec.burst_rate_hz;
            let found = best as f64 * 0.01;
            assert!((found - period).abs() <= 0.1 * period, "class {class_id}: {found} vs {period}");
        }
    }

    #[test]
    fn pink_noise_slope_is_minus_three_db_per_octave() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = pink_noise(1 << 18, &mut rng);
        let n = 4096;
        let w = hann(n);
        let mut psd = vec![0.0; n / 2 + 1];
        for seg in x.chunks_exact(n) {
            let mut re: Vec<f64> = seg.iter().zip(&w).map(|(a, b)| a * b).collect();
            let mut im = vec![0.0; n];
            fft_in_place(&mut re, &mut im);
            for k in 0..=n / 2 {
                psd[k] += re[k] * re[k] + im[k] * im[k];
            }
        }
        let bin_hz = SAMPLE_RATE_HZ as f64 / n as f64;
        // least squares of dB against octaves over 100–4000 Hz
        let pts: Vec<(f64, f64)> = (1..=n / 2)
            .map(|k| (k as f64 * bin_hz, psd[k]))
            .filter(|(f, _)| (100.0..=4000.0).contains(f))
            .map(|(f, p)| (f.log2(), 10.0 * p.log10()))
            .collect();
        let m = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        let (mx, my) = (sx / m, sy / m);
        let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((slope + 3.0).abs() <= 1.0, "slope {slope} dB/octave");
    }

    #[test]
    fn dataset_layout_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = gen_dataset_with(Task::Classify, 11, 7, 0.25, a.path()).unwrap();
        let mb = gen_dataset_with(Task::Classify, 11, 7, 0.25, b.path()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.entries.len(), 66);
        assert_eq!(ma.count(Split::Train), 60);
        assert_eq!(ma.count(Split::Test), 6);
        let labels: std::collections::BTreeSet<_> = ma.entries.iter().map(|e| &e.label).collect();
        assert_eq!(labels.len(), 6);
        for name in ["manifest.csv", "split.csv"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        for e in &ma.entries {
            assert_eq!(fs::read(a.path().join(&e.path)).unwrap(), fs::read(b.path().join(&e.path)).unwrap());
        }
        let text = fs::read_to_string(a.path().join("manifest.csv")).unwrap();
        assert!(text.starts_with("path,label\nawake/awake_0000.wav,awake\n"));
    }
}
