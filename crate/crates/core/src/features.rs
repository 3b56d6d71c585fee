//! Log-Mel front end: Hann-windowed STFT power, HTK-style mel filterbank,
//! floored natural log, and waveform/spectrogram dumps for inspection.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::audio_io::{AudioClip, SAMPLE_RATE_HZ};

/// Power floor applied before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("clip has {len} samples, fewer than the {window} sample window")]
    ClipTooShort { len: usize, window: usize },
    #[error("bad frequency range: {0}")]
    BadFrequencyRange(String),
    #[error("bad STFT configuration: {0}")]
    BadConfig(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// In-place iterative radix-2 complex FFT. `re.len()` must be a power of two.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    assert_eq!(n, im.len());
    assert!(n.is_power_of_two(), "FFT length {n} is not a power of two");
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = -2.0 * PI / len as f64;
        for k in 0..half {
            let (s, c) = (step * k as f64).sin_cos();
            let mut start = 0;
            while start < n {
                let a = start + k;
                let b = a + half;
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                start += len;
            }
        }
        len <<= 1;
    }
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop_len: usize,
    pub fft_len: usize,
    pub sample_rate_hz: u32,
    window: Vec<f64>,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::new(512, 160, 512).expect("default STFT config is valid")
    }
}

impl StftConfig {
    pub fn new(window_len: usize, hop_len: usize, fft_len: usize) -> Result<Self> {
        if hop_len == 0 || hop_len > window_len || window_len > fft_len {
            return Err(FeatureError::BadConfig(format!(
                "need 0 < hop ({hop_len}) <= window ({window_len}) <= fft ({fft_len})"
            )));
        }
        if !fft_len.is_power_of_two() {
            return Err(FeatureError::BadConfig(format!(
                "fft_len {fft_len} is not a power of two"
            )));
        }
        Ok(Self {
            window_len,
            hop_len,
            fft_len,
            sample_rate_hz: SAMPLE_RATE_HZ,
            window: hann(window_len),
        })
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn n_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Frames produced for a clip of `len` samples (tail frames are dropped).
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            1 + (len - self.window_len) / self.hop_len
        }
    }

    pub fn bin_hz(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate_hz as f64 / self.fft_len as f64
    }
}

/// Row-major frames x bins matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: Vec<f64>,
}

impl PowerSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }
}

pub fn stft_power(clip: &AudioClip, cfg: &StftConfig) -> Result<PowerSpectrogram> {
    let samples = clip.samples();
    if samples.len() < cfg.window_len {
        return Err(FeatureError::ClipTooShort {
            len: samples.len(),
            window: cfg.window_len,
        });
    }
    let n_frames = cfg.n_frames(samples.len());
    let n_bins = cfg.n_bins();
    let mut data = Vec::with_capacity(n_frames * n_bins);
    let mut re = vec![0.0; cfg.fft_len];
    let mut im = vec![0.0; cfg.fft_len];
    for t in 0..n_frames {
        let start = t * cfg.hop_len;
        re.fill(0.0);
        im.fill(0.0);
        for (i, w) in cfg.window.iter().enumerate() {
            re[i] = samples[start + i] as f64 * w;
        }
        fft_in_place(&mut re, &mut im);
        data.extend((0..n_bins).map(|k| re[k] * re[k] + im[k] * im[k]));
    }
    Ok(PowerSpectrogram {
        n_frames,
        n_bins,
        data,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    /// Row-major n_mels x n_bins.
    pub filters: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.filters[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

/// Triangular filters whose peaks are equally spaced on the mel scale.
pub fn build_mel_filterbank(
    n_mels: usize,
    cfg: &StftConfig,
    fmin_hz: f64,
    fmax_hz: f64,
) -> Result<MelFilterbank> {
    let nyquist = cfg.sample_rate_hz as f64 / 2.0;
    if !(0.0..nyquist).contains(&fmin_hz) || fmax_hz <= fmin_hz || fmax_hz > nyquist {
        return Err(FeatureError::BadFrequencyRange(format!(
            "need 0 <= fmin ({fmin_hz}) < fmax ({fmax_hz}) <= {nyquist}"
        )));
    }
    if n_mels < 2 {
        return Err(FeatureError::BadFrequencyRange(format!(
            "need at least 2 mel bands, got {n_mels}"
        )));
    }
    let lo = hz_to_mel(fmin_hz);
    let hi = hz_to_mel(fmax_hz);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_bins = cfg.n_bins();
    let mut filters = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut filters[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = cfg.bin_hz(k);
            if f < fmin_hz || f > fmax_hz {
                continue;
            }
            *w = if f > left && f <= centre {
                (f - left) / (centre - left)
            } else if f > centre && f < right {
                (right - f) / (right - centre)
            } else {
                0.0
            };
        }
        if row.iter().sum::<f64>() <= 0.0 {
            return Err(FeatureError::BadFrequencyRange(format!(
                "mel band {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; use fewer bands or a longer FFT"
            )));
        }
    }
    Ok(MelFilterbank {
        n_mels,
        n_bins,
        fmin_hz,
        fmax_hz,
        filters,
    })
}

/// Row-major frames x mel-bins matrix of floored natural-log energies.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub n_frames: usize,
    pub n_mels: usize,
    pub data: Vec<f64>,
}

impl LogMelSpectrogram {
    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.data[t * self.n_mels + m]
    }
}

pub fn log_mel(clip: &AudioClip, cfg: &StftConfig, fb: &MelFilterbank) -> Result<LogMelSpectrogram> {
    if fb.n_bins != cfg.n_bins() {
        return Err(FeatureError::BadConfig(format!(
            "filterbank has {} bins, STFT produces {}",
            fb.n_bins,
            cfg.n_bins()
        )));
    }
    let power = stft_power(clip, cfg)?;
    let mut data = Vec::with_capacity(power.n_frames * fb.n_mels);
    for t in 0..power.n_frames {
        let frame = power.frame(t);
        for m in 0..fb.n_mels {
            let e: f64 = fb.row(m).iter().zip(frame).map(|(w, p)| w * p).sum();
            data.push(e.max(LOG_FLOOR).ln());
        }
    }
    Ok(LogMelSpectrogram {
        n_frames: power.n_frames,
        n_mels: fb.n_mels,
        data,
    })
}

/// Default front end: 512/160/512 STFT with 64 mel bands over 50-8000 Hz.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub stft: StftConfig,
    pub filterbank: MelFilterbank,
}

impl FeatureExtractor {
    pub fn new(stft: StftConfig, n_mels: usize, fmin_hz: f64, fmax_hz: f64) -> Result<Self> {
        let filterbank = build_mel_filterbank(n_mels, &stft, fmin_hz, fmax_hz)?;
        Ok(Self { stft, filterbank })
    }

    pub fn with_mels(n_mels: usize) -> Result<Self> {
        Self::new(StftConfig::default(), n_mels, 50.0, 8000.0)
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<LogMelSpectrogram> {
        log_mel(clip, &self.stft, &self.filterbank)
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::with_mels(64).expect("default mel configuration is valid")
    }
}

/// Writes `<prefix>.wave.csv` and `<prefix>.spec.pgm`, returning both paths.
pub fn dump_views(
    clip: &AudioClip,
    spec: &LogMelSpectrogram,
    out_prefix: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf)> {
    let prefix = out_prefix.as_ref().as_os_str().to_owned();
    let mut wave_path = prefix.clone();
    wave_path.push(".wave.csv");
    let mut spec_path = prefix;
    spec_path.push(".spec.pgm");
    let (wave_path, spec_path) = (PathBuf::from(wave_path), PathBuf::from(spec_path));

    let mut w = BufWriter::new(File::create(&wave_path)?);
    writeln!(w, "t_seconds,amplitude")?;
    let rate = clip.sample_rate_hz() as f64;
    for (i, s) in clip.samples().iter().enumerate() {
        writeln!(w, "{},{}", i as f64 / rate, s)?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(&spec_path)?);
    w.write_all(&spectrogram_pgm(spec))?;
    w.flush()?;
    Ok((wave_path, spec_path))
}

/// Binary P5 image: one column per frame, one row per mel bin with the
/// lowest bin at the bottom, min-max scaled to 0..=255.
pub fn spectrogram_pgm(spec: &LogMelSpectrogram) -> Vec<u8> {
    let (width, height) = (spec.n_frames, spec.n_mels);
    let (lo, hi) = spec
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for row in 0..height {
        let m = height - 1 - row;
        for t in 0..width {
            let v = if range > 0.0 {
                ((spec.get(t, m) - lo) / range * 255.0).round() as u8
            } else {
                0
            };
            out.push(v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::AudioClip;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n^2) DFT, the reference for every spectral check.
    fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, v)| {
                    let a = -2.0 * PI * (k * t % n) as f64 / n as f64;
                    (re + v * a.cos(), im + v * a.sin())
                })
            })
            .collect()
    }

    fn naive_frame_power(samples: &[f32], cfg: &StftConfig, t: usize) -> Vec<f64> {
        let mut x = vec![0.0; cfg.fft_len];
        for i in 0..cfg.window_len {
            x[i] = samples[t * cfg.hop_len + i] as f64 * cfg.window()[i];
        }
        naive_dft(&x)[..cfg.n_bins()]
            .iter()
            .map(|(r, i)| r * r + i * i)
            .collect()
    }

    fn clip(samples: Vec<f32>) -> AudioClip {
        AudioClip::new(samples, 16_000).unwrap()
    }

    #[test]
    fn fft_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &n in &[1usize, 2, 4, 8, 64, 256, 512, 1024] {
            let mut re: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut im: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want: Vec<(f64, f64)> = {
                let a = naive_dft(&re);
                let b = naive_dft(&im);
                // DFT(re + i*im) = DFT(re) + i*DFT(im)
                a.iter().zip(&b).map(|(a, b)| (a.0 - b.1, a.1 + b.0)).collect()
            };
            fft_in_place(&mut re, &mut im);
            for k in 0..n {
                assert!((re[k] - want[k].0).abs() < 1e-6, "n={n} k={k}");
                assert!((im[k] - want[k].1).abs() < 1e-6, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn bin_centred_sine_concentrates_in_main_lobe() {
        let cfg = StftConfig::default();
        let k = 40;
        let f = cfg.bin_hz(k);
        let samples: Vec<f32> = (0..4000)
            .map(|i| (2.0 * PI * f * i as f64 / 16_000.0).sin() as f32)
            .collect();
        let p = stft_power(&clip(samples.clone()), &cfg).unwrap();
        for t in 0..p.n_frames {
            let frame = p.frame(t);
            let oracle = naive_frame_power(&samples, &cfg, t);
            for (a, b) in frame.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-6 * b.max(1.0));
            }
            let total: f64 = frame.iter().sum();
            let peak = frame
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(peak, k);
            let lobe: f64 = frame[k - 1..=k + 1].iter().sum();
            assert!(lobe / total >= 0.99, "lobe share {}", lobe / total);
        }
    }

    #[test]
    fn zero_clip_gives_zero_power() {
        let cfg = StftConfig::default();
        let p = stft_power(&clip(vec![0.0; 2000]), &cfg).unwrap();
        assert!(p.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dc_clip_leaks_only_into_first_bin() {
        let cfg = StftConfig::default();
        let samples = vec![0.5f32; 1200];
        let p = stft_power(&clip(samples.clone()), &cfg).unwrap();
        let oracle = naive_frame_power(&samples, &cfg, 0);
        let frame = p.frame(0);
        assert!((frame[0] - oracle[0]).abs() < 1e-9 * oracle[0]);
        for k in 2..cfg.n_bins() {
            assert!(frame[k] < 1e-6 * frame[0]);
            assert!(oracle[k] < 1e-6 * oracle[0]);
        }
    }

    #[test]
    fn clip_shorter_than_window_is_rejected() {
        let cfg = StftConfig::default();
        assert!(matches!(
            stft_power(&clip(vec![0.0; 511]), &cfg),
            Err(FeatureError::ClipTooShort { len: 511, window: 512 })
        ));
    }

    #[test]
    fn parseval_holds_per_frame() {
        let cfg = StftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f32> = (0..1500).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = stft_power(&clip(samples.clone()), &cfg).unwrap();
        for t in 0..p.n_frames {
            let energy: f64 = (0..cfg.window_len)
                .map(|i| (samples[t * cfg.hop_len + i] as f64 * cfg.window()[i]).powi(2))
                .sum();
            // one-sided spectrum: interior bins count twice
            let frame = p.frame(t);
            let n = cfg.fft_len;
            let spectral: f64 = frame[0]
                + frame[n / 2]
                + 2.0 * frame[1..n / 2].iter().sum::<f64>();
            let spectral = spectral / n as f64;
            assert!((spectral - energy).abs() <= 1e-4 * energy);
        }
    }

    #[test]
    fn mel_scale_anchors() {
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-9);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_rows_are_single_triangles() {
        let cfg = StftConfig::default();
        let fb = build_mel_filterbank(64, &cfg, 50.0, 8000.0).unwrap();
        assert_eq!(fb.n_mels, 64);
        let lo = hz_to_mel(50.0);
        let hi = hz_to_mel(8000.0);
        for m in 0..64 {
            let row = fb.row(m);
            assert!(row.iter().sum::<f64>() > 0.0);
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            let nz: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
            let (first, last) = (nz[0], *nz.last().unwrap());
            assert_eq!(nz.len(), last - first + 1, "band {m} support is not contiguous");
            for k in &nz {
                let f = cfg.bin_hz(*k);
                assert!((50.0..=8000.0).contains(&f));
            }
            // rises to a single peak then falls
            let peak = (first..=last)
                .max_by(|a, b| row[*a].total_cmp(&row[*b]))
                .unwrap();
            assert!((first..peak).all(|k| row[k] <= row[k + 1]));
            assert!((peak..last).all(|k| row[k] >= row[k + 1]));
            let centre = mel_to_hz(lo + (hi - lo) * (m + 1) as f64 / 65.0);
            assert!((cfg.bin_hz(peak) - centre).abs() <= cfg.bin_hz(1));
        }
    }

    #[test]
    fn filterbank_rejects_bad_ranges() {
        let cfg = StftConfig::default();
        assert!(build_mel_filterbank(64, &cfg, 100.0, 50.0).is_err());
        assert!(build_mel_filterbank(64, &cfg, 0.0, 9000.0).is_err());
        assert!(build_mel_filterbank(1, &cfg, 0.0, 8000.0).is_err());
        assert!(build_mel_filterbank(2, &cfg, 0.0, 8000.0).is_ok());
    }

    #[test]
    fn silent_clip_sits_on_the_floor() {
        let fx = FeatureExtractor::default();
        let lm = fx.extract(&clip(vec![0.0; 3000])).unwrap();
        assert!(lm.data.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn frame_count_formula() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.n_frames(240_000), 1497);
        assert_eq!(cfg.n_frames(512), 1);
        assert_eq!(cfg.n_frames(511), 0);
        let fx = FeatureExtractor::default();
        let lm = fx.extract(&clip(vec![0.01; 240_000])).unwrap();
        assert_eq!((lm.n_frames, lm.n_mels), (1497, 64));
    }

    #[test]
    fn one_frame_spectrogram_is_one_column() {
        let spec = LogMelSpectrogram {
            n_frames: 1,
            n_mels: 4,
            data: vec![0.0, 1.0, 2.0, 3.0],
        };
        let pgm = spectrogram_pgm(&spec);
        let header = b"P5\n1 4\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        // top row is the highest mel bin
        assert_eq!(&pgm[header.len()..], &[255, 170, 85, 0]);
    }

    #[test]
    fn zero_clip_dumps_black_image() {
        let dir = tempfile::tempdir().unwrap();
        let c = clip(vec![0.0; 1000]);
        let fx = FeatureExtractor::default();
        let lm = fx.extract(&c).unwrap();
        let (wave, img) = dump_views(&c, &lm, dir.path().join("z")).unwrap();
        let bytes = std::fs::read(img).unwrap();
        let header = format!("P5\n{} 64\n255\n", lm.n_frames);
        assert!(bytes.starts_with(header.as_bytes()));
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
        let csv = std::fs::read_to_string(wave).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t_seconds,amplitude"));
        assert_eq!(lines.next(), Some("0,0"));
        assert_eq!(lines.count(), 999);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn scaling_shifts_log_mel_by_log_gain(seed in 0u64..1000, gain_pow in -2i32..=1) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<f32> = (0..1200).map(|_| rng.gen_range(-0.4..0.4)).collect();
            let gain = 2f32.powi(gain_pow);
            let fx = FeatureExtractor::default();
            let base = fx.extract(&clip(samples.clone())).unwrap();
            let scaled = fx.extract(&clip(samples.iter().map(|s| s * gain).collect())).unwrap();
            let shift = (gain as f64 * gain as f64).ln();
            for (a, b) in base.data.iter().zip(&scaled.data) {
                if *a > LOG_FLOOR.ln() + 3.0 {
                    prop_assert!((b - a - shift).abs() < 1e-9);
                }
            }
        }
    }
}
