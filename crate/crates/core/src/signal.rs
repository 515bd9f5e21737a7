//! Synthetic pulse waveforms and the resample → denoise → normalise → segment chain.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Sampling rate every record is brought to before segmentation.
pub const TARGET_FS: f64 = 128.0;
/// Default segment duration in seconds (10 minutes).
pub const DEFAULT_SEGMENT_SECONDS: f64 = 600.0;
/// Default moving-average width used by [`preprocess`].
pub const DEFAULT_DENOISE_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Synthetic,
    File,
}

/// A labelled single-channel waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    pub subject_id: String,
    pub samples: Vec<f64>,
    pub fs: f64,
    /// 1 marks the positive class.
    pub label: u8,
    pub source: Source,
}

impl SignalRecord {
    pub fn new(subject_id: impl Into<String>, samples: Vec<f64>, fs: f64, label: u8, source: Source) -> Result<Self> {
        let record = SignalRecord {
            subject_id: subject_id.into(),
            samples,
            fs,
            label,
            source,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::validation("sampling rate", format!("{} Hz", self.fs)));
        }
        if self.samples.is_empty() {
            return Err(Error::validation("record", format!("{} has no samples", self.subject_id)));
        }
        if self.subject_id.is_empty() {
            return Err(Error::validation("record", "empty subject id"));
        }
        if self.label > 1 {
            return Err(Error::validation("label", format!("{} is not 0 or 1", self.label)));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    fn with_samples(&self, samples: Vec<f64>, fs: f64) -> Self {
        SignalRecord {
            subject_id: self.subject_id.clone(),
            samples,
            fs,
            label: self.label,
            source: self.source,
        }
    }
}

/// Fixed-length, z-normalised window of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub subject_id: String,
    pub values: Vec<f64>,
    pub label: u8,
    pub segment_index: usize,
}

/// Physiology of one synthetic class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassParams {
    /// Mean heart rate in beats per minute.
    pub rate_bpm: f64,
    /// Beat-to-beat interval jitter as a fraction of the mean interval.
    pub hrv: f64,
    /// Standard deviation of additive white noise (pulse amplitude is ~1).
    pub noise: f64,
}

impl ClassParams {
    /// Lower resting rate, larger interval variability.
    pub const NEGATIVE: ClassParams = ClassParams {
        rate_bpm: 60.0,
        hrv: 0.08,
        noise: 0.05,
    };
    /// Elevated resting rate, reduced interval variability.
    pub const POSITIVE: ClassParams = ClassParams {
        rate_bpm: 85.0,
        hrv: 0.02,
        noise: 0.05,
    };

    pub fn for_label(label: u8) -> Self {
        if label == 1 {
            Self::POSITIVE
        } else {
            Self::NEGATIVE
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_bpm > 0.0 && self.rate_bpm <= 300.0) {
            return Err(Error::validation("heart rate", format!("{} bpm", self.rate_bpm)));
        }
        if !(0.0..0.5).contains(&self.hrv) {
            return Err(Error::validation("interval jitter", format!("{}", self.hrv)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::validation("noise level", format!("{}", self.noise)));
        }
        Ok(())
    }
}

/// Single beat shape over phase `[0, 1)`: systolic peak plus a smaller dicrotic wave.
fn beat_template(phase: f64) -> f64 {
    let systolic = libm::exp(-0.5 * ((phase - 0.2) / 0.07).powi(2));
    let dicrotic = 0.4 * libm::exp(-0.5 * ((phase - 0.5) / 0.09).powi(2));
    systolic + dicrotic
}

/// Quasi-periodic pulse train with jittered beat intervals, slow respiratory
/// baseline wander and white noise. Deterministic in `seed`.
pub fn generate_synthetic(
    subject_id: impl Into<String>,
    duration_s: f64,
    fs: f64,
    params: ClassParams,
    label: u8,
    seed: u64,
) -> Result<SignalRecord> {
    params.validate()?;
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::validation("duration", format!("{duration_s} s")));
    }
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(Error::validation("sampling rate", format!("{fs} Hz")));
    }
    let n = libm::round(duration_s * fs) as usize;
    if n == 0 {
        return Err(Error::validation("duration", "shorter than one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mean_interval = 60.0 / params.rate_bpm;
    let noise = Normal::new(0.0, params.noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let breathing_phase = 2.0 * PI * rand::Rng::random::<f64>(&mut rng);

    let mut samples = Vec::with_capacity(n);
    let mut onset = -mean_interval * rand::Rng::random::<f64>(&mut rng);
    let mut interval = mean_interval;
    for i in 0..n {
        let t = i as f64 / fs;
        while t >= onset + interval {
            onset += interval;
            let z: f64 = std_normal.sample(&mut rng);
            interval = mean_interval * (1.0 + params.hrv * z.clamp(-3.0, 3.0));
        }
        let phase = (t - onset) / interval;
        let wander = 0.1 * libm::sin(2.0 * PI * 0.25 * t + breathing_phase);
        let eps = if params.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        samples.push(beat_template(phase) + wander + eps);
    }
    SignalRecord::new(subject_id, samples, fs, label, Source::Synthetic)
}

/// Linear-interpolation resampling; output length is `round(len * target / fs)`.
pub fn resample(record: &SignalRecord, target_hz: f64) -> Result<SignalRecord> {
    if !(target_hz > 0.0 && target_hz.is_finite()) {
        return Err(Error::validation("target rate", format!("{target_hz} Hz")));
    }
    if record.samples.is_empty() {
        return Err(Error::validation("record", "cannot resample an empty record"));
    }
    if record.fs == target_hz {
        return Ok(record.clone());
    }
    let src = &record.samples;
    let n_out = libm::round(src.len() as f64 * target_hz / record.fs) as usize;
    if n_out == 0 {
        return Err(Error::validation("record", "too short for the target rate"));
    }
    let step = record.fs / target_hz;
    let last = src.len() - 1;
    let out = (0..n_out)
        .map(|j| {
            let pos = j as f64 * step;
            let i0 = libm::floor(pos) as usize;
            if i0 >= last {
                return src[last];
            }
            let frac = pos - i0 as f64;
            src[i0] + (src[i0 + 1] - src[i0]) * frac
        })
        .collect();
    Ok(record.with_samples(out, target_hz))
}

/// Centered moving average of odd width; windows shrink (truncate) at the edges.
pub fn denoise(record: &SignalRecord, window: usize) -> Result<SignalRecord> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::validation("denoise window", format!("{window} must be odd and >= 1")));
    }
    Ok(record.with_samples(moving_average(&record.samples, window), record.fs))
}

pub(crate) fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 1 {
        return values.to_vec();
    }
    let half = window / 2;
    let mut prefix = vec![0.0; values.len() + 1];
    for (i, v) in values.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            let span = &values[lo..hi];
            // Constant windows stay bit-exact.
            if span.iter().all(|&v| v == span[0]) {
                span[0]
            } else {
                (prefix[hi] - prefix[lo]) / (hi - lo) as f64
            }
        })
        .collect()
}

/// Whole-record z-score; constant records map to zeros.
pub fn normalize(record: &SignalRecord) -> SignalRecord {
    record.with_samples(z_score(&record.samples), record.fs)
}

pub(crate) fn z_score(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let (mean, std) = mean_std(values);
    if std <= 1e-12 * mean.abs().max(1.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Resample to [`TARGET_FS`], smooth, then z-normalise.
pub fn preprocess(record: &SignalRecord, denoise_window: usize) -> Result<SignalRecord> {
    let resampled = resample(record, TARGET_FS)?;
    let smoothed = denoise(&resampled, denoise_window)?;
    Ok(normalize(&smoothed))
}

/// Number of samples in a segment of `duration_s` at [`TARGET_FS`].
pub fn segment_len(duration_s: f64) -> usize {
    libm::round(duration_s * TARGET_FS) as usize
}

/// Non-overlapping consecutive windows; the trailing partial window is dropped and
/// every segment is re-normalised.
pub fn segment(record: &SignalRecord, duration_s: f64) -> Result<Vec<Segment>> {
    if record.fs != TARGET_FS {
        return Err(Error::validation(
            "record",
            format!("segmentation expects {TARGET_FS} Hz, got {} Hz", record.fs),
        ));
    }
    let len = segment_len(duration_s);
    if len == 0 {
        return Err(Error::validation("segment duration", format!("{duration_s} s")));
    }
    Ok(record
        .samples
        .chunks_exact(len)
        .enumerate()
        .map(|(segment_index, chunk)| Segment {
            subject_id: record.subject_id.clone(),
            values: z_score(chunk),
            label: record.label,
            segment_index,
        })
        .collect())
}
