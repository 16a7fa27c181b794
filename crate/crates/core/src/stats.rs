//! Measurement-set analytics: histograms, smoothing, classifiers and
//! dispersion. Everything here is a pure function over sample slices.

use std::fmt;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::wire::Sample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("statistic over an empty measurement set")]
    Empty,
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid histogram spec: {0}")]
    InvalidSpec(String),
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Hit,
    Miss,
    Unknown,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Hit => "hit",
            Phase::Miss => "miss",
            Phase::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hit" => Some(Phase::Hit),
            "miss" => Some(Phase::Miss),
            "unknown" => Some(Phase::Unknown),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub samples: Vec<Sample>,
    pub label: Phase,
}

impl MeasurementSet {
    pub fn new(label: Phase) -> Self {
        Self {
            samples: Vec::new(),
            label,
        }
    }

    pub fn with_capacity(label: Phase, n: usize) -> Self {
        Self {
            samples: Vec::with_capacity(n),
            label,
        }
    }

    pub fn from_rtts(label: Phase, rtts: &[f64]) -> Self {
        Self {
            samples: rtts
                .iter()
                .enumerate()
                .map(|(i, &rtt_ns)| Sample {
                    sequence: i as u64,
                    rtt_ns,
                })
                .collect(),
            label,
        }
    }

    pub fn push(&mut self, sample: Sample) {
        self.samples.push(sample);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rtts(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.rtt_ns).collect()
    }

    pub fn mean(&self) -> Result<f64, StatsError> {
        if self.is_empty() {
            return Err(StatsError::Empty);
        }
        Ok(self.samples.iter().map(|s| s.rtt_ns).sum::<f64>() / self.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramSpec {
    pub bin_width_ns: f64,
    pub smoothing_window: usize,
    /// Fixed `[min, max]`; `None` fits the range to the data.
    pub range: Option<(f64, f64)>,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            bin_width_ns: 1000.0,
            smoothing_window: 11,
            range: None,
        }
    }
}

const MAX_BINS: usize = 1 << 24;

impl HistogramSpec {
    pub fn validate(&self) -> Result<(), StatsError> {
        if !(self.bin_width_ns.is_finite() && self.bin_width_ns > 0.0) {
            return Err(StatsError::InvalidSpec(format!(
                "bin_width must be > 0, got {}",
                self.bin_width_ns
            )));
        }
        if self.smoothing_window == 0 || self.smoothing_window.is_multiple_of(2) {
            return Err(StatsError::InvalidSpec(format!(
                "smoothing_window must be odd and >= 1, got {}",
                self.smoothing_window
            )));
        }
        if let Some((lo, hi)) = self.range {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(StatsError::InvalidSpec(format!("bad range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Binned counts. Bins start at multiples of the bin width and are padded
/// by half a smoothing window on each side, so smoothing never pushes mass
/// off the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub start_ns: f64,
    pub bin_width_ns: f64,
    pub counts: Vec<u64>,
    /// Sum of the samples that fell in each bin.
    pub sums: Vec<f64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_start(&self, i: usize) -> f64 {
        self.start_ns + i as f64 * self.bin_width_ns
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.bin_start(i) + self.bin_width_ns / 2.0
    }
}

pub fn histogram(values: &[f64], spec: &HistogramSpec) -> Result<Histogram, StatsError> {
    spec.validate()?;
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    let bw = spec.bin_width_ns;
    let (lo, hi) = match spec.range {
        Some(r) => r,
        None => values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            }),
    };
    let pad = spec.smoothing_window / 2;
    let first = (lo / bw).floor();
    let core_bins = ((hi / bw).floor() - first) as usize + 1;
    let n_bins = core_bins + 2 * pad;
    if n_bins > MAX_BINS {
        return Err(StatsError::InvalidSpec(format!(
            "{n_bins} bins exceeds the limit of {MAX_BINS}"
        )));
    }
    let start_ns = (first - pad as f64) * bw;
    let mut counts = vec![0u64; n_bins];
    let mut sums = vec![0.0; n_bins];
    for &v in values {
        let core = ((v / bw).floor() - first).clamp(0.0, (core_bins - 1) as f64) as usize;
        counts[core + pad] += 1;
        sums[core + pad] += v;
    }
    Ok(Histogram {
        start_ns,
        bin_width_ns: bw,
        counts,
        sums,
    })
}

/// Centered moving average, treating bins beyond the ends as empty.
pub fn smooth(counts: &[u64], window: usize) -> Vec<f64> {
    assert!(window % 2 == 1, "smoothing window must be odd");
    let half = window / 2;
    let n = counts.len();
    let mut prefix = vec![0u64; n + 1];
    for (i, &c) in counts.iter().enumerate() {
        prefix[i + 1] = prefix[i] + c;
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) as f64 / window as f64
        })
        .collect()
}

/// Index of the smoothed maximum. Plateaus go to the fullest raw bin,
/// then the first.
pub fn mode_index(smoothed: &[f64], counts: &[u64]) -> Option<usize> {
    let mut best: Option<(usize, f64, u64)> = None;
    for (i, (&v, &c)) in smoothed.iter().zip(counts).enumerate() {
        if best.is_none_or(|(_, bv, bc)| v > bv || (v == bv && c > bc)) {
            best = Some((i, v, c));
        }
    }
    best.map(|(i, _, _)| i)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeEstimate {
    pub bin: usize,
    /// Center of the modal bin.
    pub bin_center_ns: f64,
    /// Mean of the samples inside the modal smoothing window; falls back to
    /// the bin center when that window is empty.
    pub refined_ns: f64,
    pub smoothed: Vec<f64>,
}

pub fn smoothed_mode(hist: &Histogram, window: usize) -> Result<ModeEstimate, StatsError> {
    let smoothed = smooth(&hist.counts, window);
    let bin = mode_index(&smoothed, &hist.counts).ok_or(StatsError::Empty)?;
    let half = window / 2;
    let lo = bin.saturating_sub(half);
    let hi = (bin + half + 1).min(hist.counts.len());
    let n: u64 = hist.counts[lo..hi].iter().sum();
    let s: f64 = hist.sums[lo..hi].iter().sum();
    let center = hist.bin_center(bin);
    Ok(ModeEstimate {
        bin,
        bin_center_ns: center,
        refined_ns: if n > 0 { s / n as f64 } else { center },
        smoothed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub mean_hit: f64,
    pub mean_miss: f64,
    pub threshold: f64,
    pub sigma_est: f64,
}

impl Calibration {
    pub fn from_means(mean_hit: f64, mean_miss: f64, sigma_est: f64) -> Self {
        Self {
            mean_hit,
            mean_miss,
            threshold: (mean_hit + mean_miss) / 2.0,
            sigma_est,
        }
    }

    pub fn gap(&self) -> f64 {
        self.mean_miss - self.mean_hit
    }
}

/// Fast side means a leaked 1. Exactly at the threshold decides 0.
pub fn threshold_classify(mode_ns: f64, calib: &Calibration) -> u8 {
    u8::from(mode_ns < calib.threshold)
}

/// Two-class Gaussian likelihood ratio of the sample mean, hit over miss.
/// Positive decides 1; zero decides 0.
pub fn bayes_classify(values: &[f64], calib: &Calibration) -> Result<(u8, f64), StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    Ok(bayes_from_mean(m, values.len(), calib))
}

pub fn bayes_from_mean(mean: f64, n: usize, calib: &Calibration) -> (u8, f64) {
    let dh = mean - calib.mean_hit;
    let dm = mean - calib.mean_miss;
    if calib.sigma_est <= 0.0 {
        let bit = threshold_classify(mean, calib);
        let llr = if mean == calib.threshold {
            0.0
        } else if bit == 1 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
        return (bit, llr);
    }
    let var_mean = calib.sigma_est * calib.sigma_est / n as f64;
    let llr = (dm * dm - dh * dh) / (2.0 * var_mean);
    (u8::from(llr > 0.0), llr)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dispersion {
    pub mean: f64,
    pub stddev: f64,
    pub three_sigma_fraction: f64,
}

/// Welford mean and sample standard deviation, then the share of samples
/// within three standard deviations of the mean.
pub fn dispersion(values: &[f64]) -> Result<Dispersion, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFew {
            need: 2,
            got: values.len(),
        });
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    let stddev = (m2 / (values.len() - 1) as f64).sqrt();
    let bound = 3.0 * stddev;
    let within = values
        .iter()
        .filter(|&&v| (v - mean).abs() <= bound)
        .count();
    Ok(Dispersion {
        mean,
        stddev,
        three_sigma_fraction: within as f64 / values.len() as f64,
    })
}

pub fn pooled_stddev(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    let da = dispersion(a)?;
    let db = dispersion(b)?;
    let (na, nb) = ((a.len() - 1) as f64, (b.len() - 1) as f64);
    Ok(((na * da.stddev.powi(2) + nb * db.stddev.powi(2)) / (na + nb)).sqrt())
}

pub fn error_rate(recovered: &[u8], truth: &[u8]) -> Result<f64, StatsError> {
    if recovered.len() != truth.len() {
        return Err(StatsError::LengthMismatch(recovered.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(StatsError::Empty);
    }
    let wrong = recovered.iter().zip(truth).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / truth.len() as f64)
}

/// MSB-first bits of a byte string.
pub fn bytes_to_bits(bytes: &[u8]) -> Vec<u8> {
    bytes
        .iter()
        .flat_map(|b| (0..8).rev().map(move |i| (b >> i) & 1))
        .collect()
}

/// Packs MSB-first bits; a trailing partial byte is left-aligned.
pub fn bits_to_bytes(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| {
            c.iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | ((b & 1) << (7 - i)))
        })
        .collect()
}

pub fn bits_string(bits: &[u8]) -> String {
    bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
}

pub const SAMPLES_CSV_HEADER: &str = "sequence,rtt_ns,phase";
pub const HISTOGRAM_CSV_HEADER: &str = "bin_start_ns,count,smoothed_count";

pub fn write_samples_csv<W: Write>(mut w: W, sets: &[&MeasurementSet]) -> io::Result<()> {
    writeln!(w, "{SAMPLES_CSV_HEADER}")?;
    for set in sets {
        for s in &set.samples {
            writeln!(w, "{},{},{}", s.sequence, s.rtt_ns, set.label)?;
        }
    }
    Ok(())
}

/// Reads a sample dump back, one set per phase in first-seen order.
pub fn read_samples_csv<R: BufRead>(r: R) -> Result<Vec<MeasurementSet>, StatsError> {
    let mut sets: Vec<MeasurementSet> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| StatsError::Csv {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if i == 0 {
            if line.trim() != SAMPLES_CSV_HEADER {
                return Err(StatsError::Csv {
                    line: 1,
                    msg: format!("expected header {SAMPLES_CSV_HEADER:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| StatsError::Csv {
            line: i + 1,
            msg: msg.to_string(),
        };
        let mut fields = line.split(',');
        let sequence = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| bad("bad sequence"))?;
        let rtt_ns = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| bad("bad rtt_ns"))?;
        let phase = fields
            .next()
            .and_then(|f| Phase::parse(f.trim()))
            .ok_or_else(|| bad("bad phase"))?;
        let sample = Sample { sequence, rtt_ns };
        match sets.iter_mut().find(|s| s.label == phase) {
            Some(set) => set.push(sample),
            None => sets.push(MeasurementSet {
                samples: vec![sample],
                label: phase,
            }),
        }
    }
    Ok(sets)
}

pub fn write_histogram_csv<W: Write>(
    mut w: W,
    hist: &Histogram,
    smoothed: &[f64],
) -> io::Result<()> {
    writeln!(w, "{HISTOGRAM_CSV_HEADER}")?;
    for (i, (&c, &s)) in hist.counts.iter().zip(smoothed).enumerate() {
        writeln!(w, "{},{},{}", hist.bin_start(i), c, s)?;
    }
    Ok(())
}
