//! MFCC, LFCC and CQCC extraction.
//!
//! Every extractor follows the same outline: pre-emphasis, a short-term
//! spectral analysis on a 10 ms clock, log compression, a DCT keeping
//! `n_coeffs` coefficients (including c0), then first- and second-order
//! deltas. With default settings a 64,600-sample clip at 16 kHz gives 402
//! frames of 60 values for all three kinds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::{
    self, floored_ln, frame_and_window, frame_count, ms_to_samples, next_pow2, preemphasize, triangular_filterbank,
    CqtPlan, DctPlan, FrequencyScale, PowerSpectrumPlan, Waveform, WindowKind,
};
use crate::error::{Error, Result};
use crate::matrix::{gemm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Mfcc,
    Lfcc,
    Cqcc,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::Mfcc, FeatureKind::Lfcc, FeatureKind::Cqcc];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::Lfcc => "lfcc",
            FeatureKind::Cqcc => "cqcc",
        }
    }

    /// Stable numeric tag used in checkpoints.
    pub fn code(self) -> u32 {
        FeatureKind::ALL.iter().position(|&k| k == self).unwrap() as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        FeatureKind::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mfcc" => Ok(FeatureKind::Mfcc),
            "lfcc" => Ok(FeatureKind::Lfcc),
            "cqcc" => Ok(FeatureKind::Cqcc),
            other => Err(Error::InvalidParam(format!(
                "unknown feature kind `{other}` (expected mfcc, lfcc or cqcc)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub kind: FeatureKind,
    pub n_coeffs: usize,
    pub n_filters: usize,
    pub bins_per_octave: usize,
    /// Lowest CQT bin; `None` means `sample_rate / 2 / 2^7`.
    pub cqt_f_min: Option<f64>,
    /// Uniform frequency bins the CQT log-power is resampled onto before the DCT.
    pub cqcc_linear_bins: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub preemph: f64,
    pub with_deltas: bool,
    pub delta_reach: usize,
}

impl SpectralConfig {
    pub fn new(kind: FeatureKind) -> Self {
        Self {
            kind,
            n_coeffs: 20,
            n_filters: 20,
            bins_per_octave: 96,
            cqt_f_min: None,
            cqcc_linear_bins: 128,
            win_ms: 25.0,
            hop_ms: 10.0,
            preemph: dsp::DEFAULT_PREEMPHASIS,
            with_deltas: true,
            delta_reach: 2,
        }
    }

    pub fn output_dim(&self) -> usize {
        if self.with_deltas {
            self.n_coeffs * 3
        } else {
            self.n_coeffs
        }
    }

    fn validate(&self) -> Result<()> {
        let bank = match self.kind {
            FeatureKind::Cqcc => self.cqcc_linear_bins,
            _ => self.n_filters,
        };
        if self.n_coeffs == 0 || self.n_coeffs > bank {
            return Err(Error::InvalidParam(format!(
                "n_coeffs {} must be in 1..={bank}",
                self.n_coeffs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stream {
    Sf,
    Ssl,
}

/// A T×D feature grid tagged with its stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Matrix,
    pub stream: Stream,
    /// Frames per second.
    pub frame_rate: f64,
    pub provenance: String,
}

impl FeatureMatrix {
    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

/// Stacks `[c, Δc, ΔΔc]` along features when requested.
fn with_deltas(cepstra: Matrix, cfg: &SpectralConfig) -> Matrix {
    if !cfg.with_deltas {
        return cepstra;
    }
    let d1 = dsp::delta(&cepstra, cfg.delta_reach);
    let d2 = dsp::delta(&d1, cfg.delta_reach);
    cepstra
        .hcat(&d1)
        .and_then(|m| m.hcat(&d2))
        .expect("deltas share the frame count")
}

fn dct_rows(log_energies: &Matrix, n_coeffs: usize) -> Result<Matrix> {
    let mut plan = DctPlan::new(log_energies.cols(), n_coeffs)?;
    let mut out = Matrix::zeros(log_energies.rows(), n_coeffs);
    for t in 0..log_energies.rows() {
        plan.compute(log_energies.row(t), out.row_mut(t));
    }
    Ok(out)
}

fn filterbank_cepstra(w: &Waveform, cfg: &SpectralConfig, scale: FrequencyScale) -> Result<Matrix> {
    cfg.validate()?;
    let sr = w.sample_rate();
    let win = ms_to_samples(cfg.win_ms, sr);
    let hop = ms_to_samples(cfg.hop_ms, sr);
    let fft_size = next_pow2(win);
    let emphasized = preemphasize(w, cfg.preemph)?;
    let grid = frame_and_window(&emphasized, win, hop, WindowKind::Hamming)?;
    let mut plan = PowerSpectrumPlan::new(fft_size)?;
    let mut power = Matrix::zeros(grid.n_frames(), plan.n_bins());
    for t in 0..grid.n_frames() {
        plan.compute(grid.frame(t), power.row_mut(t))?;
    }
    let fb = triangular_filterbank(scale, cfg.n_filters, fft_size, sr, 0.0, sr as f64 / 2.0)?;
    let energies = gemm(&power, false, &fb, true)?.map(floored_ln);
    dct_rows(&energies, cfg.n_coeffs)
}

pub fn extract_mfcc(w: &Waveform, cfg: &SpectralConfig) -> Result<FeatureMatrix> {
    let cepstra = filterbank_cepstra(w, cfg, FrequencyScale::Mel)?;
    Ok(sf_matrix(with_deltas(cepstra, cfg), w, cfg, "mfcc"))
}

pub fn extract_lfcc(w: &Waveform, cfg: &SpectralConfig) -> Result<FeatureMatrix> {
    let cepstra = filterbank_cepstra(w, cfg, FrequencyScale::Linear)?;
    Ok(sf_matrix(with_deltas(cepstra, cfg), w, cfg, "lfcc"))
}

/// Linear interpolation weights from geometrically spaced `src` frequencies
/// onto `n` uniformly spaced ones covering the same span.
fn uniform_resampler(src: &[f64], n: usize) -> Vec<(usize, f64)> {
    let (lo, hi) = (src[0], src[src.len() - 1]);
    if src.len() == 1 {
        return vec![(0, 0.0); n];
    }
    (0..n)
        .map(|j| {
            let f = if n == 1 {
                lo
            } else {
                lo + (hi - lo) * j as f64 / (n - 1) as f64
            };
            // largest i with src[i] <= f, kept one short of the end
            let i = src.partition_point(|&s| s <= f).clamp(1, src.len() - 1) - 1;
            let frac = ((f - src[i]) / (src[i + 1] - src[i])).clamp(0.0, 1.0);
            (i, frac)
        })
        .collect()
}

pub fn extract_cqcc(w: &Waveform, cfg: &SpectralConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let sr = w.sample_rate();
    let win = ms_to_samples(cfg.win_ms, sr);
    let hop = ms_to_samples(cfg.hop_ms, sr);
    let n_frames = frame_count(w.len(), win, hop);
    if n_frames == 0 {
        return Err(Error::SignalTooShort {
            len: w.len(),
            win_len: win,
        });
    }
    let f_max = sr as f64 / 2.0;
    let f_min = cfg.cqt_f_min.unwrap_or(f_max / 128.0);
    let plan = CqtPlan::new(sr, cfg.bins_per_octave, f_min, f_max)?;
    let emphasized = preemphasize(w, cfg.preemph)?;
    // centred on the STFT frames so all SF kinds share one clock
    let centers: Vec<usize> = (0..n_frames).map(|t| t * hop + win / 2).collect();
    let mag = plan.transform(emphasized.samples(), &centers)?;

    let taps = uniform_resampler(plan.frequencies(), cfg.cqcc_linear_bins);
    let mut log_uniform = Matrix::zeros(n_frames, cfg.cqcc_linear_bins);
    for t in 0..n_frames {
        let src = mag.row(t);
        let log_power = |i: usize| floored_ln(src[i] * src[i]);
        for (o, &(i, frac)) in log_uniform.row_mut(t).iter_mut().zip(&taps) {
            *o = if frac == 0.0 {
                log_power(i)
            } else {
                (1.0 - frac) * log_power(i) + frac * log_power(i + 1)
            };
        }
    }
    let cepstra = dct_rows(&log_uniform, cfg.n_coeffs)?;
    Ok(sf_matrix(with_deltas(cepstra, cfg), w, cfg, "cqcc"))
}

fn sf_matrix(data: Matrix, w: &Waveform, cfg: &SpectralConfig, id: &str) -> FeatureMatrix {
    FeatureMatrix {
        data,
        stream: Stream::Sf,
        frame_rate: w.sample_rate() as f64 / ms_to_samples(cfg.hop_ms, w.sample_rate()) as f64,
        provenance: id.to_string(),
    }
}

/// Runs the extractor selected by `cfg.kind`.
pub fn extract(w: &Waveform, cfg: &SpectralConfig) -> Result<FeatureMatrix> {
    let mut fm = match cfg.kind {
        FeatureKind::Mfcc => extract_mfcc(w, cfg)?,
        FeatureKind::Lfcc => extract_lfcc(w, cfg)?,
        FeatureKind::Cqcc => extract_cqcc(w, cfg)?,
    };
    fm.provenance = format!("{}(n_coeffs={},deltas={})", cfg.kind, cfg.n_coeffs, cfg.with_deltas);
    Ok(fm)
}
