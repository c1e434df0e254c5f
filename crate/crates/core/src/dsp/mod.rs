//! Signal-processing primitives shared by the MFCC, LFCC and CQCC front ends.
//!
//! Everything here is a pure function of its inputs.

mod cqt;
mod filterbank;
mod spectrum;

pub use cqt::{cqt, CqtPlan};
pub use filterbank::{hz_to_mel, mel_to_hz, triangular_filterbank, FrequencyScale};
pub use spectrum::{dct2_ortho, dft, next_pow2, DctPlan, PowerSpectrumPlan, Spectrum};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Default clip length after padding or truncation: about 4 s at 16 kHz.
pub const DEFAULT_CLIP_LEN: usize = 64_600;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_PREEMPHASIS: f64 = 0.97;

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidParam("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// First-order high-pass: `y[0] = x[0]`, `y[n] = x[n] - coeff * x[n-1]`.
pub fn preemphasize(w: &Waveform, coeff: f64) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    if !(0.0..1.0).contains(&coeff) {
        return Err(Error::InvalidParam(format!(
            "pre-emphasis coefficient {coeff} outside [0, 1)"
        )));
    }
    let x = w.samples();
    let mut y = Vec::with_capacity(x.len());
    y.push(x[0]);
    y.extend(x.windows(2).map(|p| p[1] - coeff * p[0]));
    Waveform::new(y, w.sample_rate)
}

/// Truncates (keeping the prefix) or zero-pads to exactly `target_len` samples.
pub fn canonicalize_length(w: &Waveform, target_len: usize) -> Waveform {
    let mut samples = w.samples.clone();
    samples.resize(target_len, 0.0);
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Hamming,
    Rectangular,
}

/// Symmetric window of `len` taps. Hamming uses the classic 0.54/0.46 pair.
pub fn window(kind: WindowKind, len: usize) -> Vec<f64> {
    match kind {
        WindowKind::Rectangular => vec![1.0; len],
        WindowKind::Hamming if len == 1 => vec![1.0],
        WindowKind::Hamming => (0..len)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
            .collect(),
    }
}

/// Number of full frames: `1 + (len - win_len) / hop`, or 0 if the signal is
/// shorter than one window.
pub fn frame_count(len: usize, win_len: usize, hop: usize) -> usize {
    if len < win_len || hop == 0 {
        0
    } else {
        1 + (len - win_len) / hop
    }
}

/// Samples in `ms` milliseconds, rounded to the nearest sample.
pub fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * 1e-3 * sample_rate as f64).round() as usize
}

/// Overlapping windowed frames, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGrid {
    pub frames: Matrix,
    pub win_len: usize,
    pub hop: usize,
}

impl FrameGrid {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }
}

pub fn frame_and_window(w: &Waveform, win_len: usize, hop: usize, kind: WindowKind) -> Result<FrameGrid> {
    if hop == 0 || win_len == 0 {
        return Err(Error::InvalidParam("window and hop must be positive".into()));
    }
    if win_len > w.len() {
        return Err(Error::SignalTooShort { len: w.len(), win_len });
    }
    let n = frame_count(w.len(), win_len, hop);
    let taps = window(kind, win_len);
    let x = w.samples();
    let frames = Matrix::from_fn(n, win_len, |t, i| x[t * hop + i] * taps[i]);
    Ok(FrameGrid { frames, win_len, hop })
}

/// Regression deltas over `±reach` frames with replicated edges:
/// `d_t = Σ n (c_{t+n} - c_{t-n}) / (2 Σ n²)`.
pub fn delta(features: &Matrix, reach: usize) -> Matrix {
    let (t_len, d) = features.shape();
    if t_len == 0 || reach == 0 {
        return Matrix::zeros(t_len, d);
    }
    let denom = 2.0 * (1..=reach).map(|n| (n * n) as f64).sum::<f64>();
    let last = t_len as isize - 1;
    let clamp = |t: isize| t.clamp(0, last) as usize;
    let mut out = Matrix::zeros(t_len, d);
    for t in 0..t_len {
        let row = out.row_mut(t);
        for n in 1..=reach {
            let ahead = features.row(clamp(t as isize + n as isize));
            let behind = features.row(clamp(t as isize - n as isize));
            for ((o, a), b) in row.iter_mut().zip(ahead).zip(behind) {
                *o += n as f64 * (a - b);
            }
        }
        row.iter_mut().for_each(|o| *o /= denom);
    }
    out
}

/// Natural log with a floor, so silence maps to a finite value.
pub const LOG_FLOOR: f64 = 1e-10;

#[inline]
pub fn floored_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, 16_000).unwrap()
    }

    #[test]
    fn preemphasis_of_constant() {
        let y = preemphasize(&wave(vec![1.0; 5]), 0.97).unwrap();
        assert_eq!(y.samples()[0], 1.0);
        for &v in &y.samples()[1..] {
            assert!((v - 0.03).abs() < 1e-15);
        }
    }

    #[test]
    fn preemphasis_zero_coeff_is_identity() {
        let x = vec![0.3, -1.0, 2.5, 0.0];
        assert_eq!(preemphasize(&wave(x.clone()), 0.0).unwrap().samples(), &x[..]);
    }

    #[test]
    fn preemphasis_of_ramp() {
        let x: Vec<f64> = (0..50).map(|n| n as f64).collect();
        let y = preemphasize(&wave(x), 0.97).unwrap();
        for n in 1..50 {
            let want = 0.03 * n as f64 + 0.97;
            assert!((y.samples()[n] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn preemphasis_rejects_empty() {
        let err = preemphasize(&wave(vec![]), 0.97).unwrap_err();
        assert_eq!(err.to_string(), "empty waveform");
    }

    #[test]
    fn canonicalize_truncates_and_pads() {
        let long = wave((0..70_000).map(|n| n as f64).collect());
        let c = canonicalize_length(&long, DEFAULT_CLIP_LEN);
        assert_eq!(c.len(), 64_600);
        assert_eq!(c.samples()[64_599], 64_599.0);

        let exact = wave(vec![0.5; 64_600]);
        assert_eq!(canonicalize_length(&exact, 64_600), exact);

        let short = wave(vec![1.0; 100]);
        let c = canonicalize_length(&short, 64_600);
        assert!(c.samples()[..100].iter().all(|&v| v == 1.0));
        assert!(c.samples()[100..].iter().all(|&v| v == 0.0));
        assert_eq!(c.len() - 100, 64_500);
    }

    #[test]
    fn default_framing_gives_402_frames() {
        let w = wave(vec![0.1; DEFAULT_CLIP_LEN]);
        let win = ms_to_samples(25.0, 16_000);
        let hop = ms_to_samples(10.0, 16_000);
        assert_eq!((win, hop), (400, 160));
        let g = frame_and_window(&w, win, hop, WindowKind::Hamming).unwrap();
        assert_eq!(g.n_frames(), 402);
        assert_eq!(g.frames.cols(), 400);
    }

    #[test]
    fn rectangular_frames_are_raw_slices() {
        let x: Vec<f64> = (0..37).map(|n| (n as f64).sin()).collect();
        let g = frame_and_window(&wave(x.clone()), 10, 4, WindowKind::Rectangular).unwrap();
        for t in 0..g.n_frames() {
            assert_eq!(g.frame(t), &x[t * 4..t * 4 + 10]);
        }
    }

    #[test]
    fn hamming_edge_tap() {
        let g = frame_and_window(&wave(vec![2.0; 400]), 400, 160, WindowKind::Hamming).unwrap();
        assert!((g.frame(0)[0] - 0.08 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn window_longer_than_signal() {
        let err = frame_and_window(&wave(vec![0.0; 10]), 11, 1, WindowKind::Hamming).unwrap_err();
        assert!(err.to_string().starts_with("signal shorter than window"));
    }

    #[test]
    fn delta_edge_cases() {
        let constant = Matrix::filled(9, 3, 4.2);
        assert!(delta(&constant, 2).as_slice().iter().all(|&v| v == 0.0));

        let ramp = Matrix::from_fn(12, 2, |t, _| t as f64);
        let d = delta(&ramp, 2);
        for t in 2..10 {
            assert!((d.get(t, 0) - 1.0).abs() < 1e-15);
        }

        let single = Matrix::from_rows(&[[1.0, -2.0, 3.0]]).unwrap();
        assert!(delta(&single, 2).as_slice().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn frame_count_formula(len in 1usize..5000, win in 1usize..600, hop in 1usize..300) {
            prop_assume!(len >= win);
            let w = wave(vec![0.0; len]);
            let g = frame_and_window(&w, win, hop, WindowKind::Rectangular).unwrap();
            prop_assert_eq!(g.n_frames(), 1 + (len - win) / hop);
            // the last frame fits, the next one would not
            let last_end = (g.n_frames() - 1) * hop + win;
            prop_assert!(last_end <= len && last_end + hop > len);
        }

        #[test]
        fn delta_is_linear(
            a in proptest::collection::vec(-10.0f64..10.0, 24),
            b in proptest::collection::vec(-10.0f64..10.0, 24),
        ) {
            let x = Matrix::from_vec(8, 3, a).unwrap();
            let y = Matrix::from_vec(8, 3, b).unwrap();
            let sum = x.zip_map(&y, |p, q| p + q);
            let lhs = delta(&sum, 2);
            let rhs = delta(&x, 2).zip_map(&delta(&y, 2), |p, q| p + q);
            for (l, r) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }
    }
}
