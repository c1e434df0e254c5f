use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrequencyScale {
    Mel,
    Linear,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl FrequencyScale {
    fn forward(self, hz: f64) -> f64 {
        match self {
            FrequencyScale::Mel => hz_to_mel(hz),
            FrequencyScale::Linear => hz,
        }
    }

    fn inverse(self, v: f64) -> f64 {
        match self {
            FrequencyScale::Mel => mel_to_hz(v),
            FrequencyScale::Linear => v,
        }
    }

    /// `n_filters + 2` band edges equally spaced on this scale, in Hz.
    pub fn edges(self, n_filters: usize, f_min: f64, f_max: f64) -> Vec<f64> {
        let lo = self.forward(f_min);
        let hi = self.forward(f_max);
        let step = (hi - lo) / (n_filters + 1) as f64;
        (0..n_filters + 2).map(|i| self.inverse(lo + step * i as f64)).collect()
    }
}

/// Triangular filters over the one-sided spectrum (`fft_size/2 + 1` bins).
///
/// Filter `m` rises from edge `m` to a peak at edge `m+1` and falls to zero at
/// edge `m+2`. Each row is rescaled so its largest tap is exactly 1.
pub fn triangular_filterbank(
    scale: FrequencyScale,
    n_filters: usize,
    fft_size: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
) -> Result<Matrix> {
    let nyquist = sample_rate as f64 / 2.0;
    if n_filters == 0 {
        return Err(Error::InvalidParam("filterbank needs at least one filter".into()));
    }
    if f_max > nyquist {
        return Err(Error::InvalidParam(format!(
            "f_max {f_max} Hz above Nyquist {nyquist} Hz"
        )));
    }
    if !(0.0 <= f_min && f_min < f_max) {
        return Err(Error::InvalidParam(format!(
            "need 0 <= f_min < f_max, got {f_min}..{f_max}"
        )));
    }
    let n_bins = fft_size / 2 + 1;
    let bin_hz = sample_rate as f64 / fft_size as f64;
    let edges = scale.edges(n_filters, f_min, f_max);
    let mut fb = Matrix::zeros(n_filters, n_bins);
    for m in 0..n_filters {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = fb.row_mut(m);
        for (k, tap) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            *tap = rise.min(fall).max(0.0);
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak == 0.0 {
            return Err(Error::InvalidParam(format!(
                "filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; raise fft_size"
            )));
        }
        row.iter_mut().for_each(|t| *t /= peak);
    }
    Ok(fb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_anchor_points() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        // 2595 * log10(1 + 1000/700), evaluated independently
        assert!((hz_to_mel(1000.0) - 999.985_537_139_624_4).abs() < 1e-9);
        assert!((mel_to_hz(hz_to_mel(3210.0)) - 3210.0).abs() < 1e-9);
    }

    #[test]
    fn linear_centers_equally_spaced() {
        let edges = FrequencyScale::Linear.edges(20, 0.0, 8000.0);
        let step = 8000.0 / 21.0;
        for (i, e) in edges.iter().enumerate() {
            assert!((e - step * i as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn rows_nonnegative_with_unit_peak() {
        for scale in [FrequencyScale::Mel, FrequencyScale::Linear] {
            let fb = triangular_filterbank(scale, 20, 512, 16_000, 0.0, 8000.0).unwrap();
            assert_eq!(fb.shape(), (20, 257));
            for m in 0..20 {
                let row = fb.row(m);
                assert!(row.iter().all(|&v| v >= 0.0));
                assert_eq!(row.iter().cloned().fold(f64::MIN, f64::max), 1.0);
            }
            // neighbours overlap
            for m in 0..19 {
                let shared = fb.row(m).iter().zip(fb.row(m + 1)).any(|(a, b)| *a > 0.0 && *b > 0.0);
                assert!(shared, "{scale:?} filters {m} and {} do not overlap", m + 1);
            }
        }
    }

    #[test]
    fn rejects_above_nyquist() {
        assert!(triangular_filterbank(FrequencyScale::Mel, 20, 512, 16_000, 0.0, 8001.0).is_err());
    }
}
