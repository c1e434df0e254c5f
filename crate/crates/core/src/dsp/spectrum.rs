use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// Full complex DFT of a zero-padded frame.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub bins: Vec<Complex64>,
    pub fft_size: usize,
}

impl Spectrum {
    /// Bins `0..=fft_size/2`.
    pub fn one_sided(&self) -> &[Complex64] {
        &self.bins[..self.fft_size / 2 + 1]
    }

    pub fn power_spectrum(&self) -> Vec<f64> {
        self.one_sided().iter().map(|c| c.norm_sqr()).collect()
    }
}

fn check_fft_size(frame_len: usize, fft_size: usize) -> Result<()> {
    if !fft_size.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(fft_size));
    }
    if frame_len > fft_size {
        return Err(Error::InvalidParam(format!(
            "frame of {frame_len} samples does not fit fft size {fft_size}"
        )));
    }
    Ok(())
}

pub fn dft(frame: &[f64], fft_size: usize) -> Result<Spectrum> {
    check_fft_size(frame.len(), fft_size)?;
    let fft = FftPlanner::new().plan_fft_forward(fft_size);
    let mut bins: Vec<Complex64> = frame.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    bins.resize(fft_size, Complex64::new(0.0, 0.0));
    fft.process(&mut bins);
    Ok(Spectrum { bins, fft_size })
}

/// Reusable one-sided power spectrum for many frames of the same size.
pub struct PowerSpectrumPlan {
    fft: Arc<dyn Fft<f64>>,
    fft_size: usize,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl PowerSpectrumPlan {
    pub fn new(fft_size: usize) -> Result<Self> {
        check_fft_size(0, fft_size)?;
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        let scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        Ok(Self {
            fft,
            fft_size,
            buf: vec![Complex64::default(); fft_size],
            scratch,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn compute(&mut self, frame: &[f64], out: &mut [f64]) -> Result<()> {
        check_fft_size(frame.len(), self.fft_size)?;
        for (b, &x) in self.buf.iter_mut().zip(frame) {
            *b = Complex64::new(x, 0.0);
        }
        self.buf[frame.len()..].fill(Complex64::default());
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        for (o, c) in out.iter_mut().zip(&self.buf[..self.n_bins()]) {
            *o = c.norm_sqr();
        }
        Ok(())
    }
}

/// Orthonormal DCT-II of a fixed input length, truncated to `n_out`
/// coefficients. Computed through a same-length FFT of the even/odd
/// reordered input.
pub struct DctPlan {
    n: usize,
    n_out: usize,
    fft: Arc<dyn Fft<f64>>,
    twiddles: Vec<Complex64>,
    buf: Vec<Complex64>,
}

impl DctPlan {
    pub fn new(n: usize, n_out: usize) -> Result<Self> {
        if n == 0 || n_out > n {
            return Err(Error::InvalidParam(format!(
                "dct: cannot keep {n_out} of {n} coefficients"
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(n);
        let scale0 = (1.0 / n as f64).sqrt();
        let scale = (2.0 / n as f64).sqrt();
        let twiddles = (0..n_out)
            .map(|k| {
                let s = if k == 0 { scale0 } else { scale };
                Complex64::from_polar(s, -std::f64::consts::PI * k as f64 / (2 * n) as f64)
            })
            .collect();
        Ok(Self {
            n,
            n_out,
            fft,
            twiddles,
            buf: vec![Complex64::default(); n],
        })
    }

    pub fn compute(&mut self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        let n = self.n;
        for i in 0..n.div_ceil(2) {
            self.buf[i] = Complex64::new(x[2 * i], 0.0);
        }
        for i in 0..n / 2 {
            self.buf[n - 1 - i] = Complex64::new(x[2 * i + 1], 0.0);
        }
        self.fft.process(&mut self.buf);
        for ((o, v), w) in out.iter_mut().zip(&self.buf).zip(&self.twiddles) {
            *o = (v * w).re;
        }
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }
}

pub fn dct2_ortho(x: &[f64], n_out: usize) -> Result<Vec<f64>> {
    let mut plan = DctPlan::new(x.len(), n_out)?;
    let mut out = vec![0.0; n_out];
    plan.compute(x, &mut out);
    Ok(out)
}
