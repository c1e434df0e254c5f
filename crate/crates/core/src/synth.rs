//! Synthetic desk-scale corpus.
//!
//! Bona fide clips are vibrato harmonic tones with a slow amplitude envelope
//! and a noise floor. Spoof clips start from the exact same base and pass
//! through an artifact stage: quantized partial amplitudes, random phase
//! jumps on a fixed period, and a spectral notch. The pseudo-SSL stream is a
//! fixed random projection of log mel energies, so it carries real signal
//! information without any pretrained encoder.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::data::{write_features, write_manifest, AudioSource, Label, Manifest, ManifestEntry, SslSource};
use crate::dsp::{
    canonicalize_length, floored_ln, frame_and_window, triangular_filterbank, FrequencyScale, PowerSpectrumPlan,
    Waveform, WindowKind, DEFAULT_CLIP_LEN, DEFAULT_SAMPLE_RATE,
};
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, Stream};
use crate::matrix::{gemm, Matrix};
use crate::wav::{decode_wav, encode_wav};

pub const SSL_FRAMES: usize = 201;
pub const SSL_DIM: usize = 1024;
pub const SSL_WIN: usize = 400;
pub const SSL_HOP: usize = 320;
const SSL_FILTERS: usize = 80;
const ARTIFACT_STREAM: u64 = 0xA57F_AC75;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecipe {
    pub seed: u64,
    pub label: Label,
    pub f0_range: (f64, f64),
    pub n_partials: usize,
    pub noise_floor: f64,
    /// Phase discontinuity period for spoof clips.
    pub phase_jump_ms: f64,
    /// Band removed from spoof clips, in Hz.
    pub notch_hz: (f64, f64),
    pub amplitude_levels: u32,
    /// Turn off to get the spoof recipe's base waveform.
    pub artifacts: bool,
}

impl SynthRecipe {
    pub fn new(seed: u64, label: Label) -> Self {
        Self {
            seed,
            label,
            f0_range: (90.0, 240.0),
            n_partials: 48,
            noise_floor: 2e-3,
            phase_jump_ms: 50.0,
            notch_hz: (3400.0, 4100.0),
            amplitude_levels: 4,
            artifacts: true,
        }
    }

    fn applies_artifacts(&self) -> bool {
        self.label == Label::Spoof && self.artifacts
    }
}

/// Deterministic clip of exactly `len` samples.
pub fn synth_clip(r: &SynthRecipe, len: usize, sr: u32) -> Result<Waveform> {
    if sr == 0 {
        return Err(Error::InvalidParam("sample rate must be positive".into()));
    }
    let srf = sr as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    let f0 = rng.random_range(r.f0_range.0..r.f0_range.1);
    let vib_rate = rng.random_range(4.0..6.0);
    let vib_depth = rng.random_range(0.005..0.015);
    let env_rate = rng.random_range(2.0..4.0);
    let env_phase = rng.random_range(0.0..2.0 * PI);
    let mut amps: Vec<f64> = (1..=r.n_partials)
        .map(|k| rng.random_range(0.3..1.0) / (k as f64).sqrt())
        .collect();
    let mut phases: Vec<f64> = (0..r.n_partials).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let noise: Vec<f64> = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            r.noise_floor * z
        })
        .collect();
    let gain = 0.5 / amps.iter().sum::<f64>();
    let top = f0 * (1.0 + vib_depth);
    let usable = amps
        .iter()
        .enumerate()
        .take_while(|(k, _)| (*k + 1) as f64 * top < 0.49 * srf)
        .count();

    let spoof = r.applies_artifacts();
    let mut art_rng = ChaCha8Rng::seed_from_u64(r.seed ^ ARTIFACT_STREAM);
    if spoof {
        let peak = amps.iter().cloned().fold(0.0, f64::max);
        let step = peak / r.amplitude_levels as f64;
        for a in &mut amps {
            *a = (*a / step).round() * step;
        }
    }
    let jump_every = ((r.phase_jump_ms / 1000.0) * srf).round().max(1.0) as usize;

    // partial k contributes Im(c_k · e^{i(k+1)φ}) with c_k = a_k e^{i p_k}
    let coeff = |a: &[f64], p: &[f64]| -> Vec<Complex64> {
        a.iter()
            .zip(p)
            .take(usable)
            .map(|(&a, &p)| Complex64::from_polar(a, p))
            .collect()
    };
    let mut c = coeff(&amps, &phases);
    let mut x = vec![0.0; len];
    let mut base_phase = 0.0;
    for (n, out) in x.iter_mut().enumerate() {
        if spoof && n > 0 && n % jump_every == 0 {
            for p in phases.iter_mut().take(usable) {
                *p += art_rng.random_range(-PI..PI);
            }
            c = coeff(&amps, &phases);
        }
        let t = n as f64 / srf;
        let inst_f0 = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
        base_phase += 2.0 * PI * inst_f0 / srf;
        let env = 0.6 + 0.4 * (2.0 * PI * env_rate * t + env_phase).sin();
        let step = Complex64::from_polar(1.0, base_phase);
        let mut h = step;
        let mut s = 0.0;
        for ck in &c {
            s += (h * ck).im;
            h *= step;
        }
        *out = gain * env * s + noise[n];
    }
    if spoof {
        notch(&mut x, sr, r.notch_hz);
    }
    Waveform::new(x, sr)
}

/// Zeroes a frequency band with one full-length circular FFT.
fn notch(x: &mut [f64], sr: u32, band: (f64, f64)) {
    let n = x.len();
    if n == 0 {
        return;
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    let hz_per_bin = sr as f64 / n as f64;
    for k in 0..=n / 2 {
        let f = k as f64 * hz_per_bin;
        if f >= band.0 && f <= band.1 {
            buf[k] = Complex64::new(0.0, 0.0);
            buf[(n - k) % n] = Complex64::new(0.0, 0.0);
        }
    }
    inv.process(&mut buf);
    for (v, c) in x.iter_mut().zip(&buf) {
        *v = c.re / n as f64;
    }
}

/// Pseudo-SSL front end with its projection matrix built once.
#[derive(Debug, Clone)]
pub struct SslProjector {
    filterbank: Matrix,
    projection: Matrix,
    seed: u64,
}

impl SslProjector {
    pub fn new(seed: u64) -> Result<Self> {
        let fft = 512;
        let filterbank = triangular_filterbank(
            FrequencyScale::Mel,
            SSL_FILTERS,
            fft,
            DEFAULT_SAMPLE_RATE,
            0.0,
            DEFAULT_SAMPLE_RATE as f64 / 2.0,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (SSL_FILTERS as f64).sqrt();
        let projection = Matrix::from_fn(SSL_FILTERS, SSL_DIM, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        });
        Ok(Self {
            filterbank,
            projection,
            seed,
        })
    }

    /// Always 201×1024: the input is canonicalized to the default clip length.
    pub fn compute(&self, w: &Waveform) -> Result<FeatureMatrix> {
        if w.sample_rate() != DEFAULT_SAMPLE_RATE {
            return Err(Error::InvalidParam(format!(
                "pseudo-SSL features expect {DEFAULT_SAMPLE_RATE} Hz audio, got {}",
                w.sample_rate()
            )));
        }
        let w = canonicalize_length(w, DEFAULT_CLIP_LEN);
        let grid = frame_and_window(&w, SSL_WIN, SSL_HOP, WindowKind::Hamming)?;
        debug_assert_eq!(grid.n_frames(), SSL_FRAMES);
        let mut plan = PowerSpectrumPlan::new(512)?;
        let mut power = Matrix::zeros(grid.n_frames(), plan.n_bins());
        for t in 0..grid.n_frames() {
            plan.compute(grid.frame(t), power.row_mut(t))?;
        }
        let energies = gemm(&power, false, &self.filterbank, true)?.map(floored_ln);
        Ok(FeatureMatrix {
            data: gemm(&energies, false, &self.projection, false)?,
            stream: Stream::Ssl,
            frame_rate: DEFAULT_SAMPLE_RATE as f64 / SSL_HOP as f64,
            provenance: format!("pseudo-ssl(seed={})", self.seed),
        })
    }
}

pub fn synth_ssl_features(w: &Waveform, seed: u64) -> Result<FeatureMatrix> {
    SslProjector::new(seed)?.compute(w)
}

/// Output of [`generate_corpus`].
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Manifest,
    pub eval: Manifest,
    pub train_path: PathBuf,
    pub eval_path: PathBuf,
}

/// Clip seeds for a split: consecutive integers from a base drawn from the
/// corpus seed, with the eval block placed after the train block so the two
/// never overlap.
fn clip_seeds(seed: u64, n_train: usize, n_eval: usize) -> (Vec<u64>, Vec<u64>) {
    let base = ChaCha8Rng::seed_from_u64(seed).next_u64() >> 2;
    let train = (0..n_train as u64).map(|i| base + i).collect();
    let eval = (0..n_eval as u64).map(|i| base + n_train as u64 + i).collect();
    (train, eval)
}

fn write_split(dir: &Path, split: &str, seeds: &[u64], projector: &SslProjector) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(seeds.len());
    for (i, &seed) in seeds.iter().enumerate() {
        let label = if i % 2 == 0 { Label::Bonafide } else { Label::Spoof };
        let utt_id = format!("{split}_{i:05}");
        let clip = synth_clip(&SynthRecipe::new(seed, label), DEFAULT_CLIP_LEN, DEFAULT_SAMPLE_RATE)?;
        let bytes = encode_wav(&clip);
        // features come from the stored 16-bit audio, exactly as a reader sees it
        let stored = decode_wav(&bytes).expect("encoder output decodes");
        let wav_rel = PathBuf::from("wav").join(format!("{utt_id}.wav"));
        let ssl_rel = PathBuf::from("ssl").join(format!("{utt_id}.sff"));
        let wav_path = dir.join(&wav_rel);
        fs::write(&wav_path, &bytes).map_err(|e| Error::io(&wav_path, e))?;
        write_features(dir.join(&ssl_rel), &projector.compute(&stored)?)?;
        entries.push(ManifestEntry {
            utt_id,
            source: AudioSource::Wav(wav_rel),
            ssl_source: SslSource::Features(ssl_rel),
            label,
            dataset_tag: split.to_string(),
        });
    }
    let mut m = Manifest::new(entries)?;
    m.root = dir.to_path_buf();
    Ok(m)
}

/// Writes `wav/`, `ssl/`, `train.tsv` and `eval.tsv` under `dir`. Labels
/// alternate so each split is balanced.
pub fn generate_corpus(dir: impl AsRef<Path>, n_train: usize, n_eval: usize, seed: u64) -> Result<Corpus> {
    let dir = dir.as_ref();
    for sub in ["wav", "ssl"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let projector = SslProjector::new(seed)?;
    let (train_seeds, eval_seeds) = clip_seeds(seed, n_train, n_eval);
    let train = write_split(dir, "train", &train_seeds, &projector)?;
    let eval = write_split(dir, "eval", &eval_seeds, &projector)?;
    let train_path = dir.join("train.tsv");
    let eval_path = dir.join("eval.tsv");
    write_manifest(&train_path, &train)?;
    write_manifest(&eval_path, &eval)?;
    log::info!("wrote {n_train} train and {n_eval} eval clips to {}", dir.display());
    Ok(Corpus {
        train,
        eval,
        train_path,
        eval_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::next_pow2;

    fn clip(seed: u64, label: Label) -> Waveform {
        synth_clip(&SynthRecipe::new(seed, label), DEFAULT_CLIP_LEN, DEFAULT_SAMPLE_RATE).unwrap()
    }

    /// Energy in `[lo, hi]` Hz summed over Hamming-windowed 512-sample frames.
    fn band_energy(w: &Waveform, lo: f64, hi: f64) -> f64 {
        let grid = frame_and_window(w, 400, 160, WindowKind::Hamming).unwrap();
        let fft = next_pow2(400);
        let mut plan = PowerSpectrumPlan::new(fft).unwrap();
        let mut p = vec![0.0; plan.n_bins()];
        let mut total = 0.0;
        for t in 0..grid.n_frames() {
            plan.compute(grid.frame(t), &mut p).unwrap();
            for (k, v) in p.iter().enumerate() {
                let f = k as f64 * 16_000.0 / fft as f64;
                if f >= lo && f <= hi {
                    total += v;
                }
            }
        }
        total
    }

    #[test]
    fn clips_are_deterministic_and_exact_length() {
        for label in [Label::Bonafide, Label::Spoof] {
            let a = clip(5, label);
            let b = clip(5, label);
            assert_eq!(a.len(), DEFAULT_CLIP_LEN);
            assert_eq!(a.samples(), b.samples());
            assert!(a.samples().iter().all(|v| v.abs() < 1.0));
        }
        assert_ne!(clip(5, Label::Bonafide).samples(), clip(6, Label::Bonafide).samples());
    }

    #[test]
    fn spoof_differs_only_through_artifact_stage() {
        let mut r = SynthRecipe::new(11, Label::Spoof);
        r.artifacts = false;
        let base = synth_clip(&r, DEFAULT_CLIP_LEN, DEFAULT_SAMPLE_RATE).unwrap();
        assert_eq!(base.samples(), clip(11, Label::Bonafide).samples());
        assert_ne!(base.samples(), clip(11, Label::Spoof).samples());
    }

    #[test]
    fn spoof_notch_is_at_least_20_db_deep() {
        for seed in 0..5 {
            let bona = band_energy(&clip(seed, Label::Bonafide), 3500.0, 4000.0);
            let spoof = band_energy(&clip(seed, Label::Spoof), 3500.0, 4000.0);
            assert!(bona > 0.0);
            assert!(spoof <= 0.01 * bona, "seed {seed}: {spoof} vs {bona}");
        }
    }

    #[test]
    fn spoof_has_phase_jumps_on_50_ms_grid() {
        // with the notch and quantization neutralized, the only difference
        // left is the phase jumps, which start exactly at sample 800
        let mut spoof = SynthRecipe::new(3, Label::Spoof);
        spoof.notch_hz = (1e9, 1e9);
        spoof.amplitude_levels = 1_000_000_000;
        let a = synth_clip(&spoof, 4000, DEFAULT_SAMPLE_RATE).unwrap();
        let b = clip(3, Label::Bonafide);
        let first_diff = a
            .samples()
            .iter()
            .zip(b.samples())
            .position(|(x, y)| (x - y).abs() > 1e-9)
            .unwrap();
        assert_eq!(first_diff, 800);
    }

    #[test]
    fn pseudo_ssl_shape_and_content() {
        let proj = SslProjector::new(42).unwrap();
        let a = proj.compute(&clip(1, Label::Bonafide)).unwrap();
        assert_eq!(a.data.shape(), (SSL_FRAMES, SSL_DIM));
        assert_eq!(a.stream, Stream::Ssl);
        assert!(a.data.is_finite());
        let again = synth_ssl_features(&clip(1, Label::Bonafide), 42).unwrap();
        assert_eq!(a, again);
        let b = proj.compute(&clip(2, Label::Spoof)).unwrap();
        assert_ne!(a.data, b.data);
        let col = a.data.column(0);
        assert!(col.iter().any(|&v| (v - col[0]).abs() > 1e-6));
        // short input is padded to the canonical clip first
        let short = Waveform::new(vec![0.1; 1000], DEFAULT_SAMPLE_RATE).unwrap();
        assert_eq!(proj.compute(&short).unwrap().data.shape(), (SSL_FRAMES, SSL_DIM));
    }

    #[test]
    fn corpus_layout_and_determinism() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let c = generate_corpus(d1.path(), 4, 2, 7).unwrap();
        generate_corpus(d2.path(), 4, 2, 7).unwrap();
        assert_eq!(c.train.len(), 4);
        assert_eq!(c.eval.len(), 2);
        assert_eq!(c.train.class_counts(), (2, 2));
        assert_eq!(fs::read_dir(d1.path().join("wav")).unwrap().count(), 6);
        assert_eq!(fs::read_dir(d1.path().join("ssl")).unwrap().count(), 6);
        for rel in ["train.tsv", "eval.tsv", "wav/train_00001.wav", "ssl/eval_00001.sff"] {
            assert_eq!(
                fs::read(d1.path().join(rel)).unwrap(),
                fs::read(d2.path().join(rel)).unwrap()
            );
        }
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let (train, eval) = clip_seeds(42, 200, 100);
        assert!(train.iter().all(|s| !eval.contains(s)));
        assert_eq!(train.len(), 200);
    }
}
