//! The full detector: stream standardization, alignment, fusion and head.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradcheck, GradCheckReport, ParamId, ParamStore, Tape, Var};
use crate::data::{read_features, AudioSource, Label, Manifest, NamedMatrix, SslSource};
use crate::dsp::{canonicalize_length, Waveform, DEFAULT_CLIP_LEN, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::features::{extract, FeatureKind, SpectralConfig, Stream};
use crate::fusion::{self, add_linear, FusionOutput, FusionParams, GateTrace, Strategy, DEFAULT_DIM};
use crate::head::{self, HeadParams, DEFAULT_HIDDEN};
use crate::matrix::Matrix;
use crate::synth::{synth_clip, SslProjector, SynthRecipe, SSL_DIM, SSL_FRAMES};
use crate::wav::read_wav;

const CHECKPOINT_VERSION: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub strategy: Strategy,
    pub feature: FeatureKind,
    pub sf_dim: usize,
    pub ssl_dim: usize,
    /// Frame count both streams are aligned to (the SSL clock).
    pub frames: usize,
    pub dim: usize,
    pub hidden: usize,
    pub shared_mutual: bool,
}

impl ModelConfig {
    pub fn new(strategy: Strategy, feature: FeatureKind) -> Self {
        Self {
            strategy,
            feature,
            sf_dim: SpectralConfig::new(feature).output_dim(),
            ssl_dim: SSL_DIM,
            frames: SSL_FRAMES,
            dim: DEFAULT_DIM,
            hidden: DEFAULT_HIDDEN,
            shared_mutual: true,
        }
    }

    pub fn uses_sf(&self) -> bool {
        self.strategy != Strategy::NoFusionSsl
    }

    pub fn uses_ssl(&self) -> bool {
        self.strategy != Strategy::NoFusionSf
    }

    fn to_meta(self) -> Matrix {
        let v = [
            CHECKPOINT_VERSION,
            self.strategy.code() as f64,
            self.feature.code() as f64,
            self.sf_dim as f64,
            self.ssl_dim as f64,
            self.frames as f64,
            self.dim as f64,
            self.hidden as f64,
            if self.shared_mutual { 1.0 } else { 0.0 },
        ];
        Matrix::from_rows(&[v]).unwrap()
    }

    fn from_meta(m: &Matrix) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(format!("meta record: {msg}"));
        if m.shape() != (1, 9) {
            return Err(bad(&format!("expected 1x9, got {:?}", m.shape())));
        }
        let v = m.row(0);
        if v[0] != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", v[0])));
        }
        let count = |x: f64| {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(bad(&format!("bad count {x}")))
            }
        };
        Ok(Self {
            strategy: Strategy::from_code(count(v[1])? as u32).ok_or_else(|| bad("unknown strategy"))?,
            feature: FeatureKind::from_code(count(v[2])? as u32).ok_or_else(|| bad("unknown feature"))?,
            sf_dim: count(v[3])?,
            ssl_dim: count(v[4])?,
            frames: count(v[5])?,
            dim: count(v[6])?,
            hidden: count(v[7])?,
            shared_mutual: v[8] != 0.0,
        })
    }
}

/// Per-dimension affine standardization fitted on training frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean and standard deviation over every frame; constant
    /// dimensions keep unit scale.
    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a Matrix>, dim: usize) -> Self {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        let mats: Vec<&Matrix> = mats.into_iter().collect();
        for m in &mats {
            for r in 0..m.rows() {
                for (c, &v) in m.row(r).iter().enumerate() {
                    sum[c] += v;
                }
            }
            n += m.rows();
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for m in &mats {
            for r in 0..m.rows() {
                for (c, &v) in m.row(r).iter().enumerate() {
                    sq[c] += (v - mean[c]).powi(2);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.mean.len() {
            return Err(Error::Shape {
                op: "standardize",
                lhs: m.shape(),
                rhs: (m.rows(), self.mean.len()),
            });
        }
        Ok(Matrix::from_fn(m.rows(), m.cols(), |r, c| {
            (m.get(r, c) - self.mean[c]) / self.std[c]
        }))
    }

    fn records(&self, prefix: &str) -> [NamedMatrix; 2] {
        [
            NamedMatrix::new(
                format!("{prefix}.mean"),
                Matrix::from_vec(1, self.mean.len(), self.mean.clone()).unwrap(),
            ),
            NamedMatrix::new(
                format!("{prefix}.std"),
                Matrix::from_vec(1, self.std.len(), self.std.clone()).unwrap(),
            ),
        ]
    }
}

/// One utterance with both streams loaded.
#[derive(Debug, Clone)]
pub struct Example {
    pub utt_id: String,
    pub label: Label,
    pub dataset_tag: String,
    pub sf: Option<Matrix>,
    pub ssl: Option<Matrix>,
}

/// Scoring result for one utterance.
#[derive(Debug, Clone)]
pub struct Inference {
    pub score: f64,
    pub logits: Matrix,
    pub gate: Option<GateTrace>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub proj_sf: Option<(ParamId, ParamId)>,
    pub proj_ssl: Option<(ParamId, ParamId)>,
    pub fusion: FusionParams,
    pub head: HeadParams,
    pub sf_norm: Standardizer,
    pub ssl_norm: Standardizer,
}

impl Detector {
    /// Fresh parameters drawn from `seed`, with identity standardization.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let proj_sf = config
            .uses_sf()
            .then(|| add_linear(&mut store, &mut rng, "align.sf", config.sf_dim, d));
        let proj_ssl = config
            .uses_ssl()
            .then(|| add_linear(&mut store, &mut rng, "align.ssl", config.ssl_dim, d));
        let fusion = FusionParams::init(&mut store, &mut rng, config.strategy, d, config.shared_mutual);
        let head = HeadParams::init(&mut store, &mut rng, d, config.hidden);
        Self {
            config,
            store,
            proj_sf,
            proj_ssl,
            fusion,
            head,
            sf_norm: Standardizer::identity(config.sf_dim),
            ssl_norm: Standardizer::identity(config.ssl_dim),
        }
    }

    /// Fits both standardizers on `examples`.
    pub fn fit_standardizers(&mut self, examples: &[Example]) {
        if self.config.uses_sf() {
            self.sf_norm = Standardizer::fit(examples.iter().filter_map(|e| e.sf.as_ref()), self.config.sf_dim);
        }
        if self.config.uses_ssl() {
            self.ssl_norm = Standardizer::fit(examples.iter().filter_map(|e| e.ssl.as_ref()), self.config.ssl_dim);
        }
    }

    /// Applies the fitted standardizers, returning a copy ready for
    /// [`Detector::forward`].
    pub fn prepare(&self, e: &Example) -> Result<Example> {
        self.check_dims(e.sf.as_ref(), e.ssl.as_ref())?;
        let sf = match (&e.sf, self.config.uses_sf()) {
            (Some(m), true) => Some(self.sf_norm.apply(m)?),
            (None, true) => return Err(Error::InvalidParam(format!("{}: spectral features missing", e.utt_id))),
            _ => None,
        };
        let ssl = match (&e.ssl, self.config.uses_ssl()) {
            (Some(m), true) => Some(self.ssl_norm.apply(m)?),
            (None, true) => return Err(Error::InvalidParam(format!("{}: SSL features missing", e.utt_id))),
            _ => None,
        };
        Ok(Example {
            utt_id: e.utt_id.clone(),
            label: e.label,
            dataset_tag: e.dataset_tag.clone(),
            sf,
            ssl,
        })
    }

    fn check_dims(&self, sf: Option<&Matrix>, ssl: Option<&Matrix>) -> Result<()> {
        let c = &self.config;
        if let Some(m) = sf {
            if m.cols() != c.sf_dim {
                return Err(Error::InvalidParam(format!(
                    "spectral features have {} dims but the model expects {} ({})",
                    m.cols(),
                    c.sf_dim,
                    c.feature
                )));
            }
        }
        if let Some(m) = ssl {
            if m.shape() != (c.frames, c.ssl_dim) {
                return Err(Error::InvalidParam(format!(
                    "SSL features are {}x{} but the model expects {}x{}",
                    m.rows(),
                    m.cols(),
                    c.frames,
                    c.ssl_dim
                )));
            }
        }
        Ok(())
    }

    /// Logits for already standardized inputs.
    pub fn forward(&self, tape: &mut Tape, e: &Example) -> Result<(Var, FusionOutput)> {
        self.forward_with(tape, &self.store, e)
    }

    /// [`Detector::forward`] reading parameter values from `store`, which
    /// must share this detector's layout.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, e: &Example) -> Result<(Var, FusionOutput)> {
        self.check_dims(e.sf.as_ref(), e.ssl.as_ref())?;
        let sf = match (self.proj_sf, &e.sf) {
            (Some(p), Some(m)) => Some(fusion::align_sf(tape, store, m, self.config.frames, p)?),
            (Some(_), None) => return Err(Error::InvalidParam(format!("{}: spectral features missing", e.utt_id))),
            _ => None,
        };
        let ssl = match (self.proj_ssl, &e.ssl) {
            (Some(p), Some(m)) => Some(fusion::align_ssl(tape, store, m, p)?),
            (Some(_), None) => return Err(Error::InvalidParam(format!("{}: SSL features missing", e.utt_id))),
            _ => None,
        };
        let out = match (sf, ssl) {
            (Some(a), Some(b)) => fusion::fuse(tape, store, a, b, &self.fusion)?,
            (Some(h), None) | (None, Some(h)) => FusionOutput {
                fused: h,
                gate: None,
                attention: vec![],
            },
            (None, None) => unreachable!("every strategy uses at least one stream"),
        };
        let logits = head::score(tape, store, out.fused, &self.head)?;
        Ok((logits, out))
    }

    /// Scores a raw (unstandardized) example.
    pub fn infer(&self, e: &Example) -> Result<Inference> {
        let prepared = self.prepare(e)?;
        let mut tape = Tape::new();
        let (logits, out) = self.forward(&mut tape, &prepared)?;
        let logits = tape.value(logits).clone();
        Ok(Inference {
            score: head::detection_score(&logits),
            logits,
            gate: out.gate,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn to_records(&self) -> Vec<NamedMatrix> {
        let mut out = vec![NamedMatrix::new("meta", self.config.to_meta())];
        for (_, p) in self.store.iter() {
            out.push(NamedMatrix::new(format!("param.{}", p.name), p.value.clone()));
        }
        if self.config.uses_sf() {
            out.extend(self.sf_norm.records("norm.sf"));
        }
        if self.config.uses_ssl() {
            out.extend(self.ssl_norm.records("norm.ssl"));
        }
        out
    }

    /// Rebuilds a detector from checkpoint records; extra records (optimizer
    /// state and the like) are ignored.
    pub fn from_records(records: &[NamedMatrix]) -> Result<Self> {
        let by_name: HashMap<&str, &Matrix> = records.iter().map(|r| (r.name.as_str(), &r.matrix)).collect();
        let meta = by_name
            .get("meta")
            .ok_or_else(|| Error::Checkpoint("missing meta record".into()))?;
        let config = ModelConfig::from_meta(meta)?;
        let mut model = Detector::new(config, 0);
        for param in model.store.iter_mut() {
            let key = format!("param.{}", param.name);
            let v = by_name
                .get(key.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", param.name)))?;
            if v.shape() != param.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    param.name,
                    v.shape(),
                    param.value.shape()
                )));
            }
            param.value = (*v).clone();
        }
        let norm = |prefix: &str, dim: usize| -> Result<Standardizer> {
            let get = |s: &str| {
                by_name
                    .get(format!("{prefix}.{s}").as_str())
                    .filter(|m| m.shape() == (1, dim))
                    .map(|m| m.as_slice().to_vec())
                    .ok_or_else(|| Error::Checkpoint(format!("missing or malformed {prefix}.{s}")))
            };
            Ok(Standardizer {
                mean: get("mean")?,
                std: get("std")?,
            })
        };
        if config.uses_sf() {
            model.sf_norm = norm("norm.sf", config.sf_dim)?;
        }
        if config.uses_ssl() {
            model.ssl_norm = norm("norm.ssl", config.ssl_dim)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::data::save_checkpoint(path, &self.to_records())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_records(&crate::data::load_checkpoint(path)?)
    }
}

/// Loads audio and features for every manifest entry.
///
/// Only the streams asked for are materialized; pseudo-SSL projectors are
/// built once per seed.
pub struct FeatureLoader {
    pub spectral: SpectralConfig,
    projectors: HashMap<u64, SslProjector>,
}

impl FeatureLoader {
    pub fn new(spectral: SpectralConfig) -> Self {
        Self {
            spectral,
            projectors: HashMap::new(),
        }
    }

    /// Decodes or synthesizes one clip and canonicalizes its length.
    pub fn audio(&self, m: &Manifest, source: &AudioSource, label: Label) -> Result<Waveform> {
        let w = match source {
            AudioSource::Wav(p) => read_wav(m.resolve(p))?,
            AudioSource::Synth { seed } => {
                synth_clip(&SynthRecipe::new(*seed, label), DEFAULT_CLIP_LEN, DEFAULT_SAMPLE_RATE)?
            }
        };
        Ok(canonicalize_length(&w, DEFAULT_CLIP_LEN))
    }

    pub fn load(&mut self, m: &Manifest, want_sf: bool, want_ssl: bool) -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(m.len());
        for e in &m.entries {
            let needs_audio = want_sf || (want_ssl && matches!(e.ssl_source, SslSource::Synth { .. }));
            let audio = if needs_audio {
                Some(self.audio(m, &e.source, e.label)?)
            } else {
                None
            };
            let sf = match (&audio, want_sf) {
                (Some(w), true) => Some(extract(w, &self.spectral)?.data),
                _ => None,
            };
            let ssl = if want_ssl {
                Some(match &e.ssl_source {
                    SslSource::Features(p) => {
                        let fm = read_features(m.resolve(p))?;
                        if fm.stream != Stream::Ssl {
                            return Err(Error::InvalidParam(format!(
                                "{}: {} holds spectral, not SSL, features",
                                e.utt_id,
                                p.display()
                            )));
                        }
                        fm.data
                    }
                    SslSource::Synth { projection_seed } => {
                        let proj = match self.projectors.entry(*projection_seed) {
                            std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
                            std::collections::hash_map::Entry::Vacant(v) => {
                                v.insert(SslProjector::new(*projection_seed)?)
                            }
                        };
                        proj.compute(audio.as_ref().expect("audio loaded for synth SSL"))?.data
                    }
                })
            } else {
                None
            };
            out.push(Example {
                utt_id: e.utt_id.clone(),
                label: e.label,
                dataset_tag: e.dataset_tag.clone(),
                sf,
                ssl,
            });
        }
        Ok(out)
    }
}

/// Central-difference check of the cross-entropy gradient with respect to
/// every trainable parameter of a small detector using `strategy`.
pub fn gradcheck_detector(strategy: Strategy, seed: u64, shared_mutual: bool) -> Result<GradCheckReport> {
    let config = ModelConfig {
        strategy,
        feature: FeatureKind::Mfcc,
        sf_dim: 5,
        ssl_dim: 7,
        frames: 4,
        dim: 6,
        hidden: 5,
        shared_mutual,
    };
    let model = Detector::new(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9);
    let mut draw = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.5..1.5));
    let example = Example {
        utt_id: "gradcheck".into(),
        label: if seed % 2 == 0 { Label::Bonafide } else { Label::Spoof },
        dataset_tag: "gradcheck".into(),
        sf: Some(draw(2 * config.frames, config.sf_dim)),
        ssl: Some(draw(config.frames, config.ssl_dim)),
    };
    // Freshly initialised head weights are small enough that some parameter
    // gradients sink below finite-difference round-off, so the check runs at
    // a perturbed point where every group carries a sizeable gradient.
    let mut store = model.store.clone();
    for p in store.iter_mut() {
        for v in p.value.as_mut_slice() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    gradcheck(&mut store, 1e-5, |tape, s| {
        let (logits, _) = model.forward_with(tape, s, &example)?;
        head::cross_entropy(tape, logits, example.label.class_index())
    })
}
