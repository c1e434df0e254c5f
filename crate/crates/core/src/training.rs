//! Adam with a step learning-rate schedule, minibatch training and
//! best-epoch selection.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::data::{load_checkpoint, save_checkpoint, NamedMatrix};
use crate::error::{Error, Result};
use crate::evaluation::{compute_eer, ScoreSet};
use crate::head;
use crate::matrix::Matrix;
use crate::model::{Detector, Example};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decoupled (`θ ← θ − lr·wd·θ`) when true, L2 added to the gradient otherwise.
    pub decoupled_weight_decay: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub step_size: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decoupled_weight_decay: true,
            batch_size: 32,
            epochs: 20,
            step_size: 10,
            gamma: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{n} must lie in [0, 1), got {b}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.step_size == 0 {
            return bad("step_size must be at least 1".into());
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || !(self.gamma > 0.0) {
            return bad("eps and gamma must be positive, weight_decay non-negative".into());
        }
        Ok(())
    }
}

/// `lr · γ^⌊epoch / step_size⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.gamma.powi((epoch / cfg.step_size) as i32)
}

/// First and second moments per parameter, indexed like the store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update from the gradients held in `store`, at learning rate `lr`.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState, cfg: &TrainConfig, lr: f64) -> Result<()> {
    for (_, p) in store.iter() {
        if !p.grad.is_finite() {
            return Err(Error::Diverged(format!("non-finite gradient for `{}`", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        debug_assert_eq!(m.shape(), p.value.shape());
        let theta = p.value.as_mut_slice();
        let grad = p.grad.as_slice();
        for ((w, &g0), (mj, vj)) in theta
            .iter_mut()
            .zip(grad)
            .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut()))
        {
            let g = if cfg.decoupled_weight_decay {
                *w -= lr * cfg.weight_decay * *w;
                g0
            } else {
                g0 + cfg.weight_decay * *w
            };
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * g;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// `NaN` when there is no held-out set.
    pub eval_eer: f64,
    pub best_eer: f64,
}

pub fn metrics_to_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,lr,train_loss,eval_eer,best_eer\n");
    for r in rows {
        writeln!(
            out,
            "{},{:e},{:.17e},{:.17e},{:.17e}",
            r.epoch, r.lr, r.train_loss, r.eval_eer, r.best_eer
        )
        .unwrap();
    }
    out
}

/// Training run state; everything needed to continue bit-identically.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Detector,
    pub cfg: TrainConfig,
    pub opt: OptimizerState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    best: Option<(f64, usize, Vec<Matrix>)>,
}

/// Outcome of [`Trainer::fit`].
#[derive(Debug, Clone)]
pub struct TrainedModel {
    /// Parameters from the epoch with the lowest held-out EER.
    pub model: Detector,
    pub best_epoch: Option<usize>,
    pub best_eer: Option<f64>,
    pub metrics: Vec<EpochMetrics>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn check_classes(set: &[Example]) -> Result<()> {
    let spoof = set.iter().filter(|e| e.label.class_index() == head::SPOOF).count();
    if spoof == 0 || spoof == set.len() {
        return Err(Error::SingleClass {
            bonafide: set.len() - spoof,
            spoof,
        });
    }
    Ok(())
}

impl Trainer {
    pub fn new(model: Detector, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = OptimizerState::new(&model.store);
        Ok(Self {
            model,
            cfg,
            opt,
            epoch: 0,
            metrics: Vec::new(),
            best: None,
        })
    }

    /// Mean cross-entropy over one pass, updating after every batch.
    fn run_epoch(&mut self, train: &[Example]) -> Result<f64> {
        let lr = lr_at(self.epoch, &self.cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(self.cfg.seed, self.epoch));
        let mut total = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            self.model.store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let e = &train[i];
                let mut tape = Tape::new();
                let (logits, _) = self.model.forward(&mut tape, e)?;
                let loss = head::cross_entropy(&mut tape, logits, e.label.class_index())?;
                let value = tape.value(loss).get(0, 0);
                if !value.is_finite() {
                    return Err(Error::Diverged(format!("loss {value} on `{}`", e.utt_id)));
                }
                total += value;
                let scaled = tape.scale(loss, scale);
                tape.backward(scaled)?.accumulate_into(&tape, &mut self.model.store);
            }
            adam_step(&mut self.model.store, &mut self.opt, &self.cfg, lr)?;
        }
        Ok(total / train.len() as f64)
    }

    /// Scores already standardized examples.
    pub fn score(&self, set: &[Example]) -> Result<ScoreSet> {
        let mut scores = ScoreSet::default();
        for e in set {
            let mut tape = Tape::new();
            let (logits, _) = self.model.forward(&mut tape, e)?;
            scores.push(e.utt_id.clone(), head::detection_score(tape.value(logits)), e.label);
        }
        Ok(scores)
    }

    /// Runs the remaining epochs. `train` and `eval` must already be
    /// standardized with the model's standardizers. `after_epoch` sees the
    /// trainer after each completed epoch (for checkpointing).
    pub fn fit(
        &mut self,
        train: &[Example],
        eval: &[Example],
        mut after_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<TrainedModel> {
        check_classes(train)?;
        while self.epoch < self.cfg.epochs {
            let lr = lr_at(self.epoch, &self.cfg);
            let train_loss = self.run_epoch(train)?;
            let eval_eer = if eval.is_empty() {
                f64::NAN
            } else {
                compute_eer(&self.score(eval)?)?.eer
            };
            let improved = match &self.best {
                None => true,
                Some((best, _, _)) => eval_eer < *best,
            };
            if improved || eval.is_empty() {
                let snapshot = self.model.store.iter().map(|(_, p)| p.value.clone()).collect();
                self.best = Some((eval_eer, self.epoch, snapshot));
            }
            let best_eer = self.best.as_ref().map_or(f64::NAN, |b| b.0);
            log::info!(
                "epoch {:>3}  lr {:.2e}  loss {:.5}  eval EER {:.2}%",
                self.epoch,
                lr,
                train_loss,
                100.0 * eval_eer
            );
            self.metrics.push(EpochMetrics {
                epoch: self.epoch,
                lr,
                train_loss,
                eval_eer,
                best_eer,
            });
            self.epoch += 1;
            after_epoch(self)?;
        }
        Ok(self.outcome())
    }

    /// The best model seen so far (the current one before any epoch).
    pub fn outcome(&self) -> TrainedModel {
        let mut model = self.model.clone();
        if let Some((_, _, params)) = &self.best {
            for (p, v) in model.store.iter_mut().zip(params) {
                p.value = v.clone();
            }
        }
        TrainedModel {
            model,
            best_epoch: self.best.as_ref().map(|b| b.1),
            best_eer: self.best.as_ref().map(|b| b.0).filter(|e| !e.is_nan()),
            metrics: self.metrics.clone(),
        }
    }

    /// Model, optimizer, schedule position, best snapshot and metrics.
    pub fn to_records(&self) -> Vec<NamedMatrix> {
        let mut out = self.model.to_records();
        let c = &self.cfg;
        let cfg_row = [
            c.lr,
            c.beta1,
            c.beta2,
            c.eps,
            c.weight_decay,
            if c.decoupled_weight_decay { 1.0 } else { 0.0 },
            c.batch_size as f64,
            c.epochs as f64,
            c.step_size as f64,
            c.gamma,
            (c.seed >> 32) as f64,
            (c.seed & 0xFFFF_FFFF) as f64,
        ];
        out.push(NamedMatrix::new("train.config", Matrix::from_rows(&[cfg_row]).unwrap()));
        out.push(NamedMatrix::new(
            "train.progress",
            Matrix::from_rows(&[[self.epoch as f64, self.opt.step as f64]]).unwrap(),
        ));
        for (i, (_, p)) in self.model.store.iter().enumerate() {
            out.push(NamedMatrix::new(format!("adam.m.{}", p.name), self.opt.m[i].clone()));
            out.push(NamedMatrix::new(format!("adam.v.{}", p.name), self.opt.v[i].clone()));
        }
        if let Some((eer, epoch, params)) = &self.best {
            out.push(NamedMatrix::new(
                "best.meta",
                Matrix::from_rows(&[[*eer, *epoch as f64]]).unwrap(),
            ));
            for ((_, p), v) in self.model.store.iter().zip(params) {
                out.push(NamedMatrix::new(format!("best.{}", p.name), v.clone()));
            }
        }
        let rows: Vec<[f64; 5]> = self
            .metrics
            .iter()
            .map(|m| [m.epoch as f64, m.lr, m.train_loss, m.eval_eer, m.best_eer])
            .collect();
        out.push(NamedMatrix::new(
            "train.metrics",
            if rows.is_empty() {
                Matrix::zeros(0, 5)
            } else {
                Matrix::from_rows(&rows).unwrap()
            },
        ));
        out
    }

    pub fn from_records(records: &[NamedMatrix]) -> Result<Self> {
        let model = Detector::from_records(records)?;
        let by_name: HashMap<&str, &Matrix> = records.iter().map(|r| (r.name.as_str(), &r.matrix)).collect();
        let get = |name: &str| -> Result<&Matrix> {
            by_name
                .get(name)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("training state lacks `{name}`")))
        };
        let c = get("train.config")?;
        if c.shape() != (1, 12) {
            return Err(Error::Checkpoint("malformed train.config".into()));
        }
        let c = c.row(0);
        let cfg = TrainConfig {
            lr: c[0],
            beta1: c[1],
            beta2: c[2],
            eps: c[3],
            weight_decay: c[4],
            decoupled_weight_decay: c[5] != 0.0,
            batch_size: c[6] as usize,
            epochs: c[7] as usize,
            step_size: c[8] as usize,
            gamma: c[9],
            seed: ((c[10] as u64) << 32) | c[11] as u64,
        };
        let progress = get("train.progress")?;
        if progress.shape() != (1, 2) {
            return Err(Error::Checkpoint("malformed train.progress".into()));
        }
        let mut trainer = Trainer::new(model, cfg)?;
        trainer.epoch = progress.get(0, 0) as usize;
        trainer.opt.step = progress.get(0, 1) as u64;
        let shapes: Vec<(String, (usize, usize))> = trainer
            .model
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.shape()))
            .collect();
        let fetch = |name: String, shape: (usize, usize)| -> Result<Matrix> {
            let m = get(&name)?;
            if m.shape() != shape {
                return Err(Error::Checkpoint(format!("`{name}` has the wrong shape")));
            }
            Ok(m.clone())
        };
        for (i, (name, shape)) in shapes.iter().enumerate() {
            trainer.opt.m[i] = fetch(format!("adam.m.{name}"), *shape)?;
            trainer.opt.v[i] = fetch(format!("adam.v.{name}"), *shape)?;
        }
        if let Some(meta) = by_name.get("best.meta") {
            let params = shapes
                .iter()
                .map(|(name, shape)| fetch(format!("best.{name}"), *shape))
                .collect::<Result<Vec<_>>>()?;
            trainer.best = Some((meta.get(0, 0), meta.get(0, 1) as usize, params));
        }
        let metrics = get("train.metrics")?;
        trainer.metrics = (0..metrics.rows())
            .map(|r| {
                let v = metrics.row(r);
                EpochMetrics {
                    epoch: v[0] as usize,
                    lr: v[1],
                    train_loss: v[2],
                    eval_eer: v[3],
                    best_eer: v[4],
                }
            })
            .collect();
        Ok(trainer)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.to_records())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_records(&load_checkpoint(path)?)
    }
}

/// Fits standardizers on `train`, standardizes both sets and trains.
pub fn train(mut model: Detector, train: &[Example], eval: &[Example], cfg: &TrainConfig) -> Result<TrainedModel> {
    model.fit_standardizers(train);
    let train: Vec<Example> = train.iter().map(|e| model.prepare(e)).collect::<Result<_>>()?;
    let eval: Vec<Example> = eval.iter().map(|e| model.prepare(e)).collect::<Result<_>>()?;
    Trainer::new(model, *cfg)?.fit(&train, &eval, |_| Ok(()))
}
