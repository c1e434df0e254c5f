//! Attentive-statistics classifier head.
//!
//! Frames are weighted by a softmax over `h · a`, pooled into a weighted mean
//! and weighted standard deviation, and scored by a two-layer MLP with two
//! output logits (0 = bona fide, 1 = spoof).

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::init_weight;
use crate::matrix::Matrix;

pub const DEFAULT_HIDDEN: usize = 64;
pub const POOL_EPS: f64 = 1e-9;

pub const BONAFIDE: usize = 0;
pub const SPOOF: usize = 1;

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub attn_vector: ParamId,
    pub hidden: (ParamId, ParamId),
    pub out: (ParamId, ParamId),
    pub dim: usize,
    pub hidden_units: usize,
}

impl HeadParams {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, dim: usize, hidden_units: usize) -> Self {
        let attn_vector = store.add("head.attn", init_weight(rng, dim, 1));
        let hidden = (
            store.add("head.hidden.weight", init_weight(rng, 2 * dim, hidden_units)),
            store.add("head.hidden.bias", Matrix::zeros(1, hidden_units)),
        );
        let out = (
            store.add("head.out.weight", init_weight(rng, hidden_units, 2)),
            store.add("head.out.bias", Matrix::zeros(1, 2)),
        );
        Self {
            attn_vector,
            hidden,
            out,
            dim,
            hidden_units,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 5] {
        [self.attn_vector, self.hidden.0, self.hidden.1, self.out.0, self.out.1]
    }
}

/// `[Σ α_t h_t ; sqrt(Σ α_t (h_t − μ)² + ε)]` as a 1×2D row, with
/// `α = softmax_t(h · attn_vector)`.
pub fn pool_attentive(tape: &mut Tape, store: &ParamStore, h: Var, p: &HeadParams) -> Result<Var> {
    let (t_len, d) = tape.shape(h);
    if t_len == 0 {
        return Err(Error::InvalidParam("cannot pool zero frames".into()));
    }
    if d != p.dim {
        return Err(Error::Shape {
            op: "pool_attentive",
            lhs: (t_len, d),
            rhs: (t_len, p.dim),
        });
    }
    let a = tape.param(store, p.attn_vector);
    let energies = tape.matmul(h, a)?;
    let row = tape.transpose(energies);
    let alpha = tape.softmax_rows(row);
    let mean = tape.matmul(alpha, h)?;
    let ones = tape.constant(Matrix::filled(t_len, 1, 1.0));
    let spread = tape.matmul(ones, mean)?;
    let centered = tape.sub(h, spread)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.matmul(alpha, sq)?;
    let var = tape.add_scalar(var, POOL_EPS);
    let std = tape.sqrt(var);
    tape.concat_last_axis(mean, std)
}

/// Two logits, 1×2.
pub fn score(tape: &mut Tape, store: &ParamStore, h: Var, p: &HeadParams) -> Result<Var> {
    let pooled = pool_attentive(tape, store, h, p)?;
    let hw = tape.param(store, p.hidden.0);
    let hb = tape.param(store, p.hidden.1);
    let hidden = tape.linear(pooled, hw, hb)?;
    let act = tape.relu(hidden);
    let ow = tape.param(store, p.out.0);
    let ob = tape.param(store, p.out.1);
    tape.linear(act, ow, ob)
}

/// Bona-fide-positive detection score: `logit[bona] − logit[spoof]`.
pub fn detection_score(logits: &Matrix) -> f64 {
    logits.get(0, BONAFIDE) - logits.get(0, SPOOF)
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    if label > 1 {
        return Err(Error::InvalidLabel(format!("{label} (expected 0 or 1)")));
    }
    tape.cross_entropy(logits, label)
}
