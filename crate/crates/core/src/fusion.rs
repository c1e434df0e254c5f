//! Stream alignment and the fusion strategies.
//!
//! Both streams are first brought to a common `T × D` grid: the spectral
//! stream is mean-pooled over runs of consecutive frames until it has as many
//! frames as the SSL stream, then each stream goes through its own linear
//! projection to `D`. The aligned pair is then combined by one of:
//!
//! * concatenation followed by a `2D → D` linear layer,
//! * cross-attention with SSL queries over SF keys/values plus an SSL residual,
//! * mutual cross-attention (both directions, concatenated, `2D → D`),
//! * per-frame gating: a softmax over `f_SSL · W_G` mixes the two streams.
//!
//! The two "no fusion" modes pass one aligned stream through untouched.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Default common feature dimension.
pub const DEFAULT_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "nofusion-sf")]
    NoFusionSf,
    #[serde(rename = "nofusion-ssl")]
    NoFusionSsl,
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "xattn")]
    CrossAttn,
    #[serde(rename = "mutual")]
    MutualCrossAttn,
    #[serde(rename = "gating")]
    Gating,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::NoFusionSf,
        Strategy::NoFusionSsl,
        Strategy::Concat,
        Strategy::CrossAttn,
        Strategy::MutualCrossAttn,
        Strategy::Gating,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::NoFusionSf => "nofusion-sf",
            Strategy::NoFusionSsl => "nofusion-ssl",
            Strategy::Concat => "concat",
            Strategy::CrossAttn => "xattn",
            Strategy::MutualCrossAttn => "mutual",
            Strategy::Gating => "gating",
        }
    }

    pub fn code(self) -> u32 {
        Strategy::ALL.iter().position(|&s| s == self).unwrap() as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Strategy::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.iter().copied().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::InvalidParam(format!(
                "unknown strategy `{s}` (expected one of: {})",
                Strategy::ALL.map(|k| k.as_str()).join(", ")
            ))
        })
    }
}

/// Uniform in `±1/√fan_in`.
pub fn init_weight(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound))
}

pub(crate) fn add_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}.weight"), init_weight(rng, fan_in, fan_out));
    let b = store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out));
    (w, b)
}

/// Projections that bring both streams to `target_dim` features.
#[derive(Debug, Clone)]
pub struct AlignmentParams {
    pub proj_sf: (ParamId, ParamId),
    pub proj_ssl: (ParamId, ParamId),
    pub sf_dim: usize,
    pub ssl_dim: usize,
    pub target_dim: usize,
}

impl AlignmentParams {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, sf_dim: usize, ssl_dim: usize, target_dim: usize) -> Self {
        Self {
            proj_sf: add_linear(store, rng, "align.sf", sf_dim, target_dim),
            proj_ssl: add_linear(store, rng, "align.ssl", ssl_dim, target_dim),
            sf_dim,
            ssl_dim,
            target_dim,
        }
    }
}

/// Pools `sf` onto `target_t` frames and projects it.
///
/// `sf` must have an integer multiple of `target_t` frames; a ratio `r`
/// averages each run of `r` consecutive frames.
pub fn align_sf(
    tape: &mut Tape,
    store: &ParamStore,
    sf: &Matrix,
    target_t: usize,
    proj: (ParamId, ParamId),
) -> Result<Var> {
    if target_t == 0 || sf.rows() == 0 || sf.rows() % target_t != 0 {
        return Err(Error::FrameRate {
            frames: sf.rows(),
            target: target_t,
        });
    }
    let sf_in = tape.constant(sf.clone());
    let pooled = if sf.rows() == target_t {
        sf_in
    } else {
        tape.pool_rows(sf_in, sf.rows() / target_t)?
    };
    let w = tape.param(store, proj.0);
    let b = tape.param(store, proj.1);
    tape.linear(pooled, w, b)
}

pub fn align_ssl(tape: &mut Tape, store: &ParamStore, ssl: &Matrix, proj: (ParamId, ParamId)) -> Result<Var> {
    let ssl_in = tape.constant(ssl.clone());
    let w = tape.param(store, proj.0);
    let b = tape.param(store, proj.1);
    tape.linear(ssl_in, w, b)
}

/// Pools `sf` onto the SSL frame count and projects both streams.
pub fn align(
    tape: &mut Tape,
    store: &ParamStore,
    sf: &Matrix,
    ssl: &Matrix,
    p: &AlignmentParams,
) -> Result<(Var, Var)> {
    if sf.cols() != p.sf_dim || ssl.cols() != p.ssl_dim {
        return Err(Error::Shape {
            op: "align (sf dim, ssl dim)",
            lhs: (sf.cols(), ssl.cols()),
            rhs: (p.sf_dim, p.ssl_dim),
        });
    }
    let sf_out = align_sf(tape, store, sf, ssl.rows(), p.proj_sf)?;
    let ssl_out = align_ssl(tape, store, ssl, p.proj_ssl)?;
    Ok((sf_out, ssl_out))
}

/// Query/key/value projections.
#[derive(Debug, Clone, Copy)]
pub struct Qkv {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl Qkv {
    fn init(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize) -> Self {
        Self {
            wq: store.add(format!("{prefix}.wq"), init_weight(rng, d, d)),
            wk: store.add(format!("{prefix}.wk"), init_weight(rng, d, d)),
            wv: store.add(format!("{prefix}.wv"), init_weight(rng, d, d)),
        }
    }
}

/// Trainable parameters of one fusion strategy; only what it needs exists.
#[derive(Debug, Clone)]
pub enum FusionParams {
    NoFusionSf,
    NoFusionSsl,
    Concat {
        out: (ParamId, ParamId),
    },
    CrossAttn {
        qkv: Qkv,
    },
    MutualCrossAttn {
        /// Used for SSL→SF, and for SF→SSL as well when `sf_to_ssl` is `None`.
        qkv: Qkv,
        sf_to_ssl: Option<Qkv>,
        out: (ParamId, ParamId),
    },
    Gating {
        wg: ParamId,
    },
}

impl FusionParams {
    /// `shared_mutual` selects one Q/K/V set for both attention directions.
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, strategy: Strategy, d: usize, shared_mutual: bool) -> Self {
        match strategy {
            Strategy::NoFusionSf => FusionParams::NoFusionSf,
            Strategy::NoFusionSsl => FusionParams::NoFusionSsl,
            Strategy::Concat => FusionParams::Concat {
                out: add_linear(store, rng, "fusion.out", 2 * d, d),
            },
            Strategy::CrossAttn => FusionParams::CrossAttn {
                qkv: Qkv::init(store, rng, "fusion", d),
            },
            Strategy::MutualCrossAttn => {
                let qkv = Qkv::init(store, rng, "fusion", d);
                let sf_to_ssl = (!shared_mutual).then(|| Qkv::init(store, rng, "fusion.sf2ssl", d));
                FusionParams::MutualCrossAttn {
                    qkv,
                    sf_to_ssl,
                    out: add_linear(store, rng, "fusion.out", 2 * d, d),
                }
            }
            Strategy::Gating => FusionParams::Gating {
                wg: store.add("fusion.wg", init_weight(rng, d, 2)),
            },
        }
    }

    pub fn strategy(&self) -> Strategy {
        match self {
            FusionParams::NoFusionSf => Strategy::NoFusionSf,
            FusionParams::NoFusionSsl => Strategy::NoFusionSsl,
            FusionParams::Concat { .. } => Strategy::Concat,
            FusionParams::CrossAttn { .. } => Strategy::CrossAttn,
            FusionParams::MutualCrossAttn { .. } => Strategy::MutualCrossAttn,
            FusionParams::Gating { .. } => Strategy::Gating,
        }
    }

    /// Every parameter this strategy owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let qkv_ids = |q: &Qkv| [q.wq, q.wk, q.wv];
        match self {
            FusionParams::NoFusionSf | FusionParams::NoFusionSsl => vec![],
            FusionParams::Concat { out } => vec![out.0, out.1],
            FusionParams::CrossAttn { qkv } => qkv_ids(qkv).to_vec(),
            FusionParams::MutualCrossAttn { qkv, sf_to_ssl, out } => {
                let mut ids = qkv_ids(qkv).to_vec();
                if let Some(q) = sf_to_ssl {
                    ids.extend(qkv_ids(q));
                }
                ids.extend([out.0, out.1]);
                ids
            }
            FusionParams::Gating { wg } => vec![*wg],
        }
    }
}

/// Per-frame gate weights: column 0 is `w_SF`, column 1 is `w_SSL`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    pub weights: Matrix,
}

impl GateTrace {
    pub fn frames(&self) -> usize {
        self.weights.rows()
    }

    pub fn w_sf(&self, t: usize) -> f64 {
        self.weights.get(t, 0)
    }

    pub fn w_ssl(&self, t: usize) -> f64 {
        self.weights.get(t, 1)
    }
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub fused: Var,
    pub gate: Option<GateTrace>,
    /// Attention matrices (rows are queries), in the order they were computed.
    pub attention: Vec<Var>,
}

fn check_pair(tape: &Tape, sf: Var, ssl: Var) -> Result<()> {
    if tape.shape(sf) != tape.shape(ssl) {
        return Err(Error::Shape {
            op: "fusion (sf vs ssl)",
            lhs: tape.shape(sf),
            rhs: tape.shape(ssl),
        });
    }
    Ok(())
}

/// `Softmax(Q Kᵀ/√D) V + query_src`, with Q from `query_src` and K, V from
/// `kv_src`. Returns the output and the attention matrix.
fn attend(tape: &mut Tape, store: &ParamStore, query_src: Var, kv_src: Var, qkv: &Qkv) -> Result<(Var, Var)> {
    let d = tape.shape(query_src).1;
    let wq = tape.param(store, qkv.wq);
    let wk = tape.param(store, qkv.wk);
    let wv = tape.param(store, qkv.wv);
    let q = tape.matmul(query_src, wq)?;
    let k = tape.matmul(kv_src, wk)?;
    let v = tape.matmul(kv_src, wv)?;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_rows(scaled);
    let mixed = tape.matmul(attn, v)?;
    let out = tape.add(mixed, query_src)?;
    Ok((out, attn))
}

pub fn fuse_concat(tape: &mut Tape, store: &ParamStore, sf: Var, ssl: Var, out: (ParamId, ParamId)) -> Result<Var> {
    check_pair(tape, sf, ssl)?;
    let cat = tape.concat_last_axis(sf, ssl)?;
    let w = tape.param(store, out.0);
    let b = tape.param(store, out.1);
    tape.linear(cat, w, b)
}

/// SSL attends to SF: `Softmax(Q_SSL K_SFᵀ/√D) V_SF + f_SSL`.
pub fn fuse_cross_attention(tape: &mut Tape, store: &ParamStore, sf: Var, ssl: Var, qkv: &Qkv) -> Result<(Var, Var)> {
    check_pair(tape, sf, ssl)?;
    attend(tape, store, ssl, sf, qkv)
}

/// `Linear([H_SF→SSL ; H_SSL→SF])`. Returns the output and both attention
/// matrices (SF→SSL first).
pub fn fuse_mutual_cross_attention(
    tape: &mut Tape,
    store: &ParamStore,
    sf: Var,
    ssl: Var,
    qkv: &Qkv,
    sf_to_ssl: Option<&Qkv>,
    out: (ParamId, ParamId),
) -> Result<(Var, Var, Var)> {
    check_pair(tape, sf, ssl)?;
    let (h_sf, a_sf) = attend(tape, store, sf, ssl, sf_to_ssl.unwrap_or(qkv))?;
    let (h_ssl, a_ssl) = attend(tape, store, ssl, sf, qkv)?;
    let cat = tape.concat_last_axis(h_sf, h_ssl)?;
    let w = tape.param(store, out.0);
    let b = tape.param(store, out.1);
    Ok((tape.linear(cat, w, b)?, a_sf, a_ssl))
}

/// Per-frame convex mix: `w = softmax(f_SSL W_G)`, `out_t = w_SF(t) sf_t + w_SSL(t) ssl_t`.
pub fn fuse_gating(tape: &mut Tape, store: &ParamStore, sf: Var, ssl: Var, wg: ParamId) -> Result<(Var, GateTrace)> {
    check_pair(tape, sf, ssl)?;
    let wg = tape.param(store, wg);
    let logits = tape.matmul(ssl, wg)?;
    let weights = tape.softmax_rows(logits);
    let w_sf = tape.column(weights, 0);
    let w_ssl = tape.column(weights, 1);
    let a = tape.scale_rows(sf, w_sf)?;
    let b = tape.scale_rows(ssl, w_ssl)?;
    let fused = tape.add(a, b)?;
    let trace = GateTrace {
        weights: tape.value(weights).clone(),
    };
    Ok((fused, trace))
}

/// Applies whichever strategy `p` holds.
pub fn fuse(tape: &mut Tape, store: &ParamStore, sf: Var, ssl: Var, p: &FusionParams) -> Result<FusionOutput> {
    check_pair(tape, sf, ssl)?;
    let plain = |fused| FusionOutput {
        fused,
        gate: None,
        attention: vec![],
    };
    Ok(match p {
        FusionParams::NoFusionSf => plain(sf),
        FusionParams::NoFusionSsl => plain(ssl),
        FusionParams::Concat { out } => plain(fuse_concat(tape, store, sf, ssl, *out)?),
        FusionParams::CrossAttn { qkv } => {
            let (fused, attn) = fuse_cross_attention(tape, store, sf, ssl, qkv)?;
            FusionOutput {
                fused,
                gate: None,
                attention: vec![attn],
            }
        }
        FusionParams::MutualCrossAttn { qkv, sf_to_ssl, out } => {
            let (fused, a1, a2) = fuse_mutual_cross_attention(tape, store, sf, ssl, qkv, sf_to_ssl.as_ref(), *out)?;
            FusionOutput {
                fused,
                gate: None,
                attention: vec![a1, a2],
            }
        }
        FusionParams::Gating { wg } => {
            let (fused, trace) = fuse_gating(tape, store, sf, ssl, *wg)?;
            FusionOutput {
                fused,
                gate: Some(trace),
                attention: vec![],
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn setup(strategy: Strategy, t: usize, d: usize, seed: u64) -> (ParamStore, FusionParams, Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = FusionParams::init(&mut store, &mut rng, strategy, d, true);
        let sf = rand_matrix(&mut rng, t, d);
        let ssl = rand_matrix(&mut rng, t, d);
        (store, p, sf, ssl)
    }

    fn run(store: &ParamStore, p: &FusionParams, sf: &Matrix, ssl: &Matrix) -> (Tape, FusionOutput) {
        let mut tape = Tape::new();
        let a = tape.constant(sf.clone());
        let b = tape.constant(ssl.clone());
        let out = fuse(&mut tape, store, a, b, p).unwrap();
        (tape, out)
    }

    #[test]
    fn align_default_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = AlignmentParams::init(&mut store, &mut rng, 60, 1024, DEFAULT_DIM);
        let sf = rand_matrix(&mut rng, 402, 60);
        let ssl = rand_matrix(&mut rng, 201, 1024);
        let mut tape = Tape::new();
        let (a, b) = align(&mut tape, &store, &sf, &ssl, &p).unwrap();
        assert_eq!(tape.shape(a), (201, 128));
        assert_eq!(tape.shape(b), (201, 128));
    }

    #[test]
    fn align_pools_pairs_and_identity_passes_through() {
        let mut store = ParamStore::new();
        let sf_w = store.add("sw", Matrix::identity(2));
        let sf_b = store.add("sb", Matrix::zeros(1, 2));
        let ssl_w = store.add("qw", Matrix::identity(2));
        let ssl_b = store.add("qb", Matrix::zeros(1, 2));
        let p = AlignmentParams {
            proj_sf: (sf_w, sf_b),
            proj_ssl: (ssl_w, ssl_b),
            sf_dim: 2,
            ssl_dim: 2,
            target_dim: 2,
        };
        let sf = Matrix::from_rows(&[[1.0, 10.0], [3.0, 20.0], [5.0, 30.0], [7.0, 40.0]]).unwrap();
        let ssl = Matrix::from_rows(&[[0.5, 0.5], [0.25, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let (a, b) = align(&mut tape, &store, &sf, &ssl, &p).unwrap();
        assert_eq!(tape.value(a).as_slice(), &[2.0, 15.0, 6.0, 35.0]);
        assert_eq!(tape.value(b), &ssl);

        let odd = Matrix::zeros(5, 2);
        let err = align(&mut Tape::new(), &store, &odd, &ssl, &p).unwrap_err();
        assert!(err.to_string().starts_with("incompatible frame rates"));
    }

    #[test]
    fn shape_contract_all_strategies() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for strategy in Strategy::ALL {
            for _ in 0..5 {
                let t = rng.random_range(2..=32);
                let d = rng.random_range(2..=32);
                let (store, p, sf, ssl) = setup(strategy, t, d, rng.random());
                let (tape, out) = run(&store, &p, &sf, &ssl);
                assert_eq!(tape.shape(out.fused), (t, d), "{strategy}");
                for a in out.attention {
                    for r in 0..t {
                        let s: f64 = tape.value(a).row(r).iter().sum();
                        assert!((s - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn concat_zero_weight_and_selector() {
        let (mut store, p, sf, ssl) = setup(Strategy::Concat, 5, 3, 3);
        let FusionParams::Concat { out } = p else {
            unreachable!()
        };
        store.value_mut(out.0).fill(0.0);
        *store.value_mut(out.1) = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let (tape, o) = run(&store, &p, &sf, &ssl);
        for r in 0..5 {
            assert_eq!(tape.value(o.fused).row(r), &[1.0, 2.0, 3.0]);
        }
        *store.value_mut(out.0) = Matrix::from_fn(6, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        store.value_mut(out.1).fill(0.0);
        let (tape, o) = run(&store, &p, &sf, &ssl);
        assert_eq!(tape.value(o.fused), &sf);
    }

    #[test]
    fn cross_attention_identities() {
        let (mut store, p, sf, ssl) = setup(Strategy::CrossAttn, 6, 4, 4);
        let FusionParams::CrossAttn { qkv } = p else {
            unreachable!()
        };
        store.value_mut(qkv.wv).fill(0.0);
        let (tape, o) = run(&store, &p, &sf, &ssl);
        assert_eq!(tape.value(o.fused), &ssl);

        let (mut store, p, sf, ssl) = setup(Strategy::CrossAttn, 6, 4, 5);
        let FusionParams::CrossAttn { qkv } = p else {
            unreachable!()
        };
        store.value_mut(qkv.wq).fill(0.0);
        let (tape, o) = run(&store, &p, &sf, &ssl);
        let v = sf.matmul(store.value(qkv.wv)).unwrap();
        let mean: Vec<f64> = (0..4).map(|c| v.column(c).iter().sum::<f64>() / 6.0).collect();
        for r in 0..6 {
            for c in 0..4 {
                let want = mean[c] + ssl.get(r, c);
                assert!((tape.value(o.fused).get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mutual_zero_attention_with_selector_returns_sf() {
        let (mut store, p, sf, ssl) = setup(Strategy::MutualCrossAttn, 5, 3, 6);
        let FusionParams::MutualCrossAttn { qkv, out, .. } = p else {
            unreachable!()
        };
        for id in [qkv.wq, qkv.wk, qkv.wv] {
            store.value_mut(id).fill(0.0);
        }
        *store.value_mut(out.0) = Matrix::from_fn(6, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let (tape, o) = run(&store, &p, &sf, &ssl);
        assert_eq!(tape.value(o.fused), &sf);
    }

    #[test]
    fn gating_identities() {
        let (mut store, p, sf, ssl) = setup(Strategy::Gating, 7, 4, 7);
        let FusionParams::Gating { wg } = p else { unreachable!() };
        store.value_mut(wg).fill(0.0);
        let (tape, o) = run(&store, &p, &sf, &ssl);
        let avg = sf.zip_map(&ssl, |a, b| (a + b) / 2.0);
        for (x, y) in tape.value(o.fused).as_slice().iter().zip(avg.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        let g = o.gate.unwrap();
        assert!(g.weights.as_slice().iter().all(|&w| w == 0.5));

        // logits pushed far apart saturate the gate on the SF side
        let ssl_pos = ssl.map(|v| v.abs() + 0.1);
        *store.value_mut(wg) = Matrix::from_fn(4, 2, |_, j| if j == 0 { 1e4 } else { -1e4 });
        let (tape, o) = run(&store, &p, &sf, &ssl_pos);
        for (x, y) in tape.value(o.fused).as_slice().iter().zip(sf.as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn gating_is_convex_and_frame_equivariant() {
        let (store, p, sf, ssl) = setup(Strategy::Gating, 9, 5, 8);
        let (tape, o) = run(&store, &p, &sf, &ssl);
        let g = o.gate.unwrap();
        let fused = tape.value(o.fused);
        for t in 0..9 {
            let w = g.w_sf(t);
            assert!((0.0..=1.0).contains(&w));
            assert!((w + g.w_ssl(t) - 1.0).abs() < 1e-12);
            for c in 0..5 {
                let want = w * sf.get(t, c) + (1.0 - w) * ssl.get(t, c);
                assert!((fused.get(t, c) - want).abs() < 1e-12);
            }
        }
        let perm: Vec<usize> = vec![3, 0, 8, 1, 7, 2, 6, 4, 5];
        let permute = |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(perm[r], c));
        let (tape2, o2) = run(&store, &p, &permute(&sf), &permute(&ssl));
        assert_eq!(tape2.value(o2.fused), &permute(fused));
    }

    #[test]
    fn dispatch_matches_direct_calls() {
        let (store, p, sf, ssl) = setup(Strategy::Gating, 4, 3, 9);
        let (tape, o) = run(&store, &p, &sf, &ssl);
        let FusionParams::Gating { wg } = p else { unreachable!() };
        let mut t2 = Tape::new();
        let a = t2.constant(sf.clone());
        let b = t2.constant(ssl.clone());
        let (direct, trace) = fuse_gating(&mut t2, &store, a, b, wg).unwrap();
        assert_eq!(tape.value(o.fused), t2.value(direct));
        assert_eq!(o.gate.unwrap(), trace);

        let (tape, o) = run(&store, &FusionParams::NoFusionSf, &sf, &ssl);
        assert_eq!(tape.value(o.fused), &sf);
        let (tape, o) = run(&store, &FusionParams::NoFusionSsl, &sf, &ssl);
        assert_eq!(tape.value(o.fused), &ssl);
        assert!("attention".parse::<Strategy>().is_err());
    }

    #[test]
    fn gradcheck_every_strategy_over_seeds() {
        for strategy in [
            Strategy::Concat,
            Strategy::CrossAttn,
            Strategy::MutualCrossAttn,
            Strategy::Gating,
        ] {
            for seed in 0..10 {
                let (mut store, p, sf, ssl) = setup(strategy, 3, 4, 100 + seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let weights = rand_matrix(&mut rng, 3, 4);
                let report = gradcheck(&mut store, 1e-5, |tape, s| {
                    let a = tape.constant(sf.clone());
                    let b = tape.constant(ssl.clone());
                    let out = fuse(tape, s, a, b, &p)?;
                    let w = tape.constant(weights.clone());
                    let y = tape.mul(out.fused, w)?;
                    Ok(tape.sum(y))
                })
                .unwrap();
                assert_eq!(report.per_param.len(), p.param_ids().len());
                assert!(report.max_rel_error() < 1e-6, "{strategy} seed {seed}: {report:?}");
            }
        }
    }

    #[test]
    fn no_dead_parameters() {
        for strategy in [
            Strategy::Concat,
            Strategy::CrossAttn,
            Strategy::MutualCrossAttn,
            Strategy::Gating,
        ] {
            for shared in [true, false] {
                let mut rng = ChaCha8Rng::seed_from_u64(10);
                let mut store = ParamStore::new();
                let p = FusionParams::init(&mut store, &mut rng, strategy, 5, shared);
                let sf = rand_matrix(&mut rng, 6, 5);
                let ssl = rand_matrix(&mut rng, 6, 5);
                let mut tape = Tape::new();
                let a = tape.constant(sf);
                let b = tape.constant(ssl);
                let out = fuse(&mut tape, &store, a, b, &p).unwrap();
                let loss = tape.sum(out.fused);
                tape.backward(loss).unwrap().accumulate_into(&tape, &mut store);
                for id in p.param_ids() {
                    assert!(
                        store.grad(id).max_abs() > 0.0,
                        "{strategy}: {} is dead",
                        store.get(id).name
                    );
                }
            }
        }
    }

    #[test]
    fn parameter_census() {
        let census = |s, shared| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            FusionParams::init(&mut store, &mut rng, s, 8, shared);
            store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.shape()))
                .collect::<Vec<_>>()
        };
        assert_eq!(
            census(Strategy::Concat, true),
            [
                ("fusion.out.weight".into(), (16, 8)),
                ("fusion.out.bias".into(), (1, 8))
            ]
        );
        assert_eq!(census(Strategy::CrossAttn, true).len(), 3);
        assert_eq!(census(Strategy::MutualCrossAttn, true).len(), 5);
        assert_eq!(census(Strategy::MutualCrossAttn, false).len(), 8);
        assert_eq!(census(Strategy::Gating, true), [("fusion.wg".into(), (8, 2))]);
        assert!(census(Strategy::NoFusionSf, true).is_empty());
    }
}
