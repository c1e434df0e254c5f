use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty waveform")]
    EmptyWaveform,

    #[error("signal shorter than window ({len} samples < {win_len})")]
    SignalTooShort { len: usize, win_len: usize },

    #[error("fft size {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("f_min too low for signal length: kernel of {kernel_len} samples exceeds {signal_len}")]
    KernelTooLong { kernel_len: usize, signal_len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("incompatible frame rates: {frames} frames cannot be pooled onto {target}")]
    FrameRate { frames: usize, target: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("diverged: non-finite gradient in parameter `{0}`")]
    Diverged(String),

    #[error("invalid label {0}")]
    InvalidLabel(String),

    #[error("need both classes, got {bonafide} bona fide and {spoof} spoof")]
    SingleClass { bonafide: usize, spoof: usize },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}: bad magic {found:?}, expected \"SFF1\" or \"SFD1\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: truncated or malformed feature file: {msg}")]
    Corrupt { path: PathBuf, msg: String },

    #[error("{path}: unsupported WAV: {msg}")]
    Wav { path: PathBuf, msg: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
