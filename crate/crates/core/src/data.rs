//! Manifests and the binary named-matrix format used for features and
//! checkpoints.
//!
//! A file is a sequence of records. Each record is a 4-byte magic, a `u32`
//! name length, the UTF-8 name, `u32` rows, `u32` cols, then `rows × cols`
//! little-endian values in row-major order. `SFF1` records hold `f32` values;
//! `SFD1` records hold `f64` values and are used where bit-exact parameters
//! matter (checkpoints).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, Stream};
use crate::matrix::Matrix;

pub const MAGIC_F32: [u8; 4] = *b"SFF1";
pub const MAGIC_F64: [u8; 4] = *b"SFD1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    /// Class index used by the classifier: bona fide is 0, spoof is 1.
    pub fn class_index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(Error::InvalidLabel(format!("`{other}` (expected bonafide or spoof)"))),
        }
    }
}

/// Where the spectral stream comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AudioSource {
    Wav(PathBuf),
    /// Generated on the fly from a clip seed; the class comes from the label.
    Synth {
        seed: u64,
    },
}

/// Where the SSL stream comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SslSource {
    Features(PathBuf),
    /// Pseudo-SSL features computed from the audio with this projection seed.
    Synth {
        projection_seed: u64,
    },
}

fn parse_synth(s: &str) -> Option<std::result::Result<u64, String>> {
    let rest = s.strip_prefix("synth:")?;
    Some(rest.parse::<u64>().map_err(|e| format!("bad synth seed `{rest}`: {e}")))
}

impl fmt::Display for AudioSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AudioSource::Wav(p) => write!(f, "{}", p.display()),
            AudioSource::Synth { seed } => write!(f, "synth:{seed}"),
        }
    }
}

impl fmt::Display for SslSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SslSource::Features(p) => write!(f, "{}", p.display()),
            SslSource::Synth { projection_seed } => write!(f, "synth:{projection_seed}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub source: AudioSource,
    pub ssl_source: SslSource,
    pub label: Label,
    pub dataset_tag: String,
}

/// Dataset index. Relative paths resolve against `root` (the manifest's
/// directory when read from disk).
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
}

impl PartialEq for Manifest {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Manifest {
            entries,
            root: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// `(bona fide, spoof)` counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let spoof = self.entries.iter().filter(|e| e.label == Label::Spoof).count();
        (self.entries.len() - spoof, spoof)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            for field in [&e.utt_id, &e.dataset_tag] {
                if field.is_empty() || field.contains(['\t', '\n', ',']) {
                    return Err(Error::InvalidParam(format!(
                        "manifest field `{field}` must be non-empty without tabs, commas or newlines"
                    )));
                }
            }
            if !seen.insert(e.utt_id.as_str()) {
                return Err(Error::InvalidParam(format!("duplicate utt_id `{}`", e.utt_id)));
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.utt_id, e.source, e.ssl_source, e.label, e.dataset_tag
            ));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad(n, format!("expected 5 tab-separated fields, got {}", cols.len())));
            }
            if cols.iter().any(|c| c.is_empty()) {
                return Err(bad(n, "empty field".into()));
            }
            let source = match parse_synth(cols[1]) {
                Some(seed) => AudioSource::Synth {
                    seed: seed.map_err(|m| bad(n, m))?,
                },
                None => AudioSource::Wav(PathBuf::from(cols[1])),
            };
            let ssl_source = match parse_synth(cols[2]) {
                Some(seed) => SslSource::Synth {
                    projection_seed: seed.map_err(|m| bad(n, m))?,
                },
                None => SslSource::Features(PathBuf::from(cols[2])),
            };
            let label = cols[3].parse::<Label>().map_err(|e| bad(n, e.to_string()))?;
            if !seen.insert(cols[0].to_string()) {
                return Err(bad(n, format!("duplicate utt_id `{}`", cols[0])));
            }
            entries.push(ManifestEntry {
                utt_id: cols[0].to_string(),
                source,
                ssl_source,
                label,
                dataset_tag: cols[4].to_string(),
            });
        }
        Ok(Manifest {
            entries,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text, path)
}

pub fn write_manifest(path: impl AsRef<Path>, m: &Manifest) -> Result<()> {
    let path = path.as_ref();
    m.validate()?;
    fs::write(path, m.to_tsv()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedMatrix {
    pub name: String,
    pub matrix: Matrix,
}

impl NamedMatrix {
    pub fn new(name: impl Into<String>, matrix: Matrix) -> Self {
        Self {
            name: name.into(),
            matrix,
        }
    }
}

pub fn encode_records(records: &[NamedMatrix], precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        let (magic, width) = match precision {
            Precision::F32 => (MAGIC_F32, 4),
            Precision::F64 => (MAGIC_F64, 8),
        };
        out.reserve(16 + r.name.len() + width * r.matrix.as_slice().len());
        out.extend_from_slice(&magic);
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.matrix.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(r.matrix.cols() as u32).to_le_bytes());
        for &v in r.matrix.as_slice() {
            match precision {
                Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                msg: format!("truncated {what} at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_records(bytes: &[u8], path: &Path) -> Result<Vec<NamedMatrix>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let start = cur.pos;
        let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
        let width = match magic {
            MAGIC_F32 => 4,
            MAGIC_F64 => 8,
            found => {
                if start == 0 {
                    return Err(Error::BadMagic {
                        path: path.to_path_buf(),
                        found,
                    });
                }
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    msg: format!("bad record magic {found:?} at byte {start}"),
                });
            }
        };
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Corrupt {
                path: path.to_path_buf(),
                msg: format!("record name at byte {start} is not UTF-8"),
            })?
            .to_string();
        let rows = cur.u32("rows")? as usize;
        let cols = cur.u32("cols")? as usize;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(width));
        let payload = match n {
            Some(n) => cur.take(n, "values")?,
            None => {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    msg: format!("record `{name}` size {rows}x{cols} overflows"),
                })
            }
        };
        let data: Vec<f64> = if width == 4 {
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        } else {
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        records.push(NamedMatrix {
            name,
            matrix: Matrix::from_vec(rows, cols, data)?,
        });
    }
    Ok(records)
}

pub fn write_records(path: impl AsRef<Path>, records: &[NamedMatrix], precision: Precision) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_records(records, precision)).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<NamedMatrix>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes, path)
}

fn stream_tag(s: Stream) -> &'static str {
    match s {
        Stream::Sf => "sf",
        Stream::Ssl => "ssl",
    }
}

/// Writes one feature matrix as a single `SFF1` record. The record name
/// carries the stream, frame rate and provenance as `stream|rate|provenance`.
pub fn write_features(path: impl AsRef<Path>, fm: &FeatureMatrix) -> Result<()> {
    let name = format!("{}|{}|{}", stream_tag(fm.stream), fm.frame_rate, fm.provenance);
    write_records(path, &[NamedMatrix::new(name, fm.data.clone())], Precision::F32)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let corrupt = |msg: String| Error::Corrupt {
        path: path.to_path_buf(),
        msg,
    };
    let mut records = read_records(path)?;
    if records.len() != 1 {
        return Err(corrupt(format!("expected one feature record, found {}", records.len())));
    }
    let r = records.pop().unwrap();
    let mut parts = r.name.splitn(3, '|');
    let stream = match parts.next() {
        Some("sf") => Stream::Sf,
        Some("ssl") => Stream::Ssl,
        other => return Err(corrupt(format!("unknown stream tag {other:?}"))),
    };
    let frame_rate = parts
        .next()
        .and_then(|s| s.parse::<f64>().ok())
        .ok_or_else(|| corrupt(format!("bad frame rate in record name `{}`", r.name)))?;
    if r.matrix.rows() == 0 || r.matrix.cols() == 0 {
        return Err(corrupt("empty feature matrix".into()));
    }
    Ok(FeatureMatrix {
        data: r.matrix,
        stream,
        frame_rate,
        provenance: parts.next().unwrap_or_default().to_string(),
    })
}

/// Checkpoints keep full 64-bit precision so that resuming is exact.
pub fn save_checkpoint(path: impl AsRef<Path>, records: &[NamedMatrix]) -> Result<()> {
    write_records(path, records, Precision::F64)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<NamedMatrix>> {
    read_records(path)
}
