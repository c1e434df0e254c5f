//! Equal error rate and gate-weight analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Label, Manifest};
use crate::error::{Error, Result};
use crate::features::SpectralConfig;
use crate::fusion::GateTrace;
use crate::model::{Detector, Example, FeatureLoader};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub utt_id: String,
    pub score: f64,
    pub label: Label,
}

/// Detection scores; higher means more likely bona fide.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
}

const SCORE_HEADER: &str = "utt_id,score,label";
const POLARITY_NOTE: &str = "# polarity: higher score = more bona fide";

impl ScoreSet {
    pub fn push(&mut self, utt_id: impl Into<String>, score: f64, label: Label) {
        self.entries.push(ScoreEntry {
            utt_id: utt_id.into(),
            score,
            label,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_pairs(bonafide: &[f64], spoof: &[f64]) -> Self {
        let mut s = ScoreSet::default();
        for (i, &v) in bonafide.iter().enumerate() {
            s.push(format!("b{i}"), v, Label::Bonafide);
        }
        for (i, &v) in spoof.iter().enumerate() {
            s.push(format!("s{i}"), v, Label::Spoof);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{POLARITY_NOTE}\n{SCORE_HEADER}\n");
        for e in &self.entries {
            writeln!(out, "{},{},{}", e.utt_id, e.score, e.label).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut set = ScoreSet::default();
        let mut seen_header = false;
        for (i, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if !seen_header {
                if line.trim() != SCORE_HEADER {
                    return Err(bad(i + 1, format!("expected header `{SCORE_HEADER}`")));
                }
                seen_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(bad(i + 1, format!("expected 3 columns, got {}", cols.len())));
            }
            let score = cols[1].parse::<f64>().map_err(|e| bad(i + 1, format!("score: {e}")))?;
            let label = cols[2].parse::<Label>().map_err(|e| bad(i + 1, e.to_string()))?;
            set.push(cols[0], score, label);
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Linear crossing of `FAR − FRR` between two operating points, given as
/// integer counts. Shared by the sweep and by anything that needs the exact
/// same interpolation rule.
pub fn interpolate_crossing(far_prev: f64, frr_prev: f64, far_next: f64, frr_next: f64) -> f64 {
    let d_prev = far_prev - frr_prev;
    let d_next = far_next - frr_next;
    let lambda = d_prev / (d_prev - d_next);
    far_prev + lambda * (far_next - far_prev)
}

/// EER by sweeping the threshold over every distinct score (plus ±∞).
///
/// At threshold `τ`, FAR is the fraction of spoofs scoring `≥ τ` and FRR the
/// fraction of bona fide scoring `< τ`. Where the curves do not meet at an
/// operating point, the EER is interpolated linearly between the two
/// neighbouring points.
pub fn compute_eer(set: &ScoreSet) -> Result<EerResult> {
    let mut bona: Vec<f64> = Vec::new();
    let mut spoof: Vec<f64> = Vec::new();
    for e in &set.entries {
        if !e.score.is_finite() {
            return Err(Error::InvalidParam(format!("non-finite score for {}", e.utt_id)));
        }
        match e.label {
            Label::Bonafide => bona.push(e.score),
            Label::Spoof => spoof.push(e.score),
        }
    }
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::SingleClass {
            bonafide: bona.len(),
            spoof: spoof.len(),
        });
    }
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (nb, ns) = (bona.len() as f64, spoof.len() as f64);
    // operating point at τ: counts below τ in each sorted class
    let point = |tau: f64, bi: usize, si: usize| (tau, (spoof.len() - si) as f64 / ns, bi as f64 / nb);
    let mut prev = point(f64::NEG_INFINITY, 0, 0);
    let (mut bi, mut si) = (0usize, 0usize);
    let mut candidates = thresholds.into_iter().chain(std::iter::once(f64::INFINITY));
    let result = loop {
        let tau = candidates.next().expect("FRR reaches 1 at +inf");
        while bi < bona.len() && bona[bi] < tau {
            bi += 1;
        }
        while si < spoof.len() && spoof[si] < tau {
            si += 1;
        }
        let cur = point(tau, bi, si);
        let (t0, far0, frr0) = prev;
        let (t1, far1, frr1) = cur;
        if frr1 >= far1 {
            if frr1 == far1 {
                break EerResult {
                    eer: far1,
                    threshold: t1,
                };
            }
            let eer = interpolate_crossing(far0, frr0, far1, frr1);
            let threshold = match (t0.is_finite(), t1.is_finite()) {
                (true, true) => {
                    let lambda = (far0 - frr0) / ((far0 - frr0) - (far1 - frr1));
                    t0 + lambda * (t1 - t0)
                }
                (true, false) => t0,
                _ => t1,
            };
            break EerResult { eer, threshold };
        }
        prev = cur;
    };
    if result.eer > 0.5 {
        log::warn!(
            "EER {:.4} above 0.5: scores look inverted (expected higher = bona fide)",
            result.eer
        );
    }
    Ok(result)
}

/// How per-frame gate weights are pooled within a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GatePooling {
    /// Every frame of every utterance counts once.
    #[default]
    Frames,
    /// Average per utterance first, then across utterances.
    Utterances,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateRow {
    pub feature: String,
    pub dataset: String,
    pub w_sf: f64,
    pub w_ssl: f64,
    pub frames: usize,
    pub utterances: usize,
}

/// Mean gate weights per (feature kind, dataset tag).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateReport {
    pub rows: Vec<GateRow>,
}

impl GateReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,dataset,w_sf,w_ssl\n");
        for r in &self.rows {
            writeln!(out, "{},{},{:.6},{:.6}", r.feature, r.dataset, r.w_sf, r.w_ssl).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One recorded trace with its grouping keys.
#[derive(Debug, Clone)]
pub struct TaggedTrace {
    pub utt_id: String,
    pub feature: String,
    pub dataset: String,
    pub trace: GateTrace,
}

pub fn aggregate_gates(traces: &[TaggedTrace], pooling: GatePooling) -> GateReport {
    #[derive(Default)]
    struct Acc {
        sf: f64,
        ssl: f64,
        weight: f64,
        frames: usize,
        utts: usize,
    }
    let mut groups: BTreeMap<(String, String), Acc> = BTreeMap::new();
    for t in traces {
        let n = t.trace.frames();
        let acc = groups.entry((t.feature.clone(), t.dataset.clone())).or_default();
        if n == 0 {
            continue;
        }
        let (mut sf, mut ssl) = (0.0, 0.0);
        for f in 0..n {
            sf += t.trace.w_sf(f);
            ssl += t.trace.w_ssl(f);
        }
        match pooling {
            GatePooling::Frames => {
                acc.sf += sf;
                acc.ssl += ssl;
                acc.weight += n as f64;
            }
            GatePooling::Utterances => {
                acc.sf += sf / n as f64;
                acc.ssl += ssl / n as f64;
                acc.weight += 1.0;
            }
        }
        acc.frames += n;
        acc.utts += 1;
    }
    let mut rows = Vec::new();
    for ((feature, dataset), acc) in groups {
        if acc.weight == 0.0 {
            log::warn!("no gate frames for feature `{feature}` dataset `{dataset}`; row omitted");
            continue;
        }
        rows.push(GateRow {
            feature,
            dataset,
            w_sf: acc.sf / acc.weight,
            w_ssl: acc.ssl / acc.weight,
            frames: acc.frames,
            utterances: acc.utts,
        });
    }
    GateReport { rows }
}

/// Gate trace CSV: `frame_index,w_sf,w_ssl`.
pub fn gate_trace_to_csv(trace: &GateTrace) -> String {
    let mut out = String::from("frame_index,w_sf,w_ssl\n");
    for t in 0..trace.frames() {
        writeln!(out, "{t},{},{}", trace.w_sf(t), trace.w_ssl(t)).unwrap();
    }
    out
}

pub fn read_gate_trace(path: impl AsRef<Path>) -> Result<GateTrace> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "frame_index,w_sf,w_ssl" => {}
        _ => return Err(bad(1, "expected header `frame_index,w_sf,w_ssl`".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(bad(i + 1, format!("expected 3 columns, got {}", cols.len())));
        }
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(i + 1, e.to_string()));
        rows.push([parse(cols[1])?, parse(cols[2])?]);
    }
    Ok(GateTrace {
        weights: crate::matrix::Matrix::from_rows(&rows)?,
    })
}

/// Name of the index written by [`write_traces`].
pub const TRACE_INDEX: &str = "traces.tsv";

/// Writes `<dir>/<utt_id>.csv` for every trace and an index
/// `utt_id<TAB>feature<TAB>dataset<TAB>path` with paths relative to `dir`.
/// Returns the index path.
pub fn write_traces(dir: impl AsRef<Path>, traces: &[TaggedTrace]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from("utt_id\tfeature\tdataset\tpath\n");
    for t in traces {
        let file = format!("{}.csv", t.utt_id);
        let path = dir.join(&file);
        fs::write(&path, gate_trace_to_csv(&t.trace)).map_err(|e| Error::io(&path, e))?;
        writeln!(index, "{}\t{}\t{}\t{file}", t.utt_id, t.feature, t.dataset).unwrap();
    }
    let index_path = dir.join(TRACE_INDEX);
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    Ok(index_path)
}

/// Reads traces listed in an index file, or in `<dir>/traces.tsv` when
/// given a directory.
pub fn read_traces(path: impl AsRef<Path>) -> Result<Vec<TaggedTrace>> {
    let mut index = path.as_ref().to_path_buf();
    if index.is_dir() {
        index.push(TRACE_INDEX);
    }
    let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let root = index.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("utt_id\t")) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Parse {
                path: index.clone(),
                line: i + 1,
                msg: format!("expected 4 tab-separated fields, found {}", cols.len()),
            });
        }
        out.push(TaggedTrace {
            utt_id: cols[0].to_string(),
            feature: cols[1].to_string(),
            dataset: cols[2].to_string(),
            trace: read_gate_trace(root.join(cols[3]))?,
        });
    }
    Ok(out)
}

/// Scores plus, for gating models, one gate trace per utterance.
#[derive(Debug, Clone, Default)]
pub struct ScoredManifest {
    pub scores: ScoreSet,
    pub traces: Vec<TaggedTrace>,
}

/// Scores already loaded examples, one entry per example in order.
pub fn score_examples(model: &Detector, examples: &[Example]) -> Result<ScoredManifest> {
    let mut out = ScoredManifest::default();
    for e in examples {
        let inf = model.infer(e)?;
        out.scores.push(e.utt_id.clone(), inf.score, e.label);
        if let Some(trace) = inf.gate {
            out.traces.push(TaggedTrace {
                utt_id: e.utt_id.clone(),
                feature: model.config.feature.to_string(),
                dataset: e.dataset_tag.clone(),
                trace,
            });
        }
    }
    Ok(out)
}

/// Loads the streams the model needs and scores every utterance.
pub fn score_manifest(model: &Detector, manifest: &Manifest) -> Result<ScoredManifest> {
    let mut loader = FeatureLoader::new(SpectralConfig::new(model.config.feature));
    let examples = loader.load(manifest, model.config.uses_sf(), model.config.uses_ssl())?;
    score_examples(model, &examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute force: evaluate FAR/FRR by direct counting at every candidate
    /// threshold, then look for the first sign change of FAR − FRR.
    fn oracle_eer(bona: &[f64], spoof: &[f64]) -> f64 {
        let mut taus: Vec<f64> = vec![f64::NEG_INFINITY, f64::INFINITY];
        taus.extend(bona.iter().chain(spoof));
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        let pts: Vec<(f64, f64)> = taus
            .iter()
            .map(|&t| {
                let far = spoof.iter().filter(|&&s| s >= t).count() as f64 / spoof.len() as f64;
                let frr = bona.iter().filter(|&&b| b < t).count() as f64 / bona.len() as f64;
                (far, frr)
            })
            .collect();
        for i in 0..pts.len() {
            let (far, frr) = pts[i];
            if frr == far {
                return far;
            }
            if frr > far {
                let (far0, frr0) = pts[i - 1];
                return interpolate_crossing(far0, frr0, far, frr);
            }
        }
        unreachable!()
    }

    #[test]
    fn perfect_separation() {
        let r = compute_eer(&ScoreSet::from_pairs(&[0.9, 0.8], &[0.1, 0.2])).unwrap();
        assert_eq!(r.eer, 0.0);
    }

    #[test]
    fn indistinguishable_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut set = ScoreSet::default();
        for i in 0..40 {
            let label = if i < 2 || rng.random_bool(0.5) {
                Label::Bonafide
            } else {
                Label::Spoof
            };
            set.push(format!("u{i}"), 0.37, label);
        }
        set.push("last", 0.37, Label::Spoof);
        assert_eq!(compute_eer(&set).unwrap().eer, 0.5);
    }

    #[test]
    fn small_mixed_case_matches_oracle() {
        let bona = [0.8, 0.6, 0.4];
        let spoof = [0.7, 0.3, 0.2];
        let r = compute_eer(&ScoreSet::from_pairs(&bona, &spoof)).unwrap();
        let want = oracle_eer(&bona, &spoof);
        assert_eq!(r.eer, want);
        // one error on each side out of three
        assert!((want - 1.0 / 3.0).abs() < 1e-12);
        assert!(r.threshold > 0.4 && r.threshold <= 0.7);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(
            compute_eer(&ScoreSet::from_pairs(&[0.1, 0.2], &[])),
            Err(Error::SingleClass { bonafide: 2, spoof: 0 })
        ));
    }

    #[test]
    fn monotone_transforms_leave_eer_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let nb = rng.random_range(1..30);
            let ns = rng.random_range(1..30);
            let bona: Vec<f64> = (0..nb).map(|_| rng.random_range(-1.0..2.0)).collect();
            let spoof: Vec<f64> = (0..ns).map(|_| rng.random_range(-2.0..1.0)).collect();
            let base = compute_eer(&ScoreSet::from_pairs(&bona, &spoof)).unwrap().eer;
            for f in [|x: f64| 2.0 * x + 1.0, |x: f64| x.tanh()] {
                let b: Vec<f64> = bona.iter().map(|&x| f(x)).collect();
                let s: Vec<f64> = spoof.iter().map(|&x| f(x)).collect();
                let e = compute_eer(&ScoreSet::from_pairs(&b, &s)).unwrap().eer;
                assert!((e - base).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_sets_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = rng.random_range(2..=64);
            let nb = rng.random_range(1..n);
            // coarse grid forces ties
            let draw = |rng: &mut ChaCha8Rng| (rng.random_range(0..12) as f64) * 0.25;
            let bona: Vec<f64> = (0..nb).map(|_| draw(&mut rng) + 0.5).collect();
            let spoof: Vec<f64> = (0..n - nb).map(|_| draw(&mut rng)).collect();
            let got = compute_eer(&ScoreSet::from_pairs(&bona, &spoof)).unwrap().eer;
            assert_eq!(got, oracle_eer(&bona, &spoof));
        }
    }

    #[test]
    fn score_csv_roundtrip() {
        let set = ScoreSet::from_pairs(&[0.125, -3.5], &[1e-3]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.csv");
        set.write_csv(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.lines().nth(1) == Some("utt_id,score,label"));
        assert_eq!(ScoreSet::read_csv(&p).unwrap(), set);
    }

    fn trace(rows: &[[f64; 2]]) -> GateTrace {
        GateTrace {
            weights: Matrix::from_rows(rows).unwrap(),
        }
    }

    fn tagged(f: &str, d: &str, t: GateTrace) -> TaggedTrace {
        TaggedTrace {
            utt_id: format!("{f}-{d}"),
            feature: f.into(),
            dataset: d.into(),
            trace: t,
        }
    }

    #[test]
    fn gate_aggregation_arithmetic() {
        let halves = vec![tagged("lfcc", "eval", trace(&[[0.5, 0.5]; 4]))];
        let r = aggregate_gates(&halves, GatePooling::Frames);
        assert_eq!((r.rows[0].w_sf, r.rows[0].w_ssl), (0.5, 0.5));

        let sym = vec![
            tagged("mfcc", "eval", trace(&[[1.0, 0.0]; 5])),
            tagged("mfcc", "eval", trace(&[[0.0, 1.0]; 5])),
        ];
        let r = aggregate_gates(&sym, GatePooling::Frames);
        assert_eq!((r.rows[0].w_sf, r.rows[0].w_ssl), (0.5, 0.5));

        let lopsided = vec![
            tagged("cqcc", "eval", trace(&[[1.0, 0.0]; 10])),
            tagged("cqcc", "eval", trace(&[[0.0, 1.0]; 30])),
        ];
        let r = aggregate_gates(&lopsided, GatePooling::Frames);
        assert_eq!((r.rows[0].w_sf, r.rows[0].w_ssl), (0.25, 0.75));
        let r = aggregate_gates(&lopsided, GatePooling::Utterances);
        assert_eq!((r.rows[0].w_sf, r.rows[0].w_ssl), (0.5, 0.5));
    }

    #[test]
    fn gate_rows_per_group_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut traces = Vec::new();
        for f in ["mfcc", "lfcc"] {
            for d in ["a", "b", "c"] {
                for _ in 0..3 {
                    let n = rng.random_range(1..20);
                    let rows: Vec<[f64; 2]> = (0..n)
                        .map(|_| {
                            let w = rng.random_range(0.0..1.0);
                            [w, 1.0 - w]
                        })
                        .collect();
                    traces.push(tagged(f, d, trace(&rows)));
                }
            }
        }
        traces.push(tagged(
            "empty",
            "x",
            GateTrace {
                weights: Matrix::zeros(0, 2),
            },
        ));
        let r = aggregate_gates(&traces, GatePooling::Frames);
        assert_eq!(r.rows.len(), 6);
        for row in &r.rows {
            assert!((row.w_sf + row.w_ssl - 1.0).abs() < 1e-6);
        }
        assert!(r.to_csv().starts_with("feature,dataset,w_sf,w_ssl\n"));
    }

    #[test]
    fn scoring_empty_and_single_manifests() {
        use crate::data::{AudioSource, ManifestEntry, SslSource};
        use crate::features::FeatureKind;
        use crate::fusion::Strategy;
        use crate::model::ModelConfig;

        let model = Detector::new(ModelConfig::new(Strategy::Gating, FeatureKind::Lfcc), 1);
        let empty = score_manifest(&model, &Manifest::default()).unwrap();
        assert!(empty.scores.is_empty() && empty.traces.is_empty());
        let one = Manifest::new(vec![ManifestEntry {
            utt_id: "only".into(),
            source: AudioSource::Synth { seed: 1 },
            ssl_source: SslSource::Synth { projection_seed: 2 },
            label: Label::Spoof,
            dataset_tag: "dev".into(),
        }])
        .unwrap();
        let out = score_manifest(&model, &one).unwrap();
        assert_eq!(out.scores.len(), 1);
        assert!(out.scores.entries[0].score.is_finite());
        assert_eq!(out.traces.len(), 1);
        assert_eq!(out.traces[0].trace.frames(), 201);
        assert_eq!(out.traces[0].feature, "lfcc");
    }

    #[test]
    fn trace_csv_roundtrip() {
        let t = trace(&[[0.25, 0.75], [0.125, 0.875]]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        fs::write(&p, gate_trace_to_csv(&t)).unwrap();
        assert_eq!(read_gate_trace(&p).unwrap(), t);
    }

    #[test]
    fn trace_index_roundtrip() {
        let traces = vec![
            tagged("mfcc", "eval", trace(&[[0.1, 0.9], [1.0 / 3.0, 2.0 / 3.0]])),
            tagged("mfcc", "dev", trace(&[[0.5, 0.5]])),
        ];
        let dir = tempfile::tempdir().unwrap();
        let index = write_traces(dir.path(), &traces).unwrap();
        for back in [read_traces(&index).unwrap(), read_traces(dir.path()).unwrap()] {
            assert_eq!(back.len(), 2);
            for (a, b) in back.iter().zip(&traces) {
                assert_eq!((&a.utt_id, &a.feature, &a.dataset), (&b.utt_id, &b.feature, &b.dataset));
                assert_eq!(a.trace, b.trace);
            }
        }
        fs::write(&index, "u\tmfcc\teval\n").unwrap();
        let err = read_traces(&index).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }
}
