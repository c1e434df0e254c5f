use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sslfuse::data::read_features;
use sslfuse::dsp::Waveform;
use sslfuse::evaluation::{gate_trace_to_csv, TRACE_INDEX};
use sslfuse::features::FeatureKind;
use sslfuse::fusion::{GateTrace, Strategy};
use sslfuse::model::{Detector, ModelConfig};
use sslfuse::wav::write_wav;
use sslfuse::Matrix;

fn sslfuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sslfuse"))
        .current_dir(dir)
        .env_remove("SSLFUSE_OUT_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn corpus(dir: &Path) -> PathBuf {
    corpus_of(dir, "8")
}

fn corpus_of(dir: &Path, n_train: &str) -> PathBuf {
    let o = sslfuse(
        dir,
        &[
            "synth-data",
            "--n-train",
            n_train,
            "--n-eval",
            "6",
            "--dir",
            "corpus",
            "--seed",
            "11",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("corpus")
}

fn tone(len: usize, f: f64) -> Waveform {
    let s = (0..len)
        .map(|i| 0.3 * (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin())
        .collect();
    Waveform::new(s, 16_000).unwrap()
}

fn train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train",
        "--manifest",
        "corpus/train.tsv",
        "--eval-manifest",
        "corpus/eval.tsv",
        "--batch-size",
        "4",
        "--out-dir",
        out,
    ];
    v.extend(extra);
    v
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = sslfuse(d, &["train", "--manifest", "m.tsv", "--strategy", "bogus"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown strategy"), "{}", stderr(&o));
    assert_eq!(code(&sslfuse(d, &[])), 2);
    assert_eq!(code(&sslfuse(d, &["extract"])), 2);
    assert_eq!(
        code(&sslfuse(d, &["extract", "--wav", "a.wav", "--manifest", "m.tsv"])),
        2
    );
    assert_eq!(
        code(&sslfuse(d, &["gradcheck", "--strategy", "xattn", "--seeds", "0"])),
        2
    );
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = sslfuse(d, &["extract", "--wav", "missing.wav"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.wav"));
    assert_eq!(code(&sslfuse(d, &["train", "--manifest", "nope.tsv"])), 2);
    assert_eq!(
        code(&sslfuse(d, &["eval", "--checkpoint", "c.bin", "--manifest", "m.tsv"])),
        2
    );
    assert_eq!(code(&sslfuse(d, &["analyze-gates", "--traces", "t"])), 2);
}

#[test]
fn extract_single_wav_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_wav(d.join("four.wav"), &tone(64_000, 440.0)).unwrap();
    let o = sslfuse(
        d,
        &[
            "extract",
            "--wav",
            "four.wav",
            "--feature",
            "mfcc",
            "--out",
            "out/four.sff",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("402x60"));
    let fm = read_features(d.join("out/four.sff")).unwrap();
    assert_eq!(fm.data.shape(), (402, 60));
    assert!(d.join("out/extract.config.json").exists());

    let mut tsv = String::new();
    for i in 0..3 {
        write_wav(
            d.join(format!("c{i}.wav")),
            &tone(20_000 + 5_000 * i, 300.0 + 100.0 * i as f64),
        )
        .unwrap();
        tsv.push_str(&format!("c{i}\tc{i}.wav\tsynth:1\tbonafide\tlocal\n"));
    }
    fs::write(d.join("m.tsv"), tsv).unwrap();
    let o = sslfuse(
        d,
        &["extract", "--manifest", "m.tsv", "--feature", "lfcc", "--out", "feats"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files: Vec<_> = fs::read_dir(d.join("feats"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "sff"))
        .collect();
    assert_eq!(files.len(), 3);
}

#[test]
fn default_out_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_wav(d.join("a.wav"), &tone(16_000, 200.0)).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sslfuse"))
        .current_dir(d)
        .env("SSLFUSE_OUT_DIR", "from-env")
        .args(["extract", "--wav", "a.wav"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.join("from-env/a.mfcc.sff").exists());
}

#[test]
fn train_eval_and_gate_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    let o = sslfuse(d, &train_args("run", &["--strategy", "gating", "--epochs", "3"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "checkpoint.bin",
        "state.bin",
        "metrics.csv",
        "config.json",
        "summary.csv",
    ] {
        assert!(d.join("run").join(f).exists(), "{f} missing");
    }
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    let best: Vec<f64> = metrics
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(best.len(), 3);
    assert!(best.windows(2).all(|w| w[1] <= w[0]), "{metrics}");

    let again = sslfuse(d, &train_args("run2", &["--strategy", "gating", "--epochs", "3"]));
    assert_eq!(code(&again), 0);
    for f in ["metrics.csv", "checkpoint.bin", "state.bin"] {
        assert_eq!(
            fs::read(d.join("run").join(f)).unwrap(),
            fs::read(d.join("run2").join(f)).unwrap(),
            "{f}"
        );
    }

    let o = sslfuse(
        d,
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.bin",
            "--manifest",
            "corpus/eval.tsv",
            "--scores-out",
            "ev/scores.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("EER: "), "{}", stdout(&o));
    let scores = fs::read_to_string(d.join("ev/scores.csv")).unwrap();
    assert!(scores.lines().any(|l| l == "utt_id,score,label"));
    assert_eq!(scores.lines().filter(|l| l.starts_with("eval_")).count(), 6);
    let index = fs::read_to_string(d.join("ev/traces").join(TRACE_INDEX)).unwrap();
    assert_eq!(index.lines().count(), 7);

    let o = sslfuse(d, &["analyze-gates", "--traces", "ev/traces", "--out", "ev/gates.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(d.join("ev/gates.csv")).unwrap();
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows[0], "feature,dataset,w_sf,w_ssl");
    assert_eq!(rows.len(), 2);
    let cols: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(&cols[..2], &["mfcc", "eval"]);
    let sum: f64 = cols[2].parse::<f64>().unwrap() + cols[3].parse::<f64>().unwrap();
    assert!((sum - 1.0).abs() <= 1e-6);
}

#[test]
fn perfectly_separated_eval_reports_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus_of(d, "40");
    let o = sslfuse(d, &train_args("sf", &["--strategy", "nofusion-sf", "--epochs", "10"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = sslfuse(
        d,
        &[
            "eval",
            "--checkpoint",
            "sf/checkpoint.bin",
            "--manifest",
            "corpus/eval.tsv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "EER: 0.00%");
    assert!(d.join("runs/scores.csv").exists());
    assert!(!d.join("runs/traces").exists());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    let flags = ["--strategy", "concat", "--feature", "lfcc", "--seed", "3"];
    let mut straight = flags.to_vec();
    straight.extend(["--epochs", "3"]);
    assert_eq!(code(&sslfuse(d, &train_args("full", &straight))), 0);
    let mut half = flags.to_vec();
    half.extend(["--epochs", "1"]);
    assert_eq!(code(&sslfuse(d, &train_args("part", &half))), 0);
    let o = sslfuse(d, &train_args("part", &["--epochs", "3", "--resume", "part/state.bin"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["metrics.csv", "checkpoint.bin", "state.bin"] {
        assert_eq!(
            fs::read(d.join("full").join(f)).unwrap(),
            fs::read(d.join("part").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn zero_epochs_saves_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    let o = sslfuse(
        d,
        &train_args("z", &["--strategy", "xattn", "--epochs", "0", "--seed", "5"]),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let saved = Detector::load(d.join("z/checkpoint.bin")).unwrap();
    let fresh = Detector::new(ModelConfig::new(Strategy::CrossAttn, FeatureKind::Mfcc), 5);
    for ((_, a), (_, b)) in saved.store.iter().zip(fresh.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let metrics = fs::read_to_string(d.join("z/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn several_runs_report_each_seed_and_the_mean() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    let o = sslfuse(
        d,
        &train_args("multi", &["--strategy", "nofusion-sf", "--epochs", "2", "--runs", "3"]),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(d.join("multi/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "seed,best_epoch,best_eer");
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,") && lines[3].starts_with("2,"));
    assert!(lines[4].starts_with("mean,,"));
    assert!(stdout(&o).contains("mean eval EER over 3 runs"));
    for s in 0..3 {
        assert!(d.join(format!("multi/seed_{s}/config.json")).exists());
    }
}

#[test]
fn mismatched_features_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    assert_eq!(
        code(&sslfuse(
            d,
            &train_args("m", &["--strategy", "nofusion-ssl", "--epochs", "1"])
        )),
        0
    );
    let narrow = sslfuse::features::FeatureMatrix {
        data: Matrix::zeros(201, 16),
        stream: sslfuse::features::Stream::Ssl,
        frame_rate: 50.0,
        provenance: "narrow".into(),
    };
    sslfuse::data::write_features(d.join("narrow.sff"), &narrow).unwrap();
    fs::write(d.join("bad.tsv"), "x\tsynth:1\tnarrow.sff\tspoof\tt\n").unwrap();
    let o = sslfuse(
        d,
        &["eval", "--checkpoint", "m/checkpoint.bin", "--manifest", "bad.tsv"],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("201x16"), "{}", stderr(&o));

    fs::write(d.join("broken.bin"), b"NOPE and some bytes").unwrap();
    let o = sslfuse(d, &["eval", "--checkpoint", "broken.bin", "--manifest", "bad.tsv"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad magic"), "{}", stderr(&o));
}

#[test]
fn gate_analysis_of_even_traces() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let traces = d.join("t");
    fs::create_dir(&traces).unwrap();
    let even = GateTrace {
        weights: Matrix::filled(5, 2, 0.5),
    };
    let mut index = String::from("utt_id\tfeature\tdataset\tpath\n");
    for i in 0..3 {
        fs::write(traces.join(format!("u{i}.csv")), gate_trace_to_csv(&even)).unwrap();
        index.push_str(&format!("u{i}\tcqcc\tdev\tu{i}.csv\n"));
    }
    fs::write(traces.join(TRACE_INDEX), index).unwrap();
    let o = sslfuse(
        d,
        &["analyze-gates", "--traces", "t", "--out", "g.csv", "--per-utterance"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(d.join("g.csv")).unwrap(),
        "feature,dataset,w_sf,w_ssl\ncqcc,dev,0.500000,0.500000\n"
    );
    assert!(d.join("analyze-gates.config.json").exists());
}

#[test]
fn gradcheck_passes_for_cross_attention() {
    let dir = tempfile::tempdir().unwrap();
    let o = sslfuse(dir.path(), &["gradcheck", "--strategy", "xattn"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("max relative error"), "{}", stdout(&o));
}
