use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use binaural_intel::corpus::load_manifest;
use binaural_intel::evaluation::read_predictions;
use binaural_intel::model::checkpoint::read_meta;
use binaural_intel::model::{FusionMode, Topology};
use binaural_intel::synth::{generate, SynthConfig};

const SMALL_MODEL: &str = r#"
max_epochs = 2
batch_size = 4
[model]
cnn_channels = [4, 8]
lfb_filters = 8
lfb_kernel = 31
d_model = 16
lstm_hidden = 8
"#;

fn bintel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bintel"))
        .args(args)
        .output()
        .expect("run bintel")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Corpus {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: PathBuf,
    audiograms: PathBuf,
}

fn corpus(train: usize, dev: usize, test: usize) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = SynthConfig {
        num_train: train,
        num_dev: dev,
        num_test: test,
        ..SynthConfig::default()
    };
    let c = generate(&cfg, &root.join("corpus")).unwrap();
    std::fs::write(root.join("small.toml"), SMALL_MODEL).unwrap();
    Corpus {
        _dir: dir,
        root,
        manifest: c.manifest,
        audiograms: c.audiograms,
    }
}

#[test]
fn simulate_hl_is_deterministic() {
    let c = corpus(1, 0, 0);
    let wav = c.root.join("corpus/wavs/syn000.wav");
    let outs: Vec<PathBuf> = (0..2).map(|i| c.root.join(format!("hl{i}.wav"))).collect();
    for out in &outs {
        let o = bintel(&[
            "simulate-hl",
            "--in",
            s(&wav),
            "--audiogram",
            s(&c.audiograms),
            "--listener",
            "L02",
            "--ear",
            "right",
            "--out",
            s(out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = std::fs::read(&outs[0]).unwrap();
    assert_eq!(a, std::fs::read(&outs[1]).unwrap());
    assert!(a.len() > 44);
}

#[test]
fn simulate_hl_unknown_listener_exits_2() {
    let c = corpus(1, 0, 0);
    let o = bintel(&[
        "simulate-hl",
        "--in",
        s(&c.root.join("corpus/wavs/syn000.wav")),
        "--audiogram",
        s(&c.audiograms),
        "--listener",
        "NOBODY",
        "--ear",
        "left",
        "--out",
        s(&c.root.join("x.wav")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("NOBODY"), "{}", stderr(&o));
}

#[test]
fn features_writes_two_files_per_utterance_and_is_idempotent() {
    let c = corpus(2, 1, 0);
    let out = c.root.join("feats");
    let args = [
        "features",
        "--manifest",
        s(&c.manifest),
        "--audiograms",
        s(&c.audiograms),
        "--provider",
        "mel-proxy",
        "--out-dir",
        s(&out),
    ];
    let o = bintel(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let count = || std::fs::read_dir(&out).unwrap().count();
    assert_eq!(count(), 6);
    let before: Vec<Vec<u8>> = {
        let mut names: Vec<PathBuf> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        names.iter().map(|p| std::fs::read(p).unwrap()).collect()
    };
    let o = bintel(&args);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 files written, 6 up to date"));
    assert_eq!(count(), 6);
    let mut names: Vec<PathBuf> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    let after: Vec<Vec<u8>> = names.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn unknown_provider_exits_2_and_lists_providers() {
    let c = corpus(1, 0, 0);
    let o = bintel(&[
        "features",
        "--manifest",
        s(&c.manifest),
        "--audiograms",
        s(&c.audiograms),
        "--provider",
        "wavlm-huge",
        "--out-dir",
        s(&c.root.join("f")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("mel-proxy") && err.contains("precomputed"), "{err}");
}

#[test]
fn invalid_flag_value_exits_2() {
    let o = bintel(&["evaluate", "--preds"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_predict_evaluate_pipeline() {
    let c = corpus(4, 2, 2);
    let ckpt = c.root.join("model.ckpt");
    let report = c.root.join("report.json");
    let config = c.root.join("small.toml");
    let common = [
        "--manifest",
        s(&c.manifest),
        "--audiograms",
        s(&c.audiograms),
        "--provider",
        "mel-proxy",
    ];
    let mut train = vec!["--seed", "7", "train"];
    train.extend(common);
    train.extend([
        "--config",
        s(&config),
        "--fusion-mode",
        "average",
        "--out",
        s(&ckpt),
        "--report",
        s(&report),
    ]);
    let o = bintel(&train);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("best dev RMSE"));

    let meta = read_meta(&ckpt).unwrap();
    assert_eq!(
        meta.topology,
        Topology::Binaural {
            fusion: FusionMode::Average
        }
    );
    assert_eq!(meta.seed, 7);
    let rep = std::fs::read_to_string(&report).unwrap();
    assert!(rep.contains("\"epochs\""));

    let preds = c.root.join("preds.csv");
    let mut predict = vec!["predict"];
    predict.extend(common);
    predict.extend(["--ckpt", s(&ckpt), "--out", s(&preds)]);
    let o = bintel(&predict);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_predictions(&preds).unwrap();
    let manifest = load_manifest(&c.manifest).unwrap();
    assert_eq!(rows.len(), manifest.len());
    for (row, rec) in rows.iter().zip(&manifest) {
        assert_eq!(row.utterance_id, rec.utterance_id);
        assert_eq!(row.truth, rec.correctness);
        assert!((0.0..=100.0).contains(&row.predicted));
    }
    assert_eq!(rows.iter().filter(|r| r.truth.is_none()).count(), 2);

    let metrics = c.root.join("metrics.json");
    let scatter = c.root.join("scatter.csv");
    let o = bintel(&[
        "evaluate",
        "--preds",
        s(&preds),
        "--out",
        s(&metrics),
        "--scatter",
        s(&scatter),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("2 rows without truth excluded"), "{}", stderr(&o));
    let m = std::fs::read_to_string(&metrics).unwrap();
    assert!(m.contains("\"n\": 6"), "{m}");
    assert_eq!(std::fs::read_to_string(&scatter).unwrap().lines().count(), 7);

    // A checkpoint trained on one provider refuses another.
    let archive = c.root.join("archive");
    std::fs::create_dir(&archive).unwrap();
    let wrong_out = c.root.join("p2.csv");
    let mut wrong = vec!["predict"];
    wrong.extend(&common[..4]);
    wrong.extend([
        "--provider",
        "precomputed",
        "--archive",
        s(&archive),
        "--ckpt",
        s(&ckpt),
        "--out",
        s(&wrong_out),
    ]);
    let o = bintel(&wrong);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn full_pipeline_through_the_feature_cache() {
    let c = corpus(4, 2, 2);
    let sim = c.root.join("sim.wav");
    let o = bintel(&[
        "simulate-hl",
        "--in",
        s(&c.root.join("corpus/wavs/syn001.wav")),
        "--audiogram",
        s(&c.audiograms),
        "--listener",
        "L02",
        "--ear",
        "left",
        "--out",
        s(&sim),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let feats = c.root.join("feats");
    let config = c.root.join("small.toml");
    let common = [
        "--manifest",
        s(&c.manifest),
        "--audiograms",
        s(&c.audiograms),
        "--provider",
        "mel-proxy",
    ];
    let mut features = vec!["features"];
    features.extend(common);
    features.extend(["--config", s(&config), "--out-dir", s(&feats)]);
    let o = bintel(&features);
    assert!(o.status.success(), "{}", stderr(&o));

    let ckpt = c.root.join("model.ckpt");
    let mut train = vec!["--seed", "3", "train"];
    train.extend(common);
    train.extend(["--config", s(&config), "--features-dir", s(&feats), "--out", s(&ckpt)]);
    let o = bintel(&train);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(c.root.join("model.report.json").is_file());

    let preds = c.root.join("preds.csv");
    let mut predict = vec!["predict"];
    predict.extend(common);
    predict.extend(["--ckpt", s(&ckpt), "--features-dir", s(&feats), "--out", s(&preds)]);
    let o = bintel(&predict);
    assert!(o.status.success(), "{}", stderr(&o));

    // Cached and freshly extracted features give the same predictions.
    let direct = c.root.join("direct.csv");
    let mut predict = vec!["predict"];
    predict.extend(common);
    predict.extend(["--ckpt", s(&ckpt), "--out", s(&direct)]);
    let o = bintel(&predict);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&preds).unwrap(), std::fs::read(&direct).unwrap());

    let metrics = c.root.join("metrics.json");
    let o = bintel(&["evaluate", "--preds", s(&preds), "--out", s(&metrics)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&metrics).unwrap().contains("\"n\": 6"));
}

#[test]
fn evaluate_perfect_and_single_record() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("p.csv");
    std::fs::write(&preds, "utterance_id,predicted,truth\na,10,10\nb,50,50\nc,90,90\n").unwrap();
    let out = dir.path().join("m.json");
    let o = bintel(&["evaluate", "--preds", s(&preds), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = std::fs::read_to_string(&out).unwrap();
    assert!(m.contains("\"rmse\": 0.0") && m.contains("\"stderr\": 0.0"), "{m}");
    assert!(m.contains("\"lcc\": 1.0"), "{m}");

    std::fs::write(&preds, "utterance_id,predicted,truth\na,40,50\n").unwrap();
    let o = bintel(&["evaluate", "--preds", s(&preds), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = std::fs::read_to_string(&out).unwrap();
    assert!(m.contains("\"lcc\": null"), "{m}");
    assert!(m.contains("\"rmse\": 10.0"), "{m}");
}

#[test]
fn evaluate_rejects_out_of_range_scores() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("p.csv");
    std::fs::write(&preds, "utterance_id,predicted,truth\na,140,10\n").unwrap();
    let o = bintel(&["evaluate", "--preds", s(&preds), "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}
