use std::collections::HashMap;
use std::path::{Path, PathBuf};

use binaural_intel::corpus::{load_audiograms, Ear, ListenerProfile, UtteranceRecord};
use binaural_intel::features::container::{write_tensors, TensorHeader};
use binaural_intel::features::{provider_from_name, EmbeddingKey, EmbeddingProvider, FrontendConfig};
use binaural_intel::model::Architecture;
use binaural_intel::pipeline::{write_feature_cache, FeatureContext, FeatureSource};
use binaural_intel::synth::{generate, SynthConfig};
use binaural_intel::tensor::Matrix;
use binaural_intel::training::{predict_records, train, TrainConfig};
use binaural_intel::Error;

struct Corpus {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    audiograms: PathBuf,
    records: Vec<UtteranceRecord>,
    profiles: HashMap<String, ListenerProfile>,
}

fn corpus(train: usize, dev: usize, test: usize) -> Corpus {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let cfg = SynthConfig {
        num_train: train,
        num_dev: dev,
        num_test: test,
        ..SynthConfig::default()
    };
    let c = generate(&cfg, &dir.join("corpus")).unwrap();
    Corpus {
        profiles: load_audiograms(&c.audiograms).unwrap(),
        audiograms: c.audiograms,
        records: c.records,
        dir,
        _tmp: tmp,
    }
}

fn context<'a>(c: &'a Corpus, provider: &'a dyn EmbeddingProvider, smearing: bool) -> FeatureContext<'a> {
    FeatureContext {
        manifest_dir: c.dir.join("corpus"),
        profiles: &c.profiles,
        provider,
        frontend: FrontendConfig::default(),
        smearing,
    }
}

#[test]
fn cached_features_equal_computed_features() {
    let c = corpus(2, 1, 1);
    let provider = provider_from_name("mel-proxy", None).unwrap();
    let out = c.dir.join("feats");
    let summary = write_feature_cache(&context(&c, provider.as_ref(), false), &c.records, &c.audiograms, &out, false).unwrap();
    assert_eq!(summary.written, 8);

    let computed = FeatureSource::Compute(context(&c, provider.as_ref(), false)).load_all(&c.records).unwrap();
    let cached = FeatureSource::Cache(out.clone()).load_all(&c.records).unwrap();
    assert_eq!(computed, cached);

    let forced = write_feature_cache(&context(&c, provider.as_ref(), false), &c.records, &c.audiograms, &out, true).unwrap();
    assert_eq!(forced.written, 8);
}

#[test]
fn smearing_changes_features_deterministically() {
    // syn002 belongs to a listener with moderate loss; normal hearing is not smeared.
    let c = corpus(3, 0, 0);
    let rec = &c.records[2];
    assert_eq!(rec.listener_id, "L03");
    let provider = provider_from_name("mel-proxy", None).unwrap();
    let plain = context(&c, provider.as_ref(), false).extract(rec).unwrap();
    let smeared = context(&c, provider.as_ref(), true).extract(rec).unwrap();
    let again = context(&c, provider.as_ref(), true).extract(rec).unwrap();
    assert!(plain != smeared);
    assert!(smeared == again);

    let normal = &c.records[0];
    assert_eq!(c.profiles[&normal.listener_id].left.mean_threshold(), 10.0);
    let a = context(&c, provider.as_ref(), false).extract(normal).unwrap();
    let b = context(&c, provider.as_ref(), true).extract(normal).unwrap();
    assert!(a == b);
}

#[test]
fn missing_cache_file_is_a_validation_error() {
    let c = corpus(1, 0, 0);
    let empty = c.dir.join("none");
    std::fs::create_dir(&empty).unwrap();
    let err = FeatureSource::Cache(empty).load_all(&c.records).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(err.to_string().contains("syn000"), "{err}");
}

#[test]
fn unknown_listener_is_named() {
    let mut c = corpus(2, 0, 0);
    c.records[1].listener_id = "L99".into();
    let provider = provider_from_name("mel-proxy", None).unwrap();
    let err = FeatureSource::Compute(context(&c, provider.as_ref(), false)).load_all(&c.records).unwrap_err();
    assert!(matches!(&err, Error::UnknownListener(id) if id == "L99"), "{err}");
}

/// Writes a `frames × dim` embedding per ear at 50 frames per second.
fn write_archive(dir: &Path, records: &[UtteranceRecord], dim: usize, skip: &[(&str, Ear)]) {
    std::fs::create_dir_all(dir).unwrap();
    for (n, r) in records.iter().enumerate() {
        for ear in [Ear::Left, Ear::Right] {
            if skip.contains(&(r.utterance_id.as_str(), ear)) {
                continue;
            }
            let frames = 25;
            let data = (0..frames * dim).map(|i| ((i + n) as f64 * 0.37).sin()).collect();
            let m = Matrix::from_vec(frames, dim, data);
            let key = EmbeddingKey::new(r.utterance_id.clone(), ear);
            write_tensors(dir.join(key.file_name()), &[(TensorHeader::new(&m, "ssl-test", None), &m)]).unwrap();
        }
    }
}

#[test]
fn every_missing_embedding_is_reported_before_work_starts() {
    let c = corpus(3, 0, 0);
    let archive = c.dir.join("archive");
    write_archive(&archive, &c.records, 6, &[("syn000", Ear::Right), ("syn002", Ear::Left)]);
    let provider = provider_from_name("precomputed", Some(&archive)).unwrap();
    let err = FeatureSource::Compute(context(&c, provider.as_ref(), false)).load_all(&c.records).unwrap_err();
    match err {
        Error::MissingEmbeddings(list) => {
            assert_eq!(list.len(), 2, "{list:?}");
            assert!(list[0].contains("syn000.right") && list[1].contains("syn002.left"), "{list:?}");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn precomputed_embeddings_train_and_are_aligned_to_frames() {
    let c = corpus(3, 1, 1);
    let archive = c.dir.join("archive");
    write_archive(&archive, &c.records, 6, &[]);
    let provider = provider_from_name("precomputed", Some(&archive)).unwrap();
    let src = FeatureSource::Compute(context(&c, provider.as_ref(), false));
    let inputs = src.load_all(&c.records).unwrap();
    for [l, r] in &inputs {
        assert_eq!(l.ssl.rows(), l.spectral.rows());
        assert_eq!(r.ssl.cols(), 6);
        assert_eq!(l.provider_id, "ssl-test");
    }

    let cfg = TrainConfig {
        max_epochs: 1,
        model: Architecture {
            cnn_channels: vec![4],
            lfb_filters: 4,
            lfb_kernel: 31,
            d_model: 8,
            lstm_hidden: 4,
            ..Architecture::default()
        },
        ..TrainConfig::default()
    };
    let out = train(&cfg, &c.records, &src, &c.dir.join("m.ckpt")).unwrap();
    assert_eq!(out.best.config.ssl_dim, 6);
    let rows = predict_records(&out.best, "ssl-test", &c.records, &src).unwrap();
    assert_eq!(rows.len(), c.records.len());

    let mel = provider_from_name("mel-proxy", None).unwrap();
    let err = predict_records(&out.best, "ssl-test", &c.records, &FeatureSource::Compute(context(&c, mel.as_ref(), false)))
        .unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}
