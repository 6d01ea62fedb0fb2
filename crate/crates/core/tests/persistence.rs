use std::fs;

use diva_core::io::{self, Corpus, CorpusSpec};
use diva_core::trainer::{MetricRow, Phase};
use diva_core::{DivaError, RngStream};

fn tiny_spec() -> CorpusSpec {
    CorpusSpec {
        dir: None,
        train_images: 6,
        pairs_per_pattern: 2,
        labeled_images: 8,
        ..CorpusSpec::default()
    }
}

#[test]
fn checkpoint_file_round_trip_is_bitwise_and_leaves_no_temp_file() {
    let dir = tempfile::tempdir().unwrap();
    let models = diva_core::gradsuite::tiny_models().unwrap();
    let params = models
        .init_encoder(5)
        .merged(&models.init_denoiser(5))
        .unwrap();
    let path = dir.path().join("nested/model.ckpt");
    io::write_checkpoint(&path, &params).unwrap();
    let back = io::read_checkpoint(&path).unwrap();
    assert_eq!(back.len(), params.len());
    for ((n1, t1), (n2, t2)) in params.iter().zip(back.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        assert!(t1
            .data()
            .iter()
            .zip(t2.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let names: Vec<_> = fs::read_dir(path.parent().unwrap())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(names, vec![std::ffi::OsString::from("model.ckpt")]);
}

#[test]
fn corrupted_checkpoints_report_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut params = diva_core::ParamSet::new();
    params.insert(
        "w",
        diva_core::rng::sample_gaussian(&[3, 2], &mut RngStream::new(0, 0)),
    );
    let path = dir.path().join("a.ckpt");
    io::write_checkpoint(&path, &params).unwrap();
    let good = fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[1] ^= 0xff;
    fs::write(&path, &bad).unwrap();
    assert!(matches!(
        io::read_checkpoint(&path),
        Err(DivaError::BadMagic)
    ));

    let mut bad = good.clone();
    bad[4..8].copy_from_slice(&7u32.to_le_bytes());
    fs::write(&path, &bad).unwrap();
    assert!(matches!(
        io::read_checkpoint(&path),
        Err(DivaError::VersionMismatch {
            found: 7,
            expected: 1
        })
    ));

    fs::write(&path, &good[..good.len() - 3]).unwrap();
    assert!(matches!(
        io::read_checkpoint(&path),
        Err(DivaError::Truncated(_))
    ));

    let msgs: Vec<String> = [
        DivaError::BadMagic,
        DivaError::VersionMismatch {
            found: 7,
            expected: 1,
        },
        DivaError::Truncated("x".into()),
    ]
    .iter()
    .map(|e| e.to_string())
    .collect();
    assert!(msgs[0] != msgs[1] && msgs[1] != msgs[2] && msgs[0] != msgs[2]);
}

#[test]
fn exported_corpus_round_trips_through_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec();
    let n = io::export_corpus(dir.path(), &spec).unwrap();
    assert_eq!(n, 6 + 8 + 2 * 2 * 5);

    // Every file survives read -> write byte-for-byte.
    let mut checked = 0;
    for sub in ["train", "labeled", "pairs"] {
        for entry in fs::read_dir(dir.path().join(sub)).unwrap() {
            let path = entry.unwrap().path();
            let original = fs::read(&path).unwrap();
            let img = io::read_ppm(&path, Some((32, 32))).unwrap();
            let copy = dir.path().join("copy.ppm");
            io::write_ppm(&copy, &img).unwrap();
            assert_eq!(fs::read(&copy).unwrap(), original, "{}", path.display());
            checked += 1;
        }
    }
    assert_eq!(checked, n);

    let imported = io::import_corpus(dir.path(), 32).unwrap();
    let generated = Corpus::generate(&spec);
    assert_eq!(imported.train.len(), generated.train.len());
    for (a, b) in imported.train.iter().zip(&generated.train) {
        assert_eq!(a.tensor().data(), b.tensor().data());
    }
    assert_eq!(imported.labeled.labels, generated.labeled.labels);
    assert_eq!(imported.labeled.seeds, generated.labeled.seeds);
    assert_eq!(imported.pairs.len(), generated.pairs.len());
    for (x, y) in imported.pairs.iter().zip(&generated.pairs) {
        assert_eq!((x.0, x.1), (y.0, y.1));
        assert_eq!(x.2.tensor().data(), y.2.tensor().data());
        assert_eq!(x.3.tensor().data(), y.3.tensor().data());
    }

    let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert!(manifest.starts_with("filename,split,label,seed\n"));
    assert!(manifest.contains("labeled/00003.ppm,labeled,3,"));
}

#[test]
fn malformed_ppm_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ppm");
    fs::write(&p, b"P5\n2 2\n255\n\0\0\0\0").unwrap();
    assert!(matches!(io::read_ppm(&p, None), Err(DivaError::Ppm(_))));
    fs::write(&p, b"P6\n1 1\n15\n\0\0\0").unwrap();
    assert!(matches!(io::read_ppm(&p, None), Err(DivaError::Ppm(_))));
    fs::write(&p, io::encode_ppm(2, 2, &[9; 12])).unwrap();
    assert!(io::read_ppm(&p, None).is_ok());
    let err = io::read_ppm(&p, Some((32, 32))).unwrap_err();
    assert!(err.to_string().contains("32x32"), "{err}");
}

#[test]
fn metrics_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<MetricRow> = (1..=3)
        .map(|step| MetricRow {
            step,
            phase: Phase::A,
            loss: 1.0 / step as f64,
            lr: 1e-3,
        })
        .collect();
    let path = dir.path().join("m.csv");
    io::write_metrics(&path, &rows).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("step,phase,loss,lr\n"));
    assert!(text.ends_with('\n') && !text.contains('\r'));
    assert_eq!(io::read_metrics(&path).unwrap(), rows);
}
