use std::fs;
use std::path::Path;

use fsaheat::autodiff::ParamMap;
use fsaheat::checkpoint::Checkpoint;
use fsaheat::dataset::{build_dataset, Dataset, Jitter, LayoutSpec};
use fsaheat::harness::ablation::Variant;
use fsaheat::harness::eval::{ensure_dataset, evaluate_dataset, TEST_SPLIT};
use fsaheat::harness::predict::{GRADIENT_CSV_HEADER, TEMPERATURE_CSV_HEADER};
use fsaheat::harness::train::{cosine_lr, normalization_of, BEST_CHECKPOINT, LAST_CHECKPOINT, RUN_MANIFEST, TRAIN_LOG};
use fsaheat::harness::{audit, evaluate, fit, predict, train, Adam, EpochLog, OptimConfig, PredictInput, Prepared, Protocol, TrainConfig};
use fsaheat::net::{FsaHeatNet, NetConfig};
use fsaheat::{Error, Tensor};

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig { net: NetConfig::micro(), seed: 11, ..TrainConfig::default() }.with_grid(16);
    cfg.data.n_train = 6;
    cfg.data.n_test = 3;
    cfg.data.val_fraction = 0.34;
    cfg.data.threads = 1;
    cfg.optim.epochs = 2;
    cfg.optim.batch_size = 2;
    cfg
}

fn without_time(log: &[EpochLog]) -> Vec<EpochLog> {
    log.iter().map(|e| EpochLog { seconds: 0.0, ..e.clone() }).collect()
}

#[test]
fn config_round_trips_through_toml() {
    let desk = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")).unwrap();
    for cfg in [TrainConfig::default(), tiny_config(), TrainConfig::from_toml(&desk).unwrap()] {
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    }
    let mut fixed = tiny_config();
    fixed.dataset.k_jitter = Jitter::Fixed(-0.5);
    assert_eq!(TrainConfig::from_toml(&fixed.to_toml().unwrap()).unwrap(), fixed);
    assert_eq!(TrainConfig::from_toml("").unwrap(), TrainConfig::default());
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    for text in ["[optim]\nlearning_rate = 1.0\n", "[net]\nbase = 3\n", "[dataset.stack]\nrow = 8\n", "speed = 1\n"] {
        assert!(matches!(TrainConfig::from_toml(text), Err(Error::Toml(_))), "{text}");
    }
    let bad: [fn(&mut TrainConfig); 7] = [
        |c| c.optim.lr = 0.0,
        |c| c.optim.lr_min = 1.0,
        |c| c.optim.beta2 = 1.0,
        |c| c.optim.batch_size = 0,
        |c| c.data.val_fraction = 1.0,
        |c| c.loss.alpha = -0.5,
        |c| c.dataset.stack.rows = 12,
    ];
    for f in bad {
        let mut c = tiny_config();
        f(&mut c);
        assert!(c.validate().is_err());
    }
}

#[test]
fn cosine_schedule_endpoints_and_midpoint() {
    let o = OptimConfig { lr: 1e-2, lr_min: 1e-4, ..OptimConfig::default() };
    assert_eq!(cosine_lr(&o, 0, 11), 1e-2);
    assert!((cosine_lr(&o, 10, 11) - 1e-4).abs() < 1e-15);
    assert!((cosine_lr(&o, 5, 11) - (1e-4 + 0.5 * (1e-2 - 1e-4))).abs() < 1e-15);
    assert_eq!(cosine_lr(&o, 0, 1), 1e-2);
}

#[test]
fn adam_matches_hand_computed_steps() {
    let o = OptimConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, ..OptimConfig::default() };
    let mut p = ParamMap::new();
    p.insert("w".into(), Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap());
    let mut adam = Adam::new(&p, &o);
    let g1 = [0.5, -4.0];
    let g2 = [-1.0, 2.0];
    let mut grads = ParamMap::new();
    grads.insert("w".into(), Tensor::from_vec(vec![2], g1.to_vec()).unwrap());
    adam.step(&mut p, &grads, 0.1);
    grads.insert("w".into(), Tensor::from_vec(vec![2], g2.to_vec()).unwrap());
    adam.step(&mut p, &grads, 0.05);
    for (k, start) in [1.0, -2.0].into_iter().enumerate() {
        let (mut m, mut v, mut x) = (0.0, 0.0, start);
        for (t, (g, lr)) in [(g1[k], 0.1), (g2[k], 0.05)].into_iter().enumerate() {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p["w"].data()[k] - x).abs() < 1e-15);
    }
}

#[test]
fn training_is_deterministic_and_writes_its_artifacts() {
    let cfg = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = train(&cfg, a.path()).unwrap();
    let sb = train(&cfg, b.path()).unwrap();
    assert_eq!(without_time(&sa.log), without_time(&sb.log));
    assert_eq!((sa.train_samples, sa.val_samples), (4, 2));
    for name in [BEST_CHECKPOINT, LAST_CHECKPOINT] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
    for name in [TRAIN_LOG, RUN_MANIFEST, "config.toml", "best.json", "last.json"] {
        assert!(a.path().join(name).exists(), "{name}");
    }
    let lines = fs::read_to_string(a.path().join(TRAIN_LOG)).unwrap();
    let parsed: Vec<EpochLog> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, sa.log);
    let best = Checkpoint::load(&sa.best_checkpoint, Some(&cfg.net)).unwrap();
    assert_eq!(best.manifest.epoch, sa.best_epoch);
    assert_eq!(best.manifest.val_rmse, sa.best_val_rmse);
    let min_val = sa.log.iter().filter_map(|e| e.val_rmse).fold(f64::INFINITY, f64::min);
    assert_eq!(sa.best_val_rmse, Some(min_val));
    for e in &sa.log {
        assert!((e.fsl - (e.spatial + cfg.loss.alpha * e.frequency)).abs() <= 1e-12 * e.fsl.max(1.0));
        assert!((e.frequency - (e.magnitude + cfg.loss.beta * e.phase)).abs() <= 1e-12 * e.frequency.max(1.0));
    }
    assert_eq!(TrainConfig::load(&a.path().join("config.toml")).unwrap(), cfg);
}

fn prepared(cfg: &TrainConfig, dir: &Path) -> Prepared {
    build_dataset(&cfg.dataset, cfg.data.n_train, cfg.seed, "train", dir, 1).unwrap();
    let ds = Dataset::open(dir).unwrap();
    Prepared::new(&ds.samples, &normalization_of(&ds).unwrap()).unwrap()
}

#[test]
fn frequency_weight_changes_the_trajectory() {
    let cfg = tiny_config();
    let tmp = tempfile::tempdir().unwrap();
    let set = prepared(&cfg, tmp.path());
    let net = FsaHeatNet::new(cfg.net.clone()).unwrap();
    let run = |alpha: f64| {
        let mut c = cfg.clone();
        c.loss.alpha = alpha;
        let mut snapshots = Vec::new();
        fit(&net, &c, &set, None, |_, p| {
            snapshots.push(p.clone());
            Ok(())
        })
        .unwrap();
        snapshots
    };
    let (spatial, hybrid) = (run(0.0), run(0.5));
    let first = spatial.iter().zip(&hybrid).position(|(a, b)| a != b);
    eprintln!("trajectories first differ after epoch {:?}", first.map(|i| i + 1));
    assert_eq!(first, Some(0));
    // a network without the frequency loss ignores alpha
    let mut off = cfg.clone();
    off.net.freq_loss = false;
    assert_eq!(off.loss_weights().alpha, 0.0);
}

#[test]
fn non_finite_loss_names_the_batch_seed() {
    let mut cfg = tiny_config();
    cfg.optim.lr = 1e300;
    cfg.optim.lr_min = 1e300;
    cfg.optim.epochs = 4;
    let tmp = tempfile::tempdir().unwrap();
    let set = prepared(&cfg, tmp.path());
    let net = FsaHeatNet::new(cfg.net.clone()).unwrap();
    match fit(&net, &cfg, &set, None, |_, _| Ok(())) {
        Err(Error::NonFiniteLoss { epoch, batch_seed }) => {
            assert!(epoch >= 1);
            assert!(set.seeds.contains(&batch_seed));
        }
        other => panic!("expected a non-finite loss, got {:?}", other.map(|r| r.log)),
    }
}

#[test]
fn evaluation_reports_and_baseline() {
    let cfg = tiny_config();
    let run = tempfile::tempdir().unwrap();
    let s = train(&cfg, run.path()).unwrap();
    let report = evaluate(&s.best_checkpoint, Protocol::KPlus50, &cfg, run.path()).unwrap();
    assert_eq!(report.sample_count, cfg.data.n_test);
    assert_eq!(report.split, TEST_SPLIT);
    assert_eq!(report.per_layer.len(), 4);
    assert_eq!(report.protocol, "k+50");
    let written: serde_json::Value =
        serde_json::from_slice(&fs::read(run.path().join("report_k+50.json")).unwrap()).unwrap();
    assert_eq!(written["dataset_digest"], report.dataset_digest.as_str());
    let csv = fs::read_to_string(run.path().join("metrics_k+50.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * cfg.data.n_test);

    // constant-mean predictor: its RMSE is the standard deviation of the set
    let ds = Dataset::open(&run.path().join("data").join("k+50")).unwrap();
    assert_eq!(ds.manifest.data_digest, report.dataset_digest);
    let theta_max = report.theta_max;
    let all: Vec<f64> = ds.samples.iter().flat_map(|s| s.target.data().iter().map(|v| v / theta_max)).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    assert!((report.baseline_rmse - std).abs() <= 1e-12 * std);

    // the set regenerates byte-identically from the recorded seeds
    let again = tempfile::tempdir().unwrap();
    let spec = Protocol::KPlus50.dataset_spec(&cfg.dataset).unwrap();
    let m = build_dataset(&spec, report.sample_count, report.master_seed, &report.split, again.path(), 1).unwrap();
    assert_eq!(m.data_digest, report.dataset_digest);
    assert_eq!(m.samples.iter().map(|s| s.seed).collect::<Vec<_>>(), report.seeds);

    // ensure_dataset reuses the matching set and rebuilds a stale one
    let dir = run.path().join("data").join("k+50");
    let reused = ensure_dataset(&spec, report.sample_count, report.master_seed, TEST_SPLIT, &dir, 1).unwrap();
    assert_eq!(reused.manifest.data_digest, report.dataset_digest);
    let other = ensure_dataset(&spec, 2, report.master_seed, TEST_SPLIT, &dir, 1).unwrap();
    assert_eq!(other.len(), 2);
}

#[test]
fn mismatched_checkpoint_config_is_refused() {
    let cfg = tiny_config();
    let run = tempfile::tempdir().unwrap();
    let s = train(&cfg, run.path()).unwrap();
    let mut other = cfg.clone();
    other.net.ffn_ratio = 3;
    match evaluate(&s.best_checkpoint, Protocol::InDist, &other, run.path()) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("config hash mismatch"), "{msg}"),
        r => panic!("expected refusal, got {:?}", r.map(|r| r.protocol)),
    }
    let grid = cfg.clone().with_grid(24);
    assert!(evaluate(&s.best_checkpoint, Protocol::InDist, &grid, run.path()).is_err());

    // a checkpoint whose archive was swapped fails its digest check
    fs::copy(run.path().join(LAST_CHECKPOINT), run.path().join(BEST_CHECKPOINT)).unwrap();
    let best_json: serde_json::Value =
        serde_json::from_slice(&fs::read(run.path().join("best.json")).unwrap()).unwrap();
    let last_json: serde_json::Value =
        serde_json::from_slice(&fs::read(run.path().join("last.json")).unwrap()).unwrap();
    if best_json["archive_digest"] != last_json["archive_digest"] {
        assert!(Checkpoint::load(&s.best_checkpoint, None).is_err());
    }
}

#[test]
fn evaluating_a_trained_checkpoint_on_its_training_set() {
    let mut cfg = tiny_config();
    cfg.optim.epochs = 3;
    let run = tempfile::tempdir().unwrap();
    let s = train(&cfg, run.path()).unwrap();
    let ds = Dataset::open(&s.dataset_dir).unwrap();
    let ckpt = Checkpoint::load(&s.best_checkpoint, None).unwrap();
    let (report, rows) = evaluate_dataset(&ckpt, &ds, "train-set").unwrap();
    assert_eq!(rows.len(), 4 * ds.len());
    // the held-out part of this set is the validation set; its RMSE must
    // reproduce the logged value
    let val = Dataset { samples: ds.samples[4..].to_vec(), manifest: ds.manifest.clone() };
    let (vr, _) = evaluate_dataset(&ckpt, &val, "val").unwrap();
    assert!((vr.aggregate.rmse - s.best_val_rmse.unwrap()).abs() <= 1e-12);
    assert!(report.aggregate.rmse.is_finite());
}

#[test]
fn ablation_audits_pass_exactly() {
    let cfg = tiny_config();
    let full: Vec<String> = FsaHeatNet::new(cfg.net.clone()).unwrap().param_specs().into_iter().map(|s| s.name).collect();
    for v in Variant::ALL {
        let a = audit(&cfg, v).unwrap();
        assert!(a.passed, "{v}: {a:?}");
        assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        let mut expected: Vec<&String> = full.iter().filter(|n| v.removes(n)).collect();
        expected.sort();
        let mut removed: Vec<&String> = a.removed.iter().collect();
        removed.sort();
        assert_eq!(removed, expected);
    }
    let plain = audit(&cfg, Variant::PlainCnn).unwrap();
    let net = FsaHeatNet::new(Variant::PlainCnn.apply(&cfg.net)).unwrap();
    assert!(net.param_specs().iter().all(|s| !s.name.starts_with("fci.") && !s.name.contains(".freq.")));
    assert_eq!(plain.loss_alpha, 0.0);
    assert!(audit(&cfg, Variant::NoFci).unwrap().removed.iter().all(|n| n.starts_with("fci.")));
    assert!(!audit(&cfg, Variant::NoSpatial).unwrap().removed.is_empty());
    assert!(audit(&cfg, Variant::SpatialLoss).unwrap().removed.is_empty());
}

#[test]
fn prediction_exports_fields_and_handles_zero_power() {
    let cfg = tiny_config();
    let run = tempfile::tempdir().unwrap();
    let s = train(&cfg, run.path()).unwrap();
    let out = run.path().join("pred");
    let p = predict(&s.best_checkpoint, Some(&cfg.net), &cfg.dataset, &PredictInput::Seed(5), &out).unwrap();
    let cells = 4 * 16 * 16;
    for (file, header) in [("temperature.csv", TEMPERATURE_CSV_HEADER), ("gradient.csv", GRADIENT_CSV_HEADER)] {
        let text = fs::read_to_string(out.join(file)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(header));
        assert_eq!(lines.count(), cells);
    }
    assert!(p.summary.max_abs_error.is_finite());
    assert!(out.join("prediction.json").exists());

    let zero = LayoutSpec { seed: 0, rows: 16, cols: 16, sources: Vec::new() };
    let z = predict(&s.best_checkpoint, None, &cfg.dataset, &PredictInput::Layout(zero), &out).unwrap();
    assert!(z.oracle.data().iter().all(|&v| v == 0.0));
    let text = fs::read_to_string(out.join("temperature.csv")).unwrap();
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v[4], 0.0);
        assert_eq!(v[5], v[3].abs());
    }

    let wrong = LayoutSpec { seed: 0, rows: 24, cols: 24, sources: Vec::new() };
    let err = predict(&s.best_checkpoint, None, &cfg.dataset, &PredictInput::Layout(wrong), &out);
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
    let other_grid = cfg.clone().with_grid(24);
    assert!(predict(&s.best_checkpoint, None, &other_grid.dataset, &PredictInput::Seed(1), &out).is_err());
}
