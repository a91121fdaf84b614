//! End-to-end training behaviour on tiny generated datasets.

use std::fs;
use std::path::Path;

use iseg::nn::{Head, Network, ParamGroup};
use iseg::scenegen::Dataset;
use iseg::train::{run_experiment, train, Experiment, TrainConfig, CHECKPOINT_FILE, RUN_KV_FILE};

mod common;

fn dataset(dir: &Path, scenes: usize, rigs: usize, size: usize) -> Dataset {
    common::dataset(dir, scenes, rigs, size, size, 11)
}

fn small_cfg(exp: Experiment, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(exp, epochs);
    cfg.batch_size = 2;
    cfg.encoder_features = vec![8, 16];
    cfg
}

#[test]
fn overfits_four_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(tmp.path(), 5, 2, 32);
    for exp in [Experiment::SingleSegmentation, Experiment::SingleIntrinsics] {
        let mut cfg = TrainConfig::new(exp, 150);
        cfg.batch_size = 4;
        cfg.train_limit = 4;
        cfg.lr = 1.0;
        let run = train(&cfg, &ds).unwrap();
        let first = run.record.trace.first().unwrap().total;
        let last = run.record.trace.last().unwrap().total;
        assert!(last.is_finite() && first / last >= 10.0, "{}: {first} -> {last}", exp.name());
    }
}

#[test]
fn joint_breakdown_adds_up() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(tmp.path(), 3, 2, 32);
    let run = train(&small_cfg(Experiment::Joint, 2), &ds).unwrap();
    for e in &run.record.trace {
        assert!(e.total.is_finite() && e.ce_term.is_finite() && e.intrinsic_term.is_finite());
        assert!(e.breakdown_residual <= 1e-9 * e.total.abs().max(1.0), "{e:?}");
        assert!((e.ce_term + e.intrinsic_term - e.total).abs() <= 1e-12 * e.total.abs().max(1.0));
        assert!(e.ce_term > 0.0 && e.intrinsic_term > 0.0);
    }
}

#[test]
fn training_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("data"), 3, 2, 32);
    let mut cfg = small_cfg(Experiment::Joint, 2);
    cfg.seed = 4;
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_experiment(&cfg, &ds, &a).unwrap();
    run_experiment(&cfg, &ds, &b).unwrap();
    for f in [CHECKPOINT_FILE, RUN_KV_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    cfg.seed = 5;
    let c = tmp.path().join("c");
    run_experiment(&cfg, &ds, &c).unwrap();
    assert_ne!(fs::read(a.join(CHECKPOINT_FILE)).unwrap(), fs::read(c.join(CHECKPOINT_FILE)).unwrap());
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(tmp.path(), 2, 2, 32);
    let cfg = small_cfg(Experiment::Joint, 0);
    let run = train(&cfg, &ds).unwrap();
    assert!(run.record.trace.is_empty());
    let fresh = Network::new(cfg.network_spec(4), cfg.seed).unwrap();
    assert_eq!(run.network, fresh);
}

#[test]
fn frozen_groups_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("data"), 3, 2, 32);
    let base = small_cfg(Experiment::Joint, 1);
    let init = Network::new(base.network_spec(4), base.seed).unwrap();

    let mut cfg = base.clone();
    cfg.trainable_heads = Some(vec![Head::Segmentation]);
    cfg.train_encoder = false;
    let run = train(&cfg, &ds).unwrap();
    let mut seg_changed = false;
    for (p, q) in init.state.params().iter().zip(run.network.state.params()) {
        if p.group == ParamGroup::Head(Head::Segmentation) {
            seg_changed |= p.data != q.data;
        } else {
            assert_eq!(p.data, q.data, "{} moved while frozen", p.name);
        }
    }
    assert!(seg_changed);

    cfg.train_encoder = true;
    let run = train(&cfg, &ds).unwrap();
    let moved = |g: ParamGroup| {
        init.state
            .params()
            .iter()
            .zip(run.network.state.params())
            .any(|(p, q)| p.group == g && p.data != q.data)
    };
    assert!(moved(ParamGroup::Encoder));
    assert!(!moved(ParamGroup::Head(Head::Reflectance)));
    assert!(!moved(ParamGroup::Head(Head::Shading)));
}

#[test]
fn whole_network_gradient_matches_finite_differences() {
    let r = common::network_gradient_check();
    assert!(r.checked > 60 && r.kinks * 10 <= r.checked, "checked {}, kinks {}", r.checked, r.kinks);
    assert!(r.worst <= 1e-3, "worst relative error {:e}", r.worst);
}
