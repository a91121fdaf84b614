use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn iseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iseg"))
        .args(args)
        .env("ISEG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_small(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let o = iseg(&["gen-data", "--scenes", "4", "--rigs", "2", "--classes", "4", "--size", "32x32", "--seed", "3", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn train_small(data: &Path, out: &Path, experiment: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--experiment", experiment, "--data", p(data), "--out", p(out), "--epochs", "1", "--batch-size", "2"];
    args.extend_from_slice(extra);
    iseg(&args)
}

fn snapshot(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots").join(format!("{name}.txt"));
    if std::env::var_os("UPDATE_SNAPSHOTS").is_some() {
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing snapshot {}", path.display()));
    assert_eq!(actual, expected, "help text for {name} changed; rerun with UPDATE_SNAPSHOTS=1 to accept");
}

#[test]
fn help_snapshots() {
    snapshot("main", &stdout(&iseg(&["--help"])));
    for sub in ["gen-data", "train", "eval", "compare", "report"] {
        let o = iseg(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        snapshot(sub, &stdout(&o));
    }
}

#[test]
fn help_lists_defaults() {
    let gen = stdout(&iseg(&["gen-data", "--help"]));
    for d in ["[default: 40]", "[default: 5]", "[default: 8]", "[default: 96x128]", "[default: 1]"] {
        assert!(gen.contains(d), "{d}");
    }
    let train = stdout(&iseg(&["train", "--help"]));
    assert!(train.contains("[default: 0.01]"));
    assert!(train.contains("Precedence"));
}

#[test]
fn gen_data_minimal_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let o = iseg(&["gen-data", "--scenes", "2", "--rigs", "1", "--size", "16x16", "--out", p(d)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("wrote 2 samples"), "{}", stdout(&o));
        assert!(stdout(&o).contains("train 1, test 1"));
    }
    for name in ["manifest.txt", "samples/00000.iseg", "samples/00001.iseg"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn gen_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&iseg(&["gen-data", "--scenes", "1", "--out", p(&out)])), 2);
    assert_eq!(code(&iseg(&["gen-data", "--size", "big", "--out", p(&out)])), 2);
    assert_eq!(code(&iseg(&["gen-data", "--bogus", "--out", p(&out)])), 2);
    let file = tmp.path().join("file");
    fs::write(&file, b"x").unwrap();
    let o = iseg(&["gen-data", "--scenes", "2", "--rigs", "1", "--size", "16x16", "--out", p(&file.join("sub"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn train_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(tmp.path());
    let out = tmp.path().join("run");
    let o = train_small(&data, &out, "triple", &[]);
    assert_eq!(code(&o), 2);
    for name in ["single_intrinsics", "single_segmentation", "cascade_albedo_to_seg", "cascade_seg_to_intrinsics", "joint"] {
        assert!(stderr(&o).contains(name), "{}", stderr(&o));
    }
    assert_eq!(code(&iseg(&["train", "--experiment", "joint", "--data", p(&data), "--out", p(&out)])), 2);
    assert_eq!(code(&train_small(&data, &out, "joint", &["--set", "nonsense=1"])), 2);
    assert_eq!(code(&train_small(&data, &out, "joint", &["--batch-size", "1"])), 2);
    assert_eq!(code(&train_small(&tmp.path().join("missing"), &out, "joint", &[])), 4);

    let odd = tmp.path().join("odd");
    let o = iseg(&["gen-data", "--scenes", "2", "--rigs", "2", "--size", "20x20", "--out", p(&odd)]);
    assert_eq!(code(&o), 0);
    let o = train_small(&odd, &out, "joint", &[]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(tmp.path());
    let cfg = tmp.path().join("cfg.txt");
    fs::write(&cfg, "experiment=single_segmentation\nepochs=0\nlr=0.5\nseed=9\n").unwrap();
    let out = tmp.path().join("run");
    let o = iseg(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--lr", "0.25", "--batch-size", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let written = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(written.contains("lr=0.25\n"));
    assert!(written.contains("seed=9\n"));
    assert!(written.contains("epochs=0\n"));
    assert!(written.contains("experiment=single_segmentation\n"));
}

#[test]
fn joint_run_eval_compare_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(tmp.path());
    let run = tmp.path().join("joint");
    let o = train_small(&data, &run, "joint", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("epoch 1/1 total="), "{out}");
    assert!(out.contains("ce_term=") && out.contains("intrinsic_term="));
    for f in ["model.isnn", "config.txt", "run.txt", "run.kv", "eval.txt", "eval.kv", "confusion.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let ckpt = run.join("model.isnn");
    let e1 = iseg(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)]);
    assert_eq!(code(&e1), 0, "{}", stderr(&e1));
    let e2 = iseg(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "test"]);
    assert_eq!(stdout(&e1), stdout(&e2));
    let tr = iseg(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "train"]);
    assert_eq!(code(&tr), 0);
    assert_ne!(stdout(&tr), stdout(&e1));

    let cmp = iseg(&["compare", "--runs", p(&run)]);
    assert_eq!(code(&cmp), 0, "{}", stderr(&cmp));
    assert!(!stdout(&cmp).contains('Δ'));
    assert!(stdout(&cmp).contains("IoU ground"));

    let rep = tmp.path().join("rep");
    let r = iseg(&["report", "--run", p(&run), "--out", p(&rep)]);
    assert_eq!(code(&r), 0);
    assert!(!rep.join("loss_curves.ppm").exists());
    let r = iseg(&["report", "--run", p(&run), "--out", p(&rep), "--plots"]);
    assert_eq!(code(&r), 0);
    let ppm: Vec<_> = fs::read_dir(&rep)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "ppm"))
        .collect();
    assert!(ppm.len() >= 2);
    let first = fs::read(rep.join("loss_curves.ppm")).unwrap();
    iseg(&["report", "--run", p(&run), "--out", p(&rep), "--plots"]);
    assert_eq!(first, fs::read(rep.join("loss_curves.ppm")).unwrap());
}

#[test]
fn compare_two_segmentation_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(tmp.path());
    let rgb = tmp.path().join("rgb");
    let alb = tmp.path().join("albedo");
    assert_eq!(code(&train_small(&data, &rgb, "single_segmentation", &[])), 0);
    assert_eq!(code(&train_small(&data, &alb, "cascade_albedo_to_seg", &[])), 0);
    let out = tmp.path().join("cmp");
    let o = iseg(&["compare", "--runs", &format!("{},{}", p(&rgb), p(&alb)), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.lines().next().unwrap().contains('Δ'));
    assert!(table.contains("seg.miou"));
    assert!(out.join("compare.txt").exists());
    assert!(out.join("confusion_rgb.csv").exists());
    assert!(out.join("confusion_albedo.csv").exists());

    let intr = tmp.path().join("intr");
    assert_eq!(code(&train_small(&data, &intr, "single_intrinsics", &[])), 0);
    let o = iseg(&["compare", "--runs", &format!("{},{}", p(&rgb), p(&intr))]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&iseg(&["compare", "--runs", p(&tmp.path().join("nope"))])), 3);
}

#[test]
fn eval_oracle_and_conflicts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(tmp.path());
    let out = tmp.path().join("oracle");
    let o = iseg(&["eval", "--oracle", "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let kv = fs::read_to_string(out.join("eval.kv")).unwrap();
    for line in kv.lines() {
        let (k, v) = line.split_once('=').unwrap();
        if k.ends_with(".mean") || k.ends_with(".std") {
            assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{line}");
        } else if k.starts_with("seg.") && v != "na" {
            assert_eq!(v.parse::<f64>().unwrap(), 1.0, "{line}");
        }
    }

    let o = iseg(&["eval", "--oracle", "--checkpoint", "x.isnn", "--data", p(&data)]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("--checkpoint") && err.contains("--oracle"), "{err}");
    assert_eq!(code(&iseg(&["eval", "--data", p(&data)])), 2);
    assert_eq!(code(&iseg(&["eval", "--oracle", "--data", p(&data), "--split", "val"])), 2);
}

#[test]
fn eval_checkpoint_mismatches() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(tmp.path());
    let bad = tmp.path().join("bad.isnn");
    fs::write(&bad, b"NOPE\x01garbage").unwrap();
    let o = iseg(&["eval", "--checkpoint", p(&bad), "--data", p(&data)]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(stderr(&o).contains("magic"));

    let other = tmp.path().join("other");
    let o = iseg(&["gen-data", "--scenes", "2", "--rigs", "2", "--classes", "3", "--size", "32x32", "--out", p(&other)]);
    assert_eq!(code(&o), 0);
    let run = tmp.path().join("run");
    let o = iseg(&["train", "--experiment", "single_segmentation", "--data", p(&other), "--out", p(&run), "--epochs", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = iseg(&["eval", "--checkpoint", p(&run.join("model.isnn")), "--data", p(&data)]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}
