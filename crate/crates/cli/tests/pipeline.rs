use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
synth.counties=4
synth.days=120
split.val_days=15
split.test_days=15
model.d_model=8
model.heads=2
train.max_epochs=2
train.windows_per_epoch=64
train.batch_size=16
morris.deltas=0.001,0.005
";

fn stsens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stsens"))
        .args(args)
        .env("STSENS_THREADS", "2")
        .output()
        .expect("spawn stsens")
}

fn ok(args: &[&str]) -> PathBuf {
    let out = stsens(args);
    assert!(
        out.status.success(),
        "stsens {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

struct Runs {
    evaluate: PathBuf,
    morris: PathBuf,
    attention: PathBuf,
}

fn pipeline(root: &Path) -> Runs {
    fs::create_dir_all(root).unwrap();
    let cfg = root.join("run.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let out = root.join("runs");
    let base = |extra: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = [
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "3",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let call = |cmd: &str, extra: &[&str]| {
        let mut a = vec![cmd.to_string()];
        a.extend(base(extra));
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        ok(&refs)
    };
    let synth = call("synth", &[]);
    let data = synth.join("panel");
    let data = data.to_str().unwrap();
    let prep = call("prepare", &["--data", data]);
    assert!(prep.join("scaled/static.csv").is_file());
    assert!(prep.join("scaler.csv").is_file());
    let train = call("train", &["--data", data]);
    let ck = train.join("checkpoint.bin");
    assert!(ck.is_file());
    let ck = ck.to_str().unwrap();
    let evaluate = call("evaluate", &["--data", data, "--checkpoint", ck]);
    let morris = call(
        "morris",
        &[
            "--data",
            data,
            "--checkpoint",
            ck,
            "--feature",
            "obs_0",
            "--feature",
            "static_0",
        ],
    );
    let attention = call("attention", &["--data", data, "--checkpoint", ck]);
    Runs {
        evaluate,
        morris,
        attention,
    }
}

#[test]
fn end_to_end_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = pipeline(&tmp.path().join("a"));
    let b = pipeline(&tmp.path().join("b"));

    let name = a.evaluate.file_name().unwrap().to_str().unwrap();
    assert!(name.starts_with("evaluate-") && name.ends_with("-3"), "{name}");
    let manifest = fs::read_to_string(a.evaluate.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed=3") && manifest.contains("[config]"));

    let metrics = fs::read_to_string(a.evaluate.join("metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("tft,cases,")));
    assert!(metrics.lines().any(|l| l.starts_with("persistence,cases,")));
    let morris = fs::read_to_string(a.morris.join("morris.csv")).unwrap();
    assert_eq!(morris.lines().count(), 1 + 2 * 2);
    for f in [
        "attention_mean.csv",
        "lag_profile.csv",
        "daily_attention.csv",
        "importance.csv",
        "holidays.txt",
    ] {
        assert!(a.attention.join(f).is_file(), "{f}");
    }

    for (x, y, f) in [
        (&a.evaluate, &b.evaluate, "metrics.csv"),
        (&a.evaluate, &b.evaluate, "metrics.json"),
        (&a.morris, &b.morris, "morris.csv"),
        (&a.attention, &b.attention, "attention_mean.csv"),
        (&a.attention, &b.attention, "lag_profile.csv"),
        (&a.attention, &b.attention, "daily_attention.csv"),
        (&a.attention, &b.attention, "importance.csv"),
    ] {
        assert_eq!(
            fs::read(x.join(f)).unwrap(),
            fs::read(y.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn evaluate_without_checkpoint_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let r = stsens(&["evaluate", "--out", out]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("checkpoint"));
    let missing = tmp.path().join("nope.bin");
    let r = stsens(&["evaluate", "--out", out, "--checkpoint", missing.to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("not found"));
}

#[test]
fn invalid_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "train.learnig_rate=0.1\n").unwrap();
    let r = stsens(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("train.learnig_rate"));
}
