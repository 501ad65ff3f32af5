use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn sta(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sta"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("STA_TRAIN")
        .env_remove("STA_DEV")
        .env_remove("STA_TEST")
        .env_remove("STA_BACKEND")
        .env_remove("STA_OUT")
        .output()
        .unwrap()
}

/// Writes a config next to the fixtures' absolute paths.
fn config(dir: &Path, body: &str) -> PathBuf {
    let f = fixtures();
    let text = format!(
        "train = {:?}\ndev = {:?}\ntest = {:?}\nmeta = {:?}\n{body}",
        f.join("train.jsonl"),
        f.join("dev.jsonl"),
        f.join("test.jsonl"),
        f.join("meta.json"),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn convert_prints_counts_per_template() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "shots = [5]\nseeds = [1]\n");
    let out = sta(&["convert"], &cfg, &tmp.path().join("out"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    for t in ["c1\t10", "c2\t10", "c3\t10", "g1\t10", "g2\t10", "total\t50"] {
        assert!(stdout.contains(t), "missing {t:?} in {stdout}");
    }
    assert_eq!(lines(&tmp.path().join("out/k5/seed1/pairs-full.jsonl")), 50);

    let out = Command::new(env!("CARGO_BIN_EXE_sta"))
        .args(["convert", "--family", "two-prompt", "--out"])
        .arg(tmp.path().join("two"))
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("total\t20"));
}

#[test]
fn augment_sizes_per_method() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        "shots = [5]\nseeds = [3]\nbetas = [1, 3]\nmethods = [\"sta\", \"eda\", \"none\"]\n[finetune]\nepochs = 2\n",
    );
    let out_dir = tmp.path().join("out");
    let out = sta(&["augment"], &cfg, &out_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let unit = out_dir.join("k5/seed3");
    // 5 per class, 2 classes, beta 3.
    assert_eq!(lines(&unit.join("sta/dstar.jsonl")), 30);
    assert_eq!(lines(&unit.join("sta/beta1.jsonl")), 10);
    assert_eq!(lines(&unit.join("sta/candidates.jsonl")), 150);
    assert_eq!(lines(&unit.join("eda/dstar.jsonl")), 30);
    assert_eq!(lines(&unit.join("none/dstar.jsonl")), 0);
    let dstar = std::fs::read_to_string(unit.join("sta/dstar.jsonl")).unwrap();
    assert!(dstar.lines().all(|l| l.contains("\"provenance\":\"generated\"")));
    assert!(unit.join("finetune-full.json").exists());
}

#[test]
fn single_seed_report_has_zero_std() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "shots = [5, 10]\nseeds = [1]\nmethods = [\"none\", \"eda\"]\nclassifier = \"memorize\"\n");
    let out_dir = tmp.path().join("out");
    let out = sta(&["pipeline"], &cfg, &out_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = sta::eval::RunReport::read(&out_dir.join("report.jsonl")).unwrap();
    assert_eq!(report.aggregates.len(), 4);
    assert!(report.aggregates.iter().all(|r| r.std == 0.0 && r.n_seeds == 1));
    assert_eq!(lines(&out_dir.join("scatter.jsonl")), 4);
}

#[test]
fn evaluate_reuses_augment_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "shots = [5]\nseeds = [1, 2]\nmethods = [\"eda\"]\nbetas = [1, 2]\n");
    let out_dir = tmp.path().join("out");
    let early = sta(&["evaluate"], &cfg, &out_dir);
    assert_eq!(early.status.code(), Some(2), "evaluate before augment is a usage error");
    assert!(sta(&["augment"], &cfg, &out_dir).status.success());
    let out = sta(&["evaluate"], &cfg, &out_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("method"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    for body in [
        "methods = [\"magic\"]\n",
        "seeds = []\n",
        "methods = []\n",
        "betas = [1, 2]\ndev = \"/nowhere/dev.jsonl\"\n",
        "backend = \"gpu\"\n",
        "methods = [\"external\"]\n",
    ] {
        let cfg = config(tmp.path(), body);
        let out = sta(&["augment"], &cfg, &out_dir);
        assert_eq!(out.status.code(), Some(2), "config {body:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let missing = sta(&["pipeline"], Path::new("/nowhere/config.toml"), &out_dir);
    assert_eq!(missing.status.code(), Some(2));
    let bad_flag = Command::new(env!("CARGO_BIN_EXE_sta")).args(["pipeline", "--bogus"]).output().unwrap();
    assert_eq!(bad_flag.status.code(), Some(2));
}

#[test]
fn missing_dev_with_several_betas_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixtures();
    let path = tmp.path().join("nodev.toml");
    std::fs::write(
        &path,
        format!(
            "train = {:?}\ntest = {:?}\nmeta = {:?}\nbetas = [1, 2]\nmethods = [\"eda\"]\n",
            f.join("train.jsonl"),
            f.join("test.jsonl"),
            f.join("meta.json")
        ),
    )
    .unwrap();
    let out = sta(&["pipeline"], &path, &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dev set required"));
}

#[test]
fn env_overrides_apply_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "seeds = [1]\n");
    let out = Command::new(env!("CARGO_BIN_EXE_sta"))
        .args(["convert", "--config"])
        .arg(&cfg)
        .env("STA_OUT", tmp.path().join("from-env"))
        .env("STA_TRAIN", "/nowhere/train.jsonl")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "STA_TRAIN must override the config");

    let out = Command::new(env!("CARGO_BIN_EXE_sta"))
        .args(["convert", "--config"])
        .arg(&cfg)
        .env("STA_OUT", tmp.path().join("from-env"))
        .env("STA_BACKEND", "mock")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("from-env/full/seed1/pairs-full.jsonl").exists());
}

#[test]
fn rerun_into_other_config_dir_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = config(tmp.path(), "seeds = [1]\n");
    assert!(sta(&["convert"], &cfg, &out_dir).status.success());
    // Same config resumes.
    assert!(sta(&["convert"], &cfg, &out_dir).status.success());
    let cfg = config(tmp.path(), "seeds = [2]\n");
    assert_eq!(sta(&["convert"], &cfg, &out_dir).status.code(), Some(2));
}

#[test]
fn inputs_are_not_modified() {
    let tmp = tempfile::tempdir().unwrap();
    let before = std::fs::read(fixtures().join("train.jsonl")).unwrap();
    let cfg = config(tmp.path(), "shots = [5]\nseeds = [1]\nmethods = [\"sta\"]\n[finetune]\nepochs = 1\n");
    assert!(sta(&["pipeline"], &cfg, &tmp.path().join("out")).status.success());
    assert_eq!(std::fs::read(fixtures().join("train.jsonl")).unwrap(), before);
}
