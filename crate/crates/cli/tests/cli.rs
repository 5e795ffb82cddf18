use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sens(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sens"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run_dir(o: &Output) -> PathBuf {
    let line = stdout(o)
        .lines()
        .find(|l| l.starts_with("run directory: "))
        .map(str::to_owned);
    PathBuf::from(
        line.expect("run directory printed")
            .trim_start_matches("run directory: "),
    )
}

const TINY: &[&str] = &[
    "--experiment",
    "synthetic-sweep",
    "--hidden",
    "1,4",
    "--trials",
    "2",
    "--epochs",
    "1",
    "--seed",
    "5",
];

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "experiment = \"synthetic-sweep\"\ntrials = 2\n[dataset]\nkind = \"synthetic\"\nstds = [1.0]\nsizes = [100]\n",
    )
    .unwrap();
    path
}

#[test]
fn committed_configs_resolve() {
    let tmp = tempfile::tempdir().unwrap();
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let o = sens(&["config", "-c", path.to_str().unwrap()], tmp.path());
        assert!(
            o.status.success(),
            "{}: {}",
            path.display(),
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(stdout(&o).contains("[train]"));
        seen += 1;
    }
    assert!(seen >= 6);
}

#[test]
fn run_then_replay_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let mut args = vec!["run", "-c", cfg.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let o = sens(&args, tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = tmp.path().join(run_dir(&o));
    assert!(dir.starts_with(tmp.path().join("runs/synthetic-sweep")));
    assert!(dir.join("manifest.json").is_file());
    assert!(dir.join("summary.csv").is_file());

    let r = sens(&["replay", dir.to_str().unwrap()], tmp.path());
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(stdout(&r).contains("reproduced exactly"));

    // a tampered manifest no longer replays cleanly
    let manifest = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["files"][0]["sha256"] = "00".into();
    std::fs::write(&manifest, json.to_string()).unwrap();
    assert_eq!(
        sens(&["replay", manifest.to_str().unwrap()], tmp.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| sens(args, tmp.path()).status.code();

    assert_eq!(code(&["run"]), Some(1));
    assert_eq!(code(&["run", "--experiment", "nope"]), Some(1));
    assert_eq!(
        code(&["run", "--experiment", "ova-binary", "--lr", "5"]),
        Some(1)
    );
    assert_eq!(code(&["run", "-c", "missing.toml"]), Some(2));
    assert_eq!(
        code(&["run", "--experiment", "ova-binary", "--dataset", "mnist"]),
        Some(2)
    );

    // features near f64::MAX overflow the first layer: every trial diverges
    let cfg = tmp.path().join("overflow.toml");
    std::fs::write(
        &cfg,
        "experiment = \"synthetic-sweep\"\ntrials = 2\nhidden = [2]\n[dataset]\nkind = \"synthetic\"\nstds = [1.0]\nsizes = [50]\nbias = 1e308\n[train]\nepochs = 1\n",
    )
    .unwrap();
    let o = sens(&["run", "-c", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}
