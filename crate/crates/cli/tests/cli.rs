use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bmpsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmpsim")).args(args).output().expect("binary runs")
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

const SMALL_YULE: &str = r#"
[model]
kind = "yule"

[simulation]
x0 = 0
grid = [1, 2, 3]
extension = 6
replicas = 64
seed = 5
"#;

#[test]
fn list_and_describe() {
    let out = bmpsim(&["list"]);
    assert!(out.status.success());
    assert_eq!(text(&out.stdout).lines().count(), 3);

    let out = bmpsim(&["describe", "house_of_cards"]);
    assert!(out.status.success());
    let d = text(&out.stdout);
    assert!(d.contains("alpha(x) >= alpha(0)") && d.contains("int_0^1 dx / (alpha(x) - alpha(0)) > 1"));

    let out = bmpsim(&["describe", "ising"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("unknown model family"));
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let no_seed = dir.path().join("no_seed.cfg");
    fs::write(&no_seed, SMALL_YULE.replace("seed = 5", "")).unwrap();
    let out = bmpsim(&["run", "--config", no_seed.to_str().unwrap(), "--out", dir.path().join("a").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("seed required"));

    let bad_alpha = dir.path().join("bad_alpha.cfg");
    fs::write(&bad_alpha, "[model]\nkind = \"house_of_cards\"\nalpha = \"-x\"\n[simulation]\nx0 = 0.5\ngrid = [1]\nseed = 1\n").unwrap();
    let out = bmpsim(&["run", "--config", bad_alpha.to_str().unwrap(), "--out", dir.path().join("b").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("alpha"), "{}", text(&out.stderr));

    let good = dir.path().join("good.cfg");
    fs::write(&good, SMALL_YULE).unwrap();
    let out = bmpsim(&["run", "--config", good.to_str().unwrap(), "--replicas", "10"]);
    assert_eq!(out.status.code(), Some(2));
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn reruns_are_byte_identical_and_spot_checks_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("yule.cfg");
    fs::write(&cfg, SMALL_YULE).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let run = |out: &Path, threads: &str| {
        bmpsim(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", threads, "--dump-trajectories", "2"])
    };
    let ra = run(&a, "1");
    let rb = run(&b, "2");
    assert_ne!(ra.status.code(), Some(2), "{}", text(&ra.stderr));
    assert_eq!(ra.status.code(), rb.status.code());
    let fa = csv_files(&a);
    assert!(fa.len() >= 10, "{:?}", fa.iter().map(|f| &f.0).collect::<Vec<_>>());
    assert_eq!(fa, csv_files(&b));
    assert_eq!(fs::read(a.join("trajectories/replica_00001.tsv")).unwrap(), fs::read(b.join("trajectories/replica_00001.tsv")).unwrap());

    let out = bmpsim(&["spot-check", "--out", a.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stdout));
    assert!(text(&out.stdout).lines().all(|l| l.starts_with("ok")));
}

#[test]
fn bundled_hoc_small_reports_closed_form_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let out = bmpsim(&["run", "--config", bundled("hoc_small.cfg").to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--replicas", "64"]);
    assert_ne!(out.status.code(), Some(2), "{}", text(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    let lambda = summary["lambda"].as_f64().unwrap();
    assert!((lambda - 1.0 / (std::f64::consts::E - 1.0)).abs() < 1e-9);
    assert_eq!(summary["regime"]["kind"], "small");
}

#[test]
fn bundled_yule_variance_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = bmpsim(&["run", "--config", bundled("yule.cfg").to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--replicas", "500"]);
    assert_ne!(out.status.code(), Some(2), "{}", text(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    let h = summary["functions"].as_array().unwrap().iter().find(|f| f["name"] == "h").unwrap();
    let (s, se) = (h["sigma2"].as_f64().unwrap(), h["sigma2_se"].as_f64().unwrap());
    assert!((s - 1.0).abs() <= 3.0 * se, "{s} +- {se}");
    let verdicts = fs::read_to_string(dir.path().join("verdicts.csv")).unwrap();
    assert!(verdicts.lines().any(|l| l.starts_with("variance,h,pass")), "{verdicts}");
}
