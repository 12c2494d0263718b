use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tica_cli::manifest::{write_matrix_artifact, Manifest};
use tica_cli::run::{fit_dir, fit_status, test_sources, Method};
use tica_core::matrix::decode_bin;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), config).unwrap();
        Workspace { dir }
    }

    fn run_dir(&self) -> PathBuf {
        self.dir.path().join("run")
    }

    fn tica(&self, command: &str, extra: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tica"));
        cmd.arg(command)
            .arg("--config")
            .arg(self.dir.path().join("config.json"))
            .arg("--out")
            .arg(self.run_dir())
            .args(extra);
        if !extra.contains(&"--threads") {
            cmd.args(["--threads", "2"]);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, command: &str, extra: &[&str]) {
        let out = self.tica(command, extra);
        assert!(
            out.status.success(),
            "{command} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.run_dir().join(rel)).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

const SMALL_A: &str = r#"{"sim":"A","n_train":3,"n_test":2,"t_train":60,"t_test":200,"seed":5}"#;

#[test]
fn simulate_writes_cohort_with_checksums() {
    let ws = Workspace::new(SMALL_A);
    ws.ok("simulate", &[]);
    let manifest = Manifest::load(&ws.run_dir()).unwrap();
    for i in 0..2 {
        let scan = decode_bin(&manifest.verify(&ws.run_dir(), &format!("test/subject_{i:03}/session_1.bin")).unwrap()).unwrap();
        assert_eq!(scan.shape(), (200, 2530));
    }
    assert!(manifest.contains("train/subject_002/scan.bin"));
    assert!(!manifest.contains("train/subject_003/scan.bin"));
    assert!(manifest.contains("truth/template/mean.bin"));
}

#[test]
fn simulate_is_deterministic_and_seed_sensitive() {
    let a = Workspace::new(SMALL_A);
    let b = Workspace::new(SMALL_A);
    a.ok("simulate", &[]);
    b.ok("simulate", &[]);
    assert_eq!(a.read("manifest.json"), b.read("manifest.json"));
    let c = Workspace::new(SMALL_A);
    c.ok("simulate", &["--seed", "6"]);
    assert_ne!(a.read("manifest.json"), c.read("manifest.json"));
}

#[test]
fn invalid_sim_is_a_config_error_naming_the_field() {
    let ws = Workspace::new(r#"{"sim":"Q","n_train":0,"n_test":2,"t_train":0,"t_test":200}"#);
    let out = ws.tica("simulate", &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("sim"), "{}", stderr(&out));
    assert!(!ws.run_dir().exists());
}

#[test]
fn unreadable_config_is_a_config_error() {
    let ws = Workspace::new("{");
    assert_eq!(code(&ws.tica("simulate", &[])), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_tica"))
        .args(["fit", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn single_subject_cohort_is_degenerate() {
    let ws = Workspace::new(r#"{"sim":"A","n_train":1,"n_test":1,"t_train":60,"t_test":60}"#);
    ws.ok("simulate", &[]);
    let out = ws.tica("build-template", &[]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn build_template_is_reproducible() {
    let ws = Workspace::new(SMALL_A);
    ws.ok("simulate", &[]);
    ws.ok("build-template", &[]);
    let first = Manifest::load(&ws.run_dir()).unwrap();
    ws.ok("build-template", &["--threads", "1"]);
    let second = Manifest::load(&ws.run_dir()).unwrap();
    assert_eq!(first, second);
    assert_eq!(column(&ws.read("template_summary.csv"), "component"), ["1", "2", "3"]);
}

#[test]
fn exact_with_too_many_nuisance_sources_is_refused() {
    let ws = Workspace::new(r#"{"sim":"A","n_train":0,"n_test":1,"t_train":0,"t_test":60,"q_prime_policy":15}"#);
    ws.ok("simulate", &[]);
    let out = ws.tica("fit", &["--method", "exact"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("14348907"), "{}", stderr(&out));
    assert!(!ws.run_dir().join("fits").exists());
}

#[test]
fn fit_outputs_are_deterministic_across_thread_counts() {
    let ws = Workspace::new(SMALL_A);
    ws.ok("simulate", &[]);
    ws.ok("fit", &["--method", "fast", "--threads", "1"]);
    let first = Manifest::load(&ws.run_dir()).unwrap();
    ws.ok("fit", &["--method", "fast", "--threads", "2"]);
    assert_eq!(first, Manifest::load(&ws.run_dir()).unwrap());
    assert!(!first.contains("fits/fast/timing.csv"));
    let timing = ws.read("fits/fast/timing.csv");
    assert!(timing.starts_with("subject,session,nuisance_s,em_s,reestimate_s,total_s"));
    assert_eq!(timing.lines().count(), 3);
}

#[test]
fn dual_regression_writes_only_maps() {
    let ws = Workspace::new(SMALL_A);
    ws.ok("simulate", &[]);
    ws.ok("fit", &["--method", "dual_regression"]);
    let dir = ws.run_dir().join("fits/dual_regression/subject_000/session_1");
    let names: Vec<String> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names, ["sources.bin"]);
    let maps = decode_bin(&fs::read(dir.join("sources.bin")).unwrap()).unwrap();
    assert_eq!(maps.shape(), (3, 2530));
}

#[test]
fn fit_with_a_mismatched_config_is_refused() {
    let ws = Workspace::new(SMALL_A);
    ws.ok("simulate", &[]);
    let out = ws.tica("fit", &["--seed", "99"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("seed"));
}

#[test]
fn evaluate_without_fits_reports_missing_path() {
    let ws = Workspace::new(SMALL_A);
    ws.ok("simulate", &[]);
    let out = ws.tica("evaluate", &[]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("fits"), "{}", stderr(&out));
    let out = ws.tica("evaluate", &["--method", "exact"]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("fits/exact/status.csv"), "{}", stderr(&out));
}

/// Replaces the dual regression maps with a given function of the truth and
/// re-records them.
fn plant_estimates(root: &Path, sessions: usize, make: impl Fn(usize, usize) -> tica_core::Matrix) {
    let mut manifest = Manifest::load(root).unwrap();
    for rel in manifest.artifacts.keys().filter(|k| k.ends_with("sources.bin") && k.starts_with("fits/")).cloned().collect::<Vec<_>>() {
        let parts: Vec<&str> = rel.split('/').collect();
        let subject: usize = parts[2].trim_start_matches("subject_").parse().unwrap();
        let session: usize = parts[3].trim_start_matches("session_").parse().unwrap();
        assert!(session <= sessions);
        let (rel, digest) = write_matrix_artifact(root, &rel, &make(subject, session)).unwrap();
        manifest.insert(rel, digest);
    }
    manifest.save(root).unwrap();
}

#[test]
fn perfect_estimates_score_one() {
    let ws = Workspace::new(SMALL_A);
    ws.ok("simulate", &[]);
    ws.ok("fit", &["--method", "dual_regression"]);
    let root = ws.run_dir();
    let manifest = Manifest::load(&root).unwrap();
    let truths: Vec<_> = (0..2).map(|i| manifest.verify_matrix(&root, &test_sources(i)).unwrap()).collect();
    plant_estimates(&root, 1, |i, _| &truths[i] * 2.5);
    ws.ok("evaluate", &[]);
    let corr = column(&ws.read("eval/correlation.csv"), "corr");
    assert_eq!(corr.len(), 6);
    assert!(corr.iter().all(|c| (c.parse::<f64>().unwrap() - 1.0).abs() < 1e-12), "{corr:?}");
    let mse = column(&ws.read("eval/summary.csv"), "mean_mse");
    assert!(mse.iter().all(|m| m.parse::<f64>().unwrap() < 1e-20), "{mse:?}");
}

#[test]
fn duplicated_sessions_are_perfectly_reliable() {
    let ws = Workspace::new(r#"{"sim":"B","n_train":0,"n_test":4,"t_train":0,"t_test":60,"reliability":true,"mc_draws":50}"#);
    ws.ok("simulate", &[]);
    ws.ok("fit", &["--method", "dual_regression"]);
    let root = ws.run_dir();
    let manifest = Manifest::load(&root).unwrap();
    let first: Vec<_> = (0..4)
        .map(|i| manifest.verify_matrix(&root, &format!("{}/sources.bin", fit_dir(Method::DualRegression, i, 1))).unwrap())
        .collect();
    plant_estimates(&root, 2, |i, _| first[i].clone());
    ws.ok("evaluate", &[]);
    let w = column(&ws.read("eval/summary.csv"), "wi2c2");
    assert_eq!(w.len(), 3);
    assert!(w.iter().all(|x| (x.parse::<f64>().unwrap() - 1.0).abs() < 1e-12), "{w:?}");
}

#[test]
fn evaluate_refuses_tampered_fits() {
    let ws = Workspace::new(SMALL_A);
    ws.ok("simulate", &[]);
    ws.ok("fit", &["--method", "dual_regression"]);
    let path = ws.run_dir().join(format!("{}/sources.bin", fit_dir(Method::DualRegression, 1, 1)));
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    let out = ws.tica("evaluate", &[]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("checksum"), "{}", stderr(&out));
}

#[test]
fn failed_subjects_are_isolated() {
    let ws = Workspace::new(SMALL_A);
    ws.ok("simulate", &[]);
    // A constant scan cannot be centred and scaled; the other subject still fits.
    let root = ws.run_dir();
    let mut manifest = Manifest::load(&root).unwrap();
    let (rel, digest) = write_matrix_artifact(&root, "test/subject_000/session_1.bin", &tica_core::Matrix::from_element(200, 2530, 1.0)).unwrap();
    manifest.insert(rel, digest);
    manifest.save(&root).unwrap();
    ws.ok("fit", &["--method", "fast"]);
    assert_eq!(column(&ws.read(&fit_status(Method::Fast)), "ok"), ["false", "true"]);
    ws.ok("evaluate", &[]);
    assert_eq!(column(&ws.read("eval/correlation.csv"), "subject"), ["1", "1", "1"]);
    assert_eq!(column(&ws.read("eval/qprime.csv"), "subjects"), ["1"]);
}

#[test]
fn manifest_fuzz_seeds_are_judged() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus/manifest");
    let mut verdicts: Vec<(String, bool)> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            let text = fs::read_to_string(&path).unwrap();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            (name, tica_cli::manifest::parse_manifest(&text).is_ok())
        })
        .collect();
    verdicts.sort();
    assert_eq!(
        verdicts,
        [("escape".to_string(), false), ("short_digest".to_string(), false), ("valid".to_string(), true)]
    );
}
