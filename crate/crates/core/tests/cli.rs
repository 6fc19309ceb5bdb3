use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use irlab::solver::SolveConfig;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn irlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irlab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("IRLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> serde_json::Value {
    let out = irlab(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(text.lines().last().unwrap_or_default()).unwrap_or(serde_json::Value::Null)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn build_prior_reports_augmented_sample_count() {
    let dir = tempfile::tempdir().unwrap();
    let env = fixtures().join("environments.txt");
    let v = ok(&["build-prior", path(&env), "--dim", "18", "-o", "p.json"], dir.path());
    assert_eq!(v["samples"], 139_356);
    assert_eq!(v["environments"], 79);
    let v = ok(&["build-prior", path(&env), "--dim", "6", "--no-augment", "-o", "q.json"], dir.path());
    assert_eq!(v["samples"], 79);
    let p = irlab::prior::IlluminationPrior::load(&dir.path().join("p.json")).unwrap();
    assert_eq!(p.dim(), 18);
}

#[test]
fn failures_print_one_json_line_and_exit_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = irlab(&["solve", "missing", "--prior", "nope.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let line = String::from_utf8(out.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["error"], "io");
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());

    let out = irlab(&["solve", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(v["error"], "usage");

    std::fs::write(dir.path().join("bad.toml"), "step_size = -1\n").unwrap();
    let scene = fixtures().join("sphere/scene/front");
    let prior = fixtures().join("prior.json");
    let out = irlab(&["solve", path(&scene), "--prior", path(&prior), "--config", "bad.toml", "-o", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"domain\""));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn dumped_config_reads_back_as_the_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = irlab(&["--dump-config"], dir.path());
    assert!(out.status.success());
    let cfg = SolveConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, SolveConfig::default());
}

#[test]
fn gradcheck_passes_from_seed_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = irlab(&["gradcheck", "--seed", "1", "--seeds", "3", "-o", "checks.json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().filter(|l| l.ends_with("PASS")).count(), 17);
    assert!(!table.contains("FAIL"));
}

#[test]
fn solve_evaluate_and_relight_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    std::fs::write(cwd.join("short.toml"), "phase1_iters = 40\nphase2_iters = 40\n[weights]\nsmoothness = 0.05\n").unwrap();
    let scene = fixtures().join("sphere/scene/front");
    let prior = fixtures().join("prior.json");
    ok(&["--threads", "2", "solve", path(&scene), "--prior", path(&prior), "--config", "short.toml", "-o", "out"], cwd);
    for f in ["albedo.png", "albedo.pfm", "normals.pfm", "lighting.json", "trace.csv", "meta.json"] {
        assert!(cwd.join("out").join(f).exists(), "{f}");
    }
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cwd.join("out/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["weights"]["smoothness"], 0.05);
    assert_eq!(meta["threads"], 2);
    let trace = std::fs::read_to_string(cwd.join("out/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 81);

    let truth = fixtures().join("sphere/truth");
    let report = ok(&["evaluate", "out", path(&truth), "-o", "report.json"], cwd);
    assert_eq!(report["items"], 1);
    assert!(report["normal_mean_deg"].as_f64().unwrap() < 30.0);

    let lighting = fixtures().join("pair/truth/left/lighting.json");
    ok(&["relight", "out", "--lighting", path(&lighting), "-o", "relit.png"], cwd);
    let relit = irlab::io::read_png(&cwd.join("relit.png")).unwrap();
    assert_eq!(relit.dims(), (64, 64));
}

#[test]
fn rendering_the_truth_reproduces_the_photograph() {
    let dir = tempfile::tempdir().unwrap();
    let truth = fixtures().join("sphere/truth/front");
    ok(&["render", path(&truth), "--lighting", path(&truth.join("lighting.json")), "-o", "r.png"], dir.path());
    let rendered = irlab::io::read_png(&dir.path().join("r.png")).unwrap();
    let photo = irlab::io::read_png(&fixtures().join("sphere/scene/front/image.png")).unwrap();
    assert_eq!(rendered, photo);
}

#[test]
fn geometry_subcommands_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let left = fixtures().join("pair/scene/left");
    let right = fixtures().join("pair/scene/right");
    let v = ok(&["normals-from-depth", path(&left), "-o", "n.pfm"], cwd);
    assert!(v["pixels"].as_u64().unwrap() > 1000);
    irlab::io::read_normals(&cwd.join("n.pfm")).unwrap();

    ok(&["cross-project", path(&left), path(&right), "--what", "image", "-o", "img"], cwd);
    let warped = irlab::io::read_png(&cwd.join("img/warped.png")).unwrap();
    let mask = irlab::io::read_mask_png(&cwd.join("img/mask.png")).unwrap();
    assert_eq!(warped.mask(), mask.data());

    let albedo = fixtures().join("pair/truth/right/albedo.pfm");
    ok(&["cross-project", path(&left), path(&right), "--what", "albedo", "--source", path(&albedo), "-o", "alb"], cwd);
    assert_eq!(irlab::io::read_rgb_pfm(&cwd.join("alb/warped.pfm")).unwrap().mask(), mask.data());

    let pair = fixtures().join("pair");
    let v = ok(&["select-pairs", path(&pair), "-o", "pairs.json"], cwd);
    assert_eq!(v["pairs"], 0);
    let v = ok(&["select-pairs", path(&pair), "--camera-distance", "3", "--max-correlation", "0.95", "-o", "pairs.json"], cwd);
    assert_eq!(v["pairs"], 1);
    let file: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cwd.join("pairs.json")).unwrap()).unwrap();
    assert_eq!(file["pairs"][0], serde_json::json!(["left", "right"]));
    assert_eq!(file["thresholds"]["camera_distance"], 3.0);
}
