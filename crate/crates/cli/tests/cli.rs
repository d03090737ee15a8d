use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array3;
use neuralign::bridge::ConditionFile;
use neuralign::metrics::Image;
use neuralign_cli::{EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL};
use serde_json::Value;

const TINY: &str = r#"
seed = 2

[dataset.synthetic]
n_categories = 6
n_test_categories = 4
images_per_category = 6
subjects = 2
channels = 8
samples = 50
noise_sigma = 0.1

[preprocess]
window_start_ms = 0.0
window_end_ms = 200.0

[model]
temporal_kernel = 3
temporal_filters = 4
spatial_filters = 4
pool = 5
feature_dim = 8
embed_dim = 16
dropout_rate = 0.0

[training]
epochs = 4
batch_size = 16
lr = 3e-3
val_count = 6

[bridge.qformer]
n_queries = 4
d_model = 8
n_heads = 2
ffn_dim = 8
input_dim = 16
prompt_dim = 8
pool_dim = 8

[bridge.prior]
dim = 16
hidden_dim = 8

[bridge.train]
epochs = 2
batch_size = 8
"#;

struct Run {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, config).unwrap();
        let out = dir.path().join("out");
        Self {
            config: path,
            out,
            _dir: dir,
        }
    }

    fn cmd(&self, args: &[&str]) -> Output {
        self.cmd_env(args, &[])
    }

    fn cmd_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut c = Command::new(env!("CARGO_BIN_EXE_neuralign"));
        c.arg("--config").arg(&self.config).arg("--out").arg(&self.out).args(args);
        for (k, v) in env {
            c.env(k, v);
        }
        c.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.cmd(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.out.join(rel)).unwrap()
    }

    fn manifest(&self) -> Value {
        serde_json::from_str(&self.read("manifest.json")).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_pngs(dir: &Path, images: &[Image]) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, img) in images.iter().enumerate() {
        img.save_png(&dir.join(format!("{i:02}.png"))).unwrap();
    }
}

fn pattern(seed: usize, side: usize) -> Image {
    // Multiplicative hash of the pixel position, distinct per seed.
    Image::new(Array3::from_shape_fn((side, side, 3), |(i, j, c)| {
        let k = ((seed * side + i) * side + j) * 3 + c;
        ((k as u64 + 1).wrapping_mul(2_654_435_761) % 1000) as f64 / 999.0
    }))
    .unwrap()
}

#[test]
fn dry_run_prints_the_resolved_defaults() {
    let run = Run::new("");
    let text = run.ok(&["--dry-run", "train"]);
    let cfg: toml::Table = toml::from_str(text.trim_start_matches("# configuration is valid\n")).unwrap();
    let t = cfg["training"].as_table().unwrap();
    assert_eq!(t["epochs"].as_integer(), Some(100));
    assert_eq!(t["batch_size"].as_integer(), Some(256));
    assert_eq!(t["lr"].as_float(), Some(2e-4));
    assert_eq!(t["alpha"].as_float(), Some(0.5));
    assert_eq!(t["beta"].as_float(), Some(2.0));
    assert_eq!(t["tau_init"].as_float(), Some(0.07));
    assert!(!run.out.exists(), "dry run wrote outputs");
}

#[test]
fn environment_and_seed_override_the_file() {
    let run = Run::new(TINY);
    let o = run.cmd_env(&["--dry-run", "--seed", "9", "train"], &[("NEURALIGN__TRAINING__EPOCHS", "7")]);
    assert!(o.status.success());
    let cfg: toml::Table = toml::from_str(&String::from_utf8_lossy(&o.stdout)).unwrap();
    assert_eq!(cfg["training"]["epochs"].as_integer(), Some(7));
    assert_eq!(cfg["seed"].as_integer(), Some(9));
    assert_eq!(cfg["training"]["seed"].as_integer(), Some(9));
    assert_eq!(cfg["model"]["seed"].as_integer(), Some(9));
}

#[test]
fn configuration_errors_exit_with_the_config_code() {
    let run = Run::new("[training]\nalpha = 1.5\n");
    assert_eq!(code(&run.cmd(&["--dry-run", "train"])), EXIT_CONFIG as i32);
    let run = Run::new("[training]\nunknown_key = 1\n");
    assert_eq!(code(&run.cmd(&["train"])), EXIT_CONFIG as i32);
    let run = Run::new(TINY);
    let o = run.cmd_env(&["train"], &[("NEURALIGN__MODEL__NOPE", "1")]);
    assert_eq!(code(&o), EXIT_CONFIG as i32);
    // No dataset yet.
    let o = run.cmd(&["train"]);
    assert_eq!(code(&o), EXIT_CONFIG as i32);
    assert!(String::from_utf8_lossy(&o.stderr).contains("synth"));
}

#[test]
fn existing_outputs_need_force_or_resume() {
    let run = Run::new(TINY);
    run.ok(&["synth"]);
    assert_eq!(code(&run.cmd(&["synth"])), EXIT_CONFIG as i32);
    run.ok(&["--force", "synth"]);
    run.ok(&["train"]);
    assert_eq!(code(&run.cmd(&["train"])), EXIT_CONFIG as i32);
    run.ok(&["train", "--resume"]);
    run.ok(&["--force", "train"]);
}

#[test]
fn corrupt_dataset_is_a_data_error() {
    let run = Run::new(TINY);
    run.ok(&["synth"]);
    let trials = walk(&run.out.join("dataset/train"))
        .into_iter()
        .find(|p| p.extension().is_some_and(|e| e != "json"))
        .expect("a trial file");
    std::fs::write(&trials, b"garbage").unwrap();
    let o = run.cmd(&["train"]);
    assert_eq!(code(&o), EXIT_DATA as i32, "{}", String::from_utf8_lossy(&o.stderr));
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn lifecycle_writes_reports_and_manifest() {
    let run = Run::new(TINY);
    run.ok(&["synth"]);
    run.ok(&["train"]);
    let log = run.read("train/sub-01/log.jsonl");
    assert_eq!(log.lines().filter(|l| l.contains("val_top1")).count(), 4);

    run.ok(&["eval"]);
    let table = run.read("eval/retrieval.tsv");
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method\tsub-01_top1\tsub-01_top5\tsub-02_top1\tsub-02_top5\tavg_top1\tavg_top5"
    );
    assert!(lines.next().unwrap().starts_with("neuralign\t"));
    let report: Value = serde_json::from_str(&run.read("eval/report.json")).unwrap();
    assert!(report.to_string().contains("chance"));

    run.ok(&["ablate", "--mode", "expanding"]);
    let curve = run.read("ablate/sub-02/expanding_curve.tsv");
    assert!(curve.lines().last().unwrap().starts_with("200\t0\t200"), "{curve}");

    run.ok(&["export"]);
    let f = ConditionFile::read(&run.out.join("export/sub-01.conditions")).unwrap();
    // One bundle per averaged test image.
    assert_eq!(f.bundles.len(), 4);
    assert_eq!((f.image_dim, f.prompt_tokens, f.prompt_dim, f.pool_dim), (16, 4, 8, 8));
    assert!(f.bundles.iter().all(|b| b.subject_id == "sub-01"));

    let m = run.manifest();
    for c in ["synth", "train", "eval", "ablate", "export"] {
        assert!(m["commands"][c].is_object(), "{c} missing from the manifest");
    }
    assert_eq!(m["config"]["training"]["epochs"], 4);
    assert_eq!(m["config"]["training"]["alpha"], 0.5);
    assert!(!m["commands"]["train"]["inputs"].as_object().unwrap().is_empty());
}

#[test]
fn eval_refuses_a_model_from_another_encoder() {
    let run = Run::new(TINY);
    run.ok(&["synth"]);
    run.ok(&["train"]);
    let o = run.cmd_env(&["eval"], &[("NEURALIGN__MODEL__FEATURE_DIM", "12")]);
    assert_eq!(code(&o), EXIT_CONFIG as i32);
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));
}

#[test]
fn metrics_identity_and_misalignment() {
    let run = Run::new("");
    let root = run.config.parent().unwrap();
    let refs: Vec<Image> = (0..5).map(|i| pattern(i, 20)).collect();
    write_pngs(&root.join("ref"), &refs);
    write_pngs(&root.join("gen"), &refs);
    let gen = root.join("gen");
    let reference = root.join("ref");
    let args = ["metrics", "--generated", gen.to_str().unwrap(), "--reference", reference.to_str().unwrap()];
    run.ok(&args);
    let report: Value = serde_json::from_str(&run.read("metrics/report.json")).unwrap();
    assert_eq!(report["pixcorr"], 1.0);
    assert!((report["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    for (_, v) in report["two_way"].as_object().unwrap() {
        assert_eq!(v.as_f64(), Some(1.0));
    }
    let table = run.read("metrics/table4.tsv");
    assert!(table.starts_with("method\tPixCorr\tSSIM\tAlexNet(2)\tAlexNet(5)\tInception\tCLIP\tEfficientNet\tSwAV"));
    assert_eq!(table.lines().count(), 2);

    std::fs::remove_file(gen.join("03.png")).unwrap();
    let o = run.cmd(&args);
    assert_eq!(code(&o), EXIT_DATA as i32);
    assert!(String::from_utf8_lossy(&o.stderr).contains("03"));
}

#[test]
fn metrics_ranks_candidate_generations() {
    let run = Run::new("");
    let root = run.config.parent().unwrap();
    let refs: Vec<Image> = (0..3).map(|i| pattern(i, 20)).collect();
    write_pngs(&root.join("ref"), &refs);
    for (i, r) in refs.iter().enumerate() {
        // Candidate 00 is the reference itself, the rest unrelated patterns.
        let mut cands = vec![r.clone()];
        cands.extend((0..3).map(|k| pattern(10 + 3 * i + k, 20)));
        write_pngs(&root.join("gen").join(format!("{i:02}")), &cands);
    }
    let gen = root.join("gen");
    let reference = root.join("ref");
    run.ok(&[
        "metrics",
        "--generated",
        gen.to_str().unwrap(),
        "--reference",
        reference.to_str().unwrap(),
        "--candidates",
        "4",
    ]);
    let per_rank = run.read("metrics/per_rank.tsv");
    assert_eq!(per_rank.lines().count(), 5, "{per_rank}");
    let pairs = run.read("metrics/pairs.jsonl");
    assert!(pairs.lines().all(|l| l.contains("\"candidate\"")));
    let report: Value = serde_json::from_str(&run.read("metrics/report.json")).unwrap();
    assert_eq!(report["pixcorr"], 1.0, "best-ranked candidate should be the reference");
}

#[test]
fn check_grads_fails_below_an_impossible_tolerance() {
    let run = Run::new("");
    let out = run.ok(&["check-grads", "--probes", "2"]);
    assert!(out.contains("max relative error"));
    let o = run.cmd(&["check-grads", "--probes", "2", "--tolerance", "0"]);
    assert_eq!(code(&o), EXIT_NUMERICAL as i32);
}
