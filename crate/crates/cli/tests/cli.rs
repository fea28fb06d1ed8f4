use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
[data]
n_subjects = 6
frontal_per_subject = 3
profile_per_subject = 3
image_size = [16, 16, 1]

[model]
image_size = [16, 16, 1]
base_channels = 2
n_down = 2
embedding_dim = 4

[train]
batch_size = 8
max_steps = 4
checkpoint_every = 3
log_every = 1

[eval]
n_folds = 2
same_pairs_per_subject = 2
diff_pairs_per_subject = 2
"#;

fn pfcpgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfcpgan"))
        .args(args)
        .env_remove("PFCPGAN_RUN_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pfcpgan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    pfcpgan(args).status.code().expect("exited normally")
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Fixture { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    fn config(&self) -> String {
        self.s("tiny.toml")
    }

    fn train(&self, out: &str, extra: &[&str]) {
        let (cfg, out) = (self.config(), self.s(out));
        let mut args = vec!["train", "--config", &cfg, "--out", &out];
        args.extend_from_slice(extra);
        ok(&args);
    }
}

fn csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let (header, rows) = csv(path);
    let i = header.iter().position(|h| h == name).unwrap();
    rows.into_iter().map(|r| r[i].clone()).collect()
}

#[test]
fn generate_writes_layout_and_refuses_non_empty_out() {
    let f = Fixture::new();
    let (cfg, out) = (f.config(), f.s("data"));
    ok(&["generate", "--config", &cfg, "--out", &out]);
    let subjects = fs::read_dir(f.path("data")).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(subjects, 6);
    assert_eq!(fs::read_dir(f.path("data/000/frontal")).unwrap().count(), 3);
    assert_eq!(fs::read_dir(f.path("data/000/profile")).unwrap().count(), 3);
    assert!(f.path("data/dataset_meta.json").is_file());
    assert!(f.path("data/config.resolved.toml").is_file());

    assert_eq!(code(&["generate", "--config", &cfg, "--out", &out]), 3);
    ok(&["generate", "--config", &cfg, "--out", &out, "--force"]);
}

#[test]
fn same_seed_generates_identical_files() {
    let f = Fixture::new();
    let cfg = f.config();
    let (a, b) = (f.s("a"), f.s("b"));
    ok(&["--seed", "5", "generate", "--config", &cfg, "--out", &a]);
    ok(&["--seed", "5", "generate", "--config", &cfg, "--out", &b]);
    for rel in ["003/frontal", "003/profile"] {
        let names: Vec<_> = fs::read_dir(f.path("a").join(rel)).unwrap().map(|e| e.unwrap().file_name()).collect();
        for n in names {
            let x = fs::read(f.path("a").join(rel).join(&n)).unwrap();
            let y = fs::read(f.path("b").join(rel).join(&n)).unwrap();
            assert_eq!(x, y, "{rel}/{n:?}");
        }
    }
}

#[test]
fn unknown_config_key_exits_2() {
    let f = Fixture::new();
    fs::write(f.path("bad.toml"), "[train]\nbatchsize = 4\n").unwrap();
    let out = pfcpgan(&["train", "--config", &f.s("bad.toml"), "--out", &f.s("run")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.batchsize"));
}

#[test]
fn missing_output_dir_is_a_config_error() {
    let f = Fixture::new();
    assert_eq!(code(&["generate", "--config", &f.config()]), 2);
}

#[test]
fn run_root_env_supplies_the_default_out() {
    let f = Fixture::new();
    let out = Command::new(env!("CARGO_BIN_EXE_pfcpgan"))
        .args(["generate", "--config", &f.config()])
        .env("PFCPGAN_RUN_ROOT", f.path("root"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(f.path("root/generate/dataset_meta.json").is_file());
}

#[test]
fn zero_steps_writes_initial_checkpoint_and_empty_log() {
    let f = Fixture::new();
    f.train("run", &["--max-steps", "0"]);
    assert!(f.path("run/checkpoints/step_000000/manifest.json").is_file());
    let (_, rows) = csv(&f.path("run/train_log.csv"));
    assert!(rows.is_empty());
    assert!(f.path("run/config.resolved.toml").is_file());
    assert!(f.path("run/run_meta.json").is_file());
}

#[test]
fn cpl_l2_preset_logs_zero_adversarial_and_perceptual_terms() {
    let f = Fixture::new();
    f.train("run", &["--preset", "cpl_l2"]);
    let log = f.path("run/train_log.csv");
    for name in ["l_gan_pr", "l_gan_fr", "l_perc", "d_loss_pr", "d_loss_fr"] {
        let col = column(&log, name);
        assert_eq!(col.len(), 4);
        assert!(col.iter().all(|v| v.parse::<f64>().unwrap() == 0.0), "{name}: {col:?}");
    }
    assert!(column(&log, "l_cpl").iter().all(|v| v.parse::<f64>().unwrap() > 0.0));
}

#[test]
fn train_refuses_non_empty_out_without_force() {
    let f = Fixture::new();
    f.train("run", &["--max-steps", "1"]);
    let (cfg, out) = (f.config(), f.s("run"));
    assert_eq!(code(&["train", "--config", &cfg, "--out", &out]), 3);
}

fn log_without_seconds(path: &Path) -> Vec<Vec<String>> {
    let (header, rows) = csv(path);
    let s = header.iter().position(|h| h == "seconds").unwrap();
    rows.into_iter()
        .map(|mut r| {
            r.remove(s);
            r
        })
        .collect()
}

fn manifest_digest(dir: &Path) -> String {
    let text = fs::read_to_string(dir.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["digest"].as_str().unwrap().to_string()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    for precision in ["32", "64"] {
        let f = Fixture::new();
        f.train("full", &["--precision", precision, "--max-steps", "6"]);
        // The interrupted run gets its own log, longer than its checkpoint,
        // so truncation on resume is exercised too.
        f.train("part", &["--precision", precision, "--max-steps", "4"]);
        let ckpt = f.s("part/checkpoints/step_000003");
        f.train("part", &["--resume", &ckpt, "--max-steps", "6"]);
        assert_eq!(
            log_without_seconds(&f.path("full/train_log.csv")),
            log_without_seconds(&f.path("part/train_log.csv")),
            "precision {precision}"
        );
        assert_eq!(
            manifest_digest(&f.path("full/checkpoints/step_000006")),
            manifest_digest(&f.path("part/checkpoints/step_000006")),
        );
    }
}

#[test]
fn corrupted_checkpoint_exits_3() {
    let f = Fixture::new();
    f.train("run", &["--max-steps", "1"]);
    let ckpt = f.path("run/checkpoints/step_000001");
    let arrays = fs::read_dir(&ckpt)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "bin"))
        .expect("array blob");
    let mut bytes = fs::read(&arrays).unwrap();
    bytes[0] ^= 0x40;
    fs::write(&arrays, bytes).unwrap();
    let (cfg, out, ck) = (f.config(), f.s("eval"), ckpt.display().to_string());
    assert_eq!(code(&["eval", "--config", &cfg, "--ckpt", &ck, "--out", &out]), 3);
}

#[test]
fn eval_protocols_write_their_reports() {
    let f = Fixture::new();
    f.train("run", &[]);
    let (cfg, ck) = (f.config(), f.s("run/checkpoints/step_000004"));

    let out = f.s("folds");
    ok(&["eval", "--config", &cfg, "--ckpt", &ck, "--out", &out, "--plot"]);
    let folds = column(&f.path("folds/eval_report.csv"), "fold");
    for label in ["0", "1", "mean", "std"] {
        assert!(folds.iter().any(|x| x == label), "missing {label}");
    }
    let (header, rows) = csv(&f.path("folds/roc.csv"));
    assert_eq!(header, ["threshold", "far", "gar"]);
    assert!(!rows.is_empty());
    assert!(f.path("folds/roc.png").is_file());

    let out = f.s("yaw");
    ok(&["eval", "--config", &cfg, "--ckpt", &ck, "--out", &out, "--protocol", "yaw"]);
    let bins = column(&f.path("yaw/yaw_rank1.csv"), "bin_deg");
    assert_eq!(bins, ["15", "30", "45", "60", "75", "90"]);
    let probes: usize = column(&f.path("yaw/yaw_rank1.csv"), "n_probes")
        .iter()
        .map(|v| v.parse::<usize>().unwrap())
        .sum();
    assert_eq!(probes, 6 * 3);

    let out = f.s("ident");
    ok(&["eval", "--config", &cfg, "--ckpt", &ck, "--out", &out, "--protocol", "identify"]);
    let metrics = column(&f.path("ident/eval_report.csv"), "metric");
    assert!(metrics.iter().any(|m| m == "rank_1"));
    assert!(metrics.iter().any(|m| m == "rank_5"));
    assert_eq!(csv(&f.path("ident/cmc.csv")).1.len(), 6);
}

#[test]
fn eval_uses_checkpoint_precision_and_rejects_mismatched_data() {
    let f = Fixture::new();
    f.train("run", &["--precision", "64", "--max-steps", "1"]);
    let (cfg, ck) = (f.config(), f.s("run/checkpoints/step_000001"));
    ok(&["eval", "--config", &cfg, "--ckpt", &ck, "--out", &f.s("e")]);

    // A 32x32 dataset against a 16x16 model.
    fs::write(
        f.path("big.toml"),
        TINY.replacen("image_size = [16, 16, 1]", "image_size = [32, 32, 1]", 1)
            .replacen("image_size = [16, 16, 1]", "image_size = [32, 32, 1]", 1),
    )
    .unwrap();
    ok(&["generate", "--config", &f.s("big.toml"), "--out", &f.s("big")]);
    let c = code(&["eval", "--config", &cfg, "--ckpt", &ck, "--data", &f.s("big"), "--out", &f.s("e2")]);
    assert_ne!(c, 0);
}

fn png_size(path: &Path) -> (u32, u32) {
    let bytes = fs::read(path).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let be = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    (be(16), be(20))
}

#[test]
fn reconstruct_panel_has_input_and_output_columns() {
    let f = Fixture::new();
    f.train("run", &["--max-steps", "1"]);
    let (cfg, ck) = (f.config(), f.s("run/checkpoints/step_000001"));
    for (dir, direction) in [("p2f", "p2f"), ("f2p", "f2p")] {
        let out = f.s(dir);
        ok(&["reconstruct", "--config", &cfg, "--ckpt", &ck, "--out", &out, "--direction", direction]);
        assert_eq!(png_size(&f.path(dir).join("panel.png")), (16 * 8, 16));
        let mse = column(&f.path(dir).join("recon_mse.csv"), "mse");
        assert_eq!(mse.len(), 6 * 3);
        assert!(mse.iter().all(|v| v.parse::<f64>().unwrap() >= 0.0));
    }
}

#[test]
fn reconstruct_without_source_images_exits_5() {
    let f = Fixture::new();
    f.train("run", &["--max-steps", "1"]);
    fs::write(
        f.path("frontal_only.toml"),
        TINY.replace("profile_per_subject = 3", "profile_per_subject = 0"),
    )
    .unwrap();
    ok(&["generate", "--config", &f.s("frontal_only.toml"), "--out", &f.s("data")]);
    let (cfg, ck, data, out) = (f.config(), f.s("run/checkpoints/step_000001"), f.s("data"), f.s("rec"));
    let args = ["reconstruct", "--config", &cfg, "--ckpt", &ck, "--data", &data, "--out", &out, "--direction", "p2f"];
    assert_eq!(code(&args), 5);
}

#[test]
fn ablate_writes_one_row_per_preset_on_a_shared_split() {
    let f = Fixture::new();
    let (cfg, out) = (f.config(), f.s("abl"));
    ok(&["ablate", "--config", &cfg, "--out", &out, "--max-steps", "2", "--plot"]);
    assert_eq!(column(&f.path("abl/ablation.csv"), "preset"), ["cpl_l2", "cpl_l2_gan", "full"]);
    let (header, _) = csv(&f.path("abl/ablation.csv"));
    assert_eq!(header, ["preset", "eer", "auc", "gar@0.01"]);
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("abl/ablation_meta.json")).unwrap()).unwrap();
    let digests: Vec<_> = meta["split_digests"].as_object().unwrap().values().collect();
    assert_eq!(digests.len(), 3);
    assert!(digests.windows(2).all(|w| w[0] == w[1]));
    for p in ["cpl_l2", "cpl_l2_gan", "full"] {
        assert!(f.path("abl").join(p).join("roc.csv").is_file());
        assert!(f.path("abl").join(p).join("train_log.csv").is_file());
    }
    assert!(f.path("abl/roc_ablation.png").is_file());
}
