//! End-to-end command runs on a tiny model, plus config parsing and
//! digests.

use std::fs;
use std::path::Path;

use clap::Parser;
use hacm::cli::{run, Cli, PROBE_REPORT};
use hacm::config::RunConfig;
use hacm::train::{CONFIG_SNAPSHOT, CSV_HEADER, FINAL_CHECKPOINT, TRAIN_LOG};
use hacm::Error;

const TINY: &str = "\
# tiny model for smoke runs
frames = 24
embed_dim = 16
heads = 2
hidden = 32
enc_layers = 1
dec_layers = 1
epochs = 1
batch_size = 4
warmup_epochs = 0
probe_epochs = 5
probe_random_seeds = 2
";

fn cmd(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("hacm").chain(args.iter().copied())).unwrap()
}

fn exec(args: &[&str]) -> hacm::Result<String> {
    run(&cmd(args))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(per_class: usize, test_per_class: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        let data = dir.path().join("data").join("d.seq");
        let msg = exec(&[
            "gen-data",
            "--per-class",
            &per_class.to_string(),
            "--test-per-class",
            &test_per_class.to_string(),
            "--frames",
            "32",
            "--out",
            s(&data),
        ])
        .unwrap();
        assert!(msg.contains(&format!("{} sequences", 4 * (per_class + test_per_class))), "{msg}");
        Fixture { dir }
    }

    fn path(&self, rel: &str) -> String {
        self.dir.path().join(rel).to_str().unwrap().to_string()
    }

    /// `--config` plus the dataset and an output directory under the
    /// fixture root.
    fn run(&self, sub: &str, out: &str, extra: &[&str]) -> hacm::Result<String> {
        let (cfg, data, out) = (self.path("tiny.cfg"), self.path("data/d.seq"), self.path(out));
        let mut args = vec![sub, "--config", &cfg, "--data", &data, "--out", &out];
        args.extend_from_slice(extra);
        exec(&args)
    }
}

#[test]
fn one_epoch_writes_checkpoint_log_and_snapshot() {
    let fx = Fixture::new(2, 1);
    let msg = fx.run("pretrain", "run", &[]).unwrap();
    assert!(msg.contains("2 steps"), "{msg}");
    let out = fx.dir.path().join("run");
    assert!(out.join(FINAL_CHECKPOINT).exists());
    let log = fs::read_to_string(out.join(TRAIN_LOG)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 3);
    for row in &lines[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 7);
        assert!(cols[2..6].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
    let snap = RunConfig::load(&out.join(CONFIG_SNAPSHOT)).unwrap();
    assert_eq!(snap.embed_dim, 16);
    assert_eq!(snap.out, out);
}

#[test]
fn periodic_checkpoints_are_written() {
    let fx = Fixture::new(2, 1);
    fx.run("pretrain", "run", &["--set", "epochs=2", "--set", "checkpoint_every=1"]).unwrap();
    let out = fx.dir.path().join("run");
    for name in ["ckpt_epoch0001.bin", "ckpt_epoch0002.bin", FINAL_CHECKPOINT] {
        assert!(out.join(name).exists(), "{name}");
    }
    assert_eq!(fs::read(out.join("ckpt_epoch0002.bin")).unwrap(), fs::read(out.join(FINAL_CHECKPOINT)).unwrap());
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let fx = Fixture::new(2, 1);
    fx.run("pretrain", "a", &[]).unwrap();
    fx.run("pretrain", "b", &[]).unwrap();
    fx.run("pretrain", "c", &["--set", "seed=1"]).unwrap();
    let read = |run: &str, f: &str| fs::read(fx.dir.path().join(run).join(f)).unwrap();
    assert_eq!(read("a", FINAL_CHECKPOINT), read("b", FINAL_CHECKPOINT));
    assert_eq!(read("a", TRAIN_LOG), read("b", TRAIN_LOG));
    assert_ne!(read("a", TRAIN_LOG), read("c", TRAIN_LOG));
}

#[test]
fn incompatible_checkpoints_are_refused() {
    let fx = Fixture::new(2, 1);
    fx.run("pretrain", "run", &[]).unwrap();
    let err = fx.run("probe", "run", &["--set", "embed_dim=8", "--set", "heads=1"]).unwrap_err();
    assert!(matches!(err, Error::DigestMismatch { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    let err = fx.run("pretrain", "run", &["--set", "hidden=24"]).unwrap_err();
    assert!(matches!(err, Error::DigestMismatch { .. }), "{err}");
    // non-model keys keep the digest
    fx.run("pretrain", "run", &["--set", "tau=0.5"]).unwrap();
}

#[test]
fn probe_reports_and_leaves_the_encoder_unchanged() {
    let fx = Fixture::new(2, 1);
    fx.run("pretrain", "run", &[]).unwrap();
    let before = fs::read(fx.dir.path().join("run").join(FINAL_CHECKPOINT)).unwrap();
    let msg = fx.run("probe", "run", &["--random-baseline"]).unwrap();
    assert!(msg.contains("random-encoder mean"), "{msg}");
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(fx.dir.path().join("run").join(PROBE_REPORT)).unwrap()).unwrap();
    assert_eq!(report["probe"]["encoder_unchanged"], true);
    assert_eq!(report["probe"]["n_train"], 8);
    assert_eq!(report["probe"]["n_test"], 4);
    assert_eq!(report["random_encoders"].as_array().unwrap().len(), 2);
    let acc = report["probe"]["test_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(fs::read(fx.dir.path().join("run").join(FINAL_CHECKPOINT)).unwrap(), before);
}

#[test]
fn untrained_probe_runs() {
    let fx = Fixture::new(2, 1);
    let msg = fx.run("probe", "fresh", &["--untrained"]).unwrap();
    assert!(msg.contains("chance 0.2500"), "{msg}");
    let missing = fx.run("probe", "fresh", &[]).unwrap_err();
    assert!(matches!(missing, Error::Io(_)), "{missing}");
}

#[test]
fn shuffled_labels_probe_near_chance() {
    let fx = Fixture::new(16, 32);
    fx.run("probe", "shuf", &["--untrained", "--shuffle-labels"]).unwrap();
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(fx.dir.path().join("shuf").join(PROBE_REPORT)).unwrap()).unwrap();
    let acc = report["probe"]["test_accuracy"].as_f64().unwrap();
    let n = report["probe"]["n_test"].as_f64().unwrap();
    assert_eq!(n, 128.0);
    let sigma = (0.25 * 0.75 / n).sqrt();
    assert!((acc - 0.25).abs() <= 3.0 * sigma, "accuracy {acc} outside 0.25 ± {}", 3.0 * sigma);
}

#[test]
fn inspect_mask_dump_is_well_formed_and_reproducible() {
    let fx = Fixture::new(2, 1);
    fx.run("inspect-mask", "insp", &["--sample", "3"]).unwrap();
    let path = fx.dir.path().join("insp").join("mask_sample3.csv");
    let first = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], "sample,half,frame,joint,score,unmasked");
    // 24 frames pooled by 3 → 4 frames per half, 18 refined joints
    let l = 4 * 18;
    assert_eq!(lines.len(), 1 + 2 * l);
    let want = (0.1f64 * l as f64).ceil() as usize;
    for (half, parity) in [("odd", 1), ("even", 0)] {
        let rows: Vec<Vec<&str>> =
            lines[1..].iter().map(|r| r.split(',').collect::<Vec<_>>()).filter(|c| c[1] == half).collect();
        assert_eq!(rows.len(), l);
        assert_eq!(rows.iter().filter(|c| c[5] == "1").count(), want);
        for c in &rows {
            assert_eq!(c[0], "3");
            assert_eq!(c[2].parse::<usize>().unwrap() % 2, parity);
            assert!(c[3].parse::<usize>().unwrap() < 18);
            assert!(c[4].parse::<f64>().unwrap().is_finite());
            assert!(c[5] == "0" || c[5] == "1");
        }
    }
    fx.run("inspect-mask", "insp", &["--sample", "3"]).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), first);

    let err = fx.run("inspect-mask", "insp", &["--sample", "99"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn config_errors_are_reported() {
    let fx = Fixture::new(2, 1);
    let err = fx.run("pretrain", "x", &["--set", "mask_ratio=1.5"]).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let err = fx.run("pretrain", "x", &["--set", "nonsense"]).unwrap_err();
    assert_eq!(err.kind(), "config");
    let err = exec(&["pretrain", "--data", &fx.path("nope.seq"), "--out", &fx.path("x")]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    // 25 frames do not pool by 3
    let err = fx.run("pretrain", "x", &["--set", "frames=25"]).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn config_text_round_trips_every_key() {
    let mut cfg = RunConfig::parse_text(TINY).unwrap();
    for kv in [
        "mask_ratio=0.75",
        "tau=0.01",
        "odd_criterion=motion",
        "even_criterion=temporal",
        "use_gumbel=false",
        "invert_criterion=true",
        "gcm_strategy=2",
        "decoder_positions=within-half",
        "recon_norm=as-written",
        "curvature_c=-0.5",
        "seed=42",
        "data=some/where.seq",
    ] {
        cfg.apply_override(kv).unwrap();
    }
    let text = cfg.to_text();
    assert_eq!(RunConfig::parse_text(&text).unwrap(), cfg);
    assert_eq!(text.lines().count(), cfg.pairs().len());
    let mut fresh = RunConfig::default();
    for (k, v) in cfg.pairs() {
        fresh.set(k, &v).unwrap();
    }
    assert_eq!(fresh, cfg);
}

#[test]
fn digest_covers_exactly_the_shape_keys() {
    let base = RunConfig::default();
    let shape = [
        ("joints", "24"),
        ("frames", "48"),
        ("pool_r", "2"),
        ("embed_dim", "128"),
        ("torso_joints", "0,1"),
        ("curvature_c", "-2"),
        ("heads", "4"),
        ("hidden", "512"),
        ("enc_layers", "2"),
        ("dec_layers", "1"),
    ];
    for (k, v) in shape {
        let mut c = base.clone();
        c.set(k, v).unwrap();
        assert_ne!(c.model_digest(), base.model_digest(), "{k}");
    }
    for (k, v) in [("mu", "0"), ("epochs", "3"), ("seed", "9"), ("mask_ratio", "0.5"), ("out", "x"), ("lr", "0.1")] {
        let mut c = base.clone();
        c.set(k, v).unwrap();
        assert_eq!(c.model_digest(), base.model_digest(), "{k}");
    }
    assert_eq!(base.model_digest().len(), 64);
}
