use std::fs;
use std::path::Path;
use std::process::Command;

use mmvd_cli::commands::{self, Condition, EvalMode};
use mmvd_cli::config::RunConfig;
use mmvd_cli::CliError;
use mmvd_core::checkpoint::Checkpoint;
use mmvd_core::control::TaskKind;
use mmvd_core::dataset::{read_manifest, read_sample};

fn tiny(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    for kv in [
        "frames=4",
        "height=16",
        "width=16",
        "n_train=3",
        "n_eval=2",
        "model_dim=16",
        "depth=1",
        "heads=2",
        "steps=4",
        "checkpoint_every=2",
        "sample_steps=3",
    ] {
        let (k, v) = kv.split_once('=').unwrap();
        cfg.set(k, v).unwrap();
    }
    cfg.data_dir = root.join("data");
    cfg.out_dir = root.join("run");
    cfg
}

fn mmvd(root: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mmvd"))
        .current_dir(root)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn gen_data_writes_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let s = commands::gen_data(&cfg).unwrap();
    assert_eq!(read_manifest(s.train_manifest.parent().unwrap()).unwrap().len(), 3);
    assert_eq!(read_manifest(s.eval_manifest.parent().unwrap()).unwrap().len(), 2);
    let train = commands::load_split(&cfg, "train").unwrap();
    let eval = commands::load_split(&cfg, "eval").unwrap();
    assert!(train.iter().all(|t| eval.iter().all(|e| t != e)));

    let mut other = cfg.clone();
    other.width = 32;
    assert!(matches!(commands::load_split(&other, "train"), Err(CliError::Validation(_))));
}

#[test]
fn train_resume_and_stage_presets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    commands::gen_data(&cfg).unwrap();
    let full = commands::train(&cfg, None).unwrap();
    assert_eq!(full.step, 4);
    let log = fs::read_to_string(&full.log).unwrap();
    assert_eq!(log.lines().count(), 4);
    let without_out_dir = |path: &Path| {
        let mut ck = Checkpoint::load(path).unwrap();
        ck.config.retain(|(k, _)| k != "out_dir");
        ck
    };

    let mut half = cfg.clone();
    half.steps = 2;
    half.out_dir = dir.path().join("half");
    let first = commands::train(&half, None).unwrap();
    let mut rest = cfg.clone();
    rest.out_dir = half.out_dir.clone();
    let resumed = commands::train(&rest, Some(&first.checkpoint)).unwrap();
    assert_eq!(resumed.step, 4);
    assert_eq!(without_out_dir(&resumed.checkpoint), without_out_dir(&full.checkpoint));
    assert_eq!(fs::read_to_string(&resumed.log).unwrap(), log);

    let mut stage1 = cfg.clone();
    stage1.stage = 1;
    stage1.steps = 6;
    stage1.out_dir = dir.path().join("stage1");
    let o = commands::train(&stage1, None).unwrap();
    for line in fs::read_to_string(&o.log).unwrap().lines() {
        let counts = line.rsplit(',').next().unwrap();
        assert_eq!(counts, format!("{}:0:0:0:0", cfg.batch_size), "{line}");
    }

    let mut bigger = cfg.clone();
    bigger.model_dim = 32;
    assert!(matches!(
        commands::train(&bigger, Some(&full.checkpoint)),
        Err(CliError::Validation(_))
    ));
}

#[test]
fn sample_eval_and_passthrough() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    commands::gen_data(&cfg).unwrap();
    let ck = commands::train(&cfg, None).unwrap().checkpoint;
    let src = Condition::Dataset {
        split: "eval".into(),
        index: 1,
    };
    let gt = &commands::load_split(&cfg, "eval").unwrap()[1];

    let out = dir.path().join("out/depth.ommv");
    let s = commands::sample_cmd(&cfg, &ck, TaskKind::CondDepth, &src, None, &out).unwrap();
    assert_eq!(s.video.depth, gt.depth);
    assert_eq!(read_sample(&out).unwrap(), s.video);
    assert_eq!(s.files.len(), 5);
    assert!(s.files.iter().all(|f| f.exists()));
    let grid = image::open(&s.files[1]).unwrap();
    assert_eq!((grid.width(), grid.height()), (4 * 16, 16));

    let t2v = commands::sample_cmd(
        &cfg,
        &ck,
        TaskKind::T2V,
        &Condition::None,
        Some("red circle left"),
        &dir.path().join("out/t2v.ommv"),
    )
    .unwrap();
    assert_eq!((t2v.video.frames, t2v.video.height, t2v.video.width), (4, 16, 16));
    assert_eq!(t2v.video.seg.len(), 4 * 16 * 16);

    let missing = commands::sample_cmd(&cfg, &ck, TaskKind::CondRgb, &Condition::None, None, &out);
    assert!(matches!(missing, Err(CliError::Validation(_))));
    let unknown = commands::sample_cmd(&cfg, &ck, TaskKind::T2V, &Condition::None, Some("a purple blob"), &out);
    assert!(matches!(unknown, Err(CliError::Validation(_))));

    let oracle = commands::eval_cmd(&cfg, &ck, TaskKind::CondRgb, EvalMode::Oracle).unwrap();
    assert_eq!(oracle.absrel, Some(0.0));
    assert_eq!(oracle.miou, Some(1.0));
    assert_eq!(oracle.edge_f1, Some(1.0));
    let a = commands::eval_cmd(&cfg, &ck, TaskKind::T2V, EvalMode::Model).unwrap();
    let b = commands::eval_cmd(&cfg, &ck, TaskKind::T2V, EvalMode::Model).unwrap();
    assert_eq!(a, b);
    a.check().unwrap();
    let log = fs::read_to_string(cfg.out_dir.join(commands::METRICS_LOG)).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn checkpoint_config_block_reparses() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.lr = 3e-4;
    cfg.use_msph = false;
    commands::gen_data(&cfg).unwrap();
    let ck = commands::train(&cfg, None).unwrap().checkpoint;
    let loaded = commands::load_model(&ck).unwrap();
    assert_eq!(loaded.cfg, cfg);
    assert_eq!(loaded.checkpoint.get("use_msph"), Some("false"));
    assert_eq!(RunConfig::from_entries(&cfg.entries()).unwrap(), cfg);
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let conf = root.join("run.conf");
    fs::write(&conf, tiny(root).to_text()).unwrap();
    let c = conf.to_str().unwrap();

    assert_eq!(mmvd(root, &["--config", c, "gen-data"]).status.code(), Some(0));
    assert_eq!(mmvd(root, &["--config", c, "train"]).status.code(), Some(0));
    let ck = tiny(root).out_dir.join(commands::CHECKPOINT);
    let ck = ck.to_str().unwrap();

    let out = mmvd(root, &["--config", c, "eval", "--checkpoint", ck, "--task", "rgb", "--oracle"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("miou"));

    // Validation errors.
    assert_eq!(mmvd(root, &["--config", c, "--set", "nope=1", "gen-data"]).status.code(), Some(1));
    assert_eq!(mmvd(root, &["--config", c, "frobnicate"]).status.code(), Some(1));
    let bad_caption = ["--config", c, "sample", "--checkpoint", ck, "--caption", "a purple blob", "--out", "x.ommv"];
    assert_eq!(mmvd(root, &bad_caption).status.code(), Some(1));
    let no_cond = ["--config", c, "sample", "--checkpoint", ck, "--task", "depth", "--out", "x.ommv"];
    assert_eq!(mmvd(root, &no_cond).status.code(), Some(1));
    let mismatch = ["--config", c, "--set", "model_dim=32", "train", "--resume", ck];
    assert_eq!(mmvd(root, &mismatch).status.code(), Some(1));

    // Runtime failures.
    fs::write(root.join("corrupt.ovdf"), b"OVDF garbage").unwrap();
    let corrupt = ["--config", c, "eval", "--checkpoint", "corrupt.ovdf", "--task", "rgb"];
    assert_eq!(mmvd(root, &corrupt).status.code(), Some(2));
    let mut bytes = fs::read(ck).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 1;
    fs::write(root.join("flipped.ovdf"), bytes).unwrap();
    let flipped = ["--config", c, "eval", "--checkpoint", "flipped.ovdf", "--task", "rgb"];
    let out = mmvd(root, &flipped);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("crc"));
    assert!(Checkpoint::load(Path::new(ck)).is_ok());
}
