use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfhi_core::config::RunConfig;
use mfhi_core::dataset::{tensor_io, DatasetManifest};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/selftest.toml");

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn mfhi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfhi"))
        .args(args)
        .env_remove("MFHI_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mfhi(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "timing.log" {
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// gen + train with the self-test fixture into `root`.
fn pipeline(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let run = root.join("run");
    ok(&["gen", "--config", FIXTURE, "--out", s(&data)]);
    ok(&["train", "--config", FIXTURE, "--data", s(&data), "--out", s(&run)]);
    (data, run)
}

#[test]
fn help_output_matches_golden_files() {
    for sub in ["", "gen", "train", "eval", "sweep", "dump-attention"] {
        let mut args: Vec<&str> = if sub.is_empty() { vec![] } else { vec![sub] };
        args.push("--help");
        let name = format!("help-{}.txt", if sub.is_empty() { "mfhi" } else { sub });
        let expected = std::fs::read_to_string(golden(&name)).unwrap();
        assert_eq!(ok(&args), expected, "{name}");
    }
}

#[test]
fn help_lists_every_flag() {
    let train = std::fs::read_to_string(golden("help-train.txt")).unwrap();
    for flag in ["--config", "--data", "--out", "--mode", "--episodes", "--seed", "--resume"] {
        assert!(train.contains(flag), "{flag}");
    }
    let sweep = std::fs::read_to_string(golden("help-sweep.txt")).unwrap();
    for flag in ["--checkpoint-dir", "--grid", "--seeds", "--episodes"] {
        assert!(sweep.contains(flag), "{flag}");
    }
}

#[test]
fn default_config_file_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = RunConfig::load(&path).unwrap();
    let defaults = RunConfig::default();
    assert_eq!(cfg.r#gen, defaults.r#gen);
    assert_eq!(cfg.train, defaults.train);
    assert_eq!(cfg.eval, defaults.eval);
    assert_eq!(cfg.sweep.points().len(), 12);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let t = s(tmp.path());
    assert_eq!(code(&mfhi(&[])), 2);
    assert_eq!(code(&mfhi(&["gen"])), 2);
    assert_eq!(code(&mfhi(&["frobnicate"])), 2);
    assert_eq!(code(&mfhi(&["eval", "--checkpoint", t, "--data", t, "--protocol", "x2y"])), 2);
    assert_eq!(code(&mfhi(&["train", "--data", t, "--out", t, "--mode", "both"])), 2);
    assert_eq!(code(&mfhi(&["train", "--data", t, "--out", t, "--episodes", "-3"])), 2);
}

#[test]
fn validation_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen", "--config", FIXTURE, "--out", s(&data)]);

    let again = mfhi(&["gen", "--config", FIXTURE, "--out", s(&data)]);
    assert_eq!(code(&again), 3);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["gen", "--config", FIXTURE, "--out", s(&data), "--force"]);

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepisodez = 3\n").unwrap();
    let out = mfhi(&["train", "--config", s(&bad), "--data", s(&data), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("episodez"));
}

#[test]
fn numeric_failure_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen", "--config", FIXTURE, "--out", s(&data)]);
    let cfg = tmp.path().join("blowup.toml");
    std::fs::write(&cfg, "[train]\nidentities_per_episode = 6\nshots = 2\n[train.optimizer]\nlearning_rate = 1e30\n").unwrap();
    let out = mfhi(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("r")), "--episodes", "50"]);
    assert_eq!(code(&out), 4);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("episode"), "{err}");
}

#[test]
fn io_failure_exits_5() {
    let out = mfhi(&["gen", "--out", "/proc/mfhi-cannot-exist/data"]);
    assert_eq!(code(&out), 5);
    let tmp = tempfile::tempdir().unwrap();
    let out = mfhi(&["eval", "--checkpoint", s(&tmp.path().join("nope")), "--data", s(tmp.path()), "--protocol", "i2a"]);
    assert_eq!(code(&out), 5);
}

#[test]
fn gen_prints_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["gen", "--config", FIXTURE, "--out", s(&tmp.path().join("d"))]);
    assert!(out.starts_with("K=12 L=4 Q=12 features=16x8x8 images=96 flavor=face-style seed=21"), "{out}");
}

#[test]
fn seed_comes_from_flag_then_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, flag: Option<&str>, env: Option<&str>| {
        let dir = tmp.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mfhi"));
        cmd.args(["gen", "--config", FIXTURE, "--out", s(&dir)]).env_remove("MFHI_SEED");
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        if let Some(e) = env {
            cmd.env("MFHI_SEED", e);
        }
        assert!(cmd.output().unwrap().status.success());
        tree(&dir)
    };
    let flag7 = run("flag7", Some("7"), None);
    assert_eq!(run("env7", None, Some("7")), flag7);
    assert_eq!(run("both", Some("7"), Some("9")), flag7);
    assert_ne!(run("fixture", None, None), flag7);

    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mfhi"));
    cmd.args(["gen", "--out", s(&tmp.path().join("junk"))]).env("MFHI_SEED", "seven");
    assert_eq!(cmd.output().unwrap().status.code(), Some(3));
}

#[test]
fn full_pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let root = tmp.path().join(name);
        let (data, run) = pipeline(&root);
        for p in ["i2a", "a2i", "i2i"] {
            ok(&["eval", "--checkpoint", s(&run.join("model")), "--data", s(&data), "--protocol", p]);
        }
        trees.push(tree(&root));
    }
    assert_eq!(trees[0], trees[1]);
    let reports = trees[0].keys().filter(|k| k.contains("report-")).count();
    assert_eq!(reports, 6);
}

#[test]
fn i2a_report_matches_stored_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = pipeline(tmp.path());
    let reports = tmp.path().join("reports");
    ok(&["eval", "--checkpoint", s(&run.join("model")), "--data", s(&data), "--protocol", "i2a", "--out", s(&reports)]);
    let files = tree(&reports);
    let (name, text) = files.iter().find(|(k, _)| k.ends_with(".txt")).unwrap();
    let expected = std::fs::read(golden("selftest-i2a.txt")).unwrap();
    assert_eq!(String::from_utf8_lossy(text), String::from_utf8_lossy(&expected), "{name}");
}

#[test]
fn zero_episodes_leaves_the_initial_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["gen", "--config", FIXTURE, "--out", s(&data)]);
    ok(&["train", "--config", FIXTURE, "--data", s(&data), "--out", s(&run), "--episodes", "0"]);
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(run.join("model/checkpoint.json").is_file());
    assert!(!run.join("checkpoints").exists());
}

#[test]
fn eval_reports_shape_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, run) = pipeline(tmp.path());
    let cfg = tmp.path().join("wide.toml");
    std::fs::write(&cfg, "[gen]\ntrain_identities = 12\ntest_identities = 4\nchannels = 10\n").unwrap();
    let wide = tmp.path().join("wide");
    ok(&["gen", "--config", s(&cfg), "--out", s(&wide)]);
    let out = mfhi(&["eval", "--checkpoint", s(&run.join("model")), "--data", s(&wide), "--protocol", "a2i"]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("16") && err.contains("10"), "{err}");
}

#[test]
fn train_mode_flag_selects_i2i() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["gen", "--config", FIXTURE, "--out", s(&data)]);
    ok(&["train", "--config", FIXTURE, "--data", s(&data), "--out", s(&run), "--mode", "i2i", "--episodes", "5"]);
    ok(&["eval", "--checkpoint", s(&run.join("model")), "--data", s(&data), "--protocol", "i2i"]);
    let out = mfhi(&["eval", "--checkpoint", s(&run.join("model")), "--data", s(&data), "--protocol", "a2i"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn dump_attention_writes_deterministic_maps_and_flags_unknown_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = pipeline(tmp.path());
    let ids = first_images(&data, 3);
    let joined = ids.join(",");
    let a = tmp.path().join("dump-a");
    let b = tmp.path().join("dump-b");
    ok(&["dump-attention", "--checkpoint", s(&run.join("model")), "--data", s(&data), "--images", &joined, "--out", s(&a)]);
    ok(&["dump-attention", "--checkpoint", s(&run.join("model")), "--data", s(&data), "--images", &joined, "--out", s(&b)]);
    assert_eq!(tree(&a), tree(&b));
    for id in &ids {
        let map = tensor_io::read(&a.join(format!("{id}.mft"))).unwrap();
        assert_eq!(map.shape(), &[1, 8, 8]);
        let pgm = std::fs::read(a.join(format!("{id}.pgm"))).unwrap();
        let pixels = &pgm[pgm.len() - 64..];
        assert_eq!(*pixels.iter().min().unwrap(), 0);
        assert_eq!(*pixels.iter().max().unwrap(), 255);
        let header = std::fs::read_to_string(a.join(format!("{id}.txt"))).unwrap();
        assert!(header.starts_with(&format!("image\t{id}\n")));
    }

    let c = tmp.path().join("dump-c");
    let list = format!("{},ghost-1,{},ghost-2", ids[0], ids[1]);
    let out = mfhi(&["dump-attention", "--checkpoint", s(&run.join("model")), "--data", s(&data), "--images", &list, "--out", s(&c)]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ghost-1") && err.contains("ghost-2"), "{err}");
    assert!(c.join(format!("{}.mft", ids[0])).is_file());
    assert!(c.join(format!("{}.mft", ids[1])).is_file());
}

#[test]
fn sweep_prints_one_row_per_point_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, _) = pipeline(tmp.path());
    let dir = tmp.path().join("sweep");
    let out = ok(&[
        "sweep", "--config", FIXTURE, "--data", s(&data), "--checkpoint-dir", s(&dir),
        "--grid", "r=8,64", "D=5,10,12", "--seeds", "0,1", "--episodes", "4",
    ]);
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with("wrote")).collect();
    assert_eq!(rows.len(), 1 + 2 * 3 * 2);
    assert!(rows[0].starts_with("r\td\tD\tseed"));
    let ds: Vec<&str> = rows[1..].iter().map(|r| r.split('\t').nth(2).unwrap()).collect();
    assert_eq!(&ds[..6], &["5", "5", "10", "10", "12", "12"]);

    let bad = mfhi(&["sweep", "--data", s(&data), "--checkpoint-dir", s(&dir), "--grid", "q=1"]);
    assert_eq!(code(&bad), 3);
}

fn first_images(data: &Path, n: usize) -> Vec<String> {
    let manifest = DatasetManifest::load(data).unwrap();
    manifest.identities.iter().flat_map(|i| i.images.iter().map(|im| im.id.clone())).take(n).collect()
}

#[test]
fn sweep_over_d_5_10_14_gives_those_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("q14.toml");
    std::fs::write(&cfg, "[gen]\ntrain_identities = 8\ntest_identities = 3\nattributes = 14\n[train]\nidentities_per_episode = 4\nshots = 2\n").unwrap();
    let data = tmp.path().join("data");
    ok(&["gen", "--config", s(&cfg), "--out", s(&data)]);
    let out = ok(&[
        "sweep", "--config", s(&cfg), "--data", s(&data), "--checkpoint-dir", s(&tmp.path().join("sw")),
        "--grid", "D=5,10,14", "--episodes", "2",
    ]);
    let ds: Vec<&str> = out.lines().skip(1).filter(|l| !l.starts_with("wrote")).map(|r| r.split('\t').nth(2).unwrap()).collect();
    assert_eq!(ds, ["5", "10", "14"]);
}
