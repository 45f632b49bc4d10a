use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use echodiff::cli::{RunConfig, CONFIG_KEYS, FAILURE_MARKER};
use echodiff::data::{load_dataset, read_manifest};
use echodiff::metrics::{MetricsReport, HANDCRAFTED_ID};
use echodiff::models::load_checkpoint;

fn echodiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echodiff")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(root: &Path, name: &str) -> String {
    root.join(name).to_string_lossy().into_owned()
}

fn phantom(root: &Path, name: &str, n: usize, style: &str, seed: u64) {
    let n = n.to_string();
    let seed = seed.to_string();
    let o = echodiff(&[
        "phantom",
        "--out",
        &path(root, name),
        "--n",
        &n,
        "--style",
        style,
        "--seed",
        &seed,
        "--side",
        "16",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

const SMALL: &[&str] = &["--set", "side=16", "--set", "batch_size=4"];

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("run.cfg"), "# tiny run\nside = 16\nepochs = 1\nbatch_size = 4\n").unwrap();
    let cfg = path(root, "run.cfg");
    phantom(root, "a", 20, "a", 1);
    phantom(root, "b", 6, "b", 2);

    let o = echodiff(&["train", "--config", &cfg, "--data", &path(root, "a"), "--out", &path(root, "run")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt_path = root.join("run/checkpoint.bin");
    let ckpt = load_checkpoint(&ckpt_path).unwrap();
    let resolved = RunConfig::parse(&fs::read_to_string(root.join("run/config.txt")).unwrap()).unwrap();
    assert_eq!(ckpt.config_fingerprint, resolved.fingerprint());
    let log = fs::read_to_string(root.join("run/train.log")).unwrap();
    // 18 training samples in batches of 4
    assert_eq!(log.lines().filter(|l| l.starts_with("step ")).count(), 5);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch ")).count(), 1);

    let o = echodiff(&[
        "translate",
        "--config",
        &cfg,
        "--checkpoint",
        &path(root, "run/checkpoint.bin"),
        "--data",
        &path(root, "b"),
        "--out",
        &path(root, "trans"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let source = load_dataset(root.join("b")).unwrap();
    let translated = load_dataset(root.join("trans")).unwrap();
    assert_eq!(translated.ids(), source.ids());
    assert_eq!(translated.domain_tag, format!("{}-translated", source.domain_tag));
    for (t, s) in translated.samples.iter().zip(&source.samples) {
        assert_eq!(t.mask, s.mask);
    }

    let o = echodiff(&[
        "evaluate",
        "--config",
        &cfg,
        "--generated",
        &path(root, "trans"),
        "--reference",
        &path(root, "a"),
        "--ground-truth",
        &path(root, "b"),
        "--source",
        &path(root, "b"),
        "--out",
        &path(root, "eval"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("fid after ") && stdout.contains("fid before "), "{stdout}");
    let report: MetricsReport = serde_json::from_str(&fs::read_to_string(root.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report.meta.feature_extractor, HANDCRAFTED_ID);
    assert_eq!(report.meta.config_fingerprint.as_deref(), Some(resolved.fingerprint().as_str()));
    assert_eq!(report.rows.len(), 6);
    let csv = fs::read_to_string(root.join("eval/report.csv")).unwrap();
    assert!(csv.starts_with("record,id,mse,psnr_db,ssim,fid\n"));
    assert!(csv.contains("\nfid,after,") && csv.contains("\nfid,before,"));
    assert!(!root.join("eval").join(FAILURE_MARKER).exists());
}

#[test]
fn zero_epochs_writes_an_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    phantom(root, "a", 10, "a", 3);
    let (a, run) = (path(root, "a"), path(root, "run"));
    let mut args = vec!["train", "--data", &a, "--out", &run, "--set", "epochs=0"];
    args.extend_from_slice(SMALL);
    let out = echodiff(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = load_checkpoint(&root.join("run/checkpoint.bin")).unwrap();
    assert_eq!(ckpt.gen_opt.step, 0);
    assert_eq!(ckpt.disc_opt.step, 0);
    let log = fs::read_to_string(root.join("run/train.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("step ")).count(), 0);
}

#[test]
fn phantom_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    phantom(root, "one", 12, "b", 9);
    phantom(root, "two", 12, "b", 9);
    let manifest = fs::read_to_string(root.join("one/manifest.txt")).unwrap();
    assert_eq!(read_manifest(&manifest).unwrap().0.len(), 12);
    for entry in read_manifest(&manifest).unwrap().0 {
        for rel in [&entry.image, &entry.mask] {
            assert_eq!(fs::read(root.join("one").join(rel)).unwrap(), fs::read(root.join("two").join(rel)).unwrap());
        }
    }
    assert_eq!(manifest, fs::read_to_string(root.join("two/manifest.txt")).unwrap());
}

#[test]
fn unknown_style_names_the_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "p");
    let o = echodiff(&["phantom", "--out", &out, "--style", "c"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("a, b"), "{}", stderr(&o));
    assert!(dir.path().join("p").join(FAILURE_MARKER).exists());
}

#[test]
fn refuses_a_non_empty_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    phantom(root, "p", 2, "a", 1);
    let o = echodiff(&["phantom", "--out", &path(root, "p"), "--n", "2", "--side", "16"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    let o = echodiff(&["phantom", "--out", &path(root, "p"), "--n", "2", "--side", "16", "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn data_errors_exit_2_and_leave_a_marker() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::create_dir(root.join("empty")).unwrap();
    let o = echodiff(&["train", "--data", &path(root, "empty"), "--out", &path(root, "run")]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let marker = fs::read_to_string(root.join("run").join(FAILURE_MARKER)).unwrap();
    assert!(!marker.trim().is_empty());
}

#[test]
fn config_errors_cite_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    phantom(root, "a", 4, "a", 1);
    fs::write(root.join("bad.cfg"), "epochs = 1\n\nlearning_rate = 3\n").unwrap();
    let o = echodiff(&[
        "train",
        "--config",
        &path(root, "bad.cfg"),
        "--data",
        &path(root, "a"),
        "--out",
        &path(root, "run"),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn translate_refuses_a_foreign_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    phantom(root, "a", 10, "a", 3);
    let (a, run) = (path(root, "a"), path(root, "run"));
    let mut args = vec!["train", "--data", &a, "--out", &run, "--set", "epochs=0"];
    args.extend_from_slice(SMALL);
    assert_eq!(code(&echodiff(&args)), 0);
    let ckpt = path(root, "run/checkpoint.bin");
    let base = [
        "translate",
        "--checkpoint",
        &ckpt,
        "--data",
        &a,
        "--set",
        "side=16",
        "--set",
        "batch_size=4",
        "--set",
        "epochs=3",
    ];
    let mut args = base.to_vec();
    let out = path(root, "t1");
    args.extend_from_slice(&["--out", &out]);
    let o = echodiff(&args);
    assert_ne!(code(&o), 0);
    let trained = load_checkpoint(Path::new(&ckpt)).unwrap();
    assert!(stderr(&o).contains(&trained.config_fingerprint), "{}", stderr(&o));
    let mut args = base.to_vec();
    let out = path(root, "t2");
    args.extend_from_slice(&["--out", &out, "--allow-config-mismatch"]);
    let o = echodiff(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn evaluate_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    phantom(root, "a", 5, "a", 4);
    let a = path(root, "a");
    let o = echodiff(&[
        "evaluate",
        "--generated",
        &a,
        "--reference",
        &a,
        "--ground-truth",
        &a,
        "--out",
        &path(root, "eval"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: MetricsReport = serde_json::from_str(&fs::read_to_string(root.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report.mse.as_ref().unwrap().mean, 0.0);
    assert_eq!(report.ssim.as_ref().unwrap().mean, 1.0);
    assert!(report.psnr_db.is_none());
    assert!(report.fid_value("before").is_none());
}

#[test]
fn help_lists_every_flag_and_config_default() {
    let defaults = RunConfig::default();
    let expect = [
        (
            "phantom",
            vec![
                "--out",
                "--n",
                "[default: 100]",
                "--style",
                "[default: a]",
                "--seed",
                "[default: 7]",
                "--side",
                "[default: 64]",
                "--force",
            ],
        ),
        ("train", vec!["--config", "--set", "--data", "--out", "--force"]),
        (
            "translate",
            vec![
                "--config",
                "--set",
                "--checkpoint",
                "--data",
                "--out",
                "--seed",
                "[default: 7]",
                "--allow-config-mismatch",
                "--force",
            ],
        ),
        (
            "evaluate",
            vec![
                "--config",
                "--set",
                "--generated",
                "--reference",
                "--ground-truth",
                "--source",
                "--out",
                "--force",
            ],
        ),
    ];
    for (cmd, needles) in expect {
        let o = echodiff(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8_lossy(&o.stdout);
        for n in needles {
            assert!(text.contains(n), "{cmd} --help lacks {n}:\n{text}");
        }
        if cmd != "phantom" {
            for (key, _) in CONFIG_KEYS {
                let line = text
                    .lines()
                    .find(|l| l.trim_start().starts_with(&format!("{key} ")))
                    .unwrap_or_else(|| panic!("{cmd}: {key}"));
                assert!(line.ends_with(&format!("[default: {}]", defaults.get(key).unwrap())), "{line}");
            }
        }
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&echodiff(&[])), 1);
    assert_eq!(code(&echodiff(&["phantom"])), 1);
    assert_eq!(code(&echodiff(&["bogus"])), 1);
}
