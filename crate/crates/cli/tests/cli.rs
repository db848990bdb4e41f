use std::fs;
use std::path::Path;

use feedkit_cli::run_cli_with;

const TINY: &[&str] = &[
    "arch=resnet8-c3",
    "classes=3",
    "samples_per_class=4",
    "test_samples_per_class=2",
    "image_size=4",
    "epochs=1",
    "batch_size=6",
    "lr_schedule=",
];

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(out_dir: &Path, args: &[&str]) -> Out {
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let code = run_cli_with(
        args.iter().copied(),
        Some(out_dir.to_path_buf()),
        &mut o,
        &mut e,
    );
    Out {
        code,
        stdout: String::from_utf8(o).unwrap(),
        stderr: String::from_utf8(e).unwrap(),
    }
}

fn with_tiny<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(TINY);
    v.extend_from_slice(extra);
    v
}

#[test]
fn unknown_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(dir.path(), &["train-scratch", "bogus=1"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("bogus"), "{}", r.stderr);
    assert!(
        r.stderr.contains("valid keys") && r.stderr.contains("batch_size"),
        "{}",
        r.stderr
    );
}

#[test]
fn unknown_subcommand_and_empty_args_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).code, 1);
    assert_eq!(run(dir.path(), &[]).code, 1);
    assert_eq!(run(dir.path(), &["train-scratch", "noequals"]).code, 1);
    assert_eq!(run(dir.path(), &["--help"]).code, 0);
}

#[test]
fn missing_teacher_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(
        dir.path(),
        &with_tiny("distill", &["method=kd", "teachers=/no/such/teacher.ckpt"]),
    );
    assert_eq!(r.code, 1, "{}", r.stderr);
    assert!(r.stderr.contains("/no/such/teacher.ckpt"), "{}", r.stderr);
}

#[test]
fn missing_checkpoint_for_evaluate_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(dir.path(), &["evaluate", "ckpt=/no/such.ckpt"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("/no/such.ckpt"), "{}", r.stderr);
}

#[test]
fn train_then_evaluate_then_distill() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(
        dir.path(),
        &with_tiny("train-scratch", &["run_id=teach", "seed=1"]),
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let ckpt = dir.path().join("teach.ckpt");
    assert!(ckpt.is_file());
    assert!(dir.path().join("teach.csv").is_file());
    assert!(
        r.stdout.contains("teach stack=0 method=ce test_error="),
        "{}",
        r.stdout
    );

    let arg = format!("ckpt={}", ckpt.display());
    let r = run(dir.path(), &with_tiny("evaluate", &[&arg]));
    assert_eq!(r.code, 0, "{}", r.stderr);
    let line = r.stdout.trim();
    let pct = line
        .strip_prefix("test_error=")
        .and_then(|v| v.strip_suffix('%'))
        .unwrap();
    let v: f64 = pct.parse().unwrap();
    assert!((0.0..=100.0).contains(&v));

    let teachers = format!("teachers={}", ckpt.display());
    let r = run(
        dir.path(),
        &with_tiny(
            "distill",
            &["method=feed", "beta=0.5", "run_id=stud", &teachers],
        ),
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(dir.path().join("stud.ckpt").is_file());

    let two = format!("teachers={0},{0}", ckpt.display());
    let r = run(
        dir.path(),
        &with_tiny("distill", &["method=l1", "beta=0.5", "run_id=multi", &two]),
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let r = run(
        dir.path(),
        &with_tiny("pfeed", &["beta=0.5", "run_id=par", &two]),
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let r = run(dir.path(), &with_tiny("pfeed", &["run_id=one", &teachers]));
    assert_eq!(r.code, 1, "single-teacher pfeed: {}", r.stderr);

    let ckpts = format!(
        "ckpts={},{}",
        ckpt.display(),
        dir.path().join("stud.ckpt").display()
    );
    let r = run(
        dir.path(),
        &with_tiny(
            "analyze-recon",
            &[&ckpts, "recon_epochs=2", "recon_batch_size=4"],
        ),
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(dir.path().join("recon-teach.csv").is_file());
    assert!(dir.path().join("recon-stud.csv").is_file());
    let summary = fs::read_to_string(dir.path().join("recon-summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3, "{summary}");
}

#[test]
fn config_file_with_comments_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    let mut text = String::from("# tiny run\n\n");
    for kv in TINY {
        text.push_str(kv);
        text.push_str("   # trailing comment\n");
    }
    text.push_str("run_id=fromfile\n");
    fs::write(&file, text).unwrap();
    let cfg = format!("config={}", file.display());
    let r = run(dir.path(), &["train-scratch", &cfg, "--run_id=override"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(dir.path().join("override.ckpt").is_file());
    assert!(!dir.path().join("fromfile.ckpt").exists());

    fs::write(&file, "not a pair\n").unwrap();
    let r = run(dir.path(), &["train-scratch", &cfg]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains(":1:"), "{}", r.stderr);
}

#[test]
fn sfeed_writes_every_stack() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(
        dir.path(),
        &with_tiny("sfeed", &["stacks=2", "run_id=ch", "beta=0.5"]),
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    for s in 1..=2 {
        assert!(dir.path().join(format!("ch-stack{s}.ckpt")).is_file());
    }
    assert_eq!(r.stdout.lines().count(), 2);
    let r = run(dir.path(), &with_tiny("sfeed", &["stacks=1", "run_id=ch"]));
    assert_eq!(r.code, 1);
}

#[test]
fn corrupted_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(dir.path(), &with_tiny("train-scratch", &["run_id=c"])).code,
        0
    );
    let p = dir.path().join("c.ckpt");
    let mut bytes = fs::read(&p).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&p, bytes).unwrap();
    let arg = format!("ckpt={}", p.display());
    let r = run(dir.path(), &with_tiny("evaluate", &[&arg]));
    assert_eq!(r.code, 2, "{}", r.stderr);
}
