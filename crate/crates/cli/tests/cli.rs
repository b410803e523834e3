use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cskd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cskd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cskd(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Model and loop flags for a 16x16, 4-class problem that trains in well under a second.
fn tiny(data: &Path, out: &Path) -> Vec<String> {
    [
        ("data_root", s(data)),
        ("out_dir", s(out)),
        ("image_size", "16".into()),
        ("num_classes", "4".into()),
        ("teacher_channels", "4,8".into()),
        ("patch_size", "2".into()),
        ("embed_dim", "8".into()),
        ("num_heads", "2".into()),
        ("num_layers", "1".into()),
        ("epochs", "2".into()),
        ("batch_size", "16".into()),
        ("warmup_epochs", "1".into()),
    ]
    .into_iter()
    .flat_map(|(k, v)| [format!("--{k}"), v])
    .collect()
}

fn with<'a>(base: &'a [String], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().map(String::as_str).chain(extra.iter().copied()).collect()
}

fn gen_data(root: &Path) -> PathBuf {
    let data = root.join("data");
    ok(&["gen-data", "--out", &s(&data), "--train", "64", "--val", "32", "--classes", "4", "--size", "16"]);
    data
}

#[test]
fn full_pipeline_writes_runs_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path());
    for f in ["train-images.idx", "train-labels.idx", "val-images.idx", "val-labels.idx"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let tdir = tmp.path().join("teacher");
    let targs = tiny(&data, &tdir);
    let stdout = ok(&[&["train-teacher"][..], &with(&targs, &[])].concat());
    assert!(stdout.contains("train_top1=") && stdout.contains("val_top1="), "{stdout}");
    let teacher = tdir.join("teacher.ckpt");
    assert!(teacher.exists());

    let sdir = tmp.path().join("student");
    let sargs = tiny(&data, &sdir);
    let stdout = ok(&[
        &["distill"][..],
        &with(&sargs, &["--teacher_ckpt", &s(&teacher), "--snapshot_every", "1"]),
    ]
    .concat());
    assert!(stdout.contains("val_top1="), "{stdout}");
    let mut names: Vec<String> = fs::read_dir(&sdir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["config.txt", "metrics.csv", "student.ckpt", "student_best.ckpt", "student_e001.ckpt", "student_e002.ckpt"]
    );
    let frozen = fs::read_to_string(sdir.join("config.txt")).unwrap();
    assert!(frozen.contains("snapshot_every=1"), "{frozen}");

    let student = s(&sdir.join("student.ckpt"));
    let data_flag = ["--data_root", &s(&data)];
    let report = ok(&[&["eval", "--checkpoint", &student][..], &data_flag].concat());
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 2, "{report}");
    assert!(lines[0].starts_with("deit top1=") && lines[1].starts_with("cskd_ensemble top1="), "{report}");
    let one = ok(&[&["eval", "--checkpoint", &student, "--mode", "deit"][..], &data_flag].concat());
    assert_eq!(one.lines().count(), 1);

    let csv = tmp.path().join("attn.csv");
    let dump = tmp.path().join("attn.bin");
    ok(&[
        &["analyze", "attention", "--checkpoint", &student, "--images", "8"][..],
        &["--out", &s(&csv), "--dump", &s(&dump)],
        &data_flag,
    ]
    .concat());
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "layer,head0,head1,mean");
    assert_eq!(rows.len(), 2);
    assert!(dump.exists());

    let resp = tmp.path().join("responses");
    let first = s(&sdir.join("student_e001.ckpt"));
    ok(&[
        &["analyze", "responses", "--checkpoint", &first, "--checkpoint", &student][..],
        &["--images", "3", "--out", &s(&resp)],
        &data_flag,
    ]
    .concat());
    let sample = fs::read_to_string(resp.join("responses_s000.csv")).unwrap();
    // Header plus 8x8 patches for each of the two checkpoints.
    assert_eq!(sample.lines().count(), 1 + 2 * 64);
    assert!(resp.join("responses_s002.csv").exists() && !resp.join("responses_s003.csv").exists());

    let bdir = tmp.path().join("baseline");
    let bargs = tiny(&data, &bdir);
    ok(&[&["distill"][..], &with(&bargs, &["--teacher_ckpt", &s(&teacher), "--cskd_weight", "0"])].concat());
    let trace = ok(&[
        "analyze",
        "dynamics",
        "--metrics",
        &s(&sdir.join("metrics.csv")),
        "--baseline",
        &s(&bdir.join("metrics.csv")),
    ]);
    assert!(trace.lines().next().unwrap().ends_with(",delta"), "{trace}");
    assert_eq!(trace.lines().count(), 3);
}

#[test]
fn distill_without_teacher_is_a_config_error_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path());
    let out_dir = tmp.path().join("run");
    let args = tiny(&data, &out_dir);
    let out = cskd(&[&["distill"][..], &with(&args, &[])].concat());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("teacher_ckpt"));
    assert!(!out_dir.exists());
}

#[test]
fn missing_files_exit_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let absent = s(&tmp.path().join("nothing.ckpt"));
    assert_eq!(code(&cskd(&["eval", "--checkpoint", &absent])), 3);
    let out_dir = tmp.path().join("run");
    let args = tiny(&tmp.path().join("no-data"), &out_dir);
    assert_eq!(code(&cskd(&[&["train-teacher"][..], &with(&args, &[])].concat())), 3);
    assert!(!out_dir.exists());
}

#[test]
fn bad_flags_and_values_exit_with_code_two() {
    assert_eq!(code(&cskd(&["distill", "--no_such_key", "1"])), 2);
    let out = cskd(&["train-teacher", "--temperature", "0"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("temperature"));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.txt");
    fs::write(&cfg, "seed=1\nepochs=many\n").unwrap();
    let out = cskd(&["train-teacher", "--config", &s(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}
