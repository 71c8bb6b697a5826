//! End-to-end checks of the `pfseg` binary: exit codes, config handling,
//! and byte-level determinism of the data and training paths.

use std::path::Path;
use std::process::{Command, Output};

fn pfseg() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pfseg"));
    // Serial conformance mode keeps every byte of output reproducible.
    cmd.env("PFSEG_THREADS", "1");
    cmd
}

fn run(args: &[&str]) -> Output {
    pfseg().args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gen_data(dir: &Path, scenes: u32, seed: u64) {
    let out = run(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--scenes",
        &scenes.to_string(),
        "--size",
        "32x32",
        "--seed",
        &seed.to_string(),
    ]);
    assert!(out.status.success(), "gen-data failed: {}", stderr(&out));
}

#[test]
fn usage_errors_exit_with_code_one() {
    let cases: &[&[&str]] = &[
        &["--definitely-not-a-flag"],
        &["train", "--variant", "bogus", "--data", "x", "--out-ckpt", "y"],
        &["gen-data", "--out", "/tmp/x", "--size", "64by64"],
        &["gradcheck", "--op", "frobnicate"],
        &["gradcheck", "--trials", "0"],
        &["compare", "--variants", "", "--out-csv", "x.csv"],
    ];
    for args in cases {
        let out = run(args);
        assert_eq!(
            out.status.code(),
            Some(1),
            "args {args:?}: stderr {}",
            stderr(&out)
        );
    }
}

#[test]
fn data_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let cases: &[&[&str]] = &[
        &["train", "--variant", "baseline", "--data", missing.to_str().unwrap(), "--out-ckpt", "/tmp/x.ckpt"],
        &["eval", "--ckpt", missing.to_str().unwrap(), "--data", missing.to_str().unwrap()],
    ];
    for args in cases {
        let out = run(args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "args {args:?}: stderr {}",
            stderr(&out)
        );
    }
}

#[test]
fn a_diverging_run_exits_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, 2, 5);
    let out = run(&[
        "train",
        "--variant",
        "baseline",
        "--data",
        data.to_str().unwrap(),
        "--out-ckpt",
        tmp.path().join("x.ckpt").to_str().unwrap(),
        "--preset",
        "compact",
        "--lr",
        "1e30",
        "--steps-phase1",
        "5",
        "--steps-phase2",
        "0",
        "--crop-size",
        "32",
        "--batch-size",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("NaN"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_config_keys_are_rejected_with_their_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "lr = 0.05\nbogus_knob = 3\n").unwrap();
    let out = run(&[
        "train",
        "--variant",
        "baseline",
        "--data",
        "unused",
        "--out-ckpt",
        "unused.ckpt",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("bad.cfg:2"), "stderr: {err}");
    assert!(err.contains("bogus_knob"), "stderr: {err}");
}

#[test]
fn comments_and_blank_lines_are_ignored_in_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, 2, 5);
    let cfg = tmp.path().join("ok.cfg");
    std::fs::write(
        &cfg,
        "# a comment\n\nlr = 0.05  # trailing comment\npreset = compact\nbatch_size = 2\ncrop_size = 32\nsteps_phase1 = 2\nsteps_phase2 = 0\n",
    )
    .unwrap();
    let out = run(&[
        "train",
        "--variant",
        "baseline",
        "--data",
        data.to_str().unwrap(),
        "--out-ckpt",
        tmp.path().join("m.ckpt").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
}

#[test]
fn flags_override_config_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, 2, 5);
    let cfg = tmp.path().join("slow.cfg");
    // The file asks for far more steps than the flag; the flag must win,
    // which the step count in the final summary line exposes.
    std::fs::write(
        &cfg,
        "preset = compact\nbatch_size = 2\ncrop_size = 32\nsteps_phase1 = 500\nsteps_phase2 = 0\n",
    )
    .unwrap();
    let out = run(&[
        "train",
        "--variant",
        "baseline",
        "--data",
        data.to_str().unwrap(),
        "--out-ckpt",
        tmp.path().join("m.ckpt").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--steps-phase1",
        "3",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(
        stdout(&out).contains("(3 steps"),
        "stdout: {}",
        stdout(&out)
    );
}

#[test]
fn generated_datasets_are_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen_data(&a, 3, 42);
    gen_data(&b, 3, 42);
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 3 * 3 + 1, "3 items x 3 files + manifest");
    for name in names {
        let fa = std::fs::read(a.join(&name)).unwrap();
        let fb = std::fs::read(b.join(&name)).unwrap();
        assert_eq!(fa, fb, "{name:?} differs between identical runs");
    }
}

#[test]
fn training_twice_writes_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, 2, 9);
    let train = |ck: &Path| {
        let out = run(&[
            "train",
            "--variant",
            "stacked",
            "--data",
            data.to_str().unwrap(),
            "--out-ckpt",
            ck.to_str().unwrap(),
            "--preset",
            "compact",
            "--steps-phase1",
            "4",
            "--steps-phase2",
            "2",
            "--crop-size",
            "32",
            "--batch-size",
            "2",
        ]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
    };
    let ck1 = tmp.path().join("one.ckpt");
    let ck2 = tmp.path().join("two.ckpt");
    train(&ck1);
    train(&ck2);
    assert_eq!(
        std::fs::read(&ck1).unwrap(),
        std::fs::read(&ck2).unwrap(),
        "identical flags must write identical checkpoint bytes"
    );
    assert_eq!(
        std::fs::read(tmp.path().join("one.log.csv")).unwrap(),
        std::fs::read(tmp.path().join("two.log.csv")).unwrap(),
        "loss logs must match as well"
    );
}

#[test]
fn params_reports_the_table_of_variant_sizes() {
    let out = run(&["params", "--all"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("17071500"), "baseline total: {text}");
    assert!(text.contains("+9408"), "stacked delta: {text}");
    assert!(text.contains("+7077888"), "embed delta: {text}");
    assert!(text.contains("+9400320"), "decoder delta: {text}");
}

#[test]
fn gradcheck_passes_and_reports_every_op() {
    let out = run(&["gradcheck", "--op", "all", "--trials", "2", "--seed", "3"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for op in [
        "conv", "relu", "tanh", "add", "mul", "scale", "concat", "pool", "unpool", "sum",
        "softmax", "fusion",
    ] {
        assert!(text.contains(op), "missing op {op}: {text}");
    }
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn eval_renders_input_truth_and_prediction_images() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, 2, 5);
    let ck = tmp.path().join("m.ckpt");
    let out = run(&[
        "train", "--variant", "baseline",
        "--data", data.to_str().unwrap(),
        "--out-ckpt", ck.to_str().unwrap(),
        "--preset", "compact",
        "--steps-phase1", "2", "--steps-phase2", "0",
        "--crop-size", "32", "--batch-size", "2",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let render = tmp.path().join("render");
    let csv = tmp.path().join("metrics.csv");
    let out = run(&[
        "eval",
        "--ckpt", ck.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--out-csv", csv.to_str().unwrap(),
        "--render-dir", render.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    for i in 0..2 {
        for kind in ["input", "gt", "pred"] {
            let p = render.join(format!("item-{i}-{kind}.ppm"));
            assert!(p.is_file(), "missing {}", p.display());
            let bytes = std::fs::read(&p).unwrap();
            assert!(bytes.starts_with(b"P6"), "{kind} must be binary PPM");
        }
    }
    let metrics = std::fs::read_to_string(&csv).unwrap();
    assert!(metrics.starts_with("name,accuracy,iou,pixels\n"), "{metrics}");
    assert!(metrics.contains("\nglobal,"), "{metrics}");
}
