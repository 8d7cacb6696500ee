use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_maskpredict"))
}

/// Small corpus and model so each command finishes in seconds.
#[rustfmt::skip]
const TINY: &[&str] = &[
    "--set", "n_train=64",
    "--set", "n_val=16",
    "--set", "n_test=8",
    "--set", "grid_height=4",
    "--set", "grid_width=4",
    "--set", "periods=2,4",
    "--set", "enc_layers=1",
    "--set", "dec_layers=1",
    "--set", "width=16",
    "--set", "heads=2",
    "--set", "batch_size=4",
    "--set", "log_interval=5",
    "--set", "val_records=8",
    "--set", "eval_records=4",
    "--set", "t_values=2,4,8,16",
];

/// Runs a subcommand with the tiny settings; `args` come last so they win.
fn run(args: &[&str], out: &Path) -> Output {
    bin()
        .args(&args[..1])
        .args(TINY)
        .args(&args[1..])
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_data_is_deterministic_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a/deeper");
    let b = dir.path().join("b");
    ok(&run(&["gen-data", "--seed", "4"], &a));
    ok(&run(&["gen-data", "--seed", "4"], &b));
    for split in ["train", "val", "test"] {
        let fa = std::fs::read(a.join("data").join(format!("{split}.txt"))).unwrap();
        let fb = std::fs::read(b.join("data").join(format!("{split}.txt"))).unwrap();
        assert_eq!(fa, fb, "{split} differs");
    }
    let again = run(&["gen-data", "--seed", "4"], &a);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&run(&["gen-data", "--seed", "4", "--force"], &a));
}

#[test]
fn unknown_family_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--set", "families=stripes,spirals"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("spirals") && err.contains("two_region"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--set", "learning_rate=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# comment\nseed = 3\nbogus = 1\n").unwrap();
    let o = bin()
        .arg("gen-data")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn config_file_and_flags_resolve_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 3\nregime = iter_v3\n").unwrap();
    let o = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .args(["--seed", "9", "--out"])
        .arg(dir.path())
        .args(TINY)
        .output()
        .unwrap();
    let stdout = ok(&o);
    assert!(stdout.starts_with("# resolved config"));
    assert!(stdout.contains("\nseed=9\n"), "{stdout}");
    assert!(stdout.contains("\nregime=iter_v3\n"), "{stdout}");
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(&["gen-data"], dir.path()));
    let o = run(&["decode", "--checkpoint", "/nonexistent/x.ckpt"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["decode"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_resume_decode_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&run(&["gen-data"], out));
    ok(&run(&["train", "--regime", "iter_v3", "--set", "steps=10"], out));
    let ckpt = out.join("iter_v3.ckpt");
    assert!(ckpt.exists());
    let curve = std::fs::read_to_string(out.join("curve_iter_v3.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4, "{curve}");

    // Training again without --force or --checkpoint would clobber the run.
    let o = run(&["train", "--regime", "iter_v3", "--set", "steps=10"], out);
    assert_eq!(o.status.code(), Some(2));

    let ck = ckpt.display().to_string();
    let stdout = ok(&run(
        &["train", "--regime", "iter_v3", "--checkpoint", &ck, "--set", "steps=20"],
        out,
    ));
    assert!(stdout.contains("resuming from step 10"), "{stdout}");
    let curve = std::fs::read_to_string(out.join("curve_iter_v3.csv")).unwrap();
    assert_eq!(curve.lines().count(), 6, "{curve}");

    let o = run(
        &["train", "--regime", "iter_v1", "--checkpoint", &ck, "--set", "steps=20"],
        out,
    );
    assert_eq!(o.status.code(), Some(2));

    let stdout = ok(&run(
        &["decode", "--checkpoint", &ck, "--candidates", "16", "--iterations", "4"],
        out,
    ));
    assert!(stdout.contains("mode_match"), "{stdout}");
    let grids = std::fs::read_to_string(out.join("decode.txt")).unwrap();
    assert_eq!(grids.lines().count(), 4 * 16);
    assert_eq!(grids.lines().filter(|l| l.contains("selected=true")).count(), 4);
    let telemetry = std::fs::read_to_string(out.join("decode_telemetry.txt")).unwrap();
    assert!(telemetry.lines().any(|l| l.contains("decode.iter t=4")));

    ok(&run(
        &[
            "sweep-iterations",
            "--checkpoint",
            &ck,
            "--set",
            "t_values=1,2,4,8",
            "--set",
            "latency_repeats=1",
        ],
        out,
    ));
    let csv = std::fs::read_to_string(out.join("sweep_iterations.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let o = run(&["decode", "--checkpoint", &ck, "--iterations", "17"], out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_reports_pass_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&run(
        &[
            "bench",
            "--iterations",
            "4",
            "--set",
            "latency_repeats=1",
            "--set",
            "latency_warmup=0",
        ],
        dir.path(),
    ));
    assert!(stdout.contains("pass ratio 16:4"), "{stdout}");
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert!(csv.contains("maskpredict,4,4,1,"), "{csv}");
    assert!(csv.contains("autoregressive,16,16,1,"), "{csv}");
}

#[test]
fn schedule_sweep_writes_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&run(&["gen-data"], out));
    ok(&run(
        &[
            "sweep-schedules",
            "--iterations",
            "4",
            "--set",
            "sweep_steps=3",
            "--set",
            "sweep_regimes=iter_v1,iter_v3",
            "--set",
            "eval_records=2",
        ],
        out,
    ));
    let csv = std::fs::read_to_string(out.join("sweep_schedules.csv")).unwrap();
    // 2 regimes x 2 training schedules x 2 inference schedules.
    assert_eq!(csv.lines().count(), 9, "{csv}");
}
