use std::path::Path;
use std::process::{Command, Output};

fn fsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsde")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn simulate_fbm_writes_full_precision_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.csv");
    let o = fsde(&["simulate-fbm", "--hurst", "0.7", "--horizon", "2", "--steps", "64", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,value"));
    assert_eq!(text.lines().count(), 66);
    // Same seed on stdout gives the same bytes.
    let again = fsde(&["simulate-fbm", "--hurst", "0.7", "--horizon", "2", "--steps", "64", "--seed", "3"]);
    assert_eq!(stdout(&again), text);
}

#[test]
fn coupled_file_round_trips_through_estimation() {
    let dir = tempfile::tempdir().unwrap();
    let paths = dir.path().join("cp.csv");
    let p = paths.to_str().unwrap();
    let o = fsde(&[
        "simulate-sde", "--model", "tanh", "--horizon", "60", "--step", "0.05", "--epsilon", "0.01",
        "--burn-in", "20", "--seed", "1", "--out", p,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&paths).unwrap().starts_with("t,base,shifted,log_gap\n"));
    let est = dir.path().join("est.csv");
    let o = fsde(&[
        "estimate-drift", "--input", p, "--x", "-0.5,0.5", "--x", "9", "--bandwidth", "fixed:0.5",
        "--epsilon", "fixed:0.01", "--out", est.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&est).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "x,f_hat,b_tilde,b_hat_eps,correction,degenerate");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].ends_with("false") && rows[3].ends_with("true"));
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "t,value\n0,1\n1,oops\n2,3\n").unwrap();
    let o = fsde(&["estimate-drift", "--input", bad.to_str().unwrap(), "--x", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    let o = fsde(&["simulate-fbm", "--hurst", "1.2", "--horizon", "1", "--steps", "8"]);
    assert_eq!(o.status.code(), Some(2));
    let o = fsde(&["estimate-drift", "--simulate", "--horizon", "50", "--bandwidth", "wide"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mehler_check_prints_verdict_line() {
    let o = fsde(&["check", "mehler", "--q", "2", "--rho", "0.5", "--samples", "20000", "--seed", "4"]);
    assert!(o.status.success());
    let s = stdout(&o);
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("PASS,"), "{s}");
}

#[test]
fn experiment_writes_outputs_and_uses_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(
        &cfg,
        "drift = linear\nhurst = 0.7\nstep = 0.05\nhorizons = 30, 60\nx = 0.5\nreplications = 6\nseed = 2\n",
    )
    .unwrap();
    let out = dir.path().join("res");
    let run = |threads: &str, out: &Path| {
        fsde(&[
            "experiment", "pathwise_collapse", "--config", cfg.to_str().unwrap(), "--threads", threads,
            "--out", out.to_str().unwrap(),
        ])
    };
    let o = run("2", &out);
    assert!(matches!(o.status.code(), Some(0) | Some(1)));
    for f in ["records.csv", "summary.json", "verdicts.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let verdicts = std::fs::read_to_string(out.join("verdicts.txt")).unwrap();
    let all_pass = !verdicts.lines().any(|l| l.starts_with("FAIL"));
    assert_eq!(o.status.code() == Some(0), all_pass);
    let other = dir.path().join("res1");
    run("1", &other);
    assert_eq!(
        std::fs::read(out.join("records.csv")).unwrap(),
        std::fs::read(other.join("records.csv")).unwrap()
    );
    std::fs::write(&cfg, "drift = linear\nwidth = 3\n").unwrap();
    let o = run("1", &other);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));
}
