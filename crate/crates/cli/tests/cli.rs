use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn epg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epg"))
        .args(args)
        .env_remove("EPG_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn run_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "logit-2seg", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    epg(&args)
}

const HEADER: &str = "t,x,explored,a,y,regret_increment,cum_regret,theta_err_sq,rho_min_V,\
thm31_bound,thm31_ok,thm32_bound,thm32_applicable,lemma44_ok";

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for d in [&a, &b] {
        let out = run_into(
            d.path(),
            &["--t-max", "2000", "--seed", "9", "--full-trace"],
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let (ta, tb) = (a.path().join("trace.csv"), b.path().join("trace.csv"));
    assert_eq!(fs::read(&ta).unwrap(), fs::read(&tb).unwrap());
    assert_eq!(
        fs::read(a.path().join("summary.txt")).unwrap(),
        fs::read(b.path().join("summary.txt")).unwrap()
    );

    let diff = epg(&["diff", ta.to_str().unwrap(), tb.to_str().unwrap()]);
    assert_eq!(diff.status.code(), Some(0));
}

#[test]
fn trace_has_golden_header_and_row_count() {
    let d = TempDir::new().unwrap();
    let out = run_into(d.path(), &["--t-max", "300", "--checkpoints", "100,200"]);
    assert!(out.status.success());
    let text = fs::read_to_string(d.path().join("trace.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], HEADER);
    let ts: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(ts, ["100", "200", "300"]);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 14));
}

#[test]
fn zero_horizon_writes_header_only() {
    let d = TempDir::new().unwrap();
    let out = run_into(d.path(), &["--t-max", "0"]);
    assert!(out.status.success());
    assert_eq!(
        fs::read_to_string(d.path().join("trace.csv")).unwrap(),
        format!("{HEADER}\n")
    );
}

#[test]
fn config_errors_exit_with_two() {
    let d = TempDir::new().unwrap();
    let bad = d.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\nunknown_field = 1\n").unwrap();
    assert_eq!(
        epg(&[
            "run",
            bad.to_str().unwrap(),
            "--out",
            d.path().to_str().unwrap()
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(epg(&["run", "no-such-env"]).status.code(), Some(2));
    assert_eq!(
        run_into(d.path(), &["--algorithm", "bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run_into(d.path(), &["--t-max", "10", "--checkpoints", "20"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(epg(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn oracle_regret_is_negligible() {
    let d = TempDir::new().unwrap();
    let out = run_into(d.path(), &["--algorithm", "oracle", "--t-max", "5000"]);
    assert!(out.status.success());
    let summary = fs::read_to_string(d.path().join("summary.txt")).unwrap();
    let regret: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("final_regret = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(regret.abs() <= 1e-6 * 5000.0, "oracle regret {regret}");
}

#[test]
fn replicate_is_invariant_to_job_count() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for (d, jobs) in [(&a, "1"), (&b, "3")] {
        let out = epg(&[
            "replicate",
            "gauss-1seg",
            "--t-max",
            "1000",
            "--seeds",
            "4",
            "--jobs",
            jobs,
            "--out",
            d.path().to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for f in ["checkpoints.csv", "summary.txt"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn certify_prints_certificate() {
    let out = epg(&["certify", "logit-2seg"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("rho_H") && text.contains("schedule.sandwich"));
}

#[test]
fn output_dir_from_environment() {
    let d = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_epg"))
        .args(["run", "logit-2seg", "--t-max", "50"])
        .env("EPG_OUTPUT_DIR", d.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.path().join("trace.csv").is_file());
}
