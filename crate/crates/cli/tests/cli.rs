use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo_file(rel: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", rel].iter().collect()
}

fn orbitfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orbitfl")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The example config, shortened to `cycles` cycles, written into `dir`.
fn short_config(dir: &Path, name: &str, cycles: usize, edit: impl Fn(String) -> String) -> PathBuf {
    let text = fs::read_to_string(repo_file("configs/example.toml")).unwrap();
    let text = edit(text.replace("cycles = 30", &format!("cycles = {cycles}")));
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_every_output_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), "c.toml", 3, |t| t);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = orbitfl(&["run", "--config", s(&cfg), "--out", s(out), "--quiet"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in [
        "metrics.csv",
        "assignment.txt",
        "contactplan.txt",
        "checkpoint.bin",
        "summary.txt",
    ] {
        let x = fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty(), "{f} is empty");
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f} differs between runs");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    // header plus one row per round: 3 cycles of 3 contacts and 3 idle slots
    assert_eq!(metrics.lines().count(), 18 + 1);
    assert!(metrics.starts_with("round,scheme,event,cluster,loss_global"));
    let summary = fs::read_to_string(a.join("summary.txt")).unwrap();
    assert!(summary.contains("scheme: ems_fl") && summary.contains("rounds: 18"));
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), "c.toml", 2, |t| t);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(orbitfl(&["run", "--config", s(&cfg), "--out", s(&a), "--quiet"])
        .status
        .success());
    assert!(
        orbitfl(&["run", "--config", s(&cfg), "--out", s(&b), "--quiet", "--seed", "9"])
            .status
            .success()
    );
    assert_ne!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = short_config(tmp.path(), "missing.toml", 2, |t| t.replace("n_classes = 6\n", ""));
    let o = orbitfl(&["run", "--config", s(&missing), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_classes"), "{}", stderr(&o));

    let unknown = short_config(tmp.path(), "unknown.toml", 2, |t| {
        t.replace("[model]", "[model]\ncolour = 1")
    });
    assert_eq!(orbitfl(&["split", "--config", s(&unknown)]).status.code(), Some(2));

    let bad_eta = short_config(tmp.path(), "eta.toml", 2, |t| {
        t.replace("eta_expert = 0.15", "eta_expert = 0.9")
    });
    assert_eq!(
        orbitfl(&["run", "--config", s(&bad_eta), "--out", s(&tmp.path().join("o"))])
            .status
            .code(),
        Some(2)
    );

    let o = orbitfl(&[
        "run",
        "--config",
        s(&tmp.path().join("nope.toml")),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(orbitfl(&["run"]).status.code(), Some(2));
}

#[test]
fn linkbudget_anchor_prints_five_megabits() {
    let o = orbitfl(&["linkbudget", "--config", s(&repo_file("configs/anchor.toml"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("Shannon rate: 5.000 Mbit/s"), "{out}");
    assert!(out.contains("375000000 bytes"), "{out}");
}

#[test]
fn linkbudget_needs_a_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), "c.toml", 2, |t| {
        let start = t.find("[link.budget]").unwrap();
        let end = t.find("[train]").unwrap();
        format!("{}{}", &t[..start], &t[end..])
    });
    assert_eq!(orbitfl(&["linkbudget", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn bounds_table_and_crossover() {
    let params = repo_file("configs/bounds.toml");
    let o = orbitfl(&["bounds", "--params", s(&params), "--t", "100,400"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "T,bound_emsfl,bound_baseline");
    let row: Vec<f64> = lines[1].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(row[0], 100.0);
    assert!((row[1] - 12.05).abs() < 1e-12 && (row[2] - 8.05).abs() < 1e-12);
    let crossover: f64 = lines[3].strip_prefix("crossover zeta_e_sq: ").unwrap().parse().unwrap();
    assert!((crossover - 2.0).abs() < 1e-8);

    let o = orbitfl(&["bounds", "--params", s(&params), "--t", ""]);
    assert_eq!(o.status.code(), Some(2));
    let o = orbitfl(&["bounds", "--params", s(&params), "--t", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bounds_reject_gamma_outside_range() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(repo_file("configs/bounds.toml"))
        .unwrap()
        .replace("gamma = 1.0", "gamma = 3.0");
    let path = tmp.path().join("b.toml");
    fs::write(&path, text).unwrap();
    assert_eq!(
        orbitfl(&["bounds", "--params", s(&path), "--t", "10"]).status.code(),
        Some(2)
    );
}

#[test]
fn split_warns_when_threshold_excludes_everything() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), "c.toml", 1, |t| t.replace("p_th = 0.3", "p_th = 1.1"));
    let o = orbitfl(&["split", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    assert!(stdout(&o).contains("1,-"));
}

#[test]
fn compare_same_scheme_twice_gives_identical_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("configs");
    fs::create_dir(&dir).unwrap();
    short_config(&dir, "first.toml", 3, |t| t);
    short_config(&dir, "second.toml", 3, |t| t);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = orbitfl(&[
            "compare",
            "--config",
            s(&dir),
            "--seeds",
            "1,2",
            "--out",
            s(out),
            "--quiet",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let report = fs::read_to_string(a.join("report.csv")).unwrap();
    assert_eq!(report, fs::read_to_string(b.join("report.csv")).unwrap());
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    let strip = |r: &str| r.split_once(',').unwrap().1.to_string();
    assert_eq!(strip(rows[0]), strip(rows[1]));
    for run in ["first_seed1", "first_seed2", "second_seed1", "second_seed2"] {
        let m = a.join("runs").join(run).join("metrics.csv");
        assert_eq!(
            fs::read(&m).unwrap(),
            fs::read(b.join("runs").join(run).join("metrics.csv")).unwrap()
        );
    }

    // byte columns reconcile with the per-run metrics
    let metrics = fs::read_to_string(a.join("runs/first_seed1/metrics.csv")).unwrap();
    let header: Vec<&str> = metrics.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "bytes_up").unwrap();
    let total: u64 = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap().parse::<u64>().unwrap())
        .sum();
    let metrics2 = fs::read_to_string(a.join("runs/first_seed2/metrics.csv")).unwrap();
    let total2: u64 = metrics2
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap().parse::<u64>().unwrap())
        .sum();
    let mean: f64 = rows[0].split(',').nth(9).unwrap().parse().unwrap();
    assert_eq!(mean, (total + total2) as f64 / 2.0);
}

#[test]
fn compare_rejects_empty_seed_list() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orbitfl(&[
        "compare",
        "--config",
        s(&repo_file("configs/compare")),
        "--seeds",
        "",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
