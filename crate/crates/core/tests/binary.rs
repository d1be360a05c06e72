use std::fs;
use std::process::Command;

fn mfhinf(args: &[&str], out: &std::path::Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_mfhinf"))
        .args(args)
        .args(["--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    (o.status.code().unwrap(), String::from_utf8(o.stdout).unwrap())
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mfhinf(&["hinf", "--problem", "sysB", "--tol", "1e-3"], dir.path()).0, 0);
    assert_eq!(mfhinf(&["brl", "--problem", "sysB", "--gamma", "0.01"], dir.path()).0, 2);
    assert_eq!(mfhinf(&["synth-closed", "--problem", "no/such/file.json"], dir.path()).0, 1);
    assert_eq!(mfhinf(&["oracle", "--problem", "sysA", "--depth", "nine"], dir.path()).0, 1);
    let log = fs::read_to_string(dir.path().join("runs.ndjson")).unwrap();
    // the usage error never reaches the run log
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn help_and_version() {
    for flag in ["--help", "--version"] {
        let o = Command::new(env!("CARGO_BIN_EXE_mfhinf")).arg(flag).output().unwrap();
        assert!(o.status.success());
        assert!(!o.stdout.is_empty());
    }
}

#[test]
fn oracle_table() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = mfhinf(&["oracle", "--problem", "sysA", "--depth", "6", "--tol", "1e-3"], dir.path());
    assert_eq!(code, 0);
    let csv = fs::read_to_string(dir.path().join("oracle.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), [2.0, 4.0, 6.0]);
    assert!(rows.windows(2).all(|w| w[1][3] < w[0][3]));
}

#[test]
fn open_loop_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = mfhinf(&["synth-open", "--problem", "sysA", "--paths", "500"], dir.path());
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("certificate = sufficient conditions"));
    for f in ["K", "Ktilde", "chi", "Pbold", "Pibold"] {
        let csv = fs::read_to_string(dir.path().join(format!("{f}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 2002, "{f}");
    }
}
