use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedmismatch"))
}

#[test]
fn run_preset_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", "preset:comm-audit", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let path = String::from_utf8(out.stdout).unwrap();
    let csv = fs::read_to_string(path.trim()).unwrap();
    assert!(csv.starts_with("scenario,seed,n,d,K,tau,lambda,method,"));
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(
        &path,
        r#"
scenario = "consistency-sweep"
methods = []
[population]
d = 2
sigma = { kind = "identity" }
theta = { kind = "constant", value = 1.0 }
noise = { kind = "gaussian", variance = 1.0 }
[clients]
patterns = [[1], [2]]
rho = [0.2, 0.2]
[grid]
n = [10]
"#,
    )
    .unwrap();
    let out = bin().arg("validate").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("clients.rho") && err.contains("methods"), "{err}");

    let out = bin().arg("run").arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unwritable_output_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = bin()
        .args(["run", "preset:comm-audit", "--out"])
        .arg(&blocker)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn presets_are_listed_and_shown() {
    let out = bin().args(["presets", "list"]).output().unwrap();
    assert!(out.status.success());
    let list = String::from_utf8(out.stdout).unwrap();
    assert_eq!(list.lines().count(), 6);
    let out = bin().args(["presets", "show", "comm-audit"]).output().unwrap();
    assert!(String::from_utf8(out.stdout).unwrap().contains("scenario = \"comm-audit\""));
    let out = bin().args(["validate", "preset:typical-case-sweep"]).output().unwrap();
    assert!(out.status.success());
}
