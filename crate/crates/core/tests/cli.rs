use std::process::Command;

fn iotsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_iotsim"))
}

#[test]
fn run_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for p in ["mqtt", "coap"] {
        let out = iotsim()
            .args(["run", "--protocol", p, "--out"])
            .arg(d.join(format!("{p}.csv")))
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let text = std::fs::read_to_string(d.join("mqtt.csv")).unwrap();
    assert_eq!(text.lines().count(), 12);

    let out = iotsim()
        .arg("compare")
        .arg(d.join("mqtt.csv"))
        .arg(d.join("coap.csv"))
        .arg("--report")
        .arg(d.join("report.csv"))
        .arg("--plot")
        .arg(d.join("plot.dat"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let plot = std::fs::read_to_string(d.join("plot.dat")).unwrap();
    let names: Vec<&str> = plot
        .lines()
        .skip(1)
        .map(|l| l.split(' ').next().unwrap())
        .collect();
    assert_eq!(names, ["coap", "mqtt"]);
    assert!(std::fs::read_to_string(d.join("report.csv"))
        .unwrap()
        .contains("delta_pct,coap,mqtt"));
}

#[test]
fn scenario_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.toml");
    std::fs::write(&scenario, "protocol = \"mqtt-sn\"\nduration_s = 60\n").unwrap();
    let out_csv = dir.path().join("t.csv");
    let out = iotsim()
        .args(["run", "--interval", "5", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(&out_csv)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("mqtt-sn"));
    assert_eq!(
        std::fs::read_to_string(&out_csv).unwrap().lines().count(),
        12 + 2
    );
}

#[test]
fn bad_input_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("bad.toml");
    std::fs::write(&scenario, "protocol = \"mqtt\"\n\ninterval_s = 7\n").unwrap();
    let out = iotsim()
        .args(["run", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(dir.path().join("x.csv"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("line 3"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = iotsim()
        .args(["run", "--protocol", "xmpp", "--out", "x.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());

    let out = iotsim()
        .args(["compare", "/nonexistent/a.csv", "/nonexistent/b.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn suite_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = iotsim()
        .args(["suite", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "mqtt.csv",
        "mqtt-sn.csv",
        "coap.csv",
        "http.csv",
        "report.csv",
        "plot.dat",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let plot = std::fs::read_to_string(dir.path().join("plot.dat")).unwrap();
    let names: Vec<&str> = plot
        .lines()
        .skip(1)
        .map(|l| l.split(' ').next().unwrap())
        .collect();
    assert_eq!(names, ["mqtt-sn", "coap", "mqtt", "http"]);
}
