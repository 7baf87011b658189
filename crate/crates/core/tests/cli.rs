use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn netmig(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netmig"))
        .arg("--config")
        .arg(fixture("run.toml"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = netmig(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn prepare(out: &Path) {
    ok(out, &["ingest"]);
    ok(out, &["decompose"]);
    ok(out, &["fit-det"]);
}

fn read_csv(path: &Path) -> Vec<HashMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            headers.iter().map(String::from).zip(r.iter().map(String::from)).collect()
        })
        .collect()
}

#[test]
fn pipeline_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    prepare(out);
    ok(out, &["fit-bayes"]);
    ok(out, &["project"]);
    ok(out, &["validate"]);
    ok(out, &["report"]);

    let report = read_csv(&out.join("validation/report.csv"));
    assert_eq!(report.len(), 6);
    for row in &report {
        let f = |k: &str| row[k].parse::<f64>().unwrap();
        assert!(f("rmse") >= f("mae") && f("mae") >= 0.0);
        if row["method"] == "bayes-fdm" {
            assert!(f("cov95") >= f("cov80"));
        } else {
            assert!(row["cov80"].is_empty());
        }
    }
    let mae = |method: &str| {
        report
            .iter()
            .find(|r| r["method"] == method && r["scale"] == "counts")
            .map(|r| r["mae"].parse::<f64>().unwrap())
            .unwrap()
    };
    assert!(mae("det-fdm") < mae("basic-rc"));

    let mut targets = HashMap::new();
    for row in read_csv(&fixture("trajectories.csv")) {
        targets.insert((row["location"].clone(), row["trajectory"].clone()), row["net_total"].parse::<f64>().unwrap());
    }
    for method in ["basic-rc", "det-fdm", "bayes-fdm"] {
        let mut sums: HashMap<(String, String), f64> = HashMap::new();
        for row in read_csv(&out.join(format!("projection/{method}.csv"))) {
            *sums.entry((row["location"].clone(), row["trajectory"].clone())).or_default() +=
                row["net_migration"].parse::<f64>().unwrap();
        }
        assert_eq!(sums.len(), targets.len());
        for (k, g) in &targets {
            assert!((sums[k] - g).abs() < 1e-6, "{method} {k:?}: {} vs {g}", sums[k]);
        }
    }
    assert!(out.join("projection/figure4.csv").exists());
    assert!(out.join("validation/figure5.csv").exists());
    assert!(out.join("report.txt").exists());
    for cmd in ["ingest", "decompose", "fit-det", "fit-bayes", "project", "validate", "report"] {
        assert!(out.join(format!("manifests/{cmd}.json")).exists(), "{cmd}");
    }
}

#[test]
fn fit_bayes_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for out in [a.path(), b.path()] {
        ok(out, &["ingest"]);
        ok(out, &["decompose"]);
        ok(out, &["fit-bayes", "--locations", "loc1", "--iterations", "500", "--burn-in", "200"]);
    }
    for f in ["loc1.draws.csv", "loc1.draws.bin", "summary.csv", "diagnostics.csv"] {
        let x = std::fs::read(a.path().join("posterior").join(f)).unwrap();
        let y = std::fs::read(b.path().join("posterior").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn rerun_from_manifest_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    prepare(out);
    let ratios = std::fs::read(out.join("ratios.csv")).unwrap();
    std::fs::remove_file(out.join("ratios.csv")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_netmig"))
        .arg("--config")
        .arg(out.join("manifests/fit-det.toml"))
        .arg("fit-det")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(out.join("ratios.csv")).unwrap(), ratios);
}

#[test]
fn project_without_posterior_names_fit_bayes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    prepare(out);
    let o = netmig(out, &["project", "--methods", "bayes-fdm"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("netmig fit-bayes"), "{err}");
    // Methods that do not need the posterior still run.
    ok(out, &["project", "--methods", "basic-rc,det-fdm"]);
}

#[test]
fn downstream_without_upstream_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = netmig(dir.path(), &["fit-det"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("netmig ingest"));
}

#[test]
fn stochastic_command_needs_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = out.join("noseed.toml");
    std::fs::write(&cfg, format!("[ingest]\npanel = {:?}\n", fixture("panel.csv"))).unwrap();
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_netmig"))
            .arg("--config")
            .arg(&cfg)
            .arg("--out-dir")
            .arg(out)
            .args(args)
            .output()
            .unwrap()
    };
    assert!(run(&["ingest"]).status.success());
    assert!(run(&["decompose"]).status.success());
    let o = run(&["fit-bayes"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
}

#[test]
fn malformed_panel_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "location,period,age_group,net_migration,population\na,1,0-4,x,10\n").unwrap();
    let o = netmig(dir.path(), &["ingest", "--panel", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn infeasible_split_is_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["ingest"]);
    let o = netmig(out, &["decompose", "--method", "heuristic", "--m", "0.0001"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_config_key_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[project]\nmethod = \"det\"\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_netmig"))
        .arg("--config")
        .arg(&cfg)
        .arg("report")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
