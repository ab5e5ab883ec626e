//! The `panelmatch` binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TOY: &str = "unit,time,treat,y,x
1,1,0,1,0.2
1,2,0,2,0.4
1,3,0,1,0.1
1,4,1,5,0.3
1,5,0,4,0.8
1,6,0,3,0.5
2,1,0,2,0.6
2,2,0,1,0.9
2,3,0,2,0.2
2,4,0,3,0.4
2,5,0,2,0.7
2,6,0,4,0.1
3,1,1,1,0.5
3,2,0,3,0.3
3,3,0,2,0.6
3,4,1,6,0.2
3,5,1,7,0.9
3,6,0,2,0.4
4,1,0,3,0.1
4,2,0,2,0.8
4,3,0,3,0.3
4,4,0,2,0.5
4,5,0,3,0.6
4,6,0,2,0.2
5,1,0,1,0.7
5,2,0,2,0.2
5,3,0,1,0.4
5,4,0,2,0.6
5,5,0,3,0.3
5,6,1,8,0.9
";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("toy.csv"), TOY).unwrap();
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn config(&self, name: &str, body: &str) -> PathBuf {
        let text = format!(
            "data = \"toy.csv\"\n{body}\n[columns]\nunit = \"unit\"\ntime = \"time\"\ntreatment = \"treat\"\noutcome = \"y\"\n"
        );
        let path = self.path().join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    fn run(&self, command: &str, configs: &[&Path]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_panelmatch"));
        cmd.arg(command);
        for c in configs {
            cmd.arg("--config").arg(c);
        }
        cmd.arg("--out").arg(self.path().join("out")).output().unwrap()
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.path().join("out").join(name)).unwrap()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn match_reports_toy_sets() {
    let ws = Workspace::new();
    let cfg = ws.config("att.toml", "qoi = \"att\"\nlag = 3\nleads = [0]");
    let out = ws.run("match", &[&cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_str(&ws.read("matched_sets_att.json")).unwrap();
    assert_eq!(doc["metadata"]["command"], "match");
    let text = doc["result"].to_string();
    assert!(text.contains("5.6"), "{text}");
    let weights = ws.read("weights_att.csv");
    assert!(weights.starts_with("# panelmatch"));
    assert!(weights.contains("treated_key,control_unit,weight,distance"));
}

#[test]
fn inspect_writes_summary_and_grid() {
    let ws = Workspace::new();
    let cfg = ws.config("att.toml", "qoi = \"att\"\nlag = 1\nleads = [0]");
    let out = ws.run("inspect", &[&cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_str(&ws.read("summary.json")).unwrap();
    assert_eq!(doc["result"]["n_units"], 5);
    assert!(ws.path().join("out/treatment_grid.csv").exists());
}

#[test]
fn lag_beyond_panel_is_a_config_error() {
    let ws = Workspace::new();
    let cfg = ws.config("att.toml", "qoi = \"att\"\nlag = 6\nleads = [0]");
    let out = ws.run("match", &[&cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("error[E2"));
}

#[test]
fn unreadable_data_exits_with_data_status() {
    let ws = Workspace::new();
    let cfg = ws.config("att.toml", "qoi = \"att\"\nlag = 1\nleads = [0]");
    std::fs::remove_file(ws.path().join("toy.csv")).unwrap();
    let out = ws.run("match", &[&cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("error[E301]"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let ws = Workspace::new();
    let cfg = ws.config("bad.toml", "qoi = \"att\"\nlag = 1\nleads = [0]\nlagg = 2");
    let out = ws.run("match", &[&cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("error[E202]"), "{}", stderr(&out));
}

#[test]
fn placebo_estimate_needs_the_matching_flag() {
    let ws = Workspace::new();
    let cfg = ws.config(
        "att.toml",
        "qoi = \"att\"\nlag = 2\nleads = [0]\n[estimation]\ninclude_placebo = true",
    );
    let out = ws.run("estimate", &[&cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("error[E206]"), "{}", stderr(&out));
}

#[test]
fn balance_compares_two_configs() {
    let ws = Workspace::new();
    let plain = ws.config("plain.toml", "qoi = \"att\"\nlag = 2\nleads = [0]\n[balance]\ncovariates = [\"x\"]");
    let maha = ws.config(
        "maha.toml",
        "qoi = \"att\"\nlag = 2\nleads = [0]\n[refinement]\nmethod = \"mahalanobis\"\nsize_match = 1\n\
         covariates = [{ name = \"x\", lags = \"0:1\" }]\n[balance]\ncovariates = [\"x\"]",
    );
    let out = ws.run("balance", &[&plain, &maha]);
    assert!(out.status.success(), "{}", stderr(&out));
    let plain_csv = ws.read("balance_plain_att.csv");
    ws.read("balance_maha_att.csv");
    ws.read("balance_scatter_maha_att.csv");
    // Unrefined sets: the refined and uniform columns coincide.
    for line in plain_csv.lines().filter(|l| l.starts_with("t_")) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[1], cells[2], "{line}");
    }
}

#[test]
fn estimate_and_set_effects_agree() {
    let ws = Workspace::new();
    let cfg = ws.config(
        "att.toml",
        "qoi = \"att\"\nlag = 1\nleads = [0]\n[estimation]\nse_method = \"bootstrap\"\niterations = 50\nseed = 9",
    );
    let out = ws.run("estimate", &[&cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_str(&ws.read("estimate.json")).unwrap();
    assert_eq!(doc["metadata"]["seed"], 9);
    let est = doc["result"]["leads"][0]["estimate"].as_f64().unwrap();
    let out = ws.run("set-effects", &[&cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    let effects: Vec<f64> = ws
        .read("set_effects_att.csv")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("treated_key"))
        .filter_map(|l| l.rsplit(',').next().unwrap().parse().ok())
        .collect();
    let mean = effects.iter().sum::<f64>() / effects.len() as f64;
    assert!((mean - est).abs() < 1e-12, "{mean} vs {est}");
}
