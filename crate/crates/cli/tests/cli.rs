use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
[characterize]
nop_sizes = [1000]
loop_iterations = 2000
receiver_iterations = 500
distribution_reps = 100
[channel]
di_ts = [4000]
di_receiver_iterations = [100]
si_ts = []
symbols = 50
seeds = 1
calibration_reps = 100
[spectre]
bits = 4
seeds = 1
dump_attacks = 1
[trace_gen]
samples_per_label = 1
"#;

fn retsim(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_retsim"));
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.arg("--out").arg(out).args(args).output().unwrap()
}

fn setup(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    (dir, path)
}

#[test]
fn help_exits_zero_and_bad_usage_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(retsim(&["--help"], None, dir.path()).status.code(), Some(0));
    assert_eq!(retsim(&["no-such-command"], None, dir.path()).status.code(), Some(2));
}

#[test]
fn malformed_config_exits_two() {
    let (dir, cfg) = setup("seed = \"one\"");
    let o = retsim(&["characterize"], Some(&cfg), &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn empty_grid_is_a_config_error() {
    let (dir, cfg) = setup("[channel]\ndi_ts = []\nsi_ts = []\n");
    let o = retsim(&["channel-eval"], Some(&cfg), &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));
}

#[test]
fn characterize_reports_bandwidth_and_creates_output_dir() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("nested/out");
    let o = retsim(&["characterize"], Some(&cfg), &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("0.25"));
    assert!(!summary.contains("FAIL"));
}

#[test]
fn channel_eval_reports_table_bandwidth() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("out");
    assert_eq!(retsim(&["channel-eval"], Some(&cfg), &out).status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("channel.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[0], "di");
    assert_eq!(fields[1], "4000");
    assert_eq!(fields[5], "1450000.000");
    assert_eq!(fields[7], "ok");
}

#[test]
fn spectre_reports_default_bandwidth() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("out");
    assert_eq!(retsim(&["spectre"], Some(&cfg), &out).status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("spectre.csv")).unwrap();
    for row in csv.lines().skip(1) {
        assert_eq!(row.split(',').nth(6), Some("29000.000"));
    }
    assert!(out.join("spectre_probes.csv").exists());
}

#[test]
fn trace_gen_manifest_lists_ten_labels() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("out");
    assert_eq!(retsim(&["trace-gen"], Some(&cfg), &out).status.code(), Some(0));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["labels"].as_array().unwrap().len(), 10);
    assert!(out.join("dataset.csv").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let (dir, cfg) = setup(SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    retsim(&["channel-eval"], Some(&cfg), &a);
    retsim(&["--seed", "4", "channel-eval"], Some(&cfg), &b);
    let ra = std::fs::read_to_string(a.join("channel.csv")).unwrap();
    let rb = std::fs::read_to_string(b.join("channel.csv")).unwrap();
    assert_ne!(ra, rb);
}
