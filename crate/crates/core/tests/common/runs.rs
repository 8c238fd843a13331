//! Drives the `mmsfe` binary for end-to-end runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use mmsfe::evalmetrics::EvalReport;
use serde::Deserialize;

pub const BIN: &str = env!("CARGO_BIN_EXE_mmsfe");

/// Runs the binary in `cwd`, sending stdout and stderr to `log`. Returns
/// the exit code.
pub fn mmsfe_logged(cwd: &Path, log: &Path, args: &[&str]) -> i32 {
    let out = fs::File::create(log).expect("log file");
    let err = out.try_clone().expect("log handle");
    Command::new(BIN)
        .current_dir(cwd)
        .args(args)
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .status()
        .expect("spawn mmsfe")
        .code()
        .unwrap_or(-1)
}

/// Runs the binary and captures `(code, stdout, stderr)`.
pub fn mmsfe_output(cwd: &Path, args: &[&str]) -> (i32, String, String) {
    let o = Command::new(BIN)
        .current_dir(cwd)
        .args(args)
        .stdin(Stdio::null())
        .output()
        .expect("spawn mmsfe");
    (
        o.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&o.stdout).into_owned(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

#[derive(Debug, Deserialize)]
pub struct ReportFile {
    pub split: String,
    pub config: String,
    pub metrics: EvalReport,
}

pub fn read_report(path: &Path) -> ReportFile {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[derive(Debug, Deserialize)]
pub struct EpochLine {
    pub epoch: usize,
    pub total: f64,
    pub seconds: f64,
}

pub fn read_log(run_dir: &Path) -> Vec<EpochLine> {
    let path = run_dir.join("train_log.jsonl");
    fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(|l| serde_json::from_str(l).expect("epoch line"))
        .collect()
}

/// A finished training run and its test-split metrics.
#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub train_seconds: f64,
}

impl Run {
    pub fn load(dir: &Path) -> Run {
        let report = read_report(&dir.join("report.json")).metrics;
        let train_seconds = read_log(dir).iter().map(|e| e.seconds).sum();
        Run {
            dir: dir.to_path_buf(),
            report,
            train_seconds,
        }
    }

    pub fn mean_iou(&self) -> f64 {
        self.report.mean_iou.unwrap_or(0.0)
    }
}

/// Trains into `root/name` unless a finished run is already there.
pub fn train(root: &Path, data: &Path, name: &str, extra: &[&str]) -> Run {
    let dir = root.join(name);
    if !dir.join("report.json").is_file() {
        fs::create_dir_all(root).unwrap();
        let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        let log = root.join(format!("{name}.log"));
        let code = mmsfe_logged(root, &log, &args);
        assert_eq!(code, 0, "training {name} failed; see {}", log.display());
    }
    Run::load(&dir)
}
