//! On-disk run directories: a report, a row-appended epoch log and the
//! final checkpoint. Completed runs are reused when their resolved config
//! matches.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Family, Network};
use crate::scalar::Scalar;
use crate::train::{train, ResolvedConfig, RunReport, TrainConfig};

pub const REPORT_FILE: &str = "report.json";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Conventional sub-directory name for a grid cell.
pub fn run_name(cfg: &TrainConfig) -> String {
    format!("{}-d{}-s{}", cfg.network.family, cfg.network.depth, cfg.network.seed)
}

pub fn read_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    let path = dir.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(report)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Trains into `dir`, writing `epochs.csv` as epochs finish, then the report
/// and checkpoint.
pub fn train_into<T: Scalar>(
    dir: &Path,
    cfg: &TrainConfig,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
) -> Result<(Network<T>, RunReport)> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join(EPOCHS_FILE);
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "epoch,train_loss,train_error,test_error").map_err(|e| Error::io(&log_path, e))?;
    drop(log);

    let (net, report) = train(cfg, train_set, test_set, |m, _| {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "{},{},{},{}", m.epoch, m.train_loss, m.train_error, m.test_error)
            .map_err(|e| Error::io(&log_path, e))
    })?;
    save_checkpoint(dir.join(CHECKPOINT_FILE), &net, Some(&cfg.optimizer))?;
    write_report(dir, &report)?;
    Ok((net, report))
}

/// Loads a finished run from `dir` if its config matches, otherwise trains it.
pub fn ensure_run<T: Scalar>(
    dir: &Path,
    cfg: &TrainConfig,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
) -> Result<(Network<T>, RunReport)> {
    if let Some(done) = load_finished::<T>(dir, cfg)? {
        return Ok(done);
    }
    train_into(dir, cfg, train_set, test_set)
}

/// A completed run in `dir` whose resolved config equals `cfg`, if any.
pub fn load_finished<T: Scalar>(dir: &Path, cfg: &TrainConfig) -> Result<Option<(Network<T>, RunReport)>> {
    let report_path = dir.join(REPORT_FILE);
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    if !report_path.is_file() || !ckpt_path.is_file() {
        return Ok(None);
    }
    let report = read_report(dir)?;
    if report.config != ResolvedConfig::new::<T>(cfg.clone()) {
        return Ok(None);
    }
    let (net, _) = load_checkpoint::<T>(&ckpt_path)?;
    Ok(Some((net, report)))
}

/// One cell of a depth x architecture sweep.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub family: Family,
    pub depth: usize,
    pub dir: PathBuf,
    pub report: RunReport,
}

/// Runs (or reuses) every `(depth, family)` combination under `root`.
pub fn sweep<T: Scalar>(
    root: &Path,
    base: &TrainConfig,
    depths: &[usize],
    families: &[Family],
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    mut progress: impl FnMut(&SweepCell),
) -> Result<Vec<SweepCell>> {
    if depths.is_empty() || families.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one depth and one architecture".into()));
    }
    let mut cells = Vec::new();
    for &depth in depths {
        for &family in families {
            let mut cfg = base.clone();
            cfg.network.family = family;
            cfg.network.depth = depth;
            if family != Family::Gresnet {
                cfg.optimizer.k_decay = 0.0;
            }
            let dir = root.join(run_name(&cfg));
            let (_, report) = ensure_run(&dir, &cfg, train_set, test_set)?;
            let cell = SweepCell {
                family,
                depth,
                dir,
                report,
            };
            progress(&cell);
            cells.push(cell);
        }
    }
    Ok(cells)
}
