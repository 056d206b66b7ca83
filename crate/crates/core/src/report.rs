//! Writes a calibration report as `report.json`, the per-layer allocation
//! as `allocation.csv`, and the run time as `timing.json`.
//!
//! Timing lives in its own file so that two identically configured runs
//! produce byte-identical `report.json` files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::CalibrationReport;
use crate::error::{Error, Result};

pub const REPORT_FILE: &str = "report.json";
pub const ALLOCATION_FILE: &str = "allocation.csv";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportPaths {
    pub report: PathBuf,
    pub allocation: PathBuf,
    pub timing: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
}

#[derive(Serialize)]
struct AllocationRow<'a> {
    layer_index: usize,
    layer_name: &'a str,
    #[serde(rename = "N")]
    n: usize,
    threshold: f64,
    rate: f64,
}

pub fn report_json(report: &CalibrationReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn allocation_csv(report: &CalibrationReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for a in &report.allocation {
        w.serialize(AllocationRow {
            layer_index: a.index,
            layer_name: &a.name,
            n: a.n,
            threshold: a.threshold,
            rate: a.rate,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Writes all three files into `dir`, creating it if needed.
pub fn emit_report(report: &CalibrationReport, dir: &Path) -> Result<ReportPaths> {
    fs::create_dir_all(dir)?;
    let paths = ReportPaths {
        report: dir.join(REPORT_FILE),
        allocation: dir.join(ALLOCATION_FILE),
        timing: dir.join(TIMING_FILE),
    };
    fs::write(&paths.report, report_json(report)?)?;
    fs::write(&paths.allocation, allocation_csv(report)?)?;
    let timing = Timing { wall_clock_seconds: report.wall_clock_seconds };
    fs::write(&paths.timing, serde_json::to_string_pretty(&timing)? + "\n")?;
    Ok(paths)
}

/// Reads back a `report.json`; the wall clock comes back as 0.
pub fn load_report(path: &Path) -> Result<CalibrationReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
