//! Turns a campaign results folder into `data.csv` and `average_data.csv`.
//!
//! For every successful iteration the logcat is parsed, the test window is
//! mapped onto the power trace via the recorded trigger offset, and the
//! window is integrated. App-under-test energies have the mean baseline
//! energy subtracted.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::campaign::{CampaignError, IterationRecord, Manifest, Phase};
use crate::device::RunMode;
use crate::energy::{
    emit_data_files, extract_window, integrate_energy, mean, EnergyError, EnergyRow, Window, AVERAGE_FILE, DATA_FILE,
};
use crate::parsers::{
    parse_cpu_mem, parse_logcat_with, parse_netstats, parse_raw_log, parse_test_window, write_clean_log, LogEvent,
    ParseError, ParseMode,
};
use crate::sampling::{read_trace_as, SampleTrace, SamplingError};

pub const CLEAN_DIR: &str = "clean";
pub const SUMMARY_FILE: &str = "preprocess_summary.json";

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error(transparent)]
    Manifest(#[from] CampaignError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("{}: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("no successful app-under-test iterations in {0}")]
    NoIterations(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub mode: ParseMode,
    /// Without baseline runs, energies are reported unsubtracted instead of
    /// failing.
    pub allow_missing_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub package: String,
    pub data_file: PathBuf,
    pub average_file: PathBuf,
    pub rows: Vec<EnergyRow>,
    pub baseline_n: usize,
    pub baseline_mean_j: f64,
    /// Iterations whose energy fell below the baseline mean.
    pub below_baseline: Vec<u32>,
    pub failed_excluded: usize,
    pub skipped_lines: usize,
}

fn read(root: &Path, rel: &Path) -> Result<String, PreprocessError> {
    let path = root.join(rel);
    std::fs::read_to_string(&path).map_err(|source| PreprocessError::Io { path, source })
}

fn load_trace(root: &Path, rec: &IterationRecord) -> Result<SampleTrace, PreprocessError> {
    let id = format!("{}/R{}", rec.phase.dir_name(), rec.index);
    Ok(read_trace_as(&root.join(&rec.trace_path), rec.nominal_rate_hz, rec.reliability.dropped_count, id)?)
}

fn window_energy(trace: &SampleTrace, offset: f64, duration_ms: u64) -> Result<f64, PreprocessError> {
    let window = Window::new(offset, offset + duration_ms as f64 / 1000.0)?;
    Ok(integrate_energy(&extract_window(trace, window)?)?)
}

fn write_clean(root: &Path, rec: &IterationRecord, events: &[LogEvent]) -> Result<(), PreprocessError> {
    let dir = root.join(CLEAN_DIR).join(rec.phase.dir_name());
    std::fs::create_dir_all(&dir).map_err(|source| PreprocessError::Io { path: dir.clone(), source })?;
    let path = dir.join(format!("Logcat_R{}.csv", rec.index));
    write_clean_log(events, &path).map_err(|source| PreprocessError::Parse { path, source })
}

pub fn preprocess(results_dir: &Path) -> Result<PreprocessSummary, PreprocessError> {
    preprocess_with(results_dir, PreprocessOptions::default())
}

pub fn preprocess_with(root: &Path, opts: PreprocessOptions) -> Result<PreprocessSummary, PreprocessError> {
    let manifest = Manifest::load(root)?;
    let tags: BTreeSet<String> = manifest.config.tags.iter().cloned().collect();
    let package = manifest.config.plan.app_package.clone();
    let ok = |phase: Phase| manifest.state.records.iter().filter(move |r| r.phase == phase && r.failed.is_none());
    let failed_excluded = manifest.state.records.iter().filter(|r| r.failed.is_some()).count();
    let parse_err = |rec: &IterationRecord| {
        let path = root.join(&rec.logcat_path);
        move |source| PreprocessError::Parse { path, source }
    };
    let mut skipped_lines = 0;

    let mut baseline = Vec::new();
    for rec in ok(Phase::Baseline) {
        let text = read(root, &rec.logcat_path)?;
        let (start, end) = parse_test_window(&text, rec.device_api_level, &tags, opts.mode).map_err(parse_err(rec))?;
        let raw = parse_raw_log(&text, rec.device_api_level, opts.mode).map_err(parse_err(rec))?;
        skipped_lines += raw.skipped;
        let markers: Vec<LogEvent> = raw.events.into_iter().filter(|e| tags.contains(&e.tag)).collect();
        write_clean(root, rec, &markers)?;
        let trace = load_trace(root, rec)?;
        baseline.push(window_energy(&trace, rec.trigger_offset, end - start)?);
    }
    if baseline.is_empty() && !opts.allow_missing_baseline {
        return Err(EnergyError::MissingBaseline.into());
    }
    let baseline_mean_j = if baseline.is_empty() { 0.0 } else { mean(&baseline) };

    let mut rows = Vec::new();
    for rec in ok(Phase::Aut) {
        let text = read(root, &rec.logcat_path)?;
        let clean = parse_logcat_with(&text, rec.device_api_level, &tags, &package, opts.mode).map_err(parse_err(rec))?;
        skipped_lines += clean.skipped;
        write_clean(root, rec, &clean.events)?;
        let trace = load_trace(root, rec)?;
        let energy_j = window_energy(&trace, rec.trigger_offset, clean.test_duration_ms())? - baseline_mean_j;

        let cpu_path = root.join(&rec.cpu_mem_path);
        let res = parse_cpu_mem(&read(root, &rec.cpu_mem_path)?, &package, rec.device_api_level, RunMode::Aut)
            .map_err(|source| PreprocessError::Parse { path: cpu_path, source })?;
        let net_path = root.join(&rec.net_path);
        let net = parse_netstats(&read(root, &rec.net_path)?, clean.uid)
            .map_err(|source| PreprocessError::Parse { path: net_path, source })?;
        rows.push(EnergyRow {
            package: package.clone(),
            iteration: rec.index,
            energy_j,
            cpu_pct: res.cpu_pct,
            mem_pct: res.mem_pct,
            rx_bytes: net.rx_bytes,
            tx_bytes: net.tx_bytes,
            below_baseline: energy_j < 0.0,
        });
    }
    if rows.is_empty() {
        return Err(PreprocessError::NoIterations(root.to_path_buf()));
    }
    rows.sort_by_key(|r| r.iteration);
    emit_data_files(&rows, root)?;

    let summary = PreprocessSummary {
        package,
        data_file: PathBuf::from(DATA_FILE),
        average_file: PathBuf::from(AVERAGE_FILE),
        below_baseline: rows.iter().filter(|r| r.below_baseline).map(|r| r.iteration).collect(),
        rows,
        baseline_n: baseline.len(),
        baseline_mean_j,
        failed_excluded,
        skipped_lines,
    };
    let path = root.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    std::fs::write(&path, text).map_err(|source| PreprocessError::Io { path, source })?;
    Ok(summary)
}
