//! Windowing, integration to joules, baseline subtraction and the
//! `data.csv` / `average_data.csv` writers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::SampleTrace;

pub const DATA_FILE: &str = "data.csv";
pub const AVERAGE_FILE: &str = "average_data.csv";
pub const DATA_HEADER: [&str; 7] = ["package", "iteration", "energy_j", "cpu_pct", "mem_pct", "rx_bytes", "tx_bytes"];
pub const AVERAGE_HEADER: [&str; 7] =
    ["package", "n", "energy_j_mean", "cpu_pct_mean", "mem_pct_mean", "rx_mean", "tx_mean"];

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("invalid window [{start}, {end})")]
    InvalidWindow { start: f64, end: f64 },
    #[error("window [{start}, {end}) lies outside the trace span [{span_start}, {span_end})")]
    WindowOutOfRange { start: f64, end: f64, span_start: f64, span_end: f64 },
    #[error("cannot integrate an empty trace")]
    EmptyTrace,
    #[error("no baseline energies to subtract")]
    MissingBaseline,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Half-open interval `[start, end)` on the trace timeline, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub fn new(start: f64, end: f64) -> Result<Self, EnergyError> {
        if start.is_finite() && end.is_finite() && 0.0 <= start && start < end {
            Ok(Self { start, end })
        } else {
            Err(EnergyError::InvalidWindow { start, end })
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t < self.end
    }

    pub fn width(&self) -> f64 {
        self.end - self.start
    }
}

/// Returns the samples with `start <= t < end`. The window may overhang the
/// trace by at most one sample period at either edge.
pub fn extract_window(trace: &SampleTrace, window: Window) -> Result<SampleTrace, EnergyError> {
    let period = trace.sample_period();
    let (span_start, span_end) = match trace.samples.first() {
        Some(first) => (first.t, trace.span_end()),
        None => (0.0, 0.0),
    };
    let tol = period * (1.0 + 1e-9);
    if trace.is_empty() || window.start < span_start - tol || window.end > span_end + tol {
        return Err(EnergyError::WindowOutOfRange { start: window.start, end: window.end, span_start, span_end });
    }
    let lo = trace.samples.partition_point(|s| s.t < window.start);
    let hi = trace.samples.partition_point(|s| s.t < window.end);
    let samples = trace.samples[lo..hi].to_vec();
    let expected = (window.width() * f64::from(trace.nominal_rate_hz)).round() as u64;
    Ok(SampleTrace {
        dropped_count: expected.saturating_sub(samples.len() as u64),
        samples,
        nominal_rate_hz: trace.nominal_rate_hz,
        source_id: trace.source_id.clone(),
    })
}

/// Rectangle-rule energy in joules: sum of `current * voltage` times the
/// nominal sample period.
pub fn integrate_energy(trace: &SampleTrace) -> Result<f64, EnergyError> {
    if trace.is_empty() {
        return Err(EnergyError::EmptyTrace);
    }
    let power_sum: f64 = trace.samples.iter().map(|s| s.power()).sum();
    Ok(power_sum * trace.sample_period())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Subtracts the mean baseline energy from each app-under-test energy.
/// Results below zero are returned as is.
pub fn subtract_baseline(aut: &[f64], baseline: &[f64]) -> Result<Vec<f64>, EnergyError> {
    if baseline.is_empty() {
        return Err(EnergyError::MissingBaseline);
    }
    if aut.is_empty() {
        return Err(EnergyError::InvalidInput("no app-under-test energies".into()));
    }
    let base = mean(baseline);
    Ok(aut.iter().map(|e| e - base).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub package: String,
    pub iteration: u32,
    pub energy_j: f64,
    pub cpu_pct: f64,
    pub mem_pct: f64,
    pub rx_bytes: u64,
    pub tx_bytes: u64,
    /// Set when baseline subtraction left a negative energy. Not written to
    /// `data.csv`; surfaced by the pre-processing summary instead.
    #[serde(default)]
    pub below_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub package: String,
    pub n: usize,
    pub energy_j_mean: f64,
    pub cpu_pct_mean: f64,
    pub mem_pct_mean: f64,
    pub rx_mean: f64,
    pub tx_mean: f64,
}

pub fn aggregate(rows: &[EnergyRow]) -> Result<AggregateRow, EnergyError> {
    let first = rows.first().ok_or_else(|| EnergyError::InvalidInput("no rows to aggregate".into()))?;
    if let Some(other) = rows.iter().find(|r| r.package != first.package) {
        return Err(EnergyError::InvalidInput(format!(
            "mixed packages `{}` and `{}` in one data file",
            first.package, other.package
        )));
    }
    let col = |f: fn(&EnergyRow) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateRow {
        package: first.package.clone(),
        n: rows.len(),
        energy_j_mean: col(|r| r.energy_j),
        cpu_pct_mean: col(|r| r.cpu_pct),
        mem_pct_mean: col(|r| r.mem_pct),
        rx_mean: col(|r| r.rx_bytes as f64),
        tx_mean: col(|r| r.tx_bytes as f64),
    })
}

/// Writes `data.csv` and `average_data.csv` into `dir`, returning their
/// paths.
pub fn emit_data_files(rows: &[EnergyRow], dir: &Path) -> Result<(PathBuf, PathBuf), EnergyError> {
    let avg = aggregate(rows)?;
    let data_path = dir.join(DATA_FILE);
    let avg_path = dir.join(AVERAGE_FILE);

    let csv_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EnergyError::Csv { path, source }
    };

    let mut w = csv::Writer::from_path(&data_path).map_err(csv_err(&data_path))?;
    w.write_record(DATA_HEADER).map_err(csv_err(&data_path))?;
    for r in rows {
        w.write_record([
            r.package.clone(),
            r.iteration.to_string(),
            r.energy_j.to_string(),
            r.cpu_pct.to_string(),
            r.mem_pct.to_string(),
            r.rx_bytes.to_string(),
            r.tx_bytes.to_string(),
        ])
        .map_err(csv_err(&data_path))?;
    }
    w.flush().map_err(|e| EnergyError::Csv { path: data_path.clone(), source: e.into() })?;

    let mut w = csv::Writer::from_path(&avg_path).map_err(csv_err(&avg_path))?;
    w.write_record(AVERAGE_HEADER).map_err(csv_err(&avg_path))?;
    w.write_record([
        avg.package.clone(),
        avg.n.to_string(),
        avg.energy_j_mean.to_string(),
        avg.cpu_pct_mean.to_string(),
        avg.mem_pct_mean.to_string(),
        avg.rx_mean.to_string(),
        avg.tx_mean.to_string(),
    ])
    .map_err(csv_err(&avg_path))?;
    w.flush().map_err(|e| EnergyError::Csv { path: avg_path.clone(), source: e.into() })?;

    Ok((data_path, avg_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{acquire_trace, PowerSample, SourceConfig, WorkloadProfile};
    use proptest::prelude::*;

    fn constant_trace(current: f64, voltage: f64, secs: f64) -> SampleTrace {
        acquire_trace(&SourceConfig::simulated(WorkloadProfile::constant(current, voltage)), secs).unwrap()
    }

    fn row(pkg: &str, i: u32, e: f64) -> EnergyRow {
        EnergyRow {
            package: pkg.into(),
            iteration: i,
            energy_j: e,
            cpu_pct: 10.0 * f64::from(i),
            mem_pct: 2.0,
            rx_bytes: 100 * u64::from(i),
            tx_bytes: 7,
            below_baseline: false,
        }
    }

    #[test]
    fn constant_trace_energy() {
        let trace = constant_trace(0.2, 4.0, 1.0);
        let e = integrate_energy(&trace).unwrap();
        assert!((e - 0.8).abs() <= 0.8 * 1e-9, "{e}");
    }

    #[test]
    fn zero_current_zero_energy() {
        assert_eq!(integrate_energy(&constant_trace(0.0, 4.0, 0.5)).unwrap(), 0.0);
    }

    #[test]
    fn empty_trace_errors() {
        let t = SampleTrace::new(vec![], 5000, 0, "x").unwrap();
        assert!(matches!(integrate_energy(&t), Err(EnergyError::EmptyTrace)));
    }

    #[test]
    fn ramp_matches_closed_form() {
        // 4 V * integral of t dt over [0, 1] = 2 J
        let samples =
            (0..5000).map(|i| PowerSample { t: i as f64 / 5000.0, current: i as f64 / 5000.0, voltage: 4.0 }).collect();
        let trace = SampleTrace::new(samples, 5000, 0, "ramp").unwrap();
        let e = integrate_energy(&trace).unwrap();
        assert!((e - 2.0).abs() <= 2.0 * 4.0 / 5000.0, "{e}");
    }

    #[test]
    fn identity_window() {
        let trace = constant_trace(0.2, 4.0, 1.0);
        let w = extract_window(&trace, Window::new(0.0, 1.0).unwrap()).unwrap();
        assert_eq!(w, trace);
    }

    #[test]
    fn window_width_times_rate() {
        let trace = constant_trace(0.2, 4.0, 1.0);
        let w = extract_window(&trace, Window::new(0.2, 0.4).unwrap()).unwrap();
        assert_eq!(w.len(), 1000);
        assert_eq!(w.nominal_rate_hz, 5000);
        assert!(w.samples.windows(2).all(|p| p[0].t < p[1].t));
    }

    #[test]
    fn window_past_end_errors() {
        let trace = constant_trace(0.2, 4.0, 1.0);
        let err = extract_window(&trace, Window::new(0.5, 1.5).unwrap()).unwrap_err();
        assert!(matches!(err, EnergyError::WindowOutOfRange { .. }));
        // one period of overhang is tolerated
        assert!(extract_window(&trace, Window::new(0.5, 1.0002).unwrap()).is_ok());
    }

    #[test]
    fn window_rejects_bad_bounds() {
        assert!(Window::new(0.5, 0.5).is_err());
        assert!(Window::new(-0.1, 0.5).is_err());
    }

    #[test]
    fn baseline_subtraction() {
        assert_eq!(subtract_baseline(&[10.0, 12.0], &[3.0, 5.0]).unwrap(), vec![6.0, 8.0]);
        assert_eq!(subtract_baseline(&[4.0, 4.0], &[4.0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(subtract_baseline(&[1.0], &[]), Err(EnergyError::MissingBaseline)));
        assert_eq!(subtract_baseline(&[1.0], &[2.0]).unwrap(), vec![-1.0]);
    }

    #[test]
    fn data_files_for_ten_iterations() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<_> = (1..=10).map(|i| row("com.example", i, f64::from(i))).collect();
        let (data, avg) = emit_data_files(&rows, dir.path()).unwrap();
        let data = std::fs::read_to_string(data).unwrap();
        assert_eq!(data.lines().count(), 11);
        assert_eq!(data.lines().next().unwrap(), DATA_HEADER.join(","));
        let avg = std::fs::read_to_string(avg).unwrap();
        let lines: Vec<_> = avg.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "com.example,10,5.5,55,2,550,7");
    }

    #[test]
    fn single_row_average_equals_row() {
        let r = row("p", 1, 3.25);
        let a = aggregate(std::slice::from_ref(&r)).unwrap();
        assert_eq!((a.n, a.energy_j_mean, a.cpu_pct_mean, a.rx_mean), (1, 3.25, 10.0, 100.0));
    }

    #[test]
    fn energy_mean_of_six_and_eight() {
        let a = aggregate(&[row("p", 1, 6.0), row("p", 2, 8.0)]).unwrap();
        assert_eq!(a.energy_j_mean, 7.0);
    }

    #[test]
    fn mixed_packages_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_data_files(&[row("a", 1, 1.0), row("b", 2, 1.0)], dir.path()).unwrap_err();
        assert!(matches!(err, EnergyError::InvalidInput(_)));
    }

    fn arb_trace() -> impl Strategy<Value = SampleTrace> {
        prop::collection::vec((0.0f64..3.0, 3.0f64..4.5), 2..400).prop_map(|raw| {
            let samples =
                raw.iter().enumerate().map(|(i, &(c, v))| PowerSample { t: i as f64 / 5000.0, current: c, voltage: v });
            SampleTrace::new(samples.collect(), 5000, 0, "p").unwrap()
        })
    }

    proptest! {
        #[test]
        fn adjacent_windows_add_up(trace in arb_trace(), cut in 0.05f64..0.95) {
            let end = trace.span_end();
            let mid = {
                // cut on a sample boundary strictly inside the trace
                let k = ((trace.len() as f64 * cut) as usize).clamp(1, trace.len() - 1);
                trace.samples[k].t
            };
            let a = extract_window(&trace, Window::new(0.0, mid).unwrap()).unwrap();
            let b = extract_window(&trace, Window::new(mid, end).unwrap()).unwrap();
            let whole = integrate_energy(&extract_window(&trace, Window::new(0.0, end).unwrap()).unwrap()).unwrap();
            let parts = integrate_energy(&a).unwrap() + integrate_energy(&b).unwrap();
            prop_assert!((parts - whole).abs() <= 1e-9 * whole.abs().max(1e-12));
        }

        #[test]
        fn doubling_current_doubles_energy(trace in arb_trace()) {
            let mut doubled = trace.clone();
            for s in &mut doubled.samples {
                s.current *= 2.0;
            }
            prop_assert_eq!(integrate_energy(&doubled).unwrap(), 2.0 * integrate_energy(&trace).unwrap());
        }

        #[test]
        fn average_file_matches_recomputed_means(energies in prop::collection::vec(-5.0f64..50.0, 1..30)) {
            let rows: Vec<_> = energies.iter().enumerate().map(|(i, &e)| row("p", i as u32 + 1, e)).collect();
            let dir = tempfile::tempdir().unwrap();
            let (data, avg) = emit_data_files(&rows, dir.path()).unwrap();
            let mut rdr = csv::Reader::from_path(&data).unwrap();
            let parsed: Vec<f64> = rdr.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
            let recomputed = parsed.iter().sum::<f64>() / parsed.len() as f64;
            let mut rdr = csv::Reader::from_path(&avg).unwrap();
            let rec = rdr.records().next().unwrap().unwrap();
            let stored: f64 = rec[2].parse().unwrap();
            prop_assert!((stored - recomputed).abs() <= 1e-12 * recomputed.abs().max(1.0));
        }
    }
}
