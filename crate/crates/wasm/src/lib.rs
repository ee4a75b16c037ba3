//! Browser bindings for the voltlab core: simulate a power trace and
//! integrate it, run a statistical test over CSV text, and render a plot.
//!
//! Each export takes and returns JSON (or SVG) strings. The `*_json`
//! functions hold the logic and are callable from native Rust too.

use serde::{Deserialize, Serialize};
use voltlab_core::energy::{extract_window, integrate_energy};
use voltlab_core::plot::{render_plot, PlotSpec};
use voltlab_core::sampling::{acquire_trace, check_reliability, DEFAULT_DROP_THRESHOLD};
use voltlab_core::stats::{run_analysis, AnalysisSpec};
use voltlab_core::{Dataset, SourceConfig, Window, WorkloadProfile};
use wasm_bindgen::prelude::*;

/// Upper bound on points handed to the page for drawing.
pub const MAX_POINTS: usize = 2000;

fn default_rate() -> u32 {
    5000
}
fn default_duration() -> f64 {
    2.0
}

#[derive(Debug, Clone, Deserialize)]
pub struct SimulationRequest {
    pub baseline_current: f64,
    pub active_current: f64,
    pub voltage: f64,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dropped_samples: u64,
    /// Active window in seconds; omitted means idle throughout.
    #[serde(default)]
    pub active: Option<(f64, f64)>,
    #[serde(default = "default_rate")]
    pub rate_hz: u32,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationResult {
    pub samples: usize,
    pub dropped: u64,
    pub warn: bool,
    pub message: String,
    pub energy_j: f64,
    /// Energy inside the active window only, when one was given.
    pub active_energy_j: Option<f64>,
    /// `[t, current]` pairs, bucket means over at most `MAX_POINTS` points.
    pub points: Vec<(f64, f64)>,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Bucket means of `(t, y)` down to at most `max` points.
pub fn downsample(points: &[(f64, f64)], max: usize) -> Vec<(f64, f64)> {
    if points.len() <= max || max == 0 {
        return points.to_vec();
    }
    let per = points.len().div_ceil(max);
    points
        .chunks(per)
        .map(|c| {
            let n = c.len() as f64;
            (c.iter().map(|p| p.0).sum::<f64>() / n, c.iter().map(|p| p.1).sum::<f64>() / n)
        })
        .collect()
}

pub fn simulate_json(request: &str) -> Result<String, String> {
    let req: SimulationRequest = serde_json::from_str(request).map_err(err)?;
    let window = req.active.map(|(a, b)| Window::new(a, b)).transpose().map_err(err)?;
    let mut source = SourceConfig::simulated(WorkloadProfile {
        baseline_current: req.baseline_current,
        active_current: req.active_current,
        voltage: req.voltage,
        noise_sd: req.noise_sd,
        seed: req.seed,
        active_window: window,
        dropped_samples: req.dropped_samples,
    });
    source.rate_hz = req.rate_hz;
    let trace = acquire_trace(&source, req.duration_s).map_err(err)?;
    let report = check_reliability(&trace, DEFAULT_DROP_THRESHOLD);
    let energy_j = integrate_energy(&trace).map_err(err)?;
    let active_energy_j = match window {
        Some(w) => Some(extract_window(&trace, w).and_then(|t| integrate_energy(&t)).map_err(err)?),
        None => None,
    };
    let raw: Vec<(f64, f64)> = trace.samples.iter().map(|s| (s.t, s.current)).collect();
    let result = SimulationResult {
        samples: trace.len(),
        dropped: trace.dropped_count,
        warn: report.warn,
        message: report.message,
        energy_j,
        active_energy_j,
        points: downsample(&raw, MAX_POINTS),
    };
    serde_json::to_string(&result).map_err(err)
}

/// Runs `spec` (an analysis spec as JSON) over CSV text and returns the
/// report as JSON.
pub fn analyze_json(csv: &str, spec: &str) -> Result<String, String> {
    let data = Dataset::from_csv_str(csv).map_err(err)?;
    let spec: AnalysisSpec = serde_json::from_str(spec).map_err(err)?;
    let report = run_analysis(&data, &spec).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

pub fn plot_svg(csv: &str, spec: &str) -> Result<String, String> {
    let data = Dataset::from_csv_str(csv).map_err(err)?;
    let spec: PlotSpec = serde_json::from_str(spec).map_err(err)?;
    render_plot(&data, &spec).map_err(err)
}

/// Column names of CSV text, for filling variable selectors.
pub fn columns_json(csv: &str) -> Result<String, String> {
    let data = Dataset::from_csv_str(csv).map_err(err)?;
    serde_json::to_string(data.names()).map_err(err)
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn simulate(request: &str) -> Result<String, JsError> {
    js(simulate_json(request))
}

#[wasm_bindgen]
pub fn analyze(csv: &str, spec: &str) -> Result<String, JsError> {
    js(analyze_json(csv, spec))
}

#[wasm_bindgen]
pub fn plot(csv: &str, spec: &str) -> Result<String, JsError> {
    js(plot_svg(csv, spec))
}

#[wasm_bindgen]
pub fn columns(csv: &str) -> Result<String, JsError> {
    js(columns_json(csv))
}
