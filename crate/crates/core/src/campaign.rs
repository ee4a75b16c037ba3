//! Experiment state machine: a baseline phase, an app-under-test phase, and
//! the operator decisions between iterations.
//!
//! ```text
//! idle ──start──▶ baseline ──next (last)──▶ aut ──next (last)──▶ done
//! ```
//!
//! Each `execute_iteration` samples power while the device runs one test,
//! persists the artifacts as `<phase>/{Logcat_Ri, trace_Ri.csv, cpumem_Ri.txt,
//! net_Ri.txt}` and then waits for a decision: rerun the same index, go to
//! the next one, uninstall the app or clear its data. With `auto_advance`
//! the wait only happens on reliability warnings and failed iterations.

use std::path::{Path, PathBuf};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::device::{AdbDevice, Device, DeviceAction, DeviceError, DeviceInfo, RunMode, RunPlan};
use crate::parsers::DEFAULT_MARKER_TAG;
use crate::sampling::{
    check_reliability, open_source, write_trace, PowerSample, ReliabilityReport, SampleTrace, SamplingError,
    SourceConfig, SourceKind, DEFAULT_DROP_THRESHOLD,
};

pub const MANIFEST_FILE: &str = "campaign.json";
pub const FAILED_DIR: &str = "failed";
pub const SCRIPTS_DIR: &str = "scripts";
const FIFO_DEPTH: usize = 16;
const PROGRESS_EVERY: usize = 5000;
/// Sampling continues this long past the planned end of the test.
const TAIL_S: f64 = 0.25;

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid campaign configuration: {0}")]
    InvalidConfig(String),
    #[error("campaign refused: {}", .0.join("; "))]
    Refused(Vec<String>),
    #[error("invalid transition: {0}")]
    InvalidTransition(String),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CampaignError + '_ {
    move |source| CampaignError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RerunConfig {
    #[default]
    Reinstall,
    ClearData,
}

fn default_iterations() -> u32 {
    10
}
fn default_threshold() -> u64 {
    DEFAULT_DROP_THRESHOLD
}
fn default_capture() -> f64 {
    2.0
}
fn default_tags() -> Vec<String> {
    vec![DEFAULT_MARKER_TAG.to_string()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    #[serde(default = "default_iterations")]
    pub baseline_iterations: u32,
    pub plan: RunPlan,
    pub results_dir: PathBuf,
    pub source: SourceConfig,
    #[serde(default)]
    pub auto_advance: bool,
    #[serde(default)]
    pub rerun_config: RerunConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub drop_threshold: u64,
    /// Capture length when the device gives no timing hint.
    #[serde(default = "default_capture")]
    pub capture_s: f64,
    #[serde(default = "default_tags")]
    pub tags: Vec<String>,
}

impl CampaignConfig {
    pub fn new(plan: RunPlan, source: SourceConfig, results_dir: impl Into<PathBuf>) -> Self {
        Self {
            iterations: default_iterations(),
            baseline_iterations: default_iterations(),
            plan,
            results_dir: results_dir.into(),
            source,
            auto_advance: false,
            rerun_config: RerunConfig::default(),
            seed: 0,
            drop_threshold: default_threshold(),
            capture_s: default_capture(),
            tags: default_tags(),
        }
    }

    pub fn target(&self, phase: Phase) -> u32 {
        match phase {
            Phase::Baseline => self.baseline_iterations,
            Phase::Aut => self.iterations,
            Phase::Idle | Phase::Done => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Idle,
    Baseline,
    Aut,
    Done,
}

impl Phase {
    pub fn mode(self) -> Option<RunMode> {
        match self {
            Self::Baseline => Some(RunMode::Baseline),
            Self::Aut => Some(RunMode::Aut),
            _ => None,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Self::Idle => "idle",
            Self::Baseline => "baseline",
            Self::Aut => "aut",
            Self::Done => "done",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub phase: Phase,
    pub index: u32,
    /// Number of reruns of this index before this record was produced.
    pub attempt: u32,
    pub seed: u64,
    /// Paths relative to the results folder.
    pub trace_path: PathBuf,
    pub logcat_path: PathBuf,
    pub cpu_mem_path: PathBuf,
    pub net_path: PathBuf,
    pub reliability: ReliabilityReport,
    pub nominal_rate_hz: u32,
    pub trigger_offset: f64,
    pub device_api_level: u32,
    #[serde(default)]
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    pub phase: Phase,
    pub current_iteration: u32,
    pub records: Vec<IterationRecord>,
    pub pending_warning: Option<ReliabilityReport>,
    pub awaiting_decision: bool,
    pub failure: Option<String>,
}

impl CampaignState {
    pub fn records_in(&self, phase: Phase) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }

    pub fn is_active(&self) -> bool {
        matches!(self.phase, Phase::Baseline | Phase::Aut)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    IterationStarted,
    SamplesProgress,
    IterationCompleted,
    Warning,
    DecisionRequired,
    PhaseChanged,
    CampaignDone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub payload: serde_json::Value,
}

/// Persisted as `campaign.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: CampaignConfig,
    pub device: DeviceInfo,
    pub state: CampaignState,
}

impl Manifest {
    pub fn load(results_dir: &Path) -> Result<Self, CampaignError> {
        let path = results_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| CampaignError::Io {
            path,
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }
}

pub type Observer = Box<dyn FnMut(&CampaignEvent) + Send>;

pub struct Campaign {
    config: CampaignConfig,
    device_info: DeviceInfo,
    state: CampaignState,
    device: Box<dyn Device>,
    observer: Option<Observer>,
    next_seq: u64,
}

fn mix_seed(base: u64, phase: Phase, index: u32, attempt: u32) -> u64 {
    // splitmix64 finaliser over the packed coordinates
    let tag = match phase {
        Phase::Baseline => 1u64,
        _ => 2,
    };
    let mut z = base ^ (tag << 56) ^ (u64::from(index) << 24) ^ u64::from(attempt);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Campaign {
    /// Validates `config`, checks the device and prepares the results
    /// folder. The campaign starts in the baseline phase (or directly in the
    /// app phase when no baseline iterations are configured).
    pub fn start(config: CampaignConfig, device: Box<dyn Device>) -> Result<Self, CampaignError> {
        Self::start_observed(config, device, None)
    }

    pub fn start_observed(
        config: CampaignConfig,
        mut device: Box<dyn Device>,
        observer: Option<Observer>,
    ) -> Result<Self, CampaignError> {
        if config.iterations < 1 {
            return Err(CampaignError::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(config.capture_s.is_finite() && config.capture_s > 0.0) {
            return Err(CampaignError::InvalidConfig("capture_s must be positive".into()));
        }
        if config.tags.is_empty() {
            return Err(CampaignError::InvalidConfig("at least one marker tag is required".into()));
        }
        config.plan.with_mode(RunMode::Aut).validate()?;
        config.source.validate()?;
        let info = device.preflight();
        let problems = info.problems();
        if !problems.is_empty() {
            return Err(CampaignError::Refused(problems));
        }

        let root = &config.results_dir;
        for sub in [SCRIPTS_DIR, Phase::Baseline.dir_name(), Phase::Aut.dir_name()] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        write_scripts(&config)?;

        let mut campaign = Self {
            state: CampaignState {
                phase: Phase::Idle,
                current_iteration: 0,
                records: Vec::new(),
                pending_warning: None,
                awaiting_decision: false,
                failure: None,
            },
            config,
            device_info: info,
            device,
            observer,
            next_seq: 1,
        };
        let first = if campaign.config.baseline_iterations > 0 { Phase::Baseline } else { Phase::Aut };
        campaign.enter_phase(first)?;
        campaign.save()?;
        Ok(campaign)
    }

    pub fn state(&self) -> &CampaignState {
        &self.state
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.config
    }

    pub fn manifest(&self) -> Manifest {
        Manifest { config: self.config.clone(), device: self.device_info.clone(), state: self.state.clone() }
    }

    pub fn set_observer(&mut self, observer: Option<Observer>) {
        self.observer = observer;
    }

    fn emit(&mut self, kind: EventKind, payload: serde_json::Value) {
        let event = CampaignEvent { seq: self.next_seq, kind, payload };
        self.next_seq += 1;
        if let Some(obs) = self.observer.as_mut() {
            obs(&event);
        }
    }

    fn save(&self) -> Result<(), CampaignError> {
        let path = self.config.results_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    fn enter_phase(&mut self, phase: Phase) -> Result<(), CampaignError> {
        if phase == Phase::Aut {
            self.device.install(&self.config.plan.with_mode(RunMode::Aut))?;
        }
        self.state.phase = phase;
        self.state.current_iteration = 0;
        self.emit(EventKind::PhaseChanged, json!({ "phase": phase }));
        if phase == Phase::Done {
            let records = self.state.records.len();
            self.emit(EventKind::CampaignDone, json!({ "records": records }));
        }
        Ok(())
    }

    /// Runs the next iteration of the current phase.
    pub fn execute_iteration(&mut self) -> Result<IterationRecord, CampaignError> {
        if !self.state.is_active() {
            return Err(CampaignError::InvalidTransition(format!(
                "cannot execute an iteration in phase {:?}",
                self.state.phase
            )));
        }
        if self.state.awaiting_decision {
            return Err(CampaignError::InvalidTransition("a decision is pending".into()));
        }
        let index = self.state.current_iteration + 1;
        debug_assert!(index <= self.config.target(self.state.phase));
        self.run_index(index, 0)
    }

    /// Applies an operator decision.
    pub fn decide(&mut self, action: DeviceAction) -> Result<Option<IterationRecord>, CampaignError> {
        if !self.state.is_active() {
            return Err(CampaignError::InvalidTransition(format!("no active campaign (phase {:?})", self.state.phase)));
        }
        if self.state.records.is_empty() {
            return Err(CampaignError::InvalidTransition("no iteration has been executed yet".into()));
        }
        match action {
            DeviceAction::RerunIteration => {
                let index = self.state.current_iteration;
                if index == 0 {
                    return Err(CampaignError::InvalidTransition("no iteration of this phase to rerun".into()));
                }
                let attempt = self
                    .state
                    .records
                    .iter()
                    .find(|r| r.phase == self.state.phase && r.index == index)
                    .map_or(0, |r| r.attempt + 1);
                if self.state.phase == Phase::Aut {
                    match self.config.rerun_config {
                        RerunConfig::Reinstall => self.device.install(&self.config.plan.with_mode(RunMode::Aut))?,
                        RerunConfig::ClearData => self.device.apply_action(DeviceAction::ClearAutData)?,
                    }
                }
                self.clear_pending();
                self.run_index(index, attempt).map(Some)
            }
            DeviceAction::NextIteration => {
                if !self.state.awaiting_decision {
                    return Err(CampaignError::InvalidTransition("no decision is pending".into()));
                }
                self.advance()?;
                self.save()?;
                Ok(None)
            }
            DeviceAction::UninstallAut | DeviceAction::ClearAutData => {
                self.device.apply_action(action)?;
                Ok(None)
            }
        }
    }

    /// Executes iterations and asks `decide` whenever the campaign pauses,
    /// until the campaign is done.
    pub fn run_until_done(
        &mut self,
        mut decide: impl FnMut(&CampaignState) -> DeviceAction,
    ) -> Result<(), CampaignError> {
        while self.state.is_active() {
            if self.state.awaiting_decision {
                let action = decide(&self.state);
                self.decide(action)?;
            } else {
                self.execute_iteration()?;
            }
        }
        Ok(())
    }

    fn clear_pending(&mut self) {
        self.state.awaiting_decision = false;
        self.state.pending_warning = None;
        self.state.failure = None;
    }

    fn advance(&mut self) -> Result<(), CampaignError> {
        self.clear_pending();
        let phase = self.state.phase;
        if self.state.current_iteration >= self.config.target(phase) {
            let next = if phase == Phase::Baseline { Phase::Aut } else { Phase::Done };
            self.enter_phase(next)?;
        }
        Ok(())
    }

    fn pause(&mut self, reason: &str) {
        self.state.awaiting_decision = true;
        let payload = json!({
            "phase": self.state.phase,
            "index": self.state.current_iteration,
            "reason": reason,
            "options": DeviceAction::ALL,
        });
        self.emit(EventKind::DecisionRequired, payload);
    }

    fn run_index(&mut self, index: u32, attempt: u32) -> Result<IterationRecord, CampaignError> {
        let phase = self.state.phase;
        let mode = phase.mode().expect("active phase");
        let plan = self.config.plan.with_mode(mode);
        let seed = mix_seed(self.config.seed, phase, index, attempt);
        self.emit(EventKind::IterationStarted, json!({ "phase": phase, "index": index, "attempt": attempt }));

        let timing = self.device.planned_timing(&plan, seed);
        let mut source_cfg = self.config.source.clone();
        if source_cfg.kind == SourceKind::Simulated {
            if let Some(p) = source_cfg.profile.as_mut() {
                p.seed = seed;
                p.active_window = timing.filter(|t| t.active).map(|t| t.window);
            }
        }
        let duration = timing.map_or(self.config.capture_s, |t| t.window.end + TAIL_S);
        let mut source = open_source(&source_cfg)?;

        // Sampling and the device test run side by side; samples flow
        // through a bounded FIFO into this thread.
        let (tx, rx) = mpsc::sync_channel::<Vec<PowerSample>>(FIFO_DEPTH);
        let device = &mut self.device;
        let observer = &mut self.observer;
        let next_seq = &mut self.next_seq;
        let (sampled, device_result, samples) = std::thread::scope(|s| {
            let sampler = s.spawn(move || {
                let mut sink = |chunk: &[PowerSample]| {
                    let _ = tx.send(chunk.to_vec());
                };
                let dropped = source.stream(duration, &mut sink);
                (dropped, source.nominal_rate_hz(), source.source_id())
            });
            let runner = s.spawn(|| device.run_iteration(&plan, seed));
            let mut samples = Vec::new();
            let mut reported = 0;
            for chunk in rx {
                samples.extend(chunk);
                if samples.len() - reported >= PROGRESS_EVERY {
                    reported = samples.len();
                    let event = CampaignEvent {
                        seq: *next_seq,
                        kind: EventKind::SamplesProgress,
                        payload: json!({ "phase": phase, "index": index, "samples": reported }),
                    };
                    *next_seq += 1;
                    if let Some(obs) = observer.as_mut() {
                        obs(&event);
                    }
                }
            }
            let sampled = sampler.join().expect("sampler thread panicked");
            let device_result = runner.join().expect("device thread panicked");
            (sampled, device_result, samples)
        });
        let (dropped, rate, source_id) = sampled;
        let trace = SampleTrace::new(samples, rate, dropped?, format!("{}/R{index}", phase.dir_name()))?;
        let _ = source_id;
        let reliability = check_reliability(&trace, self.config.drop_threshold);

        let (artifacts, failed) = match device_result {
            Ok(a) => (Some(a), None),
            Err(DeviceError::IterationFailed { reason, partial_logcat }) => {
                (None, Some((reason, partial_logcat)))
            }
            Err(other) => return Err(other.into()),
        };

        let rel_dir = match failed {
            Some(_) => PathBuf::from(phase.dir_name()).join(FAILED_DIR),
            None => PathBuf::from(phase.dir_name()),
        };
        let abs_dir = self.config.results_dir.join(&rel_dir);
        std::fs::create_dir_all(&abs_dir).map_err(io_err(&abs_dir))?;
        let record = IterationRecord {
            phase,
            index,
            attempt,
            seed,
            trace_path: rel_dir.join(format!("trace_R{index}.csv")),
            logcat_path: rel_dir.join(format!("Logcat_R{index}")),
            cpu_mem_path: rel_dir.join(format!("cpumem_R{index}.txt")),
            net_path: rel_dir.join(format!("net_R{index}.txt")),
            reliability: reliability.clone(),
            nominal_rate_hz: rate,
            trigger_offset: artifacts.as_ref().map_or(0.0, |a| a.trigger_offset),
            device_api_level: artifacts.as_ref().map_or(self.device_info.api_level, |a| a.device_api_level),
            failed: failed.as_ref().map(|(reason, _)| reason.clone()),
        };
        let root = &self.config.results_dir;
        write_trace(&trace, &root.join(&record.trace_path))?;
        let (logcat, cpu_mem, net) = match (&artifacts, &failed) {
            (Some(a), _) => (a.logcat_text.as_str(), a.cpu_mem_text.as_str(), a.net_text.as_str()),
            (None, Some((_, partial))) => (partial.as_str(), "", ""),
            (None, None) => unreachable!(),
        };
        for (rel, text) in [(&record.logcat_path, logcat), (&record.cpu_mem_path, cpu_mem), (&record.net_path, net)] {
            let path = root.join(rel);
            std::fs::write(&path, text).map_err(io_err(&path))?;
        }

        self.state.records.retain(|r| !(r.phase == phase && r.index == index));
        let pos = self.state.records.partition_point(|r| (r.phase, r.index) < (phase, index));
        self.state.records.insert(pos, record.clone());
        self.state.current_iteration = index;

        self.emit(
            EventKind::IterationCompleted,
            json!({
                "phase": phase,
                "index": index,
                "attempt": attempt,
                "samples": trace.len(),
                "dropped": trace.dropped_count,
                "warn": reliability.warn,
                "failed": record.failed,
            }),
        );
        if reliability.warn {
            self.emit(EventKind::Warning, json!({ "phase": phase, "index": index, "report": reliability }));
        }

        if let Some((reason, _)) = failed {
            self.state.failure = Some(reason.clone());
            self.pause(&format!("iteration failed: {reason}"));
        } else if reliability.warn && !self.config.auto_advance {
            self.state.pending_warning = Some(reliability);
            self.pause("reliability warning");
        } else if self.config.auto_advance {
            self.advance()?;
        } else {
            self.pause("iteration complete");
        }
        self.save()?;
        Ok(record)
    }
}

fn write_scripts(config: &CampaignConfig) -> Result<(), CampaignError> {
    let adb = AdbDevice::default();
    for mode in [RunMode::Baseline, RunMode::Aut] {
        let script = adb.script(&config.plan.with_mode(mode));
        let name = match mode {
            RunMode::Baseline => "baseline_iteration.sh",
            RunMode::Aut => "aut_iteration.sh",
        };
        let mut text = String::from("#!/bin/sh\nset -e\n");
        for line in script.clear_stats.iter().chain(&script.install).chain(&script.run).chain(&script.pull) {
            text.push_str(line);
            text.push('\n');
        }
        let path = config.results_dir.join(SCRIPTS_DIR).join(name);
        std::fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}
