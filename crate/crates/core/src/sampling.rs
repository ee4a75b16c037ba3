//! Current/voltage sample traces and the sources that produce them.
//!
//! Three source kinds exist: a seeded simulator, a CSV replay, and a client
//! for a USB power monitor. The monitor client speaks a small command
//! protocol over a [`MonitorTransport`]; no transport for real hardware is
//! bundled, so opening a monitor source without one reports
//! [`SamplingError::BackendUnavailable`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::Window;

pub const DEFAULT_RATE_HZ: u32 = 5000;
pub const DEFAULT_DROP_THRESHOLD: u64 = 1000;
pub const DEFAULT_CURRENT_LIMIT_A: f64 = 8.0;
pub const TRACE_HEADER: &str = "t_s,current_a,voltage_v";

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("invalid source configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("acquisition failed: {0}")]
    Acquisition(String),
    #[error("power monitor backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("{path}: expected header `{TRACE_HEADER}`, found `{found}`")]
    Header { path: PathBuf, found: String },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SamplingError + '_ {
    move |source| SamplingError::Io { path: path.to_path_buf(), source }
}

/// One current/voltage reading. `t` is seconds since sampling start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub t: f64,
    pub current: f64,
    pub voltage: f64,
}

impl PowerSample {
    pub fn power(&self) -> f64 {
        self.current * self.voltage
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub samples: Vec<PowerSample>,
    pub nominal_rate_hz: u32,
    pub dropped_count: u64,
    pub source_id: String,
}

impl SampleTrace {
    /// Builds a trace, checking ordering and physical ranges.
    pub fn new(
        samples: Vec<PowerSample>,
        nominal_rate_hz: u32,
        dropped_count: u64,
        source_id: impl Into<String>,
    ) -> Result<Self, SamplingError> {
        let trace = Self { samples, nominal_rate_hz, dropped_count, source_id: source_id.into() };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.nominal_rate_hz == 0 {
            return Err(SamplingError::InvalidTrace("nominal rate must be positive".into()));
        }
        let mut prev = 0.0_f64;
        for (i, s) in self.samples.iter().enumerate() {
            if !(s.t.is_finite() && s.t >= 0.0) {
                return Err(SamplingError::InvalidTrace(format!("sample {i}: bad time {}", s.t)));
            }
            if s.t < prev {
                return Err(SamplingError::InvalidTrace(format!("sample {i}: time goes backwards")));
            }
            if !(s.current.is_finite() && s.current >= 0.0) {
                return Err(SamplingError::InvalidTrace(format!("sample {i}: bad current {}", s.current)));
            }
            if !(s.voltage.is_finite() && s.voltage > 0.0) {
                return Err(SamplingError::InvalidTrace(format!("sample {i}: bad voltage {}", s.voltage)));
            }
            prev = s.t;
        }
        Ok(())
    }

    pub fn sample_period(&self) -> f64 {
        1.0 / f64::from(self.nominal_rate_hz)
    }

    /// Span covered by the trace: from 0 to one period past the last sample.
    pub fn span_end(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t + self.sample_period())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub dropped_count: u64,
    pub threshold: u64,
    pub warn: bool,
    pub message: String,
}

/// Flags a trace whose dropped-sample count reaches `threshold`.
pub fn check_reliability(trace: &SampleTrace, threshold: u64) -> ReliabilityReport {
    let warn = trace.dropped_count >= threshold;
    let message = if warn {
        format!(
            "{}: {} samples dropped (threshold {threshold}); check current/voltage data",
            trace.source_id, trace.dropped_count
        )
    } else {
        format!("{}: {} samples dropped, within threshold {threshold}", trace.source_id, trace.dropped_count)
    };
    ReliabilityReport { dropped_count: trace.dropped_count, threshold, warn, message }
}

/// Drives the simulated source. `active_window` is the trace interval during
/// which the simulated phone draws `active_current`; outside it the draw is
/// `baseline_current`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub baseline_current: f64,
    pub active_current: f64,
    pub voltage: f64,
    pub noise_sd: f64,
    pub seed: u64,
    #[serde(default)]
    pub active_window: Option<Window>,
    #[serde(default)]
    pub dropped_samples: u64,
}

impl WorkloadProfile {
    pub fn constant(current: f64, voltage: f64) -> Self {
        Self {
            baseline_current: current,
            active_current: current,
            voltage,
            noise_sd: 0.0,
            seed: 0,
            active_window: None,
            dropped_samples: 0,
        }
    }

    fn validate(&self) -> Result<(), SamplingError> {
        let ok = self.baseline_current.is_finite()
            && self.active_current.is_finite()
            && self.baseline_current >= 0.0
            && self.active_current >= self.baseline_current;
        if !ok {
            return Err(SamplingError::InvalidConfig(
                "profile needs active_current >= baseline_current >= 0".into(),
            ));
        }
        if !(self.voltage.is_finite() && self.voltage > 0.0) {
            return Err(SamplingError::InvalidConfig("profile voltage must be positive".into()));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(SamplingError::InvalidConfig("noise_sd must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Simulated,
    Replay,
    Monitor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub kind: SourceKind,
    pub rate_hz: u32,
    pub runtime_current_limit: f64,
    pub usb_channel_enabled: bool,
    #[serde(default)]
    pub serial_number: Option<String>,
    #[serde(default)]
    pub profile: Option<WorkloadProfile>,
    #[serde(default)]
    pub replay_path: Option<PathBuf>,
}

impl SourceConfig {
    pub fn simulated(profile: WorkloadProfile) -> Self {
        Self {
            kind: SourceKind::Simulated,
            rate_hz: DEFAULT_RATE_HZ,
            runtime_current_limit: DEFAULT_CURRENT_LIMIT_A,
            usb_channel_enabled: true,
            serial_number: None,
            profile: Some(profile),
            replay_path: None,
        }
    }

    pub fn replay(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: SourceKind::Replay,
            replay_path: Some(path.into()),
            profile: None,
            ..Self::simulated(WorkloadProfile::constant(0.0, 1.0))
        }
    }

    pub fn monitor(serial_number: Option<String>) -> Self {
        Self {
            kind: SourceKind::Monitor,
            serial_number,
            profile: None,
            ..Self::simulated(WorkloadProfile::constant(0.0, 1.0))
        }
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.rate_hz == 0 {
            return Err(SamplingError::InvalidConfig("rate_hz must be positive".into()));
        }
        if !(self.runtime_current_limit.is_finite() && self.runtime_current_limit > 0.0) {
            return Err(SamplingError::InvalidConfig("runtime current limit must be positive".into()));
        }
        match self.kind {
            SourceKind::Simulated => match &self.profile {
                Some(p) => p.validate(),
                None => Err(SamplingError::InvalidConfig("simulated source requires a profile".into())),
            },
            SourceKind::Replay if self.replay_path.is_none() => {
                Err(SamplingError::InvalidConfig("replay source requires replay_path".into()))
            }
            _ => Ok(()),
        }
    }
}

/// A streaming producer of samples. `stream` delivers samples in chunks to
/// `sink` and returns the number of samples the source failed to deliver.
pub trait PowerSource: Send {
    fn source_id(&self) -> String;
    fn nominal_rate_hz(&self) -> u32;
    fn stream(
        &mut self,
        duration: f64,
        sink: &mut dyn FnMut(&[PowerSample]),
    ) -> Result<u64, SamplingError>;
}

const CHUNK: usize = 500;

pub struct SimulatedSource {
    profile: WorkloadProfile,
    rate_hz: u32,
}

impl SimulatedSource {
    pub fn new(profile: WorkloadProfile, rate_hz: u32) -> Self {
        Self { profile, rate_hz }
    }
}

impl PowerSource for SimulatedSource {
    fn source_id(&self) -> String {
        format!("simulated:seed={}", self.profile.seed)
    }

    fn nominal_rate_hz(&self) -> u32 {
        self.rate_hz
    }

    fn stream(
        &mut self,
        duration: f64,
        sink: &mut dyn FnMut(&[PowerSample]),
    ) -> Result<u64, SamplingError> {
        let p = &self.profile;
        let rate = f64::from(self.rate_hz);
        let expected = (duration * rate).round() as u64;
        let dropped = p.dropped_samples.min(expected);
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let noise = Normal::new(0.0, p.noise_sd).map_err(|e| SamplingError::InvalidConfig(e.to_string()))?;
        let mut chunk = Vec::with_capacity(CHUNK);
        for i in 0..expected {
            let t = i as f64 / rate;
            let base = match p.active_window {
                Some(w) if w.contains(t) => p.active_current,
                _ => p.baseline_current,
            };
            let jitter = if p.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            // evenly spread: sample i is lost when the running drop quota steps up
            let lost = dropped > 0 && (i + 1) * dropped / expected > i * dropped / expected;
            if lost {
                continue;
            }
            chunk.push(PowerSample { t, current: (base + jitter).max(0.0), voltage: p.voltage });
            if chunk.len() == CHUNK {
                sink(&chunk);
                chunk.clear();
            }
        }
        if !chunk.is_empty() {
            sink(&chunk);
        }
        Ok(dropped)
    }
}

pub struct ReplaySource {
    path: PathBuf,
    rate_hz: u32,
}

impl PowerSource for ReplaySource {
    fn source_id(&self) -> String {
        format!("replay:{}", self.path.display())
    }

    fn nominal_rate_hz(&self) -> u32 {
        self.rate_hz
    }

    fn stream(
        &mut self,
        duration: f64,
        sink: &mut dyn FnMut(&[PowerSample]),
    ) -> Result<u64, SamplingError> {
        let trace = read_trace_as(&self.path, self.rate_hz, 0, self.source_id())
            .map_err(|e| SamplingError::Acquisition(e.to_string()))?;
        let end = trace.samples.partition_point(|s| s.t < duration);
        for chunk in trace.samples[..end].chunks(CHUNK) {
            sink(chunk);
        }
        Ok(0)
    }
}

/// Commands understood by the power monitor.
#[derive(Debug, Clone, PartialEq)]
pub enum MonitorCommand {
    SetRuntimeCurrentLimit(f64),
    SetUsbChannel(bool),
    StartSampling { rate_hz: u32 },
    /// Ask for up to `max` buffered samples.
    ReadSamples { max: usize },
    StopSampling,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MonitorReply {
    Ack,
    Samples { samples: Vec<PowerSample>, dropped: u64 },
}

pub trait MonitorTransport: Send {
    fn send(&mut self, cmd: MonitorCommand) -> Result<MonitorReply, SamplingError>;
}

/// Transport used when no hardware link is compiled in.
pub struct UnavailableTransport;

impl MonitorTransport for UnavailableTransport {
    fn send(&mut self, _cmd: MonitorCommand) -> Result<MonitorReply, SamplingError> {
        Err(SamplingError::BackendUnavailable("no power monitor transport is available on this host".into()))
    }
}

/// Client for a single power monitor. Setup applies the current limit and
/// enables the USB channel; the channel is turned off for the duration of a
/// measurement so the phone does not charge from the host.
pub struct MonitorClient<T: MonitorTransport> {
    transport: T,
    config: SourceConfig,
}

impl<T: MonitorTransport> MonitorClient<T> {
    pub fn connect(mut transport: T, config: SourceConfig) -> Result<Self, SamplingError> {
        expect_ack(transport.send(MonitorCommand::SetRuntimeCurrentLimit(config.runtime_current_limit))?)?;
        expect_ack(transport.send(MonitorCommand::SetUsbChannel(config.usb_channel_enabled))?)?;
        Ok(Self { transport, config })
    }
}

fn expect_ack(reply: MonitorReply) -> Result<(), SamplingError> {
    match reply {
        MonitorReply::Ack => Ok(()),
        other => Err(SamplingError::Acquisition(format!("unexpected monitor reply {other:?}"))),
    }
}

impl<T: MonitorTransport> PowerSource for MonitorClient<T> {
    fn source_id(&self) -> String {
        format!("monitor:{}", self.config.serial_number.as_deref().unwrap_or("default"))
    }

    fn nominal_rate_hz(&self) -> u32 {
        self.config.rate_hz
    }

    fn stream(
        &mut self,
        duration: f64,
        sink: &mut dyn FnMut(&[PowerSample]),
    ) -> Result<u64, SamplingError> {
        let expected = (duration * f64::from(self.config.rate_hz)).round() as u64;
        expect_ack(self.transport.send(MonitorCommand::SetUsbChannel(false))?)?;
        expect_ack(self.transport.send(MonitorCommand::StartSampling { rate_hz: self.config.rate_hz })?)?;
        let mut seen = 0u64;
        let mut dropped = 0u64;
        while seen + dropped < expected {
            let max = (expected - seen - dropped).min(CHUNK as u64) as usize;
            match self.transport.send(MonitorCommand::ReadSamples { max })? {
                MonitorReply::Samples { samples, dropped: d } => {
                    if samples.is_empty() && d == 0 {
                        break;
                    }
                    seen += samples.len() as u64;
                    dropped += d;
                    sink(&samples);
                }
                MonitorReply::Ack => {
                    return Err(SamplingError::Acquisition("monitor acknowledged a sample read".into()))
                }
            }
        }
        expect_ack(self.transport.send(MonitorCommand::StopSampling)?)?;
        expect_ack(self.transport.send(MonitorCommand::SetUsbChannel(self.config.usb_channel_enabled))?)?;
        Ok(dropped)
    }
}

/// Opens the source described by `config`.
pub fn open_source(config: &SourceConfig) -> Result<Box<dyn PowerSource>, SamplingError> {
    config.validate()?;
    Ok(match config.kind {
        SourceKind::Simulated => {
            let profile = config.profile.clone().expect("validated");
            Box::new(SimulatedSource::new(profile, config.rate_hz))
        }
        SourceKind::Replay => {
            let path = config.replay_path.clone().expect("validated");
            if !path.is_file() {
                return Err(SamplingError::Acquisition(format!("replay file {} not found", path.display())));
            }
            Box::new(ReplaySource { path, rate_hz: config.rate_hz })
        }
        SourceKind::Monitor => Box::new(MonitorClient::connect(UnavailableTransport, config.clone())?),
    })
}

/// Collects a full trace from an already opened source.
pub fn collect(source: &mut dyn PowerSource, duration: f64) -> Result<SampleTrace, SamplingError> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(SamplingError::InvalidConfig("duration must be positive".into()));
    }
    let mut samples = Vec::new();
    let dropped = source.stream(duration, &mut |chunk| samples.extend_from_slice(chunk))?;
    SampleTrace::new(samples, source.nominal_rate_hz(), dropped, source.source_id())
}

pub fn acquire_trace(config: &SourceConfig, duration: f64) -> Result<SampleTrace, SamplingError> {
    let mut source = open_source(config)?;
    collect(source.as_mut(), duration)
}

pub fn write_trace(trace: &SampleTrace, path: &Path) -> Result<(), SamplingError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for s in &trace.samples {
            writeln!(out, "{},{},{}", s.t, s.current, s.voltage)?;
        }
        out.flush()
    };
    write().map_err(io_err(path))
}

/// Reads a trace CSV with default metadata: 5 kHz, no drops, and the file
/// stem as source id. The file format carries samples only.
pub fn read_trace(path: &Path) -> Result<SampleTrace, SamplingError> {
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_trace_as(path, DEFAULT_RATE_HZ, 0, id)
}

pub fn read_trace_as(
    path: &Path,
    nominal_rate_hz: u32,
    dropped_count: u64,
    source_id: impl Into<String>,
) -> Result<SampleTrace, SamplingError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(l) => l.map_err(io_err(path))?,
        None => String::new(),
    };
    if header.trim_end_matches('\r') != TRACE_HEADER {
        return Err(SamplingError::Header { path: path.to_path_buf(), found: header });
    }
    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| SamplingError::Parse { path: path.to_path_buf(), line: line_no, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let mut vals = [0.0; 3];
        for (slot, (name, raw)) in vals.iter_mut().zip(["t_s", "current_a", "voltage_v"].iter().zip(&fields)) {
            *slot = raw.parse::<f64>().map_err(|_| parse_err(format!("{name}: `{raw}` is not a number")))?;
        }
        samples.push(PowerSample { t: vals[0], current: vals[1], voltage: vals[2] });
    }
    SampleTrace::new(samples, nominal_rate_hz, dropped_count, source_id).map_err(|e| SamplingError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })
}
