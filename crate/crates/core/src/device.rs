//! Mobile device abstraction and a deterministic simulated phone.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::Window;
use crate::parsers::{DEFAULT_MARKER_TAG, TEST_END, TEST_START};

/// Lowest API level accepted for measurement (Android 5.0).
pub const MIN_API_LEVEL: u32 = 21;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("device unreachable")]
    Unreachable,
    #[error("iteration failed: {reason}")]
    IterationFailed { reason: String, partial_logcat: String },
    #[error("invalid run plan: {0}")]
    InvalidPlan(String),
    #[error("operation not supported by this agent: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceInfo {
    pub api_level: u32,
    pub connected: bool,
    pub brightness_min: bool,
    pub nonessential_services_stopped: bool,
}

impl DeviceInfo {
    /// Reasons the device is unfit for a campaign; empty when usable.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.connected {
            out.push("device not connected".to_string());
        }
        if !self.brightness_min {
            out.push("screen brightness is not at minimum".to_string());
        }
        if self.api_level < MIN_API_LEVEL {
            out.push(format!("API level {} is below the minimum {MIN_API_LEVEL}", self.api_level));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Baseline,
    Aut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub app_package: String,
    pub app_apk_path: PathBuf,
    pub test_apk_path: PathBuf,
    pub test_class: String,
    pub test_runner: String,
    pub mode: RunMode,
    pub device_data_path: PathBuf,
}

impl RunPlan {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if self.mode == RunMode::Aut {
            let missing = [
                ("app_package", self.app_package.is_empty()),
                ("app_apk_path", self.app_apk_path.as_os_str().is_empty()),
                ("test_apk_path", self.test_apk_path.as_os_str().is_empty()),
                ("test_class", self.test_class.is_empty()),
            ];
            if let Some((name, _)) = missing.iter().find(|(_, m)| *m) {
                return Err(DeviceError::InvalidPlan(format!("{name} is required in aut mode")));
            }
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: RunMode) -> Self {
        Self { mode, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationArtifacts {
    pub logcat_text: String,
    pub cpu_mem_text: String,
    pub net_text: String,
    pub device_api_level: u32,
    /// Host trace time (seconds) at which the device test started.
    pub trigger_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceAction {
    RerunIteration,
    NextIteration,
    UninstallAut,
    ClearAutData,
}

impl DeviceAction {
    pub const ALL: [DeviceAction; 4] =
        [Self::RerunIteration, Self::NextIteration, Self::UninstallAut, Self::ClearAutData];
}

/// When the device will be busy during an iteration, in trace time.
/// `active` is false for baseline runs, where the test window is only an
/// idle period of matching length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestTiming {
    pub window: Window,
    pub active: bool,
}

pub trait Device: Send {
    fn preflight(&mut self) -> DeviceInfo;
    fn install(&mut self, plan: &RunPlan) -> Result<(), DeviceError>;
    fn run_iteration(&mut self, plan: &RunPlan, seed: u64) -> Result<IterationArtifacts, DeviceError>;
    fn apply_action(&mut self, action: DeviceAction) -> Result<(), DeviceError>;

    /// Timing hint for simulated power sources. Physical devices return
    /// `None`: their draw is whatever the monitor observes.
    fn planned_timing(&self, _plan: &RunPlan, _seed: u64) -> Option<TestTiming> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatedDeviceConfig {
    pub api_level: u32,
    pub connected: bool,
    pub brightness_min: bool,
    pub nonessential_services_stopped: bool,
    pub uid: u32,
    /// 1-based run numbers (counted over the device lifetime) that crash.
    pub crash_runs: Vec<u32>,
}

impl Default for SimulatedDeviceConfig {
    fn default() -> Self {
        Self {
            api_level: 30,
            connected: true,
            brightness_min: true,
            nonessential_services_stopped: true,
            uid: 10123,
            crash_runs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedDevice {
    config: SimulatedDeviceConfig,
    installed: Option<String>,
    has_data: bool,
    runs: u32,
}

const RUNNER_PID: u32 = 2001;
const SYSTEM_PID: u32 = 612;

impl SimulatedDevice {
    pub fn new(config: SimulatedDeviceConfig) -> Self {
        Self { config, installed: None, has_data: false, runs: 0 }
    }

    pub fn is_installed(&self) -> bool {
        self.installed.is_some()
    }

    pub fn has_app_data(&self) -> bool {
        self.has_data
    }

    fn timing_ms(seed: u64) -> (u64, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7469_6d69_6e67);
        let offset_ms = 100 + rng.random_range(0..100u64);
        let duration_ms = 950 + rng.random_range(0..100u64);
        (offset_ms, duration_ms)
    }
}

impl Default for SimulatedDevice {
    fn default() -> Self {
        Self::new(SimulatedDeviceConfig::default())
    }
}

struct LogWriter {
    api_level: u32,
    lines: Vec<String>,
}

impl LogWriter {
    fn push(&mut self, ms: u64, pid: u32, tid: u32, level: char, tag: &str, msg: &str) {
        let ts = format_device_time(ms);
        let line = if self.api_level >= 24 {
            format!("{ts} {pid:>5} {tid:>5} {level} {tag}: {msg}")
        } else {
            format!("{ts} {level}/{tag}({pid:>5}): {msg}")
        };
        self.lines.push(line);
    }
}

/// Device clock origin for simulated logs: June 12, 14:32:00.000.
const CLOCK_ORIGIN_MS: u64 = ((12 * 24 + 14) * 60 + 32) * 60_000;

fn format_device_time(ms: u64) -> String {
    let total = CLOCK_ORIGIN_MS + ms;
    let day = total / 86_400_000;
    let h = total / 3_600_000 % 24;
    let m = total / 60_000 % 60;
    let s = total / 1000 % 60;
    let milli = total % 1000;
    format!("06-{day:02} {h:02}:{m:02}:{s:02}.{milli:03}")
}

impl Device for SimulatedDevice {
    fn preflight(&mut self) -> DeviceInfo {
        DeviceInfo {
            api_level: self.config.api_level,
            connected: self.config.connected,
            brightness_min: self.config.brightness_min,
            nonessential_services_stopped: self.config.nonessential_services_stopped,
        }
    }

    fn install(&mut self, plan: &RunPlan) -> Result<(), DeviceError> {
        if !self.config.connected {
            return Err(DeviceError::Unreachable);
        }
        plan.validate()?;
        self.installed = Some(plan.app_package.clone());
        Ok(())
    }

    fn run_iteration(&mut self, plan: &RunPlan, seed: u64) -> Result<IterationArtifacts, DeviceError> {
        if !self.config.connected {
            return Err(DeviceError::Unreachable);
        }
        plan.validate()?;
        self.runs += 1;
        let aut = plan.mode == RunMode::Aut;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (offset_ms, duration_ms) = Self::timing_ms(seed);
        // the device clock and the host trace share an origin up to a
        // per-iteration shift, which is what `trigger_offset` resolves
        let clock_shift = 1000 * rng.random_range(1..20u64);
        let t0 = clock_shift + offset_ms;
        let app_pid = 3000 + rng.random_range(0..5000u32);
        let mut log = LogWriter { api_level: self.config.api_level, lines: vec!["--------- beginning of main".into()] };

        log.push(clock_shift + 5, SYSTEM_PID, SYSTEM_PID + 3, 'I', "ActivityManager", "Start proc com.android.scriptrunner");
        log.push(t0 - 40, RUNNER_PID, RUNNER_PID, 'I', "ScriptRunner", "stats cleared: batterystats meminfo netstats logcat");

        if aut {
            if self.installed.as_deref() != Some(plan.app_package.as_str()) {
                log.push(t0 - 20, RUNNER_PID, RUNNER_PID, 'E', "ScriptRunner", "application not installed");
                return Err(DeviceError::IterationFailed {
                    reason: format!("{} is not installed", plan.app_package),
                    partial_logcat: log.lines.join("\n") + "\n",
                });
            }
            self.has_data = true;
            let meta = format!("PKG {} UID {} PID {app_pid}", plan.app_package, self.config.uid);
            log.push(t0 - 10, RUNNER_PID, RUNNER_PID, 'I', "ScriptRunner", &meta);
            log.push(t0, app_pid, app_pid, 'I', DEFAULT_MARKER_TAG, TEST_START);
            if self.config.crash_runs.contains(&self.runs) {
                log.push(t0 + duration_ms / 2, app_pid, app_pid, 'E', "AndroidRuntime", "FATAL EXCEPTION: main");
                return Err(DeviceError::IterationFailed {
                    reason: "instrumentation crashed".into(),
                    partial_logcat: log.lines.join("\n") + "\n",
                });
            }
            let steps = 3 + rng.random_range(0..4u64);
            for k in 1..=steps {
                let at = t0 + k * duration_ms / (steps + 1);
                log.push(at, app_pid, app_pid + 12, 'D', "NetClient", &format!("request {k} completed"));
                if k % 2 == 0 {
                    log.push(at + 1, SYSTEM_PID, SYSTEM_PID + 9, 'W', "WifiHAL", "rssi poll");
                }
            }
            log.push(t0 + duration_ms, app_pid, app_pid, 'I', DEFAULT_MARKER_TAG, TEST_END);
        } else {
            log.push(t0, RUNNER_PID, RUNNER_PID, 'I', DEFAULT_MARKER_TAG, TEST_START);
            log.push(t0 + duration_ms / 2, SYSTEM_PID, SYSTEM_PID + 9, 'W', "WifiHAL", "rssi poll");
            log.push(t0 + duration_ms, RUNNER_PID, RUNNER_PID, 'I', DEFAULT_MARKER_TAG, TEST_END);
        }
        log.push(t0 + duration_ms + 30, SYSTEM_PID, SYSTEM_PID + 3, 'I', "ActivityManager", "Process finished");

        let mut cpu_mem = vec![
            format!("system_server {:.1}% cpu {:.1}% mem", rng.random_range(1.0..4.0), rng.random_range(6.0..9.0)),
            format!("com.android.systemui {:.1}% cpu {:.1}% mem", rng.random_range(0.5..2.0), rng.random_range(3.0..5.0)),
        ];
        let mut net = vec!["iface uid rx_bytes tx_bytes".to_string(), format!("wlan0 1000 {} {}", rng.random_range(100..900u64), rng.random_range(50..400u64))];
        if aut {
            cpu_mem.insert(
                1,
                format!(
                    "{} {:.1}% cpu {:.1}% mem",
                    plan.app_package,
                    rng.random_range(8.0..30.0),
                    rng.random_range(1.5..6.0)
                ),
            );
            let uid = self.config.uid;
            net.push(format!("wlan0 {uid} {} {}", rng.random_range(20_000..80_000u64), rng.random_range(2_000..9_000u64)));
            net.push(format!("rmnet0 {uid} {} {}", rng.random_range(0..5_000u64), rng.random_range(0..1_000u64)));
        }

        Ok(IterationArtifacts {
            logcat_text: log.lines.join("\n") + "\n",
            cpu_mem_text: cpu_mem.join("\n") + "\n",
            net_text: net.join("\n") + "\n",
            device_api_level: self.config.api_level,
            trigger_offset: offset_ms as f64 / 1000.0,
        })
    }

    fn apply_action(&mut self, action: DeviceAction) -> Result<(), DeviceError> {
        if !self.config.connected {
            return Err(DeviceError::Unreachable);
        }
        match action {
            DeviceAction::UninstallAut => {
                self.installed = None;
                self.has_data = false;
            }
            DeviceAction::ClearAutData => self.has_data = false,
            DeviceAction::RerunIteration | DeviceAction::NextIteration => {}
        }
        Ok(())
    }

    fn planned_timing(&self, plan: &RunPlan, seed: u64) -> Option<TestTiming> {
        let (offset_ms, duration_ms) = Self::timing_ms(seed);
        let start = offset_ms as f64 / 1000.0;
        let end = (offset_ms + duration_ms) as f64 / 1000.0;
        Some(TestTiming { window: Window { start, end }, active: plan.mode == RunMode::Aut })
    }
}

/// Shell steps a physical-device agent would run for one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterationScript {
    pub clear_stats: Vec<String>,
    pub install: Vec<String>,
    pub run: Vec<String>,
    pub pull: Vec<String>,
}

/// Agent for a phone reached over adb. Only the command scripts are
/// defined; executing them is not supported in this build.
#[derive(Debug, Clone, Default)]
pub struct AdbDevice {
    pub serial: Option<String>,
}

impl AdbDevice {
    pub fn script(&self, plan: &RunPlan) -> IterationScript {
        let adb = match &self.serial {
            Some(s) => format!("adb -s {s}"),
            None => "adb".to_string(),
        };
        let data = plan.device_data_path.display();
        let clear_stats = vec![
            format!("{adb} shell dumpsys batterystats --reset"),
            format!("{adb} shell dumpsys meminfo --reset"),
            format!("{adb} shell dumpsys netstats --reset"),
            format!("{adb} logcat -c"),
        ];
        let (install, run) = match plan.mode {
            RunMode::Baseline => (vec![], vec![format!("{adb} shell sleep 1")]),
            RunMode::Aut => (
                vec![
                    format!("{adb} install -r {}", plan.app_apk_path.display()),
                    format!("{adb} install -r {}", plan.test_apk_path.display()),
                ],
                vec![format!(
                    "{adb} shell am instrument -w -e class {} {}/{}",
                    plan.test_class, plan.app_package, plan.test_runner
                )],
            ),
        };
        let pull = vec![
            format!("{adb} logcat -d -v threadtime > {data}/logcat.txt"),
            format!("{adb} shell top -n 1 > {data}/cpumem.txt"),
            format!("{adb} shell cat /proc/net/xt_qtaguid/stats > {data}/net.txt"),
            format!("{adb} pull {data} ."),
        ];
        IterationScript { clear_stats, install, run, pull }
    }
}

impl Device for AdbDevice {
    fn preflight(&mut self) -> DeviceInfo {
        DeviceInfo { api_level: 0, connected: false, brightness_min: false, nonessential_services_stopped: false }
    }

    fn install(&mut self, _plan: &RunPlan) -> Result<(), DeviceError> {
        Err(DeviceError::Unsupported("adb install".into()))
    }

    fn run_iteration(&mut self, _plan: &RunPlan, _seed: u64) -> Result<IterationArtifacts, DeviceError> {
        Err(DeviceError::Unsupported("adb instrumentation run".into()))
    }

    fn apply_action(&mut self, action: DeviceAction) -> Result<(), DeviceError> {
        Err(DeviceError::Unsupported(format!("{action:?}")))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn aut_plan(package: &str) -> RunPlan {
        RunPlan {
            app_package: package.into(),
            app_apk_path: "app.apk".into(),
            test_apk_path: "app-test.apk".into(),
            test_class: "com.example.EnergyTest".into(),
            test_runner: "androidx.test.runner.AndroidJUnitRunner".into(),
            mode: RunMode::Aut,
            device_data_path: "/sdcard/voltlab".into(),
        }
    }

    fn count(text: &str, needle: &str) -> usize {
        text.lines().filter(|l| l.ends_with(needle)).count()
    }

    #[test]
    fn default_preflight() {
        let info = SimulatedDevice::default().preflight();
        assert!(info.connected && info.brightness_min);
        assert_eq!(info.api_level, 30);
        assert!(info.problems().is_empty());
    }

    #[test]
    fn old_api_level_is_a_problem() {
        let mut dev = SimulatedDevice::new(SimulatedDeviceConfig { api_level: 19, ..Default::default() });
        assert_eq!(dev.preflight().problems().len(), 1);
    }

    #[test]
    fn disconnected_device() {
        let mut dev = SimulatedDevice::new(SimulatedDeviceConfig { connected: false, ..Default::default() });
        assert!(!dev.preflight().connected);
        assert!(matches!(dev.apply_action(DeviceAction::UninstallAut), Err(DeviceError::Unreachable)));
    }

    #[test]
    fn aut_run_has_one_marker_pair() {
        let mut dev = SimulatedDevice::default();
        let plan = aut_plan("com.example");
        dev.install(&plan).unwrap();
        let art = dev.run_iteration(&plan, 9).unwrap();
        assert_eq!(count(&art.logcat_text, "TestMarker: TEST_START"), 1);
        assert_eq!(count(&art.logcat_text, "TestMarker: TEST_END"), 1);
        let start = art.logcat_text.find(TEST_START).unwrap();
        let end = art.logcat_text.find(TEST_END).unwrap();
        assert!(start < end);
        assert!(art.logcat_text.contains("PKG com.example UID 10123 PID"));
    }

    #[test]
    fn baseline_run_has_no_app_lines() {
        let mut dev = SimulatedDevice::default();
        let plan = aut_plan("com.example").with_mode(RunMode::Baseline);
        let art = dev.run_iteration(&plan, 1).unwrap();
        assert!(!art.logcat_text.contains("com.example"));
        assert!(!art.cpu_mem_text.contains("com.example"));
        assert!(!art.net_text.contains("10123"));
    }

    #[test]
    fn same_seed_same_artifacts() {
        let plan = aut_plan("com.example");
        let run = || {
            let mut dev = SimulatedDevice::default();
            dev.install(&plan).unwrap();
            dev.run_iteration(&plan, 77).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn planned_timing_matches_trigger_offset() {
        let mut dev = SimulatedDevice::default();
        let plan = aut_plan("com.example");
        dev.install(&plan).unwrap();
        let art = dev.run_iteration(&plan, 5).unwrap();
        let timing = dev.planned_timing(&plan, 5).unwrap();
        assert_eq!(timing.window.start, art.trigger_offset);
        assert!(timing.active);
    }

    #[test]
    fn uninstall_then_run_fails() {
        let mut dev = SimulatedDevice::default();
        let plan = aut_plan("com.example");
        dev.install(&plan).unwrap();
        dev.apply_action(DeviceAction::UninstallAut).unwrap();
        match dev.run_iteration(&plan, 1) {
            Err(DeviceError::IterationFailed { partial_logcat, .. }) => assert!(!partial_logcat.is_empty()),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn clear_data_keeps_install() {
        let mut dev = SimulatedDevice::default();
        let plan = aut_plan("com.example");
        dev.install(&plan).unwrap();
        dev.run_iteration(&plan, 1).unwrap();
        assert!(dev.has_app_data());
        dev.apply_action(DeviceAction::ClearAutData).unwrap();
        assert!(dev.is_installed());
        assert!(!dev.has_app_data());
    }

    #[test]
    fn uninstall_is_idempotent() {
        let mut dev = SimulatedDevice::default();
        dev.apply_action(DeviceAction::UninstallAut).unwrap();
        dev.apply_action(DeviceAction::UninstallAut).unwrap();
        assert!(!dev.is_installed());
    }

    #[test]
    fn crash_runs_fail_with_partial_log() {
        let mut dev = SimulatedDevice::new(SimulatedDeviceConfig { crash_runs: vec![2], ..Default::default() });
        let plan = aut_plan("com.example");
        dev.install(&plan).unwrap();
        assert!(dev.run_iteration(&plan, 1).is_ok());
        match dev.run_iteration(&plan, 2) {
            Err(DeviceError::IterationFailed { partial_logcat, .. }) => {
                assert!(partial_logcat.contains(TEST_START));
                assert!(!partial_logcat.contains(TEST_END));
            }
            other => panic!("expected crash, got {other:?}"),
        }
    }

    #[test]
    fn aut_plan_requires_app_fields() {
        let mut plan = aut_plan("com.example");
        plan.app_apk_path = PathBuf::new();
        assert!(plan.validate().is_err());
        assert!(plan.with_mode(RunMode::Baseline).validate().is_ok());
    }

    #[test]
    fn adb_script_omits_install_for_baseline() {
        let adb = AdbDevice { serial: Some("emulator-5554".into()) };
        let aut = adb.script(&aut_plan("com.example"));
        assert_eq!(aut.install.len(), 2);
        assert!(aut.run[0].contains("am instrument"));
        assert!(aut.clear_stats.iter().any(|c| c.contains("logcat -c")));
        let base = adb.script(&aut_plan("com.example").with_mode(RunMode::Baseline));
        assert!(base.install.is_empty());
        assert!(!base.run.iter().any(|c| c.contains("com.example")));
    }

    #[test]
    fn adb_agent_is_a_stub() {
        let mut adb = AdbDevice::default();
        assert!(!adb.preflight().connected);
        assert!(matches!(adb.run_iteration(&aut_plan("x"), 0), Err(DeviceError::Unsupported(_))));
    }

    #[test]
    fn old_api_uses_time_format() {
        let mut dev = SimulatedDevice::new(SimulatedDeviceConfig { api_level: 22, ..Default::default() });
        let plan = aut_plan("com.example");
        dev.install(&plan).unwrap();
        let art = dev.run_iteration(&plan, 3).unwrap();
        assert!(art.logcat_text.lines().any(|l| l.contains("I/TestMarker(")));
    }
}
