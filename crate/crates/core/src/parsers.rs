//! Parsers for device logs and statistics dumps.
//!
//! Logcat comes in two shapes depending on the device API level:
//!
//! - `threadtime` (API 24+): `MM-DD HH:MM:SS.mmm  PID  TID L TAG: message`
//! - `time` (API 21-23): `MM-DD HH:MM:SS.mmm L/TAG( PID): message`
//!
//! The script runner logs a metadata line `PKG <package> UID <uid> PID <pid>`
//! before the test starts; the test marks its bounds with `TEST_START` and
//! `TEST_END` messages under a marker tag (`TestMarker` by default).
//!
//! CPU/memory dumps contain rows `<package> <cpu>% cpu <mem>% mem`, network
//! dumps rows `<iface> <uid> <rx_bytes> <tx_bytes>`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{RunMode, MIN_API_LEVEL};

pub const DEFAULT_MARKER_TAG: &str = "TestMarker";
pub const TEST_START: &str = "TEST_START";
pub const TEST_END: &str = "TEST_END";
pub const CLEAN_LOG_HEADER: [&str; 6] = ["t_ms", "pid", "tid", "level", "tag", "message"];

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("empty input")]
    Empty,
    #[error("API level {0} is not supported (minimum {MIN_API_LEVEL})")]
    UnsupportedApi(u32),
    #[error("no `PKG {0} UID .. PID ..` metadata line found")]
    UidNotFound(String),
    #[error("test window not found: {0}")]
    WindowNotFound(String),
    #[error("line {line}: month changed during the session")]
    MonthRollover { line: usize },
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("package `{0}` not present in statistics")]
    PackageNotFound(String),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub fn default_tags() -> BTreeSet<String> {
    BTreeSet::from([DEFAULT_MARKER_TAG.to_string()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    ThreadTime,
    Time,
}

impl LogFormat {
    pub fn for_api(api_level: u32) -> Result<Self, ParseError> {
        match api_level {
            l if l < MIN_API_LEVEL => Err(ParseError::UnsupportedApi(l)),
            l if l >= 24 => Ok(Self::ThreadTime),
            _ => Ok(Self::Time),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    #[default]
    Lenient,
    Strict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    /// Milliseconds on the device clock (day of month onward).
    pub t: u64,
    pub pid: u32,
    pub tid: u32,
    pub level: char,
    pub tag: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanLog {
    pub uid: u32,
    pub pid: u32,
    pub events: Vec<LogEvent>,
    pub test_start_t: u64,
    pub test_end_t: u64,
    pub api_level: u32,
    /// Lines that were neither events nor headers (lenient mode only).
    pub skipped: usize,
}

impl CleanLog {
    pub fn test_duration_ms(&self) -> u64 {
        self.test_end_t - self.test_start_t
    }
}

/// All events of a log, with the counters lenient parsing needs.
#[derive(Debug, Clone, Default)]
pub struct RawLog {
    pub events: Vec<LogEvent>,
    pub metadata: Vec<(String, u32, u32)>,
    pub skipped: usize,
    /// Non-blank, non-header lines seen.
    pub content_lines: usize,
}

fn parse_timestamp(date: &str, time: &str) -> Option<(u32, u64)> {
    let (month, day) = date.split_once('-')?;
    let month: u32 = month.parse().ok().filter(|m| (1..=12).contains(m))?;
    let day: u64 = day.parse().ok().filter(|d| (1..=31).contains(d))?;
    let (hms, milli) = time.split_once('.')?;
    let mut parts = hms.split(':');
    let h: u64 = parts.next()?.parse().ok().filter(|h| *h < 24)?;
    let m: u64 = parts.next()?.parse().ok().filter(|m| *m < 60)?;
    let s: u64 = parts.next()?.parse().ok().filter(|s| *s < 61)?;
    if parts.next().is_some() || milli.len() != 3 {
        return None;
    }
    let ms: u64 = milli.parse().ok()?;
    Some((month, ((day * 24 + h) * 60 + m) * 60_000 + s * 1000 + ms))
}

fn parse_level(s: &str) -> Option<char> {
    let mut chars = s.chars();
    let c = chars.next()?;
    (chars.next().is_none() && "VDIWEF".contains(c)).then_some(c)
}

/// Parses one log line; `None` if it does not match `format`.
fn parse_event(format: LogFormat, line: &str) -> Option<(u32, LogEvent)> {
    let line = line.trim_end_matches('\r');
    let mut it = line.splitn(3, ' ');
    let date = it.next()?;
    let time = it.next()?;
    let rest = it.next()?.trim_start();
    let (month, t) = parse_timestamp(date, time)?;
    match format {
        LogFormat::ThreadTime => {
            let mut fields = rest.split_whitespace();
            let pid = fields.next()?.parse().ok()?;
            let tid = fields.next()?.parse().ok()?;
            let level = parse_level(fields.next()?)?;
            // tag and message follow the level column
            let after_level = {
                let lvl_pos = rest.find(&format!(" {level} "))?;
                &rest[lvl_pos + 3..]
            };
            let (tag, message) = after_level.split_once(": ").or_else(|| {
                after_level.strip_suffix(':').map(|tag| (tag, ""))
            })?;
            Some((month, LogEvent { t, pid, tid, level, tag: tag.trim().to_string(), message: message.to_string() }))
        }
        LogFormat::Time => {
            let (head, message) = rest.split_once("): ").or_else(|| rest.strip_suffix("):").map(|h| (h, "")))?;
            let (level, tag_pid) = head.split_once('/')?;
            let level = parse_level(level)?;
            let open = tag_pid.rfind('(')?;
            let tag = tag_pid[..open].trim().to_string();
            let pid: u32 = tag_pid[open + 1..].trim().parse().ok()?;
            Some((month, LogEvent { t, pid, tid: pid, level, tag, message: message.to_string() }))
        }
    }
}

fn parse_metadata(text: &str) -> Option<(String, u32, u32)> {
    let mut tok = text.split_whitespace();
    if tok.next()? != "PKG" {
        return None;
    }
    let pkg = tok.next()?.to_string();
    if tok.next()? != "UID" {
        return None;
    }
    let uid = tok.next()?.parse().ok()?;
    if tok.next()? != "PID" {
        return None;
    }
    let pid = tok.next()?.parse().ok()?;
    tok.next().is_none().then_some((pkg, uid, pid))
}

fn is_header(line: &str) -> bool {
    line.starts_with("--------- beginning of")
}

/// Tokenizes a whole logcat dump without filtering.
pub fn parse_raw_log(text: &str, api_level: u32, mode: ParseMode) -> Result<RawLog, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let format = LogFormat::for_api(api_level)?;
    let mut out = RawLog::default();
    let mut session_month = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || is_header(trimmed) {
            continue;
        }
        if let Some(meta) = parse_metadata(trimmed) {
            out.metadata.push(meta);
            continue;
        }
        out.content_lines += 1;
        match parse_event(format, line) {
            Some((month, event)) => {
                if *session_month.get_or_insert(month) != month {
                    return Err(ParseError::MonthRollover { line: line_no });
                }
                if let Some(meta) = parse_metadata(&event.message) {
                    out.metadata.push(meta);
                }
                out.events.push(event);
            }
            None if mode == ParseMode::Strict => {
                return Err(ParseError::Line { line: line_no, msg: format!("does not match {format:?} format") })
            }
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

fn find_window<'a>(
    events: impl Iterator<Item = &'a LogEvent>,
    tags: &BTreeSet<String>,
) -> Result<(u64, u64), ParseError> {
    let mut starts = Vec::new();
    let mut ends = Vec::new();
    for e in events.filter(|e| tags.contains(&e.tag)) {
        match e.message.trim() {
            TEST_START => starts.push(e.t),
            TEST_END => ends.push(e.t),
            _ => {}
        }
    }
    match (starts.as_slice(), ends.as_slice()) {
        ([s], [e]) if s < e => Ok((*s, *e)),
        ([s], [e]) => Err(ParseError::WindowNotFound(format!("TEST_END ({e}) does not follow TEST_START ({s})"))),
        (s, e) => Err(ParseError::WindowNotFound(format!(
            "expected one TEST_START and one TEST_END, found {} and {}",
            s.len(),
            e.len()
        ))),
    }
}

pub fn parse_logcat(
    text: &str,
    api_level: u32,
    tags: &BTreeSet<String>,
    package: &str,
) -> Result<CleanLog, ParseError> {
    parse_logcat_with(text, api_level, tags, package, ParseMode::Lenient)
}

/// Extracts UID/PID for `package`, keeps events from that PID or carrying a
/// tag in `tags`, and locates the test window.
pub fn parse_logcat_with(
    text: &str,
    api_level: u32,
    tags: &BTreeSet<String>,
    package: &str,
    mode: ParseMode,
) -> Result<CleanLog, ParseError> {
    let raw = parse_raw_log(text, api_level, mode)?;
    let (_, uid, pid) = raw
        .metadata
        .iter()
        .find(|(p, _, _)| p == package)
        .cloned()
        .ok_or_else(|| ParseError::UidNotFound(package.to_string()))?;
    let events: Vec<LogEvent> = raw.events.into_iter().filter(|e| e.pid == pid || tags.contains(&e.tag)).collect();
    let (test_start_t, test_end_t) = find_window(events.iter(), tags)?;
    Ok(CleanLog { uid, pid, events, test_start_t, test_end_t, api_level, skipped: raw.skipped })
}

/// Marker window of a log without app metadata, as produced by baseline
/// runs where only the script runner logs the idle period.
pub fn parse_test_window(
    text: &str,
    api_level: u32,
    tags: &BTreeSet<String>,
    mode: ParseMode,
) -> Result<(u64, u64), ParseError> {
    let raw = parse_raw_log(text, api_level, mode)?;
    find_window(raw.events.iter(), tags)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResourceStats {
    pub cpu_pct: f64,
    pub mem_pct: f64,
}

fn parse_pct(raw: &str, what: &str, max: f64, line: usize) -> Result<f64, ParseError> {
    let err = |msg: String| ParseError::Line { line, msg };
    let num = raw.strip_suffix('%').ok_or_else(|| err(format!("{what} field `{raw}` lacks `%`")))?;
    let v: f64 = num.parse().map_err(|_| err(format!("{what} field `{raw}` is not a number")))?;
    if !(0.0..=max).contains(&v) {
        return Err(err(format!("{what} {v}% outside [0, {max}]")));
    }
    Ok(v)
}

/// CPU and memory share of `package`, averaged over its rows. A missing row
/// yields zeros in baseline mode and an error otherwise.
pub fn parse_cpu_mem(text: &str, package: &str, api_level: u32, mode: RunMode) -> Result<ResourceStats, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    LogFormat::for_api(api_level)?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 5 || tok[2] != "cpu" || tok[4] != "mem" {
            continue;
        }
        let cpu = parse_pct(tok[1], "cpu", 800.0, idx + 1)?;
        let mem = parse_pct(tok[3], "mem", 100.0, idx + 1)?;
        if tok[0] == package {
            rows.push((cpu, mem));
        }
    }
    if rows.is_empty() {
        return match mode {
            RunMode::Baseline => Ok(ResourceStats::default()),
            RunMode::Aut => Err(ParseError::PackageNotFound(package.to_string())),
        };
    }
    let n = rows.len() as f64;
    Ok(ResourceStats {
        cpu_pct: rows.iter().map(|r| r.0).sum::<f64>() / n,
        mem_pct: rows.iter().map(|r| r.1).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NetStats {
    pub rx_bytes: u64,
    pub tx_bytes: u64,
}

/// Sums received/transmitted bytes over every row belonging to `uid`.
pub fn parse_netstats(text: &str, uid: u32) -> Result<NetStats, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let mut total = NetStats::default();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.is_empty() || tok[0].starts_with('#') || tok[0] == "iface" {
            continue;
        }
        let err = |msg: String| ParseError::Line { line: line_no, msg };
        if tok.len() != 4 {
            return Err(err(format!("expected `iface uid rx_bytes tx_bytes`, found {} fields", tok.len())));
        }
        let row_uid: u32 = tok[1].parse().map_err(|_| err(format!("uid `{}` is not an integer", tok[1])))?;
        let bytes = |raw: &str, name: &str| -> Result<u64, ParseError> {
            if raw.starts_with('-') {
                return Err(err(format!("negative {name} `{raw}`")));
            }
            raw.parse().map_err(|_| err(format!("{name} `{raw}` is not an integer")))
        };
        let rx = bytes(tok[2], "rx_bytes")?;
        let tx = bytes(tok[3], "tx_bytes")?;
        if row_uid == uid {
            total.rx_bytes += rx;
            total.tx_bytes += tx;
        }
    }
    Ok(total)
}

/// Writes cleaned events as CSV `t_ms,pid,tid,level,tag,message`.
pub fn write_clean_log(events: &[LogEvent], path: &Path) -> Result<(), ParseError> {
    let wrap = |source: csv::Error| ParseError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(CLEAN_LOG_HEADER).map_err(wrap)?;
    for e in events {
        w.write_record([
            e.t.to_string(),
            e.pid.to_string(),
            e.tid.to_string(),
            e.level.to_string(),
            e.tag.clone(),
            e.message.clone(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| wrap(e.into()))
}
