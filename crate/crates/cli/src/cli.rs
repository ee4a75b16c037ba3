use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use voltlab_core::campaign::{Campaign, CampaignConfig, CampaignEvent, CampaignState, EventKind, RerunConfig};
use voltlab_core::device::{AdbDevice, Device, SimulatedDeviceConfig};
use voltlab_core::parsers::ParseMode;
use voltlab_core::plot::{PlotKind, PlotSpec};
use voltlab_core::preprocess::PreprocessOptions;
use voltlab_core::stats::{AnalysisSpec, TestKind, DEFAULT_ALPHA};
use voltlab_core::{DeviceAction, Filter, RunMode, RunPlan, SimulatedDevice, SourceConfig, WorkloadProfile};

use crate::stages;

pub const PORT_ENV: &str = "VOLTLAB_PORT";

#[derive(Debug, Parser)]
#[command(name = "voltlab", version, about = "Measure, clean, analyze and plot the energy use of mobile apps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Data collection.
    #[command(subcommand)]
    Campaign(CampaignCommand),
    /// Turn a campaign folder into data.csv and average_data.csv.
    Preprocess(PreprocessArgs),
    /// Run a statistical test and write report.md / report.html.
    Analyze(AnalyzeArgs),
    /// Render a scatter or box plot to SVG.
    Plot(PlotArgs),
    /// Serve the HTTP control API.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum CampaignCommand {
    /// Run baseline and app-under-test iterations.
    Run(Box<CampaignArgs>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Simulated,
    Replay,
    Monitor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RerunArg {
    Reinstall,
    ClearData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DeviceArg {
    Simulated,
    Adb,
}

#[derive(Debug, Args)]
pub struct CampaignArgs {
    #[arg(long, default_value_t = 10)]
    pub iterations: u32,
    #[arg(long, default_value_t = 10)]
    pub baseline_iterations: u32,
    #[arg(long)]
    pub app_package: String,
    #[arg(long)]
    pub app_apk: PathBuf,
    #[arg(long)]
    pub test_apk: PathBuf,
    #[arg(long, default_value = "/sdcard/voltlab")]
    pub device_data_path: PathBuf,
    #[arg(long)]
    pub test_class: String,
    #[arg(long, default_value = "androidx.test.runner.AndroidJUnitRunner")]
    pub test_runner: String,
    #[arg(long, value_enum, default_value = "reinstall")]
    pub rerun_config: RerunArg,
    #[arg(long)]
    pub results_dir: PathBuf,
    #[arg(long, value_enum, default_value = "simulated")]
    pub source: SourceArg,
    /// Trace CSV replayed each iteration (replay source).
    #[arg(long, required_if_eq("source", "replay"))]
    pub replay_trace: Option<PathBuf>,
    /// Power monitor serial number (monitor source).
    #[arg(long)]
    pub monitor_serial: Option<String>,
    #[arg(long, value_enum, default_value = "simulated")]
    pub device: DeviceArg,
    #[arg(long)]
    pub api_level: Option<u32>,
    #[arg(long, default_value_t = 5000)]
    pub rate_hz: u32,
    #[arg(long, default_value_t = 0.2)]
    pub baseline_current: f64,
    #[arg(long, default_value_t = 0.5)]
    pub active_current: f64,
    #[arg(long, default_value_t = 4.0)]
    pub voltage: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise_sd: f64,
    /// Samples the simulated monitor loses per iteration.
    #[arg(long, default_value_t = 0)]
    pub dropped_samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only pause on warnings and failures.
    #[arg(long)]
    pub auto_advance: bool,
    /// With --auto-advance, reruns allowed per failed iteration before skipping it.
    #[arg(long, default_value_t = 2)]
    pub max_reruns: u32,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub results_dir: PathBuf,
    /// Reject logcat lines that match no grammar instead of skipping them.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub allow_missing_baseline: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// One or more data.csv files with identical headers.
    #[arg(long = "data", required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub test: String,
    #[arg(long)]
    pub dependent: String,
    #[arg(long)]
    pub independent: Option<String>,
    /// Row filter such as `package==com.example` or `energy_j>0`.
    #[arg(long)]
    pub filter: Option<String>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Folder for report.md and report.html (default: next to the first data file).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long = "data", required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub dependent: String,
    #[arg(long)]
    pub independent: String,
    #[arg(long)]
    pub filter: Option<String>,
    #[arg(long, default_value = "")]
    pub title: String,
    #[arg(long, default_value_t = 10)]
    pub font_pt: u32,
    /// Comma separated fill colours.
    #[arg(long, value_delimiter = ',')]
    pub colors: Vec<String>,
    /// Comma separated x-axis category order.
    #[arg(long, value_delimiter = ',')]
    pub order: Option<Vec<String>>,
    #[arg(long, default_value_t = 720)]
    pub width: u32,
    #[arg(long, default_value_t = 480)]
    pub height: u32,
    #[arg(long, default_value = "plot.svg")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = PORT_ENV, default_value_t = 8787)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    /// Base folder for relative paths in requests.
    #[arg(long, default_value = ".")]
    pub workdir: PathBuf,
}

/// Exit status per stage, so scripts can tell which step failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Campaign = 3,
    Preprocess = 4,
    Analyze = 5,
    Plot = 6,
    Serve = 7,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = match &cli.command {
        Command::Campaign(_) => Stage::Campaign,
        Command::Preprocess(_) => Stage::Preprocess,
        Command::Analyze(_) => Stage::Analyze,
        Command::Plot(_) => Stage::Plot,
        Command::Serve(_) => Stage::Serve,
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(stage as u8)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Campaign(CampaignCommand::Run(args)) => run_campaign(*args),
        Command::Preprocess(args) => {
            let opts = PreprocessOptions {
                mode: if args.strict { ParseMode::Strict } else { ParseMode::Lenient },
                allow_missing_baseline: args.allow_missing_baseline,
            };
            let s = stages::preprocess(&args.results_dir, opts)?;
            let dir = args.results_dir.display();
            println!("wrote {dir}/{} ({} rows) and {dir}/{}", s.data_file.display(), s.rows.len(), s.average_file.display());
            println!("baseline: {} runs, mean {} J", s.baseline_n, s.baseline_mean_j);
            if !s.below_baseline.is_empty() {
                eprintln!("warning: iterations {:?} measured below the baseline (negative energy)", s.below_baseline);
            }
            if s.failed_excluded > 0 {
                eprintln!("note: {} failed iteration(s) excluded", s.failed_excluded);
            }
            Ok(())
        }
        Command::Analyze(args) => {
            let test: TestKind = args.test.parse()?;
            let mut spec = AnalysisSpec::new(test, &args.dependent, args.independent.as_deref());
            spec.filter = args.filter.as_deref().map(str::parse::<Filter>).transpose()?;
            spec.alpha = args.alpha;
            let out = stages::analyze(&args.data, &spec, args.out_dir.as_deref())?;
            print!("{}", out.report.markdown);
            eprintln!("wrote {} and {}", out.markdown_path.display(), out.html_path.display());
            Ok(())
        }
        Command::Plot(args) => {
            let kind: PlotKind = args.kind.parse()?;
            let mut spec = PlotSpec::new(kind, &args.dependent, &args.independent);
            spec.filter = args.filter.as_deref().map(str::parse::<Filter>).transpose()?;
            spec.title = args.title;
            spec.label_font_pt = args.font_pt;
            spec.legend_colors = args.colors;
            spec.x_label_order = args.order;
            spec.width_px = args.width;
            spec.height_px = args.height;
            stages::plot(&args.data, &spec, Some(&args.out))?;
            eprintln!("wrote {}", args.out.display());
            Ok(())
        }
        Command::Serve(args) => {
            let rt = tokio::runtime::Runtime::new().context("starting async runtime")?;
            rt.block_on(crate::server::serve(&args.bind, args.port, args.workdir))
        }
    }
}

pub fn campaign_config(args: &CampaignArgs) -> Result<CampaignConfig> {
    let plan = RunPlan {
        app_package: args.app_package.clone(),
        app_apk_path: args.app_apk.clone(),
        test_apk_path: args.test_apk.clone(),
        test_class: args.test_class.clone(),
        test_runner: args.test_runner.clone(),
        mode: RunMode::Aut,
        device_data_path: args.device_data_path.clone(),
    };
    let mut source = match args.source {
        SourceArg::Simulated => SourceConfig::simulated(WorkloadProfile {
            baseline_current: args.baseline_current,
            active_current: args.active_current,
            voltage: args.voltage,
            noise_sd: args.noise_sd,
            seed: args.seed,
            active_window: None,
            dropped_samples: args.dropped_samples,
        }),
        SourceArg::Replay => {
            SourceConfig::replay(args.replay_trace.clone().ok_or_else(|| anyhow!("--replay-trace is required"))?)
        }
        SourceArg::Monitor => SourceConfig::monitor(args.monitor_serial.clone()),
    };
    source.rate_hz = args.rate_hz;
    let mut cfg = CampaignConfig::new(plan, source, &args.results_dir);
    cfg.iterations = args.iterations;
    cfg.baseline_iterations = args.baseline_iterations;
    cfg.auto_advance = args.auto_advance;
    cfg.seed = args.seed;
    cfg.rerun_config = match args.rerun_config {
        RerunArg::Reinstall => RerunConfig::Reinstall,
        RerunArg::ClearData => RerunConfig::ClearData,
    };
    Ok(cfg)
}

fn describe(event: &CampaignEvent) -> Option<String> {
    let p = &event.payload;
    match event.kind {
        EventKind::IterationCompleted => Some(match p["failed"].as_str() {
            Some(reason) => format!("{} R{}: FAILED ({reason})", p["phase"].as_str()?, p["index"]),
            None => format!(
                "{} R{}: {} samples, {} dropped{}",
                p["phase"].as_str()?,
                p["index"],
                p["samples"],
                p["dropped"],
                if p["warn"].as_bool() == Some(true) { " [unreliable]" } else { "" }
            ),
        }),
        EventKind::PhaseChanged => Some(format!("phase: {}", p["phase"].as_str()?)),
        EventKind::Warning => Some(format!(
            "warning: {} samples dropped (threshold {})",
            p["report"]["dropped_count"], p["report"]["threshold"]
        )),
        _ => None,
    }
}

fn run_campaign(args: CampaignArgs) -> Result<()> {
    let config = campaign_config(&args)?;
    let device: Box<dyn Device> = match args.device {
        DeviceArg::Simulated => {
            let mut dc = SimulatedDeviceConfig::default();
            if let Some(api) = args.api_level {
                dc.api_level = api;
            }
            Box::new(SimulatedDevice::new(dc))
        }
        DeviceArg::Adb => Box::new(AdbDevice::default()),
    };
    let quiet = args.quiet;
    let observer = Box::new(move |e: &CampaignEvent| {
        if let (false, Some(line)) = (quiet, describe(e)) {
            eprintln!("{line}");
        }
    });
    let mut campaign = Campaign::start_observed(config, device, Some(observer))?;

    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    let auto = args.auto_advance;
    let max_reruns = args.max_reruns;
    let decide = |state: &CampaignState| -> Result<DeviceAction> {
        if auto {
            let attempt = state
                .records
                .iter()
                .find(|r| r.phase == state.phase && r.index == state.current_iteration)
                .map_or(0, |r| r.attempt);
            return Ok(if state.failure.is_some() && attempt < max_reruns {
                DeviceAction::RerunIteration
            } else {
                DeviceAction::NextIteration
            });
        }
        loop {
            eprint!("[r]erun, [n]ext, [u]ninstall app, [c]lear app data > ");
            let _ = std::io::stderr().flush();
            match lines.next() {
                Some(Ok(line)) => match parse_decision(&line) {
                    Some(a) => return Ok(a),
                    None => eprintln!("unrecognised choice `{}`", line.trim()),
                },
                _ => bail!("standard input closed while a decision was pending"),
            }
        }
    };
    run_with_decider(&mut campaign, decide)?;
    let state = campaign.state();
    println!(
        "campaign complete: {} records in {}",
        state.records.len(),
        campaign.config().results_dir.display()
    );
    Ok(())
}

fn run_with_decider(campaign: &mut Campaign, mut decide: impl FnMut(&CampaignState) -> Result<DeviceAction>) -> Result<()> {
    while campaign.state().is_active() {
        if campaign.state().awaiting_decision {
            let action = decide(campaign.state())?;
            campaign.decide(action)?;
        } else {
            campaign.execute_iteration()?;
        }
    }
    Ok(())
}

pub fn parse_decision(input: &str) -> Option<DeviceAction> {
    match input.trim().to_ascii_lowercase().as_str() {
        "r" | "rerun" | "rerun_iteration" => Some(DeviceAction::RerunIteration),
        "n" | "next" | "next_iteration" => Some(DeviceAction::NextIteration),
        "u" | "uninstall" | "uninstall_aut" => Some(DeviceAction::UninstallAut),
        "c" | "clear" | "clear_aut_data" => Some(DeviceAction::ClearAutData),
        _ => None,
    }
}
