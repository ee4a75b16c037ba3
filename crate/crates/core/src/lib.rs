//! Core of voltlab: hardware-in-the-loop (or simulated) energy measurement
//! for mobile apps.
//!
//! The pipeline has four stages, each usable on its own:
//!
//! 1. [`campaign`] drives baseline and app-under-test iterations, pairing a
//!    power [`sampling`] source with a [`device`] agent and laying files out
//!    in a results folder.
//! 2. [`preprocess`] cleans logs with [`parsers`], maps the test window onto
//!    the power trace and computes joules with [`energy`], producing
//!    `data.csv` and `average_data.csv`.
//! 3. [`stats`] runs summary statistics, Kruskal-Wallis, one-way ANOVA or
//!    Spearman correlation over those files and writes an interpreted report.
//! 4. [`plot`] renders scatter and box plots to SVG.

pub mod campaign;
pub mod dataset;
pub mod device;
pub mod energy;
pub mod parsers;
pub mod plot;
pub mod preprocess;
pub mod sampling;
pub mod stats;

pub use campaign::{Campaign, CampaignConfig, CampaignError, CampaignEvent, CampaignState, Phase};
pub use dataset::{Dataset, DatasetError, Filter};
pub use device::{DeviceAction, RunMode, RunPlan, SimulatedDevice};
pub use energy::{AggregateRow, EnergyError, EnergyRow, Window};
pub use sampling::{PowerSample, SampleTrace, SourceConfig, SourceKind, WorkloadProfile};
