//! Scatter and box plots rendered to SVG 1.1.
//!
//! Every glyph carries a `class` attribute and is preceded by a comment with
//! the numbers it was drawn from, e.g.
//! `<!-- box label="com.a" n=10 q1=... median=... q3=... whisker_lo=... whisker_hi=... outliers=0 x=... -->`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Column, Dataset, DatasetError, Filter};
use crate::stats::{summary_stats, StatsError};

pub const DEFAULT_COLORS: [&str; 8] =
    ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7"];

#[derive(Debug, Error)]
pub enum PlotError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("invalid plot spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotKind {
    Scatter,
    Box,
}

impl std::str::FromStr for PlotKind {
    type Err = PlotError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scatter" => Ok(Self::Scatter),
            "box" => Ok(Self::Box),
            other => Err(PlotError::InvalidSpec(format!("unknown plot kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub kind: PlotKind,
    pub dependent: String,
    pub independent: String,
    #[serde(default)]
    pub filter: Option<Filter>,
    #[serde(default)]
    pub title: String,
    #[serde(default = "default_font")]
    pub label_font_pt: u32,
    #[serde(default)]
    pub legend_colors: Vec<String>,
    #[serde(default = "default_width")]
    pub width_px: u32,
    #[serde(default = "default_height")]
    pub height_px: u32,
    #[serde(default)]
    pub x_label_order: Option<Vec<String>>,
}

fn default_font() -> u32 {
    10
}
fn default_width() -> u32 {
    720
}
fn default_height() -> u32 {
    480
}

impl PlotSpec {
    pub fn new(kind: PlotKind, dependent: &str, independent: &str) -> Self {
        Self {
            kind,
            dependent: dependent.into(),
            independent: independent.into(),
            filter: None,
            title: String::new(),
            label_font_pt: default_font(),
            legend_colors: Vec::new(),
            width_px: default_width(),
            height_px: default_height(),
            x_label_order: None,
        }
    }

    fn color(&self, i: usize) -> &str {
        if self.legend_colors.is_empty() {
            DEFAULT_COLORS[i % DEFAULT_COLORS.len()]
        } else {
            &self.legend_colors[i % self.legend_colors.len()]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BoxStats {
    label: String,
    n: usize,
    q1: f64,
    median: f64,
    q3: f64,
    whisker_lo: f64,
    whisker_hi: f64,
    outliers: Vec<f64>,
}

fn box_stats(label: &str, values: &[f64]) -> Result<BoxStats, StatsError> {
    let s = summary_stats(values)?;
    let fence = 1.5 * s.iqr();
    let (lo_fence, hi_fence) = (s.q1 - fence, s.q3 + fence);
    let inside = values.iter().copied().filter(|v| (lo_fence..=hi_fence).contains(v));
    let whisker_lo = inside.clone().fold(f64::INFINITY, f64::min);
    let whisker_hi = inside.fold(f64::NEG_INFINITY, f64::max);
    let mut outliers: Vec<f64> = values.iter().copied().filter(|v| !(lo_fence..=hi_fence).contains(v)).collect();
    outliers.sort_by(f64::total_cmp);
    Ok(BoxStats { label: label.into(), n: s.n, q1: s.q1, median: s.median, q3: s.q3, whisker_lo, whisker_hi, outliers })
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Comment-safe text: XML comments may not contain `--`.
fn comment_safe(s: &str) -> String {
    esc(s).replace("--", "- -")
}

fn nice_step(range: f64) -> f64 {
    let raw = range / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    };
    step * mag
}

struct Axis {
    lo: f64,
    hi: f64,
    ticks: Vec<f64>,
}

fn axis(min: f64, max: f64) -> Axis {
    let (min, max) = if min == max { (min - 1.0, max + 1.0) } else { (min, max) };
    let step = nice_step(max - min);
    let lo = (min / step).floor() * step;
    let hi = (max / step).ceil() * step;
    let count = ((hi - lo) / step).round() as usize;
    let ticks = (0..=count).map(|i| lo + i as f64 * step).collect();
    Axis { lo, hi, ticks }
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

struct Frame {
    left: f64,
    top: f64,
    right: f64,
    bottom: f64,
}

impl Frame {
    fn y(&self, axis: &Axis, v: f64) -> f64 {
        self.bottom - (v - axis.lo) / (axis.hi - axis.lo) * (self.bottom - self.top)
    }
}

/// Renders `spec` over `dataset` as a standalone SVG document.
pub fn render_plot(dataset: &Dataset, spec: &PlotSpec) -> Result<String, PlotError> {
    if spec.width_px == 0 || spec.height_px == 0 {
        return Err(PlotError::InvalidSpec("width and height must be positive".into()));
    }
    let filtered;
    let ds = match &spec.filter {
        Some(f) => {
            filtered = dataset.filter(f)?;
            &filtered
        }
        None => dataset,
    };
    ds.column(&spec.dependent)?;
    let x_col = ds.column(&spec.independent)?;
    if ds.n_rows() == 0 {
        return Err(DatasetError::EmptySelection.into());
    }
    let y = ds.numeric(&spec.dependent)?;

    let categories = match (spec.kind, x_col) {
        (PlotKind::Box, Column::Numeric(_)) => {
            return Err(DatasetError::TypeMismatch {
                column: spec.independent.clone(),
                expected: "categorical",
                actual: "numeric",
            }
            .into())
        }
        (_, Column::Categorical(_)) => {
            let found = ds.categories(&spec.independent)?;
            Some(match &spec.x_label_order {
                Some(order) => {
                    let mut a = order.clone();
                    let mut b = found.clone();
                    a.sort();
                    b.sort();
                    if a != b {
                        return Err(PlotError::InvalidSpec(format!(
                            "x_label_order {order:?} is not a permutation of categories {found:?}"
                        )));
                    }
                    order.clone()
                }
                None => found,
            })
        }
        (PlotKind::Scatter, Column::Numeric(_)) => None,
    };

    let w = f64::from(spec.width_px);
    let h = f64::from(spec.height_px);
    let font = spec.label_font_pt;
    let legend_w = 150.0_f64.min(w * 0.3);
    let frame = Frame { left: 70.0, top: 40.0 + f64::from(font), right: w - legend_w - 10.0, bottom: h - 50.0 };
    if frame.right <= frame.left || frame.bottom <= frame.top {
        return Err(PlotError::InvalidSpec("plot size too small for margins".into()));
    }

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#
    );
    let _ = writeln!(
        svg,
        "<!-- plot kind={:?} dependent=\"{}\" independent=\"{}\" rows={} -->",
        spec.kind,
        comment_safe(&spec.dependent),
        comment_safe(&spec.independent),
        ds.n_rows()
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    if !spec.title.is_empty() {
        let _ = writeln!(
            svg,
            r#"<text class="title" x="{:.2}" y="{:.2}" text-anchor="middle" font-size="{}pt">{}</text>"#,
            (frame.left + frame.right) / 2.0,
            24.0,
            font + 2,
            esc(&spec.title)
        );
    }

    let mut legend: Vec<(String, String)> = Vec::new();
    let mut body = String::new();
    let y_axis;

    match (spec.kind, &categories) {
        (PlotKind::Box, Some(cats)) => {
            let groups = ds.groups(&spec.dependent, &spec.independent, cats)?;
            let stats: Vec<BoxStats> =
                cats.iter().zip(&groups).map(|(c, g)| box_stats(c, g)).collect::<Result<_, _>>()?;
            let lo = stats.iter().map(|s| s.outliers.first().copied().unwrap_or(s.whisker_lo).min(s.whisker_lo)).fold(f64::INFINITY, f64::min);
            let hi = stats.iter().map(|s| s.outliers.last().copied().unwrap_or(s.whisker_hi).max(s.whisker_hi)).fold(f64::NEG_INFINITY, f64::max);
            y_axis = axis(lo, hi);
            let slot = (frame.right - frame.left) / cats.len() as f64;
            let bw = slot * 0.5;
            for (i, s) in stats.iter().enumerate() {
                let cx = frame.left + slot * (i as f64 + 0.5);
                let color = spec.color(i);
                let yq1 = frame.y(&y_axis, s.q1);
                let yq3 = frame.y(&y_axis, s.q3);
                let _ = writeln!(
                    body,
                    "<!-- box label=\"{}\" n={} q1={} median={} q3={} whisker_lo={} whisker_hi={} outliers={} x={cx:.2} -->",
                    comment_safe(&s.label), s.n, s.q1, s.median, s.q3, s.whisker_lo, s.whisker_hi, s.outliers.len()
                );
                let _ = writeln!(body, r#"<g class="box-group" data-label="{}">"#, esc(&s.label));
                let _ = writeln!(
                    body,
                    r#"<line class="whisker" x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{yq3:.2}" stroke="black"/>"#,
                    frame.y(&y_axis, s.whisker_hi)
                );
                let _ = writeln!(
                    body,
                    r#"<line class="whisker" x1="{cx:.2}" y1="{yq1:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
                    frame.y(&y_axis, s.whisker_lo)
                );
                for wy in [s.whisker_lo, s.whisker_hi] {
                    let py = frame.y(&y_axis, wy);
                    let _ = writeln!(
                        body,
                        r#"<line class="whisker-cap" x1="{:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="black"/>"#,
                        cx - bw / 4.0,
                        cx + bw / 4.0
                    );
                }
                let _ = writeln!(
                    body,
                    r#"<rect class="box" x="{:.2}" y="{yq3:.2}" width="{bw:.2}" height="{:.2}" fill="{}" fill-opacity="0.7" stroke="black"/>"#,
                    cx - bw / 2.0,
                    (yq1 - yq3).max(0.0),
                    esc(color)
                );
                let ym = frame.y(&y_axis, s.median);
                let _ = writeln!(
                    body,
                    r#"<line class="median" x1="{:.2}" y1="{ym:.2}" x2="{:.2}" y2="{ym:.2}" stroke="black" stroke-width="2"/>"#,
                    cx - bw / 2.0,
                    cx + bw / 2.0
                );
                for o in &s.outliers {
                    let _ = writeln!(
                        body,
                        r#"<circle class="outlier" cx="{cx:.2}" cy="{:.2}" r="3" fill="none" stroke="black"/>"#,
                        frame.y(&y_axis, *o)
                    );
                }
                let _ = writeln!(body, "</g>");
                legend.push((s.label.clone(), color.to_string()));
            }
            x_category_labels(&mut body, &frame, cats, font);
        }
        (PlotKind::Scatter, _) => {
            y_axis = axis(y.iter().copied().fold(f64::INFINITY, f64::min), y.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            let _ = writeln!(body, "<!-- scatter n={} -->", y.len());
            let color = spec.color(0);
            match &categories {
                Some(cats) => {
                    let labels = ds.categorical(&spec.independent)?;
                    let slot = (frame.right - frame.left) / cats.len() as f64;
                    for (v, l) in y.iter().zip(labels) {
                        let i = cats.iter().position(|c| c == l).expect("category listed");
                        let cx = frame.left + slot * (i as f64 + 0.5);
                        let _ = writeln!(
                            body,
                            r#"<circle class="point" cx="{cx:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
                            frame.y(&y_axis, *v),
                            esc(color)
                        );
                    }
                    x_category_labels(&mut body, &frame, cats, font);
                }
                None => {
                    let x = ds.numeric(&spec.independent)?;
                    let x_axis = axis(
                        x.iter().copied().fold(f64::INFINITY, f64::min),
                        x.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    );
                    let px = |v: f64| frame.left + (v - x_axis.lo) / (x_axis.hi - x_axis.lo) * (frame.right - frame.left);
                    for (xv, yv) in x.iter().zip(y) {
                        let _ = writeln!(
                            body,
                            r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
                            px(*xv),
                            frame.y(&y_axis, *yv),
                            esc(color)
                        );
                    }
                    for t in &x_axis.ticks {
                        let _ = writeln!(
                            body,
                            r#"<text class="x-tick" x="{:.2}" y="{:.2}" text-anchor="middle" font-size="{font}pt">{}</text>"#,
                            px(*t),
                            frame.bottom + 16.0,
                            tick_label(*t)
                        );
                    }
                }
            }
            legend.push((spec.dependent.clone(), color.to_string()));
        }
        (PlotKind::Box, None) => unreachable!("numeric box axis rejected above"),
    }

    // axes
    let _ = writeln!(
        svg,
        r#"<g class="axes" stroke="black"><line x1="{l:.2}" y1="{b:.2}" x2="{r:.2}" y2="{b:.2}"/><line x1="{l:.2}" y1="{t:.2}" x2="{l:.2}" y2="{b:.2}"/></g>"#,
        l = frame.left,
        r = frame.right,
        t = frame.top,
        b = frame.bottom
    );
    for t in &y_axis.ticks {
        let py = frame.y(&y_axis, *t);
        let _ = writeln!(
            svg,
            r##"<line class="grid" x1="{:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#dddddd"/>"##,
            frame.left,
            frame.right
        );
        let _ = writeln!(
            svg,
            r#"<text class="y-tick" x="{:.2}" y="{:.2}" text-anchor="end" font-size="{font}pt">{}</text>"#,
            frame.left - 6.0,
            py + 4.0,
            tick_label(*t)
        );
    }
    svg.push_str(&body);
    let _ = writeln!(
        svg,
        r#"<text class="x-label" x="{:.2}" y="{:.2}" text-anchor="middle" font-size="{font}pt">{}</text>"#,
        (frame.left + frame.right) / 2.0,
        h - 12.0,
        esc(&spec.independent)
    );
    let _ = writeln!(
        svg,
        r#"<text class="y-label" x="16" y="{:.2}" text-anchor="middle" font-size="{font}pt" transform="rotate(-90 16 {:.2})">{}</text>"#,
        (frame.top + frame.bottom) / 2.0,
        (frame.top + frame.bottom) / 2.0,
        esc(&spec.dependent)
    );
    let lx = frame.right + 16.0;
    let _ = writeln!(svg, r#"<g class="legend">"#);
    for (i, (label, color)) in legend.iter().enumerate() {
        let ly = frame.top + i as f64 * (f64::from(font) * 1.8 + 4.0);
        let _ = writeln!(
            svg,
            r#"<rect x="{lx:.2}" y="{ly:.2}" width="12" height="12" fill="{}"/><text x="{:.2}" y="{:.2}" font-size="{font}pt">{}</text>"#,
            esc(color),
            lx + 18.0,
            ly + 11.0,
            esc(label)
        );
    }
    let _ = writeln!(svg, "</g>\n</svg>");
    Ok(svg)
}

fn x_category_labels(body: &mut String, frame: &Frame, cats: &[String], font: u32) {
    let slot = (frame.right - frame.left) / cats.len() as f64;
    for (i, c) in cats.iter().enumerate() {
        let _ = writeln!(
            body,
            r#"<text class="x-tick" data-label="{}" x="{:.2}" y="{:.2}" text-anchor="middle" font-size="{font}pt">{}</text>"#,
            esc(c),
            frame.left + slot * (i as f64 + 0.5),
            frame.bottom + 16.0,
            esc(c)
        );
    }
}
