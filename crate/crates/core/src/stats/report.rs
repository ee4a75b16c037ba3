use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    fmt_p, kruskal_wallis, one_way_anova, spearman, summary_stats, GroupSummary, StatsError, TestKind, TestResult,
    DEFAULT_ALPHA,
};
use crate::dataset::{Column, Dataset, DatasetError, Filter};

pub const REPORT_MD: &str = "report.md";
pub const REPORT_HTML: &str = "report.html";

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSpec {
    pub test: TestKind,
    pub dependent: String,
    #[serde(default)]
    pub independent: Option<String>,
    #[serde(default)]
    pub filter: Option<Filter>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl AnalysisSpec {
    pub fn new(test: TestKind, dependent: &str, independent: Option<&str>) -> Self {
        Self {
            test,
            dependent: dependent.to_string(),
            independent: independent.map(str::to_string),
            filter: None,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub spec: AnalysisSpec,
    pub n_rows: usize,
    pub summaries: Vec<GroupSummary>,
    pub result: Option<TestResult>,
    pub markdown: String,
    pub html: String,
}

fn grouped(ds: &Dataset, spec: &AnalysisSpec) -> Result<(Vec<String>, Vec<Vec<f64>>), StatsError> {
    let independent = spec.independent.as_deref().ok_or_else(|| {
        StatsError::InvalidInput(format!("{} needs a categorical independent variable", spec.test.title()))
    })?;
    let cats = ds.categories(independent)?;
    let groups = ds.groups(&spec.dependent, independent, &cats)?;
    Ok((cats, groups))
}

fn summarize(labels: &[String], groups: &[Vec<f64>]) -> Result<Vec<GroupSummary>, StatsError> {
    labels
        .iter()
        .zip(groups)
        .map(|(label, g)| Ok(GroupSummary { label: label.clone(), summary: summary_stats(g)? }))
        .collect()
}

/// Applies the filter, runs the selected test and renders the report.
pub fn run_analysis(dataset: &Dataset, spec: &AnalysisSpec) -> Result<AnalysisReport, StatsError> {
    if !(spec.alpha > 0.0 && spec.alpha < 1.0) {
        return Err(StatsError::InvalidInput(format!("alpha {} outside (0, 1)", spec.alpha)));
    }
    let filtered;
    let ds = match &spec.filter {
        Some(f) => {
            filtered = dataset.filter(f)?;
            &filtered
        }
        None => dataset,
    };
    // surface unknown columns before an empty selection
    ds.column(&spec.dependent)?;
    if let Some(ind) = &spec.independent {
        ds.column(ind)?;
    }
    if ds.n_rows() == 0 {
        return Err(DatasetError::EmptySelection.into());
    }

    let (summaries, result) = match spec.test {
        TestKind::Summary => {
            let summaries = match spec.independent.as_deref() {
                Some(ind) if matches!(ds.column(ind)?, Column::Categorical(_)) => {
                    let (cats, groups) = grouped(ds, spec)?;
                    summarize(&cats, &groups)?
                }
                _ => summarize(std::slice::from_ref(&spec.dependent), &[ds.numeric(&spec.dependent)?.to_vec()])?,
            };
            (summaries, None)
        }
        TestKind::KruskalWallis | TestKind::Anova => {
            let (cats, groups) = grouped(ds, spec)?;
            let mut r = if spec.test == TestKind::KruskalWallis {
                kruskal_wallis(&groups)?
            } else {
                one_way_anova(&groups)?
            };
            r.group_summaries = summarize(&cats, &groups)?;
            (r.group_summaries.clone(), Some(r))
        }
        TestKind::Spearman => {
            let independent = spec
                .independent
                .as_deref()
                .ok_or_else(|| StatsError::InvalidInput("Spearman needs a numeric independent variable".into()))?;
            let x = ds.numeric(independent)?;
            let y = ds.numeric(&spec.dependent)?;
            let mut r = spearman(x, y)?;
            r.group_summaries[0].label = independent.to_string();
            r.group_summaries[1].label = spec.dependent.clone();
            (r.group_summaries.clone(), Some(r))
        }
    };
    let result = result.map(|mut r| {
        r.interpret(spec.alpha);
        r
    });
    let mut report = AnalysisReport {
        spec: spec.clone(),
        n_rows: ds.n_rows(),
        summaries,
        result,
        markdown: String::new(),
        html: String::new(),
    };
    report.markdown = render_markdown(&report);
    report.html = render_html(&report);
    Ok(report)
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

fn summary_rows(summaries: &[GroupSummary]) -> Vec<[String; 9]> {
    summaries
        .iter()
        .map(|g| {
            let s = &g.summary;
            let sd = if s.sd_defined { num(s.sd) } else { format!("{} (n<2)", num(s.sd)) };
            [g.label.clone(), s.n.to_string(), num(s.mean), num(s.median), sd, num(s.min), num(s.q1), num(s.q3), num(s.max)]
        })
        .collect()
}

const SUMMARY_COLUMNS: [&str; 9] = ["group", "n", "mean", "median", "sd", "min", "q1", "q3", "max"];

fn result_line(r: &TestResult) -> String {
    let df = r.df.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ");
    let mut line = format!("{} = {}, df = {df}, p-value = {}", r.test.statistic_name(), num(r.statistic), fmt_p(r.p_value));
    if r.exact_monotone {
        line.push_str(" (exact monotone relation)");
    }
    line
}

fn render_markdown(report: &AnalysisReport) -> String {
    let spec = &report.spec;
    let mut md = String::new();
    let _ = writeln!(md, "# {}\n", spec.test.title());
    let _ = writeln!(md, "- Dependent variable: `{}`", spec.dependent);
    if let Some(ind) = &spec.independent {
        let _ = writeln!(md, "- Independent variable: `{ind}`");
    }
    if let Some(f) = &spec.filter {
        let _ = writeln!(md, "- Filter: `{f}`");
    }
    let _ = writeln!(md, "- Rows analysed: {}\n", report.n_rows);
    let _ = writeln!(md, "## Summary\n");
    let _ = writeln!(md, "| {} |", SUMMARY_COLUMNS.join(" | "));
    let _ = writeln!(md, "|{}", "---|".repeat(SUMMARY_COLUMNS.len()));
    for row in summary_rows(&report.summaries) {
        let _ = writeln!(md, "| {} |", row.join(" | "));
    }
    if let Some(r) = &report.result {
        let _ = writeln!(md, "\n## Result\n\n{}\n", result_line(r));
        let _ = writeln!(md, "## Interpretation\n\n{}", r.interpretation);
    }
    md
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn render_html(report: &AnalysisReport) -> String {
    let spec = &report.spec;
    let mut h = String::new();
    let title = escape(spec.test.title());
    let _ = writeln!(h, "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>{title}</title></head>\n<body>");
    let _ = writeln!(h, "<h1>{title}</h1>\n<ul>");
    let _ = writeln!(h, "<li>Dependent variable: <code>{}</code></li>", escape(&spec.dependent));
    if let Some(ind) = &spec.independent {
        let _ = writeln!(h, "<li>Independent variable: <code>{}</code></li>", escape(ind));
    }
    if let Some(f) = &spec.filter {
        let _ = writeln!(h, "<li>Filter: <code>{}</code></li>", escape(&f.to_string()));
    }
    let _ = writeln!(h, "<li>Rows analysed: {}</li>\n</ul>", report.n_rows);
    let _ = writeln!(h, "<h2>Summary</h2>\n<table>\n<tr>{}</tr>", SUMMARY_COLUMNS.map(|c| format!("<th>{c}</th>")).concat());
    for row in summary_rows(&report.summaries) {
        let cells: String = row.iter().map(|c| format!("<td>{}</td>", escape(c))).collect();
        let _ = writeln!(h, "<tr>{cells}</tr>");
    }
    let _ = writeln!(h, "</table>");
    if let Some(r) = &report.result {
        let _ = writeln!(h, "<h2>Result</h2>\n<p>{}</p>", escape(&result_line(r)));
        let _ = writeln!(h, "<h2>Interpretation</h2>\n<p>{}</p>", escape(&r.interpretation));
    }
    let _ = writeln!(h, "</body>\n</html>");
    h
}

/// Writes `report.md` and `report.html` into `dir`.
pub fn write_report(report: &AnalysisReport, dir: &Path) -> Result<(PathBuf, PathBuf), StatsError> {
    let md = dir.join(REPORT_MD);
    let html = dir.join(REPORT_HTML);
    std::fs::write(&md, &report.markdown).map_err(|source| StatsError::Io { path: md.clone(), source })?;
    std::fs::write(&html, &report.html).map_err(|source| StatsError::Io { path: html.clone(), source })?;
    Ok((md, html))
}
