//! Stage entry points shared by the command line and the HTTP service, so
//! both produce the same files from the same inputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use voltlab_core::campaign::MANIFEST_FILE;
use voltlab_core::dataset::Column;
use voltlab_core::plot::{render_plot, PlotSpec};
use voltlab_core::preprocess::{preprocess_with, PreprocessOptions, PreprocessSummary};
use voltlab_core::stats::{run_analysis, write_report, AnalysisReport, AnalysisSpec};
use voltlab_core::Dataset;

/// Joins relative paths onto `base`.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

pub fn preprocess(results_dir: &Path, opts: PreprocessOptions) -> Result<PreprocessSummary> {
    let manifest = results_dir.join(MANIFEST_FILE);
    if !manifest.is_file() {
        bail!("missing campaign manifest {} (run `voltlab campaign run` first)", manifest.display());
    }
    preprocess_with(results_dir, opts).with_context(|| format!("pre-processing {}", results_dir.display()))
}

pub fn load_data(paths: &[PathBuf]) -> Result<Dataset> {
    if paths.is_empty() {
        bail!("no data files given");
    }
    if let Some(missing) = paths.iter().find(|p| !p.is_file()) {
        bail!("missing data file {} (run `voltlab preprocess` first)", missing.display());
    }
    Ok(Dataset::from_csv_paths(paths)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisOutput {
    pub report: AnalysisReport,
    pub markdown_path: PathBuf,
    pub html_path: PathBuf,
}

/// Runs the analysis and writes `report.md`/`report.html` into `out_dir`,
/// defaulting to the folder of the first data file.
pub fn analyze(paths: &[PathBuf], spec: &AnalysisSpec, out_dir: Option<&Path>) -> Result<AnalysisOutput> {
    let data = load_data(paths)?;
    let report = run_analysis(&data, spec)?;
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => paths[0].parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let (markdown_path, html_path) = write_report(&report, &dir)?;
    Ok(AnalysisOutput { report, markdown_path, html_path })
}

pub fn plot(paths: &[PathBuf], spec: &PlotSpec, out: Option<&Path>) -> Result<String> {
    let data = load_data(paths)?;
    let svg = render_plot(&data, spec)?;
    if let Some(out) = out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(out, &svg).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(svg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

/// Column names and kinds, used to populate variable selectors.
pub fn columns(path: &Path) -> Result<Vec<ColumnInfo>> {
    let data = load_data(&[path.to_path_buf()])?;
    data.names()
        .iter()
        .map(|name| {
            let col = data.column(name)?;
            let categories = match col {
                Column::Categorical(_) => Some(data.categories(name)?),
                Column::Numeric(_) => None,
            };
            Ok(ColumnInfo { name: name.clone(), kind: col.kind().to_string(), categories })
        })
        .collect()
}

/// Files under `root`, relative and sorted.
pub fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if let Ok(rel) = path.strip_prefix(root) {
                out.push(rel.to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out).with_context(|| format!("listing {}", root.display()))?;
    out.sort();
    Ok(out)
}
