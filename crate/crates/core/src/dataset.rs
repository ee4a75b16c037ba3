//! Column-oriented tables loaded from CSV files, with row filters.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{column}` is {actual}, expected {expected}")]
    TypeMismatch { column: String, expected: &'static str, actual: &'static str },
    #[error("selection is empty")]
    EmptySelection,
    #[error("invalid filter `{0}`; expected <column><op><value> with op one of == != <= >= < >")]
    BadFilter(String),
    #[error("headers differ between `{0}` and `{1}`")]
    HeaderMismatch(String, String),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Self::Numeric(v) => v.len(),
            Self::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Numeric(_) => "numeric",
            Self::Categorical(_) => "categorical",
        }
    }

    /// Value of row `i` as text.
    pub fn label(&self, i: usize) -> String {
        match self {
            Self::Numeric(v) => v[i].to_string(),
            Self::Categorical(v) => v[i].clone(),
        }
    }

    fn select(&self, keep: &[bool]) -> Self {
        fn pick<T: Clone>(v: &[T], keep: &[bool]) -> Vec<T> {
            v.iter().zip(keep).filter(|(_, k)| **k).map(|(x, _)| x.clone()).collect()
        }
        match self {
            Self::Numeric(v) => Self::Numeric(pick(v, keep)),
            Self::Categorical(v) => Self::Categorical(pick(v, keep)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Column>,
    n_rows: usize,
}

impl Dataset {
    /// Builds a dataset from header and string rows; a column is numeric
    /// when every value parses as a float.
    pub fn from_rows(names: Vec<String>, rows: &[Vec<String>]) -> Self {
        let columns = (0..names.len())
            .map(|c| {
                let raw: Vec<&str> = rows.iter().map(|r| r.get(c).map_or("", |s| s.as_str())).collect();
                let parsed: Option<Vec<f64>> = raw.iter().map(|s| s.trim().parse::<f64>().ok()).collect();
                match parsed {
                    Some(v) => Column::Numeric(v),
                    None => Column::Categorical(raw.iter().map(|s| s.to_string()).collect()),
                }
            })
            .collect();
        Self { names, columns, n_rows: rows.len() }
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R, origin: &Path) -> Result<Self, DatasetError> {
        let wrap = |source| DatasetError::Csv { path: origin.to_path_buf(), source };
        let mut rdr = csv::Reader::from_reader(reader);
        let names: Vec<String> = rdr.headers().map_err(wrap)?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec.map_err(wrap)?.iter().map(str::to_string).collect());
        }
        Ok(Self::from_rows(names, &rows))
    }

    pub fn from_csv_str(text: &str) -> Result<Self, DatasetError> {
        Self::from_csv_reader(text.as_bytes(), Path::new("<inline>"))
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, DatasetError> {
        let file = std::fs::File::open(path)
            .map_err(|e| DatasetError::Csv { path: path.to_path_buf(), source: e.into() })?;
        Self::from_csv_reader(file, path)
    }

    /// Stacks several files with identical headers.
    pub fn from_csv_paths(paths: &[PathBuf]) -> Result<Self, DatasetError> {
        let mut names: Option<(Vec<String>, &PathBuf)> = None;
        let mut rows = Vec::new();
        for path in paths {
            let wrap = |source| DatasetError::Csv { path: path.clone(), source };
            let mut rdr = csv::Reader::from_path(path).map_err(wrap)?;
            let header: Vec<String> = rdr.headers().map_err(wrap)?.iter().map(str::to_string).collect();
            match &names {
                Some((h, first)) if *h != header => {
                    return Err(DatasetError::HeaderMismatch(first.display().to_string(), path.display().to_string()))
                }
                Some(_) => {}
                None => names = Some((header, path)),
            }
            for rec in rdr.records() {
                rows.push(rec.map_err(wrap)?.iter().map(str::to_string).collect());
            }
        }
        let names = names.map(|(h, _)| h).unwrap_or_default();
        Ok(Self::from_rows(names, &rows))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn column(&self, name: &str) -> Result<&Column, DatasetError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
            .ok_or_else(|| DatasetError::UnknownColumn(name.to_string()))
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64], DatasetError> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            other => Err(DatasetError::TypeMismatch {
                column: name.to_string(),
                expected: "numeric",
                actual: other.kind(),
            }),
        }
    }

    pub fn categorical(&self, name: &str) -> Result<&[String], DatasetError> {
        match self.column(name)? {
            Column::Categorical(v) => Ok(v),
            other => Err(DatasetError::TypeMismatch {
                column: name.to_string(),
                expected: "categorical",
                actual: other.kind(),
            }),
        }
    }

    /// Distinct values of a categorical column in order of first appearance.
    pub fn categories(&self, name: &str) -> Result<Vec<String>, DatasetError> {
        let values = self.categorical(name)?;
        let mut seen = HashSet::new();
        Ok(values.iter().filter(|v| seen.insert(v.as_str())).cloned().collect())
    }

    /// Values of the numeric `dependent` column split by the categorical
    /// `independent` column, one group per category in `order`.
    pub fn groups(&self, dependent: &str, independent: &str, order: &[String]) -> Result<Vec<Vec<f64>>, DatasetError> {
        let y = self.numeric(dependent)?;
        let labels = self.categorical(independent)?;
        Ok(order
            .iter()
            .map(|cat| y.iter().zip(labels).filter(|(_, l)| *l == cat).map(|(v, _)| *v).collect())
            .collect())
    }

    pub fn filter(&self, filter: &Filter) -> Result<Self, DatasetError> {
        let col = self.column(&filter.column)?;
        let keep: Vec<bool> = match col {
            Column::Numeric(v) => {
                let target: f64 = filter.value.trim().parse().map_err(|_| DatasetError::TypeMismatch {
                    column: filter.column.clone(),
                    expected: "categorical",
                    actual: "numeric",
                })?;
                v.iter().map(|x| filter.op.holds(x.partial_cmp(&target))).collect()
            }
            Column::Categorical(v) => {
                if !matches!(filter.op, FilterOp::Eq | FilterOp::Ne) {
                    return Err(DatasetError::TypeMismatch {
                        column: filter.column.clone(),
                        expected: "numeric",
                        actual: "categorical",
                    });
                }
                v.iter().map(|x| filter.op.holds(Some(x.as_str().cmp(filter.value.as_str())))).collect()
            }
        };
        let n_rows = keep.iter().filter(|k| **k).count();
        Ok(Self { names: self.names.clone(), columns: self.columns.iter().map(|c| c.select(&keep)).collect(), n_rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl FilterOp {
    fn holds(self, ord: Option<std::cmp::Ordering>) -> bool {
        use std::cmp::Ordering::*;
        matches!(
            (self, ord),
            (Self::Eq, Some(Equal))
                | (Self::Ne, Some(Less | Greater))
                | (Self::Lt, Some(Less))
                | (Self::Le, Some(Less | Equal))
                | (Self::Gt, Some(Greater))
                | (Self::Ge, Some(Greater | Equal))
        )
    }

    fn symbol(self) -> &'static str {
        match self {
            Self::Eq => "==",
            Self::Ne => "!=",
            Self::Lt => "<",
            Self::Le => "<=",
            Self::Gt => ">",
            Self::Ge => ">=",
        }
    }
}

/// Row predicate `column op value`, written e.g. `package==com.a` or
/// `energy_j>1.5`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Filter {
    pub column: String,
    pub op: FilterOp,
    pub value: String,
}

impl std::fmt::Display for Filter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{}{}", self.column, self.op.symbol(), self.value)
    }
}

impl std::str::FromStr for Filter {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        // two-character operators first so `<=` is not read as `<`
        const OPS: [(&str, FilterOp); 6] = [
            ("==", FilterOp::Eq),
            ("!=", FilterOp::Ne),
            ("<=", FilterOp::Le),
            (">=", FilterOp::Ge),
            ("<", FilterOp::Lt),
            (">", FilterOp::Gt),
        ];
        let (pos, sym, op) = OPS
            .iter()
            .filter_map(|(sym, op)| s.find(sym).map(|p| (p, *sym, *op)))
            .min_by_key(|(p, sym, _)| (*p, std::cmp::Reverse(sym.len())))
            .ok_or_else(|| DatasetError::BadFilter(s.to_string()))?;
        let column = s[..pos].trim();
        let value = s[pos + sym.len()..].trim();
        if column.is_empty() || value.is_empty() {
            return Err(DatasetError::BadFilter(s.to_string()));
        }
        Ok(Self { column: column.to_string(), op, value: value.to_string() })
    }
}
