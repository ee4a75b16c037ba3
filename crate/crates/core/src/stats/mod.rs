//! Native statistics: summaries, Kruskal-Wallis, one-way ANOVA and
//! Spearman correlation, plus interpreted reports.

mod report;
pub mod special;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use report::{run_analysis, write_report, AnalysisReport, AnalysisSpec, REPORT_HTML, REPORT_MD};
pub use special::{tail_probability, Distribution};

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("empty input")]
    Empty,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("invalid degrees of freedom {0}")]
    InvalidDf(f64),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Summary,
    KruskalWallis,
    Anova,
    Spearman,
}

impl TestKind {
    pub fn title(self) -> &'static str {
        match self {
            Self::Summary => "Summary statistics",
            Self::KruskalWallis => "Kruskal-Wallis rank sum test",
            Self::Anova => "One-way ANOVA",
            Self::Spearman => "Spearman rank correlation",
        }
    }

    pub fn statistic_name(self) -> &'static str {
        match self {
            Self::Summary => "",
            Self::KruskalWallis => "H",
            Self::Anova => "F",
            Self::Spearman => "rho",
        }
    }
}

impl std::str::FromStr for TestKind {
    type Err = StatsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "summary" => Ok(Self::Summary),
            "kruskal_wallis" | "kruskal-wallis" | "kw" => Ok(Self::KruskalWallis),
            "anova" => Ok(Self::Anova),
            "spearman" => Ok(Self::Spearman),
            other => Err(StatsError::InvalidInput(format!("unknown test `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation; 0 when `n < 2` (see `sd_defined`).
    pub sd: f64,
    pub sd_defined: bool,
    pub min: f64,
    pub max: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Summary {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

fn check_finite(values: &[f64]) -> Result<(), StatsError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::InvalidInput("values must be finite".into()))
    }
}

/// Linear-interpolation quantile of sorted data (Hyndman-Fan type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summary_stats(values: &[f64]) -> Result<Summary, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    check_finite(values)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd_defined = n >= 2;
    let sd = if sd_defined {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary {
        n,
        mean,
        median: quantile_sorted(&sorted, 0.5),
        sd,
        sd_defined,
        min: sorted[0],
        max: sorted[n - 1],
        q1: quantile_sorted(&sorted, 0.25),
        q3: quantile_sorted(&sorted, 0.75),
    })
}

/// Mid-ranks (1-based; ties share the mean of their positions) and the tie
/// group sizes.
pub fn mid_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub label: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: TestKind,
    pub statistic: f64,
    pub df: Vec<f64>,
    pub p_value: f64,
    pub group_summaries: Vec<GroupSummary>,
    pub interpretation: String,
    /// Spearman only: |rho| = 1, where the t approximation degenerates.
    #[serde(default)]
    pub exact_monotone: bool,
}

impl TestResult {
    pub fn reject(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }

    pub(crate) fn interpret(&mut self, alpha: f64) {
        let null = match self.test {
            TestKind::KruskalWallis => "all groups come from the same distribution",
            TestKind::Anova => "all group means are equal",
            TestKind::Spearman => "there is no monotonic association",
            TestKind::Summary => {
                self.interpretation = String::new();
                return;
            }
        };
        let p = fmt_p(self.p_value);
        self.interpretation = if self.reject(alpha) {
            format!("p = {p} < {alpha}: reject the null hypothesis at α={alpha} (null: {null}).")
        } else {
            format!("p = {p} ≥ {alpha}: fail to reject the null hypothesis at α={alpha} (null: {null}).")
        };
    }
}

pub(crate) fn fmt_p(p: f64) -> String {
    if p != 0.0 && p < 1e-4 {
        format!("{p:.3e}")
    } else {
        format!("{p:.6}")
    }
}

fn labelled(groups: &[Vec<f64>]) -> Result<Vec<GroupSummary>, StatsError> {
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| Ok(GroupSummary { label: format!("group {}", i + 1), summary: summary_stats(g)? }))
        .collect()
}

fn check_groups(groups: &[Vec<f64>], min_size: usize) -> Result<(), StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::InvalidInput(format!("need at least 2 groups, got {}", groups.len())));
    }
    for (i, g) in groups.iter().enumerate() {
        if g.len() < min_size {
            return Err(StatsError::InvalidInput(format!(
                "group {} has {} values, need at least {min_size}",
                i + 1,
                g.len()
            )));
        }
        check_finite(g)?;
    }
    Ok(())
}

/// Tie-corrected Kruskal-Wallis H with a chi-square p-value on `k - 1` df.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<TestResult, StatsError> {
    check_groups(groups, 1)?;
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = pooled.len() as f64;
    let (ranks, ties) = mid_ranks(&pooled);
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let correction = 1.0 - tie_term / (n.powi(3) - n);
    if correction <= 0.0 {
        return Err(StatsError::DegenerateData("all values are identical".into()));
    }
    let mut offset = 0;
    let mut weighted = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        weighted += r * r / g.len() as f64;
        offset += g.len();
    }
    let h_raw = 12.0 / (n * (n + 1.0)) * weighted - 3.0 * (n + 1.0);
    let h = (h_raw / correction).max(0.0);
    let df = (groups.len() - 1) as f64;
    let mut result = TestResult {
        test: TestKind::KruskalWallis,
        statistic: h,
        df: vec![df],
        p_value: tail_probability(Distribution::ChiSquare { df }, h)?,
        group_summaries: labelled(groups)?,
        interpretation: String::new(),
        exact_monotone: false,
    };
    result.interpret(DEFAULT_ALPHA);
    Ok(result)
}

/// F = MSB / MSW with an F(k - 1, N - k) p-value.
pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<TestResult, StatsError> {
    check_groups(groups, 2)?;
    let n: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ssb += g.len() as f64 * (m - grand).powi(2);
        ssw += g.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    if ssw <= 0.0 {
        return Err(StatsError::DegenerateData("zero within-group variance".into()));
    }
    let k = groups.len();
    let (df1, df2) = ((k - 1) as f64, (n - k) as f64);
    let f = (ssb / df1) / (ssw / df2);
    let mut result = TestResult {
        test: TestKind::Anova,
        statistic: f,
        df: vec![df1, df2],
        p_value: tail_probability(Distribution::F { df1, df2 }, f)?,
        group_summaries: labelled(groups)?,
        interpretation: String::new(),
        exact_monotone: false,
    };
    result.interpret(DEFAULT_ALPHA);
    Ok(result)
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho as the Pearson correlation of mid-ranks; two-sided p from
/// Student's t on `n - 2` df.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::InvalidInput(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(StatsError::InvalidInput(format!("need at least 3 pairs, got {}", x.len())));
    }
    check_finite(x)?;
    check_finite(y)?;
    let (rx, _) = mid_ranks(x);
    let (ry, _) = mid_ranks(y);
    let rho = pearson(&rx, &ry).ok_or_else(|| StatsError::UndefinedCorrelation("x or y is constant".into()))?;
    let df = (x.len() - 2) as f64;
    let exact_monotone = 1.0 - rho.abs() <= 1e-12;
    let (rho, p_value) = if exact_monotone {
        (rho.signum(), 0.0)
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        (rho, (2.0 * tail_probability(Distribution::StudentT { df }, t.abs())?).min(1.0))
    };
    let mut result = TestResult {
        test: TestKind::Spearman,
        statistic: rho,
        df: vec![df],
        p_value,
        group_summaries: vec![
            GroupSummary { label: "x".into(), summary: summary_stats(x)? },
            GroupSummary { label: "y".into(), summary: summary_stats(y)? },
        ],
        interpretation: String::new(),
        exact_monotone,
    };
    result.interpret(DEFAULT_ALPHA);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    // Oracles below work from textbook definitions without mid_ranks or the
    // special-function code: ranks by counting, sums of squares by brute
    // force.

    fn oracle_rank(pool: &[f64], v: f64) -> f64 {
        let less = pool.iter().filter(|&&x| x < v).count() as f64;
        let equal = pool.iter().filter(|&&x| x == v).count() as f64;
        less + (equal + 1.0) / 2.0
    }

    fn oracle_h(groups: &[Vec<f64>]) -> f64 {
        let pool: Vec<f64> = groups.iter().flatten().copied().collect();
        let n = pool.len() as f64;
        let mean_rank = (n + 1.0) / 2.0;
        // H as the between-group rank variance over the total rank variance
        let between: f64 = groups
            .iter()
            .map(|g| {
                let rbar = g.iter().map(|&v| oracle_rank(&pool, v)).sum::<f64>() / g.len() as f64;
                g.len() as f64 * (rbar - mean_rank).powi(2)
            })
            .sum();
        let total: f64 = pool.iter().map(|&v| (oracle_rank(&pool, v) - mean_rank).powi(2)).sum();
        (n - 1.0) * between / total
    }

    fn oracle_f(groups: &[Vec<f64>]) -> f64 {
        let all: Vec<f64> = groups.iter().flatten().copied().collect();
        let grand = all.iter().sum::<f64>() / all.len() as f64;
        let sst: f64 = all.iter().map(|v| (v - grand).powi(2)).sum();
        let ssw: f64 = groups
            .iter()
            .map(|g| {
                let m = g.iter().sum::<f64>() / g.len() as f64;
                g.iter().map(|v| (v - m).powi(2)).sum::<f64>()
            })
            .sum();
        let k = groups.len() as f64;
        ((sst - ssw) / (k - 1.0)) / (ssw / (all.len() as f64 - k))
    }

    fn oracle_rho_no_ties(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let d2: f64 = x.iter().zip(y).map(|(&a, &b)| (oracle_rank(x, a) - oracle_rank(y, b)).powi(2)).sum();
        1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    }

    #[test]
    fn summary_basic() {
        let s = summary_stats(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.median, s.sd), (2.0, 2.0, 1.0));
        assert_eq!((s.q1, s.q3, s.min, s.max), (1.5, 2.5, 1.0, 3.0));
    }

    #[test]
    fn summary_single_value() {
        let s = summary_stats(&[5.0]).unwrap();
        assert_eq!(s.sd, 0.0);
        assert!(!s.sd_defined);
    }

    #[test]
    fn summary_constant_and_empty() {
        assert_eq!(summary_stats(&[1.0; 4]).unwrap().sd, 0.0);
        assert!(matches!(summary_stats(&[]), Err(StatsError::Empty)));
    }

    #[test]
    fn kruskal_three_groups() {
        let groups = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]];
        let r = kruskal_wallis(&groups).unwrap();
        // rank sums 6, 15, 24: 12/90 * 279 - 30
        assert_abs_diff_eq!(r.statistic, 7.2, epsilon = 1e-9);
        assert_abs_diff_eq!(r.statistic, oracle_h(&groups), epsilon = 1e-9);
        assert_eq!(r.df, vec![2.0]);
        assert_abs_diff_eq!(r.p_value, (-3.6f64).exp(), epsilon = 1e-6);
        assert_abs_diff_eq!(r.p_value, 0.02732, epsilon = 1e-5);
        assert!(r.interpretation.contains("reject the null"));
    }

    #[test]
    fn kruskal_identical_groups() {
        let r = kruskal_wallis(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_abs_diff_eq!(r.statistic, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-12);
        assert!(r.interpretation.contains("fail to reject"));
    }

    #[test]
    fn kruskal_degenerate_and_bad_input() {
        assert!(matches!(kruskal_wallis(&[vec![3.0, 3.0], vec![3.0]]), Err(StatsError::DegenerateData(_))));
        assert!(kruskal_wallis(&[vec![1.0]]).is_err());
        assert!(kruskal_wallis(&[vec![1.0], vec![]]).is_err());
    }

    #[test]
    fn kruskal_with_ties_matches_oracle() {
        let groups = vec![vec![1.0, 2.0, 2.0, 5.0], vec![2.0, 3.0, 3.0], vec![5.0, 5.0, 8.0, 9.0, 1.0]];
        let r = kruskal_wallis(&groups).unwrap();
        assert_abs_diff_eq!(r.statistic, oracle_h(&groups), epsilon = 1e-9);
    }

    #[test]
    fn anova_examples() {
        let r = one_way_anova(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-12);
        let groups = vec![vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0]];
        let r = one_way_anova(&groups).unwrap();
        assert_abs_diff_eq!(r.statistic, 1.5, epsilon = 1e-9);
        assert_abs_diff_eq!(r.statistic, oracle_f(&groups), epsilon = 1e-9);
        assert_eq!(r.df, vec![1.0, 4.0]);
        // F(1,4) at 1.5 equals the two-sided t(4) tail at sqrt(1.5); t(4)
        // has the closed-form CDF 1/2 + t(t^2+6) / (2 (t^2+4)^1.5)
        let t = 1.5f64.sqrt();
        let p_closed = 1.0 - t * (t * t + 6.0) / (t * t + 4.0).powf(1.5);
        assert_abs_diff_eq!(r.p_value, p_closed, epsilon = 1e-6);
        assert!(matches!(one_way_anova(&[vec![0.0, 0.0], vec![1.0, 1.0]]), Err(StatsError::DegenerateData(_))));
        assert!(one_way_anova(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn spearman_examples() {
        let r = spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert_eq!(r.statistic, -1.0);
        assert!(r.exact_monotone);
        assert_eq!(r.p_value, 0.0);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(r.statistic, 1.0);
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        let r = spearman(&x, &y).unwrap();
        assert_abs_diff_eq!(r.statistic, 0.8, epsilon = 1e-9);
        assert_abs_diff_eq!(r.statistic, oracle_rho_no_ties(&x, &y), epsilon = 1e-9);
        // t = 0.8 * sqrt(2 / 0.36); t(2) two-sided tail is 1 - t/sqrt(t^2+2)
        let t = 0.8 * (2.0f64 / 0.36).sqrt();
        assert_abs_diff_eq!(r.p_value, 1.0 - t / (t * t + 2.0).sqrt(), epsilon = 1e-6);
        assert!(!r.exact_monotone);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(spearman(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]), Err(StatsError::UndefinedCorrelation(_))));
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mid_ranks_ties() {
        let (r, ties) = mid_ranks(&[10.0, 20.0, 10.0, 30.0]);
        assert_eq!(r, vec![1.5, 3.0, 1.5, 4.0]);
        assert_eq!(ties, vec![2, 1, 1]);
    }

    fn small_groups() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec((0i32..8).prop_map(f64::from), 2..5), 2..4)
            .prop_filter("total at most 12", |g| g.iter().map(Vec::len).sum::<usize>() <= 12)
    }

    proptest! {
        #[test]
        fn kruskal_matches_oracle(groups in small_groups()) {
            if let Ok(r) = kruskal_wallis(&groups) {
                prop_assert!((r.statistic - oracle_h(&groups)).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(&r.p_value));
            }
        }

        #[test]
        fn kruskal_rank_invariant(groups in small_groups()) {
            let transformed: Vec<Vec<f64>> =
                groups.iter().map(|g| g.iter().map(|v| (v * 0.3).exp() + 2.0 * v).collect()).collect();
            if let (Ok(a), Ok(b)) = (kruskal_wallis(&groups), kruskal_wallis(&transformed)) {
                prop_assert_eq!(a.statistic, b.statistic);
                prop_assert_eq!(a.p_value, b.p_value);
            }
        }

        #[test]
        fn within_group_permutation_invariance(groups in small_groups(), rot in 0usize..5) {
            let rotated: Vec<Vec<f64>> = groups.iter().map(|g| {
                let mut g = g.clone();
                let k = rot % g.len();
                g.rotate_left(k);
                g
            }).collect();
            if let (Ok(a), Ok(b)) = (kruskal_wallis(&groups), kruskal_wallis(&rotated)) {
                prop_assert!((a.statistic - b.statistic).abs() < 1e-12);
            }
            if let (Ok(a), Ok(b)) = (one_way_anova(&groups), one_way_anova(&rotated)) {
                prop_assert!((a.statistic - b.statistic).abs() <= 1e-9 * a.statistic.abs().max(1.0));
                prop_assert!((oracle_f(&groups) - a.statistic).abs() <= 1e-9 * a.statistic.abs().max(1.0));
            }
        }

        #[test]
        fn spearman_matches_oracle_without_ties(perm in Just((0..10).collect::<Vec<i32>>()).prop_shuffle(), n in 3usize..10) {
            let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let y: Vec<f64> = perm.iter().filter(|&&v| (v as usize) < n).map(|&v| f64::from(v)).collect();
            let r = spearman(&x, &y).unwrap();
            prop_assert!((r.statistic - oracle_rho_no_ties(&x, &y)).abs() < 1e-9);
            let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
            pairs.reverse();
            let (px, py): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!((spearman(&px, &py).unwrap().statistic - r.statistic).abs() < 1e-12);
        }
    }
}
