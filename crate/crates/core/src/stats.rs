//! Aggregation of multi-run results, two-sided t-tests, significance
//! highlighting and table rendering.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::data::{ExpertCombination, ExpertId};
use crate::error::{Error, Result};
use crate::train::EvalSummary;

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    /// Paired by index.
    Paired,
    /// Student's two-sample test with pooled variance.
    Unpaired,
    /// Two-sample test with Welch-Satterthwaite degrees of freedom.
    Welch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub significant: bool,
    /// Zero variance: `p` is 1 for identical samples and 0 otherwise.
    pub degenerate: bool,
}

/// Two-sided p-value of Student's t distribution with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sum_sq_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum()
}

pub fn t_test(x: &[f64], y: &[f64], kind: TestKind, alpha: f64) -> Result<TTest> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Invalid("t-test needs at least two values per sample".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("t-test on non-finite values".into()));
    }
    let (diff, se2, df) = match kind {
        TestKind::Paired => {
            if x.len() != y.len() {
                return Err(Error::Invalid(format!(
                    "paired t-test on samples of length {} and {}",
                    x.len(),
                    y.len()
                )));
            }
            let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            let n = d.len() as f64;
            (mean(&d), sum_sq_dev(&d) / (n - 1.0) / n, n - 1.0)
        }
        TestKind::Unpaired => {
            let (nx, ny) = (x.len() as f64, y.len() as f64);
            let pooled = (sum_sq_dev(x) + sum_sq_dev(y)) / (nx + ny - 2.0);
            (mean(x) - mean(y), pooled * (1.0 / nx + 1.0 / ny), nx + ny - 2.0)
        }
        TestKind::Welch => {
            let (nx, ny) = (x.len() as f64, y.len() as f64);
            let (vx, vy) = (sum_sq_dev(x) / (nx - 1.0) / nx, sum_sq_dev(y) / (ny - 1.0) / ny);
            let se2 = vx + vy;
            let df = se2 * se2 / (vx * vx / (nx - 1.0) + vy * vy / (ny - 1.0));
            (mean(x) - mean(y), se2, df)
        }
    };
    if se2 == 0.0 || !df.is_finite() {
        let identical = match kind {
            TestKind::Paired => x == y,
            _ => diff == 0.0,
        };
        let p = if identical { 1.0 } else { 0.0 };
        return Ok(TTest {
            t: if identical { 0.0 } else { diff.signum() * f64::INFINITY },
            df: if df.is_finite() { df } else { 0.0 },
            p,
            significant: p < alpha,
            degenerate: true,
        });
    }
    let t = diff / se2.sqrt();
    let p = t_two_sided_p(t, df);
    Ok(TTest {
        t,
        df,
        p,
        significant: p < alpha,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dice,
    Assd,
    Hd95,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Dice, Metric::Assd, Metric::Hd95];

    pub fn maximize(self) -> bool {
        self == Metric::Dice
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::Dice => "Dice (%)",
            Metric::Assd => "ASSD",
            Metric::Hd95 => "95HD",
        }
    }

    pub fn of(self, s: &EvalSummary) -> f64 {
        match self {
            Metric::Dice => s.dice,
            Metric::Assd => s.assd,
            Metric::Hd95 => s.hd95,
        }
    }

    /// Display scale: Dice as a percentage.
    pub fn display(self, v: f64) -> f64 {
        match self {
            Metric::Dice => 100.0 * v,
            _ => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// One grid cell of an experiment: a trained (and possibly fine-tuned) model
/// scored on a new expert's test annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunResult {
    pub experiment: String,
    pub row: String,
    pub arm: Option<String>,
    pub combo: Option<ExpertCombination>,
    pub sampling_way: usize,
    pub new_expert: ExpertId,
    pub metrics: EvalSummary,
    pub provenance: Provenance,
}

/// Per sampling way, the mean over expert combinations of each metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedResult {
    pub ways: Vec<usize>,
    pub values: BTreeMap<Metric, Vec<f64>>,
}

impl AggregatedResult {
    pub fn values(&self, metric: Metric) -> &[f64] {
        &self.values[&metric]
    }

    pub fn mean(&self, metric: Metric) -> f64 {
        mean(self.values(metric))
    }
}

/// Averages `runs` over combinations for each sampling way. The runs must
/// form a complete (combination x way) grid.
pub fn aggregate(runs: &[RunResult]) -> Result<AggregatedResult> {
    if runs.is_empty() {
        return Err(Error::Data("nothing to aggregate".into()));
    }
    let label = |r: &RunResult| r.combo.as_ref().map_or_else(|| "-".to_string(), |c| c.label());
    let mut grid: BTreeMap<(usize, String), &RunResult> = BTreeMap::new();
    for r in runs {
        if grid.insert((r.sampling_way, label(r)), r).is_some() {
            return Err(Error::Data(format!(
                "duplicate result for way {} combo {}",
                r.sampling_way,
                label(r)
            )));
        }
    }
    let ways: BTreeSet<usize> = runs.iter().map(|r| r.sampling_way).collect();
    let combos: BTreeSet<String> = runs.iter().map(label).collect();
    let missing: Vec<String> = ways
        .iter()
        .flat_map(|&w| combos.iter().map(move |c| (w, c.clone())))
        .filter(|k| !grid.contains_key(k))
        .map(|(w, c)| format!("way {w} combo {c}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("incomplete grid, missing: {}", missing.join(", "))));
    }
    let values = Metric::ALL
        .iter()
        .map(|&m| {
            let per_way = ways
                .iter()
                .map(|&w| {
                    let total: f64 = combos.iter().map(|c| m.of(&grid[&(w, c.clone())].metrics)).sum();
                    total / combos.len() as f64
                })
                .collect();
            (m, per_way)
        })
        .collect();
    Ok(AggregatedResult {
        ways: ways.into_iter().collect(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSignificance {
    pub metric: Metric,
    pub best: usize,
    pub bold: BTreeSet<usize>,
    /// p-value of each row against the best row (`None` for the best itself).
    pub p_values: Vec<Option<f64>>,
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub kind: TestKind,
    pub alpha: f64,
    pub columns: Vec<ColumnSignificance>,
}

impl SignificanceReport {
    pub fn column(&self, metric: Metric) -> &ColumnSignificance {
        self.columns
            .iter()
            .find(|c| c.metric == metric)
            .expect("every metric has a column")
    }
}

/// Best row per metric plus every row not significantly different from it.
pub fn highlight(rows: &[&AggregatedResult], kind: TestKind, alpha: f64) -> Result<SignificanceReport> {
    if rows.len() < 2 {
        return Err(Error::Invalid("highlighting needs at least two rows".into()));
    }
    let columns = Metric::ALL
        .iter()
        .map(|&metric| {
            let means: Vec<f64> = rows.iter().map(|r| r.mean(metric)).collect();
            let better = |a: f64, b: f64| if metric.maximize() { a > b } else { a < b };
            let mut best = 0;
            for i in 1..means.len() {
                if better(means[i], means[best]) {
                    best = i;
                }
            }
            let tie = means.iter().enumerate().any(|(i, &m)| i != best && m == means[best]);
            let mut bold = BTreeSet::from([best]);
            let mut p_values = vec![None; rows.len()];
            for i in 0..rows.len() {
                if i == best {
                    continue;
                }
                let test = t_test(rows[i].values(metric), rows[best].values(metric), kind, alpha)?;
                p_values[i] = Some(test.p);
                if !test.significant {
                    bold.insert(i);
                }
            }
            Ok(ColumnSignificance {
                metric,
                best,
                bold,
                p_values,
                tie,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SignificanceReport { kind, alpha, columns })
}

/// Whether `candidate` is significantly better than `counterpart` on `metric`.
pub fn significantly_better(
    candidate: &AggregatedResult,
    counterpart: &AggregatedResult,
    metric: Metric,
    kind: TestKind,
    alpha: f64,
) -> Result<bool> {
    let test = t_test(candidate.values(metric), counterpart.values(metric), kind, alpha)?;
    let ahead = if metric.maximize() {
        candidate.mean(metric) > counterpart.mean(metric)
    } else {
        candidate.mean(metric) < counterpart.mean(metric)
    };
    Ok(test.significant && ahead)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: f64,
    pub bold: bool,
    pub underline: bool,
    pub flag: Option<String>,
}

impl Cell {
    pub fn plain(value: f64) -> Self {
        Cell {
            value,
            bold: false,
            underline: false,
            flag: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Markdown,
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(Format::Markdown),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Config(format!("unknown table format {other:?}"))),
        }
    }
}

fn render_cell(cell: &Cell) -> String {
    let mut s = format!("{:.2}", cell.value);
    if cell.underline {
        s = format!("<u>{s}</u>");
    }
    if cell.bold {
        s = format!("**{s}**");
    }
    if let Some(flag) = &cell.flag {
        s.push_str(&format!(" ({flag})"));
    }
    s
}

/// Renders `table`; the output is a pure function of the table.
pub fn emit_table(table: &Table, format: Format) -> Result<String> {
    match format {
        Format::Markdown => {
            let mut out = format!("### {}\n\n", table.title);
            let header: Vec<&str> = std::iter::once(table.row_header.as_str())
                .chain(table.columns.iter().map(String::as_str))
                .collect();
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
            for row in &table.rows {
                let cells: Vec<String> = row.cells.iter().map(render_cell).collect();
                out.push_str(&format!("| {} | {} |\n", row.label, cells.join(" | ")));
            }
            Ok(out)
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
            let mut header = vec![table.row_header.clone()];
            for c in &table.columns {
                header.extend([c.clone(), format!("{c} bold"), format!("{c} underline"), format!("{c} flag")]);
            }
            w.write_record(&header).map_err(csv_err)?;
            for row in &table.rows {
                let mut rec = vec![row.label.clone()];
                for cell in &row.cells {
                    rec.extend([
                        format!("{:.6}", cell.value),
                        cell.bold.to_string(),
                        cell.underline.to_string(),
                        cell.flag.clone().unwrap_or_default(),
                    ]);
                }
                w.write_record(&rec).map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
            String::from_utf8(bytes).map_err(|e| Error::Data(format!("csv: {e}")))
        }
        Format::Json => Ok(serde_json::to_string_pretty(table)? + "\n"),
    }
}
