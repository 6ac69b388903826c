//! Continual-learning metrics: average accuracy, forgetting and learning-curve area.
//!
//! Tasks are 1-indexed throughout. `a(k, j)` is the test accuracy on task `j`
//! after finishing task `k`, defined for `1 <= j <= k`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    /// Builds a matrix from complete rows; row `k` must hold `k` entries.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the accuracies measured after the next task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let k = self.rows.len() + 1;
        if row.len() != k {
            return Err(Error::input(format!("row {k} must have {k} entries, got {}", row.len())));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!("accuracy {v} outside [0, 1] in row {k}")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, k: usize, j: usize) -> Option<f64> {
        if j == 0 || j > k {
            return None;
        }
        self.rows.get(k.checked_sub(1)?)?.get(j - 1).copied()
    }

    pub fn row(&self, k: usize) -> Option<&[f64]> {
        self.rows.get(k.checked_sub(1)?).map(Vec::as_slice)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Square CSV with a `after_task,task_1,...,task_T` header; cells above
    /// the diagonal are left empty.
    pub fn to_csv(&self) -> String {
        let t = self.rows.len();
        let mut out = String::from("after_task");
        for j in 1..=t {
            write!(out, ",task_{j}").unwrap();
        }
        out.push('\n');
        for (k, row) in self.rows.iter().enumerate() {
            write!(out, "{}", k + 1).unwrap();
            for j in 0..t {
                match row.get(j) {
                    Some(v) => write!(out, ",{v}").unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::input("empty accuracy matrix file"))?;
        if !header.starts_with("after_task") {
            return Err(Error::input(format!("unexpected header {header:?}")));
        }
        let mut m = AccuracyMatrix::new();
        for (k, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            let row = cells
                .iter()
                .skip(1)
                .take(k + 1)
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::input(format!("row {}: {e}", k + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            m.push_row(row)?;
        }
        Ok(m)
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-task accuracy traces on the task being learned, measured before any
/// update and after each of the first mini-batches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningCurve {
    traces: Vec<Vec<f64>>,
}

impl LearningCurve {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_traces(traces: Vec<Vec<f64>>) -> Result<Self> {
        let mut c = LearningCurve::new();
        for t in traces {
            c.push_trace(t)?;
        }
        Ok(c)
    }

    pub fn push_trace(&mut self, trace: Vec<f64>) -> Result<()> {
        if let Some(v) = trace.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!("accuracy {v} outside [0, 1] in learning curve")));
        }
        self.traces.push(trace);
        Ok(())
    }

    pub fn traces(&self) -> &[Vec<f64>] {
        &self.traces
    }

    /// `Z_b` for `b = 0..=beta`: the trace values averaged over tasks.
    pub fn averaged(&self, beta: usize) -> Result<Vec<f64>> {
        if self.traces.is_empty() {
            return Err(Error::input("learning curve has no traces"));
        }
        if let Some(short) = self.traces.iter().find(|t| t.len() < beta + 1) {
            return Err(Error::input(format!(
                "learning curve has {} points, need {} for beta = {beta}",
                short.len(),
                beta + 1
            )));
        }
        let n = self.traces.len() as f64;
        Ok((0..=beta)
            .map(|b| self.traces.iter().map(|t| t[b]).sum::<f64>() / n)
            .collect())
    }
}

fn check_row(m: &AccuracyMatrix, t: usize) -> Result<&[f64]> {
    m.row(t)
        .ok_or_else(|| Error::input(format!("accuracy matrix has no row {t} ({} rows)", m.num_tasks())))
}

/// Mean accuracy over tasks `1..=t` after finishing task `t`.
pub fn average_accuracy(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    let row = check_row(m, t)?;
    Ok(row.iter().sum::<f64>() / t as f64)
}

/// Forgetting after task `t`: returns `(mean, worst)` of
/// `f_j = max_{l < t} a(l, j) - a(t, j)` over `j < t`.
pub fn forgetting(m: &AccuracyMatrix, t: usize) -> Result<(f64, f64)> {
    if t < 2 {
        return Err(Error::input(format!("forgetting needs at least two tasks, got {t}")));
    }
    let last = check_row(m, t)?;
    let f: Vec<f64> = (1..t)
        .map(|j| {
            let best = (j..t).filter_map(|l| m.get(l, j)).fold(f64::NEG_INFINITY, f64::max);
            best - last[j - 1]
        })
        .collect();
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let worst = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((mean, worst))
}

/// Learning-curve area `(1 / (beta + 1)) * sum_{b=0}^{beta} Z_b`.
pub fn lca(curve: &LearningCurve, beta: usize) -> Result<f64> {
    let z = curve.averaged(beta)?;
    Ok(z.iter().sum::<f64>() / (beta + 1) as f64)
}

/// One row of the per-prefix summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub tasks_seen: usize,
    pub average_accuracy: f64,
    pub forgetting: Option<f64>,
    pub worst_forgetting: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str = "tasks_seen,average_accuracy,forgetting,worst_forgetting,lca";

/// Average accuracy and forgetting after every task.
pub fn summarize(m: &AccuracyMatrix) -> Result<Vec<MetricsRow>> {
    (1..=m.num_tasks())
        .map(|t| {
            let (f, w) = if t >= 2 {
                let (f, w) = forgetting(m, t)?;
                (Some(f), Some(w))
            } else {
                (None, None)
            };
            Ok(MetricsRow {
                tasks_seen: t,
                average_accuracy: average_accuracy(m, t)?,
                forgetting: f,
                worst_forgetting: w,
            })
        })
        .collect()
}

/// Summary table; the LCA column holds the area over all tasks seen so far,
/// empty when it cannot be computed.
pub fn metrics_csv(m: &AccuracyMatrix, curve: &LearningCurve, beta: usize) -> Result<String> {
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in summarize(m)? {
        let prefix = LearningCurve {
            traces: curve.traces.iter().take(row.tasks_seen).cloned().collect(),
        };
        let area = lca(&prefix, beta).ok();
        writeln!(
            out,
            "{},{},{},{},{}",
            row.tasks_seen,
            row.average_accuracy,
            opt(row.forgetting),
            opt(row.worst_forgetting),
            opt(area)
        )
        .unwrap();
    }
    Ok(out)
}
