//! Effect-estimation metrics and seed aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};

pub const DEFAULT_MAPE_FLOOR: f64 = 0.05;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(FusionError::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(FusionError::Empty("metric input"));
    }
    Ok(())
}

pub fn mse_tau(tau_hat: &[f64], tau_true: &[f64]) -> Result<f64> {
    check_lengths(tau_hat.len(), tau_true.len())?;
    Ok(tau_hat.iter().zip(tau_true).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / tau_hat.len() as f64)
}

/// Incremental-gains curve `u(k/n)` for `k = 0..=n` after a stable descending
/// sort on `tau_hat`.
pub fn uplift_curve(tau_hat: &[f64], t: &[usize], y: &[f64]) -> Result<Vec<f64>> {
    check_lengths(tau_hat.len(), t.len())?;
    check_lengths(tau_hat.len(), y.len())?;
    let n1 = t.iter().filter(|&&v| v == 1).count();
    let n0 = t.iter().filter(|&&v| v == 0).count();
    if n1 == 0 || n0 == 0 {
        return Err(FusionError::SingleArm);
    }
    if n0 + n1 != t.len() {
        let bad = *t.iter().find(|&&v| v > 1).expect("a non-binary arm exists");
        return Err(FusionError::InvalidTreatment { t: bad, n_arms: 2 });
    }
    let mut order: Vec<usize> = (0..tau_hat.len()).collect();
    order.sort_by(|&a, &b| tau_hat[b].total_cmp(&tau_hat[a]));
    let (mut s1, mut s0) = (0.0, 0.0);
    let mut curve = Vec::with_capacity(order.len() + 1);
    curve.push(0.0);
    for i in order {
        if t[i] == 1 {
            s1 += y[i];
        } else {
            s0 += y[i];
        }
        curve.push(s1 / n1 as f64 - s0 / n0 as f64);
    }
    Ok(curve)
}

/// Raw trapezoid area between the incremental-gains curve and the random
/// targeting diagonal. Unnormalized, so only comparable within one test set.
pub fn qini(tau_hat: &[f64], t: &[usize], y: &[f64]) -> Result<f64> {
    let curve = uplift_curve(tau_hat, t, y)?;
    let n = (curve.len() - 1) as f64;
    let total = curve[curve.len() - 1];
    let excess = |k: usize| curve[k] - (k as f64 / n) * total;
    Ok((1..curve.len()).map(|k| 0.5 * (excess(k - 1) + excess(k)) / n).sum())
}

/// Mean over true-effect deciles of `|mean tau_hat - mean tau| / max(|mean tau|, floor)`.
/// Rows are ranked by `(tau_true, tau_hat)`, so the value does not depend on row order.
pub fn mape(tau_hat: &[f64], tau_true: &[f64], floor: f64) -> Result<f64> {
    check_lengths(tau_hat.len(), tau_true.len())?;
    if !(floor > 0.0) {
        return Err(FusionError::InvalidConfig(format!(
            "MAPE floor must be positive, got {floor}"
        )));
    }
    let n = tau_true.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        tau_true[a]
            .total_cmp(&tau_true[b])
            .then(tau_hat[a].total_cmp(&tau_hat[b]))
    });
    let mut sums = [(0.0, 0.0, 0usize); 10];
    for (rank, &i) in order.iter().enumerate() {
        let d = rank * 10 / n;
        sums[d].0 += tau_hat[i];
        sums[d].1 += tau_true[i];
        sums[d].2 += 1;
    }
    let used: Vec<f64> = sums
        .iter()
        .filter(|s| s.2 > 0)
        .map(|&(h, t, c)| {
            let (mh, mt) = (h / c as f64, t / c as f64);
            (mh - mt).abs() / mt.abs().max(floor)
        })
        .collect();
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}

/// Evaluation of one method on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub overlap_dial: f64,
    pub seed: u64,
    pub qini: f64,
    pub mse_tau: f64,
    pub mape: f64,
    pub g_norm: f64,
    pub ipm: f64,
    pub marginal_tv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; `None` below two seeds.
    pub std: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std =
            (values.len() >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self { mean, std }
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.4}±{:.4}", self.mean, s),
            None => write!(f, "{:.4}", self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub overlap_dial: f64,
    pub n_seeds: usize,
    pub qini: Summary,
    pub mse_tau: Summary,
    pub mape: Summary,
    pub g_norm: Summary,
    pub ipm: Summary,
    pub marginal_tv: Summary,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub aggregates: Vec<AggregateRow>,
}

#[derive(Serialize)]
struct FlatAggregate<'a> {
    method: &'a str,
    overlap_dial: f64,
    n_seeds: usize,
    qini_mean: f64,
    qini_std: Option<f64>,
    mse_tau_mean: f64,
    mse_tau_std: Option<f64>,
    mape_mean: f64,
    mape_std: Option<f64>,
    g_norm_mean: f64,
    g_norm_std: Option<f64>,
    ipm_mean: f64,
    ipm_std: Option<f64>,
    marginal_tv_mean: f64,
    marginal_tv_std: Option<f64>,
    warning: &'a str,
}

/// Groups by `(method, dial)` in first-appearance order of the methods and
/// ascending dial.
pub fn aggregate(rows: &[MetricRow]) -> MetricsReport {
    let mut method_order: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(usize, u64), Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        let m = match method_order.iter().position(|&m| m == r.method) {
            Some(i) => i,
            None => {
                method_order.push(&r.method);
                method_order.len() - 1
            }
        };
        // total order on dials via their bit pattern; dials are nonnegative
        cells.entry((m, r.overlap_dial.to_bits())).or_default().push(r);
    }
    let aggregates = cells
        .into_values()
        .map(|cell| {
            let col = |f: fn(&MetricRow) -> f64| Summary::of(&cell.iter().map(|r| f(r)).collect::<Vec<_>>());
            let n = cell.len();
            AggregateRow {
                method: cell[0].method.clone(),
                overlap_dial: cell[0].overlap_dial,
                n_seeds: n,
                qini: col(|r| r.qini),
                mse_tau: col(|r| r.mse_tau),
                mape: col(|r| r.mape),
                g_norm: col(|r| r.g_norm),
                ipm: col(|r| r.ipm),
                marginal_tv: col(|r| r.marginal_tv),
                warning: (n < 2).then(|| format!("only {n} seed; std omitted")),
            }
        })
        .collect();
    MetricsReport {
        rows: rows.to_vec(),
        aggregates,
    }
}

/// Metric shown in a table column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableColumn {
    Qini,
    Mse,
    Mape,
    GNorm,
    Ipm,
}

impl TableColumn {
    pub const QINI_MSE: [TableColumn; 2] = [TableColumn::Qini, TableColumn::Mse];
    pub const SEVERE: [TableColumn; 3] = [TableColumn::Mse, TableColumn::GNorm, TableColumn::Ipm];

    fn label(self) -> &'static str {
        match self {
            TableColumn::Qini => "qini",
            TableColumn::Mse => "mse",
            TableColumn::Mape => "mape",
            TableColumn::GNorm => "g_norm",
            TableColumn::Ipm => "ipm",
        }
    }

    fn of(self, a: &AggregateRow) -> &Summary {
        match self {
            TableColumn::Qini => &a.qini,
            TableColumn::Mse => &a.mse_tau,
            TableColumn::Mape => &a.mape,
            TableColumn::GNorm => &a.g_norm,
            TableColumn::Ipm => &a.ipm,
        }
    }
}

fn dial_label(dial: f64) -> String {
    match dial {
        d if d == 0.0 => "minimal_overlap".into(),
        d if d == 0.5 => "moderate_overlap".into(),
        d if d == 1.0 => "large_overlap".into(),
        d => format!("dial_{d}"),
    }
}

impl MetricsReport {
    pub fn write_rows_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for a in &self.aggregates {
            w.serialize(FlatAggregate {
                method: &a.method,
                overlap_dial: a.overlap_dial,
                n_seeds: a.n_seeds,
                qini_mean: a.qini.mean,
                qini_std: a.qini.std,
                mse_tau_mean: a.mse_tau.mean,
                mse_tau_std: a.mse_tau.std,
                mape_mean: a.mape.mean,
                mape_std: a.mape.std,
                g_norm_mean: a.g_norm.mean,
                g_norm_std: a.g_norm.std,
                ipm_mean: a.ipm.mean,
                ipm_std: a.ipm.std,
                marginal_tv_mean: a.marginal_tv.mean,
                marginal_tv_std: a.marginal_tv.std,
                warning: a.warning.as_deref().unwrap_or(""),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per method, a Qini and an MSE column per dial, dials descending.
    pub fn format_table(&self) -> String {
        self.format_table_with(&TableColumn::QINI_MSE)
    }

    /// One row per method and one `mean±std` column per `(dial, metric)`.
    pub fn format_table_with(&self, columns: &[TableColumn]) -> String {
        let mut dials: Vec<f64> = self.aggregates.iter().map(|a| a.overlap_dial).collect();
        dials.sort_by(|a, b| b.total_cmp(a));
        dials.dedup();
        let mut methods: Vec<&str> = Vec::new();
        for a in &self.aggregates {
            if !methods.contains(&a.method.as_str()) {
                methods.push(&a.method);
            }
        }
        let mut header = vec!["method".to_string()];
        for &d in &dials {
            let l = dial_label(d);
            for c in columns {
                header.push(format!("{l} {}", c.label()));
            }
        }
        let mut body: Vec<Vec<String>> = Vec::new();
        for m in &methods {
            let mut line = vec![m.to_string()];
            for &d in &dials {
                match self.aggregates.iter().find(|a| a.method == *m && a.overlap_dial == d) {
                    Some(a) => line.extend(columns.iter().map(|c| c.of(a).to_string())),
                    None => line.extend(columns.iter().map(|_| "-".to_string())),
                }
            }
            body.push(line);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|j| {
                body.iter()
                    .map(|l| l[j].chars().count())
                    .chain([header[j].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for line in std::iter::once(&header).chain(body.iter()) {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c:<w$}", w = w))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse_tau(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert_eq!(mse_tau(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 4.0);
        assert!(matches!(
            mse_tau(&[1.0], &[1.0, 2.0]),
            Err(FusionError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn qini_hand_instance() {
        // ranking: row0 (t1,y1), row1 (t0,y0), row2 (t1,y0), row3 (t0,y1)
        let tau = [4.0, 3.0, 2.0, 1.0];
        let t = [1, 0, 1, 0];
        let y = [1.0, 0.0, 0.0, 1.0];
        // u = [0, .5, .5, .5, 0]; diagonal is zero since u(1) = 0
        let q = qini(&tau, &t, &y).unwrap();
        assert!((q - 0.375).abs() < 1e-15, "{q}");
        let rev: Vec<f64> = tau.iter().map(|v| -v).collect();
        assert!((qini(&rev, &t, &y).unwrap() + 0.375).abs() < 1e-15);
    }

    #[test]
    fn qini_ties_keep_input_order() {
        let t = [1, 0, 1, 0];
        let y = [1.0, 0.0, 0.0, 1.0];
        let flat = qini(&[0.0; 4], &t, &y).unwrap();
        let ordered = qini(&[4.0, 3.0, 2.0, 1.0], &t, &y).unwrap();
        assert_eq!(flat, ordered);
    }

    #[test]
    fn qini_single_arm_rejected() {
        assert!(matches!(
            qini(&[1.0, 2.0], &[1, 1], &[0.0, 1.0]),
            Err(FusionError::SingleArm)
        ));
    }

    #[test]
    fn mape_scaling() {
        let tau: Vec<f64> = (1..=40).map(|i| i as f64 / 4.0).collect();
        let doubled: Vec<f64> = tau.iter().map(|v| 2.0 * v).collect();
        assert!((mape(&doubled, &tau, 0.05).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(mape(&tau, &tau, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn aggregate_two_rows() {
        let row = |seed, qini| MetricRow {
            method: "pd".into(),
            overlap_dial: 0.0,
            seed,
            qini,
            mse_tau: 1.0,
            mape: 0.0,
            g_norm: 0.0,
            ipm: 0.0,
            marginal_tv: 0.0,
        };
        let rep = aggregate(&[row(0, 0.0), row(1, 1.0)]);
        let a = &rep.aggregates[0];
        assert_eq!(a.qini.mean, 0.5);
        assert!((a.qini.std.unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(a.mse_tau.std, Some(0.0));
        assert!(a.warning.is_none());

        let single = aggregate(&[row(0, 0.3)]);
        assert!(single.aggregates[0].qini.std.is_none());
        assert!(single.aggregates[0].warning.is_some());
    }

    #[test]
    fn table_has_dial_columns() {
        let row = |method: &str, dial| MetricRow {
            method: method.into(),
            overlap_dial: dial,
            seed: 0,
            qini: 0.1,
            mse_tau: 0.2,
            mape: 0.0,
            g_norm: 0.0,
            ipm: 0.0,
            marginal_tv: 0.0,
        };
        let rep = aggregate(&[row("pd", 0.0), row("pd", 1.0), row("t_learner", 0.0)]);
        let table = rep.format_table();
        let first = table.lines().next().unwrap();
        assert!(first.find("large_overlap").unwrap() < first.find("minimal_overlap").unwrap());
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().nth(2).unwrap().contains('-'));
    }
}
