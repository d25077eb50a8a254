//! Aggregation of raw result rows into mean ± std tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::harness::sweep::ResultRow;

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub sweep: String,
    pub cell: String,
    pub method: String,
    pub swd: Option<Stat>,
    pub mmd2: Option<Stat>,
    pub content_acc: Option<Stat>,
    pub cycle_mse: Option<Stat>,
    pub iter_time_s: Option<Stat>,
}

/// Groups rows by (sweep, cell, method) in first-appearance order.
pub fn aggregate(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.sweep.clone(), r.cell.clone(), r.method.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let metric = |f: fn(&ResultRow) -> Option<f64>| {
                Stat::of(&g.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            SummaryRow {
                swd: metric(|r| r.report.map(|m| m.swd)),
                mmd2: metric(|r| r.report.map(|m| m.mmd2)),
                content_acc: metric(|r| r.report.map(|m| m.content_acc)),
                cycle_mse: metric(|r| r.report.map(|m| m.cycle_mse)),
                iter_time_s: metric(|r| r.iter_time_s),
                sweep: key.0,
                cell: key.1,
                method: key.2,
            }
        })
        .collect()
}

/// Keeps the cells tabulated in the paper's ablation table (rho in {0, 0.5, 1}).
pub fn table_grid(rows: Vec<SummaryRow>) -> Vec<SummaryRow> {
    rows.into_iter()
        .filter(|r| {
            r.sweep != "rho"
                || r.cell
                    .parse::<f64>()
                    .is_ok_and(|v| [0.0, 0.5, 1.0].contains(&v))
        })
        .collect()
}

fn cell(s: Option<Stat>, digits: usize) -> String {
    match s {
        Some(s) => format!("{:.*} ± {:.*}", digits, s.mean, digits, s.std),
        None => "n/a".to_string(),
    }
}

/// Markdown tables, one per (sweep, cell) block.
pub fn render_markdown(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let mut current: Option<(&str, &str)> = None;
    for r in rows {
        if current != Some((&r.sweep, &r.cell)) {
            current = Some((&r.sweep, &r.cell));
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "### {} = {}\n", r.sweep, r.cell);
            out.push_str("| Method | SWD ↓ | MMD² ↓ | Content Acc. ↑ | Cycle MSE ↓ | s/iter |\n");
            out.push_str("|---|---|---|---|---|---|\n");
        }
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.method,
            cell(r.swd, 4),
            cell(r.mmd2, 6),
            cell(r.content_acc, 4),
            cell(r.cycle_mse, 4),
            cell(r.iter_time_s, 4)
        );
    }
    out
}

pub const SUMMARY_HEADER: &str = "sweep,cell,method,n,swd_mean,swd_std,mmd2_mean,mmd2_std,content_acc_mean,content_acc_std,cycle_mse_mean,cycle_mse_std,iter_time_s_mean,iter_time_s_std";

/// Machine-readable summary with full precision.
pub fn render_csv(rows: &[SummaryRow]) -> String {
    let f = |s: Option<Stat>| match s {
        Some(s) => format!("{:?},{:?}", s.mean, s.std),
        None => "NA,NA".to_string(),
    };
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let n = r.content_acc.map_or(0, |s| s.n);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.sweep,
            r.cell,
            r.method,
            n,
            f(r.swd),
            f(r.mmd2),
            f(r.content_acc),
            f(r.cycle_mse),
            f(r.iter_time_s)
        );
    }
    out
}
