//! Experiment grids and raw result rows.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::engine::{run_cell, RunConfig};
use crate::error::{Error, Result};
use crate::harness::config::{format_capacity, parse_capacity};
use crate::metrics::{ClassifierConfig, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    MmOnly,
    PlusEnd,
    PlusTraj,
    PairedOnly,
    SemiPaired,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::MmOnly,
        Method::PlusEnd,
        Method::PlusTraj,
        Method::PairedOnly,
        Method::SemiPaired,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::MmOnly => "mm-only",
            Method::PlusEnd => "mm+end",
            Method::PlusTraj => "mm+traj",
            Method::PairedOnly => "paired-only",
            Method::SemiPaired => "semi-paired",
        }
    }

    /// Derives this method's run from `base` by toggling loss weights and routing.
    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        let o = &mut c.objective;
        o.use_unpaired = true;
        match self {
            Method::MmOnly => (o.lambda_end, o.lambda_traj, o.lambda_pair) = (0.0, 0.0, 0.0),
            Method::PlusEnd => (o.lambda_traj, o.lambda_pair) = (0.0, 0.0),
            Method::PlusTraj => o.lambda_pair = 0.0,
            Method::PairedOnly => {
                (o.lambda_end, o.lambda_traj) = (0.0, 0.0);
                o.use_unpaired = false;
            }
            Method::SemiPaired => {}
        }
        c
    }

    /// Paired-only has nothing to train on without pairs.
    pub fn applicable(self, rho: f64) -> bool {
        !(self == Method::PairedOnly && rho == 0.0)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepKind {
    Rho,
    Modes,
    Capacity,
    Candidates,
    Ablation,
}

impl SweepKind {
    pub fn tag(self) -> &'static str {
        match self {
            SweepKind::Rho => "rho",
            SweepKind::Modes => "modes",
            SweepKind::Capacity => "capacity",
            SweepKind::Candidates => "candidates",
            SweepKind::Ablation => "ablation",
        }
    }

    /// Grid values used when none are given. The `K_c = 1000` mode cell is opt-in.
    pub fn default_values(self, include_large: bool) -> Vec<String> {
        let v: &[&str] = match self {
            SweepKind::Rho => &["0", "0.1", "0.5", "1"],
            SweepKind::Modes if include_large => &["6", "20", "100", "1000"],
            SweepKind::Modes => &["6", "20", "100"],
            SweepKind::Capacity => &["1", "2", "4", "8", "16", "inf"],
            SweepKind::Candidates => &["1", "2", "4", "8", "16"],
            SweepKind::Ablation => &["base"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Methods run in every cell.
    pub fn methods(self) -> Vec<Method> {
        match self {
            SweepKind::Rho | SweepKind::Ablation => Method::ALL.to_vec(),
            SweepKind::Modes => vec![Method::MmOnly, Method::SemiPaired],
            SweepKind::Capacity | SweepKind::Candidates => vec![Method::SemiPaired],
        }
    }

    /// Applies a cell value to the base configuration.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut c = base.clone();
        let bad = || Error::Config(format!("invalid {} cell `{value}`", self.tag()));
        match self {
            SweepKind::Rho => c.rho = value.parse().map_err(|_| bad())?,
            SweepKind::Modes => c.generator.content_count = value.parse().map_err(|_| bad())?,
            SweepKind::Capacity => c.objective.capacity = parse_capacity(value)?,
            SweepKind::Candidates => c.objective.wta_candidates = value.parse().map_err(|_| bad())?,
            SweepKind::Ablation => {}
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SweepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            SweepKind::Rho,
            SweepKind::Modes,
            SweepKind::Capacity,
            SweepKind::Candidates,
            SweepKind::Ablation,
        ]
        .into_iter()
        .find(|k| k.tag() == s)
        .ok_or_else(|| Error::Config(format!("unknown sweep kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub values: Vec<String>,
    pub seeds: usize,
    pub base: RunConfig,
    /// Restricts the methods run per cell; `None` uses the kind's default.
    pub methods: Option<Vec<Method>>,
}

impl SweepSpec {
    pub fn new(kind: SweepKind, base: RunConfig) -> Self {
        SweepSpec {
            kind,
            values: kind.default_values(false),
            seeds: 3,
            base,
            methods: None,
        }
    }

    pub fn methods(&self) -> Vec<Method> {
        self.methods.clone().unwrap_or_else(|| self.kind.methods())
    }

    /// Every (cell, method, seed) job in output order.
    pub fn jobs(&self) -> Vec<(String, Method, u64)> {
        let mut out = Vec::new();
        for v in &self.values {
            for m in self.methods() {
                for s in 0..self.seeds as u64 {
                    out.push((v.clone(), m, s));
                }
            }
        }
        out
    }
}

/// One raw result line. Metrics are absent for skipped cells; the timing
/// column is filled only by timing sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub sweep: String,
    pub cell: String,
    pub method: String,
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub iter_time_s: Option<f64>,
}

pub const RESULTS_HEADER: &str = "sweep,cell,method,seed,swd,mmd2,content_acc,cycle_mse,iter_time_s";
const MISSING: &str = "NA";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| format!("{x:?}"))
}

fn parse_opt(field: &str) -> Result<Option<f64>> {
    if field == MISSING {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::Parse(format!("bad number `{field}`")))
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        let r = self.report;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.sweep,
            self.cell,
            self.method,
            self.seed,
            opt(r.map(|r| r.swd)),
            opt(r.map(|r| r.mmd2)),
            opt(r.map(|r| r.content_acc)),
            opt(r.map(|r| r.cycle_mse)),
            opt(self.iter_time_s)
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 9 {
            return Err(Error::Parse(format!("expected 9 fields in `{line}`")));
        }
        let seed = f[3].parse().map_err(|_| Error::Parse(format!("bad seed `{}`", f[3])))?;
        let metrics = [parse_opt(f[4])?, parse_opt(f[5])?, parse_opt(f[6])?, parse_opt(f[7])?];
        let report = match metrics {
            [Some(swd), Some(mmd2), Some(content_acc), Some(cycle_mse)] => Some(MetricsReport {
                swd,
                mmd2,
                content_acc,
                cycle_mse,
                sample_count: 0,
                seed,
            }),
            [None, None, None, None] => None,
            _ => return Err(Error::Parse(format!("partially missing metrics in `{line}`"))),
        };
        Ok(ResultRow {
            sweep: f[0].to_string(),
            cell: f[1].to_string(),
            method: f[2].to_string(),
            seed,
            report,
            iter_time_s: parse_opt(f[8])?,
        })
    }
}

pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == RESULTS_HEADER => {}
        _ => return Err(Error::Parse("missing results header".into())),
    }
    lines.map(ResultRow::from_csv).collect()
}

/// Trains and evaluates one method on one cell and seed.
pub fn run_job(
    kind: SweepKind,
    base: &RunConfig,
    cell: &str,
    method: Method,
    seed: u64,
    classifier: &ClassifierConfig,
) -> Result<ResultRow> {
    let cell_cfg = kind.apply(base, cell)?;
    let mut row = ResultRow {
        sweep: kind.tag().to_string(),
        cell: cell.to_string(),
        method: method.tag().to_string(),
        seed,
        report: None,
        iter_time_s: None,
    };
    if !method.applicable(cell_cfg.rho) {
        return Ok(row);
    }
    let cfg = method.configure(&cell_cfg).with_seed(seed);
    let outcome = run_cell(&cfg, classifier)?;
    row.report = Some(outcome.report);
    if kind == SweepKind::Candidates {
        row.iter_time_s = outcome.log.median_iter_seconds(TIMING_WARMUP, TIMING_ITERS);
    }
    Ok(row)
}

pub const TIMING_WARMUP: usize = 10;
pub const TIMING_ITERS: usize = 50;

/// Runs every job of `spec`. Independent jobs share a pool of `workers`
/// threads; timing sweeps always run serially. Rows keep job order.
pub fn run_sweep(spec: &SweepSpec, classifier: &ClassifierConfig, workers: usize) -> Result<Vec<ResultRow>> {
    spec.base.validate()?;
    let jobs = spec.jobs();
    let workers = if spec.kind == SweepKind::Candidates { 1 } else { workers.max(1) };
    let run = |(cell, method, seed): &(String, Method, u64)| {
        run_job(spec.kind, &spec.base, cell, *method, *seed, classifier)
    };
    if workers == 1 {
        return jobs.iter().map(run).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ResultRow>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = run(&jobs[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// The five-method ablation for one cell over `seeds` seeds.
pub fn run_ablation(base: &RunConfig, seeds: usize, classifier: &ClassifierConfig) -> Result<Vec<ResultRow>> {
    let spec = SweepSpec {
        kind: SweepKind::Ablation,
        values: vec!["base".into()],
        seeds,
        base: base.clone(),
        methods: None,
    };
    run_sweep(&spec, classifier, 1)
}

/// Timing rows for each WTA candidate count, run serially.
pub fn run_wta_cost(
    base: &RunConfig,
    candidates: &[usize],
    seeds: usize,
    classifier: &ClassifierConfig,
) -> Result<Vec<ResultRow>> {
    let spec = SweepSpec {
        kind: SweepKind::Candidates,
        values: candidates.iter().map(|k| k.to_string()).collect(),
        seeds,
        base: base.clone(),
        methods: None,
    };
    run_sweep(&spec, classifier, 1)
}

/// Cell label for a capacity value.
pub fn capacity_cell(c: Option<usize>) -> String {
    format_capacity(c)
}
