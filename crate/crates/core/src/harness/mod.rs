//! Configuration files, experiment sweeps and result tables.

pub mod config;
pub mod report;
pub mod sweep;

pub use config::{apply_setting, load_config, parse_pairs, render_config};
pub use report::{aggregate, render_csv, render_markdown, table_grid, Stat, SummaryRow};
pub use sweep::{
    rows_from_csv, rows_to_csv, run_ablation, run_job, run_sweep, run_wta_cost, Method, ResultRow,
    SweepKind, SweepSpec, RESULTS_HEADER,
};
