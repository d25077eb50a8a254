use sdb_core::denoiser::{DenoiserConfig, TimeEmbedding};
use sdb_core::engine::RunConfig;
use sdb_core::harness::config::{format_capacity, parse_capacity};
use sdb_core::harness::report::SUMMARY_HEADER;
use sdb_core::harness::sweep::capacity_cell;
use sdb_core::harness::{
    aggregate, apply_setting, load_config, parse_pairs, render_config, render_csv, render_markdown,
    rows_from_csv, rows_to_csv, run_job, run_sweep, table_grid, Method, ResultRow, Stat, SweepKind,
    SweepSpec, RESULTS_HEADER,
};
use sdb_core::metrics::{ClassifierConfig, MetricsReport};
use sdb_core::objectives::{DsmWeighting, ObjectiveConfig};
use sdb_core::Error;

fn tiny() -> RunConfig {
    RunConfig {
        denoiser: DenoiserConfig {
            blocks: 1,
            d_model: 8,
            heads: 2,
            time: TimeEmbedding { dim: 4, base: 1e4 },
            ..Default::default()
        },
        objective: ObjectiveConfig { cycle_batch: 4, traj_steps: 4, ..Default::default() },
        n_train: 64,
        n_test: 48,
        epochs: 1,
        batch_size: 32,
        inference_steps: 10,
        ..Default::default()
    }
}

fn quick_classifier() -> ClassifierConfig {
    ClassifierConfig { epochs: 5, min_accuracy: None, ..Default::default() }
}

fn report(swd: f64, mmd2: f64, acc: f64, cyc: f64) -> MetricsReport {
    MetricsReport { swd, mmd2, content_acc: acc, cycle_mse: cyc, sample_count: 0, seed: 0 }
}

#[test]
fn pairs_skip_comments_and_blanks() {
    let text = "# header\n\nrho = 0.5  # half\n  epochs=3\n";
    let p = parse_pairs(text).unwrap();
    assert_eq!(p, vec![("rho".into(), "0.5".into()), ("epochs".into(), "3".into())]);
}

#[test]
fn malformed_pairs_are_config_errors() {
    assert!(matches!(parse_pairs("rho 0.5"), Err(Error::Config(_))));
    assert!(matches!(parse_pairs("rho ="), Err(Error::Config(_))));
    assert!(matches!(parse_pairs("= 1"), Err(Error::Config(_))));
}

#[test]
fn settings_reach_their_fields() {
    let mut c = RunConfig::default();
    apply_setting(&mut c, "dim", "3").unwrap();
    assert_eq!((c.generator.dim, c.denoiser.dim), (3, 3));
    apply_setting(&mut c, "capacity", "inf").unwrap();
    assert_eq!(c.objective.capacity, None);
    apply_setting(&mut c, "capacity", "4").unwrap();
    assert_eq!(c.objective.capacity, Some(4));
    apply_setting(&mut c, "dsm_weighting", "uniform").unwrap();
    assert_eq!(c.objective.weighting, DsmWeighting::Uniform);
    apply_setting(&mut c, "use_unpaired", "no").unwrap();
    assert!(!c.objective.use_unpaired);
    apply_setting(&mut c, "seed", "9").unwrap();
    assert_eq!((c.data_seed, c.init_seed, c.train_seed, c.eval_seed), (9, 9, 9, 9));
}

#[test]
fn bad_settings_are_rejected() {
    let mut c = RunConfig::default();
    assert!(matches!(apply_setting(&mut c, "nope", "1"), Err(Error::Config(_))));
    assert!(matches!(apply_setting(&mut c, "epochs", "x"), Err(Error::Config(_))));
    assert!(matches!(apply_setting(&mut c, "use_unpaired", "maybe"), Err(Error::Config(_))));
    assert!(matches!(apply_setting(&mut c, "dsm_weighting", "cubic"), Err(Error::Config(_))));
}

#[test]
fn overrides_apply_after_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "rho = 0.1\nepochs = 7\n").unwrap();
    let c = load_config(Some(&path), &[("rho".into(), "0.9".into())]).unwrap();
    assert_eq!((c.rho, c.epochs), (0.9, 7));
    let err = load_config(None, &[("rho".into(), "1.5".into())]);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn rendered_config_round_trips() {
    let mut c = tiny();
    c.rho = 0.25;
    c.objective.capacity = Some(3);
    c.objective.weighting = DsmWeighting::Uniform;
    c.learning_rate = 3.3e-4;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, render_config(&c)).unwrap();
    assert_eq!(load_config(Some(&path), &[]).unwrap(), c);
}

#[test]
fn capacity_text_forms() {
    for s in ["inf", "unlimited", "none", "∞"] {
        assert_eq!(parse_capacity(s).unwrap(), None);
    }
    assert_eq!(parse_capacity("16").unwrap(), Some(16));
    assert!(parse_capacity("-1").is_err());
    assert_eq!(format_capacity(None), "inf");
    assert_eq!(capacity_cell(Some(8)), "8");
}

#[test]
fn methods_toggle_the_expected_terms() {
    let base = RunConfig::default();
    let w = |m: Method| {
        let o = m.configure(&base).objective;
        (o.lambda_end > 0.0, o.lambda_traj > 0.0, o.lambda_pair > 0.0, o.use_unpaired)
    };
    assert_eq!(w(Method::MmOnly), (false, false, false, true));
    assert_eq!(w(Method::PlusEnd), (true, false, false, true));
    assert_eq!(w(Method::PlusTraj), (true, true, false, true));
    assert_eq!(w(Method::PairedOnly), (false, false, true, false));
    assert_eq!(w(Method::SemiPaired), (true, true, true, true));
    assert!(!Method::PairedOnly.applicable(0.0));
    assert!(Method::PairedOnly.applicable(0.1));
    assert!(Method::MmOnly.applicable(0.0));
}

#[test]
fn tags_parse_back() {
    for m in Method::ALL {
        assert_eq!(m.tag().parse::<Method>().unwrap(), m);
    }
    for k in [SweepKind::Rho, SweepKind::Modes, SweepKind::Capacity, SweepKind::Candidates, SweepKind::Ablation] {
        assert_eq!(k.tag().parse::<SweepKind>().unwrap(), k);
    }
    assert!(matches!("nope".parse::<Method>(), Err(Error::Config(_))));
    assert!(matches!("nope".parse::<SweepKind>(), Err(Error::Config(_))));
}

#[test]
fn sweep_grids_and_job_counts() {
    let spec = SweepSpec::new(SweepKind::Rho, RunConfig::default());
    assert_eq!(spec.jobs().len(), 60);
    assert_eq!(SweepSpec::new(SweepKind::Modes, RunConfig::default()).jobs().len(), 18);
    assert_eq!(SweepKind::Modes.default_values(true).last().unwrap(), "1000");
    assert_eq!(SweepSpec::new(SweepKind::Capacity, RunConfig::default()).jobs().len(), 18);
    assert_eq!(SweepSpec::new(SweepKind::Candidates, RunConfig::default()).jobs().len(), 15);
    assert_eq!(SweepSpec::new(SweepKind::Ablation, RunConfig::default()).jobs().len(), 15);
}

#[test]
fn cells_apply_and_validate() {
    let base = RunConfig::default();
    assert_eq!(SweepKind::Rho.apply(&base, "0.5").unwrap().rho, 0.5);
    assert_eq!(SweepKind::Modes.apply(&base, "20").unwrap().generator.content_count, 20);
    assert_eq!(SweepKind::Capacity.apply(&base, "inf").unwrap().objective.capacity, None);
    assert_eq!(SweepKind::Candidates.apply(&base, "8").unwrap().objective.wta_candidates, 8);
    assert!(matches!(SweepKind::Rho.apply(&base, "2"), Err(Error::Config(_))));
    assert!(matches!(SweepKind::Rho.apply(&base, "x"), Err(Error::Config(_))));
}

#[test]
fn paired_only_at_zero_rho_is_a_missing_row() {
    let row = run_job(SweepKind::Rho, &tiny(), "0", Method::PairedOnly, 0, &quick_classifier()).unwrap();
    assert_eq!(row.report, None);
    assert_eq!(row.to_csv(), "rho,0,paired-only,0,NA,NA,NA,NA,NA");
}

#[test]
fn result_rows_round_trip() {
    let rows = vec![
        ResultRow {
            sweep: "rho".into(),
            cell: "0.5".into(),
            method: "semi-paired".into(),
            seed: 2,
            report: Some(MetricsReport { seed: 2, ..report(0.1234567890123, 1e-7, 0.875, 2.5) }),
            iter_time_s: None,
        },
        ResultRow {
            sweep: "candidates".into(),
            cell: "4".into(),
            method: "semi-paired".into(),
            seed: 0,
            report: Some(report(0.3, -2e-5, 0.5, 1.0)),
            iter_time_s: Some(0.0125),
        },
        ResultRow {
            sweep: "rho".into(),
            cell: "0".into(),
            method: "paired-only".into(),
            seed: 1,
            report: None,
            iter_time_s: None,
        },
    ];
    let text = rows_to_csv(&rows);
    assert!(text.starts_with(RESULTS_HEADER));
    assert_eq!(rows_from_csv(&text).unwrap(), rows);
}

#[test]
fn malformed_result_rows_are_parse_errors() {
    assert!(matches!(rows_from_csv("a,b\n"), Err(Error::Parse(_))));
    let partial = format!("{RESULTS_HEADER}\nrho,0,mm-only,0,0.1,NA,0.5,1,NA\n");
    assert!(matches!(rows_from_csv(&partial), Err(Error::Parse(_))));
    let short = format!("{RESULTS_HEADER}\nrho,0,mm-only\n");
    assert!(matches!(rows_from_csv(&short), Err(Error::Parse(_))));
}

#[test]
fn stat_uses_the_sample_deviation() {
    let s = Stat::of(&[1.0, 2.0, 4.0]).unwrap();
    assert!((s.mean - 7.0 / 3.0).abs() < 1e-12);
    assert!((s.std - (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(Stat::of(&[5.0]).unwrap().std, 0.0);
    assert_eq!(Stat::of(&[]), None);
}

#[test]
fn aggregation_matches_brute_force() {
    let mut rows = Vec::new();
    let cells = ["0", "0.1", "0.5", "1"];
    for (ci, cell) in cells.iter().enumerate() {
        for m in [Method::MmOnly, Method::SemiPaired] {
            for seed in 0..3u64 {
                let v = (ci * 7 + seed as usize * 3 + m as usize) as f64 * 0.137;
                rows.push(ResultRow {
                    sweep: "rho".into(),
                    cell: cell.to_string(),
                    method: m.tag().into(),
                    seed,
                    report: Some(report(v, v * v, 1.0 / (1.0 + v), v.sin())),
                    iter_time_s: None,
                });
            }
        }
    }
    let summary = aggregate(&rows);
    assert_eq!(summary.len(), 8);
    for s in &summary {
        let group: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| r.cell == s.cell && r.method == s.method)
            .collect();
        let vals: Vec<f64> = group.iter().map(|r| r.report.unwrap().mmd2).collect();
        let mean = vals.iter().sum::<f64>() / 3.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
        let st = s.mmd2.unwrap();
        assert_eq!(st.n, 3);
        assert!((st.mean - mean).abs() < 1e-12);
        assert!((st.std - var.sqrt()).abs() < 1e-12);
        assert_eq!(s.iter_time_s, None);
    }
    assert_eq!((summary[0].cell.as_str(), summary[0].method.as_str()), ("0", "mm-only"));
    let kept: Vec<String> = table_grid(summary).iter().map(|s| s.cell.clone()).collect();
    assert!(!kept.contains(&"0.1".to_string()));
    assert_eq!(kept.len(), 6);
}

#[test]
fn missing_rows_aggregate_to_absent_stats() {
    let row = ResultRow {
        sweep: "rho".into(),
        cell: "0".into(),
        method: "paired-only".into(),
        seed: 0,
        report: None,
        iter_time_s: None,
    };
    let s = aggregate(&[row.clone(), ResultRow { seed: 1, ..row }]);
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].swd, None);
    assert!(render_markdown(&s).contains("| paired-only | n/a | n/a | n/a | n/a | n/a |"));
    assert!(render_csv(&s).lines().nth(1).unwrap().contains("NA,NA"));
}

#[test]
fn rendered_tables_have_expected_columns() {
    let row = ResultRow {
        sweep: "modes".into(),
        cell: "6".into(),
        method: "mm-only".into(),
        seed: 0,
        report: Some(report(0.5, 0.01, 0.9, 1.5)),
        iter_time_s: None,
    };
    let s = aggregate(&[row]);
    let md = render_markdown(&s);
    assert!(md.contains("### modes = 6"));
    assert!(md.contains("| Method | SWD ↓ | MMD² ↓ | Content Acc. ↑ | Cycle MSE ↓ | s/iter |"));
    assert!(md.contains("| mm-only | 0.5000 ± 0.0000 |"));
    let csv = render_csv(&s);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), SUMMARY_HEADER);
    assert_eq!(lines.next().unwrap().split(',').count(), SUMMARY_HEADER.split(',').count());
}

#[test]
fn sweeps_are_reproducible_and_worker_independent() {
    let spec = SweepSpec {
        kind: SweepKind::Rho,
        values: vec!["0".into(), "0.5".into()],
        seeds: 2,
        base: tiny(),
        methods: Some(vec![Method::PairedOnly, Method::SemiPaired]),
    };
    let clf = quick_classifier();
    let a = rows_to_csv(&run_sweep(&spec, &clf, 1).unwrap());
    let b = rows_to_csv(&run_sweep(&spec, &clf, 3).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 9);
    assert!(a.contains("rho,0,paired-only,1,NA,NA,NA,NA,NA"));
}

#[test]
fn timing_sweeps_fill_the_timing_column() {
    let mut base = tiny();
    base.n_train = 32;
    base.batch_size = 1;
    base.rho = 0.5;
    let row = run_job(SweepKind::Candidates, &base, "2", Method::SemiPaired, 0, &quick_classifier()).unwrap();
    assert!(row.iter_time_s.unwrap() > 0.0);
    assert!(row.report.is_some());
}
