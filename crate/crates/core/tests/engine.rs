#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::HashMap;

use common::rng;
use rand::SeedableRng;
use sdb_core::bridge::{AnalyticScore, Direction, NoiseSchedule, ScoreModel};
use sdb_core::denoiser::{DenoiserConfig, TimeEmbedding};
use sdb_core::diffcore::Tensor;
use sdb_core::engine::{
    evaluate, evaluate_with, train, train_on, translate, translate_with, BridgePair, RunConfig,
    TrainingLog,
};
use sdb_core::metrics::ClassifierConfig;
use sdb_core::objectives::{wta_select, CapacityLedger, LossBreakdown, ObjectiveConfig};
use sdb_core::synthgen::GeneratorConfig;
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
        n_train: 96,
        n_test: 64,
        epochs: 1,
        batch_size: 32,
        ..Default::default()
    }
}

#[test]
fn zero_epochs_return_the_initial_pair() {
    let cfg = RunConfig { epochs: 0, ..tiny() };
    let (pair, log) = train(&cfg).unwrap();
    assert_eq!(pair, BridgePair::init(cfg.denoiser, cfg.schedule().unwrap(), cfg.init_seed).unwrap());
    assert!(log.rows.is_empty());
}

#[test]
fn dsm_only_training_logs_only_dsm() {
    let mut cfg = tiny();
    cfg.objective.lambda_end = 0.0;
    cfg.objective.lambda_traj = 0.0;
    cfg.objective.lambda_pair = 0.0;
    let (_, log) = train(&cfg).unwrap();
    assert_eq!(log.rows.len(), 3);
    for row in &log.rows {
        assert!(row.dsm > 0.0);
        assert_eq!((row.cyc_end, row.cyc_traj, row.pair), (0.0, 0.0, 0.0));
        assert_eq!(row.total, row.dsm);
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = RunConfig { rho: 0.5, ..tiny() };
    let (pa, la) = train(&cfg).unwrap();
    let (pb, lb) = train(&cfg).unwrap();
    assert_eq!(pa, pb);
    assert_eq!(la.to_csv(), lb.to_csv());
    let (pc, _) = train(&cfg.clone().with_seed(1)).unwrap();
    assert_ne!(pa, pc);
}

#[test]
fn training_log_csv_layout() {
    let (_, log) = train(&tiny()).unwrap();
    let csv = log.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), LossBreakdown::CSV_HEADER);
    assert_eq!(lines.count(), log.rows.len());
    assert_eq!(log.iter_seconds.len(), log.rows.len());
}

#[test]
fn median_iteration_time() {
    let log = TrainingLog { rows: vec![], iter_seconds: vec![9.0, 1.0, 3.0, 2.0, 4.0] };
    assert_eq!(log.median_iter_seconds(1, 3), Some(2.0));
    assert_eq!(log.median_iter_seconds(1, 10), Some(2.5));
    assert_eq!(log.median_iter_seconds(5, 10), None);
}

#[test]
fn exploding_updates_are_training_errors() {
    let cfg = RunConfig { learning_rate: 1e150, epochs: 3, ..tiny() };
    match train(&cfg) {
        Err(Error::Training { iter }) => assert!(iter >= 1, "{iter}"),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        RunConfig { rho: 1.5, ..tiny() },
        RunConfig { batch_size: 0, ..tiny() },
        RunConfig { sigma_max: 0.001, ..tiny() },
        RunConfig { generator: GeneratorConfig { dim: 3, ..Default::default() }, ..tiny() },
    ] {
        assert!(matches!(train(&bad), Err(Error::Config(_))));
    }
}

#[test]
fn checkpoints_round_trip() {
    let (pair, _) = train(&tiny()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    pair.save(dir.path()).unwrap();
    assert_eq!(BridgePair::load(dir.path()).unwrap(), pair);
}

#[test]
fn translate_is_deterministic_and_matches_the_generic_path() {
    let (pair, _) = train(&tiny()).unwrap();
    let src = common::random_tensor(&[10, 2], &mut rng(1));
    let a = translate(&pair, Direction::SrcToTgt, &src, 40, &mut rng(2)).unwrap();
    let b = translate(&pair, Direction::SrcToTgt, &src, 40, &mut rng(2)).unwrap();
    assert_eq!(a, b);
    let c = translate_with(&pair.net(Direction::SrcToTgt), &pair.schedule, Direction::SrcToTgt, &src, 40, &mut rng(2)).unwrap();
    assert_eq!(a, c);
}

#[test]
fn analytic_substitution_reaches_the_point_mass() {
    let s = NoiseSchedule::default();
    let target = vec![-1.0, 2.0];
    let oracle = AnalyticScore::PointMass { target: target.clone(), schedule: s };
    let out = translate_with(&oracle, &s, Direction::SrcToTgt, &Tensor::zeros(&[1000, 2]), 40, &mut rng(3)).unwrap();
    let hits = (0..1000)
        .filter(|&r| {
            let d: f64 = out.row(r).iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum();
            d.sqrt() <= 3.0 * s.sigma_min
        })
        .count();
    assert!(hits >= 990, "{hits}");
}

/// Pulls every state toward the recorded partner of its condition.
struct Lookup {
    partner: HashMap<(u64, u64), Vec<f64>>,
    schedule: NoiseSchedule,
}

impl ScoreModel for Lookup {
    fn score(&self, z: &Tensor, y: &Tensor, t: &[f64]) -> sdb_core::Result<Tensor> {
        let mut out = Vec::with_capacity(z.len());
        for r in 0..z.rows() {
            let key = (y.row(r)[0].to_bits(), y.row(r)[1].to_bits());
            let target = self.partner.get(&key).cloned().unwrap_or_else(|| y.row(r).to_vec());
            let s2 = self.schedule.sigma(t[r])?.powi(2);
            out.extend(z.row(r).iter().zip(&target).map(|(a, b)| (b - a) / s2));
        }
        Tensor::new(z.shape().to_vec(), out)
    }
}

#[test]
fn oracle_pipeline_on_a_degenerate_task() {
    let cfg = RunConfig {
        generator: GeneratorConfig { noise_std: 0.0, ..Default::default() },
        sigma_min: 1e-9,
        sigma_max: 1e-3,
        n_test: 1000,
        ..tiny()
    };
    let spec = cfg.generator_spec().unwrap();
    let test = cfg.test_data(&spec).unwrap();
    let clf = cfg.classifier(&spec, &ClassifierConfig::default()).unwrap();
    let key = |v: &[f64]| (v[0].to_bits(), v[1].to_bits());
    let fwd = Lookup {
        partner: test.samples.iter().map(|s| (key(&s.z_src), s.z_tgt.clone())).collect(),
        schedule: cfg.schedule().unwrap(),
    };
    let s = cfg.schedule().unwrap();
    let mut rng_probe = rng(0);
    let probe = translate_with(&fwd, &s, Direction::SrcToTgt, &Tensor::from_rows(&[test.samples[0].z_src.clone()]).unwrap(), 40, &mut rng_probe).unwrap();
    // the round trip keys on translated states, so index the exact sampler outputs
    let mut bwd_partner = HashMap::new();
    let mut eval_rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.eval_seed);
    let src = Tensor::from_rows(&test.samples.iter().map(|s| s.z_src.clone()).collect::<Vec<_>>()).unwrap();
    let fwd_out = translate_with(&fwd, &s, Direction::SrcToTgt, &src, 40, &mut eval_rng).unwrap();
    for (r, sample) in test.samples.iter().enumerate() {
        bwd_partner.insert(key(fwd_out.row(r)), sample.z_src.clone());
    }
    let bwd = Lookup { partner: bwd_partner, schedule: s };
    let report = evaluate_with(&fwd, &bwd, &s, &test, &clf, cfg.eval_seed, 40).unwrap();
    assert!(
        probe.row(0).iter().zip(&test.samples[0].z_tgt).all(|(a, b)| (a - b).abs() < 1e-6),
        "{:?} vs {:?}",
        probe.row(0),
        test.samples[0].z_tgt
    );
    assert!(report.content_acc >= 0.95, "{}", report.content_acc);
    assert!(report.cycle_mse < 1e-10, "{}", report.cycle_mse);
    assert!(report.swd < 1e-6);
}

#[test]
fn untrained_pair_is_at_chance_and_evaluation_is_repeatable() {
    let cfg = RunConfig { n_test: 3000, ..tiny() };
    let spec = cfg.generator_spec().unwrap();
    let test = cfg.test_data(&spec).unwrap();
    let clf = cfg.classifier(&spec, &ClassifierConfig::default()).unwrap();
    let pair = BridgePair::init(cfg.denoiser, cfg.schedule().unwrap(), 0).unwrap();
    let a = evaluate(&pair, &test, &clf, 7, 40).unwrap();
    let b = evaluate(&pair, &test, &clf, 7, 40).unwrap();
    assert_eq!(a, b);
    // class means of the two endpoints share angular slots, so noise alone keeps some content
    assert!(a.content_acc < 0.5, "{}", a.content_acc);
    assert_eq!(a.sample_count, 3000);
    assert_eq!(a.seed, 7);
}

#[test]
fn trained_bridge_prefers_the_true_condition_over_far_candidates() {
    let cfg = RunConfig {
        rho: 1.0,
        epochs: 4,
        objective: ObjectiveConfig {
            lambda_end: 0.0,
            lambda_traj: 0.0,
            use_unpaired: false,
            ..Default::default()
        },
        ..Default::default()
    };
    let spec = cfg.generator_spec().unwrap();
    let data = cfg.training_data(&spec).unwrap();
    let (pair, _) = train_on(&cfg, &data).unwrap();
    let net = pair.net(Direction::SrcToTgt);
    let probe = cfg.test_data(&spec).unwrap();
    let k = spec.config.content_count;
    let mut hits = 0;
    let trials = 200;
    let mut r = rng(11);
    for i in 0..trials {
        let s = &probe.samples[i];
        let far_class = (s.content + k / 2) % k;
        let far: Vec<&Vec<f64>> = probe.samples.iter().filter(|p| p.content == far_class).map(|p| &p.z_src).collect();
        let mut cands = vec![(0usize, s.z_src.clone())];
        for j in 0..7 {
            cands.push((j + 1, far[(i * 7 + j) % far.len()].clone()));
        }
        let mut ledger = CapacityLedger::new(8, None);
        let (winner, _) = wta_select(&net, &s.z_tgt, &cands, &mut ledger, &pair.schedule, &cfg.objective, &mut r).unwrap();
        hits += usize::from(winner == 0);
    }
    let rate = hits as f64 / trials as f64;
    assert!(rate > 0.5, "true condition chosen in {rate}");
}
