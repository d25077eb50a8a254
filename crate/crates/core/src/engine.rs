//! Training loop, translation and evaluation for a pair of directional bridges.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bridge::{sample_bridge, Direction, NoiseSchedule, ScoreModel};
use crate::denoiser::{DenoiserConfig, DenoiserParams, ScoreNet};
use crate::diffcore::{Adam, Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{
    content_accuracy, median_bandwidth, mmd2_rbf, paired_mse, random_projections, swd_with,
    train_content_classifier, ClassifierConfig, ContentClassifier, MetricsReport,
    DEFAULT_PROJECTIONS,
};
use crate::objectives::{
    total_loss, CapacityLedger, DirectionStep, LossBreakdown, ObjectiveConfig, TrainingSet,
};
use crate::synthgen::{assign_pairing, Dataset, GeneratorConfig, GeneratorSpec};

/// Everything that determines one run. All randomness flows from the seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub objective: ObjectiveConfig,
    pub denoiser: DenoiserConfig,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub data_seed: u64,
    pub init_seed: u64,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub inference_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            objective: ObjectiveConfig::default(),
            denoiser: DenoiserConfig::default(),
            sigma_min: 0.01,
            sigma_max: 5.0,
            rho: 0.0,
            n_train: 3000,
            n_test: 3000,
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            data_seed: 0,
            init_seed: 0,
            train_seed: 0,
            eval_seed: 0,
            inference_steps: 40,
        }
    }
}

const STREAM_TRAIN: u64 = 1;
const STREAM_PAIRING: u64 = 2;
const STREAM_TEST: u64 = 3;
const STREAM_CLASSIFIER: u64 = 4;
const STREAM_HELD_OUT: u64 = 5;

impl RunConfig {
    /// Same config with every run seed set to `seed`. The generator itself stays fixed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data_seed = seed;
        self.init_seed = seed;
        self.train_seed = seed;
        self.eval_seed = seed;
        self
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.sigma_min, self.sigma_max, self.inference_steps)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.objective.validate()?;
        self.denoiser.validate()?;
        if self.denoiser.dim != self.generator.dim {
            return Err(Error::Config(format!(
                "denoiser dimension {} differs from data dimension {}",
                self.denoiser.dim, self.generator.dim
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("paired fraction {} outside [0, 1]", self.rho)));
        }
        if self.n_train == 0 || self.n_test < 2 || self.batch_size == 0 {
            return Err(Error::Config("sample counts and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn stream(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.data_seed);
        rng.set_stream(stream);
        rng
    }

    pub fn generator_spec(&self) -> Result<GeneratorSpec> {
        GeneratorSpec::build(self.generator.clone())
    }

    /// Training split with `rho` of its samples flagged paired.
    pub fn training_data(&self, spec: &GeneratorSpec) -> Result<Dataset> {
        let samples = spec.sample(self.n_train, &mut self.stream(STREAM_TRAIN))?;
        assign_pairing(samples, self.rho, &mut self.stream(STREAM_PAIRING))
    }

    pub fn test_data(&self, spec: &GeneratorSpec) -> Result<Dataset> {
        let samples = spec.sample(self.n_test, &mut self.stream(STREAM_TEST))?;
        Ok(Dataset { samples, rho: 0.0 })
    }

    /// Content classifier fit on fresh clean target samples.
    pub fn classifier(&self, spec: &GeneratorSpec, config: &ClassifierConfig) -> Result<ContentClassifier> {
        let train = spec.sample(2 * self.n_test, &mut self.stream(STREAM_CLASSIFIER))?;
        let held = spec.sample(self.n_test, &mut self.stream(STREAM_HELD_OUT))?;
        let (tx, tl) = targets(&train)?;
        let (hx, hl) = targets(&held)?;
        let config = ClassifierConfig {
            seed: self.eval_seed,
            ..config.clone()
        };
        train_content_classifier(&tx, &tl, &hx, &hl, spec.config.content_count, &config)
    }
}

fn targets(samples: &[crate::synthgen::EndpointSample]) -> Result<(Tensor, Vec<usize>)> {
    let x = Tensor::from_rows(&samples.iter().map(|s| s.z_tgt.clone()).collect::<Vec<_>>())?;
    Ok((x, samples.iter().map(|s| s.content).collect()))
}

fn sources(data: &Dataset) -> Result<Tensor> {
    Tensor::from_rows(&data.samples.iter().map(|s| s.z_src.clone()).collect::<Vec<_>>())
}

/// The learned object: one score network per direction and their schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgePair {
    /// Conditions on the source endpoint and produces the target endpoint.
    pub forward: DenoiserParams,
    /// Conditions on the target endpoint and produces the source endpoint.
    pub backward: DenoiserParams,
    pub schedule: NoiseSchedule,
}

impl BridgePair {
    pub fn init(config: DenoiserConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        Ok(BridgePair {
            forward: DenoiserParams::init(config, seed.wrapping_mul(2))?,
            backward: DenoiserParams::init(config, seed.wrapping_mul(2).wrapping_add(1))?,
            schedule,
        })
    }

    pub fn params(&self, direction: Direction) -> &DenoiserParams {
        match direction {
            Direction::SrcToTgt => &self.forward,
            Direction::TgtToSrc => &self.backward,
        }
    }

    pub fn net(&self, direction: Direction) -> ScoreNet<'_> {
        ScoreNet {
            params: self.params(direction),
            schedule: &self.schedule,
        }
    }

    /// Writes `forward.ckpt`, `backward.ckpt` and `schedule.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.forward.save(&dir.join("forward.ckpt"))?;
        self.backward.save(&dir.join("backward.ckpt"))?;
        std::fs::write(dir.join("schedule.json"), serde_json::to_string_pretty(&self.schedule)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let schedule: NoiseSchedule = serde_json::from_str(&std::fs::read_to_string(dir.join("schedule.json"))?)?;
        let pair = BridgePair {
            forward: DenoiserParams::load(&dir.join("forward.ckpt"))?,
            backward: DenoiserParams::load(&dir.join("backward.ckpt"))?,
            schedule,
        };
        if pair.forward.config != pair.backward.config {
            return Err(Error::Parse("directional checkpoints disagree on architecture".into()));
        }
        Ok(pair)
    }
}

/// Per-iteration loss breakdown plus wall-clock timings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LossBreakdown>,
    /// Seconds spent on each iteration; not part of the CSV.
    pub iter_seconds: Vec<f64>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LossBreakdown::CSV_HEADER);
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&row.csv_row(i));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Median seconds per iteration after skipping `warmup`, over at most `count` iterations.
    pub fn median_iter_seconds(&self, warmup: usize, count: usize) -> Option<f64> {
        let mut t: Vec<f64> = self.iter_seconds.iter().skip(warmup).take(count).copied().collect();
        if t.is_empty() {
            return None;
        }
        t.sort_by(f64::total_cmp);
        let m = t.len() / 2;
        Some(if t.len() % 2 == 1 { t[m] } else { 0.5 * (t[m - 1] + t[m]) })
    }
}

/// Generates the configured training data and trains on it.
pub fn train(config: &RunConfig) -> Result<(BridgePair, TrainingLog)> {
    config.validate()?;
    let spec = config.generator_spec()?;
    let data = config.training_data(&spec)?;
    train_on(config, &data)
}

/// Optimises both bridges on `data`. The capacity ledgers are reset at every epoch.
pub fn train_on(config: &RunConfig, data: &Dataset) -> Result<(BridgePair, TrainingLog)> {
    config.validate()?;
    let schedule = config.schedule()?;
    let mut pair = BridgePair::init(config.denoiser, schedule, config.init_seed)?;
    let set = TrainingSet::from_dataset(data)?;
    if set.src.cols() != config.denoiser.dim {
        return Err(Error::Config("dataset dimension differs from the denoiser".into()));
    }
    let n = set.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.train_seed);
    let mut adam = [Adam::new(), Adam::new()];
    let mut ledgers = [
        CapacityLedger::new(n, config.objective.capacity),
        CapacityLedger::new(n, config.objective.capacity),
    ];
    let mut tape = Tape::new();
    let mut log = TrainingLog::default();
    let mut iter = 0;
    let mut orders: [Vec<usize>; 2] = [(0..n).collect(), (0..n).collect()];
    for _ in 0..config.epochs {
        ledgers.iter_mut().for_each(CapacityLedger::reset);
        orders.iter_mut().for_each(|o| o.shuffle(&mut rng));
        let batches = n.div_ceil(config.batch_size);
        for j in 0..batches {
            let started = Instant::now();
            let range = j * config.batch_size..((j + 1) * config.batch_size).min(n);
            tape.clear();
            let nodes_f = pair.forward.register(&mut tape, true);
            let nodes_b = pair.backward.register(&mut tape, true);
            let [ledger_f, ledger_b] = &mut ledgers;
            let steps = [
                DirectionStep {
                    direction: Direction::SrcToTgt,
                    params: &pair.forward,
                    nodes: &nodes_f,
                    rows: &orders[0][range.clone()],
                    ledger: ledger_f,
                },
                DirectionStep {
                    direction: Direction::TgtToSrc,
                    params: &pair.backward,
                    nodes: &nodes_b,
                    rows: &orders[1][range],
                    ledger: ledger_b,
                },
            ];
            let as_training = |e: Error| match e {
                Error::Numeric { .. } | Error::Divergence { .. } => Error::Training { iter },
                other => other,
            };
            let outcome = total_loss(&mut tape, &set, steps, iter, &schedule, &config.objective, &mut rng);
            let (loss, breakdown) = outcome.map_err(as_training)?;
            let Some(loss) = loss else {
                log.rows.push(breakdown);
                log.iter_seconds.push(started.elapsed().as_secs_f64());
                iter += 1;
                continue;
            };
            if !breakdown.total.is_finite() {
                return Err(Error::Training { iter });
            }
            let grads = tape.backward(loss).map_err(as_training)?;
            for (k, (params, nodes)) in [(&mut pair.forward, &nodes_f), (&mut pair.backward, &nodes_b)]
                .into_iter()
                .enumerate()
            {
                let g = nodes.iter().map(|&id| grads.get(id)).collect::<Result<Vec<_>>>()?;
                if g.iter().any(|t| !t.is_finite()) {
                    return Err(Error::Training { iter });
                }
                adam[k].step(&mut params.tensors_mut(), &g, config.learning_rate)?;
            }
            log.rows.push(breakdown);
            log.iter_seconds.push(started.elapsed().as_secs_f64());
            iter += 1;
        }
    }
    Ok((pair, log))
}

/// One sampler run of the chosen bridge conditioned on `source`; returns the terminal state.
pub fn translate<R: rand::Rng + ?Sized>(
    pair: &BridgePair,
    direction: Direction,
    source: &Tensor,
    n_steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    translate_with(&pair.net(direction), &pair.schedule, direction, source, n_steps, rng)
}

/// `translate` for any score model.
pub fn translate_with<M: ScoreModel + ?Sized, R: rand::Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    direction: Direction,
    source: &Tensor,
    n_steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let traj = sample_bridge(model, source, schedule, n_steps, direction, rng, false)?;
    Ok(traj.terminal().clone())
}

/// Translates every test source and computes all four metrics.
pub fn evaluate(
    pair: &BridgePair,
    test: &Dataset,
    classifier: &ContentClassifier,
    eval_seed: u64,
    n_steps: usize,
) -> Result<MetricsReport> {
    evaluate_with(
        &pair.net(Direction::SrcToTgt),
        &pair.net(Direction::TgtToSrc),
        &pair.schedule,
        test,
        classifier,
        eval_seed,
        n_steps,
    )
}

/// `evaluate` for an arbitrary pair of directional score models.
pub fn evaluate_with<F: ScoreModel + ?Sized, B: ScoreModel + ?Sized>(
    forward: &F,
    backward: &B,
    schedule: &NoiseSchedule,
    test: &Dataset,
    classifier: &ContentClassifier,
    eval_seed: u64,
    n_steps: usize,
) -> Result<MetricsReport> {
    if test.len() < 2 {
        return Err(Error::Config("evaluation needs at least two test samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let src = sources(test)?;
    let (tgt, _) = targets(&test.samples)?;
    let labels: Vec<usize> = test.samples.iter().map(|s| s.content).collect();
    let translated = translate_with(forward, schedule, Direction::SrcToTgt, &src, n_steps, &mut rng)?;
    let back = translate_with(backward, schedule, Direction::TgtToSrc, &translated, n_steps, &mut rng)?;
    let dirs = random_projections(DEFAULT_PROJECTIONS, src.cols(), &mut rng);
    let bandwidth = median_bandwidth(&translated, &tgt)?;
    Ok(MetricsReport {
        swd: swd_with(&translated, &tgt, &dirs)?,
        mmd2: mmd2_rbf(&translated, &tgt, bandwidth)?,
        content_acc: content_accuracy(classifier, &translated, &labels)?,
        cycle_mse: paired_mse(&back, &src)?,
        sample_count: test.len(),
        seed: eval_seed,
    })
}

/// Result of a full train-and-evaluate cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub report: MetricsReport,
    pub log: TrainingLog,
    pub pair: BridgePair,
}

/// Builds data, trains, fits the content classifier and evaluates.
pub fn run_cell(config: &RunConfig, classifier: &ClassifierConfig) -> Result<CellOutcome> {
    config.validate()?;
    let spec = config.generator_spec()?;
    let data = config.training_data(&spec)?;
    let test = config.test_data(&spec)?;
    let clf = config.classifier(&spec, classifier)?;
    let (pair, log) = train_on(config, &data)?;
    let report = evaluate(&pair, &test, &clf, config.eval_seed, config.inference_steps)?;
    Ok(CellOutcome { report, log, pair })
}
