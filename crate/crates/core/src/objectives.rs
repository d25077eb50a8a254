//! Loss terms: denoising score matching with winner-takes-all condition
//! selection under a capacity ledger, endpoint and trajectory cycle terms,
//! paired supervision, and their weighted sum.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::bridge::{
    initial_state, noise_variances, sample_bridge, variance_increments, Direction, NoiseSchedule, ScoreModel,
    Trajectory,
};
use crate::denoiser::{DenoiserParams, ScoreNet};
use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::synthgen::Dataset;

/// Per-sample weight applied to the squared score error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsmWeighting {
    Uniform,
    /// `sigma(t)^2`, which puts every noise level on the same scale.
    SigmaSquared,
}

impl DsmWeighting {
    pub fn weight(self, t: f64, schedule: &NoiseSchedule) -> Result<f64> {
        match self {
            DsmWeighting::Uniform => Ok(1.0),
            DsmWeighting::SigmaSquared => schedule.sigma(t).map(|s| s * s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda_end: f64,
    pub lambda_traj: f64,
    pub lambda_pair: f64,
    pub wta_candidates: usize,
    /// `None` means unlimited.
    pub capacity: Option<usize>,
    pub traj_steps: usize,
    pub eps_w: f64,
    pub t_min: f64,
    /// Rows per cycle-consistency rollout.
    pub cycle_batch: usize,
    pub weighting: DsmWeighting,
    /// When false, unpaired samples are dropped from the objective.
    pub use_unpaired: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda_end: 1.0,
            lambda_traj: 1.0,
            lambda_pair: 1.0,
            wta_candidates: 8,
            capacity: Some(2),
            traj_steps: 10,
            eps_w: 1e-4,
            t_min: 0.01,
            cycle_batch: 8,
            weighting: DsmWeighting::SigmaSquared,
            use_unpaired: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_end, self.lambda_traj, self.lambda_pair];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.wta_candidates == 0 || self.traj_steps == 0 || self.cycle_batch == 0 {
            return Err(Error::Config(
                "candidate count, trajectory steps and cycle batch must be positive".into(),
            ));
        }
        if self.capacity == Some(0) {
            return Err(Error::Config("capacity must be positive or unlimited".into()));
        }
        if !(self.eps_w > 0.0) {
            return Err(Error::Config("trajectory weight stabiliser must be positive".into()));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config(format!("t_min = {} outside (0, 1)", self.t_min)));
        }
        Ok(())
    }

    pub fn uses_cycle(&self) -> bool {
        self.lambda_end > 0.0 || self.lambda_traj > 0.0
    }
}

/// Outcome of one ledger-constrained selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    /// Position of the winner in the candidate list.
    pub index: usize,
    /// Every candidate was at capacity and the limit was ignored.
    pub saturated: bool,
}

/// Per-epoch win counts of conditioning samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityLedger {
    counts: Vec<usize>,
    limit: Option<usize>,
    saturation_events: usize,
}

impl CapacityLedger {
    pub fn new(n: usize, limit: Option<usize>) -> Self {
        CapacityLedger {
            counts: vec![0; n],
            limit,
            saturation_events: 0,
        }
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn limit(&self) -> Option<usize> {
        self.limit
    }

    pub fn count(&self, id: usize) -> usize {
        self.counts[id]
    }

    pub fn is_saturated(&self, id: usize) -> bool {
        self.limit.is_some_and(|l| self.counts[id] >= l)
    }

    /// Total fallbacks since construction.
    pub fn saturation_events(&self) -> usize {
        self.saturation_events
    }

    /// Picks the lowest-loss unsaturated candidate (ties go to the lower
    /// position) and charges it. Falls back to the global argmin when every
    /// candidate is saturated.
    pub fn select(&mut self, ids: &[usize], losses: &[f64]) -> Result<Selection> {
        if ids.is_empty() || ids.len() != losses.len() {
            return Err(Error::Contract(format!(
                "selection needs matching non-empty candidates, got {} ids and {} losses",
                ids.len(),
                losses.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.counts.len()) {
            return Err(Error::Contract(format!("condition id {bad} outside ledger")));
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
        let (index, saturated) = match order.iter().find(|&&k| !self.is_saturated(ids[k])) {
            Some(&k) => (k, false),
            None => (order[0], true),
        };
        if saturated {
            self.saturation_events += 1;
        }
        self.counts[ids[index]] += 1;
        Ok(Selection { index, saturated })
    }
}

/// A shared `(t, xi)` corruption draw for a batch of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: Vec<f64>,
    pub xi: Tensor,
}

impl NoiseDraw {
    /// `t ~ U(t_min, 1)` and `xi ~ N(0, I)` per row.
    pub fn sample<R: Rng + ?Sized>(n: usize, d: usize, t_min: f64, rng: &mut R) -> Result<Self> {
        let t = (0..n).map(|_| t_min + (1.0 - t_min) * rng.random::<f64>()).collect();
        let xi = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(NoiseDraw {
            t,
            xi: Tensor::new(vec![n, d], xi)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.t.len()
    }

    /// Restricts the draw to the given rows.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(NoiseDraw {
            t: rows.iter().map(|&r| self.t[r]).collect(),
            xi: gather(&self.xi, rows)?,
        })
    }

    /// Corrupted states `z0 + sigma(t) xi` and their score targets.
    pub fn corrupt(&self, z0: &Tensor, schedule: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
        self.check(z0)?;
        let d = z0.cols();
        let mut zt = vec![0.0; z0.len()];
        let mut target = vec![0.0; z0.len()];
        for (r, &t) in self.t.iter().enumerate() {
            let s = schedule.sigma(t)?;
            for c in 0..d {
                let i = r * d + c;
                zt[i] = z0.data()[i] + s * self.xi.data()[i];
                target[i] = -self.xi.data()[i] / s;
            }
        }
        let shape = z0.shape().to_vec();
        Ok((Tensor::new(shape.clone(), zt)?, Tensor::new(shape, target)?))
    }

    /// States on the Gaussian bridge between `z0` at `t = 0` and `y` at
    /// `t = 1`, with the denoising target toward `z0`.
    pub fn bridge(&self, z0: &Tensor, y: &Tensor, schedule: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
        self.check(z0)?;
        if y.shape() != z0.shape() {
            return Err(Error::dim("bridge", format!("{:?} vs {:?}", z0.shape(), y.shape())));
        }
        let d = z0.cols();
        let s1 = schedule.sigma_max * schedule.sigma_max;
        let mut zt = vec![0.0; z0.len()];
        let mut target = vec![0.0; z0.len()];
        for (r, &t) in self.t.iter().enumerate() {
            let s2 = schedule.sigma(t)?.powi(2);
            let ratio = s2 / s1;
            let spread = (s2 * (1.0 - ratio)).max(0.0).sqrt();
            for c in 0..d {
                let i = r * d + c;
                let x0 = z0.data()[i];
                zt[i] = x0 + ratio * (y.data()[i] - x0) + spread * self.xi.data()[i];
                target[i] = (x0 - zt[i]) / s2;
            }
        }
        let shape = z0.shape().to_vec();
        Ok((Tensor::new(shape.clone(), zt)?, Tensor::new(shape, target)?))
    }

    pub fn weights(&self, weighting: DsmWeighting, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.t.iter().map(|&t| weighting.weight(t, schedule)).collect()
    }

    fn check(&self, z0: &Tensor) -> Result<()> {
        if z0.shape() != self.xi.shape() {
            return Err(Error::dim(
                "noise draw",
                format!("{:?} vs {:?}", z0.shape(), self.xi.shape()),
            ));
        }
        Ok(())
    }
}

/// Rows `rows` of a `[n, d]` tensor.
pub fn gather(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let d = x.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        if r >= x.rows() {
            return Err(Error::Contract(format!("row {r} outside tensor of {} rows", x.rows())));
        }
        data.extend_from_slice(x.row(r));
    }
    Tensor::new(vec![rows.len(), d], data)
}

/// `w_i * ||a_i - b_i||^2` per row.
pub fn row_sq_errors(a: &Tensor, b: &Tensor, weights: &[f64]) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || weights.len() != a.rows() {
        return Err(Error::dim("row_sq_errors", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((0..a.rows())
        .map(|r| {
            let e: f64 = a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y) * (x - y)).sum();
            weights[r] * e
        })
        .collect())
}

/// Taped `mean_i w_i ||pred_i - target_i||^2`.
pub fn weighted_row_loss(
    tape: &mut Tape,
    pred: NodeId,
    target: &Tensor,
    weights: &[f64],
) -> Result<NodeId> {
    let d = target.cols() as f64;
    let roots: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let scaled_target = {
        let cols = target.cols();
        let data = target
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * roots[i / cols])
            .collect();
        Tensor::new(target.shape().to_vec(), data)?
    };
    let p = tape.scale_rows(pred, &roots)?;
    let t = tape.constant(scaled_target);
    let m = tape.mse(p, t)?;
    tape.scale(m, d)
}

/// Monte-Carlo denoising score-matching loss of `model` conditioned on `y`.
pub fn dsm_loss<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    z_tgt: &Tensor,
    y: &Tensor,
    schedule: &NoiseSchedule,
    config: &ObjectiveConfig,
    rng: &mut R,
) -> Result<f64> {
    let draw = NoiseDraw::sample(z_tgt.rows(), z_tgt.cols(), config.t_min, rng)?;
    let (zt, target) = draw.corrupt(z_tgt, schedule)?;
    let s = model.score(&zt, y, &draw.t)?;
    let w = draw.weights(config.weighting, schedule)?;
    Ok(mean(&row_sq_errors(&s, &target, &w)?))
}

/// Winner of a WTA round for one target row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WtaChoice {
    /// Position in the candidate list.
    pub slot: usize,
    /// Conditioning-sample identity.
    pub id: usize,
    pub loss: f64,
    pub saturated: bool,
}

/// Batched WTA: row `i` of `z_t`/`target` is scored against every condition
/// listed in `candidates[i]` (ids into `pool`), all under the row's shared
/// `(t, xi)`, and the ledger picks the winner. Rows are processed in order.
#[allow(clippy::too_many_arguments)]
pub fn wta_select_batch<M: ScoreModel + ?Sized>(
    model: &M,
    z_t: &Tensor,
    target: &Tensor,
    t: &[f64],
    weights: &[f64],
    candidates: &[Vec<usize>],
    pool: &Tensor,
    ledger: &mut CapacityLedger,
) -> Result<Vec<WtaChoice>> {
    let n = z_t.rows();
    if candidates.len() != n || t.len() != n || weights.len() != n {
        return Err(Error::Contract("one candidate list per target row required".into()));
    }
    if candidates.iter().any(Vec::is_empty) {
        return Err(Error::Contract("empty candidate list".into()));
    }
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let mut times = Vec::new();
    for (i, cands) in candidates.iter().enumerate() {
        for &id in cands {
            rows.push(i);
            ids.push(id);
            times.push(t[i]);
        }
    }
    let zs = gather(z_t, &rows)?;
    let ys = gather(pool, &ids)?;
    let tg = gather(target, &rows)?;
    let w: Vec<f64> = rows.iter().map(|&r| weights[r]).collect();
    let scores = model.score(&zs, &ys, &times)?;
    let losses = row_sq_errors(&scores, &tg, &w)?;
    let mut out = Vec::with_capacity(n);
    let mut offset = 0;
    for cands in candidates {
        let l = &losses[offset..offset + cands.len()];
        let sel = ledger.select(cands, l)?;
        out.push(WtaChoice {
            slot: sel.index,
            id: cands[sel.index],
            loss: l[sel.index],
            saturated: sel.saturated,
        });
        offset += cands.len();
    }
    Ok(out)
}

/// WTA for a single target sample. `candidates` pairs each conditioning
/// vector with its ledger identity. Returns the winning position and its loss.
pub fn wta_select<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    z_tgt: &[f64],
    candidates: &[(usize, Vec<f64>)],
    ledger: &mut CapacityLedger,
    schedule: &NoiseSchedule,
    config: &ObjectiveConfig,
    rng: &mut R,
) -> Result<(usize, f64)> {
    if candidates.is_empty() {
        return Err(Error::Contract("empty candidate list".into()));
    }
    let d = z_tgt.len();
    let draw = NoiseDraw::sample(1, d, config.t_min, rng)?;
    let (zt, target) = draw.corrupt(&Tensor::new(vec![1, d], z_tgt.to_vec())?, schedule)?;
    let w = draw.weights(config.weighting, schedule)?;
    let k = candidates.len();
    let ids: Vec<usize> = candidates.iter().map(|c| c.0).collect();
    let ys = Tensor::from_rows(&candidates.iter().map(|c| c.1.clone()).collect::<Vec<_>>())?;
    let zs = gather(&zt, &vec![0; k])?;
    let scores = model.score(&zs, &ys, &vec![draw.t[0]; k])?;
    let losses = row_sq_errors(&scores, &gather(&target, &vec![0; k])?, &vec![w[0]; k])?;
    let sel = ledger.select(&ids, &losses)?;
    Ok((sel.index, losses[sel.index]))
}

/// Paired-supervision loss on true pairs: states are drawn on the bridge
/// between `z_tgt` and `z_src`, and the score conditioned on `z_src` regresses
/// the denoising target toward `z_tgt`.
pub fn paired_loss<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    z_tgt: &Tensor,
    z_src: &Tensor,
    paired: &[bool],
    schedule: &NoiseSchedule,
    config: &ObjectiveConfig,
    rng: &mut R,
) -> Result<f64> {
    if paired.len() != z_tgt.rows() || paired.iter().any(|p| !p) {
        return Err(Error::Contract("paired loss requires paired samples".into()));
    }
    let draw = NoiseDraw::sample(z_tgt.rows(), z_tgt.cols(), config.t_min, rng)?;
    let (zt, target) = draw.bridge(z_tgt, z_src, schedule)?;
    let s = model.score(&zt, z_src, &draw.t)?;
    let w = draw.weights(config.weighting, schedule)?;
    Ok(mean(&row_sq_errors(&s, &target, &w)?))
}

/// `w(t) = 1 / (sigma(t)^2 + eps)`.
pub fn traj_weight(t: f64, schedule: &NoiseSchedule, eps: f64) -> Result<f64> {
    Ok(1.0 / (schedule.sigma(t)?.powi(2) + eps))
}

/// Time at which the trajectory weight is evaluated for grid point `k`: the
/// noisier of the two compared states.
fn traj_weight_time(times: &[f64], k: usize) -> f64 {
    let t = times[k];
    t.max(1.0 - t)
}

/// `mean_k w(t_k) * mean_rows ||fwd(t_k) - rev(1 - t_k)||^2` over a shared grid.
pub fn cycle_trajectory_loss(
    fwd: &Trajectory,
    rev: &Trajectory,
    schedule: &NoiseSchedule,
    eps: f64,
) -> Result<f64> {
    let steps = check_trajectories(fwd, rev)?;
    let mut total = 0.0;
    for k in 0..=steps {
        let w = traj_weight(traj_weight_time(&fwd.times, k), schedule, eps)?;
        let e = row_sq_errors(&fwd.states[k], &rev.states[steps - k], &vec![1.0; fwd.states[k].rows()])?;
        total += w * mean(&e);
    }
    Ok(total / (steps + 1) as f64)
}

fn check_trajectories(fwd: &Trajectory, rev: &Trajectory) -> Result<usize> {
    let n = fwd.states.len();
    if n < 2 || rev.states.len() != n || fwd.times.len() != n || rev.times.len() != n {
        return Err(Error::Contract(format!(
            "trajectory lengths differ: {} and {} states",
            fwd.states.len(),
            rev.states.len()
        )));
    }
    if fwd.times.iter().zip(&rev.times).any(|(a, b)| (a - b).abs() > 1e-12) {
        return Err(Error::Contract("trajectories use different grids".into()));
    }
    Ok(n - 1)
}

/// Round trip `z_start -> first -> second` and its mean squared endpoint error.
pub fn cycle_endpoint_loss<A, B, R>(
    first: &A,
    second: &B,
    z_start: &Tensor,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<f64>
where
    A: ScoreModel + ?Sized,
    B: ScoreModel + ?Sized,
    R: Rng + ?Sized,
{
    let there = sample_bridge(first, z_start, schedule, steps, Direction::SrcToTgt, rng, false)?;
    let back = sample_bridge(second, there.terminal(), schedule, steps, Direction::TgtToSrc, rng, false)?;
    Ok(mean(&row_sq_errors(back.terminal(), z_start, &vec![1.0; z_start.rows()])?))
}

/// Taped cycle terms for one alternation step.
#[derive(Debug, Clone, Copy)]
pub struct CycleTerms {
    pub endpoint: NodeId,
    pub trajectory: NodeId,
}

/// Runs the first leg without gradients and the second leg on `tape`
/// through `second_nodes`, returning both cycle losses as tape nodes.
#[allow(clippy::too_many_arguments)]
pub fn taped_cycle<R: Rng + ?Sized>(
    tape: &mut Tape,
    first: &DenoiserParams,
    second: &DenoiserParams,
    second_nodes: &[NodeId],
    z_start: &Tensor,
    schedule: &NoiseSchedule,
    config: &ObjectiveConfig,
    rng: &mut R,
) -> Result<CycleTerms> {
    let steps = config.traj_steps;
    let net = ScoreNet {
        params: first,
        schedule,
    };
    let leg = sample_bridge(&net, z_start, schedule, steps, Direction::SrcToTgt, rng, true)?;
    let x_hat = leg.terminal().clone();
    let n = x_hat.rows();
    let times = leg.times.clone();
    let dvs = variance_increments(schedule, &times);
    let nvs = noise_variances(schedule, &times);
    let y = tape.constant(x_hat.clone());
    let mut z = tape.constant(initial_state(&x_hat, schedule, rng));
    let mut path = vec![z];
    for (k, &dv) in dvs.iter().enumerate() {
        let s = second.forward(tape, second_nodes, z, y, &vec![times[k]; n], schedule)?;
        let step = tape.scale(s, dv)?;
        z = tape.add(z, step)?;
        if nvs[k] > 0.0 {
            let sd = nvs[k].sqrt();
            let noise: Vec<f64> = (0..x_hat.len())
                .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let noise = tape.constant(Tensor::new(x_hat.shape().to_vec(), noise)?);
            z = tape.add(z, noise)?;
        }
        path.push(z);
    }
    let ones = vec![1.0; n];
    let endpoint = weighted_row_loss(tape, z, z_start, &ones)?;
    let mut trajectory: Option<NodeId> = None;
    for k in 0..=steps {
        let w = traj_weight(traj_weight_time(&times, k), schedule, config.eps_w)?;
        let term = weighted_row_loss(tape, path[steps - k], &leg.states[k], &ones)?;
        let term = tape.scale(term, w / (steps + 1) as f64)?;
        trajectory = Some(match trajectory {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(CycleTerms {
        endpoint,
        trajectory: trajectory.expect("at least one grid point"),
    })
}

/// Endpoint tensors and pairing flags in training layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub src: Tensor,
    pub tgt: Tensor,
    pub paired: Vec<bool>,
}

impl TrainingSet {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let src = Tensor::from_rows(&data.samples.iter().map(|s| s.z_src.clone()).collect::<Vec<_>>())?;
        let tgt = Tensor::from_rows(&data.samples.iter().map(|s| s.z_tgt.clone()).collect::<Vec<_>>())?;
        Ok(TrainingSet {
            src,
            tgt,
            paired: data.samples.iter().map(|s| s.paired).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.paired.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paired.is_empty()
    }

    /// `(targets, conditions)` for a bridge direction.
    pub fn sides(&self, direction: Direction) -> (&Tensor, &Tensor) {
        match direction {
            Direction::SrcToTgt => (&self.tgt, &self.src),
            Direction::TgtToSrc => (&self.src, &self.tgt),
        }
    }
}

/// Weighted contributions of each term; they sum to `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub dsm: f64,
    pub cyc_end: f64,
    pub cyc_traj: f64,
    pub pair: f64,
    pub wta_saturation_events: usize,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "iter,loss_total,loss_dsm,loss_cyc_end,loss_cyc_traj,loss_pair,wta_saturation_events";

    pub fn csv_row(&self, iter: usize) -> String {
        format!(
            "{iter},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
            self.total, self.dsm, self.cyc_end, self.cyc_traj, self.pair, self.wta_saturation_events
        )
    }
}

/// One direction's share of an iteration: the target rows to fit and the
/// trainable nodes of its network.
pub struct DirectionStep<'a> {
    pub direction: Direction,
    pub params: &'a DenoiserParams,
    pub nodes: &'a [NodeId],
    pub rows: &'a [usize],
    pub ledger: &'a mut CapacityLedger,
}

/// Records the unified objective for one iteration on `tape`. Returns no
/// node when the batch contributes no terms.
///
/// Each direction contributes DSM (unpaired rows through WTA, paired rows with
/// their own condition) and paired supervision. Cycle terms are added for one
/// direction only: on even iterations the source-to-target bridge runs first
/// and the reverse bridge is trained, and the roles swap on odd iterations.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    data: &TrainingSet,
    steps: [DirectionStep<'_>; 2],
    iter: usize,
    schedule: &NoiseSchedule,
    config: &ObjectiveConfig,
    rng: &mut R,
) -> Result<(Option<NodeId>, LossBreakdown)> {
    let mut breakdown = LossBreakdown::default();
    let mut terms: Vec<NodeId> = Vec::new();
    let mut dsm_nodes = Vec::new();
    let mut pair_nodes = Vec::new();
    let [mut a, mut b] = steps;
    for step in [&mut a, &mut b] {
        let (targets, conditions) = data.sides(step.direction);
        let rows: Vec<usize> = step
            .rows
            .iter()
            .copied()
            .filter(|&r| config.use_unpaired || data.paired[r])
            .collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len();
        let z0 = gather(targets, &rows)?;
        let draw = NoiseDraw::sample(n, z0.cols(), config.t_min, rng)?;
        let (zt, target) = draw.corrupt(&z0, schedule)?;
        let weights = draw.weights(config.weighting, schedule)?;

        let unpaired: Vec<usize> = (0..n).filter(|&i| !data.paired[rows[i]]).collect();
        let mut cond_ids: Vec<usize> = rows.clone();
        if !unpaired.is_empty() {
            let pool_size = conditions.rows();
            let candidates: Vec<Vec<usize>> = unpaired
                .iter()
                .map(|_| {
                    (0..config.wta_candidates)
                        .map(|_| rng.random_range(0..pool_size))
                        .collect()
                })
                .collect();
            let net = ScoreNet {
                params: step.params,
                schedule,
            };
            let before = step.ledger.saturation_events();
            let choices = wta_select_batch(
                &net,
                &gather(&zt, &unpaired)?,
                &gather(&target, &unpaired)?,
                &unpaired.iter().map(|&i| draw.t[i]).collect::<Vec<_>>(),
                &unpaired.iter().map(|&i| weights[i]).collect::<Vec<_>>(),
                &candidates,
                conditions,
                step.ledger,
            )?;
            breakdown.wta_saturation_events += step.ledger.saturation_events() - before;
            for (&i, c) in unpaired.iter().zip(&choices) {
                cond_ids[i] = c.id;
            }
        }
        let y = gather(conditions, &cond_ids)?;
        let zn = tape.constant(zt);
        let yn = tape.constant(y);
        let s = step.params.forward(tape, step.nodes, zn, yn, &draw.t, schedule)?;
        dsm_nodes.push(weighted_row_loss(tape, s, &target, &weights)?);

        let paired: Vec<usize> = (0..n).filter(|&i| data.paired[rows[i]]).collect();
        if config.lambda_pair > 0.0 && !paired.is_empty() {
            let sub = draw.select(&paired)?;
            let z0p = gather(&z0, &paired)?;
            let yp = gather(conditions, &paired.iter().map(|&i| rows[i]).collect::<Vec<_>>())?;
            let (zp, tp) = sub.bridge(&z0p, &yp, schedule)?;
            let wp = sub.weights(config.weighting, schedule)?;
            let zn = tape.constant(zp);
            let yn = tape.constant(yp);
            let s = step.params.forward(tape, step.nodes, zn, yn, &sub.t, schedule)?;
            // Indicator gating: the paired mean is rescaled to the full batch.
            let l = weighted_row_loss(tape, s, &tp, &wp)?;
            pair_nodes.push(tape.scale(l, paired.len() as f64 / n as f64)?);
        }
    }
    for node in &dsm_nodes {
        breakdown.dsm += tape.value(*node)?.item();
        terms.push(*node);
    }
    for node in &pair_nodes {
        let l = tape.scale(*node, config.lambda_pair)?;
        breakdown.pair += tape.value(l)?.item();
        terms.push(l);
    }

    if config.uses_cycle() {
        let (first, second) = if iter.is_multiple_of(2) { (&a, &b) } else { (&b, &a) };
        let (_, pool) = data.sides(first.direction);
        let starts: Vec<usize> = (0..config.cycle_batch)
            .map(|_| rng.random_range(0..pool.rows()))
            .collect();
        let z_start = gather(pool, &starts)?;
        let cyc = taped_cycle(
            tape,
            first.params,
            second.params,
            second.nodes,
            &z_start,
            schedule,
            config,
            rng,
        )?;
        if config.lambda_end > 0.0 {
            let l = tape.scale(cyc.endpoint, config.lambda_end)?;
            breakdown.cyc_end = tape.value(l)?.item();
            terms.push(l);
        }
        if config.lambda_traj > 0.0 {
            let l = tape.scale(cyc.trajectory, config.lambda_traj)?;
            breakdown.cyc_traj = tape.value(l)?.item();
            terms.push(l);
        }
    }

    let Some((&first, rest)) = terms.split_first() else {
        return Ok((None, breakdown));
    };
    let mut total = first;
    for &t in rest {
        total = tape.add(total, t)?;
    }
    breakdown.total = tape.value(total)?.item();
    Ok((Some(total), breakdown))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
