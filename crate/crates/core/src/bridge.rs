//! Variance-exploding noise schedule, analytic score targets and the
//! Euler–Maruyama bridge sampler.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Geometric VE schedule `sigma(t) = sigma_min * (sigma_max / sigma_min)^t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Inference discretisation.
    pub steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_min: 0.01,
            sigma_max: 5.0,
            steps: 40,
        }
    }
}

/// Which way a bridge translates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Conditioning endpoint to target endpoint.
    SrcToTgt,
    /// Target endpoint back to the conditioning endpoint.
    TgtToSrc,
}

impl Direction {
    pub fn reverse(self) -> Self {
        match self {
            Direction::SrcToTgt => Direction::TgtToSrc,
            Direction::TgtToSrc => Direction::SrcToTgt,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, steps: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        Ok(NoiseSchedule {
            sigma_min,
            sigma_max,
            steps,
        })
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        Ok(self.sigma_unchecked(t))
    }

    pub(crate) fn sigma_unchecked(&self, t: f64) -> f64 {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    /// `g(t)^2 = d sigma(t)^2 / dt`.
    pub fn diffusion_sq(&self, t: f64) -> Result<f64> {
        let s = self.sigma(t)?;
        Ok(2.0 * (self.sigma_max / self.sigma_min).ln() * s * s)
    }

    /// Uniform grid from `t = 1` down to `t = 0`.
    pub fn grid(steps: usize) -> Vec<f64> {
        (0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect()
    }
}

/// `z_t = z_0 + sigma(t) * xi` with a fresh `xi ~ N(0, I)` per entry.
pub fn corrupt<R: Rng + ?Sized>(
    z0: &[f64],
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!("corruption time {t} outside (0, 1]")));
    }
    let s = schedule.sigma(t)?;
    Ok(z0
        .iter()
        .map(|&x| x + s * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Score of the corruption kernel, `(z_0 - z_t) / sigma(t)^2`.
pub fn dsm_target(z_t: &[f64], z0: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t == 0.0 {
        return Err(Error::Singularity("denoising target at t = 0".into()));
    }
    let s = schedule.sigma(t)?;
    check_len("dsm_target", z_t, z0)?;
    Ok(z0.iter().zip(z_t).map(|(a, b)| (a - b) / (s * s)).collect())
}

/// Doob h-transform term `(z_T - z_t) / (sigma(1)^2 - sigma(t)^2)`.
pub fn bridge_score_target(
    z_t: &[f64],
    z_end: &[f64],
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if t == 1.0 {
        return Err(Error::Singularity("bridge target at t = 1".into()));
    }
    let s = schedule.sigma(t)?;
    let denom = schedule.sigma_max * schedule.sigma_max - s * s;
    check_len("bridge_score_target", z_t, z_end)?;
    Ok(z_end.iter().zip(z_t).map(|(a, b)| (a - b) / denom).collect())
}

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(op, format!("{} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Anything that can estimate a score for a batch of states.
///
/// `z` and `y` are `[n, d]`; `t` holds one diffusion time per row.
pub trait ScoreModel {
    fn score(&self, z: &Tensor, y: &Tensor, t: &[f64]) -> Result<Tensor>;
}

impl<F> ScoreModel for F
where
    F: Fn(&Tensor, &Tensor, &[f64]) -> Result<Tensor>,
{
    fn score(&self, z: &Tensor, y: &Tensor, t: &[f64]) -> Result<Tensor> {
        self(z, y, t)
    }
}

/// Recorded sampler path for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `[n, d]` state at each grid time; the first entry is the initial state.
    pub states: Vec<Tensor>,
    /// Grid times, strictly decreasing from 1 to 0.
    pub times: Vec<f64>,
    pub direction: Direction,
}

impl Trajectory {
    pub fn terminal(&self) -> &Tensor {
        self.states.last().expect("trajectory has at least one state")
    }
}

/// Initial state `y + sigma_max * xi`.
pub fn initial_state<R: Rng + ?Sized>(y: &Tensor, schedule: &NoiseSchedule, rng: &mut R) -> Tensor {
    let data = y
        .data()
        .iter()
        .map(|&v| v + schedule.sigma_max * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("shape preserved")
}

/// Per-step increments `sigma(t_k)^2 - sigma(t_{k+1})^2` of the grid.
pub fn variance_increments(schedule: &NoiseSchedule, times: &[f64]) -> Vec<f64> {
    times
        .windows(2)
        .map(|w| {
            let (a, b) = (schedule.sigma_unchecked(w[0]), schedule.sigma_unchecked(w[1]));
            a * a - b * b
        })
        .collect()
}

/// Per-step noise variances `dv_k * sigma(t_{k+1})^2 / sigma(t_k)^2`; the last
/// step of the grid is noise-free.
pub fn noise_variances(schedule: &NoiseSchedule, times: &[f64]) -> Vec<f64> {
    let n = times.len().saturating_sub(1);
    times
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            if k + 1 == n {
                return 0.0;
            }
            let (a, b) = (schedule.sigma_unchecked(w[0]), schedule.sigma_unchecked(w[1]));
            (a * a - b * b) * (b * b) / (a * a)
        })
        .collect()
}

/// One update `z + dv * score + sqrt(noise_var) * xi`. No noise is drawn
/// when `noise_var` is zero.
pub fn em_update<R: Rng + ?Sized>(
    z: &Tensor,
    score: &Tensor,
    dv: f64,
    noise_var: f64,
    rng: &mut R,
) -> Tensor {
    let noise = noise_var.sqrt();
    let data = z
        .data()
        .iter()
        .zip(score.data())
        .map(|(&zi, &si)| {
            let xi = if noise_var > 0.0 {
                rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            zi + dv * si + noise * xi
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data).expect("shape preserved")
}

/// Integrates the reverse-time VE SDE from `t = 1` to `t = 0` on a uniform
/// grid of `n_steps`, conditioned on `y` (`[n, d]`).
///
/// Drift is zero; the model score replaces the true score, `g(t)^2 dt` is
/// discretised as the exact variance drop of each step and the injected
/// noise is the ancestral variance of that step.
pub fn sample_bridge<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    y: &Tensor,
    schedule: &NoiseSchedule,
    n_steps: usize,
    direction: Direction,
    rng: &mut R,
    record: bool,
) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let times = NoiseSchedule::grid(n_steps);
    let dvs = variance_increments(schedule, &times);
    let nvs = noise_variances(schedule, &times);
    let mut z = initial_state(y, schedule, rng);
    let mut states = Vec::with_capacity(if record { n_steps + 1 } else { 1 });
    if record {
        states.push(z.clone());
    }
    for (k, &dv) in dvs.iter().enumerate() {
        let t = vec![times[k]; z.rows()];
        let s = model
            .score(&z, y, &t)
            .map_err(|e| match e {
                Error::Numeric { .. } => Error::Divergence { step: k },
                other => other,
            })?;
        z = em_update(&z, &s, dv, nvs[k], rng);
        if !z.is_finite() {
            return Err(Error::Divergence { step: k });
        }
        if record {
            states.push(z.clone());
        }
    }
    if !record {
        states.push(z);
    }
    Ok(Trajectory {
        states,
        times: if record { times } else { vec![0.0] },
        direction,
    })
}

/// Closed-form scores used as oracles in tests and diagnostics.
#[derive(Debug, Clone)]
pub enum AnalyticScore {
    /// Score of `N(z*, sigma_t^2 I)`: every path is pulled to `z*`.
    PointMass { target: Vec<f64>, schedule: NoiseSchedule },
    /// Score of `N(mean, (var + sigma_t^2) I)`.
    Gaussian {
        mean: Vec<f64>,
        var: f64,
        schedule: NoiseSchedule,
    },
    /// Score of `N(y, sigma_t^2 I)`: translates every condition to itself.
    Identity { schedule: NoiseSchedule },
    Zero,
}

impl ScoreModel for AnalyticScore {
    fn score(&self, z: &Tensor, y: &Tensor, t: &[f64]) -> Result<Tensor> {
        let cols = z.cols();
        let mut out = vec![0.0; z.len()];
        for r in 0..z.rows() {
            let zr = z.row(r);
            let o = &mut out[r * cols..(r + 1) * cols];
            match self {
                AnalyticScore::PointMass { target, schedule } => {
                    o.copy_from_slice(&dsm_target(zr, target, t[r], schedule)?);
                }
                AnalyticScore::Gaussian {
                    mean,
                    var,
                    schedule,
                } => {
                    let s = schedule.sigma(t[r])?;
                    for c in 0..cols {
                        o[c] = (mean[c] - zr[c]) / (var + s * s);
                    }
                }
                AnalyticScore::Identity { schedule } => {
                    o.copy_from_slice(&dsm_target(zr, y.row(r), t[r], schedule)?);
                }
                AnalyticScore::Zero => {}
            }
        }
        Tensor::new(z.shape().to_vec(), out)
    }
}
