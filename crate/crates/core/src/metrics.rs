//! Evaluation metrics: sliced Wasserstein distance, unbiased RBF MMD²,
//! classifier-based content accuracy and round-trip cycle error.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bridge::{NoiseSchedule, ScoreModel};
use crate::diffcore::linalg::gemm;
use crate::diffcore::{gelu, gelu_grad, Adam, Tensor};
use crate::error::{Error, Result};
use crate::objectives::cycle_endpoint_loss;

pub const DEFAULT_PROJECTIONS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub swd: f64,
    pub mmd2: f64,
    pub content_acc: f64,
    pub cycle_mse: f64,
    pub sample_count: usize,
    pub seed: u64,
}

/// `count` random unit directions in `d` dimensions.
pub fn random_projections<R: Rng + ?Sized>(count: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Sliced Wasserstein-1 distance over `n_projections` random directions.
pub fn swd<R: Rng + ?Sized>(a: &Tensor, b: &Tensor, n_projections: usize, rng: &mut R) -> Result<f64> {
    check_pair("swd", a, b)?;
    if n_projections == 0 {
        return Err(Error::Config("swd needs at least one projection".into()));
    }
    let dirs = random_projections(n_projections, a.cols(), rng);
    swd_with(a, b, &dirs)
}

/// Sliced Wasserstein-1 distance over fixed directions.
pub fn swd_with(a: &Tensor, b: &Tensor, directions: &[Vec<f64>]) -> Result<f64> {
    check_pair("swd", a, b)?;
    if directions.is_empty() || directions.iter().any(|v| v.len() != a.cols()) {
        return Err(Error::Contract("projection directions must match the sample dimension".into()));
    }
    let project = |x: &Tensor, v: &[f64]| -> Vec<f64> {
        (0..x.rows())
            .map(|r| x.row(r).iter().zip(v).map(|(p, q)| p * q).sum())
            .collect()
    };
    let total: f64 = directions
        .iter()
        .map(|v| wasserstein1(project(a, v), project(b, v)))
        .sum();
    Ok(total / directions.len() as f64)
}

/// Exact 1-D W1 between two empirical distributions, `integral |F_a - F_b|`.
/// For equal sizes this is the mean absolute difference of sorted samples.
pub fn wasserstein1(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => break,
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        prev = x;
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
    }
    total
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased U-statistic estimate of MMD² with an RBF kernel of the given bandwidth.
pub fn mmd2_rbf(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    check_pair("mmd2_rbf", a, b)?;
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::Config(format!("bandwidth {bandwidth} must be positive")));
    }
    let (m, n) = (a.rows(), b.rows());
    if m < 2 || n < 2 {
        return Err(Error::Contract("mmd2 needs at least two samples per set".into()));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |x: &[f64], y: &[f64]| (-gamma * sq_dist(x, y)).exp();
    let within = |x: &Tensor| {
        let mut s = 0.0;
        for i in 0..x.rows() {
            for j in i + 1..x.rows() {
                s += k(x.row(i), x.row(j));
            }
        }
        2.0 * s / (x.rows() * (x.rows() - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..m {
        for j in 0..n {
            cross += k(a.row(i), b.row(j));
        }
    }
    Ok(within(a) + within(b) - 2.0 * cross / (m * n) as f64)
}

/// Median pairwise distance over the pooled sample, using at most 1000
/// evenly strided points.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair("median_bandwidth", a, b)?;
    let pooled: Vec<&[f64]> = (0..a.rows()).map(|r| a.row(r)).chain((0..b.rows()).map(|r| b.row(r))).collect();
    let stride = pooled.len().div_ceil(1000).max(1);
    let pts: Vec<&[f64]> = pooled.into_iter().step_by(stride).collect();
    let mut d = Vec::with_capacity(pts.len() * (pts.len() - 1) / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push(sq_dist(pts[i], pts[j]).sqrt());
        }
    }
    if d.is_empty() {
        return Err(Error::Contract("bandwidth needs at least two points".into()));
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let h = *m;
    if h > 0.0 {
        Ok(h)
    } else {
        Err(Error::Numeric { op: "median_bandwidth" })
    }
}

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::Contract(format!(
            "{op}: sample sets of shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Held-out accuracy below this raises a calibration error.
    pub min_accuracy: Option<f64>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 64,
            epochs: 40,
            batch_size: 128,
            learning_rate: 3e-3,
            seed: 0,
            min_accuracy: Some(0.95),
        }
    }
}

/// Two-hidden-layer GELU MLP over standardised inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentClassifier {
    classes: usize,
    dim: usize,
    hidden: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<Tensor>,
}

struct Activations {
    x: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    logits: Vec<f64>,
}

impl ContentClassifier {
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Fits by mini-batch cross-entropy with Adam.
    pub fn fit(x: &Tensor, labels: &[usize], classes: usize, config: &ClassifierConfig) -> Result<Self> {
        if x.rows() != labels.len() || x.shape().len() != 2 {
            return Err(Error::Contract("one label per sample required".into()));
        }
        if classes == 0 || labels.iter().any(|&l| l >= classes) {
            return Err(Error::Contract("labels outside the class range".into()));
        }
        if config.hidden == 0 || config.batch_size == 0 {
            return Err(Error::Config("classifier sizes must be positive".into()));
        }
        let (n, d, h) = (x.rows(), x.cols(), config.hidden);
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                mean[c] += x.row(r)[c] / n as f64;
            }
        }
        for r in 0..n {
            for c in 0..d {
                scale[c] += (x.row(r)[c] - mean[c]).powi(2) / n as f64;
            }
        }
        scale.iter_mut().for_each(|s| *s = if *s > 0.0 { 1.0 / s.sqrt() } else { 1.0 });

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut xavier = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
            Tensor::new(vec![rows, cols], data)
        };
        let weights = vec![
            xavier(d, h)?,
            Tensor::zeros(&[h]),
            xavier(h, h)?,
            Tensor::zeros(&[h]),
            xavier(h, classes)?,
            Tensor::zeros(&[classes]),
        ];
        let mut clf = ContentClassifier {
            classes,
            dim: d,
            hidden: h,
            mean,
            scale,
            weights,
        };
        if classes == 1 {
            return Ok(clf);
        }
        let mut adam = Adam::new();
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let grads = clf.gradients(x, labels, chunk);
                let mut params: Vec<&mut Tensor> = clf.weights.iter_mut().collect();
                adam.step(&mut params, &grads, config.learning_rate)?;
            }
        }
        if !clf.weights.iter().all(Tensor::is_finite) {
            return Err(Error::Numeric { op: "classifier" });
        }
        Ok(clf)
    }

    fn forward(&self, x: &Tensor, rows: &[usize]) -> Activations {
        let (m, d, h, k) = (rows.len(), self.dim, self.hidden, self.classes);
        let w = &self.weights;
        let mut xs = Vec::with_capacity(m * d);
        for &r in rows {
            xs.extend(x.row(r).iter().enumerate().map(|(c, v)| (v - self.mean[c]) * self.scale[c]));
        }
        let affine = |input: &[f64], rows_in: usize, w: &Tensor, b: &Tensor, cols: usize| {
            let mut out = vec![0.0; m * cols];
            gemm(m, rows_in, cols, input, false, w.data(), false, &mut out, false);
            for row in out.chunks_mut(cols) {
                row.iter_mut().zip(b.data()).for_each(|(o, bi)| *o += bi);
            }
            out
        };
        let a1 = affine(&xs, d, &w[0], &w[1], h);
        let h1: Vec<f64> = a1.iter().map(|&v| gelu(v)).collect();
        let a2 = affine(&h1, h, &w[2], &w[3], h);
        let h2: Vec<f64> = a2.iter().map(|&v| gelu(v)).collect();
        let logits = affine(&h2, h, &w[4], &w[5], k);
        Activations {
            x: xs,
            a1,
            h1,
            a2,
            h2,
            logits,
        }
    }

    fn gradients(&self, x: &Tensor, labels: &[usize], rows: &[usize]) -> Vec<Tensor> {
        let (m, d, h, k) = (rows.len(), self.dim, self.hidden, self.classes);
        let act = self.forward(x, rows);
        let mut dlogits = act.logits.clone();
        for (i, row) in dlogits.chunks_mut(k).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            row.iter_mut().for_each(|v| {
                *v = (*v - max).exp();
                z += *v;
            });
            row.iter_mut().for_each(|v| *v /= z * m as f64);
            row[labels[rows[i]]] -= 1.0 / m as f64;
        }
        let w = &self.weights;
        let layer = |input: &[f64], rows_in: usize, delta: &[f64], cols: usize| {
            let mut gw = vec![0.0; rows_in * cols];
            gemm(rows_in, m, cols, input, true, delta, false, &mut gw, false);
            let mut gb = vec![0.0; cols];
            for row in delta.chunks(cols) {
                gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
            }
            (gw, gb)
        };
        let back = |delta: &[f64], w: &Tensor, rows_in: usize, cols: usize, pre: &[f64]| {
            let mut out = vec![0.0; m * rows_in];
            gemm(m, cols, rows_in, delta, false, w.data(), true, &mut out, false);
            out.iter_mut().zip(pre).for_each(|(o, &p)| *o *= gelu_grad(p));
            out
        };
        let (g5, g6) = layer(&act.h2, h, &dlogits, k);
        let d2 = back(&dlogits, &w[4], h, k, &act.a2);
        let (g3, g4) = layer(&act.h1, h, &d2, h);
        let d1 = back(&d2, &w[2], h, h, &act.a1);
        let (g1, g2) = layer(&act.x, d, &d1, h);
        [(g1, vec![d, h]), (g2, vec![h]), (g3, vec![h, h]), (g4, vec![h]), (g5, vec![h, k]), (g6, vec![k])]
            .into_iter()
            .map(|(g, s)| Tensor::new(s, g).expect("gradient shape"))
            .collect()
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        if x.shape().len() != 2 || x.cols() != self.dim {
            return Err(Error::Contract(format!(
                "classifier expects [n, {}], got {:?}",
                self.dim,
                x.shape()
            )));
        }
        if self.classes == 1 {
            return Ok(vec![0; x.rows()]);
        }
        let rows: Vec<usize> = (0..x.rows()).collect();
        let act = self.forward(x, &rows);
        Ok(act
            .logits
            .chunks(self.classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Trains on clean target samples and checks accuracy on a held-out split.
pub fn train_content_classifier(
    train_x: &Tensor,
    train_labels: &[usize],
    held_x: &Tensor,
    held_labels: &[usize],
    classes: usize,
    config: &ClassifierConfig,
) -> Result<ContentClassifier> {
    if classes < 1 {
        return Err(Error::Contract("classifier needs at least one class".into()));
    }
    let clf = ContentClassifier::fit(train_x, train_labels, classes, config)?;
    let acc = content_accuracy(&clf, held_x, held_labels)?;
    if let Some(min) = config.min_accuracy {
        if acc < min {
            return Err(Error::Calibration(format!(
                "held-out accuracy {acc:.4} below the {min} sanity threshold"
            )));
        }
    }
    Ok(clf)
}

/// Fraction of translated samples classified as their source's content label.
pub fn content_accuracy(clf: &ContentClassifier, translated: &Tensor, labels: &[usize]) -> Result<f64> {
    if translated.rows() != labels.len() {
        return Err(Error::Contract(format!(
            "{} samples but {} labels",
            translated.rows(),
            labels.len()
        )));
    }
    let pred = clf.predict(translated)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean squared round-trip error `E ||y_tilde - y||^2` through both bridges.
pub fn cycle_mse<A, B, R>(
    forward: &A,
    backward: &B,
    sources: &Tensor,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<f64>
where
    A: ScoreModel + ?Sized,
    B: ScoreModel + ?Sized,
    R: Rng + ?Sized,
{
    cycle_endpoint_loss(forward, backward, sources, schedule, steps, rng)
}

/// Mean squared distance between matched rows.
pub fn paired_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((0..a.rows()).map(|r| sq_dist(a.row(r), b.row(r))).sum::<f64>() / a.rows() as f64)
}
