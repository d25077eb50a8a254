//! Synthetic content-style benchmark.
//!
//! Each draw picks a content class `c`, a style `s` and a shared latent
//! `u ~ N(0, I)`. The two endpoints are
//!
//! ```text
//! z_src = phi(mu_src[c] + A[s] u + e0)
//! z_tgt = phi(mu_tgt[c] + B[s] u + e1)
//! ```
//!
//! with `phi(z) = z + warp * z^3` applied per coordinate. Content survives the
//! translation; style and the warp make the coupling ambiguous from the
//! marginals alone.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::spectral_norm;
use crate::error::{Error, Result};

/// Radius of the circle the class means live on.
pub const MEAN_RADIUS: f64 = 3.0;

/// Knobs for [`GeneratorSpec::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub content_count: usize,
    pub style_count: usize,
    pub dim: usize,
    pub noise_std: f64,
    pub warp: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            content_count: 6,
            style_count: 3,
            dim: 2,
            noise_std: 0.05,
            warp: 0.1,
            seed: 0,
        }
    }
}

/// Frozen generator: class means and style maps for both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub config: GeneratorConfig,
    /// Per-class means of the conditioning endpoint.
    pub means_src: Vec<Vec<f64>>,
    /// Per-class means of the target endpoint.
    pub means_tgt: Vec<Vec<f64>>,
    /// Per-style `dim x dim` row-major maps for the conditioning endpoint.
    pub maps_src: Vec<Vec<f64>>,
    /// Per-style maps for the target endpoint.
    pub maps_tgt: Vec<Vec<f64>>,
}

/// One benchmark draw.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointSample {
    pub z_src: Vec<f64>,
    pub z_tgt: Vec<f64>,
    pub content: usize,
    pub style: usize,
    pub paired: bool,
}

/// Samples plus the fraction of them that expose their correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<EndpointSample>,
    pub rho: f64,
}

pub fn warp(z: f64, alpha: f64) -> f64 {
    z + alpha * z * z * z
}

impl GeneratorSpec {
    pub fn build(config: GeneratorConfig) -> Result<Self> {
        if config.content_count == 0 || config.style_count == 0 || config.dim == 0 {
            return Err(Error::Config(
                "content count, style count and dimension must be positive".into(),
            ));
        }
        if !(config.noise_std >= 0.0) || !(config.warp >= 0.0) {
            return Err(Error::Config("noise std and warp must be non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.content_count;
        let d = config.dim;

        // Both endpoints place class c in the same angular slot; each side gets
        // an independent phase jitter of at most a quarter slot.
        let base: f64 = rng.random_range(0.0..2.0 * PI);
        let slot = 2.0 * PI / k as f64;
        let means = |rng: &mut ChaCha8Rng| {
            let jitter = rng.random_range(-0.25..0.25) * slot;
            (0..k)
                .map(|c| {
                    let angle = base + jitter + slot * c as f64;
                    let mut m = vec![0.0; d];
                    m[0] = MEAN_RADIUS * angle.cos();
                    if d > 1 {
                        m[1] = MEAN_RADIUS * angle.sin();
                    }
                    m
                })
                .collect::<Vec<_>>()
        };
        let means_src = means(&mut rng);
        let means_tgt = means(&mut rng);

        let std = (1.0 / d as f64).sqrt();
        let maps = |rng: &mut ChaCha8Rng| {
            (0..config.style_count)
                .map(|_| {
                    let mut m: Vec<f64> = (0..d * d)
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let norm = spectral_norm(d, &m);
                    if norm > 1.0 {
                        m.iter_mut().for_each(|v| *v /= norm);
                    }
                    m
                })
                .collect::<Vec<_>>()
        };
        let maps_src = maps(&mut rng);
        let maps_tgt = maps(&mut rng);

        Ok(GeneratorSpec {
            config,
            means_src,
            means_tgt,
            maps_src,
            maps_tgt,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Deterministic part of the generator for explicit latents and noise.
    pub fn endpoints(
        &self,
        content: usize,
        style: usize,
        u: &[f64],
        noise_src: &[f64],
        noise_tgt: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let alpha = self.config.warp;
        let side = |mean: &[f64], map: &[f64], noise: &[f64]| {
            (0..d)
                .map(|i| {
                    let lin: f64 = (0..d).map(|j| map[i * d + j] * u[j]).sum();
                    warp(mean[i] + lin + noise[i], alpha)
                })
                .collect::<Vec<_>>()
        };
        (
            side(&self.means_src[content], &self.maps_src[style], noise_src),
            side(&self.means_tgt[content], &self.maps_tgt[style], noise_tgt),
        )
    }

    /// Draws `n` independent samples, all flagged unpaired.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<EndpointSample>> {
        if n == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        let d = self.dim();
        let sigma = self.config.noise_std;
        let gauss = |rng: &mut R, scale: f64| -> Vec<f64> {
            (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let content = rng.random_range(0..self.config.content_count);
            let style = rng.random_range(0..self.config.style_count);
            let u = gauss(rng, 1.0);
            let e0 = gauss(rng, sigma);
            let e1 = gauss(rng, sigma);
            let (z_src, z_tgt) = self.endpoints(content, style, &u, &e0, &e1);
            out.push(EndpointSample {
                z_src,
                z_tgt,
                content,
                style,
                paired: false,
            });
        }
        Ok(out)
    }
}

/// Flags exactly `floor(rho * n)` samples as paired, chosen uniformly. Order is kept.
pub fn assign_pairing<R: Rng + ?Sized>(
    mut samples: Vec<EndpointSample>,
    rho: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("paired fraction {rho} outside [0, 1]")));
    }
    let n = samples.len();
    let count = paired_count(n, rho);
    samples.iter_mut().for_each(|s| s.paired = false);
    for i in index::sample(rng, n, count) {
        samples[i].paired = true;
    }
    Ok(Dataset { samples, rho })
}

pub fn paired_count(n: usize, rho: f64) -> usize {
    ((rho * n as f64) + 1e-9).floor() as usize
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map(|s| s.z_src.len()).unwrap_or(0)
    }

    pub fn paired_count(&self) -> usize {
        self.samples.iter().filter(|s| s.paired).count()
    }

    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        let mut header: Vec<String> = (0..d).map(|i| format!("z_src_{i}")).collect();
        header.extend((0..d).map(|i| format!("z_tgt_{i}")));
        header.extend(["content", "style", "paired"].map(String::from));
        out.push_str(&header.join(","));
        out.push('\n');
        for s in &self.samples {
            for v in s.z_src.iter().chain(&s.z_tgt) {
                write!(out, "{v:.16e},").unwrap();
            }
            writeln!(out, "{},{},{}", s.content, s.style, u8::from(s.paired)).unwrap();
        }
        out
    }

    /// Parses the CSV written by [`Dataset::to_csv`]. `rho` is recovered from the flags.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty dataset".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 5 || !(cols.len() - 3).is_multiple_of(2) {
            return Err(Error::Parse(format!("unexpected header `{header}`")));
        }
        let d = (cols.len() - 3) / 2;
        for i in 0..d {
            if cols[i] != format!("z_src_{i}") || cols[d + i] != format!("z_tgt_{i}") {
                return Err(Error::Parse(format!("unexpected header `{header}`")));
            }
        }
        if cols[2 * d..] != ["content", "style", "paired"] {
            return Err(Error::Parse(format!("unexpected header `{header}`")));
        }
        let mut samples = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse(format!("row {}: expected {} fields", lineno + 2, cols.len())));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: `{s}`: {e}", lineno + 2)))
            };
            let int = |s: &str| -> Result<usize> {
                s.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("row {}: `{s}`: {e}", lineno + 2)))
            };
            let z_src = fields[..d].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            let z_tgt = fields[d..2 * d].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            let paired = match fields[2 * d + 2] {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(Error::Parse(format!("row {}: paired flag `{other}`", lineno + 2))),
            };
            samples.push(EndpointSample {
                z_src,
                z_tgt,
                content: int(fields[2 * d])?,
                style: int(fields[2 * d + 1])?,
                paired,
            });
        }
        let rho = if samples.is_empty() {
            0.0
        } else {
            samples.iter().filter(|s| s.paired).count() as f64 / samples.len() as f64
        };
        Ok(Dataset { samples, rho })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Dataset::from_csv(&std::fs::read_to_string(path)?)
    }
}
