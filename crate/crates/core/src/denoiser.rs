//! Attention score network over three tokens: the noisy state, the
//! conditioning endpoint and a sinusoidal time embedding.
//!
//! Tokens are projected to `d_model`, pass through `blocks` pre-norm
//! residual blocks (multi-head attention, then a GELU feed-forward with 4x
//! expansion), and the state token is read out through a final layer norm
//! and a linear map back to the latent dimension.
//!
//! Inputs and outputs are preconditioned by the noise level: the state enters
//! as `z / sqrt(sigma_t^2 + scale^2)`, the condition as `y / scale`, and the
//! raw output is divided by `sigma_t` to give the score.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{NoiseSchedule, ScoreModel};
use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Sinusoidal embedding of diffusion time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub base: f64,
}

impl TimeEmbedding {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time embedding dimension {dim} must be even and positive")));
        }
        if !(base > 0.0) {
            return Err(Error::Config("time embedding base must be positive".into()));
        }
        Ok(TimeEmbedding { dim, base })
    }

    /// Interleaved `[sin(w_k t), cos(w_k t)]` with `w_k = base^(-2k/dim)`.
    pub fn embed(&self, t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        let mut out = Vec::with_capacity(self.dim);
        for k in 0..self.dim / 2 {
            let w = self.base.powf(-2.0 * k as f64 / self.dim as f64);
            out.push((w * t).sin());
            out.push((w * t).cos());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Latent dimension of the endpoints.
    pub dim: usize,
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub time: TimeEmbedding,
    /// Typical endpoint magnitude used for input scaling.
    pub data_scale: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            dim: 2,
            blocks: 2,
            d_model: 32,
            heads: 4,
            time: TimeEmbedding {
                dim: 16,
                base: 1e4,
            },
            data_scale: 4.0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.blocks == 0 || self.d_model == 0 || self.heads == 0 {
            return Err(Error::Config("denoiser sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.data_scale > 0.0) {
            return Err(Error::Config("data scale must be positive".into()));
        }
        TimeEmbedding::new(self.time.dim, self.time.base).map(|_| ())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (d, m, te) = (self.dim, self.d_model, self.time.dim);
        let per_block = 12 * m * m + 13 * m;
        let inputs = (2 * d + te) * m + 3 * m;
        let head = 2 * m + m * d + d;
        self.blocks * per_block + inputs + head
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, m, te) = (self.dim, self.d_model, self.time.dim);
        let mut v: Vec<(String, Vec<usize>)> = vec![
            ("in_z.w".into(), vec![d, m]),
            ("in_z.b".into(), vec![m]),
            ("in_y.w".into(), vec![d, m]),
            ("in_y.b".into(), vec![m]),
            ("in_t.w".into(), vec![te, m]),
            ("in_t.b".into(), vec![m]),
        ];
        for l in 0..self.blocks {
            let p = |s: &str| format!("block{l}.{s}");
            v.extend([
                (p("ln1.g"), vec![m]),
                (p("ln1.b"), vec![m]),
                (p("wq"), vec![m, m]),
                (p("bq"), vec![m]),
                (p("wk"), vec![m, m]),
                (p("bk"), vec![m]),
                (p("wv"), vec![m, m]),
                (p("bv"), vec![m]),
                (p("wo"), vec![m, m]),
                (p("bo"), vec![m]),
                (p("ln2.g"), vec![m]),
                (p("ln2.b"), vec![m]),
                (p("ff.w1"), vec![m, 4 * m]),
                (p("ff.b1"), vec![4 * m]),
                (p("ff.w2"), vec![4 * m, m]),
                (p("ff.b2"), vec![m]),
            ]);
        }
        v.extend([
            ("ln_f.g".into(), vec![m]),
            ("ln_f.b".into(), vec![m]),
            ("out.w".into(), vec![m, d]),
            ("out.b".into(), vec![d]),
        ]);
        v
    }
}

/// Named weights of one score network, in a fixed serialisation order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

const BLOCK_FIELDS: usize = 16;
const INPUT_FIELDS: usize = 6;

impl DenoiserParams {
    /// Xavier-uniform weights, zero biases, unit norm gains and a zero output map.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.layout() {
            let t = if name.starts_with("out.") {
                Tensor::zeros(&shape)
            } else if name.ends_with(".g") {
                Tensor::full(&shape, 1.0)
            } else if shape.len() == 2 {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-a..a)).collect();
                Tensor::new(shape, data)?
            } else {
                Tensor::zeros(&shape)
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(DenoiserParams {
            config,
            names,
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Records every weight on `tape`, as trainable leaves or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Differentiable forward pass for a batch. `z` and `y` are `[n, dim]` nodes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        z: NodeId,
        y: NodeId,
        t: &[f64],
        schedule: &NoiseSchedule,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let n = t.len();
        let zs = tape.value(z)?.shape().to_vec();
        if zs != [n, cfg.dim] || tape.value(y)?.shape() != [n, cfg.dim] {
            return Err(Error::dim(
                "denoiser",
                format!("expected [{n}, {}] inputs, got {zs:?}", cfg.dim),
            ));
        }
        let mut sigma = Vec::with_capacity(n);
        let mut emb = Vec::with_capacity(n * cfg.time.dim);
        for &ti in t {
            sigma.push(schedule.sigma(ti)?);
            emb.extend(cfg.time.embed(ti)?);
        }
        let scale = cfg.data_scale;
        let z_in: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s + scale * scale).sqrt()).collect();
        let zn = tape.scale_rows(z, &z_in)?;
        let yn = tape.scale(y, 1.0 / scale)?;
        let e = tape.constant(Tensor::new(vec![n, cfg.time.dim], emb)?);

        let linear = |tape: &mut Tape, x: NodeId, w: usize, b: usize| -> Result<NodeId> {
            let h = tape.matmul(x, nodes[w])?;
            tape.add_bias(h, nodes[b])
        };
        let tz = linear(tape, zn, 0, 1)?;
        let ty = linear(tape, yn, 2, 3)?;
        let tt = linear(tape, e, 4, 5)?;
        let mut h = tape.concat_rows(&[tz, ty, tt])?;
        for l in 0..cfg.blocks {
            let base = INPUT_FIELDS + l * BLOCK_FIELDS;
            let p = |i: usize| base + i;
            let x = tape.layer_norm(h, nodes[p(0)], nodes[p(1)])?;
            let q = linear(tape, x, p(2), p(3))?;
            let k = linear(tape, x, p(4), p(5))?;
            let v = linear(tape, x, p(6), p(7))?;
            let a = tape.attention(q, k, v, n, 3, cfg.heads)?;
            let a = linear(tape, a, p(8), p(9))?;
            h = tape.add(h, a)?;
            let x = tape.layer_norm(h, nodes[p(10)], nodes[p(11)])?;
            let f = linear(tape, x, p(12), p(13))?;
            let f = tape.gelu(f)?;
            let f = linear(tape, f, p(14), p(15))?;
            h = tape.add(h, f)?;
        }
        let head = INPUT_FIELDS + cfg.blocks * BLOCK_FIELDS;
        let hz = tape.slice_rows(h, 0, n)?;
        let hz = tape.layer_norm(hz, nodes[head], nodes[head + 1])?;
        let out = linear(tape, hz, head + 2, head + 3)?;
        let inv_sigma: Vec<f64> = sigma.iter().map(|s| 1.0 / s).collect();
        tape.scale_rows(out, &inv_sigma)
    }

    /// Score estimate without recording gradients.
    pub fn score(&self, z: &Tensor, y: &Tensor, t: &[f64], schedule: &NoiseSchedule) -> Result<Tensor> {
        let mut tape = Tape::new();
        tape.set_no_grad(true);
        let nodes = self.register(&mut tape, false);
        let zn = tape.constant(z.clone());
        let yn = tape.constant(y.clone());
        let out = self.forward(&mut tape, &nodes, zn, yn, t, schedule)?;
        Ok(tape.value(out)?.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        DenoiserParams::read_from(&mut file)
    }

    /// One JSON header line, then every tensor as little-endian `f64`.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config,
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
        for t in &self.tensors {
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut line = String::new();
        input.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
        header.config.validate()?;
        let expected = header.config.layout();
        if expected.len() != header.tensors.len()
            || expected
                .iter()
                .zip(&header.tensors)
                .any(|((n, s), e)| *n != e.name || *s != e.shape)
        {
            return Err(Error::Parse("checkpoint layout does not match its config".into()));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut buf = [0u8; 8];
        for entry in header.tensors {
            let len: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                input.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push(Tensor::new(entry.shape, data)?);
            names.push(entry.name);
        }
        Ok(DenoiserParams {
            config: header.config,
            names,
            tensors,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: DenoiserConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// A parameter set bound to the schedule it was trained under.
#[derive(Debug, Clone, Copy)]
pub struct ScoreNet<'a> {
    pub params: &'a DenoiserParams,
    pub schedule: &'a NoiseSchedule,
}

impl ScoreModel for ScoreNet<'_> {
    fn score(&self, z: &Tensor, y: &Tensor, t: &[f64]) -> Result<Tensor> {
        let out = self.params.score(z, y, t, self.schedule)?;
        if !out.is_finite() {
            return Err(Error::Numeric { op: "denoiser" });
        }
        Ok(out)
    }
}
