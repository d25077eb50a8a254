//! Flat `key = value` run configuration.

use std::path::Path;

use crate::engine::RunConfig;
use crate::error::{Error, Result};
use crate::objectives::DsmWeighting;

/// Parses `key = value` lines. Blank lines and `#` comments are ignored.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

/// `inf`, `unlimited` and `none` mean no capacity limit.
pub fn parse_capacity(value: &str) -> Result<Option<usize>> {
    match value {
        "inf" | "unlimited" | "none" | "∞" => Ok(None),
        v => num::<usize>("capacity", v).map(Some),
    }
}

pub fn format_capacity(c: Option<usize>) -> String {
    c.map_or_else(|| "inf".to_string(), |v| v.to_string())
}

/// Sets one field of `config`. Keys mirror the struct field names.
pub fn apply_setting(config: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let g = &mut config.generator;
    let o = &mut config.objective;
    let d = &mut config.denoiser;
    match key {
        "content_count" => g.content_count = num(key, value)?,
        "style_count" => g.style_count = num(key, value)?,
        "dim" => {
            g.dim = num(key, value)?;
            d.dim = g.dim;
        }
        "noise_std" => g.noise_std = num(key, value)?,
        "warp" => g.warp = num(key, value)?,
        "generator_seed" => g.seed = num(key, value)?,
        "lambda_end" => o.lambda_end = num(key, value)?,
        "lambda_traj" => o.lambda_traj = num(key, value)?,
        "lambda_pair" => o.lambda_pair = num(key, value)?,
        "wta_candidates" => o.wta_candidates = num(key, value)?,
        "capacity" => o.capacity = parse_capacity(value)?,
        "traj_steps" => o.traj_steps = num(key, value)?,
        "eps_w" => o.eps_w = num(key, value)?,
        "t_min" => o.t_min = num(key, value)?,
        "cycle_batch" => o.cycle_batch = num(key, value)?,
        "dsm_weighting" => {
            o.weighting = match value {
                "uniform" => DsmWeighting::Uniform,
                "sigma2" => DsmWeighting::SigmaSquared,
                _ => return Err(Error::Config(format!("`{key}`: expected uniform or sigma2"))),
            }
        }
        "use_unpaired" => o.use_unpaired = flag(key, value)?,
        "blocks" => d.blocks = num(key, value)?,
        "d_model" => d.d_model = num(key, value)?,
        "heads" => d.heads = num(key, value)?,
        "time_dim" => d.time.dim = num(key, value)?,
        "time_base" => d.time.base = num(key, value)?,
        "data_scale" => d.data_scale = num(key, value)?,
        "sigma_min" => config.sigma_min = num(key, value)?,
        "sigma_max" => config.sigma_max = num(key, value)?,
        "rho" => config.rho = num(key, value)?,
        "n_train" => config.n_train = num(key, value)?,
        "n_test" => config.n_test = num(key, value)?,
        "epochs" => config.epochs = num(key, value)?,
        "batch_size" => config.batch_size = num(key, value)?,
        "learning_rate" => config.learning_rate = num(key, value)?,
        "data_seed" => config.data_seed = num(key, value)?,
        "init_seed" => config.init_seed = num(key, value)?,
        "train_seed" => config.train_seed = num(key, value)?,
        "eval_seed" => config.eval_seed = num(key, value)?,
        "seed" => *config = config.clone().with_seed(num(key, value)?),
        "inference_steps" => config.inference_steps = num(key, value)?,
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

/// Defaults, then the file (if any), then `overrides` in order.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(p) = path {
        for (k, v) in parse_pairs(&std::fs::read_to_string(p)?)? {
            apply_setting(&mut config, &k, &v)?;
        }
    }
    for (k, v) in overrides {
        apply_setting(&mut config, k, v)?;
    }
    config.validate()?;
    Ok(config)
}

/// Renders `config` in the file format; feeding it back reproduces `config`.
pub fn render_config(config: &RunConfig) -> String {
    let g = &config.generator;
    let o = &config.objective;
    let d = &config.denoiser;
    let weighting = match o.weighting {
        DsmWeighting::Uniform => "uniform",
        DsmWeighting::SigmaSquared => "sigma2",
    };
    let pairs: Vec<(&str, String)> = vec![
        ("content_count", g.content_count.to_string()),
        ("style_count", g.style_count.to_string()),
        ("dim", g.dim.to_string()),
        ("noise_std", g.noise_std.to_string()),
        ("warp", g.warp.to_string()),
        ("generator_seed", g.seed.to_string()),
        ("lambda_end", o.lambda_end.to_string()),
        ("lambda_traj", o.lambda_traj.to_string()),
        ("lambda_pair", o.lambda_pair.to_string()),
        ("wta_candidates", o.wta_candidates.to_string()),
        ("capacity", format_capacity(o.capacity)),
        ("traj_steps", o.traj_steps.to_string()),
        ("eps_w", o.eps_w.to_string()),
        ("t_min", o.t_min.to_string()),
        ("cycle_batch", o.cycle_batch.to_string()),
        ("dsm_weighting", weighting.to_string()),
        ("use_unpaired", o.use_unpaired.to_string()),
        ("blocks", d.blocks.to_string()),
        ("d_model", d.d_model.to_string()),
        ("heads", d.heads.to_string()),
        ("time_dim", d.time.dim.to_string()),
        ("time_base", d.time.base.to_string()),
        ("data_scale", d.data_scale.to_string()),
        ("sigma_min", config.sigma_min.to_string()),
        ("sigma_max", config.sigma_max.to_string()),
        ("rho", config.rho.to_string()),
        ("n_train", config.n_train.to_string()),
        ("n_test", config.n_test.to_string()),
        ("epochs", config.epochs.to_string()),
        ("batch_size", config.batch_size.to_string()),
        ("learning_rate", config.learning_rate.to_string()),
        ("data_seed", config.data_seed.to_string()),
        ("init_seed", config.init_seed.to_string()),
        ("train_seed", config.train_seed.to_string()),
        ("eval_seed", config.eval_seed.to_string()),
        ("inference_steps", config.inference_steps.to_string()),
    ];
    pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
