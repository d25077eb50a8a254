#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdb_core::diffcore::{NodeId, Tape, Tensor};
use sdb_core::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, 1e-6)
}

pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between taped gradients and central differences
/// (step `h`) for every entry of every input.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    grad_check_floor(inputs, h, 1e-6, f)
}

/// As `grad_check`, with magnitudes below `floor` compared absolutely.
pub fn grad_check_floor<F>(inputs: &[Tensor], h: f64, floor: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &ids).unwrap();
        tape.value(out).unwrap().item()
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &ids).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let g = grads.get(ids[i]).unwrap();
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err_floor(g.data()[j], fd, floor));
        }
    }
    worst
}

/// Reduces any node to a scalar through a fixed random projection.
pub fn project(tape: &mut Tape, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = tape.value(x)?.shape().to_vec();
    let w = random_tensor(&shape, &mut rng(seed));
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}
