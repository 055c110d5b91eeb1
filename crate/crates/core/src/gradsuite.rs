//! Backprop against central finite differences on every differentiable
//! model and loss in the crate.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::equinet::{
    build_pinn1d, build_pinn2d, flatten, unflatten, BetaNetParams, FcSpec, Init, Layer1dSpec,
    Layer2dSpec, Parameterized, Pinn1dSpec, Pinn2dSpec,
};
use crate::intercoord::{build_ic_fc, build_ic_pinn, generate_channels, record_mse};
use crate::numcore::{relative_error, Activation, NodeId, Tape, Tensor};
use crate::pra::{build_pra_nets, make_pra_dataset, record_pra_cost, PraBatch, PraConfig, PraHyper, PraSample};
use crate::rng::{self, Rng};
use crate::Result;

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub family: String,
    pub cases: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

const SMOOTH: [Activation; 3] = [Activation::Softplus, Activation::Sigmoid, Activation::Identity];

fn smooth(rng: &mut Rng) -> Activation {
    SMOOTH[rng.random_range(0..SMOOTH.len())]
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("sized")
}

/// Relative error between `grad(θ)` and central differences of `f` at `θ`.
pub fn compare(theta: &[f64], f: impl Fn(&[f64]) -> f64, grad: &[f64]) -> f64 {
    let mut probe = theta.to_vec();
    let mut fd = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let up = f(&probe);
        probe[i] = orig - FD_STEP;
        let down = f(&probe);
        probe[i] = orig;
        fd[i] = (up - down) / (2.0 * FD_STEP);
    }
    let a = Tensor::vector(grad.to_vec());
    let b = Tensor::vector(fd);
    relative_error(&a, &b, 1e-8)
}

/// Leaves `inputs` on a fresh tape, builds a scalar with `body` and checks
/// its gradient with respect to every input.
fn leaf_case(inputs: Vec<Tensor>, body: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>) -> Result<f64> {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let split = |theta: &[f64]| -> Vec<Tensor> {
        let mut rest = theta;
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), rest[..n].to_vec()).expect("sized");
                rest = &rest[n..];
                t
            })
            .collect()
    };
    let eval = |vals: Vec<Tensor>| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals.into_iter().map(|t| tape.leaf(t)).collect();
        let out = body(&mut tape, &ids)?;
        Ok((tape, ids, out))
    };
    let theta: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let (tape, ids, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let g: Vec<f64> = ids.iter().flat_map(|&id| grads.wrt(id).into_data()).collect();
    let f = |th: &[f64]| {
        let (tape, _, out) = eval(split(th)).expect("shapes fixed");
        tape.value(out).item()
    };
    Ok(compare(&theta, f, &g))
}

/// `Σ out ⊙ C` for a fixed random `C`.
fn weighted_sum(tape: &mut Tape, out: NodeId, rng_seed: u64) -> Result<NodeId> {
    let shape = tape.value(out).shape().to_vec();
    let c = tape.leaf(random(&shape, &mut rng::seeded(rng_seed)));
    let p = tape.mul(out, c)?;
    Ok(tape.sum(p))
}

fn pinn1d_case(rng: &mut Rng, seed: u64) -> Result<f64> {
    let k = rng.random_range(1..=4);
    let depth = rng.random_range(1..=3);
    let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=3)).collect();
    let layers = widths
        .windows(2)
        .map(|w| Layer1dSpec { in_width: w[0], out_width: w[1], activation: smooth(rng) })
        .collect();
    let spec = Pinn1dSpec { layers, bias: rng.random_bool(0.5) };
    let params = build_pinn1d(&spec, Init::Uniform, rng)?;
    let beta = rng
        .random_bool(0.5)
        .then(|| BetaNetParams::build(3, rng.random_bool(0.5), Init::Uniform, rng))
        .transpose()?;
    let x = random(&[2 * k, widths[0]], rng);
    let n = params.tensors().len();
    let mut inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    if let Some(b) = &beta {
        inputs.extend(b.tensors().into_iter().cloned());
    }
    inputs.push(x);
    leaf_case(inputs, |tape, ids| {
        let bid = match &beta {
            Some(b) => Some(b.record(tape, &ids[n..ids.len() - 1], k)?),
            None => None,
        };
        let out = params.record(tape, &ids[..n], ids[ids.len() - 1], k, bid)?;
        weighted_sum(tape, out, seed)
    })
}

fn pinn2d_case(rng: &mut Rng, seed: u64) -> Result<f64> {
    let k = rng.random_range(1..=3);
    let depth = rng.random_range(1..=2);
    let dims: Vec<(usize, usize)> = (0..=depth)
        .map(|_| (rng.random_range(1..=3), rng.random_range(1..=3)))
        .collect();
    let layers = dims
        .windows(2)
        .map(|w| Layer2dSpec {
            in_rows: w[0].0,
            in_cols: w[0].1,
            out_rows: w[1].0,
            out_cols: w[1].1,
            activation: smooth(rng),
        })
        .collect();
    let params = build_pinn2d(&Pinn2dSpec { layers }, Init::Uniform, rng)?;
    let beta = rng
        .random_bool(0.5)
        .then(|| BetaNetParams::build(3, false, Init::Uniform, rng))
        .transpose()?;
    let readout = rng.random_bool(0.5);
    let x = random(&[2, k, k, dims[0].0, dims[0].1], rng);
    let n = params.tensors().len();
    let mut inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    if let Some(b) = &beta {
        inputs.extend(b.tensors().into_iter().cloned());
    }
    inputs.push(x);
    leaf_case(inputs, |tape, ids| {
        let bid = match &beta {
            Some(b) => Some(b.record(tape, &ids[n..ids.len() - 1], k)?),
            None => None,
        };
        let h = ids[ids.len() - 1];
        let out = if readout {
            params.record_readout(tape, &ids[..n], h, bid, true)?
        } else {
            params.record(tape, &ids[..n], h, bid)?
        };
        weighted_sum(tape, out, seed)
    })
}

fn beta_case(rng: &mut Rng, seed: u64) -> Result<f64> {
    let b = BetaNetParams::build(rng.random_range(1..=10), rng.random_bool(0.5), Init::Uniform, rng)?;
    let k = rng.random_range(1..=12);
    let inputs = b.tensors().into_iter().cloned().collect();
    leaf_case(inputs, |tape, ids| {
        let out = b.record(tape, ids, k)?;
        weighted_sum(tape, out, seed)
    })
}

fn fc_case(rng: &mut Rng, seed: u64) -> Result<f64> {
    let depth = rng.random_range(1..=3);
    let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=5)).collect();
    let spec = FcSpec { widths: widths.clone(), hidden: smooth(rng), output: smooth(rng), bias: rng.random_bool(0.5) };
    let p = spec.build(Init::Uniform, rng)?;
    let n = p.tensors().len();
    let mut inputs: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
    inputs.push(random(&[3, widths[0]], rng));
    leaf_case(inputs, |tape, ids| {
        let out = p.record(tape, &ids[..n], ids[n])?;
        weighted_sum(tape, out, seed)
    })
}

fn pra_cost_case(rng: &mut Rng, seed: u64) -> Result<f64> {
    let cfg = PraConfig { n_b: 2, k_max: 3, t_f: 3, mean_bandwidth: vec![10e6, 5e6], ..PraConfig::default() };
    let hyper = PraHyper {
        hidden: 3,
        hidden_layers: 1,
        dual_hidden: vec![4],
        adapt_k: rng.random_bool(0.5),
        ..PraHyper::default()
    };
    let nets = build_pra_nets(&cfg, &hyper, rng)?;
    let k = rng.random_range(1..=3);
    let mut data: Vec<PraSample> = make_pra_dataset(&PraConfig { k_max: k, ..cfg.clone() }, 2, None, seed)?;
    // rates of a few files per frame keep the normalization well scaled
    for s in &mut data {
        let m = s.rates.data().iter().cloned().fold(0.0, f64::max);
        s.rates = s.rates.scaled(2.0 / m);
    }
    let refs: Vec<&PraSample> = data.iter().collect();
    let batch = PraBatch::new(&refs, cfg.n_b, cfg.t_f, cfg.k_max)?;
    let rho = rng.random_range(0.5..20.0);
    let theta = flat_nets(&nets);
    let mut tape = Tape::new();
    let g = record_pra_cost(&mut tape, &nets, &batch, rho, 0.5)?;
    let mut grads = tape.backward(g.cost)?;
    let grad: Vec<f64> = g
        .primal_ids
        .iter()
        .chain(&g.beta_ids)
        .chain(&g.dual_ids)
        .flat_map(|&id| grads.take(id).into_data())
        .collect();
    let f = |th: &[f64]| {
        set_nets(&mut nets.clone(), th, |n| {
            let mut tape = Tape::new();
            let g = record_pra_cost(&mut tape, n, &batch, rho, 0.5).expect("fixed shapes");
            tape.value(g.cost).item()
        })
    };
    Ok(compare(&theta, f, &grad))
}

fn flat_nets(n: &crate::pra::PraNets) -> Vec<f64> {
    let mut v = flatten(&n.primal);
    if let Some(b) = &n.beta {
        v.extend(flatten(b));
    }
    v.extend(flatten(&n.dual));
    v
}

fn set_nets<T>(n: &mut crate::pra::PraNets, theta: &[f64], f: impl FnOnce(&crate::pra::PraNets) -> T) -> T {
    let a = flatten(&n.primal).len();
    unflatten(&mut n.primal, &theta[..a]);
    let mut rest = &theta[a..];
    if let Some(b) = &mut n.beta {
        let m = flatten(b).len();
        unflatten(b, &rest[..m]);
        rest = &rest[m..];
    }
    unflatten(&mut n.dual, rest);
    f(n)
}

fn mse_case(rng: &mut Rng, _seed: u64) -> Result<f64> {
    let k = rng.random_range(2..=4);
    let act = SMOOTH[rng.random_range(0..2)];
    let model = if rng.random_bool(0.5) {
        build_ic_pinn(&[1, 2, 1], act, rng.random_bool(0.5), rng)?
    } else {
        build_ic_fc(k, &[3], act, rng)?
    };
    let b = 3;
    let xs: Vec<Tensor> = (0..b).map(|_| generate_channels(k, rng)).collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = xs.iter().collect();
    let labels = Tensor::new(vec![b, k], (0..b * k).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let loss = |m: &crate::intercoord::IcModel| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let (ids, out, _) = m.record_train(&mut tape, &refs)?;
        let l = record_mse(&mut tape, out, &labels)?;
        Ok((tape, ids, l))
    };
    let theta = flatten(&model);
    let (tape, ids, l) = loss(&model)?;
    let mut grads = tape.backward(l)?;
    let grad: Vec<f64> = ids.iter().flat_map(|&id| grads.take(id).into_data()).collect();
    let f = |th: &[f64]| {
        let mut m = model.clone();
        unflatten(&mut m, th);
        let (tape, _, l) = loss(&m).expect("fixed shapes");
        tape.value(l).item()
    };
    Ok(compare(&theta, f, &grad))
}

type CaseFn = fn(&mut Rng, u64) -> Result<f64>;

pub const FAMILIES: [(&str, CaseFn); 6] = [
    ("pinn1d", pinn1d_case),
    ("pinn2d", pinn2d_case),
    ("beta", beta_case),
    ("fc", fc_case),
    ("pra_cost", pra_cost_case),
    ("mse", mse_case),
];

/// Runs `cases` random checks per family.
pub fn run_gradcheck(cases: usize, seed: u64) -> Result<Vec<FamilyReport>> {
    FAMILIES
        .iter()
        .enumerate()
        .map(|(fi, (name, case))| {
            let mut worst: f64 = 0.0;
            for c in 0..cases {
                let s = seed.wrapping_mul(1000).wrapping_add((fi * 100_000 + c) as u64);
                let mut rng = rng::stream(seed, (fi * 100_000 + c) as u64);
                let e = case(&mut rng, s)?;
                worst = worst.max(if e.is_finite() { e } else { f64::INFINITY });
            }
            Ok(FamilyReport {
                family: name.to_string(),
                cases,
                max_relative_error: worst,
                passed: worst < TOLERANCE,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_family_passes_a_few_cases() {
        for r in run_gradcheck(5, 1).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }
}
