use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    compute_average_rates, edf_baseline, evaluate_plan, generate_pra_scenario, lp_solve_p1,
    Association, EdfOptions, LpStatus, PraConfig,
};
use crate::equinet::{
    build_pinn1d, BetaNetParams, FcParams, FcSpec, Init, Parameterized, Pinn1dParams, Pinn1dSpec,
};
use crate::numcore::{Activation, AdamState, NodeId, Optimizer, Tape, Tensor};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// One training or test instance: rates `[t_f × k]` and association.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PraSample {
    pub k: usize,
    pub rates: Tensor,
    pub assoc: Association,
}

impl PraSample {
    pub fn new(rates: Tensor, assoc: Association) -> Result<Self> {
        if rates.shape() != [assoc.t_f, assoc.k] {
            return Err(Error::shape(format!(
                "rates {:?} do not match association {}×{}",
                rates.shape(),
                assoc.t_f,
                assoc.k
            )));
        }
        if let Some(user) = (0..assoc.k).find(|&u| (0..assoc.t_f).all(|j| rates.at2(j, u) <= 0.0)) {
            return Err(Error::DegenerateUser { user });
        }
        Ok(PraSample { k: assoc.k, rates, assoc })
    }

    /// Same instance with users reordered (new user `u` is old `perm[u]`).
    pub fn permute_users(&self, perm: &[usize]) -> Self {
        let t_f = self.assoc.t_f;
        let mut r = Vec::with_capacity(t_f * self.k);
        for j in 0..t_f {
            for &p in perm {
                r.push(self.rates.at2(j, p));
            }
        }
        PraSample {
            k: self.k,
            rates: Tensor::matrix(t_f, self.k, r).expect("sized"),
            assoc: self.assoc.permute_users(perm),
        }
    }
}

/// Hyper-parameters of the primal-dual trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PraHyper {
    /// Augmented-Lagrangian weight.
    pub rho: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_primal: f64,
    pub lr_dual: f64,
    /// Per-block hidden width of the primal network.
    pub hidden: usize,
    pub hidden_layers: usize,
    pub primal_bias: bool,
    /// Use the `beta_K` adapter.
    pub adapt_k: bool,
    pub beta_hidden: usize,
    pub dual_hidden: Vec<usize>,
    /// Training users are drawn from `1..=small_k_max` ...
    pub small_k_max: usize,
    /// ... except for this fraction, which uses `K = K_max`.
    pub kmax_fraction: f64,
    /// Training treats the load cap as `1 − load_margin`.
    pub load_margin: f64,
    /// Both learning rates decay geometrically to this fraction of their
    /// start value over the run.
    pub lr_final_fraction: f64,
    /// Share of the training samples held back to pick the returned
    /// snapshot. Zero keeps the final weights.
    pub validation_fraction: f64,
    /// Epochs between validation checks.
    pub validate_every: usize,
    /// Snapshots whose worst validation overload exceeds this are never
    /// kept; among the rest the lowest mean objective wins.
    pub overload_tolerance: f64,
}

impl Default for PraHyper {
    fn default() -> Self {
        PraHyper {
            rho: 300.0,
            epochs: 100,
            batch_size: 32,
            lr_primal: 0.01,
            lr_dual: 0.01,
            hidden: 32,
            hidden_layers: 2,
            primal_bias: true,
            adapt_k: true,
            beta_hidden: 10,
            dual_hidden: vec![200, 100],
            small_k_max: 4,
            kmax_fraction: 0.8,
            load_margin: 0.2,
            lr_final_fraction: 1.0,
            validation_fraction: 0.1,
            validate_every: 5,
            overload_tolerance: 0.05,
        }
    }
}

impl PraHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config { field: field.into(), message: message.into() })
        };
        if !(self.rho > 0.0) {
            return bad("rho", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr_primal >= 0.0 && self.lr_dual >= 0.0) {
            return bad("lr_primal", "learning rates must be non-negative");
        }
        if self.hidden == 0 || self.beta_hidden == 0 || self.dual_hidden.contains(&0) {
            return bad("hidden", "widths must be positive");
        }
        if self.small_k_max == 0 {
            return bad("small_k_max", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.kmax_fraction) {
            return bad("kmax_fraction", "must lie in [0, 1]");
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return bad("lr_final_fraction", "must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.load_margin) {
            return bad("load_margin", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction", "must lie in [0, 1)");
        }
        if self.validation_fraction > 0.0 && self.validate_every == 0 {
            return bad("validate_every", "must be positive when validating");
        }
        if !(self.overload_tolerance >= 0.0) {
            return bad("overload_tolerance", "must be non-negative");
        }
        Ok(())
    }
}

/// Draws `n` samples. With `mixture` the user count follows the training
/// schedule of `hyper`; otherwise every sample has `K = k_max`. Sample `i`
/// uses its own random stream.
pub fn make_pra_dataset(
    cfg: &PraConfig,
    n: usize,
    mixture: Option<&PraHyper>,
    seed: u64,
) -> Result<Vec<PraSample>> {
    cfg.validate()?;
    (0..n).map(|i| pra_sample_at(cfg, i, mixture, seed)).collect()
}

/// Sample `index` of the dataset [`make_pra_dataset`] draws with `seed`.
pub fn pra_sample_at(
    cfg: &PraConfig,
    index: usize,
    mixture: Option<&PraHyper>,
    seed: u64,
) -> Result<PraSample> {
    let mut rng = rng::stream(seed, index as u64);
    let k = match mixture {
        Some(h) if !rng.random_bool(h.kmax_fraction) => {
            rng.random_range(1..=h.small_k_max.min(cfg.k_max))
        }
        _ => cfg.k_max,
    };
    loop {
        let s = generate_pra_scenario(cfg, k, &mut rng)?;
        let r = compute_average_rates(&s, cfg)?;
        match PraSample::new(r, s.assoc) {
            Err(Error::DegenerateUser { .. }) => continue,
            other => return other,
        }
    }
}

/// Primal network (PINN-1D with optional `beta_K`) and dual network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PraNets {
    pub primal: Pinn1dParams,
    pub beta: Option<BetaNetParams>,
    pub dual: FcParams,
    pub k_max: usize,
    pub t_f: usize,
    pub n_b: usize,
}

pub fn build_pra_nets(cfg: &PraConfig, hyper: &PraHyper, rng: &mut Rng) -> Result<PraNets> {
    hyper.validate()?;
    let mut widths = vec![cfg.t_f];
    widths.extend(std::iter::repeat_n(hyper.hidden, hyper.hidden_layers));
    widths.push(cfg.t_f);
    let spec = Pinn1dSpec::from_widths(&widths, Activation::Softplus, Activation::Softplus, hyper.primal_bias);
    let primal = build_pinn1d(&spec, Init::Uniform, rng)?;
    let beta = if hyper.adapt_k {
        Some(BetaNetParams::build(hyper.beta_hidden, false, Init::Uniform, rng)?)
    } else {
        None
    };
    let mut dw = vec![cfg.k_max * cfg.t_f];
    dw.extend(&hyper.dual_hidden);
    dw.push(cfg.t_f);
    let dual = FcSpec { widths: dw, hidden: Activation::Softplus, output: Activation::Softplus, bias: true }
        .build(Init::Uniform, rng)?;
    Ok(PraNets { primal, beta, dual, k_max: cfg.k_max, t_f: cfg.t_f, n_b: cfg.n_b })
}

impl PraNets {
    fn primal_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.primal.tensors_mut();
        if let Some(b) = &mut self.beta {
            v.extend(b.tensors_mut());
        }
        v
    }

    fn primal_shapes(&self) -> Vec<Vec<usize>> {
        let mut v = self.primal.shapes();
        if let Some(b) = &self.beta {
            v.extend(b.shapes());
        }
        v
    }
}

/// Constant tensors for a batch of samples sharing one user count.
///
/// Rows of the per-BS tensors are ordered (sample, base station, user).
pub struct PraBatch {
    pub k: usize,
    pub size: usize,
    /// `x_i` blocks, `[B·N_b·K × T_f]`.
    pub x: Tensor,
    pub mask: Tensor,
    /// Rates per (sample, user), `[B·K × T_f]`.
    pub rates: Tensor,
    /// Sums rows (b, i, u) over i: `[B·K × B·N_b·K]`.
    pub gather: Tensor,
    pub scatter: Tensor,
    /// Zero-padded dual inputs `[B·N_b × K_max·T_f]`.
    pub dual_in: Tensor,
}

impl PraBatch {
    pub fn new(samples: &[&PraSample], n_b: usize, t_f: usize, k_max: usize) -> Result<Self> {
        let k = samples.first().map_or(0, |s| s.k);
        if k == 0 || samples.iter().any(|s| s.k != k || s.assoc.t_f != t_f || s.assoc.n_b != n_b) {
            return Err(Error::contract("a batch needs samples with one shared, non-zero K"));
        }
        if k > k_max {
            return Err(Error::contract(format!("K = {k} exceeds K_max = {k_max}")));
        }
        let b = samples.len();
        let rows = b * n_b * k;
        let mut x = Vec::with_capacity(rows * t_f);
        let mut mask = Vec::with_capacity(rows * t_f);
        let mut rates = Vec::with_capacity(b * k * t_f);
        let mut dual_in = vec![0.0; b * n_b * k_max * t_f];
        let mut gather = Tensor::zeros(&[b * k, rows]);
        for (bi, s) in samples.iter().enumerate() {
            for u in 0..k {
                rates.extend((0..t_f).map(|j| s.rates.at2(j, u)));
            }
            for i in 0..n_b {
                for u in 0..k {
                    let row = (bi * n_b + i) * k + u;
                    gather.set2(bi * k + u, row, 1.0);
                    for j in 0..t_f {
                        let on = s.assoc.bs(j, u) == i;
                        let v = if on { s.rates.at2(j, u) } else { 0.0 };
                        x.push(v);
                        mask.push(if on { 1.0 } else { 0.0 });
                        dual_in[(bi * n_b + i) * k_max * t_f + u * t_f + j] = v;
                    }
                }
            }
        }
        Ok(PraBatch {
            k,
            size: b,
            x: Tensor::matrix(rows, t_f, x)?,
            mask: Tensor::matrix(rows, t_f, mask)?,
            rates: Tensor::matrix(b * k, t_f, rates)?,
            scatter: gather.transpose()?,
            gather,
            dual_in: Tensor::matrix(b * n_b, k_max * t_f, dual_in)?,
        })
    }
}

const RAW_FLOOR: f64 = 1e-12;

/// Nodes of one recorded cost evaluation.
pub struct PraGraph {
    pub primal_ids: Vec<NodeId>,
    pub beta_ids: Vec<NodeId>,
    pub dual_ids: Vec<NodeId>,
    /// Raw primal output `[B·N_b·K × T_f]`.
    pub raw: NodeId,
    /// Normalized plan per (sample, user), `[B·K × T_f]`.
    pub plan: NodeId,
    pub load: NodeId,
    pub nu: NodeId,
    pub l1: NodeId,
    pub cost: NodeId,
}

/// Records the batch cost
/// `(1/B)·Σ [‖Ŝ‖₁ + νᵀ(load − cap) + (ρ/2)‖(load − cap)⁺‖²]`.
pub fn record_pra_cost(
    tape: &mut Tape,
    nets: &PraNets,
    batch: &PraBatch,
    rho: f64,
    cap: f64,
) -> Result<PraGraph> {
    let primal_ids = nets.primal.bind(tape);
    let beta_ids = nets.beta.as_ref().map_or(Vec::new(), |b| b.bind(tape));
    let dual_ids = nets.dual.bind(tape);
    let beta = match &nets.beta {
        Some(b) => Some(b.record(tape, &beta_ids, batch.k)?),
        None => None,
    };
    let x = tape.leaf(batch.x.clone());
    let mask = tape.leaf(batch.mask.clone());
    let rates = tape.leaf(batch.rates.clone());
    let gather = tape.leaf(batch.gather.clone());
    let scatter = tape.leaf(batch.scatter.clone());
    let dual_in = tape.leaf(batch.dual_in.clone());

    let raw = nets.primal.record(tape, &primal_ids, x, batch.k, beta)?;
    // softplus can underflow to 0 on every frame of a user; the floor keeps
    // the normalization finite and falls back to an even split
    let floored = tape.offset(raw, RAW_FLOOR);
    let masked = tape.mul(floored, mask)?;
    let combined = tape.matmul(gather, masked)?;
    let weighted = tape.mul(combined, rates)?;
    let delivered = tape.sum_cols(weighted);
    let plan = tape.div_col(combined, delivered)?;

    let spread = tape.matmul(scatter, plan)?;
    let own = tape.mul(spread, mask)?;
    let load = tape.group_sum_rows(own, batch.k)?;
    let viol = tape.offset(load, -cap);
    let nu = nets.dual.record(tape, &dual_ids, dual_in)?;

    let l1 = tape.sum(plan);
    let nv = tape.mul(nu, viol)?;
    let dual_term = tape.sum(nv);
    let pos = tape.relu(viol);
    let sq = tape.square(pos);
    let pen = tape.sum(sq);
    let pen = tape.scale(pen, 0.5 * rho);
    let total = tape.add(l1, dual_term)?;
    let total = tape.add(total, pen)?;
    let cost = tape.scale(total, 1.0 / batch.size as f64);
    Ok(PraGraph { primal_ids, beta_ids, dual_ids, raw, plan, load, nu, l1, cost })
}

/// Normalized plan `[t_f × k]` for one sample.
pub fn infer_plan(nets: &PraNets, sample: &PraSample) -> Result<Tensor> {
    let batch = PraBatch::new(&[sample], nets.n_b, nets.t_f, nets.k_max)?;
    let mut tape = Tape::new();
    let g = record_pra_cost(&mut tape, nets, &batch, 1.0, 1.0)?;
    // plan rows are users
    tape.value(g.plan).transpose()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PraTrace {
    /// Mean batch cost per epoch, measured before the primal step.
    pub cost: Vec<f64>,
    /// Mean `‖Ŝ‖₁` per sample per epoch.
    pub objective: Vec<f64>,
}

fn minibatches(data: &[PraSample], size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut by_k: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in data.iter().enumerate() {
        by_k.entry(s.k).or_default().push(i);
    }
    let mut out = Vec::new();
    for (_, mut idx) in by_k {
        idx.shuffle(rng);
        out.extend(idx.chunks(size).map(|c| c.to_vec()));
    }
    out.shuffle(rng);
    out
}

/// Alternating primal descent and dual ascent with Adam.
///
/// Each minibatch first updates the primal network (and `beta_K`) to lower
/// the cost, then re-evaluates and updates the dual network to raise it.
/// The first `validation_fraction` of `data` is not trained on; it picks
/// which snapshot is returned.
pub fn train_pra(
    nets: &mut PraNets,
    data: &[PraSample],
    hyper: &PraHyper,
    rng: &mut Rng,
) -> Result<PraTrace> {
    train_pra_with(nets, data, hyper, rng, |_, _| {})
}

/// [`train_pra`] calling `on_epoch(epoch, nets)` after every epoch.
pub fn train_pra_with(
    nets: &mut PraNets,
    data: &[PraSample],
    hyper: &PraHyper,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(usize, &PraNets),
) -> Result<PraTrace> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let n_val = (data.len() as f64 * hyper.validation_fraction) as usize;
    let (val, data) = data.split_at(n_val.min(data.len() - 1));
    let mut best: Option<(f64, PraNets)> = None;
    let pshapes = nets.primal_shapes();
    let mut opt_p = AdamState::new(hyper.lr_primal, pshapes.iter().map(|s| s.as_slice()));
    let dshapes = nets.dual.shapes();
    let mut opt_d = AdamState::new(hyper.lr_dual, dshapes.iter().map(|s| s.as_slice()));
    let mut trace = PraTrace { cost: Vec::new(), objective: Vec::new() };
    let decay = hyper.lr_final_fraction.powf(1.0 / hyper.epochs.saturating_sub(1).max(1) as f64);
    for epoch in 0..hyper.epochs {
        let f = decay.powi(epoch as i32);
        opt_p.lr = hyper.lr_primal * f;
        opt_d.lr = hyper.lr_dual * f;
        let (mut cost_sum, mut obj_sum, mut count) = (0.0, 0.0, 0usize);
        for idx in minibatches(data, hyper.batch_size, rng) {
            let refs: Vec<&PraSample> = idx.iter().map(|&i| &data[i]).collect();
            let batch = PraBatch::new(&refs, nets.n_b, nets.t_f, nets.k_max)?;

            let mut tape = Tape::new();
            let g = record_pra_cost(&mut tape, nets, &batch, hyper.rho, 1.0 - hyper.load_margin)?;
            let cost = tape.value(g.cost).item();
            if !cost.is_finite() {
                let parts = [g.l1, g.nu, g.raw].map(|id| tape.value(id).all_finite());
                return Err(Error::NonFinite(format!(
                    "cost at epoch {epoch} (finite l1/nu/raw: {parts:?}, K = {})",
                    batch.k
                )));
            }
            cost_sum += cost * batch.size as f64;
            obj_sum += tape.value(g.l1).item();
            count += batch.size;
            let mut grads = tape.backward(g.cost)?;
            let mut pg: Vec<Tensor> = g.primal_ids.iter().map(|&id| grads.take(id)).collect();
            pg.extend(g.beta_ids.iter().map(|&id| grads.take(id)));
            opt_p.step(&mut nets.primal_tensors_mut(), &pg)?;

            let mut tape = Tape::new();
            let g = record_pra_cost(&mut tape, nets, &batch, hyper.rho, 1.0 - hyper.load_margin)?;
            let mut grads = tape.backward(g.cost)?;
            let dg: Vec<Tensor> = g.dual_ids.iter().map(|&id| grads.take(id).scaled(-1.0)).collect();
            opt_d.step(&mut nets.dual.tensors_mut(), &dg)?;
        }
        trace.cost.push(cost_sum / count as f64);
        trace.objective.push(obj_sum / count as f64);
        on_epoch(epoch, nets);
        if !val.is_empty() && ((epoch + 1) % hyper.validate_every == 0 || epoch + 1 == hyper.epochs) {
            let (obj, overload) = plan_quality(nets, val)?;
            log::debug!("epoch {}: validation objective {obj:.3}, overload {overload:.3}", epoch + 1);
            if overload <= hyper.overload_tolerance && best.as_ref().map_or(true, |b| obj < b.0) {
                best = Some((obj, nets.clone()));
            }
        }
    }
    if let Some((_, kept)) = best {
        *nets = kept;
    }
    Ok(trace)
}

/// Mean `‖Ŝ‖₁` and worst overload over `samples`, without the LP.
fn plan_quality(nets: &PraNets, samples: &[PraSample]) -> Result<(f64, f64)> {
    let (mut obj, mut worst) = (0.0, 0.0f64);
    for s in samples {
        let rep = evaluate_plan(&infer_plan(nets, s)?, &s.rates, &s.assoc)?;
        obj += rep.objective;
        worst = worst.max(rep.max_overload);
    }
    Ok((obj / samples.len() as f64, worst))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PraEvaluation {
    /// Samples with a feasible LP (the rest are skipped).
    pub evaluated: usize,
    pub mean_objective: f64,
    pub mean_lp_objective: f64,
    /// `mean_objective / mean_lp_objective − 1`.
    pub loss: f64,
    pub median_sample_loss: f64,
    pub max_overload: f64,
    pub max_qos_residual: f64,
    pub mean_edf_time: f64,
}

pub fn evaluate_pra(nets: &PraNets, samples: &[PraSample], cfg: &PraConfig) -> Result<PraEvaluation> {
    let (mut obj, mut lp, mut edf) = (0.0, 0.0, 0.0);
    let mut per = Vec::new();
    let mut max_overload: f64 = 0.0;
    let mut max_qos: f64 = 0.0;
    let mut rng = rng::seeded(0);
    for s in samples {
        let opt = lp_solve_p1(&s.rates, &s.assoc)?;
        if opt.status != LpStatus::Optimal {
            continue;
        }
        let plan = infer_plan(nets, s)?;
        let rep = evaluate_plan(&plan, &s.rates, &s.assoc)?;
        let e = edf_baseline(&s.assoc, &s.rates, cfg, &EdfOptions::default(), None, &mut rng)?;
        obj += rep.objective;
        lp += opt.objective;
        edf += e.total_time;
        per.push(rep.objective / opt.objective - 1.0);
        max_overload = max_overload.max(rep.max_overload);
        max_qos = max_qos.max(rep.max_qos_residual);
    }
    if per.is_empty() {
        return Err(Error::contract("no feasible test sample"));
    }
    let n = per.len() as f64;
    per.sort_by(f64::total_cmp);
    Ok(PraEvaluation {
        evaluated: per.len(),
        mean_objective: obj / n,
        mean_lp_objective: lp / n,
        loss: obj / lp - 1.0,
        median_sample_loss: per[per.len() / 2],
        max_overload,
        max_qos_residual: max_qos,
        mean_edf_time: edf / n,
    })
}

/// Zero-padded dual input `x̃_i` of one sample and base station.
pub fn dual_input(sample: &PraSample, bs: usize, k_max: usize) -> Result<Tensor> {
    let t_f = sample.assoc.t_f;
    let b = PraBatch::new(&[sample], sample.assoc.n_b, t_f, k_max)?;
    Tensor::vector(b.dual_in.data()[bs * k_max * t_f..(bs + 1) * k_max * t_f].to_vec())
        .into_reshape(&[k_max * t_f])
}
