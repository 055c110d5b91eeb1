use serde::{Deserialize, Serialize};

use super::Association;
use crate::numcore::Tensor;
use crate::{Error, Result};

/// Scales one user's raw plan so that `Σ_j s_j·r_j = 1`.
pub fn normalize_plan(raw: &[f64], rates: &[f64], user: usize) -> Result<Vec<f64>> {
    if raw.len() != rates.len() {
        return Err(Error::shape(format!(
            "plan has {} frames but rates have {}",
            raw.len(),
            rates.len()
        )));
    }
    if rates.iter().all(|&r| r == 0.0) {
        return Err(Error::DegenerateUser { user });
    }
    let total: f64 = raw.iter().zip(rates).map(|(s, r)| s * r).sum();
    if !(total > 0.0) {
        return Err(Error::contract(format!(
            "user {user}: raw plan delivers nothing"
        )));
    }
    Ok(raw.iter().map(|s| s / total).collect())
}

/// Per-base-station, per-frame allocated time `[n_b × t_f]`.
pub fn loads(plan: &Tensor, assoc: &Association) -> Tensor {
    let mut out = Tensor::zeros(&[assoc.n_b, assoc.t_f]);
    for j in 0..assoc.t_f {
        for u in 0..assoc.k {
            let i = assoc.bs(j, u);
            let v = out.at2(i, j) + plan.at2(j, u);
            out.set2(i, j, v);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParts {
    pub l1: f64,
    pub dual: f64,
    pub penalty: f64,
}

impl CostParts {
    pub fn total(&self) -> f64 {
        self.l1 + self.dual + self.penalty
    }
}

/// Batch mean of `Σ_i [‖s_i‖₁ + ν_iᵀ(load_i − 1) + (ρ/2)‖(load_i − 1)⁺‖²]`.
///
/// `plans[n]` is sample `n`'s normalized `[t_f × k]` plan, `duals[n]` its
/// multipliers `[n_b × t_f]`.
pub fn pra_cost(
    plans: &[Tensor],
    duals: &[Tensor],
    assoc: &[Association],
    rho: f64,
) -> Result<CostParts> {
    if plans.len() != duals.len() || plans.len() != assoc.len() {
        return Err(Error::shape("plans, duals and associations differ in count"));
    }
    let mut acc = CostParts { l1: 0.0, dual: 0.0, penalty: 0.0 };
    for ((s, nu), a) in plans.iter().zip(duals).zip(assoc) {
        if s.shape() != [a.t_f, a.k] || nu.shape() != [a.n_b, a.t_f] {
            return Err(Error::shape(format!(
                "plan {:?} / duals {:?} do not match a {}-BS, {}-frame, {}-user sample",
                s.shape(),
                nu.shape(),
                a.n_b,
                a.t_f,
                a.k
            )));
        }
        let load = loads(s, a);
        acc.l1 += s.data().iter().map(|v| v.abs()).sum::<f64>();
        for (l, v) in load.data().iter().zip(nu.data()) {
            let viol = l - 1.0;
            acc.dual += v * viol;
            acc.penalty += 0.5 * rho * viol.max(0.0).powi(2);
        }
    }
    let n = plans.len().max(1) as f64;
    Ok(CostParts { l1: acc.l1 / n, dual: acc.dual / n, penalty: acc.penalty / n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    /// `‖S‖₁`, the total allocated time in frames.
    pub objective: f64,
    /// `|Σ_j s_kj r_kj − 1|` per user.
    pub qos_residuals: Vec<f64>,
    pub max_qos_residual: f64,
    /// `max (load − 1)` over base-station frames that have users.
    pub max_load_excess: f64,
    /// `max(0, max_load_excess)`.
    pub max_overload: f64,
}

pub fn evaluate_plan(plan: &Tensor, rates: &Tensor, assoc: &Association) -> Result<PlanReport> {
    let dims = [assoc.t_f, assoc.k];
    if plan.shape() != dims || rates.shape() != dims {
        return Err(Error::shape(format!(
            "plan {:?} and rates {:?} must be {dims:?}",
            plan.shape(),
            rates.shape()
        )));
    }
    let qos_residuals: Vec<f64> = (0..assoc.k)
        .map(|u| {
            let d: f64 = (0..assoc.t_f).map(|j| plan.at2(j, u) * rates.at2(j, u)).sum();
            (d - 1.0).abs()
        })
        .collect();
    let load = loads(plan, assoc);
    let mut used = vec![false; assoc.n_b * assoc.t_f];
    for j in 0..assoc.t_f {
        for u in 0..assoc.k {
            used[assoc.bs(j, u) * assoc.t_f + j] = true;
        }
    }
    let max_load_excess = load
        .data()
        .iter()
        .zip(&used)
        .filter(|(_, u)| **u)
        .map(|(l, _)| l - 1.0)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(PlanReport {
        objective: plan.data().iter().sum(),
        max_qos_residual: qos_residuals.iter().cloned().fold(0.0, f64::max),
        qos_residuals,
        max_load_excess,
        max_overload: max_load_excess.max(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_plan(&[1.0, 1.0], &[2.0, 2.0], 0).unwrap(), vec![0.25, 0.25]);
        assert_eq!(normalize_plan(&[1.0, 3.0], &[1.0, 1.0], 0).unwrap(), vec![0.25, 0.75]);
        let a = normalize_plan(&[0.3, 1.7, 0.2], &[0.5, 2.0, 1.0], 0).unwrap();
        let b = normalize_plan(&[3.0, 17.0, 2.0], &[0.5, 2.0, 1.0], 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(matches!(
            normalize_plan(&[1.0, 1.0], &[0.0, 0.0], 3),
            Err(Error::DegenerateUser { user: 3 })
        ));
    }

    #[test]
    fn cost_hand_case() {
        let a = Association::new(1, 1, 2, vec![0, 0]).unwrap();
        let plan = Tensor::matrix(1, 2, vec![0.75, 0.75]).unwrap();
        let nu = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let c = pra_cost(&[plan], &[nu], &[a.clone()], 2.0).unwrap();
        assert!((c.dual - 0.5).abs() < 1e-15);
        assert!((c.penalty - 0.25).abs() < 1e-15);
        assert!((c.l1 - 1.5).abs() < 1e-15);

        let zero = pra_cost(&[Tensor::zeros(&[1, 2])], &[Tensor::zeros(&[1, 1])], &[a.clone()], 2.0)
            .unwrap();
        assert_eq!(zero.l1 + zero.penalty, 0.0);
        assert_eq!(zero.dual, 0.0);

        let feasible = Tensor::matrix(1, 2, vec![0.5, 0.25]).unwrap();
        let c = pra_cost(&[feasible], &[Tensor::zeros(&[1, 1])], &[a], 10.0).unwrap();
        assert_eq!(c.penalty, 0.0);
    }

    #[test]
    fn zero_plan_report() {
        let a = Association::new(2, 2, 2, vec![0, 1, 1, 1]).unwrap();
        let r = Tensor::filled(&[2, 2], 1.0);
        let rep = evaluate_plan(&Tensor::zeros(&[2, 2]), &r, &a).unwrap();
        assert_eq!(rep.qos_residuals, vec![1.0, 1.0]);
        assert_eq!(rep.objective, 0.0);
        assert_eq!(rep.max_overload, 0.0);
        assert_eq!(rep.max_load_excess, -1.0);
    }
}
