//! Dense primal-dual interior-point solver for standard-form linear
//! programs, and the P1 allocation problem built on top of it.

use serde::{Deserialize, Serialize};

use super::Association;
use crate::numcore::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    /// Iteration limit reached without meeting the tolerances.
    NotConverged,
}

#[derive(Debug, Clone)]
pub struct LpOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LpOptions {
    fn default() -> Self {
        LpOptions { tol: 1e-10, max_iter: 200 }
    }
}

/// Result of `min cᵀx s.t. Ax = b, x ≥ 0`.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    /// Equality multipliers.
    pub y: Vec<f64>,
    /// Reduced costs.
    pub z: Vec<f64>,
    pub objective: f64,
    /// `max |Ax − b|`.
    pub primal_residual: f64,
    /// `max |Aᵀy + z − c|`.
    pub dual_residual: f64,
    /// `|cᵀx − bᵀy| / (1 + |cᵀx|)`.
    pub relative_gap: f64,
    pub iterations: usize,
    /// For infeasible problems, `y` with `Aᵀy ≤ 0` and `bᵀy > 0`.
    pub farkas: Option<Vec<f64>>,
}

/// Dense `m × n` row-major problem data.
#[derive(Debug, Clone)]
pub struct StandardLp {
    pub m: usize,
    pub n: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl StandardLp {
    fn ax(&self, x: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|i| self.a[i * self.n..(i + 1) * self.n].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn aty(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                for (o, a) in out.iter_mut().zip(&self.a[i * self.n..(i + 1) * self.n]) {
                    *o += a * yi;
                }
            }
        }
        out
    }

    /// `A·diag(d)·Aᵀ`.
    fn normal_matrix(&self, d: &[f64]) -> Vec<f64> {
        let (m, n) = (self.m, self.n);
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            let ri = &self.a[i * n..(i + 1) * n];
            for j in 0..=i {
                let rj = &self.a[j * n..(j + 1) * n];
                let v: f64 = ri.iter().zip(rj).zip(d).map(|((a, b), w)| a * b * w).sum();
                out[i * m + j] = v;
                out[j * m + i] = v;
            }
        }
        out
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place lower Cholesky factor of a symmetric positive (semi)definite
/// matrix. Tiny or negative pivots are replaced by a large value, which
/// effectively drops the corresponding direction.
fn cholesky(mut m: Vec<f64>, n: usize) -> Vec<f64> {
    let scale = (0..n).map(|i| m[i * n + i].abs()).fold(0.0, f64::max).max(1e-300);
    for j in 0..n {
        let mut d = m[j * n + j];
        for k in 0..j {
            d -= m[j * n + k] * m[j * n + k];
        }
        let d = if d > 1e-14 * scale { d.sqrt() } else { 1e64 };
        m[j * n + j] = d;
        for i in j + 1..n {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= m[i * n + k] * m[j * n + k];
            }
            m[i * n + j] = s / d;
        }
    }
    m
}

fn cholesky_solve(l: &[f64], n: usize, rhs: &[f64]) -> Vec<f64> {
    let mut y = rhs.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

/// Mehrotra predictor-corrector on the normal equations.
fn interior_point(lp: &StandardLp, opts: &LpOptions) -> LpSolution {
    let (m, n) = (lp.m, lp.n);
    // Mehrotra's starting point
    let ones = vec![1.0; n];
    let l0 = cholesky(lp.normal_matrix(&ones), m);
    let w = cholesky_solve(&l0, m, &lp.b);
    let mut x = lp.aty(&w);
    let mut y = cholesky_solve(&l0, m, &lp.ax(&lp.c));
    let aty = lp.aty(&y);
    let mut z: Vec<f64> = lp.c.iter().zip(&aty).map(|(c, a)| c - a).collect();
    let dx = (-1.5 * x.iter().cloned().fold(f64::INFINITY, f64::min)).max(0.0);
    let dz = (-1.5 * z.iter().cloned().fold(f64::INFINITY, f64::min)).max(0.0);
    x.iter_mut().for_each(|v| *v += dx);
    z.iter_mut().for_each(|v| *v += dz);
    let xz = dot(&x, &z);
    let sx: f64 = x.iter().sum::<f64>().max(1e-12);
    let sz: f64 = z.iter().sum::<f64>().max(1e-12);
    let (ex, ez) = (0.5 * xz / sz + 1e-3, 0.5 * xz / sx + 1e-3);
    x.iter_mut().for_each(|v| *v += ex);
    z.iter_mut().for_each(|v| *v += ez);

    let bnorm = 1.0 + inf_norm(&lp.b);
    let cnorm = 1.0 + inf_norm(&lp.c);
    let mut iterations = 0;
    let mut status = LpStatus::NotConverged;
    for it in 0..opts.max_iter {
        iterations = it;
        let rb: Vec<f64> = lp.ax(&x).iter().zip(&lp.b).map(|(a, b)| a - b).collect();
        let aty = lp.aty(&y);
        let rc: Vec<f64> = (0..n).map(|j| aty[j] + z[j] - lp.c[j]).collect();
        let pobj = dot(&lp.c, &x);
        let dobj = dot(&lp.b, &y);
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs());
        if inf_norm(&rb) / bnorm < opts.tol && inf_norm(&rc) / cnorm < opts.tol && gap < opts.tol {
            status = LpStatus::Optimal;
            break;
        }
        if !(pobj.is_finite() && dobj.is_finite()) || inf_norm(&x) > 1e30 || inf_norm(&y) > 1e30 {
            break;
        }
        let mu = dot(&x, &z) / n as f64;
        let d: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a / b).collect();
        let l = cholesky(lp.normal_matrix(&d), m);

        // rxz is the right-hand side of Z·dx + X·dz = rxz
        let solve = |rxz: &[f64]| {
            let t: Vec<f64> = (0..n).map(|j| rxz[j] / z[j] + d[j] * rc[j]).collect();
            let at = lp.ax(&t);
            let rhs: Vec<f64> = (0..m).map(|i| -rb[i] - at[i]).collect();
            let dy = cholesky_solve(&l, m, &rhs);
            let atdy = lp.aty(&dy);
            let dz: Vec<f64> = (0..n).map(|j| -rc[j] - atdy[j]).collect();
            let dx: Vec<f64> = (0..n).map(|j| (rxz[j] - x[j] * dz[j]) / z[j]).collect();
            (dx, dy, dz)
        };

        let aff: Vec<f64> = (0..n).map(|j| -x[j] * z[j]).collect();
        let (dxa, _, dza) = solve(&aff);
        let ap = max_step(&x, &dxa).min(1.0);
        let ad = max_step(&z, &dza).min(1.0);
        let mu_aff: f64 = (0..n)
            .map(|j| (x[j] + ap * dxa[j]) * (z[j] + ad * dza[j]))
            .sum::<f64>()
            / n as f64;
        let sigma = (mu_aff / mu).powi(3).min(1.0);
        let corr: Vec<f64> = (0..n)
            .map(|j| -x[j] * z[j] + sigma * mu - dxa[j] * dza[j])
            .collect();
        let (dx, dy, dz) = solve(&corr);
        let eta = (1.0 - mu).clamp(0.9, 0.999);
        let ap = (eta * max_step(&x, &dx)).min(1.0);
        let ad = (eta * max_step(&z, &dz)).min(1.0);
        for j in 0..n {
            x[j] += ap * dx[j];
            z[j] += ad * dz[j];
        }
        for i in 0..m {
            y[i] += ad * dy[i];
        }
    }
    let rb: Vec<f64> = lp.ax(&x).iter().zip(&lp.b).map(|(a, b)| a - b).collect();
    let aty = lp.aty(&y);
    let rc: Vec<f64> = (0..n).map(|j| aty[j] + z[j] - lp.c[j]).collect();
    let objective = dot(&lp.c, &x);
    LpSolution {
        status,
        primal_residual: inf_norm(&rb),
        dual_residual: inf_norm(&rc),
        relative_gap: (objective - dot(&lp.b, &y)).abs() / (1.0 + objective.abs()),
        objective,
        x,
        y,
        z,
        iterations,
        farkas: None,
    }
}

/// Solves `min cᵀx s.t. Ax = b, x ≥ 0`.
///
/// When the main solve does not converge, a phase-one problem
/// `min 1ᵀa s.t. Ax + Sa = b` (with `S` the sign of `b`) decides
/// feasibility; a positive optimum marks the problem infeasible and its
/// multipliers form the certificate.
pub fn solve_standard(lp: &StandardLp, opts: &LpOptions) -> Result<LpSolution> {
    if lp.a.len() != lp.m * lp.n || lp.b.len() != lp.m || lp.c.len() != lp.n {
        return Err(Error::shape("LP data sizes do not match m and n"));
    }
    if lp.a.iter().chain(&lp.b).chain(&lp.c).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("LP data".into()));
    }
    let sol = interior_point(lp, opts);
    if sol.status == LpStatus::Optimal {
        return Ok(sol);
    }
    let (m, n) = (lp.m, lp.n);
    let mut a = vec![0.0; m * (n + m)];
    for i in 0..m {
        a[i * (n + m)..i * (n + m) + n].copy_from_slice(&lp.a[i * n..(i + 1) * n]);
        a[i * (n + m) + n + i] = if lp.b[i] < 0.0 { -1.0 } else { 1.0 };
    }
    let mut c = vec![0.0; n + m];
    c[n..].iter_mut().for_each(|v| *v = 1.0);
    let phase1 = StandardLp { m, n: n + m, a, b: lp.b.clone(), c };
    let p1 = interior_point(&phase1, opts);
    if p1.status == LpStatus::Optimal && p1.objective > 1e-7 {
        return Ok(LpSolution {
            status: LpStatus::Infeasible,
            farkas: Some(p1.y.clone()),
            ..sol
        });
    }
    Ok(sol)
}

/// Solution of the allocation problem.
#[derive(Debug, Clone)]
pub struct P1Solution {
    pub status: LpStatus,
    /// `[t_f × k]`.
    pub plan: Tensor,
    pub objective: f64,
    pub primal_residual: f64,
    pub relative_gap: f64,
    pub iterations: usize,
}

/// `min ‖S‖₁ s.t. Σ_j s_kj r_kj = 1 per user, per-BS-frame load ≤ 1, S ≥ 0`.
///
/// `rates` is `[t_f × k]`. Base-station frames without users carry no
/// constraint. A user whose rates are all zero makes the problem infeasible.
pub fn lp_solve_p1(rates: &Tensor, assoc: &Association) -> Result<P1Solution> {
    if rates.shape() != [assoc.t_f, assoc.k] {
        return Err(Error::shape(format!(
            "rates {:?} do not match association {}×{}",
            rates.shape(),
            assoc.t_f,
            assoc.k
        )));
    }
    let (t_f, k) = (assoc.t_f, assoc.k);
    let infeasible = || P1Solution {
        status: LpStatus::Infeasible,
        plan: Tensor::zeros(&[t_f, k]),
        objective: f64::NAN,
        primal_residual: f64::NAN,
        relative_gap: f64::NAN,
        iterations: 0,
    };
    if (0..k).any(|u| (0..t_f).all(|j| rates.at2(j, u) <= 0.0)) {
        return Ok(infeasible());
    }
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for i in 0..assoc.n_b {
        for j in 0..t_f {
            if (0..k).any(|u| assoc.bs(j, u) == i) {
                groups.push((i, j));
            }
        }
    }
    let nv = t_f * k;
    let n = nv + groups.len();
    let m = k + groups.len();
    let mut a = vec![0.0; m * n];
    for u in 0..k {
        for j in 0..t_f {
            a[u * n + j * k + u] = rates.at2(j, u);
        }
    }
    for (g, &(i, j)) in groups.iter().enumerate() {
        let row = (k + g) * n;
        for u in 0..k {
            if assoc.bs(j, u) == i {
                a[row + j * k + u] = 1.0;
            }
        }
        a[row + nv + g] = 1.0;
    }
    let mut c = vec![0.0; n];
    c[..nv].iter_mut().for_each(|v| *v = 1.0);
    let lp = StandardLp { m, n, a, b: vec![1.0; m], c };
    let sol = solve_standard(&lp, &LpOptions::default())?;
    if sol.status == LpStatus::Infeasible {
        return Ok(P1Solution { iterations: sol.iterations, ..infeasible() });
    }
    let plan: Vec<f64> = sol.x[..nv].iter().map(|v| v.max(0.0)).collect();
    Ok(P1Solution {
        status: sol.status,
        plan: Tensor::matrix(t_f, k, plan)?,
        objective: sol.objective,
        primal_residual: sol.primal_residual,
        relative_gap: sol.relative_gap,
        iterations: sol.iterations,
    })
}

/// Brute-force optimum of P1 for two frames.
///
/// Each user's share of the file delivered in frame 0 runs over
/// `{0, h, ..., 1}` with `h = 1/steps`; frame 1 delivers the rest. Returns
/// `None` when no grid point is feasible.
pub fn p1_grid_oracle(rates: &Tensor, assoc: &Association, steps: usize) -> Result<Option<f64>> {
    if assoc.t_f != 2 || rates.shape() != [2, assoc.k] || assoc.k > 3 {
        return Err(Error::contract("grid oracle covers two frames and at most three users"));
    }
    let k = assoc.k;
    // time needed for a share t in frame j
    let need = |u: usize, j: usize, share: f64| -> Option<f64> {
        if share == 0.0 {
            Some(0.0)
        } else if rates.at2(j, u) > 0.0 {
            Some(share / rates.at2(j, u))
        } else {
            None
        }
    };
    let mut best: Option<f64> = None;
    let total = (steps + 1).pow(k as u32);
    let mut s = vec![[0.0f64; 2]; k];
    'outer: for idx in 0..total {
        let mut rest = idx;
        for (u, su) in s.iter_mut().enumerate() {
            let t = (rest % (steps + 1)) as f64 / steps as f64;
            rest /= steps + 1;
            match (need(u, 0, t), need(u, 1, 1.0 - t)) {
                (Some(a), Some(b)) => *su = [a, b],
                _ => continue 'outer,
            }
        }
        for j in 0..2 {
            for i in 0..assoc.n_b {
                let load: f64 = (0..k).filter(|&u| assoc.bs(j, u) == i).map(|u| s[u][j]).sum();
                if load > 1.0 + 1e-12 {
                    continue 'outer;
                }
            }
        }
        let obj: f64 = s.iter().map(|v| v[0] + v[1]).sum();
        if best.is_none_or(|b| obj < b) {
            best = Some(obj);
        }
    }
    Ok(best)
}
