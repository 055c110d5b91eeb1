use serde::{Deserialize, Serialize};

use super::channel::{check_channel, sum_rate, IcConfig};
use crate::numcore::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WmmseConfig {
    pub max_iterations: usize,
    /// Stop once the surrogate `Σ log w_k` moves less than this.
    pub tolerance: f64,
}

impl Default for WmmseConfig {
    fn default() -> Self {
        WmmseConfig { max_iterations: 500, tolerance: 1e-6 }
    }
}

/// Result of one WMMSE run.
#[derive(Debug, Clone, PartialEq)]
pub struct WmmseRun {
    /// Normalized powers `v_k² / P_max`.
    pub y: Vec<f64>,
    pub iterations: usize,
    /// Sum-rate at the initial point and after every iteration.
    pub trace: Vec<f64>,
}

/// Receiver gains and MSE weights for amplitudes `v`.
fn receivers(x: &Tensor, v: &[f64], noise: f64) -> (Vec<f64>, Vec<f64>) {
    let k = v.len();
    let mut u = vec![0.0; k];
    let mut w = vec![0.0; k];
    for rx in 0..k {
        let total: f64 = (0..k).map(|tx| (x.at2(tx, rx) * v[tx]).powi(2)).sum::<f64>() + noise;
        let h = x.at2(rx, rx);
        u[rx] = h * v[rx] / total;
        // 1 / (1 - u h v) = total / (total - h² v²) = 1 + SINR
        w[rx] = total / (total - (h * v[rx]).powi(2));
    }
    (u, w)
}

/// WMMSE block-coordinate ascent from full power, recording the sum-rate of
/// every iterate.
pub fn wmmse_run(x: &Tensor, ic: &IcConfig, cfg: &WmmseConfig) -> Result<WmmseRun> {
    let k = check_channel(x)?;
    ic.validate()?;
    if !(cfg.tolerance > 0.0) {
        return Err(Error::Config { field: "tolerance".into(), message: "must be positive".into() });
    }
    let vmax = ic.p_max.sqrt();
    let mut v = vec![vmax; k];
    let norm = |v: &[f64]| v.iter().map(|a| (a * a / ic.p_max).min(1.0)).collect::<Vec<_>>();
    let mut trace = vec![sum_rate(x, &norm(&v), ic)?];
    let (mut u, mut w) = receivers(x, &v, ic.noise);
    let mut surrogate: f64 = w.iter().map(|a| a.ln()).sum();
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        for tx in 0..k {
            let den: f64 = (0..k).map(|rx| w[rx] * (u[rx] * x.at2(tx, rx)).powi(2)).sum();
            let num = w[tx] * u[tx] * x.at2(tx, tx);
            v[tx] = if den > 0.0 { (num / den).clamp(0.0, vmax) } else { 0.0 };
        }
        (u, w) = receivers(x, &v, ic.noise);
        trace.push(sum_rate(x, &norm(&v), ic)?);
        let next: f64 = w.iter().map(|a| a.ln()).sum();
        let done = (next - surrogate).abs() < cfg.tolerance;
        surrogate = next;
        if done {
            break;
        }
    }
    Ok(WmmseRun { y: norm(&v), iterations, trace })
}

/// Normalized WMMSE powers for channel `x`.
pub fn wmmse_solve(x: &Tensor, ic: &IcConfig, cfg: &WmmseConfig) -> Result<Vec<f64>> {
    Ok(wmmse_run(x, ic, cfg)?.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intercoord::generate_channels;
    use crate::rng::seeded;

    #[test]
    fn single_link_uses_full_power() {
        let x = Tensor::matrix(1, 1, vec![0.7]).unwrap();
        let y = wmmse_solve(&x, &IcConfig::default(), &WmmseConfig::default()).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn monotone_and_bounded() {
        let ic = IcConfig::default();
        let mut rng = seeded(5);
        for k in [2, 5, 10] {
            for _ in 0..20 {
                let x = generate_channels(k, &mut rng).unwrap();
                let run = wmmse_run(&x, &ic, &WmmseConfig::default()).unwrap();
                assert!(run.trace.windows(2).all(|p| p[1] >= p[0] - 1e-9));
                assert!(run.y.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn strong_interference_switches_one_off() {
        let x = Tensor::from_rows(&[&[1.0, 3.0], &[3.0, 1.0]]);
        let ic = IcConfig { p_max: 10.0, ..IcConfig::default() };
        let y = wmmse_solve(&x, &ic, &WmmseConfig::default()).unwrap();
        let r = sum_rate(&x, &y, &ic).unwrap();
        assert!(r >= sum_rate(&x, &[1.0, 1.0], &ic).unwrap());
    }
}
