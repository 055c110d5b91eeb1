use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;
use crate::rng::Rng;
use crate::{Error, Result};

/// Power budget, noise and rate units of the interference channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcConfig {
    pub p_max: f64,
    pub noise: f64,
    /// Rates in bits instead of nats.
    pub log2: bool,
}

impl Default for IcConfig {
    fn default() -> Self {
        IcConfig { p_max: 1.0, noise: 1.0, log2: false }
    }
}

impl IcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_max > 0.0 && self.p_max.is_finite()) {
            return Err(Error::Config { field: "p_max".into(), message: "must be positive".into() });
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(Error::Config { field: "noise".into(), message: "must be positive".into() });
        }
        Ok(())
    }
}

/// `K×K` Rayleigh magnitudes with unit mean square. Row = transmitter,
/// column = receiver.
pub fn generate_channels(k: usize, rng: &mut Rng) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::contract("a channel needs at least one link"));
    }
    let n = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid normal");
    let data = (0..k * k)
        .map(|_| {
            let (re, im): (f64, f64) = (n.sample(rng), n.sample(rng));
            re.hypot(im)
        })
        .collect();
    Tensor::matrix(k, k, data)
}

pub(crate) fn check_channel(x: &Tensor) -> Result<usize> {
    match x.shape() {
        [r, c] if r == c && *r > 0 => {}
        s => return Err(Error::shape(format!("channel must be a non-empty square matrix, got {s:?}"))),
    }
    if x.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::contract("channel magnitudes must be finite and non-negative"));
    }
    Ok(x.rows())
}

/// `Σ_k log(1 + γ_kk²·p_k / (Σ_{n≠k} γ_nk²·p_n + σ₀²))` with `p = y·P_max`.
pub fn sum_rate(x: &Tensor, y: &[f64], cfg: &IcConfig) -> Result<f64> {
    let k = check_channel(x)?;
    if y.len() != k {
        return Err(Error::shape(format!("{} powers for {k} links", y.len())));
    }
    let mut total = 0.0;
    for rx in 0..k {
        let interference: f64 = (0..k)
            .filter(|&tx| tx != rx)
            .map(|tx| x.at2(tx, rx).powi(2) * y[tx] * cfg.p_max)
            .sum();
        let signal = x.at2(rx, rx).powi(2) * y[rx] * cfg.p_max;
        total += (signal / (interference + cfg.noise)).ln_1p();
    }
    Ok(if cfg.log2 { total / std::f64::consts::LN_2 } else { total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn hand_examples() {
        let cfg = IcConfig::default();
        let x = Tensor::filled(&[2, 2], 1.0);
        assert_eq!(sum_rate(&x, &[0.0, 0.0], &cfg).unwrap(), 0.0);
        assert!((sum_rate(&x, &[1.0, 1.0], &cfg).unwrap() - 2.0 * 1.5f64.ln()).abs() < 1e-15);
        assert!((sum_rate(&x, &[1.0, 1.0], &cfg).unwrap() - 0.8109).abs() < 1e-4);
        let one = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let c = IcConfig { p_max: 3.0, noise: 0.5, log2: false };
        assert!((sum_rate(&one, &[1.0], &c).unwrap() - (1.0f64 + 12.0 / 0.5).ln()).abs() < 1e-15);
        let bits = IcConfig { log2: true, ..cfg };
        assert!((sum_rate(&x, &[1.0, 1.0], &bits).unwrap() - 2.0 * 1.5f64.log2()).abs() < 1e-15);
    }

    #[test]
    fn rayleigh_mean_square() {
        let mut rng = seeded(11);
        let mut acc = 0.0;
        let mut n = 0;
        while n < 100_000 {
            let x = generate_channels(10, &mut rng).unwrap();
            assert!(x.data().iter().all(|&v| v >= 0.0));
            acc += x.data().iter().map(|v| v * v).sum::<f64>();
            n += 100;
        }
        assert!((acc / n as f64 - 1.0).abs() < 0.02);
        assert_eq!(generate_channels(3, &mut seeded(4)).unwrap(), generate_channels(3, &mut seeded(4)).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(generate_channels(0, &mut seeded(0)).is_err());
        let x = Tensor::filled(&[2, 2], 1.0);
        assert!(sum_rate(&x, &[1.0], &IcConfig::default()).is_err());
        let neg = Tensor::from_rows(&[&[1.0, -1.0], &[0.0, 1.0]]);
        assert!(sum_rate(&neg, &[1.0, 1.0], &IcConfig::default()).is_err());
    }
}
