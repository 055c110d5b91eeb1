use super::channel::{check_channel, sum_rate, IcConfig};
use crate::numcore::Tensor;
use crate::{Error, Result};

/// Best point of the uniform grid `{0, 1/(m−1), …, 1}^K` under `sum_rate`.
///
/// Ties go to the lower total power. Returns the powers and their sum-rate.
pub fn grid_oracle(x: &Tensor, ic: &IcConfig, points: usize) -> Result<(Vec<f64>, f64)> {
    let k = check_channel(x)?;
    if k > 3 {
        return Err(Error::contract(format!("grid search over K = {k} links is too large (K ≤ 3)")));
    }
    if points < 2 {
        return Err(Error::contract("the grid needs at least two points per link"));
    }
    let step = 1.0 / (points - 1) as f64;
    let mut idx = vec![0usize; k];
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    loop {
        let y: Vec<f64> = idx.iter().map(|&i| i as f64 * step).collect();
        let r = sum_rate(x, &y, ic)?;
        let power: f64 = y.iter().sum();
        let better = match &best {
            None => true,
            Some((_, br, bp)) => r > *br || (r == *br && power < *bp),
        };
        if better {
            best = Some((y, r, power));
        }
        let mut d = 0;
        while d < k {
            idx[d] += 1;
            if idx[d] < points {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
        if d == k {
            break;
        }
    }
    let (y, r, _) = best.expect("grid is non-empty");
    Ok((y, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intercoord::generate_channels;
    use crate::rng::seeded;

    #[test]
    fn single_link_full_power() {
        let x = Tensor::matrix(1, 1, vec![1.3]).unwrap();
        assert_eq!(grid_oracle(&x, &IcConfig::default(), 11).unwrap().0, vec![1.0]);
    }

    #[test]
    fn symmetric_strong_interference_is_on_off() {
        let x = Tensor::from_rows(&[&[1.0, 3.0], &[3.0, 1.0]]);
        let ic = IcConfig { p_max: 10.0, ..IcConfig::default() };
        let (y, _) = grid_oracle(&x, &ic, 101).unwrap();
        assert!(y.contains(&0.0) && y.contains(&1.0), "{y:?}");
    }

    #[test]
    fn finer_nested_grid_never_worse() {
        let mut rng = seeded(2);
        for _ in 0..10 {
            let x = generate_channels(2, &mut rng).unwrap();
            let ic = IcConfig::default();
            let coarse = grid_oracle(&x, &ic, 11).unwrap().1;
            let fine = grid_oracle(&x, &ic, 101).unwrap().1;
            assert!(fine >= coarse);
        }
        assert!(grid_oracle(&Tensor::filled(&[4, 4], 1.0), &IcConfig::default(), 3).is_err());
    }
}
