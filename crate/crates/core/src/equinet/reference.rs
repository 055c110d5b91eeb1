//! Literal evaluation of the general equivariant function forms, used as
//! test oracles. Blocks are passed as flat slices; the component functions
//! are arbitrary closures.

use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;
use crate::{Error, Result};

/// Commutative elementwise reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reducer {
    Sum,
    Product,
    Max,
    Min,
}

impl Reducer {
    /// Only commutative reductions are accepted.
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sum" => Ok(Reducer::Sum),
            "product" => Ok(Reducer::Product),
            "max" => Ok(Reducer::Max),
            "min" => Ok(Reducer::Min),
            other => Err(Error::contract(format!(
                "reducer {other:?} is not a supported commutative operation"
            ))),
        }
    }

    fn identity(self) -> f64 {
        match self {
            Reducer::Sum => 0.0,
            Reducer::Product => 1.0,
            Reducer::Max => f64::NEG_INFINITY,
            Reducer::Min => f64::INFINITY,
        }
    }

    fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            Reducer::Sum => a + b,
            Reducer::Product => a * b,
            Reducer::Max => a.max(b),
            Reducer::Min => a.min(b),
        }
    }

    /// Reduces equal-length vectors elementwise. An empty input yields the
    /// identity element repeated `width` times.
    pub fn reduce<I: IntoIterator<Item = Vec<f64>>>(self, items: I, width: usize) -> Vec<f64> {
        let mut acc = vec![self.identity(); width];
        for v in items {
            for (a, b) in acc.iter_mut().zip(v) {
                *a = self.combine(*a, b);
            }
        }
        acc
    }
}

fn split_1d(x: &Tensor, k: usize) -> Result<usize> {
    if k == 0 || x.ndim() != 1 || x.len() % k != 0 {
        return Err(Error::shape(format!("{:?} does not split into {k} blocks", x.shape())));
    }
    Ok(x.len() / k)
}

/// `y_k = η(ψ(x_k), F_{n≠k} φ(x_n))`.
///
/// `phi_width` is the output length of `phi`, needed for the empty reduction
/// at `K = 1`.
pub fn reference_pi_1d(
    x: &Tensor,
    k: usize,
    psi: impl Fn(&[f64]) -> Vec<f64>,
    phi: impl Fn(&[f64]) -> Vec<f64>,
    phi_width: usize,
    eta: impl Fn(&[f64], &[f64]) -> Vec<f64>,
    reducer: Reducer,
) -> Result<Tensor> {
    let w = split_1d(x, k)?;
    let blocks: Vec<&[f64]> = x.data().chunks(w).collect();
    let phis: Vec<Vec<f64>> = blocks.iter().map(|b| phi(b)).collect();
    let mut out = Vec::new();
    for kk in 0..k {
        let others = (0..k).filter(|&n| n != kk).map(|n| phis[n].clone());
        let agg = reducer.reduce(others, phi_width);
        out.extend(eta(&psi(blocks[kk]), &agg));
    }
    Ok(Tensor::vector(out))
}

/// Component functions of the 2-D form.
pub struct Pi2dParts<'a> {
    pub psi: &'a dyn Fn(&[f64]) -> Vec<f64>,
    /// Applied to row blocks `x_{kn}`.
    pub phi: &'a dyn Fn(&[f64]) -> Vec<f64>,
    /// Applied to column blocks `x_{nk}`.
    pub xi: &'a dyn Fn(&[f64]) -> Vec<f64>,
    /// Applied to the remaining blocks `x_{mn}`, `m, n ≠ k`.
    pub zeta: &'a dyn Fn(&[f64]) -> Vec<f64>,
    pub eta: &'a dyn Fn(&[f64], &[f64], &[f64], &[f64]) -> Vec<f64>,
    /// Output widths of `phi`, `xi`, `zeta`.
    pub widths: [usize; 3],
    /// Reductions for the row, column and remainder terms.
    pub reducers: [Reducer; 3],
}

/// `y_k = η(ψ(x_kk), F_{n≠k} φ(x_kn), G_{n≠k} ξ(x_nk), H_{m,n≠k} ζ(x_mn))` on a
/// natural `[K·r, K·c]` matrix.
pub fn reference_pi_2d(x: &Tensor, k: usize, block: (usize, usize), parts: &Pi2dParts) -> Result<Tensor> {
    let (r, c) = block;
    if k == 0 || x.shape() != [k * r, k * c] {
        return Err(Error::shape(format!(
            "{:?} is not a {k}×{k} grid of {r}×{c} blocks",
            x.shape()
        )));
    }
    let get = |m: usize, n: usize| -> Vec<f64> {
        let mut b = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                b.push(x.at2(m * r + i, n * c + j));
            }
        }
        b
    };
    let [f, g, h] = parts.reducers;
    let [wf, wg, wh] = parts.widths;
    let mut out = Vec::new();
    for kk in 0..k {
        let own = (parts.psi)(&get(kk, kk));
        let row = f.reduce((0..k).filter(|&n| n != kk).map(|n| (parts.phi)(&get(kk, n))), wf);
        let col = g.reduce((0..k).filter(|&n| n != kk).map(|n| (parts.xi)(&get(n, kk))), wg);
        let rest = h.reduce(
            (0..k)
                .filter(|&m| m != kk)
                .flat_map(|m| (0..k).filter(|&n| n != kk).map(move |n| (m, n)))
                .map(|(m, n)| (parts.zeta)(&get(m, n))),
            wh,
        );
        out.extend((parts.eta)(&own, &row, &col, &rest));
    }
    Ok(Tensor::vector(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    #[test]
    fn identity_parts_give_total_sum() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let y = reference_pi_1d(&x, 3, |b| b.to_vec(), |b| b.to_vec(), 1, add, Reducer::Sum).unwrap();
        assert_eq!(y.data(), &[6.0, 6.0, 6.0]);
    }

    #[test]
    fn empty_reduction_at_k1() {
        let x = Tensor::vector(vec![4.0]);
        for (red, id) in [
            (Reducer::Sum, 0.0),
            (Reducer::Product, 1.0),
            (Reducer::Max, f64::NEG_INFINITY),
            (Reducer::Min, f64::INFINITY),
        ] {
            let y = reference_pi_1d(&x, 1, |b| b.to_vec(), |b| b.to_vec(), 1, |_, r| r.to_vec(), red)
                .unwrap();
            assert_eq!(y.data(), &[id]);
        }
    }

    #[test]
    fn unknown_reducer_rejected() {
        assert!(Reducer::parse("difference").is_err());
        assert_eq!(Reducer::parse("max").unwrap(), Reducer::Max);
    }

    #[test]
    fn two_d_identity_parts() {
        // y_k = x_kk + row sum + col sum + rest sum = total sum
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let id = |b: &[f64]| b.to_vec();
        let eta = |a: &[f64], b: &[f64], c: &[f64], d: &[f64]| vec![a[0] + b[0] + c[0] + d[0]];
        let parts = Pi2dParts {
            psi: &id,
            phi: &id,
            xi: &id,
            zeta: &id,
            eta: &eta,
            widths: [1, 1, 1],
            reducers: [Reducer::Sum; 3],
        };
        let y = reference_pi_2d(&x, 2, (1, 1), &parts).unwrap();
        assert_eq!(y.data(), &[10.0, 10.0]);
    }
}
