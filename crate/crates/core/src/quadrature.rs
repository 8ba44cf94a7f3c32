//! Gauss-Hermite rules for expectations under a standard normal.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("quadrature order must be between 3 and 200, got {0}")]
    InvalidOrder(usize),
    #[error("Newton iteration for Hermite root {0} did not converge")]
    NoConvergence(usize),
}

/// Nodes and weights with `sum_k w_k f(x_k) ~= E[f(X)]`, `X ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn gauss_hermite(order: usize) -> Result<Self, QuadratureError> {
        if !(3..=200).contains(&order) {
            return Err(QuadratureError::InvalidOrder(order));
        }
        let (x, w) = physicists_rule(order)?;
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = x
            .iter()
            .zip(&w)
            .map(|(x, w)| (std::f64::consts::SQRT_2 * x, w / sqrt_pi))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[f(X)]` for `X ~ N(0, 1)`.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(*x))
            .sum()
    }
}

/// Roots and weights for the weight function `exp(-x^2)`, by Newton
/// iteration on the orthonormal Hermite recurrence.
fn physicists_rule(n: usize) -> Result<(Vec<f64>, Vec<f64>), QuadratureError> {
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        let mut converged = false;
        for _ in 0..200 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let jf = j as f64;
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(QuadratureError::NoConvergence(i));
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[m - 1] = 0.0;
    }
    Ok((x, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_three_closed_form() {
        let r = QuadratureRule::gauss_hermite(3).unwrap();
        let s3 = 3f64.sqrt();
        let expected = [(-s3, 1.0 / 6.0), (0.0, 2.0 / 3.0), (s3, 1.0 / 6.0)];
        for (k, (x, w)) in expected.iter().enumerate() {
            assert!((r.nodes()[k] - x).abs() < 1e-14);
            assert!((r.weights()[k] - w).abs() < 1e-14);
        }
    }

    #[test]
    fn weights_sum_to_one_and_nodes_symmetric() {
        for order in [3, 4, 7, 15, 25, 50, 100] {
            let r = QuadratureRule::gauss_hermite(order).unwrap();
            let total: f64 = r.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "order {order}: {total}");
            for k in 0..order {
                assert_eq!(r.nodes()[k], -r.nodes()[order - 1 - k]);
            }
        }
    }

    #[test]
    fn integrates_normal_moments_exactly() {
        // E[X^(2k)] = (2k - 1)!!
        let r = QuadratureRule::gauss_hermite(25).unwrap();
        let mut double_factorial = 1.0;
        for k in 1..=12 {
            double_factorial *= (2 * k - 1) as f64;
            let m = r.expect(|x| x.powi(2 * k));
            assert!((m / double_factorial - 1.0).abs() < 1e-10, "k={k}");
            assert!(r.expect(|x| x.powi(2 * k - 1)).abs() < 1e-12 * double_factorial);
        }
    }

    #[test]
    fn lognormal_mean() {
        let r = QuadratureRule::gauss_hermite(25).unwrap();
        assert!((r.expect(f64::exp) - 0.5f64.exp()).abs() < 1e-14);
    }

    #[test]
    fn rejects_small_orders() {
        assert_eq!(
            QuadratureRule::gauss_hermite(2),
            Err(QuadratureError::InvalidOrder(2))
        );
    }
}
