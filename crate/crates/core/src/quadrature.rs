//! Gauss-Hermite rules for expectations under a standard normal.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights such that `sum_i w_i f(x_i) ~ E[f(X)]`, `X ~ N(0, 1)`.
///
/// Built by Golub-Welsch from the Jacobi matrix of the probabilists'
/// Hermite polynomials. Exact for polynomials of degree up to `2n - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let jacobi = DMatrix::from_fn(order, order, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64).sqrt()
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    pub fn expectation(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_point_rule() {
        let gh = GaussHermite::new(2);
        assert_relative_eq!(gh.nodes[0], -1.0, epsilon = 1e-14);
        assert_relative_eq!(gh.nodes[1], 1.0, epsilon = 1e-14);
        assert_relative_eq!(gh.weights[0], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn normal_moments_are_exact() {
        let gh = GaussHermite::new(9);
        // E[X^(2k)] = (2k - 1)!!
        let expected = [1.0, 1.0, 3.0, 15.0, 105.0, 945.0, 10395.0, 135135.0, 2027025.0];
        for (k, e) in expected.iter().enumerate() {
            assert_relative_eq!(gh.expectation(|x| x.powi(2 * k as i32)), *e, max_relative = 1e-11);
            assert!(gh.expectation(|x| x.powi(2 * k as i32 + 1)).abs() < 1e-9 * e.max(1.0));
        }
    }

    #[test]
    fn single_node_is_the_mean() {
        let gh = GaussHermite::new(1);
        assert_eq!(gh.nodes.len(), 1);
        assert!(gh.nodes[0].abs() < 1e-15);
        assert_eq!(gh.weights[0], 1.0);
    }
}
