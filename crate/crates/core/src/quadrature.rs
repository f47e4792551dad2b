//! Gauss–Hermite rules for the weight `exp(-x²)`.

use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// `n`-point rule from the eigen-decomposition of the Jacobi matrix
    /// (Golub–Welsch). Nodes are sorted ascending.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "need at least one node");
        if n == 1 {
            return Self {
                nodes: vec![0.0],
                weights: vec![std::f64::consts::PI.sqrt()],
            };
        }
        let mut j = DMatrix::<f64>::zeros(n, n);
        for i in 1..n {
            let b = (i as f64 / 2.0).sqrt();
            j[(i, i - 1)] = b;
            j[(i - 1, i)] = b;
        }
        let eig = SymmetricEigen::new(j);
        let mu0 = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], mu0 * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // symmetrize to remove eigen-solver noise
        for i in 0..n / 2 {
            let x = 0.5 * (pairs[n - 1 - i].0 - pairs[i].0);
            let w = 0.5 * (pairs[n - 1 - i].1 + pairs[i].1);
            pairs[i] = (-x, w);
            pairs[n - 1 - i] = (x, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_exactly() {
        let sqrt_pi = std::f64::consts::PI.sqrt();
        for n in [1usize, 2, 5, 9, 15] {
            let gh = GaussHermite::new(n);
            let moment = |p: i32| -> f64 {
                gh.nodes
                    .iter()
                    .zip(&gh.weights)
                    .map(|(x, w)| w * x.powi(p))
                    .sum()
            };
            assert!((moment(0) - sqrt_pi).abs() < 1e-13);
            if n >= 2 {
                assert!((moment(2) - sqrt_pi / 2.0).abs() < 1e-13);
            }
            if n >= 3 {
                assert!((moment(4) - 3.0 * sqrt_pi / 4.0).abs() < 1e-12);
            }
            assert!(moment(1).abs() < 1e-14);
        }
    }

    #[test]
    fn three_point_rule() {
        let gh = GaussHermite::new(3);
        let x = (1.5f64).sqrt();
        assert!((gh.nodes[2] - x).abs() < 1e-14);
        assert!((gh.weights[1] - 2.0 * std::f64::consts::PI.sqrt() / 3.0).abs() < 1e-14);
    }
}
