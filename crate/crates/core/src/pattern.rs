//! Zero/non-zero structure of the random-effects covariance matrix.

use serde::{Deserialize, Serialize};
use std::ops::Deref;

use crate::error::{Error, Result};

/// Which parameters carry a random effect and which pairs of random effects
/// are correlated. Off-diagonal flags are stored as a packed lower triangle,
/// so the mask is symmetric by construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CovariancePattern {
    diag: Vec<bool>,
    offdiag: Vec<bool>,
}

fn tri_index(k: usize, l: usize) -> usize {
    let (hi, lo) = if k > l { (k, l) } else { (l, k) };
    hi * (hi - 1) / 2 + lo
}

impl CovariancePattern {
    /// Diagonal pattern (no correlations).
    pub fn diagonal(diag: Vec<bool>) -> Self {
        let d = diag.len();
        Self {
            diag,
            offdiag: vec![false; d * d.saturating_sub(1) / 2],
        }
    }

    pub fn none(d: usize) -> Self {
        Self::diagonal(vec![false; d])
    }

    pub fn all_random(d: usize) -> Self {
        Self::diagonal(vec![true; d])
    }

    /// Add a correlation between `k` and `l` (unchecked until validation).
    pub fn with_correlation(mut self, k: usize, l: usize) -> Self {
        self.set_correlation(k, l, true);
        self
    }

    pub fn set_correlation(&mut self, k: usize, l: usize, on: bool) {
        assert!(k != l && k < self.d() && l < self.d(), "invalid pair ({k}, {l})");
        let i = tri_index(k, l);
        self.offdiag[i] = on;
    }

    pub fn set_random(&mut self, k: usize, on: bool) {
        self.diag[k] = on;
    }

    pub fn d(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[bool] {
        &self.diag
    }

    pub fn is_random(&self, k: usize) -> bool {
        self.diag[k]
    }

    pub fn is_correlated(&self, k: usize, l: usize) -> bool {
        k != l && self.offdiag[tri_index(k, l)]
    }

    /// Correlated pairs `(k, l)` with `k < l`, in lexicographic order.
    pub fn correlated_pairs(&self) -> Vec<(usize, usize)> {
        let d = self.d();
        let mut out = Vec::new();
        for k in 0..d {
            for l in (k + 1)..d {
                if self.is_correlated(k, l) {
                    out.push((k, l));
                }
            }
        }
        out
    }

    /// Indices of the random parameters, ascending.
    pub fn random_indices(&self) -> Vec<usize> {
        (0..self.d()).filter(|&k| self.diag[k]).collect()
    }

    pub fn n_random(&self) -> usize {
        self.diag.iter().filter(|&&b| b).count()
    }

    pub fn is_diagonal(&self) -> bool {
        !self.offdiag.iter().any(|&b| b)
    }
}

/// A pattern that passed [`validate_pattern`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ValidatedPattern(CovariancePattern);

impl Deref for ValidatedPattern {
    type Target = CovariancePattern;
    fn deref(&self) -> &CovariancePattern {
        &self.0
    }
}

impl ValidatedPattern {
    pub fn into_inner(self) -> CovariancePattern {
        self.0
    }

    /// Free positions `(r, s)`, `s <= r`, of the lower-triangular factor of
    /// Ω_R, indexed within the random block, in row-major order.
    pub fn free_cholesky_positions(&self) -> Vec<(usize, usize)> {
        let idx = self.random_indices();
        let mut out = Vec::new();
        for r in 0..idx.len() {
            for s in 0..r {
                if self.is_correlated(idx[r], idx[s]) {
                    out.push((r, s));
                }
            }
            out.push((r, r));
        }
        out
    }
}

pub fn validate_pattern(pattern: CovariancePattern) -> Result<ValidatedPattern> {
    if pattern.d() == 0 {
        return Err(Error::InvalidPattern("pattern must cover at least one parameter".into()));
    }
    for (k, l) in pattern.correlated_pairs() {
        if !pattern.diag[k] || !pattern.diag[l] {
            return Err(Error::OffdiagWithoutDiag(k, l));
        }
    }
    Ok(ValidatedPattern(pattern))
}

/// Number of free covariance parameters: random variances plus correlated
/// pairs, each pair counted once.
pub fn count_vec_omega(pattern: &CovariancePattern) -> usize {
    pattern.n_random() + pattern.offdiag.iter().filter(|&&b| b).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert!(validate_pattern(CovariancePattern::all_random(3)).is_ok());
        let bad = CovariancePattern::diagonal(vec![true, false, true]).with_correlation(1, 2);
        assert!(matches!(
            validate_pattern(bad),
            Err(Error::OffdiagWithoutDiag(1, 2))
        ));
        let omega2 = CovariancePattern::all_random(3).with_correlation(0, 2);
        let v = validate_pattern(omega2).unwrap();
        assert_eq!(count_vec_omega(&v), 4);
        assert_eq!(count_vec_omega(&CovariancePattern::none(3)), 0);
        assert_eq!(count_vec_omega(&CovariancePattern::all_random(3)), 3);
    }

    #[test]
    fn symmetric_access() {
        let p = CovariancePattern::all_random(3).with_correlation(2, 0);
        assert!(p.is_correlated(0, 2) && p.is_correlated(2, 0));
        assert_eq!(p.correlated_pairs(), vec![(0, 2)]);
    }

    #[test]
    fn validation_matches_brute_force_up_to_d4() {
        for d in 1..=4usize {
            let npairs = d * (d - 1) / 2;
            let pairs: Vec<(usize, usize)> = (0..d)
                .flat_map(|k| ((k + 1)..d).map(move |l| (k, l)))
                .collect();
            for dmask in 0u32..(1 << d) {
                for omask in 0u32..(1 << npairs) {
                    let diag: Vec<bool> = (0..d).map(|k| dmask >> k & 1 == 1).collect();
                    let mut p = CovariancePattern::diagonal(diag.clone());
                    let mut subset = true;
                    for (i, &(k, l)) in pairs.iter().enumerate() {
                        if omask >> i & 1 == 1 {
                            p.set_correlation(k, l, true);
                            subset &= diag[k] && diag[l];
                        }
                    }
                    let count = count_vec_omega(&p);
                    assert_eq!(validate_pattern(p).is_ok(), subset);
                    assert_eq!(
                        count,
                        dmask.count_ones() as usize + omask.count_ones() as usize
                    );
                }
            }
        }
    }

    #[test]
    fn free_positions_follow_pattern() {
        let p = validate_pattern(
            CovariancePattern::diagonal(vec![true, false, true, true]).with_correlation(0, 3),
        )
        .unwrap();
        // random block is (0, 2, 3) -> rows r = 0, 1, 2; (0,3) is (r=2, s=0)
        assert_eq!(
            p.free_cholesky_positions(),
            vec![(0, 0), (1, 1), (2, 0), (2, 2)]
        );
        assert_eq!(p.free_cholesky_positions().len(), count_vec_omega(&p));
    }
}
