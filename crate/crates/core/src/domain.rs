//! Axis-aligned parameter boxes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A closed box `[lower_j, upper_j]` in parameter space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Dimension(format!(
                "domain bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u)) {
            return Err(Error::InvalidParameter("domain requires finite lower < upper".into()));
        }
        Ok(Self { lower, upper })
    }

    /// The same interval repeated in every dimension.
    pub fn cube(dim: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (l, u))| *l <= *t && *t <= *u)
    }

    pub fn check(&self, theta: &[f64]) -> Result<()> {
        if self.contains(theta) {
            Ok(())
        } else {
            Err(Error::OutOfDomain(theta.to_vec()))
        }
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l + (u - l) * rng.gen::<f64>())
            .collect()
    }

    /// All `2^D` vertices, first coordinate varying slowest.
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..1usize << d)
            .map(|mask| {
                (0..d)
                    .map(|j| {
                        if mask & (1 << (d - 1 - j)) == 0 {
                            self.lower[j]
                        } else {
                            self.upper[j]
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corners_of_unit_square() {
        let d = Domain::cube(2, 0.01, 10.0).unwrap();
        assert_eq!(
            d.corners(),
            vec![vec![0.01, 0.01], vec![0.01, 10.0], vec![10.0, 0.01], vec![10.0, 10.0]]
        );
    }

    #[test]
    fn bounds_are_inclusive() {
        let d = Domain::cube(2, 0.01, 10.0).unwrap();
        assert!(d.contains(&[0.01, 10.0]));
        assert!(!d.contains(&[0.0099, 1.0]));
        assert!(!d.contains(&[1.0]));
        assert!(d.check(&[11.0, 1.0]).is_err());
    }

    #[test]
    fn rejects_inverted_bounds() {
        assert!(Domain::new(vec![1.0], vec![0.0]).is_err());
        assert!(Domain::new(vec![], vec![]).is_err());
    }
}
