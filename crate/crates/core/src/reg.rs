//! Feature-distance functions and their gradients.
//!
//! The personalized objective penalizes the distance between a model's
//! features and reference features produced by the aggregated global
//! adapter. Three distances are supported; gradients are taken with
//! respect to the first argument only, the reference is a constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance used by the feature regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    /// Squared Euclidean distance `||zp - zg||²`.
    L2Sq,
    /// `1 - cos(zp, zg)`; invariant to positive rescaling of either side.
    Cosine,
    /// `1 - corr(zp, zg)`; additionally invariant to per-vector shifts.
    Pearson,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 3] = [DistanceKind::L2Sq, DistanceKind::Cosine, DistanceKind::Pearson];

    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::L2Sq => "l2sq",
            DistanceKind::Cosine => "cosine",
            DistanceKind::Pearson => "pearson",
        }
    }
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2sq" => Ok(DistanceKind::L2Sq),
            "cosine" => Ok(DistanceKind::Cosine),
            "pearson" => Ok(DistanceKind::Pearson),
            other => Err(Error::invalid(format!("unknown distance kind '{other}'"))),
        }
    }
}

/// Regularizer specification: which distance and how strongly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegSpec {
    pub kind: DistanceKind,
    pub lambda: f64,
}

impl RegSpec {
    pub fn new(kind: DistanceKind, lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(RegSpec { kind, lambda })
    }

    /// No regularization at all.
    pub fn off() -> Self {
        RegSpec {
            kind: DistanceKind::L2Sq,
            lambda: 0.0,
        }
    }

    pub fn active(&self) -> bool {
        self.lambda > 0.0
    }
}

fn check_lengths(zp: &[f64], zg: &[f64]) -> Result<()> {
    if zp.len() != zg.len() || zp.is_empty() {
        return Err(Error::shape(format!(
            "distance over vectors of lengths {} and {}",
            zp.len(),
            zg.len()
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn centered(a: &[f64]) -> Vec<f64> {
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    a.iter().map(|v| v - mean).collect()
}

/// Distance between a feature vector `zp` and a reference `zg`.
pub fn dist(zp: &[f64], zg: &[f64], kind: DistanceKind) -> Result<f64> {
    check_lengths(zp, zg)?;
    match kind {
        DistanceKind::L2Sq => Ok(zp.iter().zip(zg).map(|(a, b)| (a - b) * (a - b)).sum()),
        DistanceKind::Cosine => {
            let (np, ng) = (norm(zp), norm(zg));
            if np == 0.0 || ng == 0.0 {
                return Err(Error::Degenerate("cosine distance with zero-norm vector".into()));
            }
            Ok(1.0 - dot(zp, zg) / (np * ng))
        }
        DistanceKind::Pearson => {
            let (cp, cg) = (centered(zp), centered(zg));
            let (np, ng) = (norm(&cp), norm(&cg));
            if np == 0.0 || ng == 0.0 {
                return Err(Error::Degenerate("pearson distance with constant vector".into()));
            }
            Ok(1.0 - dot(&cp, &cg) / (np * ng))
        }
    }
}

/// Gradient of [`dist`] with respect to `zp`; `zg` is held constant.
pub fn dist_grad_zp(zp: &[f64], zg: &[f64], kind: DistanceKind) -> Result<Vec<f64>> {
    check_lengths(zp, zg)?;
    match kind {
        DistanceKind::L2Sq => Ok(zp.iter().zip(zg).map(|(a, b)| 2.0 * (a - b)).collect()),
        DistanceKind::Cosine => {
            let (np, ng) = (norm(zp), norm(zg));
            if np == 0.0 || ng == 0.0 {
                return Err(Error::Degenerate("cosine distance with zero-norm vector".into()));
            }
            let s = dot(zp, zg);
            Ok(zp
                .iter()
                .zip(zg)
                .map(|(p, g)| -g / (np * ng) + s * p / (np * np * np * ng))
                .collect())
        }
        DistanceKind::Pearson => {
            // Pearson distance is the cosine distance of the centered
            // vectors; the centering Jacobian (I - 11ᵀ/n) annihilates the
            // mean component, and the centered-cosine gradient is already
            // mean-free.
            let (cp, cg) = (centered(zp), centered(zg));
            let (np, ng) = (norm(&cp), norm(&cg));
            if np == 0.0 || ng == 0.0 {
                return Err(Error::Degenerate("pearson distance with constant vector".into()));
            }
            let s = dot(&cp, &cg);
            Ok(cp
                .iter()
                .zip(&cg)
                .map(|(p, g)| -g / (np * ng) + s * p / (np * np * np * ng))
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fd_grad(zp: &[f64], zg: &[f64], kind: DistanceKind, h: f64) -> Vec<f64> {
        let mut g = vec![0.0; zp.len()];
        let mut zp = zp.to_vec();
        for i in 0..zp.len() {
            let orig = zp[i];
            zp[i] = orig + h;
            let up = dist(&zp, zg, kind).unwrap();
            zp[i] = orig - h;
            let dn = dist(&zp, zg, kind).unwrap();
            zp[i] = orig;
            g[i] = (up - dn) / (2.0 * h);
        }
        g
    }

    #[test]
    fn self_distance_is_zero() {
        let z = vec![0.3, -1.2, 2.0, 0.7];
        for kind in DistanceKind::ALL {
            assert!(dist(&z, &z, kind).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn l2sq_unit_axes() {
        assert_eq!(dist(&[1.0, 0.0], &[0.0, 1.0], DistanceKind::L2Sq).unwrap(), 2.0);
    }

    #[test]
    fn cosine_scale_invariance() {
        let d = dist(&[2.0, 0.0], &[1.0, 0.0], DistanceKind::Cosine).unwrap();
        assert!(d.abs() < 1e-15);
    }

    #[test]
    fn l2sq_grad_examples() {
        assert_eq!(
            dist_grad_zp(&[3.0, 1.0], &[1.0, 1.0], DistanceKind::L2Sq).unwrap(),
            vec![4.0, 0.0]
        );
        assert_eq!(
            dist_grad_zp(&[1.0, 1.0], &[1.0, 1.0], DistanceKind::L2Sq).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(matches!(
            dist(&[0.0, 0.0], &[1.0, 2.0], DistanceKind::Cosine),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            dist(&[2.0, 2.0], &[1.0, 3.0], DistanceKind::Pearson),
            Err(Error::Degenerate(_))
        ));
        assert!(dist(&[1.0], &[1.0, 2.0], DistanceKind::L2Sq).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(7, &[99]);
        for kind in DistanceKind::ALL {
            for _ in 0..25 {
                let n = rng.random_range(2..8usize);
                let zp: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let zg: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let ana = dist_grad_zp(&zp, &zg, kind).unwrap();
                let num = fd_grad(&zp, &zg, kind, 1e-6);
                for (a, b) in ana.iter().zip(&num) {
                    let denom = a.abs().max(b.abs()).max(1e-8);
                    assert!(
                        ((a - b) / denom).abs() < 1e-5,
                        "{kind:?}: analytic {a} vs numeric {b}"
                    );
                }
            }
        }
    }
}
