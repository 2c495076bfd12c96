//! Two-dimensional Gaussian product-kernel density estimate.
//!
//! Points are standardized per coordinate (sample mean and standard
//! deviation) and smoothed with Scott's rule, h = n^(-1/6) in standardized
//! units. Shared by the warp-pair sampler and the confidence regions.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest bandwidth used when a coordinate has (near) zero spread.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductKde2 {
    /// Standardized sample points.
    points: Vec<[f64; 2]>,
    pub mean: [f64; 2],
    /// Standardization scale per coordinate (1 for degenerate coordinates).
    pub scale: [f64; 2],
    /// Bandwidth in standardized units.
    pub bandwidth: [f64; 2],
    pub warnings: Vec<String>,
}

impl ProductKde2 {
    pub fn fit(samples: &[[f64; 2]]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::SampleTooSmall { n, min: 2 });
        }
        if samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("KDE samples must be finite".into()));
        }
        let scott = (n as f64).powf(-1.0 / 6.0);
        let mut mean = [0.0; 2];
        let mut scale = [1.0; 2];
        let mut bandwidth = [scott; 2];
        let mut warnings = Vec::new();
        for d in 0..2 {
            let m = samples.iter().map(|p| p[d]).sum::<f64>() / n as f64;
            let var = samples.iter().map(|p| (p[d] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sd = var.sqrt();
            mean[d] = m;
            if sd <= 1e-12 * m.abs().max(1e-300) || sd == 0.0 {
                scale[d] = 1.0;
                bandwidth[d] = BANDWIDTH_FLOOR;
                warnings.push(format!(
                    "coordinate {d} has zero spread; bandwidth floored at {BANDWIDTH_FLOOR}"
                ));
            } else {
                scale[d] = sd;
                bandwidth[d] = bandwidth[d].max(BANDWIDTH_FLOOR);
            }
        }
        let points = samples
            .iter()
            .map(|p| [(p[0] - mean[0]) / scale[0], (p[1] - mean[1]) / scale[1]])
            .collect();
        Ok(Self {
            points,
            mean,
            scale,
            bandwidth,
            warnings,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Bandwidth expressed in the original coordinates.
    pub fn bandwidth_original(&self) -> [f64; 2] {
        [
            self.bandwidth[0] * self.scale[0],
            self.bandwidth[1] * self.scale[1],
        ]
    }

    fn standardize(&self, x: &[f64; 2]) -> [f64; 2] {
        [
            (x[0] - self.mean[0]) / self.scale[0],
            (x[1] - self.mean[1]) / self.scale[1],
        ]
    }

    /// Density at `x`, in standardized coordinates (the constant Jacobian
    /// of the standardization is omitted).
    pub fn density(&self, x: &[f64; 2]) -> f64 {
        let z = self.standardize(x);
        self.density_standardized(&z)
    }

    fn density_standardized(&self, z: &[f64; 2]) -> f64 {
        let [h0, h1] = self.bandwidth;
        let (i0, i1) = (1.0 / h0, 1.0 / h1);
        let sum: f64 = self
            .points
            .iter()
            .map(|p| {
                let u = (z[0] - p[0]) * i0;
                let v = (z[1] - p[1]) * i1;
                (-0.5 * (u * u + v * v)).exp()
            })
            .sum();
        sum / (self.points.len() as f64 * std::f64::consts::TAU * h0 * h1)
    }

    /// Density at each of the fitted sample points (leave-self-in).
    pub fn sample_densities(&self) -> Vec<f64> {
        self.points.iter().map(|p| self.density_standardized(p)).collect()
    }

    /// One draw: a stored point chosen uniformly plus kernel noise, mapped
    /// back to the original coordinates.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let k = rng.random_range(0..self.points.len());
        let p = self.points[k];
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        [
            self.mean[0] + self.scale[0] * (p[0] + self.bandwidth[0] * e0),
            self.mean[1] + self.scale[1] * (p[1] + self.bandwidth[1] * e1),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngSeed;

    #[test]
    fn scott_bandwidth() {
        let pts: Vec<[f64; 2]> = (0..64).map(|k| [k as f64, (k * k) as f64]).collect();
        let kde = ProductKde2::fit(&pts).unwrap();
        assert!((kde.bandwidth[0] - 0.5).abs() < 1e-12);
        assert!(kde.warnings.is_empty());
    }

    #[test]
    fn degenerate_coordinate_is_floored() {
        let pts = vec![[1.0, 0.0]; 20];
        let kde = ProductKde2::fit(&pts).unwrap();
        assert_eq!(kde.bandwidth, [BANDWIDTH_FLOOR; 2]);
        assert_eq!(kde.warnings.len(), 2);
        let mut rng = RngSeed::new(1, 1).rng();
        for _ in 0..1000 {
            let x = kde.sample(&mut rng);
            assert!((x[0] - 1.0).abs() < 1e-3 && x[1].abs() < 1e-3);
        }
    }

    #[test]
    fn density_integrates_to_jacobian() {
        // Riemann sum over a wide box; standardized density integrates to 1
        // in standardized coordinates, i.e. to scale0*scale1 in original ones.
        let pts: Vec<[f64; 2]> = (0..30)
            .map(|k| [(k as f64 * 0.7).sin(), (k as f64 * 1.3).cos() * 2.0])
            .collect();
        let kde = ProductKde2::fit(&pts).unwrap();
        let (mut total, step) = (0.0, 0.02);
        let mut x = -6.0;
        while x < 6.0 {
            let mut y = -10.0;
            while y < 10.0 {
                total += kde.density(&[x, y]) * step * step;
                y += step;
            }
            x += step;
        }
        let want = kde.scale[0] * kde.scale[1];
        assert!((total / want - 1.0).abs() < 1e-3, "{total} vs {want}");
    }
}
