use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Target distributions with closed-form densities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    /// `cells x cells` grid over `[-range, range]²`; cell `(i, j)` (column
    /// `i` along x, row `j` along y, both counted from `-range`) is selected
    /// when `i + j` is even.
    Checkerboard { cells: usize, range: f64 },
    /// Isotropic `N(mean, std² I)`.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// Mixture of isotropic Gaussians.
    GaussianMixture {
        centers: Vec<Vec<f64>>,
        stds: Vec<f64>,
        weights: Vec<f64>,
    },
}

/// Target distribution plus the base `N(0, s0² I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// `None` scales the base to the target's per-coordinate std.
    pub base_std: Option<f64>,
}

impl DatasetSpec {
    pub fn checkerboard() -> Self {
        DatasetSpec {
            kind: DatasetKind::Checkerboard {
                cells: 4,
                range: 1.0,
            },
            base_std: None,
        }
    }

    pub fn gaussian(mean: Vec<f64>, std: f64) -> Self {
        DatasetSpec {
            kind: DatasetKind::Gaussian { mean, std },
            base_std: None,
        }
    }

    pub fn with_base_std(mut self, std: f64) -> Self {
        self.base_std = Some(std);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.base_std {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::config(format!("base_std must be positive, got {s}")));
            }
        }
        match &self.kind {
            DatasetKind::Checkerboard { cells, range } => {
                if *cells == 0 || !(range.is_finite() && *range > 0.0) {
                    return Err(Error::config("checkerboard needs cells >= 1 and range > 0"));
                }
            }
            DatasetKind::Gaussian { mean, std } => {
                if mean.is_empty() || !(std.is_finite() && *std > 0.0) {
                    return Err(Error::config("gaussian needs a non-empty mean and std > 0"));
                }
            }
            DatasetKind::GaussianMixture {
                centers,
                stds,
                weights,
            } => {
                let d = centers.first().map_or(0, Vec::len);
                if centers.is_empty()
                    || d == 0
                    || centers.iter().any(|c| c.len() != d)
                    || stds.len() != centers.len()
                    || weights.len() != centers.len()
                {
                    return Err(Error::config(
                        "gaussian_mixture needs matching, non-empty centers/stds/weights",
                    ));
                }
                if stds.iter().any(|s| !(s.is_finite() && *s > 0.0))
                    || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
                    || weights.iter().sum::<f64>() <= 0.0
                {
                    return Err(Error::config(
                        "gaussian_mixture stds must be positive and weights non-negative",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            DatasetKind::Checkerboard { .. } => 2,
            DatasetKind::Gaussian { mean, .. } => mean.len(),
            DatasetKind::GaussianMixture { centers, .. } => centers[0].len(),
        }
    }

    /// Square root of the mean per-coordinate variance of the target.
    pub fn target_std(&self) -> f64 {
        match &self.kind {
            DatasetKind::Checkerboard { .. } => {
                let cells = self.selected_cells();
                let n = cells.len() as f64;
                let mut var = 0.0;
                for axis in 0..2 {
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for (lo, hi) in &cells {
                        let (a, b) = (lo[axis], hi[axis]);
                        m1 += 0.5 * (a + b);
                        m2 += (a * a + a * b + b * b) / 3.0;
                    }
                    let (m1, m2) = (m1 / n, m2 / n);
                    var += m2 - m1 * m1;
                }
                (var / 2.0).sqrt()
            }
            DatasetKind::Gaussian { std, .. } => *std,
            DatasetKind::GaussianMixture {
                centers,
                stds,
                weights,
            } => {
                let total: f64 = weights.iter().sum();
                let d = centers[0].len();
                let mut var = 0.0;
                for axis in 0..d {
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for ((c, s), w) in centers.iter().zip(stds).zip(weights) {
                        let p = w / total;
                        m1 += p * c[axis];
                        m2 += p * (c[axis] * c[axis] + s * s);
                    }
                    var += m2 - m1 * m1;
                }
                (var / d as f64).sqrt()
            }
        }
    }

    pub fn base_std(&self) -> f64 {
        self.base_std.unwrap_or_else(|| self.target_std())
    }

    /// `n x d` draws from the target.
    pub fn sample_target(&self, rng: &mut Rng, n: usize) -> Tensor {
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        match &self.kind {
            DatasetKind::Checkerboard { .. } => {
                let cells = self.selected_cells();
                for _ in 0..n {
                    let (lo, hi) = &cells[rng.random_range(0..cells.len())];
                    for axis in 0..2 {
                        let u: f64 = rng.random();
                        out.push(lo[axis] + u * (hi[axis] - lo[axis]));
                    }
                }
            }
            DatasetKind::Gaussian { mean, std } => {
                for _ in 0..n {
                    for m in mean {
                        let z: f64 = StandardNormal.sample(rng);
                        out.push(m + std * z);
                    }
                }
            }
            DatasetKind::GaussianMixture {
                centers,
                stds,
                weights,
            } => {
                let total: f64 = weights.iter().sum();
                for _ in 0..n {
                    let mut u = rng.random::<f64>() * total;
                    let mut k = weights.len() - 1;
                    for (i, w) in weights.iter().enumerate() {
                        if u < *w {
                            k = i;
                            break;
                        }
                        u -= w;
                    }
                    for c in &centers[k] {
                        let z: f64 = StandardNormal.sample(rng);
                        out.push(c + stds[k] * z);
                    }
                }
            }
        }
        Tensor::new(n, d, out).expect("shape")
    }

    /// `n x d` draws from the base `N(0, s0² I)`.
    pub fn sample_base(&self, rng: &mut Rng, n: usize) -> Tensor {
        let (d, s0) = (self.dim(), self.base_std());
        let data = (0..n * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                s0 * z
            })
            .collect();
        Tensor::new(n, d, data).expect("shape")
    }

    /// Independent coupling: `(x0, x1)` with `x0` from the base and `x1`
    /// from the target.
    pub fn sample_coupling(&self, rng: &mut Rng, n: usize) -> (Tensor, Tensor) {
        let x0 = self.sample_base(rng, n);
        let x1 = self.sample_target(rng, n);
        (x0, x1)
    }

    /// Target density at `x`.
    pub fn density(&self, x: &[f64]) -> f64 {
        match &self.kind {
            DatasetKind::Checkerboard { cells, range } => {
                match checker_cell(*cells, *range, x[0]).zip(checker_cell(*cells, *range, x[1])) {
                    Some((i, j)) if (i + j) % 2 == 0 => 1.0 / self.checker_support_area(),
                    _ => 0.0,
                }
            }
            DatasetKind::Gaussian { mean, std } => isotropic_normal_pdf(x, mean, *std),
            DatasetKind::GaussianMixture {
                centers,
                stds,
                weights,
            } => {
                let total: f64 = weights.iter().sum();
                centers
                    .iter()
                    .zip(stds)
                    .zip(weights)
                    .map(|((c, s), w)| w / total * isotropic_normal_pdf(x, c, *s))
                    .sum()
            }
        }
    }

    fn checker_support_area(&self) -> f64 {
        match &self.kind {
            DatasetKind::Checkerboard { cells, range } => {
                let w = 2.0 * range / *cells as f64;
                self.selected_cells().len() as f64 * w * w
            }
            _ => unreachable!("checkerboard only"),
        }
    }

    /// `(lower corner, upper corner)` of every selected checkerboard cell.
    fn selected_cells(&self) -> Vec<([f64; 2], [f64; 2])> {
        let DatasetKind::Checkerboard { cells, range } = &self.kind else {
            return Vec::new();
        };
        let w = 2.0 * range / *cells as f64;
        let mut out = Vec::new();
        for j in 0..*cells {
            for i in 0..*cells {
                if (i + j) % 2 == 0 {
                    let lo = [-range + i as f64 * w, -range + j as f64 * w];
                    out.push((lo, [lo[0] + w, lo[1] + w]));
                }
            }
        }
        out
    }
}

/// Cell index of coordinate `x`; cells are half-open except the last,
/// which includes `range`.
fn checker_cell(cells: usize, range: f64, x: f64) -> Option<usize> {
    if !(-range..=range).contains(&x) {
        return None;
    }
    let k = ((x + range) / (2.0 * range) * cells as f64).floor() as usize;
    Some(k.min(cells - 1))
}

fn isotropic_normal_pdf(x: &[f64], mean: &[f64], std: f64) -> f64 {
    let d = mean.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
    (-0.5 * sq / (std * std)).exp() / (2.0 * PI * std * std).powf(d / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn checkerboard_density_values() {
        let ds = DatasetSpec::checkerboard();
        // cell (0,0) spans [-1,-0.5]²: selected
        assert_eq!(ds.density(&[-0.75, -0.75]), 0.5);
        // cell (1,0): unselected
        assert_eq!(ds.density(&[-0.25, -0.75]), 0.0);
        assert_eq!(ds.density(&[1.5, 0.0]), 0.0);
    }

    #[test]
    fn checkerboard_density_integrates_to_one() {
        let ds = DatasetSpec::checkerboard();
        let m = 400;
        let h = 2.0 / m as f64;
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                let x = -1.0 + (i as f64 + 0.5) * h;
                let y = -1.0 + (j as f64 + 0.5) * h;
                total += ds.density(&[x, y]) * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn checkerboard_samples_stay_in_selected_cells() {
        let ds = DatasetSpec::checkerboard();
        let mut rng = stream(1, Stream::Data);
        let x = ds.sample_target(&mut rng, 20_000);
        assert!(x.iter_rows().all(|p| ds.density(p) == 0.5));
    }

    #[test]
    fn checkerboard_target_std_is_uniform_marginal() {
        let s = DatasetSpec::checkerboard().target_std();
        assert!((s - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn mixture_density_integrates_to_one() {
        let ds = DatasetSpec {
            kind: DatasetKind::GaussianMixture {
                centers: vec![vec![-1.0, 0.0], vec![1.0, 0.5]],
                stds: vec![0.3, 0.5],
                weights: vec![1.0, 3.0],
            },
            base_std: None,
        };
        ds.validate().unwrap();
        let (m, lo, hi) = (600, -5.0, 5.0);
        let h = (hi - lo) / m as f64;
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                let p = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                total += ds.density(&p) * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn validation_rejects_bad_specs() {
        assert!(DatasetSpec::gaussian(vec![], 1.0).validate().is_err());
        assert!(DatasetSpec::gaussian(vec![0.0], -1.0).validate().is_err());
        assert!(DatasetSpec::gaussian(vec![0.0], 1.0)
            .with_base_std(0.0)
            .validate()
            .is_err());
    }
}
