use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::interpolants::{DatasetKind, DatasetSpec};

/// `M x M` histogram over `[lo, hi]²`.
///
/// Bins are half-open except the last in each axis, which includes `hi`.
/// Samples outside the square are dropped before normalisation. With a
/// positive pseudo-count every bin receives that much extra mass, so a model
/// that misses a bin gets a finite KL.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram2D {
    pub m: usize,
    pub lo: f64,
    pub hi: f64,
    pub pseudo_count: f64,
    /// Row-major counts, index `i * m + j` for x-bin `i` and y-bin `j`.
    pub counts: Vec<f64>,
    pub n_outside: usize,
}

impl Histogram2D {
    pub fn new(m: usize, lo: f64, hi: f64, pseudo_count: f64) -> Result<Self> {
        if m == 0
            || lo.is_nan()
            || hi.is_nan()
            || lo >= hi
            || pseudo_count.is_nan()
            || pseudo_count < 0.0
        {
            return Err(Error::config(format!(
                "histogram needs m >= 1, lo < hi and pseudo_count >= 0 (got {m}, {lo}, {hi}, {pseudo_count})"
            )));
        }
        Ok(Histogram2D {
            m,
            lo,
            hi,
            pseudo_count,
            counts: vec![0.0; m * m],
            n_outside: 0,
        })
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.m as f64
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        self.lo + (2 * k + 1) as f64 * (self.hi - self.lo) / (2 * self.m) as f64
    }

    fn bin(&self, x: f64) -> Option<usize> {
        if !(self.lo..=self.hi).contains(&x) {
            return None;
        }
        let k = ((x - self.lo) / (self.hi - self.lo) * self.m as f64).floor() as usize;
        Some(k.min(self.m - 1))
    }

    pub fn add(&mut self, x: f64, y: f64) {
        match self.bin(x).zip(self.bin(y)) {
            Some((i, j)) => self.counts[i * self.m + j] += 1.0,
            None => self.n_outside += 1,
        }
    }

    pub fn fill(&mut self, samples: &Tensor) {
        for r in samples.iter_rows() {
            self.add(r[0], r[1]);
        }
    }

    pub fn n_inside(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Normalised density per bin.
    pub fn density(&self) -> Vec<f64> {
        let cell = self.width() * self.width();
        let total = self.n_inside() + self.pseudo_count * self.counts.len() as f64;
        self.counts
            .iter()
            .map(|c| (c + self.pseudo_count) / (total * cell))
            .collect()
    }
}

/// `Σ ln(ρ/ρ̂) ρ · cell` over entries with `ρ > 0`; infinite if `ρ̂` is zero
/// where `ρ` is not.
pub fn kl_quadrature(rho: &[f64], rho_hat: &[f64], cell: f64) -> f64 {
    assert_eq!(rho.len(), rho_hat.len(), "density grids differ in size");
    rho.iter()
        .zip(rho_hat)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| (p / q).ln() * p * cell)
        .sum()
}

/// KL from the target density to a histogram of `samples`, both evaluated at
/// the bin centres of an `M x M` grid over the checkerboard's square.
pub fn kl_checkerboard(
    samples: &Tensor,
    dataset: &DatasetSpec,
    m: usize,
    pseudo_count: f64,
) -> Result<f64> {
    let range = match dataset.kind {
        DatasetKind::Checkerboard { range, .. } => range,
        _ => {
            return Err(Error::Eval(
                "KL quadrature needs a checkerboard target".into(),
            ))
        }
    };
    if samples.cols() != 2 {
        return Err(Error::Shape(format!(
            "expected 2D samples, got {} columns",
            samples.cols()
        )));
    }
    let mut h = Histogram2D::new(m, -range, range, pseudo_count)?;
    h.fill(samples);
    if h.n_inside() == 0.0 {
        return Err(Error::Eval(format!(
            "all {} samples fall outside [-{range}, {range}]²",
            samples.rows()
        )));
    }
    let mut rho = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            rho.push(dataset.density(&[h.bin_center(i), h.bin_center(j)]));
        }
    }
    let cell = h.width() * h.width();
    Ok(kl_quadrature(&rho, &h.density(), cell))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let kl = kl_quadrature(&[0.75, 0.25], &[0.5, 0.5], 1.0);
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl - expected).abs() <= 1e-12);
        assert!((kl - 0.130_812).abs() < 1e-6);
    }

    #[test]
    fn identical_densities_give_exact_zero() {
        let p = [0.1, 0.4, 0.0, 0.5];
        assert_eq!(kl_quadrature(&p, &p, 0.25), 0.0);
    }

    #[test]
    fn normalised_mass_is_one() {
        let mut h = Histogram2D::new(50, -1.0, 1.0, 0.5).unwrap();
        for i in 0..1000 {
            let a = (i as f64 * 0.618).fract() * 2.0 - 1.0;
            h.add(a, -a * 0.3);
        }
        h.add(5.0, 0.0);
        let cell = h.width() * h.width();
        let mass: f64 = h.density().iter().map(|d| d * cell).sum();
        assert!((mass - 1.0).abs() < 1e-12);
        assert_eq!(h.n_outside, 1);
        assert_eq!(h.bin_center(12), -0.5);
    }

    #[test]
    fn empty_bin_without_smoothing_is_infinite() {
        assert!(kl_quadrature(&[1.0], &[0.0], 1.0).is_infinite());
    }

    #[test]
    fn all_outside_is_an_error() {
        let x = Tensor::new(2, 2, vec![3.0, 3.0, -4.0, 0.0]).unwrap();
        let r = kl_checkerboard(&x, &DatasetSpec::checkerboard(), 50, 0.5);
        assert!(matches!(r, Err(Error::Eval(_))));
    }
}
