use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;

use super::MeanStd;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Row-major `n × d` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>, extractor_id: impl Into<String>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::shape("FeatureSet", format!("{} values for {n}x{d}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("feature set contains non-finite values".into()));
        }
        Ok(Self {
            n,
            d,
            data,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::shape("GaussianStats", format!("mean of {d}, covariance {:?}", cov.shape())));
        }
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-10 {
            return Err(Error::invalid(format!("covariance is not symmetric (max deviation {asym:e})")));
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and unbiased covariance.
    pub fn from_features(f: &FeatureSet) -> Result<Self> {
        if f.n < 2 {
            return Err(Error::invalid("covariance needs at least two samples"));
        }
        let x = DMatrix::from_row_slice(f.n, f.d, &f.data);
        let mean: DVector<f64> = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (f.n as f64 - 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov)
    }
}

/// Eigenvalues at or above `-tol * max(1, largest)` are accepted, with the
/// small negative ones set to zero.
fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut e = sym.symmetric_eigen();
    let top = e.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-8 * top.max(1.0);
    for v in e.eigenvalues.iter_mut() {
        if *v < -tol {
            return Err(Error::Numerical(format!("{what} has eigenvalue {v:e}, not positive semi-definite")));
        }
        *v = v.max(0.0);
    }
    Ok(e)
}

/// Fréchet distance between two Gaussians, with the trace of the matrix
/// square root taken from `Σx^½ Σy Σx^½`.
pub fn fid(x: &GaussianStats, y: &GaussianStats) -> Result<f64> {
    if x.mean.len() != y.mean.len() {
        return Err(Error::shape("fid", format!("dimensions {} and {}", x.mean.len(), y.mean.len())));
    }
    let ex = psd_eigen(&x.cov, "first covariance")?;
    let sqrt_x = &ex.eigenvectors
        * DMatrix::from_diagonal(&ex.eigenvalues.map(f64::sqrt))
        * ex.eigenvectors.transpose();
    let inner = &sqrt_x * &y.cov * &sqrt_x;
    let ei = psd_eigen(&inner, "covariance product")?;
    let tr_sqrt: f64 = ei.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let dm = (&x.mean - &y.mean).norm_squared();
    Ok((dm + x.cov.trace() + y.cov.trace() - 2.0 * tr_sqrt).max(0.0))
}

pub fn fid_features(x: &FeatureSet, y: &FeatureSet) -> Result<f64> {
    fid(&GaussianStats::from_features(x)?, &GaussianStats::from_features(y)?)
}

/// Cubic polynomial kernel `((1/d) aᵀb + 1)³`.
pub fn poly_kernel(a: &[f64], b: &[f64]) -> f64 {
    let d = a.len() as f64;
    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased squared MMD between two equal-size samples.
fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let m = x.len() as f64;
    let within = |s: &[&[f64]]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += 2.0 * poly_kernel(s[i], s[j]);
            }
        }
        acc / (m * (m - 1.0))
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += poly_kernel(a, b);
        }
    }
    within(x) + within(y) - 2.0 * cross / (m * m)
}

/// Kernel distance averaged over `n_subsets` subsets of `subset_size` rows,
/// each drawn without replacement from its own seeded stream.
pub fn kid(x: &FeatureSet, y: &FeatureSet, subset_size: usize, n_subsets: usize, seed: u64) -> Result<MeanStd> {
    if x.d != y.d {
        return Err(Error::shape("kid", format!("dimensions {} and {}", x.d, y.d)));
    }
    if subset_size < 2 || n_subsets == 0 {
        return Err(Error::invalid("kid needs subsets of at least 2 and at least one subset"));
    }
    for (name, f) in [("first", x), ("second", y)] {
        if f.n < subset_size {
            return Err(Error::invalid(format!(
                "kid: {name} set has {} samples, subset size is {subset_size}",
                f.n
            )));
        }
    }
    let values: Vec<f64> = (0..n_subsets)
        .map(|s| {
            let mut rng = stream(seed, Purpose::Kid, s as u64);
            let xs: Vec<&[f64]> = index::sample(&mut rng, x.n, subset_size).iter().map(|i| x.row(i)).collect();
            let ys: Vec<&[f64]> = index::sample(&mut rng, y.n, subset_size).iter().map(|i| y.row(i)).collect();
            mmd2_unbiased(&xs, &ys)
        })
        .collect();
    Ok(MeanStd::of(&values))
}
