//! Sample-quality and error metrics.
//!
//! Quality is the Fréchet distance between Gaussian fits of two 2-D point
//! sets: `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.

use crate::diffusion::Point;
use crate::error::{Error, Result};

/// Symmetric 2x2 matrix `[[a, b], [b, c]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sym2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Sym2 {
    pub const ZERO: Sym2 = Sym2 {
        a: 0.0,
        b: 0.0,
        c: 0.0,
    };

    pub fn identity() -> Self {
        Sym2 {
            a: 1.0,
            b: 0.0,
            c: 1.0,
        }
    }

    pub fn scaled(self, k: f64) -> Self {
        Sym2 {
            a: self.a * k,
            b: self.b * k,
            c: self.c * k,
        }
    }

    pub fn trace(&self) -> f64 {
        self.a + self.c
    }

    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let half_tr = 0.5 * self.trace();
        let disc = (0.25 * (self.a - self.c).powi(2) + self.b * self.b).sqrt();
        half_tr - disc
    }

    pub fn to_array(self) -> [[f64; 2]; 2] {
        [[self.a, self.b], [self.b, self.c]]
    }
}

fn matmul(x: [[f64; 2]; 2], y: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = x[i][0] * y[0][j] + x[i][1] * y[1][j];
        }
    }
    out
}

fn psd_tolerance(m: &Sym2) -> f64 {
    1e-12 * m.trace().abs().max(1.0)
}

/// Principal square root of a symmetric PSD 2x2 matrix:
/// `(S + sqrt(det S) I) / sqrt(tr S + 2 sqrt(det S))`.
pub fn sqrtm_psd(s: Sym2) -> Result<Sym2> {
    let min_eig = s.min_eigenvalue();
    if min_eig < -psd_tolerance(&s) {
        return Err(Error::InvalidCovariance(min_eig));
    }
    let root_det = s.det().max(0.0).sqrt();
    let denom = s.trace() + 2.0 * root_det;
    if denom <= 0.0 {
        return Ok(Sym2::ZERO);
    }
    let k = 1.0 / denom.sqrt();
    Ok(Sym2 {
        a: (s.a + root_det) * k,
        b: s.b * k,
        c: (s.c + root_det) * k,
    })
}

/// Sample mean and population covariance of a point set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFit {
    pub mean: Point,
    pub cov: Sym2,
}

pub fn fit_gaussian(points: &[Point]) -> Result<GaussianFit> {
    if points.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: points.len(),
        });
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for p in points {
        let dx = p[0] - mx;
        let dy = p[1] - my;
        a += dx * dx;
        b += dx * dy;
        c += dy * dy;
    }
    Ok(GaussianFit {
        mean: [mx, my],
        cov: Sym2 {
            a: a / n,
            b: b / n,
            c: c / n,
        },
    })
}

/// Squared Fréchet distance between two Gaussian fits.
///
/// `tr (S_a S_b)^{1/2}` is evaluated through the symmetric matrix
/// `S_a^{1/2} S_b S_a^{1/2}`, which has the same eigenvalues.
pub fn frechet_2d(x: &GaussianFit, y: &GaussianFit) -> Result<f64> {
    for cov in [&x.cov, &y.cov] {
        let e = cov.min_eigenvalue();
        if e < -psd_tolerance(cov) {
            return Err(Error::InvalidCovariance(e));
        }
    }
    let ra = sqrtm_psd(x.cov)?;
    let prod = matmul(matmul(ra.to_array(), y.cov.to_array()), ra.to_array());
    let sym = Sym2 {
        a: prod[0][0],
        b: 0.5 * (prod[0][1] + prod[1][0]),
        c: prod[1][1],
    };
    let cross = sqrtm_psd(sym)?.trace();
    let dm = (x.mean[0] - y.mean[0]).powi(2) + (x.mean[1] - y.mean[1]).powi(2);
    let d2 = dm + x.cov.trace() + y.cov.trace() - 2.0 * cross;
    Ok(d2.max(0.0))
}

/// Fréchet distance between the Gaussian fits of two point sets.
pub fn frechet_points(a: &[Point], b: &[Point]) -> Result<f64> {
    frechet_2d(&fit_gaussian(a)?, &fit_gaussian(b)?)
}

/// Mean squared difference of two equal-length slices.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeError {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}
