//! Eigenvalues of real square matrices and spectral analysis of trained models.

mod analysis;
mod solver;

use ndarray::Array2;
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use analysis::{analyze_model, analyze_weights, write_scatter_csv, DynamicsWeight, EigenReport, BOUND_TOL};

/// Largest dimension accepted by [`eigenvalues`].
pub const MAX_DIM: usize = 512;

/// Deflation threshold relative to neighbouring diagonal magnitudes.
const DEFLATION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T> {
    /// Sorted by decreasing modulus; conjugate pairs are adjacent.
    pub eigenvalues: Vec<Complex<T>>,
    pub spectral_radius: T,
    pub source_label: String,
}

impl<T: Scalar> Spectrum<T> {
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.source_label = label.into();
        self
    }

    /// Number of eigenvalues with modulus strictly above `threshold`.
    pub fn count_above(&self, threshold: T) -> usize {
        self.eigenvalues.iter().filter(|z| z.norm() > threshold).count()
    }
}

/// Eigenvalues of `m` via Hessenberg reduction and shifted QR.
///
/// Each call validates the result against the trace identity.
pub fn eigenvalues<T: Scalar>(m: &Array2<T>) -> Result<Spectrum<T>> {
    let (rows, cols) = m.dim();
    if rows != cols {
        return Err(Error::shape("eigenvalues", (rows, cols), (cols, cols)));
    }
    if rows > MAX_DIM {
        return Err(Error::Contract(format!("matrix dimension {rows} exceeds {MAX_DIM}")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("matrix has non-finite entries".into()));
    }

    let mut h = m.clone();
    solver::hessenberg(&mut h);
    let tol = T::of(DEFLATION_TOL).max(T::epsilon());
    let mut eig = solver::hessenberg_qr(h, tol)?;

    let n = rows;
    let max_entry = m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    let trace: T = m.diag().sum();
    let sum_re: T = eig.iter().map(|z| z.re).sum();
    let sum_im: T = eig.iter().map(|z| z.im).sum();
    let allowed = T::of(1e-8) * T::of(n as f64) * max_entry.max(T::min_positive_value());
    let gap = (sum_re - trace).abs().max(sum_im.abs());
    if gap > allowed.max(T::epsilon() * T::of(64.0 * n as f64) * max_entry) {
        return Err(Error::Validation(format!(
            "eigenvalue sum deviates from trace by {gap:e}"
        )));
    }

    eig.sort_by(|a, b| {
        b.norm()
            .partial_cmp(&a.norm())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.im.partial_cmp(&a.im).unwrap_or(std::cmp::Ordering::Equal))
    });
    let spectral_radius = eig.iter().fold(T::zero(), |acc, z| acc.max(z.norm()));
    Ok(Spectrum {
        eigenvalues: eig,
        spectral_radius,
        source_label: String::new(),
    })
}
