use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{eigenvalues, Spectrum};
use crate::error::Result;
use crate::linmap::EigenBounds;
use crate::scalar::Scalar;
use crate::ssm::StateSpaceModel;

/// Slack allowed when checking a radius against its eigenvalue bounds.
pub const BOUND_TOL: f64 = 1e-8;

/// One square weight matrix of a model's dynamics map.
#[derive(Debug, Clone)]
pub struct DynamicsWeight<T> {
    pub label: String,
    pub matrix: Array2<T>,
    /// Present for pf-composed matrices.
    pub bounds: Option<EigenBounds>,
}

#[derive(Debug, Clone)]
pub struct EigenReport<T> {
    pub spectra: Vec<Spectrum<T>>,
    pub bounds: Vec<Option<EigenBounds>>,
    pub threshold: T,
    /// Eigenvalues with modulus above `threshold`, per spectrum.
    pub dominant_counts: Vec<usize>,
    /// Labels of bounded matrices whose radius falls outside the bounds.
    pub violations: Vec<String>,
    /// Labels of unbounded matrices with radius above one.
    pub unstable: Vec<String>,
    pub warnings: Vec<String>,
}

impl<T: Scalar> EigenReport<T> {
    pub fn bounds_satisfied(&self) -> bool {
        self.violations.is_empty()
    }

    /// The common bounds when every matrix carries the same ones.
    pub fn common_bounds(&self) -> Option<EigenBounds> {
        let first = (*self.bounds.first()?)?;
        self.bounds.iter().all(|b| *b == Some(first)).then_some(first)
    }

    pub fn max_radius(&self) -> Option<T> {
        self.spectra.iter().map(|s| s.spectral_radius).reduce(T::max)
    }
}

pub fn analyze_weights<T: Scalar>(weights: &[DynamicsWeight<T>], threshold: T) -> Result<EigenReport<T>> {
    let mut report = EigenReport {
        spectra: Vec::with_capacity(weights.len()),
        bounds: Vec::with_capacity(weights.len()),
        threshold,
        dominant_counts: Vec::with_capacity(weights.len()),
        violations: Vec::new(),
        unstable: Vec::new(),
        warnings: Vec::new(),
    };
    if weights.is_empty() {
        report
            .warnings
            .push("no square dynamics weights found".to_owned());
        return Ok(report);
    }
    for w in weights {
        let spectrum = eigenvalues(&w.matrix)?.with_label(&w.label);
        let radius = spectrum.spectral_radius.to_f64_lossy();
        match w.bounds {
            Some(b) if !b.contains(radius, BOUND_TOL) => report.violations.push(w.label.clone()),
            None if radius > 1.0 => report.unstable.push(w.label.clone()),
            _ => {}
        }
        report.dominant_counts.push(spectrum.count_above(threshold));
        report.bounds.push(w.bounds);
        report.spectra.push(spectrum);
    }
    Ok(report)
}

/// Writes `eigen_<label>.csv` with columns `re, im, source, spectral_radius`.
pub fn write_scatter_csv<T: Scalar>(report: &EigenReport<T>, dir: &Path, label: &str) -> Result<PathBuf> {
    let path = dir.join(format!("eigen_{label}.csv"));
    let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(out, "re,im,source,spectral_radius")?;
    for s in &report.spectra {
        for z in &s.eigenvalues {
            writeln!(out, "{:.16e},{:.16e},{},{:.16e}", z.re, z.im, s.source_label, s.spectral_radius)?;
        }
    }
    out.flush()?;
    Ok(path)
}

/// Spectra of a model's state-transition weights.
pub fn analyze_model<T: Scalar, M: StateSpaceModel<T> + ?Sized>(model: &M, threshold: T) -> Result<EigenReport<T>> {
    analyze_weights(&model.dynamics_weights(), threshold)
}
