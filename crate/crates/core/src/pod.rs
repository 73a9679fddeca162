//! Proper orthogonal decomposition by the method of snapshots.
//!
//! The `M x M` Gram matrix `K_mn = (u^m, u^n)` is decomposed as
//! `K v_j = lambda_j v_j` and the modes are lifted as
//! `phi_j = sum_m v_mj u^m / sqrt(lambda_j)`. With the default
//! [`Normalization::Unscaled`] the eigenvalues sum to the total squared norm
//! of the snapshots, so that
//!
//! ```text
//! sum_n ||u^n - P_r u^n||^2 = sum_{j > r} lambda_j
//! ```
//!
//! [`Normalization::PerSnapshot`] divides `K` by `M`; the identity then holds
//! for the mean over snapshots instead of the sum.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dns::SnapshotSet;
use crate::error::{Error, Result};
use crate::field::{gradient, inner_l2, Grid, VelocityField, VelocityGradient};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Normalization {
    Unscaled = 0,
    PerSnapshot = 1,
}

#[derive(Clone, Debug)]
pub struct PodOptions {
    /// Modes with `lambda_j < rank_tol * lambda_1` are dropped.
    pub rank_tol: f64,
    /// Subtract the snapshot mean first. The resulting basis spans
    /// fluctuations only.
    pub center: bool,
    pub normalization: Normalization,
}

impl Default for PodOptions {
    fn default() -> Self {
        PodOptions { rank_tol: 1e-12, center: false, normalization: Normalization::Unscaled }
    }
}

/// Ordered POD eigenpairs.
#[derive(Clone, Debug)]
pub struct PodBasis {
    pub grid: Arc<Grid>,
    /// `L^2`-orthonormal modes.
    pub modes: Vec<VelocityField>,
    /// Non-increasing, positive.
    pub eigenvalues: Vec<f64>,
    /// `||grad phi_j||^2`
    pub grad_norms: Vec<f64>,
    pub normalization: Normalization,
    pub provenance: String,
}

/// Coefficients `a_j = (v, phi_j)` and the lifted field `P_r v`.
#[derive(Clone, Debug)]
pub struct Projection {
    pub coeffs: Vec<f64>,
    pub lifted: VelocityField,
}

pub fn build_pod(snapshots: &SnapshotSet, rank_tol: f64) -> Result<PodBasis> {
    build_pod_with(snapshots, &PodOptions { rank_tol, ..PodOptions::default() })
}

pub fn build_pod_with(snapshots: &SnapshotSet, opts: &PodOptions) -> Result<PodBasis> {
    let m = snapshots.len();
    if m < 2 {
        return Err(Error::Precondition(format!("need at least 2 snapshots, got {m}")));
    }
    let grid = snapshots.grid.clone();
    let mut data: Vec<VelocityField> = snapshots.fields.clone();
    if opts.center {
        let mut mean = VelocityField::zeros(&grid);
        for f in &data {
            mean.axpy(1.0 / m as f64, f)?;
        }
        for f in &mut data {
            f.axpy(-1.0, &mean)?;
        }
    }

    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| (0..=i).map(|j| inner_l2(&data[i], &data[j]).expect("same grid")).collect())
        .collect();
    let scale = match opts.normalization {
        Normalization::Unscaled => 1.0,
        Normalization::PerSnapshot => 1.0 / m as f64,
    };
    let mut gram = DMatrix::zeros(m, m);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            gram[(i, j)] = v * scale;
            gram[(j, i)] = v * scale;
        }
    }

    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda1 = eig.eigenvalues[order[0]];
    if !(lambda1 > 0.0) || lambda1 < f64::MIN_POSITIVE {
        return Err(Error::EmptyBasis);
    }
    let lambda_min = eig.eigenvalues[order[m - 1]];
    if lambda_min < -1e-12 * lambda1 {
        return Err(Error::Conditioning(lambda_min));
    }

    let mut modes = Vec::new();
    let mut eigenvalues = Vec::new();
    for &k in &order {
        let lambda = eig.eigenvalues[k];
        if lambda < opts.rank_tol * lambda1 || lambda <= 0.0 {
            break;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let vmax = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-8 * vmax) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        let mut phi = VelocityField::zeros(&grid);
        let s = (lambda / scale).sqrt();
        for (f, c) in data.iter().zip(&v) {
            phi.axpy(c / s, f)?;
        }
        // One Gram-Schmidt sweep against the earlier modes cleans up the
        // round-off amplified by small eigenvalues.
        for prev in &modes {
            let c = inner_l2(&phi, prev)?;
            phi.axpy(-c, prev)?;
        }
        let n = phi.norm_l2();
        phi = phi.scaled(1.0 / n);
        modes.push(phi);
        eigenvalues.push(lambda);
    }
    let grad_norms = modes.par_iter().map(|phi| gradient(phi).norm_sq()).collect();
    Ok(PodBasis {
        grid,
        modes,
        eigenvalues,
        grad_norms,
        normalization: opts.normalization,
        provenance: basis_provenance(snapshots, opts),
    })
}

/// Hash of the snapshot provenance, the snapshot times and the options.
fn basis_provenance(snapshots: &SnapshotSet, opts: &PodOptions) -> String {
    let mut h = Sha256::new();
    h.update(snapshots.provenance.as_bytes());
    for t in &snapshots.times {
        h.update(t.to_le_bytes());
    }
    h.update(opts.rank_tol.to_le_bytes());
    h.update([opts.center as u8, opts.normalization as u8]);
    hex::encode(h.finalize())
}

impl PodBasis {
    /// Rank `d`.
    pub fn dim(&self) -> usize {
        self.modes.len()
    }

    fn check_rank(&self, r: usize) -> Result<()> {
        if r == 0 || r > self.dim() {
            Err(Error::Range(format!("rank {r} outside 1..={}", self.dim())))
        } else {
            Ok(())
        }
    }

    /// `a_j = (v, phi_j)` for `j < r`.
    pub fn coefficients(&self, r: usize, v: &VelocityField) -> Result<Vec<f64>> {
        self.check_rank(r)?;
        self.modes[..r].iter().map(|phi| inner_l2(v, phi)).collect()
    }

    /// `sum_j a_j phi_j`.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<VelocityField> {
        if coeffs.len() > self.dim() {
            return Err(Error::Range(format!("{} coefficients for rank {}", coeffs.len(), self.dim())));
        }
        let mut out = VelocityField::zeros(&self.grid);
        for (a, phi) in coeffs.iter().zip(&self.modes) {
            out.axpy(*a, phi)?;
        }
        Ok(out)
    }

    /// `L^2` projection onto the span of the first `r` modes.
    pub fn project(&self, r: usize, v: &VelocityField) -> Result<Projection> {
        let coeffs = self.coefficients(r, v)?;
        let lifted = self.reconstruct(&coeffs)?;
        Ok(Projection { coeffs, lifted })
    }

    /// `(sum_{j > r} lambda_j (1 + ||grad phi_j||^2))^(1/2)`
    pub fn eigentail(&self, r: usize) -> Result<f64> {
        if r > self.dim() {
            return Err(Error::Range(format!("rank {r} exceeds {}", self.dim())));
        }
        let s: f64 = self.eigenvalues[r..]
            .iter()
            .zip(&self.grad_norms[r..])
            .map(|(l, g)| l * (1.0 + g))
            .sum();
        Ok(s.sqrt())
    }

    /// `sum_{j > r} lambda_j`
    pub fn eigenvalue_tail(&self, r: usize) -> f64 {
        self.eigenvalues[r.min(self.dim())..].iter().sum()
    }

    pub fn mode_gradients(&self, r: usize) -> Result<Vec<VelocityGradient>> {
        self.check_rank(r)?;
        Ok(self.modes[..r].par_iter().map(gradient).collect())
    }

    /// `S_ij = (grad phi_j, grad phi_i)` for `i, j < r`.
    pub fn stiffness_matrix(&self, r: usize) -> Result<DMatrix<f64>> {
        let grads = self.mode_gradients(r)?;
        let mut s = DMatrix::zeros(r, r);
        for i in 0..r {
            for j in 0..=i {
                let v = grads[i].inner(&grads[j]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        Ok(s)
    }

    /// Spectral norm of the stiffness matrix.
    pub fn stiffness_norm(&self, r: usize) -> Result<f64> {
        Ok(matrix_two_norm(&self.stiffness_matrix(r)?))
    }
}

/// Largest eigenvalue magnitude of a symmetric matrix.
pub fn matrix_two_norm(s: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(s.clone()).eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// First `fraction` of one oscillation period of `snapshots`, counted from
/// the first snapshot. The period, in time units, is detected from the
/// snapshot energies unless given.
pub fn windowed_snapshots(
    snapshots: &SnapshotSet,
    fraction: f64,
    period: Option<f64>,
) -> Result<SnapshotSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Precondition(format!("window fraction must lie in (0, 1], got {fraction}")));
    }
    if snapshots.len() < 2 {
        return Err(Error::Precondition("need at least 2 snapshots".into()));
    }
    let dt = (snapshots.times[snapshots.len() - 1] - snapshots.times[0]) / (snapshots.len() - 1) as f64;
    let period_samples = match period {
        Some(p) => p / dt,
        None => crate::signal::detect_period_samples(&snapshots.energies()).ok_or(Error::PeriodNotFound)?,
    };
    let count = (fraction * period_samples).round() as usize;
    if count < 2 {
        return Err(Error::Precondition(format!(
            "window of {fraction} x {period_samples:.1} samples holds fewer than 2 snapshots"
        )));
    }
    if count > snapshots.len() {
        return Err(Error::Precondition("window extends past the snapshot record".into()));
    }
    let mut out = snapshots.slice(0, count);
    out.provenance = format!("{}@window({fraction})", snapshots.provenance);
    Ok(out)
}

/// Eigenvalues of `K` from a dense SVD of the weighted snapshot matrix;
/// used to cross-check [`build_pod`].
pub fn snapshot_singular_values(snapshots: &SnapshotSet) -> Vec<f64> {
    let w = snapshots.grid.weight().sqrt();
    let n = snapshots.grid.len();
    let m = snapshots.len();
    let mut y = DMatrix::zeros(2 * n, m);
    for (c, f) in snapshots.fields.iter().enumerate() {
        for k in 0..n {
            y[(k, c)] = f.u1[k] * w;
            y[(n + k, c)] = f.u2[k] * w;
        }
    }
    let mut sv: Vec<f64> = y.svd(false, false).singular_values.iter().map(|s| s * s).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}
