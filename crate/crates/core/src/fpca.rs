//! Functional principal components of daily profile matrices.
//!
//! The column-centered profile matrix is decomposed as `Xc = U·D·Vᵀ`; the
//! columns of `V` are the modes of diurnal variation and `U·D` the per-row
//! scores. Each mode is sign-normalized so its largest-magnitude entry is
//! positive, which makes decompositions comparable across runs.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamodel::{ProfileMatrix, HOURS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FpcaResult {
    /// Column means of the profile matrix, W/m².
    pub mean_profile: DVector<f64>,
    /// Right-singular vectors as columns, `24 × 24`.
    pub basis: DMatrix<f64>,
    /// Non-increasing singular values.
    pub singular_values: Vec<f64>,
    /// Left-singular vectors scaled by their singular values, `k × 24`.
    pub scores: DMatrix<f64>,
}

impl FpcaResult {
    /// `φ_j(h) = δ_j·v_{j,h}` for 1-based `j`.
    pub fn weighted_mode(&self, j: usize) -> DVector<f64> {
        self.basis.column(j - 1) * self.singular_values[j - 1]
    }

    /// Rank-`j` reconstruction of the centered matrix.
    pub fn reconstruct_centered(&self, j: usize) -> DMatrix<f64> {
        let j = j.min(self.singular_values.len());
        self.scores.columns(0, j) * self.basis.columns(0, j).transpose()
    }
}

/// Thin SVD with singular values sorted descending and each right-singular
/// vector sign-fixed (largest-magnitude entry positive; the matching left
/// vector is flipped with it). Returns `(U, δ, V)`.
pub(crate) fn sorted_svd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let svd = m.clone().svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::Numeric("SVD did not return left vectors".into()))?;
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Numeric("SVD did not return right vectors".into()))?;
    let r = svd.singular_values.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let mut uu = DMatrix::zeros(u.nrows(), r);
    let mut vv = DMatrix::zeros(vt.ncols(), r);
    let mut sv = Vec::with_capacity(r);
    for (dst, &src) in order.iter().enumerate() {
        let mut v = vt.row(src).transpose();
        let mut uc = u.column(src).into_owned();
        let mut pivot = 0;
        for i in 1..v.len() {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        if v[pivot] < 0.0 {
            v.neg_mut();
            uc.neg_mut();
        }
        vv.set_column(dst, &v);
        uu.set_column(dst, &uc);
        sv.push(svd.singular_values[src].max(0.0));
    }
    Ok((uu, sv, vv))
}

/// Exact SVD of the column-centered profile matrix.
pub fn fpca_decompose(x: &ProfileMatrix) -> Result<FpcaResult> {
    let k = x.x.nrows();
    if k < HOURS {
        return Err(Error::InsufficientData(format!(
            "FPCA needs at least {HOURS} profiles, got {k}"
        )));
    }
    let mean_profile = x.x.row_mean().transpose();
    let mut centered = x.x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean_profile.transpose();
    }
    let (u, sv, v) = sorted_svd(&centered)?;
    let mut scores = u;
    for (j, s) in sv.iter().enumerate() {
        scores.column_mut(j).scale_mut(*s);
    }
    Ok(FpcaResult {
        mean_profile,
        basis: v,
        singular_values: sv,
        scores,
    })
}

/// Share of total variance carried by the first `j` modes.
///
/// A matrix with no variance at all reports 1 for every `j`.
pub fn variance_explained(result: &FpcaResult, j: usize) -> Result<f64> {
    let n = result.singular_values.len();
    if j == 0 || j > n {
        return Err(Error::Argument(format!("J must lie in 1..={n}, got {j}")));
    }
    let total: f64 = result.singular_values.iter().map(|d| d * d).sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    let head: f64 = result.singular_values[..j].iter().map(|d| d * d).sum();
    Ok((head / total).min(1.0))
}

/// `φ_1 ± scale·φ_j` for plus/minus diagnostics; `j` is 1-based and ≥ 2.
pub fn plus_minus(result: &FpcaResult, j: usize, scale: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    if j < 2 || j > result.singular_values.len() {
        return Err(Error::Argument(format!(
            "plus/minus mode index must lie in 2..={}, got {j}",
            result.singular_values.len()
        )));
    }
    let base = result.weighted_mode(1);
    let delta = result.weighted_mode(j) * scale;
    Ok((&base + &delta, &base - &delta))
}

/// Writes mean profile, modes and singular values as a delimited table:
/// one row per hour with `mean`, `v1..v24`, then a trailing `singular_value`
/// block.
pub fn write_diagnostics(path: impl AsRef<Path>, result: &FpcaResult) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    out.push_str("# schema: hour,mean,v1..vN (right-singular vectors); then mode,singular_value,variance_explained\n");
    out.push_str("hour,mean");
    for j in 1..=result.basis.ncols() {
        out.push_str(&format!(",v{j}"));
    }
    out.push('\n');
    for h in 0..HOURS {
        out.push_str(&format!("{},{}", h + 1, result.mean_profile[h]));
        for j in 0..result.basis.ncols() {
            out.push_str(&format!(",{}", result.basis[(h, j)]));
        }
        out.push('\n');
    }
    out.push_str("mode,singular_value,variance_explained\n");
    for (j, s) in result.singular_values.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", j + 1, s, variance_explained(result, j + 1)?));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
