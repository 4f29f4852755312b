//! Linear behavior decoding, representation retrieval and linear CKA.
//!
//! Everything here works in `f64` on row-major `[N x d]` slices.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `[rows x cols]` view helper.
fn to_dmatrix(x: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if x.len() != rows * cols {
        return Err(Error::Data(format!(
            "expected {rows}x{cols} = {} values, got {}",
            rows * cols,
            x.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, x))
}

/// Mean over the `group` consecutive rows belonging to each time step.
pub fn pool_time(tokens: &[f64], n_tokens: usize, d: usize, group: usize) -> Result<Vec<f64>> {
    if group == 0 || n_tokens % group != 0 || tokens.len() != n_tokens * d {
        return Err(Error::Data(format!(
            "cannot pool {n_tokens} tokens of width {d} in groups of {group}"
        )));
    }
    let t = n_tokens / group;
    let mut out = vec![0.0; t * d];
    for i in 0..n_tokens {
        let row = &mut out[(i / group) * d..(i / group + 1) * d];
        for (o, &v) in row.iter_mut().zip(&tokens[i * d..(i + 1) * d]) {
            *o += v / group as f64;
        }
    }
    Ok(out)
}

/// Mean over all rows: one vector per sequence.
pub fn pool_sequence(rows: &[f64], n: usize, d: usize) -> Result<Vec<f64>> {
    if n == 0 || rows.len() != n * d {
        return Err(Error::Data(format!("cannot pool {} values as {n} rows of width {d}", rows.len())));
    }
    let mut out = vec![0.0; d];
    for r in 0..n {
        for (o, &v) in out.iter_mut().zip(&rows[r * d..(r + 1) * d]) {
            *o += v / n as f64;
        }
    }
    Ok(out)
}

/// Ridge regression with an unpenalised intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearDecoder {
    pub d_in: usize,
    pub d_out: usize,
    /// Row-major `[d_in x d_out]`.
    pub weights: Vec<f64>,
    pub intercept: Vec<f64>,
    /// Absolute penalty actually applied.
    pub ridge_abs: f64,
}

/// Fits `y ≈ x W + b`. The penalty is `ridge` times the mean diagonal of the
/// centred Gram matrix, so it is unitless.
pub fn fit_linear_decoder(x: &[f64], y: &[f64], n: usize, d: usize, n_z: usize, ridge: f64) -> Result<LinearDecoder> {
    if !(ridge >= 0.0) {
        return Err(Error::Config(format!("ridge must be non-negative, got {ridge}")));
    }
    if n == 0 {
        return Err(Error::Data("decoder needs at least one sample".into()));
    }
    let mut xm = to_dmatrix(x, n, d)?;
    let mut ym = to_dmatrix(y, n, n_z)?;
    let x_mean: Vec<f64> = (0..d).map(|c| xm.column(c).mean()).collect();
    let y_mean: Vec<f64> = (0..n_z).map(|c| ym.column(c).mean()).collect();
    for c in 0..d {
        xm.column_mut(c).add_scalar_mut(-x_mean[c]);
    }
    for c in 0..n_z {
        ym.column_mut(c).add_scalar_mut(-y_mean[c]);
    }
    let mut gram = xm.transpose() * &xm;
    let scale = if d > 0 { gram.trace() / d as f64 } else { 0.0 };
    let ridge_abs = ridge * scale;
    for i in 0..d {
        gram[(i, i)] += ridge_abs;
    }
    if d > 0 {
        let eig = gram.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(hi > 0.0) || lo <= hi * 1e-12 {
            return Err(Error::Numerical(if ridge == 0.0 {
                "normal matrix is singular; use a ridge > 0".into()
            } else {
                "normal matrix is singular even with the ridge penalty".into()
            }));
        }
    }
    let rhs = xm.transpose() * &ym;
    let w = gram.clone().cholesky().map(|c| c.solve(&rhs)).ok_or_else(|| {
        if ridge == 0.0 {
            Error::Numerical("normal matrix is singular; use a ridge > 0".into())
        } else {
            Error::Numerical("normal matrix is not positive definite".into())
        }
    })?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("decoder weights are not finite; use a ridge > 0".into()));
    }
    let xmean = DVector::from_vec(x_mean);
    let intercept: Vec<f64> = (0..n_z).map(|j| y_mean[j] - w.column(j).dot(&xmean)).collect();
    let mut weights = Vec::with_capacity(d * n_z);
    for i in 0..d {
        for j in 0..n_z {
            weights.push(w[(i, j)]);
        }
    }
    Ok(LinearDecoder {
        d_in: d,
        d_out: n_z,
        weights,
        intercept,
        ridge_abs,
    })
}

impl LinearDecoder {
    pub fn predict(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        if x.len() != n * self.d_in {
            return Err(Error::Data(format!(
                "decoder expects width {}, got {} values for {n} rows",
                self.d_in,
                x.len()
            )));
        }
        let mut out = Vec::with_capacity(n * self.d_out);
        for r in 0..n {
            let row = &x[r * self.d_in..(r + 1) * self.d_in];
            for j in 0..self.d_out {
                let mut acc = self.intercept[j];
                for (i, &v) in row.iter().enumerate() {
                    acc += v * self.weights[i * self.d_out + j];
                }
                out.push(acc);
            }
        }
        Ok(out)
    }
}

/// Per-dimension `1 - SS_res / SS_tot`, averaged over dimensions with
/// non-zero variance.
pub fn r2(truth: &[f64], pred: &[f64], n: usize, n_z: usize) -> Result<f64> {
    let dims = r2_per_dim(truth, pred, n, n_z)?;
    let kept: Vec<f64> = dims.into_iter().flatten().collect();
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Per-dimension R²; `None` for zero-variance dimensions.
pub fn r2_per_dim(truth: &[f64], pred: &[f64], n: usize, n_z: usize) -> Result<Vec<Option<f64>>> {
    if truth.len() != n * n_z || pred.len() != truth.len() {
        return Err(Error::Data(format!(
            "r2 shape mismatch: {} true and {} predicted values for {n}x{n_z}",
            truth.len(),
            pred.len()
        )));
    }
    let mut out = Vec::with_capacity(n_z);
    for j in 0..n_z {
        let col = |v: &[f64]| (0..n).map(|r| v[r * n_z + j]).collect::<Vec<_>>();
        let (t, p) = (col(truth), col(pred));
        let mean = t.iter().sum::<f64>() / n as f64;
        let ss_tot: f64 = t.iter().map(|v| (v - mean).powi(2)).sum();
        if ss_tot <= 0.0 {
            warn!("r2: behavior dimension {j} has zero variance and is excluded");
            out.push(None);
            continue;
        }
        let ss_res: f64 = t.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
        out.push(Some(1.0 - ss_res / ss_tot));
    }
    if out.iter().all(Option::is_none) {
        return Err(Error::Data("r2: every behavior dimension has zero variance".into()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub top1: f64,
    pub top5: f64,
    pub mean_rank: f64,
    pub n_sequences: usize,
    /// Queries whose true match tied with at least one other candidate.
    pub ties: usize,
}

fn unit_rows(x: &[f64], n: usize, d: usize) -> Vec<Option<Vec<f64>>> {
    (0..n)
        .map(|r| {
            let row = &x[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            (norm > 0.0 && norm.is_finite()).then(|| row.iter().map(|v| v / norm).collect())
        })
        .collect()
}

/// For each query row `i`, ranks all candidate rows by cosine similarity
/// and records the rank of candidate `i`. Ties are broken by index.
pub fn retrieval(queries: &[f64], candidates: &[f64], n: usize, d: usize) -> Result<RetrievalReport> {
    if queries.len() != n * d || candidates.len() != n * d {
        return Err(Error::Data(format!("retrieval expects two {n}x{d} matrices")));
    }
    let q = unit_rows(queries, n, d);
    let c = unit_rows(candidates, n, d);
    let valid: Vec<usize> = (0..n).filter(|&i| q[i].is_some() && c[i].is_some()).collect();
    if valid.len() < n {
        warn!("retrieval: {} zero-norm row(s) excluded", n - valid.len());
    }
    if valid.is_empty() {
        return Err(Error::Data("retrieval: no rows with non-zero norm".into()));
    }
    let (mut top1, mut top5, mut rank_sum, mut ties) = (0usize, 0usize, 0usize, 0usize);
    for &i in &valid {
        let qi = q[i].as_ref().expect("valid");
        let sim = |j: usize| -> f64 { qi.iter().zip(c[j].as_ref().expect("valid")).map(|(a, b)| a * b).sum() };
        let own = sim(i);
        let mut rank = 1;
        let mut tied = false;
        for &j in &valid {
            if j == i {
                continue;
            }
            let s = sim(j);
            if s > own || (s == own && j < i) {
                rank += 1;
            }
            tied |= s == own;
        }
        ties += tied as usize;
        top1 += (rank == 1) as usize;
        top5 += (rank <= 5) as usize;
        rank_sum += rank;
    }
    let m = valid.len() as f64;
    Ok(RetrievalReport {
        top1: top1 as f64 / m,
        top5: top5 as f64 / m,
        mean_rank: rank_sum as f64 / m,
        n_sequences: valid.len(),
        ties,
    })
}

/// Linear CKA with column-centred inputs:
/// `|Yᵀ X|²_F / (|Xᵀ X|_F |Yᵀ Y|_F)`.
pub fn linear_cka(x: &[f64], y: &[f64], n: usize, dx: usize, dy: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Data("CKA needs at least two rows".into()));
    }
    let center = |m: &mut DMatrix<f64>| {
        for c in 0..m.ncols() {
            let mean = m.column(c).mean();
            m.column_mut(c).add_scalar_mut(-mean);
        }
    };
    let mut xm = to_dmatrix(x, n, dx)?;
    let mut ym = to_dmatrix(y, n, dy)?;
    center(&mut xm);
    center(&mut ym);
    let xx = (xm.transpose() * &xm).norm();
    let yy = (ym.transpose() * &ym).norm();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Data("CKA of a constant (all-zero after centring) matrix is undefined".into()));
    }
    let xy = (ym.transpose() * &xm).norm_squared();
    Ok(xy / (xx * yy))
}

/// Standard-normal `[n x d]` matrix for random baselines.
pub fn random_matrix<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Vec<f64> {
    (0..n * d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Retrieval and CKA between two independent random matrices.
pub fn random_baseline<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<(RetrievalReport, f64)> {
    let a = random_matrix(n, d, rng);
    let b = random_matrix(n, d, rng);
    Ok((retrieval(&a, &b, n, d)?, linear_cka(&a, &b, n, d, d)?))
}
