//! Truncated singular value decomposition.
//!
//! One-sided Jacobi on the columns of the input: rotations orthogonalize
//! column pairs until every normalized inner product falls below 1e-12,
//! capped at `100 * min(rows, cols)` sweeps. Jacobi is slower than
//! bidiagonalization but is simple, accurate to machine precision, and
//! fully deterministic, which the decomposition pipeline depends on.
//!
//! Determinism conventions:
//! - singular values are sorted non-increasing with a stable sort, so exact
//!   ties keep their input order;
//! - the largest-magnitude entry of every left singular vector is forced
//!   non-negative (the matching row of `vt` is flipped along with it).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const JACOBI_TOL: f64 = 1e-12;

/// Result of a truncated SVD of a matrix `m`:
/// `m ~ u * diag(s) * vt` with `u: [rows, k]`, `vt: [k, cols]`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub vt: Tensor,
    /// Sum of the squared singular values that were truncated away. By the
    /// Eckart-Young theorem this equals the squared Frobenius error of the
    /// rank-`k` reconstruction.
    pub discarded_energy: f64,
}

/// Best rank-`k` approximation factors of a matrix.
pub fn truncated_svd(m: &Tensor, k: usize) -> Result<SvdResult> {
    if m.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "svd expects a matrix, got rank {}",
            m.rank()
        )));
    }
    let rows = m.shape()[0];
    let cols = m.shape()[1];
    let max_rank = rows.min(cols);
    if k == 0 || k > max_rank {
        return Err(Error::RankOutOfRange(format!(
            "k = {k} not in 1..={max_rank} for a {rows} x {cols} matrix"
        )));
    }

    // One-sided Jacobi wants at least as many rows as columns; run on the
    // transpose otherwise and swap the roles of u and v.
    let transposed = rows < cols;
    let work = if transposed { m.transpose()? } else { m.clone() };
    let (wu, sigma, wv) = jacobi(&work)?;
    let (mut u_cols, mut v_cols) = if transposed { (wv, wu) } else { (wu, wv) };

    // Sign convention on the left singular vectors.
    for j in 0..max_rank {
        let col = &u_cols[j];
        let mut arg = 0;
        let mut best = -1.0;
        for (i, &x) in col.iter().enumerate() {
            if x.abs() > best {
                best = x.abs();
                arg = i;
            }
        }
        if col[arg] < 0.0 {
            for x in u_cols[j].iter_mut() {
                *x = -*x;
            }
            for x in v_cols[j].iter_mut() {
                *x = -*x;
            }
        }
    }

    let discarded_energy = sigma[k..].iter().map(|s| s * s).sum();

    let mut u = Tensor::zeros(&[rows, k]);
    for j in 0..k {
        for i in 0..rows {
            u.data_mut()[i * k + j] = u_cols[j][i];
        }
    }
    let mut vt = Tensor::zeros(&[k, cols]);
    for j in 0..k {
        for i in 0..cols {
            vt.data_mut()[j * cols + i] = v_cols[j][i];
        }
    }

    Ok(SvdResult {
        u,
        s: sigma[..k].to_vec(),
        vt,
        discarded_energy,
    })
}

/// Reconstructs `u * diag(s) * vt`.
pub fn svd_reconstruct(r: &SvdResult) -> Result<Tensor> {
    let k = r.s.len();
    let cols = r.vt.shape()[1];
    let mut scaled = r.vt.clone();
    for j in 0..k {
        for i in 0..cols {
            scaled.data_mut()[j * cols + i] *= r.s[j];
        }
    }
    r.u.matmul(&scaled)
}

/// Full SVD of a matrix with rows >= cols, as sorted column vectors.
/// Returns (u columns, singular values, v columns); `min(rows, cols)` each.
fn jacobi(a: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let rows = a.shape()[0];
    let cols = a.shape()[1];
    debug_assert!(rows >= cols);

    // column-major working copies
    let mut w: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| a.get(&[i, j])).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    let max_sweeps = 100 * cols.max(1);
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..cols.saturating_sub(1) {
            for q in p + 1..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..rows {
                    alpha += w[p][i] * w[p][i];
                    beta += w[q][i] * w[q][i];
                    gamma += w[p][i] * w[q][i];
                }
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                // rotation zeroing the (p, q) entry of the Gram matrix
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let wp = w[p][i];
                    let wq = w[q][i];
                    w[p][i] = c * wp - s * wq;
                    w[q][i] = s * wp + c * wq;
                }
                for i in 0..cols {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
                rotated = true;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        let mut residual: f64 = 0.0;
        for p in 0..cols.saturating_sub(1) {
            for q in p + 1..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..rows {
                    alpha += w[p][i] * w[p][i];
                    beta += w[q][i] * w[q][i];
                    gamma += w[p][i] * w[q][i];
                }
                if alpha > 0.0 && beta > 0.0 {
                    residual = residual.max(gamma.abs() / (alpha * beta).sqrt());
                }
            }
        }
        return Err(Error::SvdConvergence(format!(
            "no convergence after {max_sweeps} sweeps; max off-diagonal residual {residual:.3e}"
        )));
    }

    let mut sigma: Vec<f64> = w
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();

    // stable non-increasing order; ties keep input order
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let w: Vec<Vec<f64>> = order.iter().map(|&j| w[j].clone()).collect();
    let v: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();
    sigma = order.iter().map(|&j| sigma[j]).collect();

    // Normalize the left vectors; columns with (numerically) zero singular
    // value get a deterministic orthonormal completion so u always has
    // orthonormal columns.
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let zero_cut = sigma_max * 1e-13;
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        if sigma[j] > zero_cut && sigma[j] > 0.0 {
            u.push(w[j].iter().map(|x| x / sigma[j]).collect());
        } else {
            sigma[j] = 0.0;
            u.push(complete_orthonormal(&u, rows));
        }
    }

    Ok((u, sigma, v))
}

/// First canonical basis vector with a significant component outside
/// `span(existing)`, Gram-Schmidt orthonormalized.
fn complete_orthonormal(existing: &[Vec<f64>], rows: usize) -> Vec<f64> {
    for basis in 0..rows {
        let mut cand = vec![0.0; rows];
        cand[basis] = 1.0;
        for col in existing {
            let dot: f64 = cand.iter().zip(col).map(|(a, b)| a * b).sum();
            for (c, &e) in cand.iter_mut().zip(col) {
                *c -= dot * e;
            }
        }
        let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            return cand.iter().map(|x| x / norm).collect();
        }
    }
    // unreachable: existing has fewer than `rows` orthonormal columns
    panic!("orthonormal completion failed");
}
