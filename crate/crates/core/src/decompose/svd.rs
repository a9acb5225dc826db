//! One-sided (Hestenes) Jacobi SVD in double precision.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Sweep limit before giving up.
pub const MAX_SWEEPS: usize = 30;
/// A column pair counts as orthogonal once `|a_p . a_q| / (|a_p| |a_q|)`
/// drops below this.
pub const ORTHOGONALITY_TOL: f64 = 1e-12;

/// Thin SVD `w = u diag(sigma) v` in double precision.
///
/// `u` is `rows x rank` and `v` is `rank x cols`, both row-major. Singular
/// values are non-negative and sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd64 {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub u: Vec<f64>,
    pub sigma: Vec<f64>,
    pub v: Vec<f64>,
}

/// Single-precision SVD factors: `u` is `n x r`, `v` is `r x h`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f32>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Keeps the leading `r` singular triplets.
    pub fn truncate(&self, r: usize) -> Result<SvdResult> {
        check_rank(r, self.rank())?;
        Ok(SvdResult {
            u: self.u.slice_cols(0, r),
            sigma: self.sigma[..r].to_vec(),
            v: self.v.slice_rows(0, r),
        })
    }

    /// `u diag(sigma) v`, accumulated in single precision.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (x, s) in us.row_mut(r).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        us.matmul(&self.v).expect("svd factors have matching shapes")
    }
}

impl Svd64 {
    pub fn truncate(&self, r: usize) -> Result<Svd64> {
        check_rank(r, self.rank)?;
        let mut u = Vec::with_capacity(self.rows * r);
        for i in 0..self.rows {
            u.extend_from_slice(&self.u[i * self.rank..i * self.rank + r]);
        }
        Ok(Svd64 {
            rows: self.rows,
            cols: self.cols,
            rank: r,
            u,
            sigma: self.sigma[..r].to_vec(),
            v: self.v[..r * self.cols].to_vec(),
        })
    }

    /// `u diag(sigma) v` as a row-major `rows x cols` buffer.
    pub fn reconstruct(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for k in 0..self.rank {
                let a = self.u[i * self.rank + k] * self.sigma[k];
                for j in 0..self.cols {
                    out[i * self.cols + j] += a * self.v[k * self.cols + j];
                }
            }
        }
        out
    }

    pub fn to_f32(&self) -> SvdResult {
        let cast = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        SvdResult {
            u: Matrix::from_vec(self.rows, self.rank, cast(&self.u)).expect("u shape"),
            sigma: cast(&self.sigma),
            v: Matrix::from_vec(self.rank, self.cols, cast(&self.v)).expect("v shape"),
        }
    }
}

fn check_rank(r: usize, full: usize) -> Result<()> {
    if r == 0 || r > full {
        return Err(Error::InvalidArgument(format!(
            "rank {r} outside 1..={full}"
        )));
    }
    Ok(())
}

/// Full thin SVD of `w`, cast to single precision.
///
/// Deterministic: the largest-magnitude entry of every column of `u` is
/// non-negative.
pub fn svd(w: &Matrix) -> Result<SvdResult> {
    Ok(svd64(w)?.to_f32())
}

/// Full thin SVD of `w` in double precision.
pub fn svd64(w: &Matrix) -> Result<Svd64> {
    let (m, n) = w.shape();
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("svd of empty {m}x{n} matrix")));
    }
    if !w.is_finite() {
        return Err(Error::InvalidArgument("svd input has non-finite entries".into()));
    }
    let data: Vec<f64> = w.as_slice().iter().map(|&x| f64::from(x)).collect();
    let mut out = if m >= n {
        jacobi_tall(&data, m, n)?
    } else {
        // w^T = U S V^T  =>  w = V S U^T
        let mut t = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                t[j * m + i] = data[i * n + j];
            }
        }
        let s = jacobi_tall(&t, n, m)?;
        // s.u is n x m (left of w^T), s.v is m x m (right of w^T, transposed).
        let r = m;
        let mut u = vec![0.0; m * r];
        for k in 0..r {
            for i in 0..m {
                u[i * r + k] = s.v[k * m + i];
            }
        }
        let mut v = vec![0.0; r * n];
        for k in 0..r {
            for j in 0..n {
                v[k * n + j] = s.u[j * r + k];
            }
        }
        Svd64 {
            rows: m,
            cols: n,
            rank: r,
            u,
            sigma: s.sigma,
            v,
        }
    };
    fix_signs(&mut out);
    Ok(out)
}

/// Jacobi on a row-major `m x n` matrix with `m >= n`.
fn jacobi_tall(a: &[f64], m: usize, n: usize) -> Result<Svd64> {
    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let frob2: f64 = a.iter().map(|x| x * x).sum();
    // Columns this small are numerically zero; rotating them only churns noise.
    let negligible = (1e-15 * frob2.sqrt()).powi(2);

    let mut converged = n < 2;
    let mut residual = 0.0f64;
    for _sweep in 0..MAX_SWEEPS {
        residual = 0.0;
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off < ORTHOGONALITY_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNonConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in column order, which keeps the result
    // deterministic.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let smax = norms[order[0]];
    let zero_cut = smax * 1e-13;

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v = vec![0.0; n * n];
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        sigma.push(norms[j]);
        if norms[j] > zero_cut && norms[j] > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / norms[j]).collect());
        } else {
            ucols.push(vec![0.0; m]);
            deficient.push(k);
        }
        for i in 0..n {
            v[k * n + i] = vcols[j][i];
        }
    }
    for k in deficient {
        ucols[k] = orthogonal_complement(&ucols, k, m);
    }
    let mut u = vec![0.0; m * n];
    for (k, col) in ucols.iter().enumerate() {
        for i in 0..m {
            u[i * n + k] = col[i];
        }
    }
    Ok(Svd64 {
        rows: m,
        cols: n,
        rank: n,
        u,
        sigma,
        v,
    })
}

/// A unit vector orthogonal to every non-zero column except `skip`.
fn orthogonal_complement(cols: &[Vec<f64>], skip: usize, m: usize) -> Vec<f64> {
    let mut best = vec![0.0; m];
    let mut best_norm = -1.0;
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        // Two passes of Gram-Schmidt for numerical orthogonality.
        for _ in 0..2 {
            for (k, c) in cols.iter().enumerate() {
                if k == skip || c.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let proj = dot(&cand, c);
                for (x, y) in cand.iter_mut().zip(c) {
                    *x -= proj * y;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > best_norm + 1e-12 {
            best_norm = norm;
            best = cand;
        }
        if best_norm > 0.5 {
            break;
        }
    }
    best.iter().map(|x| x / best_norm).collect()
}

fn fix_signs(s: &mut Svd64) {
    for k in 0..s.rank {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..s.rows {
            let a = s.u[i * s.rank + k].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if s.u[best * s.rank + k] < 0.0 {
            for i in 0..s.rows {
                s.u[i * s.rank + k] = -s.u[i * s.rank + k];
            }
            for j in 0..s.cols {
                s.v[k * s.cols + j] = -s.v[k * s.cols + j];
            }
        }
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `||w - w_r||_F / ||w||_F` for the best rank-`r` approximation.
///
/// Uses the singular value tail, `sqrt(sum_{i>r} sigma_i^2)`, which equals
/// the direct residual norm and is exactly non-increasing in `r`.
pub fn reconstruction_error(w: &Matrix, r: usize) -> Result<f64> {
    let s = svd64(w)?;
    check_rank(r, s.rank)?;
    let total: f64 = s.sigma.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let tail: f64 = s.sigma[r..].iter().map(|x| x * x).sum();
    Ok((tail / total).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity() {
        let s = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(s.sigma, vec![1.0, 1.0, 1.0]);
        assert_eq!(s.reconstruct(), Matrix::identity(3));
    }

    #[test]
    fn diagonal() {
        let s = svd(&Matrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
        let s = svd(&Matrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn rank_one_truncation_of_diagonal() {
        let s = svd(&Matrix::diag(&[3.0, 2.0, 1.0])).unwrap().truncate(1).unwrap();
        assert_eq!(s.sigma, vec![3.0]);
        assert_eq!(s.reconstruct(), Matrix::diag(&[3.0, 0.0, 0.0]));
    }

    #[test]
    fn full_truncation_is_identity() {
        let w = Matrix::from_rows(&[&[1.0, 2.0, 0.5], &[-1.0, 0.3, 2.0]]);
        let s = svd(&w).unwrap();
        assert_eq!(s.truncate(s.rank()).unwrap(), s);
        assert!(s.truncate(0).is_err());
        assert!(s.truncate(3).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let w = Matrix::from_rows(&[&[1.0, f32::NAN]]);
        assert!(svd(&w).is_err());
    }

    #[test]
    fn zero_matrix_has_orthonormal_u() {
        let s = svd64(&Matrix::zeros(4, 3)).unwrap();
        assert!(s.sigma.iter().all(|&x| x == 0.0));
        for a in 0..3 {
            for b in 0..3 {
                let d: f64 = (0..4).map(|i| s.u[i * 3 + a] * s.u[i * 3 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reconstruction_error_domain() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert!(reconstruction_error(&w, 0).is_err());
        assert!(reconstruction_error(&w, 2).unwrap() < 1e-6);
    }
}
