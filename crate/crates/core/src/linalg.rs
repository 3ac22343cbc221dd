//! Small dense helpers shared by the network and estimation code.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result, C64};

/// 1-norm (max column sum) of a complex matrix.
pub fn norm1(m: &DMatrix<C64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse of a complex square matrix, rejecting numerically singular input.
pub fn complex_inverse(y: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let n = y.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let lu = y.clone().lu();
    let inv = lu.try_inverse().ok_or(Error::Singular { rcond: 0.0 })?;
    let rcond = 1.0 / (norm1(y) * norm1(&inv));
    if !rcond.is_finite() || rcond < 1e-14 {
        return Err(Error::Singular { rcond });
    }
    Ok(inv)
}

/// Real representation of a complex matrix acting on interleaved
/// `[re0, im0, re1, im1, ...]` vectors.
pub fn realify(z: &DMatrix<C64>) -> DMatrix<f64> {
    let mut r = DMatrix::zeros(2 * z.nrows(), 2 * z.ncols());
    for i in 0..z.nrows() {
        for j in 0..z.ncols() {
            let c = z[(i, j)];
            r[(2 * i, 2 * j)] = c.re;
            r[(2 * i, 2 * j + 1)] = -c.im;
            r[(2 * i + 1, 2 * j)] = c.im;
            r[(2 * i + 1, 2 * j + 1)] = c.re;
        }
    }
    r
}

/// Interleave a complex vector into `[re, im, ...]`.
pub fn split(v: &[C64]) -> Vec<f64> {
    v.iter().flat_map(|z| [z.re, z.im]).collect()
}

/// Inverse of [`split`].
pub fn join(v: &[f64]) -> Vec<C64> {
    v.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect()
}

/// Moore-Penrose pseudoinverse of a complex matrix together with its
/// singular values (descending) and numerical rank.
pub fn pinv(m: &DMatrix<C64>) -> (DMatrix<C64>, Vec<f64>, usize) {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return (DMatrix::zeros(c, r), Vec::new(), 0);
    }
    let svd = m.clone().svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let smax = sv.first().copied().unwrap_or(0.0);
    let tol = smax * (r.max(c) as f64) * f64::EPSILON;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let k = svd.singular_values.len();
    let mut out = DMatrix::<C64>::zeros(c, r);
    for s in 0..k {
        let sigma = svd.singular_values[s];
        if sigma <= tol {
            continue;
        }
        let inv = 1.0 / sigma;
        for i in 0..c {
            let vi = vt[(s, i)].conj() * inv;
            for j in 0..r {
                out[(i, j)] += vi * u[(j, s)].conj();
            }
        }
    }
    (out, sv, rank)
}

/// Solve a small dense real system, erroring on singularity.
pub fn solve_real(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.lu()
        .solve(b)
        .ok_or_else(|| Error::Numerical("singular real system".into()))
}
