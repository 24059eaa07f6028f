//! Dense matrices and a one-sided Jacobi SVD.
//!
//! Desk-scale sizes only. One-sided Jacobi orthogonalizes columns by
//! plane rotations, which is simple, deterministic, and accurate to a
//! few ulps; tall matrices are pre-reduced with Householder QR and wide
//! ones are handled through the transpose.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("non-finite matrix entry")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Column-major dense matrix (column ops dominate the Jacobi sweeps).
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Build from row-major data (the layout tensors are stored in).
    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols);
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = data[r * cols + c];
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn col(&self, c: usize) -> &[f64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    pub fn col_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.rows..(c + 1) * self.rows]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for c in 0..self.cols {
            for r in 0..self.rows {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        for c in 0..other.cols {
            for k in 0..self.cols {
                let x = other[(k, c)];
                if x == 0.0 {
                    continue;
                }
                let src = self.col(k);
                let dst = out.col_mut(c);
                for r in 0..self.rows {
                    dst[r] += src[r] * x;
                }
            }
        }
        out
    }

    /// First k columns as a new matrix.
    pub fn leading_columns(&self, k: usize) -> Mat {
        assert!(k <= self.cols);
        Mat {
            rows: self.rows,
            cols: k,
            data: self.data[..k * self.rows].to_vec(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        crate::stats::l2_norm(self.data.iter().copied())
    }

    /// max_rc |a_rc − b_rc|
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[c * self.rows + r]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[c * self.rows + r]
    }
}

/// Thin SVD: `a = u · diag(sigma) · vᵀ` with `sigma` descending,
/// u: m×r, v: n×r, r = min(m, n).
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Mat,
    pub sigma: Vec<f64>,
    pub v: Mat,
}

pub fn svd(a: &Mat) -> Result<Svd> {
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    if a.rows < a.cols {
        let t = svd(&a.transpose())?;
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    // tall: reduce to square via QR first
    if a.rows > 2 * a.cols {
        let (q, r) = householder_qr(a);
        let inner = jacobi_svd(&r);
        return Ok(Svd {
            u: q.matmul(&inner.u),
            sigma: inner.sigma,
            v: inner.v,
        });
    }
    Ok(jacobi_svd(a))
}

/// One-sided Jacobi on an m×n matrix with m ≥ n.
fn jacobi_svd(a: &Mat) -> Svd {
    let (m, n) = (a.rows, a.cols);
    let mut g = a.clone();
    let mut v = Mat::identity(n);
    let tol = 1e-15;
    let max_sweeps = 64;

    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
                {
                    let (cp, cq) = (g.col(p), g.col(q));
                    for r in 0..m {
                        app += cp[r] * cp[r];
                        aqq += cq[r] * cq[r];
                        apq += cp[r] * cq[r];
                    }
                }
                if apq.abs() <= tol * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut g, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    // column norms are the singular values; sort descending
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|c| crate::stats::l2_norm(g.col(c).iter().copied()))
        .collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut u = Mat::zeros(m, n);
    let mut vs = Mat::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let scale = norms.iter().cloned().fold(0.0, f64::max);
    for (out_c, &c) in order.iter().enumerate() {
        let s = norms[c];
        sigma.push(s);
        if s > scale * 1e-300 && s > 0.0 {
            for r in 0..m {
                u[(r, out_c)] = g[(r, c)] / s;
            }
        }
        for r in 0..n {
            vs[(r, out_c)] = v[(r, c)];
        }
    }
    Svd { u, sigma, v: vs }
}

fn rotate_columns(m: &mut Mat, p: usize, q: usize, c: f64, s: f64) {
    let rows = m.rows;
    // split borrow: p < q always
    let (head, tail) = m.data.split_at_mut(q * rows);
    let cp = &mut head[p * rows..(p + 1) * rows];
    let cq = &mut tail[..rows];
    for r in 0..rows {
        let (x, y) = (cp[r], cq[r]);
        cp[r] = c * x - s * y;
        cq[r] = s * x + c * y;
    }
}

/// Thin Householder QR: a (m×n, m ≥ n) = q (m×n) · r (n×n).
pub fn householder_qr(a: &Mat) -> (Mat, Mat) {
    let (m, n) = (a.rows, a.cols);
    assert!(m >= n, "QR expects a tall matrix");
    let mut r = a.clone();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);

    for k in 0..n {
        // reflector for column k below the diagonal
        let mut v = vec![0.0; m - k];
        for i in k..m {
            v[i - k] = r[(i, k)];
        }
        let alpha = -v[0].signum() * crate::stats::l2_norm(v.iter().copied());
        v[0] -= alpha;
        let vnorm = crate::stats::l2_norm(v.iter().copied());
        if vnorm > 0.0 {
            for x in v.iter_mut() {
                *x /= vnorm;
            }
            for c in k..n {
                let mut dot = 0.0;
                for i in k..m {
                    dot += v[i - k] * r[(i, c)];
                }
                for i in k..m {
                    r[(i, c)] -= 2.0 * dot * v[i - k];
                }
            }
        }
        vs.push(v);
    }

    // accumulate thin Q by applying reflectors to the first n identity columns
    let mut q = Mat::zeros(m, n);
    for c in 0..n {
        q[(c, c)] = 1.0;
    }
    for k in (0..n).rev() {
        let v = &vs[k];
        for c in 0..n {
            let mut dot = 0.0;
            for i in k..m {
                dot += v[i - k] * q[(i, c)];
            }
            if dot != 0.0 {
                for i in k..m {
                    q[(i, c)] -= 2.0 * dot * v[i - k];
                }
            }
        }
    }

    // zero out the (numerically tiny) subdiagonal of r's top block
    let mut rr = Mat::zeros(n, n);
    for c in 0..n {
        for row in 0..=c.min(n - 1) {
            rr[(row, c)] = r[(row, c)];
        }
    }
    (q, rr)
}

/// σ_max, i.e. the spectral norm.
pub fn spectral_norm(a: &Mat) -> Result<f64> {
    Ok(svd(a)?.sigma.first().copied().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let rng = CounterRng::new(seed, "mat");
        let mut m = Mat::zeros(rows, cols);
        for c in 0..cols {
            for r in 0..rows {
                m[(r, c)] = rng.normal_at((c * rows + r) as u64);
            }
        }
        m
    }

    fn reconstruct(s: &Svd) -> Mat {
        let mut us = s.u.clone();
        for (c, &sv) in s.sigma.iter().enumerate() {
            for x in us.col_mut(c) {
                *x *= sv;
            }
        }
        us.matmul(&s.v.transpose())
    }

    #[test]
    fn identity_spectrum() {
        let s = svd(&Mat::identity(3)).unwrap();
        assert_eq!(s.sigma, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_spectrum_sorted() {
        let mut d = Mat::zeros(3, 3);
        d[(0, 0)] = 1.0;
        d[(1, 1)] = 3.0;
        d[(2, 2)] = 2.0;
        let s = svd(&d).unwrap();
        assert!((s.sigma[0] - 3.0).abs() < 1e-14);
        assert!((s.sigma[1] - 2.0).abs() < 1e-14);
        assert!((s.sigma[2] - 1.0).abs() < 1e-14);
        // U columns are signed unit vectors matching the sort
        assert!((s.u[(1, 0)].abs() - 1.0).abs() < 1e-14);
        assert!((s.u[(2, 1)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn reconstruction_and_orthogonality() {
        for (rows, cols, seed) in [(8usize, 5usize, 1u64), (5, 8, 2), (20, 4, 3), (16, 16, 4)] {
            let a = random_mat(rows, cols, seed);
            let s = svd(&a).unwrap();
            let err = reconstruct(&s).max_abs_diff(&a);
            assert!(err < 1e-9 * a.frobenius_norm().max(1.0), "{rows}x{cols}: {err}");
            // UᵀU == I
            let gram = s.u.transpose().matmul(&s.u);
            let r = s.sigma.len();
            for i in 0..r {
                for j in 0..r {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[(i, j)] - want).abs() < 1e-12, "gram {i},{j}");
                }
            }
            // descending
            for w in s.sigma.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn qr_reproduces_input() {
        let a = random_mat(12, 5, 7);
        let (q, r) = householder_qr(&a);
        let err = q.matmul(&r).max_abs_diff(&a);
        assert!(err < 1e-12, "{err}");
        let gram = q.transpose().matmul(&q);
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tall_path_agrees_with_direct_jacobi() {
        let a = random_mat(40, 6, 11);
        let via_qr = svd(&a).unwrap(); // rows > 2*cols triggers QR
        let direct = super::jacobi_svd(&a);
        for (x, y) in via_qr.sigma.iter().zip(&direct.sigma) {
            assert!((x - y).abs() < 1e-10 * y.max(1.0));
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut a = Mat::zeros(2, 2);
        a[(0, 0)] = f64::NAN;
        assert!(matches!(svd(&a), Err(LinalgError::NonFinite)));
    }
}
