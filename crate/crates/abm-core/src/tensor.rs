//! Dense row-major tensors with 32-bit storage and 64-bit accumulation.
//!
//! All reductions (matmul inner products, norms, sums) accumulate in f64
//! with a fixed left-to-right order so results are identical across runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} has {expected} elements but data has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("shape mismatch: {left:?} vs {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects a matrix, got rank-{rank} tensor")]
    NotAMatrix { op: &'static str, rank: usize },
    #[error("SVD did not converge within {sweeps} sweeps")]
    SvdNonConvergence { sweeps: usize },
}

/// Immutable dense tensor. Values are finite by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite { index: i, value: v });
            }
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f32) -> Result<Self, TensorError> {
        Self::new(vec![1], vec![v])
    }

    /// Build an r x c matrix from row slices.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::new(vec![r, c], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Matrix dims (rows, cols); errors on non rank-2 tensors.
    pub fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::NotAMatrix {
                op,
                rank: self.shape.len(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn at2(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Frobenius norm, accumulated in f64.
    pub fn frob_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for &v in &self.data {
            acc += (v as f64) * (v as f64);
        }
        acc.sqrt()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.matrix_dims("transpose")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Standard matrix product with f64 accumulation over the inner dim.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += (self.data[i * k + p] as f64) * (other.data[p * n + j] as f64);
                }
                data[i * n + j] = acc as f32;
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    /// Thin SVD a = U diag(S) Vt with S descending, r = min(m, n).
    ///
    /// Sign convention: the first nonzero entry of each U column is
    /// nonnegative, so factorizations are reproducible.
    pub fn svd(&self) -> Result<(Tensor, Tensor, Tensor), TensorError> {
        let (m, n) = self.matrix_dims("svd")?;
        let a: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        let (u, s, vt) = svd_f64(&a, m, n)?;
        let r = m.min(n);
        let uf: Vec<f32> = u.iter().map(|&v| v as f32).collect();
        let sf: Vec<f32> = s.iter().map(|&v| v as f32).collect();
        let vtf: Vec<f32> = vt.iter().map(|&v| v as f32).collect();
        Ok((
            Tensor {
                shape: vec![m, r],
                data: uf,
            },
            Tensor {
                shape: vec![r],
                data: sf,
            },
            Tensor {
                shape: vec![r, n],
                data: vtf,
            },
        ))
    }

    /// X minimizing ||X A - B||_F for square A, via the SVD pseudoinverse
    /// (well defined even when A is singular).
    pub fn solve_least_squares(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (n, n2) = a.matrix_dims("solve_least_squares")?;
        let (mb, nb) = b.matrix_dims("solve_least_squares")?;
        if n != n2 || nb != n {
            return Err(TensorError::ShapeMismatch {
                op: "solve_least_squares",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let af: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
        let bf: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
        let x = lstsq_f64(&af, n, &bf, mb)?;
        let data: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        Tensor::new(vec![mb, n], data)
    }
}

/// One-sided Jacobi SVD in f64. Returns (U m*r, S r, Vt r*n) row-major,
/// singular values descending, U sign-fixed.
pub(crate) fn svd_f64(
    a: &[f64],
    m: usize,
    n: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), TensorError> {
    if m < n {
        // svd(A^T) and swap factors: A = (V S Ut)^T-wise.
        let mut at = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                at[j * m + i] = a[i * n + j];
            }
        }
        let (ut, s, vtt) = svd_f64(&at, n, m)?;
        // A^T = Ut S Vtt  =>  A = Vtt^T S Ut^T
        let r = m;
        let mut u = vec![0.0; m * r]; // = Vtt^T, Vtt is r x m
        for i in 0..r {
            for j in 0..m {
                u[j * r + i] = vtt[i * m + j];
            }
        }
        let mut vt = vec![0.0; r * n]; // = Ut^T, Ut is n x r
        for i in 0..n {
            for j in 0..r {
                vt[j * n + i] = ut[i * r + j];
            }
        }
        let (u, vt) = fix_signs(u, vt, m, n, r);
        return Ok((u, s, vt));
    }

    // m >= n: rotate columns of a working copy until mutually orthogonal.
    let r = n;
    let mut w = a.to_vec(); // m x n
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let col_dot = |w: &[f64], p: usize, q: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..m {
            acc += w[i * n + p] * w[i * n + q];
        }
        acc
    };
    let max_sweeps = 60;
    let tol = 1e-14;
    // Columns this far below the matrix scale are numerically zero;
    // rotating against them never converges, only churns round-off.
    let frob2: f64 = a.iter().map(|v| v * v).sum();
    let deflate = frob2 * 1e-30;
    let mut converged = false;
    for _sweep in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = col_dot(&w, p, p);
                let beta = col_dot(&w, q, q);
                let gamma = col_dot(&w, p, q);
                if alpha <= deflate || beta <= deflate {
                    continue;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w[i * n + p];
                    let wq = w[i * n + q];
                    w[i * n + p] = c * wp - s * wq;
                    w[i * n + q] = s * wp + c * wq;
                }
                for i in 0..n {
                    let vp = v[i * n + p];
                    let vq = v[i * n + q];
                    v[i * n + p] = c * vp - s * vq;
                    v[i * n + q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(TensorError::SvdNonConvergence { sweeps: max_sweeps });
    }

    let mut sigma: Vec<f64> = (0..n).map(|j| col_dot(&w, j, j).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap().then(i.cmp(&j)));

    let smax = sigma.iter().cloned().fold(0.0f64, f64::max);
    let zero_cut = smax * 1e-13;
    let mut u = vec![0.0; m * r];
    let mut vt = vec![0.0; r * n];
    let mut zero_cols = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = sigma[src];
        if s > zero_cut && s > 0.0 {
            for i in 0..m {
                u[i * r + dst] = w[i * n + src] / s;
            }
        } else {
            zero_cols.push(dst);
        }
        for i in 0..n {
            vt[dst * n + i] = v[i * n + src];
        }
    }
    sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
    // Complete numerically-zero columns to keep U orthonormal.
    for &dst in &zero_cols {
        'basis: for k in 0..m {
            let mut cand = vec![0.0; m];
            cand[k] = 1.0;
            for c in 0..r {
                if c == dst || zero_cols.contains(&c) && c > dst {
                    continue;
                }
                let mut proj = 0.0;
                for i in 0..m {
                    proj += cand[i] * u[i * r + c];
                }
                for i in 0..m {
                    cand[i] -= proj * u[i * r + c];
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for i in 0..m {
                    u[i * r + dst] = cand[i] / norm;
                }
                break 'basis;
            }
        }
    }
    let (u, vt) = fix_signs(u, vt, m, n, r);
    Ok((u, sigma, vt))
}

fn fix_signs(mut u: Vec<f64>, mut vt: Vec<f64>, m: usize, n: usize, r: usize) -> (Vec<f64>, Vec<f64>) {
    for j in 0..r {
        let mut sign = 1.0;
        for i in 0..m {
            let v = u[i * r + j];
            if v != 0.0 {
                if v < 0.0 {
                    sign = -1.0;
                }
                break;
            }
        }
        if sign < 0.0 {
            for i in 0..m {
                u[i * r + j] = -u[i * r + j];
            }
            for i in 0..n {
                vt[j * n + i] = -vt[j * n + i];
            }
        }
    }
    (u, vt)
}

/// X minimizing ||X A - B||_F with A n x n, B mb x n, all f64 row-major.
pub(crate) fn lstsq_f64(a: &[f64], n: usize, b: &[f64], mb: usize) -> Result<Vec<f64>, TensorError> {
    let (u, s, vt) = svd_f64(a, n, n)?;
    let smax = s.first().copied().unwrap_or(0.0);
    let cutoff = smax * 1e-10;
    // pinv(A) = V diag(1/s) U^T; X = B pinv(A).
    // Compute C = B V  (mb x n), scale columns by 1/s, then X = C U^T.
    let mut c = vec![0.0; mb * n];
    for i in 0..mb {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..n {
                acc += b[i * n + p] * vt[j * n + p];
            }
            c[i * n + j] = acc;
        }
    }
    for j in 0..n {
        let inv = if s[j] > cutoff && s[j] > 0.0 { 1.0 / s[j] } else { 0.0 };
        for i in 0..mb {
            c[i * n + j] *= inv;
        }
    }
    let mut x = vec![0.0; mb * n];
    for i in 0..mb {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..n {
                acc += c[i * n + p] * u[j * n + p];
            }
            x[i * n + j] = acc;
        }
    }
    Ok(x)
}
