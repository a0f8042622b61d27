//! Dense kernels with hand-derived backward passes.
//!
//! Everything here works on row-major 2-D data. The `DenseArray` functions
//! check shapes and are what tests and small callers use; the slice-level
//! kernels (`gemm`, `rmsnorm_rows`, ...) are the hot path used by the model
//! and projector, which manage their own buffers.

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// Borrowed strided matrix view.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    /// View with explicit row and column strides, e.g. one attention head
    /// inside a `rows x d_model` buffer.
    pub fn strided(data: &'a [f64], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * rs + (cols - 1) * cs;
            assert!(
                last < data.len(),
                "view {rows}x{cols} (rs={rs}, cs={cs}) exceeds buffer of {}",
                data.len()
            );
        }
        MatRef {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Mutable strided matrix view.
#[derive(Debug)]
pub struct MatMut<'a> {
    data: &'a mut [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [f64], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * rs + (cols - 1) * cs;
            assert!(
                last < data.len(),
                "view {rows}x{cols} (rs={rs}, cs={cs}) exceeds buffer of {}",
                data.len()
            );
        }
        MatMut {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }
}

/// `c = alpha * a * b + beta * c`. With `beta == 0` the previous contents of
/// `c` are ignored.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c.data[i * c.rs + j * c.cs];
                *x = if beta == 0.0 { 0.0 } else { beta * *x };
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked at construction against its
    // backing slice, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx of x * sigmoid(x).
#[inline]
pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise RMSNorm: `out[r] = x[r] / sqrt(mean(x[r]^2) + eps) * gain`.
/// Writes the per-row inverse RMS into `inv_rms` for the backward pass.
pub fn rmsnorm_rows(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64], inv_rms: &mut [f64]) {
    let d = gain.len();
    for ((xr, outr), r) in x
        .chunks_exact(d)
        .zip(out.chunks_exact_mut(d))
        .zip(inv_rms.iter_mut())
    {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        *r = inv;
        for ((o, &xv), &g) in outr.iter_mut().zip(xr).zip(gain) {
            *o = xv * inv * g;
        }
    }
}

/// Backward of [`rmsnorm_rows`]. Adds into `dx` and `dgain`.
pub fn rmsnorm_rows_backward(
    x: &[f64],
    gain: &[f64],
    inv_rms: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
) {
    let d = gain.len();
    for (((xr, dyr), dxr), &r) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(inv_rms)
    {
        let mut proj = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j] * r;
            proj += dyr[j] * gain[j] * xr[j];
        }
        let coef = r * r * r * proj / d as f64;
        for j in 0..d {
            dxr[j] += r * dyr[j] * gain[j] - coef * xr[j];
        }
    }
}

fn require_2d(op: &'static str, a: &DenseArray) -> Result<(usize, usize)> {
    match *a.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: vec![0, 0],
        }),
    }
}

fn same_shape(op: &'static str, a: &DenseArray, b: &DenseArray) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn matmul(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = DenseArray::zeros(&[m, n]);
    gemm(
        1.0,
        MatRef::new(a.data(), m, k),
        MatRef::new(b.data(), k, n),
        0.0,
        MatMut::new(out.data_mut(), m, n),
    );
    Ok(out)
}

/// Gradients of `c = a * b` given `dc`: `(dc * b^T, a^T * dc)`.
pub fn matmul_backward(
    a: &DenseArray,
    b: &DenseArray,
    grad_out: &DenseArray,
) -> Result<(DenseArray, DenseArray)> {
    let (m, k) = require_2d("matmul_backward", a)?;
    let (_, n) = require_2d("matmul_backward", b)?;
    if grad_out.shape() != [m, n] || b.shape()[0] != k {
        return Err(Error::ShapeMismatch {
            op: "matmul_backward",
            left: grad_out.shape().to_vec(),
            right: vec![m, n],
        });
    }
    let mut da = DenseArray::zeros(&[m, k]);
    let mut db = DenseArray::zeros(&[k, n]);
    gemm(
        1.0,
        MatRef::new(grad_out.data(), m, n),
        MatRef::new(b.data(), k, n).t(),
        0.0,
        MatMut::new(da.data_mut(), m, k),
    );
    gemm(
        1.0,
        MatRef::new(a.data(), m, k).t(),
        MatRef::new(grad_out.data(), m, n),
        0.0,
        MatMut::new(db.data_mut(), k, n),
    );
    Ok((da, db))
}

pub fn transpose(a: &DenseArray) -> Result<DenseArray> {
    let (r, c) = require_2d("transpose", a)?;
    let mut out = DenseArray::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = a.data()[i * c + j];
        }
    }
    Ok(out)
}

pub fn embedding(table: &DenseArray, ids: &[u32]) -> Result<DenseArray> {
    let (v, d) = require_2d("embedding", table)?;
    let mut out = DenseArray::zeros(&[ids.len(), d]);
    for (row, &id) in out.data_mut().chunks_exact_mut(d).zip(ids) {
        if id as usize >= v {
            return Err(Error::TokenOutOfRange {
                token: id,
                vocab_size: v,
            });
        }
        row.copy_from_slice(table.row(id as usize));
    }
    Ok(out)
}

/// Scatter-add of the output gradient into a `vocab x d` table gradient.
pub fn embedding_backward(vocab: usize, ids: &[u32], grad_out: &DenseArray) -> Result<DenseArray> {
    let (n, d) = require_2d("embedding_backward", grad_out)?;
    if n != ids.len() {
        return Err(Error::ShapeMismatch {
            op: "embedding_backward",
            left: vec![ids.len()],
            right: grad_out.shape().to_vec(),
        });
    }
    let mut table = DenseArray::zeros(&[vocab, d]);
    for (row, &id) in grad_out.data().chunks_exact(d).zip(ids) {
        if id as usize >= vocab {
            return Err(Error::TokenOutOfRange {
                token: id,
                vocab_size: vocab,
            });
        }
        for (t, g) in table.row_mut(id as usize).iter_mut().zip(row) {
            *t += g;
        }
    }
    Ok(table)
}

pub fn rmsnorm(x: &DenseArray, gain: &DenseArray, eps: f64) -> Result<DenseArray> {
    let (n, d) = require_2d("rmsnorm", x)?;
    if gain.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "rmsnorm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    let mut out = DenseArray::zeros(&[n, d]);
    let mut inv = vec![0.0; n];
    rmsnorm_rows(x.data(), gain.data(), eps, out.data_mut(), &mut inv);
    Ok(out)
}

pub fn rmsnorm_backward(
    x: &DenseArray,
    gain: &DenseArray,
    eps: f64,
    grad_out: &DenseArray,
) -> Result<(DenseArray, DenseArray)> {
    let (n, d) = require_2d("rmsnorm_backward", x)?;
    same_shape("rmsnorm_backward", x, grad_out)?;
    let mut scratch = vec![0.0; n * d];
    let mut inv = vec![0.0; n];
    rmsnorm_rows(x.data(), gain.data(), eps, &mut scratch, &mut inv);
    let mut dx = DenseArray::zeros(&[n, d]);
    let mut dg = DenseArray::zeros(&[d]);
    rmsnorm_rows_backward(
        x.data(),
        gain.data(),
        &inv,
        grad_out.data(),
        dx.data_mut(),
        dg.data_mut(),
    );
    Ok((dx, dg))
}

pub fn silu(x: &DenseArray) -> DenseArray {
    x.map(silu_scalar)
}

pub fn silu_backward(x: &DenseArray, grad_out: &DenseArray) -> Result<DenseArray> {
    same_shape("silu_backward", x, grad_out)?;
    Ok(x.zip_map(grad_out, |v, g| silu_grad_scalar(v) * g))
}

pub fn add(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    same_shape("add", a, b)?;
    Ok(a.zip_map(b, |x, y| x + y))
}

/// Both operands receive the output gradient unchanged.
pub fn add_backward(grad_out: &DenseArray) -> (DenseArray, DenseArray) {
    (grad_out.clone(), grad_out.clone())
}

pub fn mul(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    same_shape("mul", a, b)?;
    Ok(a.zip_map(b, |x, y| x * y))
}

pub fn mul_backward(
    a: &DenseArray,
    b: &DenseArray,
    grad_out: &DenseArray,
) -> Result<(DenseArray, DenseArray)> {
    same_shape("mul_backward", a, b)?;
    same_shape("mul_backward", a, grad_out)?;
    Ok((grad_out.zip_map(b, |g, y| g * y), grad_out.zip_map(a, |g, x| g * x)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_array(shape: &[usize], seed: u64) -> DenseArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseArray::randn(shape, 1.0, &mut rng)
    }

    fn max_rel_err(a: &DenseArray, b: &DenseArray) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    /// Scalar probe: loss = sum(out * weights) so every output coordinate
    /// contributes with a distinct weight.
    fn probe(out: &DenseArray, w: &DenseArray) -> f64 {
        out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn rmsnorm_of_constant_is_unit() {
        let x = DenseArray::from_vec(&[1, 6], vec![1.0; 6]).unwrap();
        let g = DenseArray::from_vec(&[6], vec![1.0; 6]).unwrap();
        let y = rmsnorm(&x, &g, 1e-6).unwrap();
        for v in y.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
        let c = -3.0;
        let x = DenseArray::from_vec(&[1, 6], vec![c; 6]).unwrap();
        let y = rmsnorm(&x, &g, 1e-6).unwrap();
        let expected = -1.0 / (1.0f64 + 1e-6 / (c * c)).sqrt();
        for v in y.data() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn silu_at_zero() {
        assert_eq!(silu_scalar(0.0), 0.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = DenseArray::zeros(&[3, 4]);
        let b = DenseArray::zeros(&[3, 2]);
        match matmul(&a, &b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![3, 4]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let a = rand_array(&[3, 4], 1);
        let b = rand_array(&[4, 2], 2);
        let w = rand_array(&[3, 2], 3);
        let (da, db) = matmul_backward(&a, &b, &w).unwrap();
        let fa = finite_difference_gradient(|p| probe(&matmul(p, &b).unwrap(), &w), &a, 1e-5)
            .unwrap();
        let fb = finite_difference_gradient(|p| probe(&matmul(&a, p).unwrap(), &w), &b, 1e-5)
            .unwrap();
        assert!(max_rel_err(&da, &fa) < 1e-6, "{}", max_rel_err(&da, &fa));
        assert!(max_rel_err(&db, &fb) < 1e-6, "{}", max_rel_err(&db, &fb));
    }

    #[test]
    fn rmsnorm_backward_matches_finite_differences() {
        let x = rand_array(&[4, 5], 4);
        let g = rand_array(&[5], 5);
        let w = rand_array(&[4, 5], 6);
        let (dx, dg) = rmsnorm_backward(&x, &g, 1e-6, &w).unwrap();
        let fx = finite_difference_gradient(|p| probe(&rmsnorm(p, &g, 1e-6).unwrap(), &w), &x, 1e-5)
            .unwrap();
        let fg = finite_difference_gradient(|p| probe(&rmsnorm(&x, p, 1e-6).unwrap(), &w), &g, 1e-5)
            .unwrap();
        assert!(max_rel_err(&dx, &fx) < 1e-4);
        assert!(max_rel_err(&dg, &fg) < 1e-4);
    }

    #[test]
    fn silu_and_mul_backward_match_finite_differences() {
        let x = rand_array(&[3, 3], 7);
        let y = rand_array(&[3, 3], 8);
        let w = rand_array(&[3, 3], 9);
        let ds = silu_backward(&x, &w).unwrap();
        let fs = finite_difference_gradient(|p| probe(&silu(p), &w), &x, 1e-5).unwrap();
        assert!(max_rel_err(&ds, &fs) < 1e-4);

        let (dx, dy) = mul_backward(&x, &y, &w).unwrap();
        let fx = finite_difference_gradient(|p| probe(&mul(p, &y).unwrap(), &w), &x, 1e-5).unwrap();
        let fy = finite_difference_gradient(|p| probe(&mul(&x, p).unwrap(), &w), &y, 1e-5).unwrap();
        assert!(max_rel_err(&dx, &fx) < 1e-4);
        assert!(max_rel_err(&dy, &fy) < 1e-4);

        let (da, db) = add_backward(&w);
        let fa = finite_difference_gradient(|p| probe(&add(p, &y).unwrap(), &w), &x, 1e-5).unwrap();
        assert!(max_rel_err(&da, &fa) < 1e-6);
        assert_eq!(da, db);
    }

    #[test]
    fn embedding_and_transpose_backward() {
        let table = rand_array(&[5, 3], 10);
        let ids = [4u32, 0, 4, 2];
        let w = rand_array(&[4, 3], 11);
        let dt = embedding_backward(5, &ids, &w).unwrap();
        let ft = finite_difference_gradient(|p| probe(&embedding(p, &ids).unwrap(), &w), &table, 1e-5)
            .unwrap();
        assert!(max_rel_err(&dt, &ft) < 1e-6);
        assert!(matches!(
            embedding(&table, &[5]),
            Err(Error::TokenOutOfRange { token: 5, .. })
        ));

        // transpose is linear and self-inverse; its backward is transpose.
        let a = rand_array(&[2, 3], 12);
        let wt = rand_array(&[3, 2], 13);
        let ga = transpose(&wt).unwrap();
        let fa = finite_difference_gradient(|p| probe(&transpose(p).unwrap(), &wt), &a, 1e-5)
            .unwrap();
        assert!(max_rel_err(&ga, &fa) < 1e-6);
        assert_eq!(transpose(&transpose(&a).unwrap()).unwrap(), a);
    }

    #[test]
    fn strided_gemm_reads_head_slices() {
        // 2 rows of width 4, take columns 2..4 as a 2x2 block.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let block = MatRef::strided(&x[2..], 2, 2, 4, 1);
        let eye = [1.0, 0.0, 0.0, 1.0];
        let mut out = [0.0; 4];
        gemm(1.0, block, MatRef::new(&eye, 2, 2), 0.0, MatMut::new(&mut out, 2, 2));
        assert_eq!(out, [3.0, 4.0, 7.0, 8.0]);
    }
}
