//! Dense row-major matrices and the handful of primitives the head is built from.
//!
//! Everything here is 64-bit. Shapes are checked at every public entry point and
//! reported through [`Error::Shape`]; the inner loops assume the check passed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows. An empty slice gives a `0 x cols` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on zero width, so route empty-column matrices through a range.
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows `rows` stacked below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape(
                "vstack",
                format!("{} vs {} columns", self.cols, other.cols),
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns `start..start + width`.
    pub fn col_block(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    /// Each row divided by its Euclidean norm. Zero rows stay zero.
    pub fn l2_normalized_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a * b^T`, the natural layout for `x W^T` with row-major weights.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(shape(
            "matmul_bt",
            format!("{:?} x {:?}^T", a.shape(), b.shape()),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

/// `a^T * b`, used for weight gradients.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(shape(
            "matmul_at",
            format!("{:?}^T x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction. Rows of width zero are left empty.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Given softmax output `w` and upstream `dw`, returns the gradient wrt the logits.
pub fn softmax_rows_backward(w: &Matrix, dw: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(w.rows, w.cols);
    for r in 0..w.rows {
        let wr = w.row(r);
        let dr = dw.row(r);
        let inner = dot(wr, dr);
        for ((o, wv), dv) in out.row_mut(r).iter_mut().zip(wr).zip(dr) {
            *o = wv * (dv - inner);
        }
    }
    out
}

/// `y = x W^T + b` with `W` stored `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl LinearMap {
    pub fn new(weight: Matrix, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.rows {
                return Err(shape(
                    "LinearMap::new",
                    format!("bias {} for {} outputs", b.len(), weight.rows),
                ));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: Some(vec![0.0; out_dim]),
        }
    }

    /// Fan-in scaled uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: Matrix::uniform(out_dim, in_dim, bound, rng),
            bias: Some(vec![0.0; out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = matmul_bt(x, &self.weight)?;
        if let Some(b) = &self.bias {
            for r in 0..y.rows {
                for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut LinearMap) -> Result<Matrix> {
        grad.weight.add_assign(&matmul_at(dy, x)?)?;
        if let Some(gb) = grad.bias.as_mut() {
            for r in 0..dy.rows {
                for (g, d) in gb.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
        matmul(dy, &self.weight)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub epsilon: f64,
}

pub const DEFAULT_LN_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn new(dim: usize, epsilon: f64) -> Self {
        Self {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
            epsilon,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }
}

/// `gain * (x - mean) / sqrt(var + eps) + bias` with the population variance.
pub fn layer_norm(x: &[f64], p: &LayerNormParams) -> Result<Vec<f64>> {
    if x.len() != p.dim() || p.bias.len() != p.dim() {
        return Err(shape(
            "layer_norm",
            format!("input {} vs params {}", x.len(), p.dim()),
        ));
    }
    let mut out = vec![0.0; x.len()];
    ln_row(x, p, &mut out);
    Ok(out)
}

/// Returns `inv_std` for the row; `out` receives the normalized, affine-transformed row.
fn ln_row(x: &[f64], p: &LayerNormParams, out: &mut [f64]) -> f64 {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + p.epsilon).sqrt();
    for (i, o) in out.iter_mut().enumerate() {
        *o = p.gain[i] * (x[i] - mean) * inv_std + p.bias[i];
    }
    inv_std
}

/// Saved activations for a row-wise layer norm.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_rows(x: &Matrix, p: &LayerNormParams) -> Result<(Matrix, LayerNormCache)> {
    if x.cols != p.dim() {
        return Err(shape(
            "layer_norm_rows",
            format!("{} columns vs {} gains", x.cols, p.dim()),
        ));
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut normalized = Matrix::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let s = ln_row(x.row(r), p, out.row_mut(r));
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / x.cols as f64;
        for (n, v) in normalized.row_mut(r).iter_mut().zip(xr) {
            *n = (v - mean) * s;
        }
        inv_std.push(s);
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Full layer-norm Jacobian (mean and variance paths included). Accumulates gain/bias grads.
pub fn layer_norm_rows_backward(
    cache: &LayerNormCache,
    dy: &Matrix,
    p: &LayerNormParams,
    grad: &mut LayerNormParams,
) -> Matrix {
    let (rows, cols) = dy.shape();
    let d = cols as f64;
    let mut dx = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let xhat = cache.normalized.row(r);
        let dyr = dy.row(r);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..cols {
            grad.gain[i] += dyr[i] * xhat[i];
            grad.bias[i] += dyr[i];
            let dxh = dyr[i] * p.gain[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[i];
        }
        mean_dxhat /= d;
        mean_dxhat_xhat /= d;
        let s = cache.inv_std[r];
        for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
            let dxh = dyr[i] * p.gain[i];
            *o = s * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ln_unit(d: usize, eps: f64) -> LayerNormParams {
        LayerNormParams::new(d, eps)
    }

    #[test]
    fn matmul_identity_and_selector() {
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        let a = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let b = Matrix::new(2, 1, vec![0.0, 5.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matmul(&a, &a).is_err());
        assert!(matmul_bt(&a, &Matrix::zeros(2, 2)).is_err());
        assert!(matmul_at(&a, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::uniform(3, 4, 1.0, &mut rng);
        let b = Matrix::uniform(4, 2, 1.0, &mut rng);
        let fast = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((fast.get(i, j) - s).abs() < 1e-12);
            }
        }
        let bt = b.transpose();
        assert!(matmul_bt(&a, &bt)
            .unwrap()
            .data()
            .iter()
            .zip(fast.data())
            .all(|(x, y)| (x - y).abs() < 1e-12));
        let at = a.transpose();
        assert!(matmul_at(&at, &b)
            .unwrap()
            .data()
            .iter()
            .zip(fast.data())
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn softmax_fixtures() {
        let m = Matrix::new(3, 2, vec![0.0, 0.0, 0.0, 3f64.ln(), 1000.0, 1000.0]).unwrap();
        let s = softmax_rows(&m);
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.get(1, 0) - 0.25).abs() < 1e-12);
        assert!((s.get(1, 1) - 0.75).abs() < 1e-12);
        assert_eq!(s.row(2), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_fixtures() {
        let p = ln_unit(2, 1e-300);
        let y = layer_norm(&[1.0, -1.0], &p).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);
        let y = layer_norm(&[2.0, 0.0], &p).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);
        let y = layer_norm(&[7.5, 7.5], &ln_unit(2, DEFAULT_LN_EPS)).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        assert!(layer_norm(&[1.0], &p).is_err());
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::uniform(2, 5, 1.0, &mut rng);
        let mut p = ln_unit(5, DEFAULT_LN_EPS);
        p.gain = (0..5).map(|i| 0.5 + i as f64 * 0.3).collect();
        let dy = Matrix::uniform(2, 5, 1.0, &mut rng);
        let loss = |x: &Matrix| {
            let (y, _) = layer_norm_rows(x, &p).unwrap();
            dot(y.data(), dy.data())
        };
        let (_, cache) = layer_norm_rows(&x, &p).unwrap();
        let mut g = LayerNormParams {
            gain: vec![0.0; 5],
            bias: vec![0.0; 5],
            epsilon: p.epsilon,
        };
        let dx = layer_norm_rows_backward(&cache, &dy, &p, &mut g);
        let h = 1e-6;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-7, "{fd} vs {}", dx.data()[i]);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-1e4f64..1e4, 1..12)) {
            let n = row.len();
            let s = softmax_rows(&Matrix::new(1, n, row).unwrap());
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(s.data().iter().all(|v| *v >= 0.0 && v.is_finite()));
        }

        #[test]
        fn layer_norm_shift_invariant(
            row in prop::collection::vec(-10f64..10.0, 2..16),
            c in -100f64..100.0,
        ) {
            let p = ln_unit(row.len(), DEFAULT_LN_EPS);
            let a = layer_norm(&row, &p).unwrap();
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let b = layer_norm(&shifted, &p).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn matmul_associative(seed in any::<u64>(), n in 1usize..5, k in 1usize..5, m in 1usize..5, p in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::uniform(n, k, 1.0, &mut rng);
            let b = Matrix::uniform(k, m, 1.0, &mut rng);
            let c = Matrix::uniform(m, p, 1.0, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
