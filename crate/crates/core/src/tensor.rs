//! Dense row-major `f64` tensors and the handful of kernels a ViT needs.
//!
//! All reductions accumulate in a fixed ascending order so results are
//! bit-reproducible; none of the kernels reorder sums for speed.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 3;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::dim(format!(
                "tensor rank must be 1..={MAX_RANK}, got shape {shape:?}"
            )));
        }
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero-sized axis in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("valid shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(&mut f).collect()).expect("valid shape")
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a 2-D tensor; a 1-D tensor is one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            [a, b, c] => (a * b, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Copies the listed columns of a 2-D tensor into a `rows × cols.len()` tensor.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Tensor> {
        let (rows, width) = self.dims2();
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(Error::dim(format!("column {bad} out of range for width {width}")));
        }
        let mut out = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            let row = &self.data[r * width..(r + 1) * width];
            out.extend(cols.iter().map(|&c| row[c]));
        }
        Tensor::new(vec![rows, cols.len()], out)
    }
}

fn expect_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(format!("{what} must be 2-D, got shape {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `c = a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_2d(a, "matmul lhs")?;
    let (k2, n) = expect_2d(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut c = vec![0.0; m * n];
    kernels::matmul(&a.data, &b.data, &mut c, m, k, n);
    Tensor::new(vec![m, n], c)
}

/// `c = aᵀ · b`.
pub fn matmul_at_b(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (t, m) = expect_2d(a, "matmul_at_b lhs")?;
    let (t2, n) = expect_2d(b, "matmul_at_b rhs")?;
    if t != t2 {
        return Err(Error::dim(format!(
            "matmul_at_b row counts disagree: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut c = vec![0.0; m * n];
    kernels::matmul_at_b_acc(&a.data, &b.data, &mut c, t, m, n);
    Tensor::new(vec![m, n], c)
}

/// `c = a · bᵀ`.
pub fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_2d(a, "matmul_a_bt lhs")?;
    let (n, k2) = expect_2d(b, "matmul_a_bt rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul_a_bt inner dimensions disagree: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut c = vec![0.0; m * n];
    kernels::matmul_a_bt(&a.data, &b.data, &mut c, m, k, n);
    Tensor::new(vec![m, n], c)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = x.dims2();
    let mut out = x.clone();
    for r in 0..rows {
        kernels::softmax_in_place(&mut out.data[r * cols..(r + 1) * cols]);
    }
    out
}

/// Per-row layer normalization with the biased variance estimator.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (rows, d) = x.dims2();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::dim(format!(
            "layernorm width {d} vs gamma {:?} / beta {:?}",
            gamma.shape, beta.shape
        )));
    }
    let mut out = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    kernels::layernorm(
        &x.data, &gamma.data, &beta.data, eps, d, &mut out, &mut xhat, &mut rstd,
    );
    Tensor::new(x.shape.clone(), out)
}

/// Elementwise tanh-approximation GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v = kernels::gelu(*v));
    out
}

/// Slice-level kernels shared by the tensor API and the model code.
pub(crate) mod kernels {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    const GELU_CUBIC: f64 = 0.044715;

    /// `c = a[m×k] · b[k×n]`, each `c[i,j]` summed over ascending `t`.
    /// Rows are processed four at a time so each row of `b` is loaded once
    /// per group; the per-entry operation sequence is unchanged.
    pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        c.iter_mut().for_each(|v| *v = 0.0);
        let full = m / 4 * 4;
        for i in (0..full).step_by(4) {
            let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            for t in 0..k {
                let (a0, a1, a2, a3) = (a[i * k + t], a[(i + 1) * k + t], a[(i + 2) * k + t], a[(i + 3) * k + t]);
                let brow = &b[t * n..(t + 1) * n];
                for j in 0..n {
                    let bv = brow[j];
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
        }
        for i in full..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for t in 0..k {
                let av = a[i * k + t];
                let brow = &b[t * n..(t + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    /// `c += a[t×m]ᵀ · b[t×n]`, rows of `a`/`b` folded in ascending order
    /// (four at a time per pass over a row of `c`).
    pub fn matmul_at_b_acc(a: &[f64], b: &[f64], c: &mut [f64], t: usize, m: usize, n: usize) {
        let full = t / 4 * 4;
        for s in (0..full).step_by(4) {
            let (b0, b1, b2, b3) = (
                &b[s * n..(s + 1) * n],
                &b[(s + 1) * n..(s + 2) * n],
                &b[(s + 2) * n..(s + 3) * n],
                &b[(s + 3) * n..(s + 4) * n],
            );
            for i in 0..m {
                let (a0, a1, a2, a3) = (a[s * m + i], a[(s + 1) * m + i], a[(s + 2) * m + i], a[(s + 3) * m + i]);
                let crow = &mut c[i * n..(i + 1) * n];
                for j in 0..n {
                    let mut v = crow[j];
                    v += a0 * b0[j];
                    v += a1 * b1[j];
                    v += a2 * b2[j];
                    v += a3 * b3[j];
                    crow[j] = v;
                }
            }
        }
        for s in full..t {
            let arow = &a[s * m..(s + 1) * m];
            let brow = &b[s * n..(s + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    /// Column-restricted form of [`matmul_at_b_acc`]: `c[i, m'] += Σ_s a[s,i]·b[s, cols[m']]`.
    /// Each selected entry sees exactly the same operation sequence as in the
    /// unrestricted kernel, so the two agree bitwise.
    pub fn matmul_at_b_cols_acc(
        a: &[f64],
        b: &[f64],
        c: &mut [f64],
        t: usize,
        m: usize,
        n: usize,
        cols: &[usize],
    ) {
        let r = cols.len();
        for s in 0..t {
            let arow = &a[s * m..(s + 1) * m];
            let brow = &b[s * n..(s + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                let crow = &mut c[i * r..(i + 1) * r];
                for (cv, &j) in crow.iter_mut().zip(cols) {
                    *cv += av * brow[j];
                }
            }
        }
    }

    /// `c = a[m×k] · b[n×k]ᵀ`. Each entry is summed over ascending `k`, the
    /// same sequence as a plain dot product; `b` is transposed first so the
    /// inner loop runs along contiguous rows.
    pub fn matmul_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for t in 0..k {
                bt[t * n + j] = b[j * k + t];
            }
        }
        matmul(a, &bt, c, m, k, n);
    }

    pub fn add_bias(x: &mut [f64], bias: &[f64]) {
        for row in x.chunks_exact_mut(bias.len()) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    /// `acc[j] += Σ_rows x[row, j]`, rows in ascending order.
    pub fn col_sum_acc(x: &[f64], acc: &mut [f64]) {
        for row in x.chunks_exact(acc.len()) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }

    pub fn softmax_in_place(row: &mut [f64]) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    /// Returns `(out, xhat, rstd)` through the provided buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn layernorm(
        x: &[f64],
        gamma: &[f64],
        beta: &[f64],
        eps: f64,
        d: usize,
        out: &mut [f64],
        xhat: &mut [f64],
        rstd: &mut [f64],
    ) {
        for (r, row) in x.chunks_exact(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            let xh = &mut xhat[r * d..(r + 1) * d];
            let o = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                xh[j] = (row[j] - mean) * rs;
                o[j] = xh[j] * gamma[j] + beta[j];
            }
        }
    }

    /// Layer-norm backward. Accumulates parameter gradients when requested and
    /// writes the input gradient into `dx` when provided.
    #[allow(clippy::too_many_arguments)]
    pub fn layernorm_backward(
        dy: &[f64],
        xhat: &[f64],
        rstd: &[f64],
        gamma: &[f64],
        d: usize,
        mut dgamma: Option<&mut [f64]>,
        mut dbeta: Option<&mut [f64]>,
        dx: Option<&mut [f64]>,
    ) {
        for (r, dyr) in dy.chunks_exact(d).enumerate() {
            let xh = &xhat[r * d..(r + 1) * d];
            if let Some(g) = dgamma.as_deref_mut() {
                for j in 0..d {
                    g[j] += dyr[j] * xh[j];
                }
            }
            if let Some(b) = dbeta.as_deref_mut() {
                for j in 0..d {
                    b[j] += dyr[j];
                }
            }
        }
        if let Some(dx) = dx {
            let mut dxhat = vec![0.0; d];
            for (r, dyr) in dy.chunks_exact(d).enumerate() {
                let xh = &xhat[r * d..(r + 1) * d];
                for j in 0..d {
                    dxhat[j] = dyr[j] * gamma[j];
                }
                let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                let mean_dxhat_xhat =
                    dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                let out = &mut dx[r * d..(r + 1) * d];
                for j in 0..d {
                    out[j] = rstd[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                }
            }
        }
    }

    /// `0.5·(1 + tanh u)`, evaluated as the logistic function of `2u`.
    fn half_one_plus_tanh(u: f64) -> f64 {
        1.0 / (1.0 + (-2.0 * u).exp())
    }

    pub fn gelu(x: f64) -> f64 {
        let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
        x * half_one_plus_tanh(inner)
    }

    pub fn gelu_grad(x: f64) -> f64 {
        let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
        let s = half_one_plus_tanh(inner);
        let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
        s + 2.0 * x * s * (1.0 - s) * dinner
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn construction_checks_shape() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn matmul_hand_values() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t2(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_sum_of_ones() {
        let a = Tensor::ones(&[1, 100]);
        let b = Tensor::ones(&[100, 1]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[100.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let mut rng = crate::rng::Rng::new(4);
        let a = Tensor::from_fn(&[5, 3], |_| rng.normal());
        let b = Tensor::from_fn(&[5, 4], |_| rng.normal());
        let at = Tensor::from_fn(&[3, 5], |i| a.at(i % 5, i / 5));
        let direct = matmul(&at, &b).unwrap();
        assert!(matmul_at_b(&a, &b).unwrap().max_abs_diff(&direct) < 1e-14);
        let bt = Tensor::from_fn(&[4, 5], |i| b.at(i % 5, i / 5));
        let c = matmul_a_bt(&at, &bt).unwrap();
        assert!(c.max_abs_diff(&direct) < 1e-14);
    }

    #[test]
    fn column_restricted_product_is_a_bitwise_slice() {
        let mut rng = crate::rng::Rng::new(8);
        let a = Tensor::from_fn(&[7, 6], |_| rng.normal());
        let b = Tensor::from_fn(&[7, 6], |_| rng.normal());
        let full = matmul_at_b(&a, &b).unwrap();
        let cols = [1, 4, 5];
        let mut sub = vec![0.0; 6 * cols.len()];
        kernels::matmul_at_b_cols_acc(a.data(), b.data(), &mut sub, 7, 6, 6, &cols);
        let sub = Tensor::new(vec![6, 3], sub).unwrap();
        assert!(sub.bit_eq(&full.select_columns(&cols).unwrap()));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t2(&[&[0.0, 0.0, 0.0]]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&t2(&[&[1000.0, 0.0]]));
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
        let s = softmax_rows(&t2(&[&[2f64.ln(), 0.0]]));
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn layernorm_examples() {
        let g = Tensor::ones(&[2]);
        let b = Tensor::zeros(&[2]);
        let y = layernorm(&t2(&[&[3.0, 3.0]]), &g, &b, 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);

        let y = layernorm(&t2(&[&[1.0, -1.0]]), &g, &b, 1e-15).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        let x = t2(&[&[0.5, -2.0, 1.0, 4.0]]);
        let plain = layernorm(&x, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-6).unwrap();
        let affine = layernorm(&x, &Tensor::filled(&[4], 2.0), &Tensor::filled(&[4], 3.0), 1e-6)
            .unwrap();
        for (p, a) in plain.data().iter().zip(affine.data()) {
            assert!((2.0 * p + 3.0 - a).abs() < 1e-14);
        }
    }

    #[test]
    fn layernorm_width_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(layernorm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[3]), 1e-6).is_err());
    }

    #[test]
    fn gelu_examples() {
        let y = gelu(&Tensor::new(vec![3], vec![0.0, 10.0, 1.0]).unwrap());
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        assert!((y.data()[2] - 0.841192).abs() < 1e-5);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (kernels::gelu(x + h) - kernels::gelu(x - h)) / (2.0 * h);
            assert!((fd - kernels::gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_products_are_exact() {
        let mut rng = crate::rng::Rng::new(1);
        let x = Tensor::from_fn(&[3, 3], |_| rng.normal());
        let i = Tensor::identity(3);
        assert!(matmul(&i, &x).unwrap().bit_eq(&x));
        assert!(matmul(&x, &i).unwrap().bit_eq(&x));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let n = row.len();
            let x = Tensor::new(vec![1, n], row.clone()).unwrap();
            let s = softmax_rows(&x);
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            let shifted = Tensor::new(vec![1, n], row.iter().map(|v| v + shift).collect()).unwrap();
            let s2 = softmax_rows(&shifted);
            prop_assert!(s.max_abs_diff(&s2) <= 1e-12);
        }

        #[test]
        fn layernorm_output_is_standardized(
            row in prop::collection::vec(-20.0f64..20.0, 2..16),
        ) {
            let d = row.len();
            let spread = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - row.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let eps = 1e-6;
            let x = Tensor::new(vec![1, d], row.clone()).unwrap();
            let y = layernorm(&x, &Tensor::ones(&[d]), &Tensor::zeros(&[d]), eps).unwrap();
            let mean = y.data().iter().sum::<f64>() / d as f64;
            let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let m0 = row.iter().sum::<f64>() / d as f64;
            let raw_var = row.iter().map(|v| (v - m0).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() <= 1e-10);
            prop_assert!((var - raw_var / (raw_var + eps)).abs() <= 1e-10);
        }
    }
}
