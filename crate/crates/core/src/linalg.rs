//! Row-major matrices, affine maps and layer norm.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Dense row-major `rows × cols` matrix of `f64`. Rows are tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect::<Vec<f64>>();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies rows `start..start + len` into a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Matrix {
        Matrix::from_vec(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }

    /// Mean over rows. Returns `None` for an empty matrix.
    pub fn mean_row(&self) -> Option<Vec<f64>> {
        if self.rows == 0 {
            return None;
        }
        let mut acc = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (a, x) in acc.iter_mut().zip(self.row(r)) {
                *a += x;
            }
        }
        let n = self.rows as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Some(acc)
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `y = W x + b` with `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Self {
        assert_eq!(weight.rows, bias.len(), "bias length must equal output width");
        Self { weight, bias }
    }

    /// Gaussian weights with std `1/sqrt(in)`, Gaussian bias with std `bias_std`.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, bias_std: f64, rng: &mut R) -> Self {
        let weight = Matrix::random(output, input, 1.0 / (input as f64).sqrt(), rng);
        let bias = Matrix::random(1, output, bias_std, rng).data;
        Self { weight, bias }
    }

    pub fn identity(n: usize) -> Self {
        let mut weight = Matrix::zeros(n, n);
        for i in 0..n {
            weight.data[i * n + i] = 1.0;
        }
        Self {
            weight,
            bias: vec![0.0; n],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.input_dim());
        debug_assert_eq!(out.len(), self.output_dim());
        for (o, (w, b)) in out
            .iter_mut()
            .zip(self.weight.data.chunks_exact(self.weight.cols).zip(&self.bias))
        {
            *o = b + dot(w, x);
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.apply_into(x, &mut out);
        out
    }

    /// Applies the map to every row.
    pub fn apply_rows(&self, m: &Matrix) -> Matrix {
        assert_eq!(m.cols, self.input_dim(), "affine input width mismatch");
        let mut out = Matrix::zeros(m.rows, self.output_dim());
        for r in 0..m.rows {
            let (src, dst) = (m.row(r), &mut out.data[r * self.output_dim()..(r + 1) * self.output_dim()]);
            self.apply_into(src, dst);
        }
        out
    }
}

/// Per-vector layer normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps: LN_EPS,
        }
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + self.eps).sqrt();
        for (k, o) in out.iter_mut().enumerate() {
            *o = (x[k] - mean) * inv * self.gamma[k] + self.beta[k];
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out);
        out
    }

    pub fn apply_rows(&self, m: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(m.rows, m.cols);
        for r in 0..m.rows {
            self.apply_into(m.row(r), out.row_mut(r));
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
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

/// Softmax with max-logit subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
