//! Dense f64 kernels shared by the rest of the engine.
//!
//! Everything here is a pure function of its inputs. Matrices are row-major
//! and products follow the `x · W` convention used throughout the model
//! (activations are rows, weights map `in → out`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
///
/// Attention masks reuse this type and hold `-inf`, so finiteness is a
/// property of the kernels' outputs rather than a constructor check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// A single-row matrix.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stack matrices vertically. All parts must share a column count.
    pub fn vstack<'a>(parts: impl IntoIterator<Item = &'a Matrix>) -> Result<Matrix> {
        let mut cols = None;
        let mut rows = 0;
        let mut data = Vec::new();
        for part in parts {
            match cols {
                None => cols = Some(part.cols),
                Some(c) if c != part.cols => {
                    return Err(Error::Shape(format!(
                        "cannot stack {}-column rows onto {c}-column rows",
                        part.cols
                    )))
                }
                _ => {}
            }
            rows += part.rows;
            data.extend_from_slice(&part.data);
        }
        Ok(Matrix {
            rows,
            cols: cols.unwrap_or(0),
            data,
        })
    }

    /// Append the rows of `other` in place.
    pub fn append_rows(&mut self, other: &Matrix) -> Result<()> {
        if self.rows == 0 && self.data.is_empty() {
            self.cols = other.cols;
        }
        if other.cols != self.cols {
            return Err(Error::Shape(format!(
                "cannot append {}-column rows to a {}-column matrix",
                other.cols, self.cols
            )));
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let n = b.cols;
    // Accumulators start at -0.0 so that an identity factor reproduces the
    // other operand bit for bit (including signed zeros).
    let mut out = vec![-0.0; a.rows * n];
    for i in 0..a.rows {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Matrix {
        rows: a.rows,
        cols: n,
        data: out,
    })
}

/// Numerically stable softmax over one row, in place.
///
/// `-inf` entries become exactly zero. Fails when every entry is `-inf`.
pub(crate) fn softmax_in_place(row: &mut [f64], row_index: usize) -> Result<()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateRow { row: row_index });
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f64::NEG_INFINITY {
            0.0
        } else {
            (*v - max).exp()
        };
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    Ok(())
}

/// Row-wise softmax.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r), r)?;
    }
    Ok(out)
}

/// RMS normalization of a single row: `x / sqrt(mean(x²) + eps) ⊙ weight`.
pub fn rmsnorm(x: &[f64], weight: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != weight.len() {
        return Err(Error::Shape(format!(
            "rmsnorm input has {} elements but weight has {}",
            x.len(),
            weight.len()
        )));
    }
    let mut out = vec![0.0; x.len()];
    rmsnorm_into(x, weight, eps, &mut out);
    Ok(out)
}

fn rmsnorm_into(x: &[f64], weight: &[f64], eps: f64, out: &mut [f64]) {
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    let denom = (mean_sq + eps).sqrt();
    if denom == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let scale = 1.0 / denom;
    for ((o, &xi), &wi) in out.iter_mut().zip(x).zip(weight) {
        *o = xi * scale * wi;
    }
}

/// [`rmsnorm`] applied to every row of `x`.
pub fn rmsnorm_rows(x: &Matrix, weight: &[f64], eps: f64) -> Result<Matrix> {
    if x.cols != weight.len() {
        return Err(Error::Shape(format!(
            "rmsnorm input has {} columns but weight has {}",
            x.cols,
            weight.len()
        )));
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        rmsnorm_into(x.row(r), weight, eps, out.row_mut(r));
    }
    Ok(out)
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// SwiGLU feed-forward over a batch of rows:
/// `(silu(x·W_gate) ⊙ (x·W_up)) · W_down`.
pub fn swiglu_rows(x: &Matrix, w_gate: &Matrix, w_up: &Matrix, w_down: &Matrix) -> Result<Matrix> {
    if w_gate.shape() != w_up.shape() || w_down.rows() != w_gate.cols() {
        return Err(Error::Shape(format!(
            "swiglu weights disagree: gate {:?}, up {:?}, down {:?}",
            w_gate.shape(),
            w_up.shape(),
            w_down.shape()
        )));
    }
    let mut gate = matmul(x, w_gate)?;
    let up = matmul(x, w_up)?;
    for (g, u) in gate.data.iter_mut().zip(&up.data) {
        *g = silu(*g) * u;
    }
    matmul(&gate, w_down)
}

/// SwiGLU on a single row vector.
pub fn swiglu(x: &[f64], w_gate: &Matrix, w_up: &Matrix, w_down: &Matrix) -> Result<Vec<f64>> {
    let x = Matrix::row_vector(x.to_vec());
    Ok(swiglu_rows(&x, w_gate, w_up, w_down)?.into_data())
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.next_signed_unit())
    }

    #[test]
    fn scalar_product() {
        let a = Matrix::new(1, 1, vec![2.0]).unwrap();
        let b = Matrix::new(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn identity_is_bit_exact() {
        let mut rng = SplitMix64::new(7);
        let mut m = random_matrix(&mut rng, 3, 3);
        m.set(1, 1, -0.0);
        let out = matmul(&Matrix::identity(3), &m).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&m));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SplitMix64::new(2024);
        let a = random_matrix(&mut rng, 4, 5);
        let b = random_matrix(&mut rng, 5, 2);
        let got = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut want = 0.0;
                for k in 0..5 {
                    want += a.get(i, k) * b.get(k, j);
                }
                assert!((got.get(i, j) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_symmetric_row() {
        let m = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax_rows(&m).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_masked_entry_is_exactly_zero() {
        let m = Matrix::new(1, 2, vec![3.7, f64::NEG_INFINITY]).unwrap();
        assert_eq!(softmax_rows(&m).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_one_two_three() {
        // e^k / (e + e² + e³), from a 40-digit mpmath evaluation.
        let want = [
            0.090_030_573_170_380_457_998,
            0.244_728_471_054_797_652_473,
            0.665_240_955_774_821_889_529,
        ];
        let m = Matrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let got = softmax_rows(&m).unwrap();
        for (g, w) in got.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{g} vs {w}");
        }
    }

    #[test]
    fn softmax_degenerate_row() {
        let m = Matrix::new(2, 2, vec![0.0, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert!(matches!(
            softmax_rows(&m),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SplitMix64::new(99);
        let m = Matrix::from_fn(16, 33, |_, _| 40.0 * rng.next_signed_unit());
        let s = softmax_rows(&m).unwrap();
        for r in 0..16 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(s.row(r).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rmsnorm_unit_and_zero() {
        let ones = vec![1.0; 4];
        assert_eq!(rmsnorm(&ones, &ones, 0.0).unwrap(), ones);
        assert_eq!(rmsnorm(&[0.0; 4], &ones, 0.0).unwrap(), vec![0.0; 4]);
        assert_eq!(rmsnorm(&[0.0; 4], &ones, 1e-6).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn rmsnorm_matches_formula() {
        let mut rng = SplitMix64::new(5);
        let x: Vec<f64> = (0..10).map(|_| rng.next_signed_unit()).collect();
        let w: Vec<f64> = (0..10).map(|_| rng.next_signed_unit()).collect();
        let eps = 1e-6;
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / 10.0 + eps).sqrt();
        let got = rmsnorm(&x, &w, eps).unwrap();
        for i in 0..10 {
            assert!((got[i] - x[i] / rms * w[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn swiglu_zero_input() {
        let w = Matrix::filled(3, 5, 0.3);
        let d = Matrix::filled(5, 3, 0.3);
        assert_eq!(swiglu(&[0.0; 3], &w, &w, &d).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn swiglu_scalar() {
        let one = Matrix::filled(1, 1, 1.0);
        let got = swiglu(&[1.0], &one, &one, &one).unwrap();
        // 1 / (1 + e^-1)
        assert!((got[0] - 0.731_058_578_630_004_879).abs() < 1e-15);
    }

    #[test]
    fn swiglu_matches_formula() {
        let mut rng = SplitMix64::new(11);
        let (h, i) = (4, 6);
        let x: Vec<f64> = (0..h).map(|_| rng.next_signed_unit()).collect();
        let g = random_matrix(&mut rng, h, i);
        let u = random_matrix(&mut rng, h, i);
        let d = random_matrix(&mut rng, i, h);
        let got = swiglu(&x, &g, &u, &d).unwrap();
        let mut act = vec![0.0; i];
        for (j, a) in act.iter_mut().enumerate() {
            let gz: f64 = (0..h).map(|k| x[k] * g.get(k, j)).sum();
            let uz: f64 = (0..h).map(|k| x[k] * u.get(k, j)).sum();
            *a = gz / (1.0 + (-gz).exp()) * uz;
        }
        for (c, got_c) in got.iter().enumerate() {
            let want: f64 = (0..i).map(|j| act[j] * d.get(j, c)).sum();
            assert!((got_c - want).abs() < 1e-14);
        }
    }

    #[test]
    fn swiglu_shape_error() {
        let g = Matrix::zeros(3, 4);
        let u = Matrix::zeros(3, 5);
        let d = Matrix::zeros(4, 3);
        assert!(swiglu(&[0.0; 3], &g, &u, &d).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }
}
