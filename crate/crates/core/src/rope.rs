//! Rotary position embedding with interleaved pairs `(2m, 2m+1)`.
//!
//! Keys are stored unrotated everywhere in the engine and rotated on use,
//! so any position assignment can be applied after the fact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RopeParams {
    head_size: usize,
    base: f64,
    /// `base^(-2m / head_size)` for `m in 0..head_size/2`.
    thetas: Vec<f64>,
}

impl RopeParams {
    pub fn new(head_size: usize, base: f64) -> Result<Self> {
        if head_size == 0 || !head_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rope head size must be a positive even number, got {head_size}"
            )));
        }
        if !(base.is_finite() && base > 1.0) {
            return Err(Error::Config(format!(
                "rope base must exceed 1, got {base}"
            )));
        }
        let thetas = (0..head_size / 2)
            .map(|m| base.powf(-2.0 * m as f64 / head_size as f64))
            .collect();
        Ok(Self {
            head_size,
            base,
            thetas,
        })
    }

    pub fn head_size(&self) -> usize {
        self.head_size
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }
}

/// One position id per token.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionIds(Vec<usize>);

impl PositionIds {
    pub fn new(ids: Vec<usize>) -> Self {
        Self(ids)
    }

    /// `start, start+1, ..., start+len-1`.
    pub fn sequential(start: usize, len: usize) -> Self {
        Self((start..start + len).collect())
    }

    /// Accepts signed ids, rejecting negatives.
    pub fn try_from_signed(ids: &[i64]) -> Result<Self> {
        ids.iter()
            .map(|&id| {
                usize::try_from(id).map_err(|_| Error::Domain(format!("negative position id {id}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn extend(&mut self, other: &PositionIds) {
        self.0.extend_from_slice(&other.0);
    }

    pub fn push(&mut self, id: usize) {
        self.0.push(id);
    }

    pub fn max(&self) -> Option<usize> {
        self.0.iter().copied().max()
    }
}

#[inline]
fn rotate_head_in_place(head: &mut [f64], position: usize, thetas: &[f64]) {
    if position == 0 {
        return;
    }
    let t = position as f64;
    for (pair, &theta) in head.chunks_exact_mut(2).zip(thetas) {
        let (sin, cos) = (t * theta).sin_cos();
        let (x0, x1) = (pair[0], pair[1]);
        pair[0] = x0 * cos - x1 * sin;
        pair[1] = x0 * sin + x1 * cos;
    }
}

/// Rotate every row of a `tokens × head_size` matrix by its position.
pub fn rotate(vectors: &Matrix, positions: &PositionIds, params: &RopeParams) -> Result<Matrix> {
    if vectors.cols() != params.head_size {
        return Err(Error::Shape(format!(
            "rope expects {} columns, got {}",
            params.head_size,
            vectors.cols()
        )));
    }
    rotate_heads(vectors, positions, params)
}

/// Rotate a `tokens × (heads · head_size)` matrix, each head slice
/// independently.
pub fn rotate_heads(
    vectors: &Matrix,
    positions: &PositionIds,
    params: &RopeParams,
) -> Result<Matrix> {
    let mut out = vectors.clone();
    rotate_heads_in_place(&mut out, positions, params)?;
    Ok(out)
}

pub(crate) fn rotate_heads_in_place(
    vectors: &mut Matrix,
    positions: &PositionIds,
    params: &RopeParams,
) -> Result<()> {
    if !vectors.cols().is_multiple_of(params.head_size) {
        return Err(Error::Shape(format!(
            "{} columns is not a whole number of {}-wide heads",
            vectors.cols(),
            params.head_size
        )));
    }
    if positions.len() != vectors.rows() {
        return Err(Error::Shape(format!(
            "{} position ids for {} rows",
            positions.len(),
            vectors.rows()
        )));
    }
    for (r, &pos) in positions.as_slice().iter().enumerate() {
        for head in vectors.row_mut(r).chunks_exact_mut(params.head_size) {
            rotate_head_in_place(head, pos, &params.thetas);
        }
    }
    Ok(())
}

/// Dot product of `q` rotated to `pos_q` with `k` rotated to `pos_k`.
pub fn relative_score(
    q: &[f64],
    k: &[f64],
    pos_q: usize,
    pos_k: usize,
    params: &RopeParams,
) -> Result<f64> {
    if q.len() != params.head_size || k.len() != params.head_size {
        return Err(Error::Shape(format!(
            "relative_score expects {}-element vectors",
            params.head_size
        )));
    }
    let mut q = q.to_vec();
    let mut k = k.to_vec();
    rotate_head_in_place(&mut q, pos_q, &params.thetas);
    rotate_head_in_place(&mut k, pos_k, &params.thetas);
    Ok(q.iter().zip(&k).map(|(a, b)| a * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_vec(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.next_signed_unit()).collect()
    }

    #[test]
    fn theta_table() {
        let p = RopeParams::new(8, DEFAULT_ROPE_BASE).unwrap();
        assert_eq!(p.thetas()[0], 1.0);
        assert!(p.thetas().windows(2).all(|w| w[1] < w[0]));
        assert!((p.thetas()[3] - 10_000f64.powf(-6.0 / 8.0)).abs() < 1e-18);
    }

    #[test]
    fn odd_head_size_rejected() {
        assert!(matches!(
            RopeParams::new(7, 10_000.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn negative_position_rejected() {
        assert!(matches!(
            PositionIds::try_from_signed(&[0, 3, -1]),
            Err(Error::Domain(_))
        ));
        assert_eq!(
            PositionIds::try_from_signed(&[0, 3]).unwrap().as_slice(),
            &[0, 3]
        );
    }

    #[test]
    fn position_zero_is_identity() {
        let mut rng = SplitMix64::new(1);
        let p = RopeParams::new(16, 10_000.0).unwrap();
        let m = Matrix::from_fn(5, 16, |_, _| rng.next_signed_unit());
        let out = rotate(&m, &PositionIds::new(vec![0; 5]), &p).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn unit_vector_at_position_one() {
        let p = RopeParams::new(2, 10_000.0).unwrap();
        let m = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let out = rotate(&m, &PositionIds::new(vec![1]), &p).unwrap();
        assert!((out.get(0, 0) - 0.540_302_305_868_139_8).abs() < 1e-15);
        assert!((out.get(0, 1) - 0.841_470_984_807_896_5).abs() < 1e-15);
    }

    #[test]
    fn pair_norms_preserved() {
        let mut rng = SplitMix64::new(3);
        let p = RopeParams::new(64, 10_000.0).unwrap();
        for _ in 0..50 {
            let v = random_vec(&mut rng, 64);
            let pos = rng.next_range(0, 4096);
            let m = Matrix::row_vector(v.clone());
            let out = rotate(&m, &PositionIds::new(vec![pos]), &p).unwrap();
            for (a, b) in v.chunks(2).zip(out.row(0).chunks(2)) {
                let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
                let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
                assert!((na - nb).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn deferred_rotation_is_exact() {
        let mut rng = SplitMix64::new(4);
        let p = RopeParams::new(8, 10_000.0).unwrap();
        let m = Matrix::from_fn(3, 8, |_, _| rng.next_signed_unit());
        let at = PositionIds::new(vec![5, 17, 1000]);
        let direct = rotate(&m, &at, &p).unwrap();
        let zeroed = rotate(&m, &PositionIds::new(vec![0; 3]), &p).unwrap();
        assert_eq!(rotate(&zeroed, &at, &p).unwrap(), direct);
    }

    #[test]
    fn equal_positions_cancel() {
        let mut rng = SplitMix64::new(5);
        let p = RopeParams::new(16, 10_000.0).unwrap();
        let q = random_vec(&mut rng, 16);
        let k = random_vec(&mut rng, 16);
        let raw: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        for pos in [0, 1, 77, 4096] {
            let s = relative_score(&q, &k, pos, pos, &p).unwrap();
            assert!((s - raw).abs() <= 1e-12);
        }
    }

    #[test]
    fn shift_by_one_hundred() {
        let mut rng = SplitMix64::new(6);
        let p = RopeParams::new(32, 10_000.0).unwrap();
        for _ in 0..20 {
            let q = random_vec(&mut rng, 32);
            let k = random_vec(&mut rng, 32);
            let a = relative_score(&q, &k, 5, 3, &p).unwrap();
            let b = relative_score(&q, &k, 105, 103, &p).unwrap();
            assert!((a - b).abs() <= 1e-9);
        }
    }

    /// Pairs as complex numbers multiplied by `e^{i t θ_m}`.
    fn complex_rotate(v: &[f64], t: usize, base: f64) -> Vec<f64> {
        let d = v.len();
        let mut out = Vec::with_capacity(d);
        for m in 0..d / 2 {
            let theta = base.powf(-2.0 * m as f64 / d as f64);
            let (re, im) = (v[2 * m], v[2 * m + 1]);
            let (wr, wi) = ((t as f64 * theta).cos(), (t as f64 * theta).sin());
            out.push(re * wr - im * wi);
            out.push(re * wi + im * wr);
        }
        out
    }

    #[test]
    fn matches_complex_multiplication() {
        let mut rng = SplitMix64::new(8);
        let p = RopeParams::new(16, 10_000.0).unwrap();
        for _ in 0..20 {
            let q = random_vec(&mut rng, 16);
            let k = random_vec(&mut rng, 16);
            let (a, b) = (rng.next_range(0, 4096), rng.next_range(0, 4096));
            let qr = complex_rotate(&q, a, 10_000.0);
            let kr = complex_rotate(&k, b, 10_000.0);
            let want: f64 = qr.iter().zip(&kr).map(|(x, y)| x * y).sum();
            let got = relative_score(&q, &k, a, b, &p).unwrap();
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn rotate_checks_shapes() {
        let p = RopeParams::new(4, 10_000.0).unwrap();
        let m = Matrix::zeros(2, 6);
        assert!(rotate(&m, &PositionIds::sequential(0, 2), &p).is_err());
        let m = Matrix::zeros(2, 8);
        assert!(rotate_heads(&m, &PositionIds::sequential(0, 3), &p).is_err());
        assert!(rotate_heads(&m, &PositionIds::sequential(0, 2), &p).is_ok());
    }
}
