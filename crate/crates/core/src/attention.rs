//! Scaled dot-product attention with grouped-query heads and the
//! causal / independent mask regimes.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Matrix};

/// Which token pairs may attend to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskMode {
    /// Plain lower-triangular attention over the whole concatenation.
    Causal,
    /// Chunk tokens see only their own chunk; query and answer tokens see
    /// every chunk plus earlier query tokens.
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Chunk,
    Query,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: usize,
    pub kind: SegmentKind,
    pub token_count: usize,
}

impl Segment {
    pub fn chunk(id: usize, token_count: usize) -> Self {
        Self {
            id,
            kind: SegmentKind::Chunk,
            token_count,
        }
    }

    pub fn query(id: usize, token_count: usize) -> Self {
        Self {
            id,
            kind: SegmentKind::Query,
            token_count,
        }
    }
}

/// Ordered chunk segments followed by exactly one query segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    segments: Vec<Segment>,
    offsets: Vec<usize>,
    total: usize,
}

impl SegmentLayout {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let queries = segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Query)
            .count();
        if queries != 1 || segments.last().map(|s| s.kind) != Some(SegmentKind::Query) {
            return Err(Error::Config(
                "layout needs exactly one query segment, placed last".into(),
            ));
        }
        if let Some(s) = segments.iter().find(|s| s.token_count == 0) {
            return Err(Error::Config(format!("segment {} is empty", s.id)));
        }
        let mut offsets = Vec::with_capacity(segments.len());
        let mut total = 0;
        for s in &segments {
            offsets.push(total);
            total += s.token_count;
        }
        Ok(Self {
            segments,
            offsets,
            total,
        })
    }

    /// Chunks of the given lengths followed by a query.
    pub fn from_lengths(chunk_lengths: &[usize], query_len: usize) -> Result<Self> {
        let mut segments: Vec<Segment> = chunk_lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| Segment::chunk(i, n))
            .collect();
        segments.push(Segment::query(chunk_lengths.len(), query_len));
        Self::new(segments)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Each segment with its token range.
    fn segment_spans(&self) -> impl Iterator<Item = (&Segment, Range<usize>)> {
        self.segments
            .iter()
            .zip(&self.offsets)
            .map(|(s, &o)| (s, o..o + s.token_count))
    }
}

/// Additive mask (`0` or `-inf`) for the full `total × total` sequence.
pub fn build_mask(layout: &SegmentLayout, mode: MaskMode) -> Matrix {
    build_mask_rows(layout, mode, 0..layout.total())
}

/// Rows `rows` of [`build_mask`]; columns always span the full sequence.
pub fn build_mask_rows(layout: &SegmentLayout, mode: MaskMode, rows: Range<usize>) -> Matrix {
    let total = layout.total();
    assert!(rows.end <= total, "mask rows exceed layout");
    let mut mask = Matrix::filled(rows.len(), total, f64::NEG_INFINITY);
    for (segment, span) in layout.segment_spans() {
        for i in span.clone() {
            if !rows.contains(&i) {
                continue;
            }
            let allowed = match (mode, segment.kind) {
                (MaskMode::Independent, SegmentKind::Chunk) => span.start..i + 1,
                _ => 0..i + 1,
            };
            mask.row_mut(i - rows.start)[allowed].fill(0.0);
        }
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub head_num: usize,
    pub kv_head_num: usize,
    pub head_size: usize,
}

impl AttentionShape {
    pub fn validate(&self) -> Result<()> {
        if self.head_num == 0 || self.kv_head_num == 0 || self.head_size == 0 {
            return Err(Error::Config(
                "attention dimensions must be positive".into(),
            ));
        }
        if !self.head_num.is_multiple_of(self.kv_head_num) {
            return Err(Error::Config(format!(
                "{} query heads cannot be grouped over {} kv heads",
                self.head_num, self.kv_head_num
            )));
        }
        Ok(())
    }

    pub fn q_dim(&self) -> usize {
        self.head_num * self.head_size
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_head_num * self.head_size
    }
}

/// `softmax(Q·Kᵀ/√d + mask)·V` per head. Inputs must already carry their
/// rotary embedding.
pub fn attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &Matrix,
    shape: AttentionShape,
) -> Result<Matrix> {
    attend_counted(q, k, v, mask, shape).map(|(out, _)| out)
}

/// [`attend`] that also returns the floating-point operations spent on
/// query-key scores (two per multiply-add, every column of every row).
pub fn attend_counted(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &Matrix,
    shape: AttentionShape,
) -> Result<(Matrix, u64)> {
    check_shapes(q, k, v, mask, shape)?;
    let d = shape.head_size;
    let group = shape.head_num / shape.kv_head_num;
    let scale = 1.0 / (d as f64).sqrt();
    let n_keys = k.rows();

    let mut out = Matrix::filled(q.rows(), shape.q_dim(), -0.0);
    let mut scores = vec![0.0; n_keys];
    let mut flops = 0u64;
    for i in 0..q.rows() {
        let mask_row = mask.row(i);
        for h in 0..shape.head_num {
            let kv_off = (h / group) * d;
            let q_head = &q.row(i)[h * d..(h + 1) * d];
            for (j, s) in scores.iter_mut().enumerate() {
                let k_head = &k.row(j)[kv_off..kv_off + d];
                let dot: f64 = q_head.iter().zip(k_head).map(|(a, b)| a * b).sum();
                *s = dot * scale + mask_row[j];
            }
            flops += 2 * (d * n_keys) as u64;
            softmax_in_place(&mut scores, i)?;
            let out_head = &mut out.row_mut(i)[h * d..(h + 1) * d];
            for (j, &w) in scores.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (o, &vv) in out_head.iter_mut().zip(&v.row(j)[kv_off..kv_off + d]) {
                    *o += w * vv;
                }
            }
        }
    }
    Ok((out, flops))
}

/// Post-softmax attention weights, one `q.rows × k.rows` matrix per query
/// head.
pub fn attention_weights(
    q: &Matrix,
    k: &Matrix,
    mask: &Matrix,
    shape: AttentionShape,
) -> Result<Vec<Matrix>> {
    check_shapes(q, k, k, mask, shape)?;
    let d = shape.head_size;
    let group = shape.head_num / shape.kv_head_num;
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(shape.head_num);
    for h in 0..shape.head_num {
        let kv_off = (h / group) * d;
        let mut w = Matrix::zeros(q.rows(), k.rows());
        for i in 0..q.rows() {
            let q_head = &q.row(i)[h * d..(h + 1) * d];
            let row = w.row_mut(i);
            for (j, s) in row.iter_mut().enumerate() {
                let k_head = &k.row(j)[kv_off..kv_off + d];
                let dot: f64 = q_head.iter().zip(k_head).map(|(a, b)| a * b).sum();
                *s = dot * scale + mask.get(i, j);
            }
            softmax_in_place(row, i)?;
        }
        heads.push(w);
    }
    Ok(heads)
}

fn check_shapes(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &Matrix,
    shape: AttentionShape,
) -> Result<()> {
    shape.validate()?;
    if q.cols() != shape.q_dim() || k.cols() != shape.kv_dim() || v.cols() != shape.kv_dim() {
        return Err(Error::Shape(format!(
            "attention widths q={} k={} v={} do not match {} heads / {} kv heads of size {}",
            q.cols(),
            k.cols(),
            v.cols(),
            shape.head_num,
            shape.kv_head_num,
            shape.head_size
        )));
    }
    if k.rows() != v.rows() || mask.shape() != (q.rows(), k.rows()) {
        return Err(Error::Shape(format!(
            "mask {:?} incompatible with {} queries over {} keys ({} values)",
            mask.shape(),
            q.rows(),
            k.rows(),
            v.rows()
        )));
    }
    Ok(())
}
