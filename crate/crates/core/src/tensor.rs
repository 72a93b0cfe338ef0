//! Dense row-major `f32` tensors and the handful of kernels the attention
//! paths need.
//!
//! The time axis is always second-to-last, so appending a step to a cache
//! row is a contiguous copy. Beam-shared operands (`[B, 1, N, D]`) are never
//! expanded; [`beam_broadcast_qk`] and [`beam_broadcast_pv`] read them once
//! per beam group instead.

use crate::error::{Error, Result};

/// Score used for masked or banned entries. Maps to probability exactly 0.
pub const MASKED: f32 = f32::MIN;

/// `exp(x - max)` is flushed to zero at or below this offset.
const SOFTMAX_FLUSH: f32 = -80.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the trailing axis, or 1 for a scalar.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Row `i` along the leading axis as a flat slice.
    pub fn row(&self, i: usize) -> &[f32] {
        let width = self.row_width();
        &self.data[i * width..(i + 1) * width]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let width = self.row_width();
        &mut self.data[i * width..(i + 1) * width]
    }

    fn row_width(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for x in &mut self.data {
            *x *= factor;
        }
    }

    pub fn relu(&mut self) {
        for x in &mut self.data {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise fingerprint of shape and contents.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.shape.hash(&mut h);
        for x in &self.data {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Batched product over the trailing two axes: `[.., P, D] x [D, E] -> [.., P, E]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() != 2 || a.last_dim() != b.shape[0] {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let d = b.shape[0];
    let e = b.shape[1];
    let rows: usize = a.shape[..a.rank() - 1].iter().product();
    let mut out = vec![0.0f32; rows * e];
    for r in 0..rows {
        let lhs = &a.data[r * d..(r + 1) * d];
        let dst = &mut out[r * e..(r + 1) * e];
        for (k, &x) in lhs.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let rhs = &b.data[k * e..(k + 1) * e];
            for (o, &w) in dst.iter_mut().zip(rhs) {
                *o += x * w;
            }
        }
    }
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = e;
    Tensor::new(shape, out)
}

/// `[R, P, D] x [R, L, D]^T -> [R, P, L]`.
pub fn bmm_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] {
        return Err(Error::dim("bmm_nt", &a.shape, &b.shape));
    }
    let (r, p, d) = (a.shape[0], a.shape[1], a.shape[2]);
    let l = b.shape[1];
    let mut out = vec![0.0f32; r * p * l];
    for i in 0..r {
        for x in 0..p {
            let q = &a.data[(i * p + x) * d..(i * p + x + 1) * d];
            for y in 0..l {
                let k = &b.data[(i * l + y) * d..(i * l + y + 1) * d];
                out[(i * p + x) * l + y] = dot(q, k);
            }
        }
    }
    Tensor::new(vec![r, p, l], out)
}

/// `[R, P, L] x [R, L, D] -> [R, P, D]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
        return Err(Error::dim("bmm", &a.shape, &b.shape));
    }
    let (r, p, l) = (a.shape[0], a.shape[1], a.shape[2]);
    let d = b.shape[2];
    let mut out = vec![0.0f32; r * p * d];
    for i in 0..r {
        for x in 0..p {
            let weights = &a.data[(i * p + x) * l..(i * p + x + 1) * l];
            let dst = &mut out[(i * p + x) * d..(i * p + x + 1) * d];
            accumulate_weighted(dst, weights, &b.data[i * l * d..(i + 1) * l * d], d);
        }
    }
    Tensor::new(vec![r, p, d], out)
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `dst += sum_j weights[j] * values[j, ..]` with `values` laid out `[L, D]`.
#[inline]
fn accumulate_weighted(dst: &mut [f32], weights: &[f32], values: &[f32], d: usize) {
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let v = &values[j * d..(j + 1) * d];
        for (o, &x) in dst.iter_mut().zip(v) {
            *o += w * x;
        }
    }
}

/// Softmax over the trailing axis with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let l = x.last_dim();
    if x.rank() == 0 || l == 0 {
        return Err(Error::EmptyAxis { op: "softmax_rows" });
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(l) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        let shifted = *v - max;
        *v = if shifted <= SOFTMAX_FLUSH {
            0.0
        } else {
            shifted.exp()
        };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax over the trailing axis. Entries flushed to probability zero
/// come back as [`MASKED`].
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let l = x.last_dim();
    if x.rank() == 0 || l == 0 {
        return Err(Error::EmptyAxis {
            op: "log_softmax_rows",
        });
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(l) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row
            .iter()
            .map(|&v| {
                let s = v - max;
                if s <= SOFTMAX_FLUSH {
                    0.0
                } else {
                    s.exp()
                }
            })
            .sum();
        let log_sum = sum.ln();
        for v in row.iter_mut() {
            let s = *v - max;
            *v = if s <= SOFTMAX_FLUSH { MASKED } else { s - log_sum };
        }
    }
    Ok(out)
}

/// Appends `b`'s time steps after `a`'s, per row: `[R, t1, D] ++ [R, t2, D]`.
pub fn concat_time(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] {
        return Err(Error::dim("concat_time", &a.shape, &b.shape));
    }
    let (r, t1, d) = (a.shape[0], a.shape[1], a.shape[2]);
    let t2 = b.shape[1];
    let mut out = Vec::with_capacity(r * (t1 + t2) * d);
    for i in 0..r {
        out.extend_from_slice(&a.data[i * t1 * d..(i + 1) * t1 * d]);
        out.extend_from_slice(&b.data[i * t2 * d..(i + 1) * t2 * d]);
    }
    Tensor::new(vec![r, t1 + t2, d], out)
}

/// Concatenates along the trailing axis; all leading extents must agree.
pub fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() == 0 || a.rank() != b.rank() || a.shape[..a.rank() - 1] != b.shape[..b.rank() - 1]
    {
        return Err(Error::dim("concat_last", &a.shape, &b.shape));
    }
    let (la, lb) = (a.last_dim(), b.last_dim());
    let rows = a.shape[..a.rank() - 1].iter().product::<usize>();
    let mut out = Vec::with_capacity(rows * (la + lb));
    for i in 0..rows {
        out.extend_from_slice(&a.data[i * la..(i + 1) * la]);
        out.extend_from_slice(&b.data[i * lb..(i + 1) * lb]);
    }
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = la + lb;
    Tensor::new(shape, out)
}

/// Splits the trailing axis at `at` into `[.., at]` and `[.., L - at]`.
pub fn split_last(x: &Tensor, at: usize) -> Result<(Tensor, Tensor)> {
    let l = x.last_dim();
    if x.rank() == 0 || at > l {
        return Err(Error::Index {
            op: "split_last",
            index: at,
            bound: l,
        });
    }
    let rows: usize = x.shape[..x.rank() - 1].iter().product();
    let mut left = Vec::with_capacity(rows * at);
    let mut right = Vec::with_capacity(rows * (l - at));
    for i in 0..rows {
        let row = &x.data[i * l..(i + 1) * l];
        left.extend_from_slice(&row[..at]);
        right.extend_from_slice(&row[at..]);
    }
    let mut ls = x.shape.clone();
    let mut rs = x.shape.clone();
    *ls.last_mut().unwrap() = at;
    *rs.last_mut().unwrap() = l - at;
    Ok((Tensor::new(ls, left)?, Tensor::new(rs, right)?))
}

/// Selects rows along the leading axis; duplicates are allowed.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::dim("gather_rows", &x.shape, &[idx.len()]));
    }
    let r = x.shape[0];
    let width = x.row_width();
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        if i >= r {
            return Err(Error::Index {
                op: "gather_rows",
                index: i,
                bound: r,
            });
        }
        out.extend_from_slice(&x.data[i * width..(i + 1) * width]);
    }
    let mut shape = x.shape.clone();
    shape[0] = idx.len();
    Tensor::new(shape, out)
}

/// Repeats every leading row `times` times in place: `[B, ..] -> [B * times, ..]`.
pub fn repeat_rows(x: &Tensor, times: usize) -> Tensor {
    let width = x.row_width();
    let rows = x.shape.first().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(x.numel() * times);
    for i in 0..rows {
        for _ in 0..times {
            out.extend_from_slice(&x.data[i * width..(i + 1) * width]);
        }
    }
    let mut shape = x.shape.clone();
    if let Some(first) = shape.first_mut() {
        *first *= times;
    }
    Tensor { shape, data: out }
}

/// `[B, M, 1, D] . [B, 1, N, D]^T -> [B, M, 1, N]` without replicating the
/// shared operand along the beam axis.
pub fn beam_broadcast_qk(q: &Tensor, k_shared: &Tensor) -> Result<Tensor> {
    if q.rank() != 4
        || k_shared.rank() != 4
        || q.shape[2] != 1
        || k_shared.shape[1] != 1
        || q.shape[0] != k_shared.shape[0]
        || q.shape[3] != k_shared.shape[3]
    {
        return Err(Error::dim("beam_broadcast_qk", &q.shape, &k_shared.shape));
    }
    let (b, m, d) = (q.shape[0], q.shape[1], q.shape[3]);
    let n = k_shared.shape[2];
    let mut out = vec![0.0f32; b * m * n];
    for bi in 0..b {
        let keys = &k_shared.data[bi * n * d..(bi + 1) * n * d];
        for mi in 0..m {
            let row = bi * m + mi;
            let query = &q.data[row * d..(row + 1) * d];
            let dst = &mut out[row * n..(row + 1) * n];
            for (j, o) in dst.iter_mut().enumerate() {
                *o = dot(query, &keys[j * d..(j + 1) * d]);
            }
        }
    }
    Tensor::new(vec![b, m, 1, n], out)
}

/// `[B, M, 1, N] . [B, 1, N, D] -> [B, M, 1, D]`, the value-side counterpart
/// of [`beam_broadcast_qk`].
pub fn beam_broadcast_pv(p: &Tensor, v_shared: &Tensor) -> Result<Tensor> {
    if p.rank() != 4
        || v_shared.rank() != 4
        || p.shape[2] != 1
        || v_shared.shape[1] != 1
        || p.shape[0] != v_shared.shape[0]
        || p.shape[3] != v_shared.shape[2]
    {
        return Err(Error::dim("beam_broadcast_pv", &p.shape, &v_shared.shape));
    }
    let (b, m, n) = (p.shape[0], p.shape[1], p.shape[3]);
    let d = v_shared.shape[3];
    let mut out = vec![0.0f32; b * m * d];
    for bi in 0..b {
        let values = &v_shared.data[bi * n * d..(bi + 1) * n * d];
        for mi in 0..m {
            let row = bi * m + mi;
            accumulate_weighted(
                &mut out[row * d..(row + 1) * d],
                &p.data[row * n..(row + 1) * n],
                values,
                d,
            );
        }
    }
    Tensor::new(vec![b, m, 1, d], out)
}
