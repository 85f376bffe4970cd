//! Dense tensor carrier and the scalar kernels the rest of the crate builds on.
//!
//! Everything here is 64-bit and accumulates left to right, so results are
//! reproducible bit for bit on a given platform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Additive logit used for masked-out attention positions.
///
/// `exp(MASKED_LOGIT - max)` underflows to exactly `0.0` for any finite max.
pub const MASKED_LOGIT: f64 = -1e30;

/// Row-major dense tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
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

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (leading dimension).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Width of a row when viewed as a matrix (product of trailing dimensions).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `self · rhs` for 2-D operands.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {m}x{k} by {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[kk * n..(kk + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// `self · rhsᵀ` for 2-D operands; rows of both operands are contiguous.
    pub fn matmul_transposed(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_transposed {m}x{k} by ({n}x{k2})ᵀ"
            )));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                out.push(dot(a, rhs.row(j)));
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.ensure_same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.ensure_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::Shape(format!(
                    "vstack column mismatch {} vs {cols}",
                    p.cols()
                )));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, cols, data)
    }

    /// Rows selected by index, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }
}

/// Binary mask over patches (or keys).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidArgument("empty bit mask".into()));
        }
        Ok(Self { bits })
    }

    pub fn ones(len: usize) -> Self {
        Self {
            bits: vec![true; len.max(1)],
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            bits: vec![false; len.max(1)],
        }
    }

    /// Parse from 0/1 integers; anything else is rejected.
    pub fn from_u8(values: &[u8]) -> Result<Self> {
        let bits = values
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::InvalidArgument(format!("mask entry {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.bits[i] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn ones_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| u8::from(b)).collect()
    }

    /// `'0'`/`'1'` string, the form masks take in run manifests.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Format(format!("bad mask character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }

    pub fn concat(parts: &[&BitMask]) -> Result<Self> {
        let bits: Vec<bool> = parts.iter().flat_map(|m| m.bits.iter().copied()).collect();
        Self::new(bits)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn softmax_in_place(row: &mut [f64]) {
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

/// Plain row-wise softmax.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Row-wise softmax with `log M` added to the logits.
///
/// `masks` holds either a single mask applied to every row or one mask per
/// row. Masked-out positions come back as exactly `0.0`.
pub fn masked_softmax_rows(logits: &Tensor, masks: &[BitMask]) -> Result<Tensor> {
    let (rows, cols) = (logits.rows(), logits.cols());
    if masks.len() != 1 && masks.len() != rows {
        return Err(Error::Shape(format!(
            "{} masks for {rows} rows",
            masks.len()
        )));
    }
    if let Some(m) = masks.iter().find(|m| m.len() != cols) {
        return Err(Error::Shape(format!(
            "mask length {} for {cols} columns",
            m.len()
        )));
    }
    let mut out = logits.clone();
    for r in 0..rows {
        let mask = if masks.len() == 1 { &masks[0] } else { &masks[r] };
        if !mask.any() {
            return Err(Error::FullyMaskedRow { row: r });
        }
        let row = out.row_mut(r);
        for (v, &keep) in row.iter_mut().zip(mask.bits()) {
            if !keep {
                *v += MASKED_LOGIT;
            }
        }
        softmax_in_place(row);
    }
    Ok(out)
}

/// Cosine similarity of two equal-length, nonzero vectors.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    cosine_with_norms(u, v, nu, nv)
}

/// Cosine with precomputed norms. Bit-identical to [`cosine_similarity`]
/// when the norms come from [`norm`].
pub(crate) fn cosine_with_norms(u: &[f64], v: &[f64], nu: f64, nv: f64) -> Result<f64> {
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok(dot(u, v) / (nu * nv))
}

pub const OTSU_BINS: usize = 256;

/// Upper edge of each of the 256 equal-width bins spanning `[min, max]`.
///
/// Bins are left-open: bin `k` holds values in `(edge[k-1], edge[k]]`, bin 0
/// additionally holds `min` itself.
pub fn otsu_bin_edges(min: f64, max: f64) -> [f64; OTSU_BINS] {
    let mut edges = [0.0; OTSU_BINS];
    let span = max - min;
    for (k, e) in edges.iter_mut().enumerate() {
        *e = if k + 1 == OTSU_BINS {
            max
        } else {
            min + span * ((k + 1) as f64 / OTSU_BINS as f64)
        };
    }
    edges
}

/// Bin index of every value under the shared 256-bin Otsu binning.
pub fn otsu_bins(values: &[f64]) -> Result<Vec<usize>> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "otsu needs at least 2 values, got {}",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("otsu input {v}")));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Err(Error::Unimodal(values.len()));
    }
    let edges = otsu_bin_edges(min, max);
    let span = max - min;
    Ok(values
        .iter()
        .map(|&v| {
            let guess = ((v - min) / span * OTSU_BINS as f64).ceil() as isize - 1;
            let mut b = guess.clamp(0, OTSU_BINS as isize - 1) as usize;
            // Snap onto the exact edges so that bin membership and the
            // strict `>` comparison against an edge always agree.
            while b > 0 && v <= edges[b - 1] {
                b -= 1;
            }
            while b + 1 < OTSU_BINS && v > edges[b] {
                b += 1;
            }
            b
        })
        .collect())
}

/// Split index `k` (class 0 = bins `0..=k`) maximizing inter-class variance.
///
/// Uses the classical bin-level formulation. The variance ratio
/// `(n₁S₀ − n₀S₁)² / (n₀n₁)` is compared exactly in integer arithmetic, so
/// ties are genuine ties and resolve to the lowest split.
fn otsu_split(bins: &[usize]) -> usize {
    let mut hist = [0u64; OTSU_BINS];
    for &b in bins {
        hist[b] += 1;
    }
    let n = bins.len() as u64;
    let total_sum: u64 = hist.iter().enumerate().map(|(k, &c)| k as u64 * c).sum();

    let mut n0 = 0u64;
    let mut s0 = 0u64;
    // best numerator / denominator of the variance ratio
    let mut best: Option<(usize, u128, u128)> = None;
    for k in 0..OTSU_BINS - 1 {
        n0 += hist[k];
        s0 += k as u64 * hist[k];
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total_sum - s0;
        let diff = (n1 as i128) * (s0 as i128) - (n0 as i128) * (s1 as i128);
        let num = diff.unsigned_abs() * diff.unsigned_abs();
        let den = n0 as u128 * n1 as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => wide_gt(num, bd, bn, den),
        };
        if better {
            best = Some((k, num, den));
        }
    }
    best.map_or(0, |(k, _, _)| k)
}

/// `a * b > c * d` without overflow.
fn wide_gt(a: u128, b: u128, c: u128, d: u128) -> bool {
    fn mul(x: u128, y: u128) -> (u128, u128) {
        let (xh, xl) = (x >> 64, x & u64::MAX as u128);
        let (yh, yl) = (y >> 64, y & u64::MAX as u128);
        let ll = xl * yl;
        let lh = xl * yh;
        let hl = xh * yl;
        let hh = xh * yh;
        let mid = (ll >> 64) + (lh & u64::MAX as u128) + (hl & u64::MAX as u128);
        let lo = (ll & u64::MAX as u128) | (mid << 64);
        let hi = hh + (lh >> 64) + (hl >> 64) + (mid >> 64);
        (hi, lo)
    }
    mul(a, b) > mul(c, d)
}

/// Threshold and per-value classes from the shared binning and a split index.
pub(crate) fn otsu_threshold_for_split(values: &[f64], bins: &[usize], split: usize) -> f64 {
    let mut below = f64::NEG_INFINITY;
    let mut above = f64::INFINITY;
    for (&v, &b) in values.iter().zip(bins) {
        if b <= split {
            below = below.max(v);
        } else {
            above = above.min(v);
        }
    }
    let mid = below + (above - below) / 2.0;
    if mid < above {
        mid
    } else {
        below
    }
}

/// Otsu threshold over a 256-bin histogram of `[min, max]`.
///
/// The returned value sits midway between the largest value of the low class
/// and the smallest value of the high class, so `value > threshold` reproduces
/// the optimal partition exactly.
pub fn otsu_threshold(values: &[f64]) -> Result<f64> {
    let bins = otsu_bins(values)?;
    let split = otsu_split(&bins);
    Ok(otsu_threshold_for_split(values, &bins, split))
}

/// `value > otsu_threshold(values)` for every value.
pub fn otsu_binarize(values: &[f64]) -> Result<Vec<bool>> {
    let t = otsu_threshold(values)?;
    Ok(values.iter().map(|&v| v > t).collect())
}

/// `(1 - w)·a + w·b`, with `w = 0` and `w = 1` returning the endpoints exactly.
pub fn lerp(a: &Tensor, b: &Tensor, w: f64) -> Result<Tensor> {
    a.ensure_same_shape(b, "lerp")?;
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidArgument(format!("lerp weight {w} outside [0,1]")));
    }
    if w == 0.0 {
        return Ok(a.clone());
    }
    if w == 1.0 {
        return Ok(b.clone());
    }
    let mut out = a.clone();
    lerp_slice_into(out.data_mut(), b.data(), w);
    Ok(out)
}

/// In-place row blend used by feature injection; same endpoint rules as [`lerp`].
pub(crate) fn lerp_slice_into(a: &mut [f64], b: &[f64], w: f64) {
    if w == 0.0 {
        return;
    }
    if w == 1.0 {
        a.copy_from_slice(b);
        return;
    }
    for (x, &y) in a.iter_mut().zip(b) {
        *x = (1.0 - w) * *x + w * y;
    }
}

/// Index of the maximum; exact ties go to the lowest index.
///
/// # Panics
/// On an empty slice.
pub fn argmax_tiebreak_low(values: &[f64]) -> usize {
    assert!(!values.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_k + log M)·V`.
///
/// With a mask, only admissible keys are touched; the result is identical to
/// running [`masked_softmax_rows`] over the full key set, since masked
/// positions contribute exact zeros.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&BitMask>) -> Result<Tensor> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let compact;
    let (k, v) = match mask {
        Some(m) if m.len() != k.rows() => {
            return Err(Error::Shape(format!(
                "mask length {} for {} keys",
                m.len(),
                k.rows()
            )))
        }
        Some(m) if !m.is_all_ones() => {
            let idx = m.ones_indices();
            if idx.is_empty() {
                return Err(Error::FullyMaskedRow { row: 0 });
            }
            compact = (k.gather_rows(&idx), v.gather_rows(&idx));
            (&compact.0, &compact.1)
        }
        _ => (k, v),
    };
    let dv = v.cols();
    let mut out = vec![0.0; q.rows() * dv];
    let mut weights = vec![0.0; k.rows()];
    for i in 0..q.rows() {
        let qi = q.row(i);
        for (j, w) in weights.iter_mut().enumerate() {
            *w = dot(qi, k.row(j)) * scale;
        }
        softmax_in_place(&mut weights);
        let o = &mut out[i * dv..(i + 1) * dv];
        for (j, &w) in weights.iter().enumerate() {
            for (x, &y) in o.iter_mut().zip(v.row(j)) {
                *x += w * y;
            }
        }
    }
    Tensor::matrix(q.rows(), dv, out)
}

/// Full attention matrix `softmax(QKᵀ/√d_k + log M)`, one row per query.
pub fn attention_weights(q: &Tensor, k: &Tensor, mask: Option<&BitMask>) -> Result<Tensor> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let logits = q.matmul_transposed(k)?.scaled(scale);
    match mask {
        Some(m) => masked_softmax_rows(&logits, std::slice::from_ref(m)),
        None => Ok(softmax_rows(&logits)),
    }
}

/// Per-row layer normalization without affine parameters.
pub fn layer_norm_rows(x: &Tensor, eps: f64) -> Tensor {
    let mut out = x.clone();
    let c = x.cols() as f64;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}
