// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense numeric kernel: matrices, softmax, layer norm, and multi-head
//! attention driven by an explicit allow-mask.
//!
//! Weight matrices follow the `y = x · W + b` convention, so a projection from
//! width `a` to width `b` is stored as an `a × b` matrix. The one exception is
//! the unembedding matrix, stored `|V| × d` and applied as `U · h`.

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::par;

/// Row-major dense matrix of finite `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Wrap row-major values, checking length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ProbeError::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite("matrix values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Build from a list of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(ProbeError::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `(rows, cols)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Row-major backing slice.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// New matrix made of the selected rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stack `self` above `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(ProbeError::Shape(format!(
                "vstack {} cols onto {} cols",
                other.cols, self.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(ProbeError::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = Matrix::zeros(n, m);
        if m == 0 {
            return Ok(out);
        }
        let parallel = n * k * m >= par::PAR_WORK_THRESHOLD;
        par::fill_chunks(&mut out.data, m, parallel, |i, orow| {
            let arow = self.row(i);
            for (p, &a) in arow.iter().enumerate() {
                let brow = rhs.row(p);
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        });
        Ok(out)
    }

    /// `self · rhsᵀ`, i.e. dot products of every row pair.
    pub fn matmul_transposed(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(ProbeError::Shape(format!(
                "matmul {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (n, m) = (self.rows, rhs.rows);
        let mut out = Matrix::zeros(n, m);
        if m == 0 {
            return Ok(out);
        }
        let parallel = n * m * self.cols >= par::PAR_WORK_THRESHOLD;
        par::fill_chunks(&mut out.data, m, parallel, |i, orow| {
            let arow = self.row(i);
            for (j, o) in orow.iter_mut().enumerate() {
                *o = dot(arow, rhs.row(j));
            }
        });
        Ok(out)
    }

    /// Add `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(ProbeError::Shape(format!(
                "bias of length {} for {} cols",
                bias.len(),
                self.cols
            )));
        }
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(ProbeError::Shape(format!(
                "add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Columns `start..start+len` as a new matrix.
    pub fn column_block(&self, start: usize, len: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Matrix {
            rows: self.rows,
            cols: len,
            data,
        }
    }

    /// Apply `f` to each row, producing a matrix of the same shape.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Matrix> {
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.rows {
            let out = f(self.row(r));
            if out.len() != self.cols {
                return Err(ProbeError::Shape("row map changed width".into()));
            }
            data.extend(out);
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Plain dot product; lengths are assumed equal.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(ProbeError::Empty("softmax input".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite("softmax input".into()));
    }
    Ok(stable_softmax(logits))
}

// Accepts -inf entries (blocked keys) as long as one entry is finite.
fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Gain, bias and epsilon of a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub epsilon: f64,
}

impl LayerNormParams {
    /// Identity-initialised norm (gain 1, bias 0).
    pub fn unit(width: usize, epsilon: f64) -> Self {
        Self {
            gain: vec![1.0; width],
            bias: vec![0.0; width],
            epsilon,
        }
    }

    pub fn width(&self) -> usize {
        self.gain.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        layer_norm(x, &self.gain, &self.bias, self.epsilon)
    }

    /// Normalize every row of `x`.
    pub fn apply_rows(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.width() {
            return Err(ProbeError::Shape(format!(
                "layer norm of width {} on {} cols",
                self.width(),
                x.cols()
            )));
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let y = layer_norm_unchecked(x.row(r), &self.gain, &self.bias, self.epsilon);
            out.row_mut(r).copy_from_slice(&y);
        }
        Ok(out)
    }
}

/// `gain ⊙ (x − mean) / sqrt(var + epsilon) + bias` with population variance.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(ProbeError::Shape(format!(
            "layer norm lengths x={} gain={} bias={}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if x.is_empty() {
        return Err(ProbeError::Empty("layer norm input".into()));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(ProbeError::Range(format!("epsilon must be > 0, got {epsilon}")));
    }
    Ok(layer_norm_unchecked(x, gain, bias, epsilon))
}

fn layer_norm_unchecked(x: &[f64], gain: &[f64], bias: &[f64], epsilon: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + epsilon).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| g * ((v - mean) * inv) + b)
        .collect()
}

/// Boolean attention permission matrix. `allowed(q, k)` means query position
/// `q` may attend key position `k`. The diagonal is always allowed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AllowMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AllowMask {
    /// Mask permitting every edge.
    pub fn all(n: usize) -> Self {
        Self {
            n,
            allowed: vec![true; n * n],
        }
    }

    /// Build from a predicate; the diagonal is forced to `true`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n * n);
        for q in 0..n {
            for k in 0..n {
                allowed.push(q == k || f(q, k));
            }
        }
        Self { n, allowed }
    }

    /// Build from explicit rows, rejecting a blocked diagonal.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        let mut allowed = Vec::with_capacity(n * n);
        for (q, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(ProbeError::Mask(format!("row {q} has {} entries, want {n}", row.len())));
            }
            if !row[q] {
                return Err(ProbeError::Mask(format!("diagonal entry {q} is blocked")));
            }
            allowed.extend_from_slice(row);
        }
        Ok(Self { n, allowed })
    }

    /// Sequence length.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.n..(q + 1) * self.n]
    }

    pub fn is_all_true(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    /// Pairwise AND of two masks of equal size.
    pub fn intersect(&self, other: &AllowMask) -> Result<AllowMask> {
        if self.n != other.n {
            return Err(ProbeError::Mask(format!(
                "cannot intersect masks of size {} and {}",
                self.n, other.n
            )));
        }
        Ok(AllowMask {
            n: self.n,
            allowed: self.allowed.iter().zip(&other.allowed).map(|(a, b)| *a && *b).collect(),
        })
    }

    /// Lower-triangular causal mask.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, |q, k| k <= q)
    }

    /// Check diagonal and non-empty rows.
    pub fn validate(&self) -> Result<()> {
        for q in 0..self.n {
            if !self.allowed(q, q) {
                return Err(ProbeError::Mask(format!("diagonal entry {q} is blocked")));
            }
        }
        Ok(())
    }

    /// Compact text form, one `0`/`1` string per row.
    pub fn to_row_strings(&self) -> Vec<String> {
        (0..self.n)
            .map(|q| self.row(q).iter().map(|&a| if a { '1' } else { '0' }).collect())
            .collect()
    }

    /// Parse the form produced by [`AllowMask::to_row_strings`].
    pub fn from_row_strings(rows: &[String]) -> Result<Self> {
        let parsed = rows
            .iter()
            .map(|r| {
                r.chars()
                    .map(|c| match c {
                        '1' => Ok(true),
                        '0' => Ok(false),
                        other => Err(ProbeError::Mask(format!("bad mask character {other:?}"))),
                    })
                    .collect::<Result<Vec<bool>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(&parsed)
    }
}

impl Serialize for AllowMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_strings().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AllowMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<String>::deserialize(d)?;
        AllowMask::from_row_strings(&rows).map_err(serde::de::Error::custom)
    }
}

/// Query/key/value/output projections of one attention block, each `d × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl AttentionParams {
    pub fn width(&self) -> usize {
        self.wq.rows()
    }

    fn check(&self, d: usize) -> Result<()> {
        for (name, m) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if m.shape() != (d, d) {
                return Err(ProbeError::Shape(format!(
                    "attention {name} is {:?}, want ({d}, {d})",
                    m.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Output of attention together with the per-head probability matrices.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Matrix,
    /// One `n × n` matrix per head; row `q` is the distribution over keys.
    pub probs: Vec<Matrix>,
}

/// Multi-head scaled dot-product attention.
///
/// Blocked keys get a `-inf` logit before the softmax, so their probability
/// is exactly zero. `mask = None` is the unmasked path; an all-true mask takes
/// the same arithmetic and is bitwise equal to it.
pub fn masked_attention(
    x: &Matrix,
    params: &AttentionParams,
    heads: usize,
    mask: Option<&AllowMask>,
) -> Result<Matrix> {
    attention_impl(x, params, heads, mask, false).map(|o| o.output)
}

/// [`masked_attention`] that also returns the attention probabilities.
pub fn masked_attention_with_probs(
    x: &Matrix,
    params: &AttentionParams,
    heads: usize,
    mask: Option<&AllowMask>,
) -> Result<AttentionOutput> {
    attention_impl(x, params, heads, mask, true)
}

fn attention_impl(
    x: &Matrix,
    params: &AttentionParams,
    heads: usize,
    mask: Option<&AllowMask>,
    keep_probs: bool,
) -> Result<AttentionOutput> {
    let (n, d) = x.shape();
    if heads == 0 || d % heads != 0 {
        return Err(ProbeError::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    params.check(d)?;
    if let Some(m) = mask {
        if m.len() != n {
            return Err(ProbeError::Mask(format!(
                "mask of size {} for sequence of {n}",
                m.len()
            )));
        }
        for q in 0..n {
            if !m.row(q).iter().any(|&a| a) {
                return Err(ProbeError::Mask(format!("row {q} allows no keys")));
            }
        }
    }
    let q_all = x.matmul(&params.wq)?;
    let k_all = x.matmul(&params.wk)?;
    let v_all = x.matmul(&params.wv)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut concat = Matrix::zeros(n, d);
    let mut probs = Vec::new();
    for h in 0..heads {
        let qh = q_all.column_block(h * dh, dh);
        let kh = k_all.column_block(h * dh, dh);
        let vh = v_all.column_block(h * dh, dh);
        let scores = qh.matmul_transposed(&kh)?;
        let mut p = Matrix::zeros(n, n);
        for q in 0..n {
            let logits: Vec<f64> = scores
                .row(q)
                .iter()
                .enumerate()
                .map(|(k, &s)| match mask {
                    Some(m) if !m.allowed(q, k) => f64::NEG_INFINITY,
                    _ => s * scale,
                })
                .collect();
            p.row_mut(q).copy_from_slice(&stable_softmax(&logits));
        }
        let out_h = p.matmul(&vh)?;
        for r in 0..n {
            concat.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(out_h.row(r));
        }
        if keep_probs {
            probs.push(p);
        }
    }
    Ok(AttentionOutput {
        output: concat.matmul(&params.wo)?,
        probs,
    })
}

/// Elementwise nonlinearity of the feed-forward sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation.
    #[default]
    Gelu,
    Relu,
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
            }
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }
}

/// Affine map `x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_in, d_out),
            bias: vec![0.0; d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }
}

/// Two-layer feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = self.up.forward(x)?;
        let act = self.activation;
        h = h.map_rows(|r| r.iter().map(|&v| act.apply(v)).collect())?;
        self.down.forward(&h)
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `+ mlp(ln2(·))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: Mlp,
}

impl Block {
    pub fn forward(&self, x: &Matrix, heads: usize, mask: Option<&AllowMask>) -> Result<Matrix> {
        let normed = self.ln1.apply_rows(x)?;
        let mut h = x.clone();
        h.add_assign(&masked_attention(&normed, &self.attn, heads, mask)?)?;
        let normed = self.ln2.apply_rows(&h)?;
        h.add_assign(&self.mlp.forward(&normed)?)?;
        Ok(h)
    }
}
