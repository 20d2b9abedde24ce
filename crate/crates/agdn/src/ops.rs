//! Differentiable operations composing the forward graph.
//!
//! Every op validates shapes, computes its output eagerly, and (when the
//! tape is active and an input requires gradients) records a backward
//! closure. Closures snapshot the values they need before accumulating into
//! input gradients, so aliased arguments such as `matmul(&t, &t)` are safe.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Fixed sparsity structure shared by transition matrices and `spmm`.
///
/// Rows index destination nodes and columns index source nodes, so
/// multiplying a pattern against node states aggregates incoming messages.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePattern {
    num_rows: usize,
    num_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    row_ids: Vec<usize>,
}

impl SparsePattern {
    pub fn new(
        num_rows: usize,
        num_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
    ) -> Result<SparsePattern> {
        if row_offsets.len() != num_rows + 1 {
            return Err(Error::shape(
                "sparse_pattern",
                format!("row_offsets length {} for {num_rows} rows", row_offsets.len()),
            ));
        }
        if row_offsets[0] != 0 || *row_offsets.last().unwrap() != col_indices.len() {
            return Err(Error::shape(
                "sparse_pattern",
                "row_offsets must start at 0 and end at the entry count",
            ));
        }
        let mut row_ids = vec![0usize; col_indices.len()];
        for row in 0..num_rows {
            let (start, end) = (row_offsets[row], row_offsets[row + 1]);
            if end < start {
                return Err(Error::shape("sparse_pattern", "row_offsets must be non-decreasing"));
            }
            let cols = &col_indices[start..end];
            for pair in cols.windows(2) {
                if pair[1] <= pair[0] {
                    return Err(Error::shape(
                        "sparse_pattern",
                        format!("columns in row {row} must be strictly increasing"),
                    ));
                }
            }
            for (off, &c) in cols.iter().enumerate() {
                if c >= num_cols {
                    return Err(Error::shape(
                        "sparse_pattern",
                        format!("column {c} out of range in row {row}"),
                    ));
                }
                row_ids[start + off] = row;
            }
        }
        Ok(SparsePattern {
            num_rows,
            num_cols,
            row_offsets,
            col_indices,
            row_ids,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn num_cols(&self) -> usize {
        self.num_cols
    }

    pub fn num_entries(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    /// Source node of each stored entry, in storage order.
    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    /// Destination node of each stored entry, in storage order.
    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn entry_range(&self, row: usize) -> std::ops::Range<usize> {
        self.row_offsets[row]..self.row_offsets[row + 1]
    }

    /// Position of entry `(row, col)` in storage order, if present.
    pub fn find(&self, row: usize, col: usize) -> Option<usize> {
        let range = self.entry_range(row);
        self.col_indices[range.clone()]
            .binary_search(&col)
            .ok()
            .map(|off| range.start + off)
    }
}

fn mm(a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize) -> Vec<f64> {
    let mut out = vec![0.0; ar * bc];
    for i in 0..ar {
        for k in 0..ac {
            let aik = a[i * ac + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * bc..(k + 1) * bc];
            let orow = &mut out[i * bc..(i + 1) * bc];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

fn mm_a_bt(a: &[f64], ar: usize, ac: usize, b: &[f64], br: usize) -> Vec<f64> {
    let mut out = vec![0.0; ar * br];
    for i in 0..ar {
        let arow = &a[i * ac..(i + 1) * ac];
        for j in 0..br {
            let brow = &b[j * ac..(j + 1) * ac];
            out[i * br + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn mm_at_b(a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize) -> Vec<f64> {
    let mut out = vec![0.0; ac * bc];
    for i in 0..ar {
        let arow = &a[i * ac..(i + 1) * ac];
        let brow = &b[i * bc..(i + 1) * bc];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[k * bc..(k + 1) * bc];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

fn wants_grad(tape: &Tape, inputs: &[&Tensor]) -> bool {
    tape.is_active() && inputs.iter().any(|t| t.requires_grad())
}

/// Dense matrix product `a @ b`.
pub fn matmul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    if ac != br {
        return Err(Error::shape(
            "matmul",
            format!("{ar}x{ac} @ {br}x{bc}: inner dimensions differ"),
        ));
    }
    let out = Tensor::new(ar, bc, mm(&a.values(), ar, ac, &b.values(), bc))?;
    if wants_grad(tape, &[a, b]) {
        out.set_requires_grad(true);
        let (a, b, out) = (a.clone(), b.clone(), out.clone());
        tape.record(move || {
            let Some(g) = out.grad() else { return };
            let av = a.values();
            let bv = b.values();
            if a.requires_grad() {
                a.add_to_grad(&mm_a_bt(&g, ar, bc, &bv, br));
            }
            if b.requires_grad() {
                b.add_to_grad(&mm_at_b(&av, ar, ac, &g, bc));
            }
        });
    }
    Ok(out)
}

/// Elementwise sum of two same-shape tensors.
pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} + {:?}", a.shape(), b.shape()),
        ));
    }
    let values: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
    let out = Tensor::new(a.rows(), a.cols(), values)?;
    if wants_grad(tape, &[a, b]) {
        out.set_requires_grad(true);
        let (a, b, out) = (a.clone(), b.clone(), out.clone());
        tape.record(move || {
            let Some(g) = out.grad() else { return };
            a.add_to_grad(&g);
            b.add_to_grad(&g);
        });
    }
    Ok(out)
}

/// Multiply every entry by a constant.
pub fn scale(tape: &Tape, a: &Tensor, factor: f64) -> Result<Tensor> {
    let values: Vec<f64> = a.values().iter().map(|x| x * factor).collect();
    let out = Tensor::new(a.rows(), a.cols(), values)?;
    if wants_grad(tape, &[a]) {
        out.set_requires_grad(true);
        let (a, out) = (a.clone(), out.clone());
        tape.record(move || {
            let Some(g) = out.grad() else { return };
            let scaled: Vec<f64> = g.iter().map(|x| x * factor).collect();
            a.add_to_grad(&scaled);
        });
    }
    Ok(out)
}

/// Scale row `i` of `h` by the scalar `weights[i]` (a column vector).
pub fn row_mul(tape: &Tape, h: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (n, d) = h.shape();
    if weights.shape() != (n, 1) {
        return Err(Error::shape(
            "row_mul",
            format!("weights {:?} for {n} rows", weights.shape()),
        ));
    }
    let hv = h.values();
    let wv = weights.values();
    let mut values = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            values[i * d + j] = hv[i * d + j] * wv[i];
        }
    }
    let out = Tensor::new(n, d, values)?;
    if wants_grad(tape, &[h, weights]) {
        out.set_requires_grad(true);
        let (h, weights, out) = (h.clone(), weights.clone(), out.clone());
        tape.record(move || {
            let Some(g) = out.grad() else { return };
            let hv = h.values();
            let wv = weights.values();
            if h.requires_grad() {
                let mut dh = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        dh[i * d + j] = g[i * d + j] * wv[i];
                    }
                }
                h.add_to_grad(&dh);
            }
            if weights.requires_grad() {
                let mut dw = vec![0.0; n];
                for i in 0..n {
                    dw[i] = (0..d).map(|j| g[i * d + j] * hv[i * d + j]).sum();
                }
                weights.add_to_grad(&dw);
            }
        });
    }
    Ok(out)
}

/// Concatenate tensors along columns; all parts must share a row count.
pub fn concat_cols(tape: &Tape, parts: &[Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(Error::shape("concat_cols", "no tensors to concatenate"));
    };
    let n = first.rows();
    let mut total_cols = 0;
    for p in parts {
        if p.rows() != n {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts differ: {} vs {}", n, p.rows()),
            ));
        }
        total_cols += p.cols();
    }
    let part_values: Vec<(Vec<f64>, usize)> = parts.iter().map(|p| (p.values(), p.cols())).collect();
    let mut values = vec![0.0; n * total_cols];
    let mut offset = 0;
    for (pv, pc) in &part_values {
        for i in 0..n {
            values[i * total_cols + offset..i * total_cols + offset + pc]
                .copy_from_slice(&pv[i * pc..(i + 1) * pc]);
        }
        offset += pc;
    }
    let out = Tensor::new(n, total_cols, values)?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    if wants_grad(tape, &refs) {
        out.set_requires_grad(true);
        let parts: Vec<Tensor> = parts.to_vec();
        let out = out.clone();
        tape.record(move || {
            let Some(g) = out.grad() else { return };
            let mut offset = 0;
            for p in &parts {
                let pc = p.cols();
                if p.requires_grad() {
                    let mut dp = vec![0.0; n * pc];
                    for i in 0..n {
                        dp[i * pc..(i + 1) * pc].copy_from_slice(
                            &g[i * total_cols + offset..i * total_cols + offset + pc],
                        );
                    }
                    p.add_to_grad(&dp);
                }
                offset += pc;
            }
        });
    }
    Ok(out)
}

/// Select rows of `h` by index, duplicates allowed.
pub fn gather_rows(tape: &Tape, h: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (n, d) = h.shape();
    for &i in indices {
        if i >= n {
            return Err(Error::shape(
                "gather_rows",
                format!("row index {i} out of range for {n} rows"),
            ));
        }
    }
    let hv = h.values();
    let mut values = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        values.extend_from_slice(&hv[i * d..(i + 1) * d]);
    }
    let out = Tensor::new(indices.len(), d, values)?;
    if wants_grad(tape, &[h]) {
        out.set_requires_grad(true);
        let (h, out) = (h.clone(), out.clone());
        let indices: Rc<[usize]> = Rc::from(indices);
        tape.record(move || {
            let Some(g) = out.grad() else { return };
            let mut dh = vec![0.0; n * d];
            for (pos, &i) in indices.iter().enumerate() {
                for j in 0..d {
                    dh[i * d + j] += g[pos * d + j];
                }
            }
            h.add_to_grad(&dh);
        });
    }
    Ok(out)
}

/// Extract one column as an `n x 1` tensor.
pub fn slice_col(tape: &Tape, a: &Tensor, col: usize) -> Result<Tensor> {
    let (n, c) = a.shape();
    if col >= c {
        return Err(Error::shape(
            "slice_col",
            format!("column {col} out of range for {c} columns"),
        ));
    }
    let av = a.values();
    let values: Vec<f64> = (0..n).map(|i| av[i * c + col]).collect();
    let out = Tensor::new(n, 1, values)?;
    if wants_grad(tape, &[a]) {
        out.set_requires_grad(true);
        let (a, out) = (a.clone(), out.clone());
        tape.record(move || {
            let Some(g) = out.grad() else { return };
            let mut da = vec![0.0; n * c];
            for i in 0..n {
                da[i * c + col] = g[i];
            }
            a.add_to_grad(&da);
        });
    }
    Ok(out)
}

/// Leaky rectifier: `x` for positive entries, `slope * x` otherwise.
pub fn leaky_relu(tape: &Tape, a: &Tensor, negative_slope: f64) -> Result<Tensor> {
    let values: Vec<f64> = a
        .values()
        .iter()
        .map(|&x| if x > 0.0 { x } else { negative_slope * x })
        .collect();
    let out = Tensor::new(a.rows(), a.cols(), values)?;
    if wants_grad(tape, &[a]) {
        out.set_requires_grad(true);
        let (a, out) = (a.clone(), out.clone());
        tape.record(move || {
            let Some(g) = out.grad() else { return };
            let av = a.values();
            let da: Vec<f64> = g
                .iter()
                .zip(&av)
                .map(|(gi, &x)| if x > 0.0 { *gi } else { negative_slope * gi })
                .collect();
            a.add_to_grad(&da);
        });
    }
    Ok(out)
}

pub fn relu(tape: &Tape, a: &Tensor) -> Result<Tensor> {
    leaky_relu(tape, a, 0.0)
}

/// Inverted dropout: zero entries with probability `rate` and scale the
/// survivors by `1 / (1 - rate)` so expectations are preserved.
pub fn dropout<R: Rng>(tape: &Tape, a: &Tensor, rate: f64, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidInput(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if rate == 0.0 {
        return Ok(a.clone());
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mask: Rc<Vec<f64>> = Rc::new(
        (0..a.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale })
            .collect(),
    );
    let values: Vec<f64> = a.values().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
    let out = Tensor::new(a.rows(), a.cols(), values)?;
    if wants_grad(tape, &[a]) {
        out.set_requires_grad(true);
        let (a, out) = (a.clone(), out.clone());
        let mask = Rc::clone(&mask);
        tape.record(move || {
            let Some(g) = out.grad() else { return };
            let da: Vec<f64> = g.iter().zip(mask.iter()).map(|(gi, m)| gi * m).collect();
            a.add_to_grad(&da);
        });
    }
    Ok(out)
}

/// How softmax logits are shifted before exponentiation. The shift cancels
/// in the normalized ratio, so any choice yields the same distribution;
/// `SegmentMax` keeps the exponentials in range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stabilizer {
    /// Subtract the largest logit in each segment.
    SegmentMax,
    /// No shift; overflows for large logits and exists to demonstrate that
    /// the shift does not change the result.
    Zero,
}

/// Softmax over groups of entries of a column vector.
///
/// `segment_ids[e]` assigns entry `e` to a segment; probabilities are
/// normalized within each segment. Every segment must own at least one entry.
pub fn segment_softmax(
    tape: &Tape,
    logits: &Tensor,
    segment_ids: &[usize],
    num_segments: usize,
    stabilizer: Stabilizer,
) -> Result<Tensor> {
    let (e, c) = logits.shape();
    if c != 1 {
        return Err(Error::shape(
            "segment_softmax",
            format!("logits must be a column vector, got {e}x{c}"),
        ));
    }
    if segment_ids.len() != e {
        return Err(Error::shape(
            "segment_softmax",
            format!("{} segment ids for {e} logits", segment_ids.len()),
        ));
    }
    let mut shift = match stabilizer {
        Stabilizer::SegmentMax => vec![f64::NEG_INFINITY; num_segments],
        Stabilizer::Zero => vec![0.0; num_segments],
    };
    let mut occupied = vec![false; num_segments];
    let z = logits.values();
    for (i, &s) in segment_ids.iter().enumerate() {
        if s >= num_segments {
            return Err(Error::shape(
                "segment_softmax",
                format!("segment id {s} out of range for {num_segments} segments"),
            ));
        }
        occupied[s] = true;
        if stabilizer == Stabilizer::SegmentMax && z[i] > shift[s] {
            shift[s] = z[i];
        }
    }
    if let Some(s) = occupied.iter().position(|&o| !o) {
        return Err(Error::Numeric(format!(
            "segment {s} has no entries; softmax over an empty segment is undefined"
        )));
    }
    let mut sums = vec![0.0; num_segments];
    let mut exps = vec![0.0; e];
    for (i, &s) in segment_ids.iter().enumerate() {
        exps[i] = (z[i] - shift[s]).exp();
        sums[s] += exps[i];
    }
    if sums.iter().any(|x| !x.is_finite() || *x == 0.0) {
        return Err(Error::Numeric(
            "segment softmax overflowed; use the max-shift stabilizer".into(),
        ));
    }
    let probs: Vec<f64> = exps
        .iter()
        .zip(segment_ids)
        .map(|(ex, &s)| ex / sums[s])
        .collect();
    let out = Tensor::new(e, 1, probs)?;
    if wants_grad(tape, &[logits]) {
        out.set_requires_grad(true);
        let (logits, out) = (logits.clone(), out.clone());
        let segment_ids: Rc<[usize]> = Rc::from(segment_ids);
        tape.record(move || {
            let Some(g) = out.grad() else { return };
            let p = out.values();
            let mut seg_dot = vec![0.0; num_segments];
            for (i, &s) in segment_ids.iter().enumerate() {
                seg_dot[s] += g[i] * p[i];
            }
            let dz: Vec<f64> = (0..p.len())
                .map(|i| p[i] * (g[i] - seg_dot[segment_ids[i]]))
                .collect();
            logits.add_to_grad(&dz);
        });
    }
    Ok(out)
}

/// Row-wise softmax of a dense matrix, max-shifted for stability.
pub fn softmax_rows(tape: &Tape, a: &Tensor) -> Result<Tensor> {
    let (n, c) = a.shape();
    if c == 0 {
        return Err(Error::shape("softmax_rows", "matrix has no columns"));
    }
    let av = a.values();
    let mut values = vec![0.0; n * c];
    for i in 0..n {
        let row = &av[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let e = (x - m).exp();
            values[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            values[i * c + j] /= sum;
        }
    }
    let out = Tensor::new(n, c, values)?;
    if wants_grad(tape, &[a]) {
        out.set_requires_grad(true);
        let (a, out) = (a.clone(), out.clone());
        tape.record(move || {
            let Some(g) = out.grad() else { return };
            let p = out.values();
            let mut da = vec![0.0; n * c];
            for i in 0..n {
                let dot: f64 = (0..c).map(|j| g[i * c + j] * p[i * c + j]).sum();
                for j in 0..c {
                    da[i * c + j] = p[i * c + j] * (g[i * c + j] - dot);
                }
            }
            a.add_to_grad(&da);
        });
    }
    Ok(out)
}

/// Sparse-dense product: `out[r] = sum over entries e in row r of
/// weights[e] * h[col(e)]`. Differentiates through both the entry weights
/// and the dense operand.
pub fn spmm(
    tape: &Tape,
    pattern: &Rc<SparsePattern>,
    weights: &Tensor,
    h: &Tensor,
) -> Result<Tensor> {
    let (n, d) = h.shape();
    if n != pattern.num_cols() {
        return Err(Error::shape(
            "spmm",
            format!("pattern has {} columns but h has {n} rows", pattern.num_cols()),
        ));
    }
    if weights.shape() != (pattern.num_entries(), 1) {
        return Err(Error::shape(
            "spmm",
            format!(
                "weights {:?} for {} stored entries",
                weights.shape(),
                pattern.num_entries()
            ),
        ));
    }
    let hv = h.values();
    let wv = weights.values();
    let rows = pattern.num_rows();
    let mut values = vec![0.0; rows * d];
    for r in 0..rows {
        for e in pattern.entry_range(r) {
            let c = pattern.col_indices()[e];
            let w = wv[e];
            if w == 0.0 {
                continue;
            }
            let src = &hv[c * d..(c + 1) * d];
            let dst = &mut values[r * d..(r + 1) * d];
            for (o, x) in dst.iter_mut().zip(src) {
                *o += w * x;
            }
        }
    }
    let out = Tensor::new(rows, d, values)?;
    if wants_grad(tape, &[weights, h]) {
        out.set_requires_grad(true);
        let (weights, h, out) = (weights.clone(), h.clone(), out.clone());
        let pattern = Rc::clone(pattern);
        tape.record(move || {
            let Some(g) = out.grad() else { return };
            let hv = h.values();
            let wv = weights.values();
            if weights.requires_grad() {
                let mut dw = vec![0.0; pattern.num_entries()];
                for r in 0..pattern.num_rows() {
                    for e in pattern.entry_range(r) {
                        let c = pattern.col_indices()[e];
                        dw[e] = (0..d).map(|j| g[r * d + j] * hv[c * d + j]).sum();
                    }
                }
                weights.add_to_grad(&dw);
            }
            if h.requires_grad() {
                let mut dh = vec![0.0; n * d];
                for r in 0..pattern.num_rows() {
                    for e in pattern.entry_range(r) {
                        let c = pattern.col_indices()[e];
                        let w = wv[e];
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            dh[c * d + j] += w * g[r * d + j];
                        }
                    }
                }
                h.add_to_grad(&dh);
            }
        });
    }
    Ok(out)
}

/// Batch normalization over rows with trainable per-column scale and shift.
///
/// In training mode the batch mean and biased variance normalize the input
/// and the running buffers are updated in place (variance with the unbiased
/// estimate when more than one row is present); in inference mode the
/// running buffers normalize instead.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    training: bool,
    momentum: f64,
    eps: f64,
) -> Result<Tensor> {
    let (n, d) = x.shape();
    if n == 0 {
        return Err(Error::shape("batch_norm", "input has no rows"));
    }
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != (1, d) {
            return Err(Error::shape(
                "batch_norm",
                format!("{name} must be 1x{d}, got {:?}", t.shape()),
            ));
        }
    }
    let xv = x.values();
    let gv = gamma.values();
    let bv = beta.values();

    let (mean, var) = if training {
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += xv[i * d + j];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                let c = xv[i * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        let rm = running_mean.values();
        let rv = running_var.values();
        let new_rm: Vec<f64> = rm
            .iter()
            .zip(&mean)
            .map(|(r, m)| (1.0 - momentum) * r + momentum * m)
            .collect();
        let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        let new_rv: Vec<f64> = rv
            .iter()
            .zip(&var)
            .map(|(r, v)| (1.0 - momentum) * r + momentum * v * unbias)
            .collect();
        running_mean.set_values(&new_rm)?;
        running_var.set_values(&new_rv)?;
        (mean, var)
    } else {
        (running_mean.values(), running_var.values())
    };

    let inv_std: Rc<Vec<f64>> = Rc::new(var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect());
    let mut xhat = vec![0.0; n * d];
    let mut values = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            let xh = (xv[i * d + j] - mean[j]) * inv_std[j];
            xhat[i * d + j] = xh;
            values[i * d + j] = gv[j] * xh + bv[j];
        }
    }
    let xhat = Rc::new(xhat);
    let out = Tensor::new(n, d, values)?;
    if wants_grad(tape, &[x, gamma, beta]) {
        out.set_requires_grad(true);
        let (x, gamma, beta, out) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
        let (xhat, inv_std) = (Rc::clone(&xhat), Rc::clone(&inv_std));
        tape.record(move || {
            let Some(g) = out.grad() else { return };
            let gv = gamma.values();
            if gamma.requires_grad() {
                let mut dgamma = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        dgamma[j] += g[i * d + j] * xhat[i * d + j];
                    }
                }
                gamma.add_to_grad(&dgamma);
            }
            if beta.requires_grad() {
                let mut dbeta = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        dbeta[j] += g[i * d + j];
                    }
                }
                beta.add_to_grad(&dbeta);
            }
            if x.requires_grad() {
                let mut dx = vec![0.0; n * d];
                if training {
                    let mut sum_dxhat = vec![0.0; d];
                    let mut sum_dxhat_xhat = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            let dxh = g[i * d + j] * gv[j];
                            sum_dxhat[j] += dxh;
                            sum_dxhat_xhat[j] += dxh * xhat[i * d + j];
                        }
                    }
                    let nf = n as f64;
                    for i in 0..n {
                        for j in 0..d {
                            let dxh = g[i * d + j] * gv[j];
                            dx[i * d + j] = inv_std[j] / nf
                                * (nf * dxh
                                    - sum_dxhat[j]
                                    - xhat[i * d + j] * sum_dxhat_xhat[j]);
                        }
                    }
                } else {
                    for i in 0..n {
                        for j in 0..d {
                            dx[i * d + j] = g[i * d + j] * gv[j] * inv_std[j];
                        }
                    }
                }
                x.add_to_grad(&dx);
            }
        });
    }
    Ok(out)
}

/// Mean cross-entropy between `logits` rows and integer labels, restricted
/// to the rows listed in `mask`. The softmax is folded into the loss with a
/// row-max shift.
pub fn softmax_cross_entropy(
    tape: &Tape,
    logits: &Tensor,
    labels: &[usize],
    mask: &[usize],
) -> Result<Tensor> {
    let (n, c) = logits.shape();
    if c == 0 {
        return Err(Error::shape("softmax_cross_entropy", "logits have no columns"));
    }
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if mask.is_empty() {
        return Err(Error::InvalidInput(
            "cross-entropy mask selects no rows".into(),
        ));
    }
    let zv = logits.values();
    let m = mask.len() as f64;
    let mut loss = 0.0;
    let mut probs = vec![0.0; mask.len() * c];
    for (pos, &row) in mask.iter().enumerate() {
        if row >= n {
            return Err(Error::InvalidInput(format!(
                "mask row {row} out of range for {n} rows"
            )));
        }
        let y = labels[row];
        if y >= c {
            return Err(Error::InvalidInput(format!(
                "label {y} out of range for {c} classes (row {row})"
            )));
        }
        let zrow = &zv[row * c..(row + 1) * c];
        let zmax = zrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &z) in zrow.iter().enumerate() {
            let e = (z - zmax).exp();
            probs[pos * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            probs[pos * c + j] /= sum;
        }
        loss += sum.ln() - (zrow[y] - zmax);
    }
    let out = Tensor::new(1, 1, vec![loss / m])?;
    if wants_grad(tape, &[logits]) {
        out.set_requires_grad(true);
        let (logits, out) = (logits.clone(), out.clone());
        let mask: Rc<[usize]> = Rc::from(mask);
        let label_of: Rc<Vec<usize>> = Rc::new(mask.iter().map(|&r| labels[r]).collect());
        let probs = Rc::new(probs);
        tape.record(move || {
            let Some(g) = out.grad() else { return };
            let gs = g[0] / m;
            let mut dz = vec![0.0; n * c];
            for (pos, &row) in mask.iter().enumerate() {
                for j in 0..c {
                    let indicator = if j == label_of[pos] { 1.0 } else { 0.0 };
                    dz[row * c + j] += gs * (probs[pos * c + j] - indicator);
                }
            }
            logits.add_to_grad(&dz);
        });
    }
    Ok(out)
}

/// Sum of every entry, as a 1x1 tensor.
pub fn sum_all(tape: &Tape, a: &Tensor) -> Result<Tensor> {
    let total: f64 = a.values().iter().sum();
    let out = Tensor::new(1, 1, vec![total])?;
    if wants_grad(tape, &[a]) {
        out.set_requires_grad(true);
        let (a, out) = (a.clone(), out.clone());
        tape.record(move || {
            let Some(g) = out.grad() else { return };
            a.add_to_grad(&vec![g[0]; a.len()]);
        });
    }
    Ok(out)
}
