//! Independent dense verifiers.
//!
//! Everything here recomputes results with brute-force 64-bit dense
//! arithmetic and shares no code with the sparse engine, so agreement
//! between the two is meaningful evidence rather than a tautology.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Node-count cap for the dense adaptive-diffusion and GCN references.
pub const DIFFUSION_CAP: usize = 256;
/// Node-count cap for eigendecomposition-based checks.
pub const EIGEN_CAP: usize = 64;

/// Plain row-major dense matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DenseMatrix> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("dense_matrix", "ragged rows"));
            }
            values.extend_from_slice(row);
        }
        Ok(DenseMatrix { rows: r, cols: c, values })
    }

    pub fn from_flat(rows: usize, cols: usize, values: Vec<f64>) -> Result<DenseMatrix> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "dense_matrix",
                format!("{} values for {rows}x{cols}", values.len()),
            ));
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "dense matmul dimension mismatch");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.get(i, k);
                if aik == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.values[i * other.cols + j] += aik * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values,
        }
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values,
        }
    }

    pub fn scale(&self, factor: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Matrix power by repeated multiplication; `pow(0)` is the identity.
    pub fn pow(&self, exponent: usize) -> DenseMatrix {
        assert_eq!(self.rows, self.cols, "matrix power requires a square matrix");
        let mut out = DenseMatrix::identity(self.rows);
        for _ in 0..exponent {
            out = out.matmul(self);
        }
        out
    }

    /// Left-multiply by `diag(scales)`: scales row `i` by `scales[i]`.
    pub fn row_scale(&self, scales: &[f64]) -> DenseMatrix {
        assert_eq!(scales.len(), self.rows);
        let mut out = self.clone();
        for (row, &s) in out.values.chunks_exact_mut(self.cols).zip(scales) {
            for v in row {
                *v *= s;
            }
        }
        out
    }

    /// Right-multiply by `diag(scales)`: scales column `j` by `scales[j]`.
    pub fn col_scale(&self, scales: &[f64]) -> DenseMatrix {
        assert_eq!(scales.len(), self.cols);
        let mut out = self.clone();
        for row in out.values.chunks_exact_mut(self.cols) {
            for (v, &s) in row.iter_mut().zip(scales) {
                *v *= s;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn degrees_of(adj: &DenseMatrix) -> Vec<f64> {
    (0..adj.rows()).map(|i| adj.row(i).iter().sum()).collect()
}

/// `(I + D)^{-1/2} (I + A) (I + D)^{-1/2}` from a dense 0/1 adjacency.
pub fn dense_gcn_transition(adj: &DenseMatrix) -> DenseMatrix {
    let n = adj.rows();
    let deg = degrees_of(adj);
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / (d + 1.0).sqrt()).collect();
    let with_loops = adj.add(&DenseMatrix::identity(n));
    with_loops.row_scale(&inv_sqrt).col_scale(&inv_sqrt)
}

/// Row-stochastic attention transition from a dense adjacency: a softmax of
/// `leaky([h_i || h_j] . a)` over each destination row's sources, self-loop
/// included.
pub fn dense_attention_transition(
    adj: &DenseMatrix,
    h: &DenseMatrix,
    a: &[f64],
    slope: f64,
) -> Result<DenseMatrix> {
    let n = adj.rows();
    let d = h.cols();
    if h.rows() != n {
        return Err(Error::shape("dense_attention", "feature row count mismatch"));
    }
    if a.len() != 2 * d {
        return Err(Error::shape(
            "dense_attention",
            format!("attention vector length {} for width {d}", a.len()),
        ));
    }
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        let mut sources: Vec<(usize, f64)> = Vec::new();
        for j in 0..n {
            if i == j || adj.get(i, j) != 0.0 {
                let mut z = 0.0;
                for t in 0..d {
                    z += h.get(i, t) * a[t] + h.get(j, t) * a[d + t];
                }
                sources.push((j, leaky(z, slope)));
            }
        }
        let m = sources
            .iter()
            .map(|(_, z)| *z)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (_, z) in &mut sources {
            *z = (*z - m).exp();
            sum += *z;
        }
        for (j, e) in sources {
            out.set(i, j, e / sum);
        }
    }
    Ok(out)
}

/// `(I + D)^{1/2} T_att (I + D)^{-1/2}` from a dense adjacency.
pub fn dense_att_gcn_transition(
    adj: &DenseMatrix,
    h: &DenseMatrix,
    a: &[f64],
    slope: f64,
) -> Result<DenseMatrix> {
    let t_att = dense_attention_transition(adj, h, a, slope)?;
    let deg = degrees_of(adj);
    let sqrt: Vec<f64> = deg.iter().map(|d| (d + 1.0).sqrt()).collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / (d + 1.0).sqrt()).collect();
    Ok(t_att.row_scale(&sqrt).col_scale(&inv_sqrt))
}

/// Explicit `sum over k of diag(theta[:,k]) . T^k . H` with dense powers.
pub fn dense_adaptive_diffusion(
    t: &DenseMatrix,
    theta: &DenseMatrix,
    h: &DenseMatrix,
) -> Result<DenseMatrix> {
    let n = t.rows();
    if n > DIFFUSION_CAP {
        return Err(Error::InvalidInput(format!(
            "dense diffusion refused: {n} nodes exceeds cap {DIFFUSION_CAP}"
        )));
    }
    if t.cols() != n || h.rows() != n || theta.rows() != n {
        return Err(Error::shape("dense_adaptive_diffusion", "operand shape mismatch"));
    }
    let hops = theta.cols();
    let mut out = DenseMatrix::zeros(n, h.cols());
    let mut power = h.clone();
    for k in 0..hops {
        if k > 0 {
            power = t.matmul(&power);
        }
        let weights: Vec<f64> = (0..n).map(|i| theta.get(i, k)).collect();
        out = out.add(&power.row_scale(&weights));
    }
    Ok(out)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, u)` with `a = u . diag(eigenvalues) . u^T` and
/// orthogonal `u` whose columns are the eigenvectors.
pub fn symmetric_eigen(a: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    let n = a.rows();
    if n > EIGEN_CAP {
        return Err(Error::InvalidInput(format!(
            "eigendecomposition refused: {n} nodes exceeds cap {EIGEN_CAP}"
        )));
    }
    if !a.is_symmetric(1e-10) {
        return Err(Error::InvalidInput(
            "eigendecomposition requires a symmetric matrix".into(),
        ));
    }
    let mut m = a.clone();
    let mut u = DenseMatrix::identity(n);
    let off = |m: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += m.get(i, j) * m.get(i, j);
            }
        }
        s
    };
    let scale = a.max_abs().max(1.0);
    let tol = (1e-14 * scale).powi(2) * (n * n) as f64;
    for _sweep in 0..100 {
        if off(&m) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let tau = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q of m, then the columns of u.
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let ukp = u.get(k, p);
                    let ukq = u.get(k, q);
                    u.set(k, p, c * ukp - s * ukq);
                    u.set(k, q, s * ukp + c * ukq);
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    Ok((eigenvalues, u))
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Rewrite hop weights over `T^k` as polynomial coefficients over `L^j`
/// where `L = I - T`: from `(1-x)^k = sum_j C(k,j) (-x)^j`,
/// `xi_j = (-1)^j sum_{k=j..K} C(k,j) theta_k`.
pub fn polynomial_filter_coefficients(theta: &[f64]) -> Vec<f64> {
    let kmax = theta.len();
    (0..kmax)
        .map(|j| {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * (j..kmax).map(|k| binomial(k, j) * theta[k]).sum::<f64>()
        })
        .collect()
}

/// Polynomial-filter form of scalar-weight diffusion on a symmetric `T`.
///
/// Eigendecomposes `L = I - T = U diag(lambda) U^T` and evaluates the
/// diffusion two independent ways: directly as
/// `sum_k theta_k (1 - lambda)^k` and through the rearranged coefficients
/// `sum_j xi_j lambda^j`. The two spectra must agree to 1e-8, which checks
/// the coefficient rewrite itself; the second form is applied to `h` and
/// returned.
pub fn poly_filter_reference(
    t: &DenseMatrix,
    theta: &[f64],
    h: &DenseMatrix,
) -> Result<DenseMatrix> {
    let n = t.rows();
    if !t.is_symmetric(1e-10) {
        return Err(Error::InvalidInput(
            "polynomial filter reference requires a symmetric transition".into(),
        ));
    }
    if h.rows() != n {
        return Err(Error::shape("poly_filter_reference", "feature row count mismatch"));
    }
    let laplacian = DenseMatrix::identity(n).sub(t);
    let (lambda, u) = symmetric_eigen(&laplacian)?;
    let xi = polynomial_filter_coefficients(theta);
    let mut spectrum_direct = vec![0.0; n];
    let mut spectrum_poly = vec![0.0; n];
    for (i, &lam) in lambda.iter().enumerate() {
        spectrum_direct[i] = theta
            .iter()
            .enumerate()
            .map(|(k, th)| th * (1.0 - lam).powi(k as i32))
            .sum();
        spectrum_poly[i] = xi
            .iter()
            .enumerate()
            .map(|(j, x)| x * lam.powi(j as i32))
            .sum();
    }
    let max_dev = spectrum_direct
        .iter()
        .zip(&spectrum_poly)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if max_dev > 1e-8 {
        return Err(Error::Verification(format!(
            "coefficient rewrite deviates from direct spectrum by {max_dev:.3e}"
        )));
    }
    // U . diag(spectrum) . U^T . H
    let ut_h = u.transpose().matmul(h);
    let filtered = ut_h.row_scale(&spectrum_poly);
    Ok(u.matmul(&filtered))
}

/// Reference single GCN propagation `T_gcn . (H . W)` built densely.
pub fn gcn_layer_reference(
    adj: &DenseMatrix,
    h: &DenseMatrix,
    w: &DenseMatrix,
) -> Result<DenseMatrix> {
    let n = adj.rows();
    if n > DIFFUSION_CAP {
        return Err(Error::InvalidInput(format!(
            "dense reference refused: {n} nodes exceeds cap {DIFFUSION_CAP}"
        )));
    }
    if h.rows() != n || h.cols() != w.rows() {
        return Err(Error::shape("gcn_layer_reference", "operand shape mismatch"));
    }
    Ok(dense_gcn_transition(adj).matmul(&h.matmul(w)))
}

/// Central finite differences of a scalar function with respect to one
/// tensor: perturbs each entry by ±eps and restores it afterwards.
pub fn finite_difference_grad(
    param: &Tensor,
    eps: f64,
    mut f: impl FnMut() -> f64,
) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(Error::InvalidInput("finite-difference step must be positive".into()));
    }
    let base = param.values();
    let mut grad = vec![0.0; base.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let mut bumped = base.clone();
        bumped[i] = base[i] + eps;
        param.set_values(&bumped)?;
        let plus = f();
        bumped[i] = base[i] - eps;
        param.set_values(&bumped)?;
        let minus = f();
        param.set_values(&base)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "finite-difference evaluation non-finite at entry {i}"
            )));
        }
        *g = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Relative mismatch between two gradient estimates: `|a-b|` divided by
/// `max(|a|, |b|, floor)` so entries near zero compare absolutely.
pub fn gradient_mismatch(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
