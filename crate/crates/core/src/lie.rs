//! Lie parameters, the skew-symmetric algebra element built from them, and
//! the matrix exponential that turns that element into an orthogonal matrix.
//!
//! The exponential evaluates a degree-18 truncated Taylor polynomial with a
//! grouped multiplication schedule (precomputed powers A^2, A^3, A^6 and a
//! Horner sweep in A^6), wrapped in scaling-and-squaring so large parameters
//! stay inside the polynomial's accurate range. The backward pass
//! differentiates exactly the sequence of products the forward pass ran, so
//! the two sides always agree with finite differences.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Trainable parameters: the strictly-lower-triangular entries of the first
/// `k` columns of an `m` x `m` matrix, packed column by column.
///
/// Entry (i, j) with i > j and j < k lives at
/// `offset(j) + i - j - 1` where `offset(j) = j*m - j - j*(j-1)/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LieParams {
    m: usize,
    k: usize,
    values: Vec<f64>,
}

/// Packed value count for ambient dimension `m` and `k` active columns.
pub fn packed_len(m: usize, k: usize) -> usize {
    k * m - k * (k + 1) / 2
}

impl LieParams {
    /// All-zero parameters. Requires `1 <= k <= m`.
    pub fn zeros(m: usize, k: usize) -> Result<LieParams> {
        if k < 1 || k > m {
            return Err(Error::InvalidDimensions {
                what: "lie parameters",
                detail: format!("need 1 <= k <= m, got m={m} k={k}"),
            });
        }
        Ok(LieParams { m, k, values: vec![0.0; packed_len(m, k)] })
    }

    /// Builds parameters from a packed value array.
    pub fn from_values(m: usize, k: usize, values: Vec<f64>) -> Result<LieParams> {
        if k < 1 || k > m {
            return Err(Error::InvalidDimensions {
                what: "lie parameters",
                detail: format!("need 1 <= k <= m, got m={m} k={k}"),
            });
        }
        let expect = packed_len(m, k);
        if values.len() != expect {
            return Err(Error::InvalidDimensions {
                what: "lie parameters",
                detail: format!("m={m} k={k} needs {expect} packed values, got {}", values.len()),
            });
        }
        Ok(LieParams { m, k, values })
    }

    /// Uniform random parameters with entries in [lo, hi).
    pub fn random_uniform(rng: &mut Rng, m: usize, k: usize, lo: f64, hi: f64) -> Result<LieParams> {
        let mut lp = LieParams::zeros(m, k)?;
        for v in &mut lp.values {
            *v = rng.uniform_in(lo, hi);
        }
        Ok(lp)
    }

    /// Gaussian random parameters with standard deviation `std`.
    pub fn random_gaussian(rng: &mut Rng, m: usize, k: usize, std: f64) -> Result<LieParams> {
        let mut lp = LieParams::zeros(m, k)?;
        for v in &mut lp.values {
            *v = rng.normal() * std;
        }
        Ok(lp)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Packed index of entry (i, j); requires i > j and j < k.
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(j < self.k && i > j && i < self.m);
        // columns 0..j hold packed_len(m, j) values in total
        packed_len(self.m, j) + i - j - 1
    }

    /// (row, col) position of packed index `idx`.
    pub fn position(&self, idx: usize) -> (usize, usize) {
        let mut j = 0;
        let mut off = 0;
        loop {
            let len = self.m - j - 1;
            if idx < off + len {
                return (idx - off + j + 1, j);
            }
            off += len;
            j += 1;
        }
    }
}

/// Expands packed parameters into the full strictly-lower-triangular matrix.
pub fn unpack(lp: &LieParams) -> Matrix {
    let mut out = Matrix::zeros(lp.m, lp.m);
    let mut idx = 0;
    for j in 0..lp.k {
        for i in j + 1..lp.m {
            out.set(i, j, lp.values[idx]);
            idx += 1;
        }
    }
    out
}

/// Skew-symmetric Lie-algebra element; `A^T = -A` holds bit-exactly because
/// the matrix is assembled from the packed triangle, never projected.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewSymmetric {
    m: usize,
    matrix: Matrix,
}

impl SkewSymmetric {
    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Wraps an existing matrix, checking exact skew-symmetry.
    pub fn from_matrix(matrix: Matrix) -> Result<SkewSymmetric> {
        let (r, c) = matrix.shape();
        if r != c {
            return Err(Error::NonSquare { op: "skew-symmetric", rows: r, cols: c });
        }
        for i in 0..r {
            for j in 0..r {
                if matrix.get(i, j) != -matrix.get(j, i) {
                    return Err(Error::InvalidDimensions {
                        what: "skew-symmetric matrix",
                        detail: format!("entry ({i},{j}) breaks A^T = -A"),
                    });
                }
            }
        }
        Ok(SkewSymmetric { m: r, matrix })
    }
}

/// Builds the algebra element `A = L - L^T` from packed parameters.
pub fn lie_to_skew(lp: &LieParams) -> SkewSymmetric {
    let mut a = Matrix::zeros(lp.m, lp.m);
    let mut idx = 0;
    for j in 0..lp.k {
        for i in j + 1..lp.m {
            let v = lp.values[idx];
            a.set(i, j, v);
            a.set(j, i, -v);
            idx += 1;
        }
    }
    debug_assert!({
        let defect = a.add(&a.transpose()).unwrap().max_abs();
        defect == 0.0
    });
    SkewSymmetric { m: lp.m, matrix: a }
}

/// Configuration for the truncated-Taylor matrix exponential.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpmConfig {
    /// Highest retained power of the Taylor series (terms 0..=degree).
    pub taylor_degree: usize,
    /// 1-norm above which the input is scaled down by powers of two.
    pub scale_threshold: f64,
    /// Upper bound on the number of squarings.
    pub max_squarings: u32,
}

impl Default for ExpmConfig {
    fn default() -> Self {
        ExpmConfig { taylor_degree: 18, scale_threshold: 1.0, max_squarings: 32 }
    }
}

impl ExpmConfig {
    /// Bare truncated series with scaling disabled; accurate only while the
    /// input norm stays small.
    pub fn strict_taylor() -> Self {
        ExpmConfig { taylor_degree: 18, scale_threshold: f64::INFINITY, max_squarings: 0 }
    }
}

/// Everything the backward pass needs to replay the forward product sequence.
#[derive(Debug, Clone)]
pub struct ExpmTrace {
    squarings: u32,
    degree: usize,
    scaled: Matrix,          // B = A / 2^s
    pow2: Matrix,            // B^2
    pow3: Matrix,            // B^3
    pow6: Matrix,            // B^6
    high_parts: Vec<Option<Matrix>>, // E_i, the cubic-part coefficients per block
    horner: Vec<Matrix>,     // X_1 .. X_{nb-1}
    squares: Vec<Matrix>,    // P_0 .. P_{s-1}
    result: Matrix,
}

impl ExpmTrace {
    pub fn result(&self) -> &Matrix {
        &self.result
    }

    pub fn squarings(&self) -> u32 {
        self.squarings
    }
}

fn taylor_coefficients(degree: usize) -> Vec<f64> {
    let mut c = Vec::with_capacity(degree + 1);
    c.push(1.0);
    for n in 1..=degree {
        let prev = c[n - 1];
        c.push(prev / n as f64);
    }
    c
}

fn squaring_count(norm: f64, cfg: &ExpmConfig) -> Result<u32> {
    if !norm.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "matrix exponential input has non-finite 1-norm {norm}"
        )));
    }
    if norm <= cfg.scale_threshold {
        return Ok(0);
    }
    let s = (norm / cfg.scale_threshold).log2().ceil() as u32;
    if s > cfg.max_squarings {
        return Err(Error::SquaringOverflow { needed: s, max: cfg.max_squarings, norm });
    }
    Ok(s)
}

/// Exponential of a general square matrix by the grouped truncated Taylor
/// polynomial with scaling-and-squaring.
pub fn expm_square(a: &Matrix, cfg: &ExpmConfig) -> Result<Matrix> {
    Ok(expm_square_trace(a, cfg)?.result)
}

/// Same as [`expm_square`] but also returns the forward intermediates, for
/// consumption by the backward pass.
pub fn expm_square_trace(a: &Matrix, cfg: &ExpmConfig) -> Result<ExpmTrace> {
    let (r, c) = a.shape();
    if r != c {
        return Err(Error::NonSquare { op: "expm", rows: r, cols: c });
    }
    if cfg.taylor_degree < 1 {
        return Err(Error::InvalidArgument("taylor_degree must be >= 1".into()));
    }
    let s = squaring_count(a.one_norm(), cfg)?;
    let scaled = a.scale(0.5f64.powi(s as i32));
    let coeff = taylor_coefficients(cfg.taylor_degree);

    let pow2 = scaled.matmul(&scaled)?;
    let pow3 = pow2.matmul(&scaled)?;
    let pow6 = pow3.matmul(&pow3)?;

    // Polynomial in blocks of six: sum_i C_i * (B^6)^i with
    // C_i = D_i + E_i * B^3, where D_i and E_i are quadratic in B.
    let n_blocks = cfg.taylor_degree / 6 + 1;
    let quad = |c0: Option<f64>, c1: Option<f64>, c2: Option<f64>| -> Option<Matrix> {
        if c0.is_none() && c1.is_none() && c2.is_none() {
            return None;
        }
        let mut acc = Matrix::zeros(r, r);
        if let Some(c0) = c0 {
            for i in 0..r {
                acc.set(i, i, c0);
            }
        }
        if let Some(c1) = c1 {
            acc.add_scaled(&scaled, c1).unwrap();
        }
        if let Some(c2) = c2 {
            acc.add_scaled(&pow2, c2).unwrap();
        }
        Some(acc)
    };
    let coeff_at = |n: usize| -> Option<f64> {
        if n <= cfg.taylor_degree {
            Some(coeff[n])
        } else {
            None
        }
    };

    let mut blocks = Vec::with_capacity(n_blocks);
    let mut high_parts = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        let base = 6 * b;
        let low = quad(coeff_at(base), coeff_at(base + 1), coeff_at(base + 2));
        let high = quad(coeff_at(base + 3), coeff_at(base + 4), coeff_at(base + 5));
        let mut block = low.unwrap_or_else(|| Matrix::zeros(r, r));
        if let Some(e) = &high {
            block = block.add(&e.matmul(&pow3)?)?;
        }
        blocks.push(block);
        high_parts.push(high);
    }

    // Horner sweep in B^6, recording the partial results the adjoint needs.
    let mut x = blocks.pop().expect("at least one block");
    let mut horner = Vec::with_capacity(n_blocks.saturating_sub(1));
    for block in blocks.into_iter().rev() {
        horner.push(x.clone());
        x = x.matmul(&pow6)?.add(&block)?;
    }
    horner.reverse(); // horner[i] = X_{i+1}

    let mut squares = Vec::with_capacity(s as usize);
    let mut result = x;
    for _ in 0..s {
        squares.push(result.clone());
        result = result.matmul(&result)?;
    }

    Ok(ExpmTrace {
        squarings: s,
        degree: cfg.taylor_degree,
        scaled,
        pow2,
        pow3,
        pow6,
        high_parts,
        horner,
        squares,
        result,
    })
}

/// Vector-Jacobian product of the exponential: reverse-differentiates the
/// exact product sequence recorded in `trace`.
pub fn expm_vjp(trace: &ExpmTrace, upstream: &Matrix) -> Result<Matrix> {
    let shape = trace.result.shape();
    if upstream.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "expm_vjp",
            left: shape,
            right: upstream.shape(),
        });
    }
    let coeff = taylor_coefficients(trace.degree);
    let n_blocks = trace.degree / 6 + 1;

    // Undo the squaring chain: P_{t+1} = P_t P_t.
    let mut grad = upstream.clone();
    for p in trace.squares.iter().rev() {
        let pt = p.transpose();
        grad = grad.matmul(&pt)?.add(&pt.matmul(&grad)?)?;
    }

    // Undo the Horner sweep: X_i = X_{i+1} B^6 + C_i for i = nb-2 .. 0.
    let pow6_t = trace.pow6.transpose();
    let mut d_pow6 = Matrix::zeros(shape.0, shape.1);
    let mut d_blocks = Vec::with_capacity(n_blocks);
    let mut d_x = grad;
    for x_next in &trace.horner {
        d_blocks.push(d_x.clone());
        d_pow6 = d_pow6.add(&x_next.transpose().matmul(&d_x)?)?;
        d_x = d_x.matmul(&pow6_t)?;
    }
    d_blocks.push(d_x); // gradient of the top block

    // Per block: C_i = D_i + E_i B^3 with D_i, E_i quadratic in B.
    let scaled_t = trace.scaled.transpose();
    let pow3_t = trace.pow3.transpose();
    let mut d_pow3 = Matrix::zeros(shape.0, shape.1);
    let mut d_pow2 = Matrix::zeros(shape.0, shape.1);
    let mut d_scaled = Matrix::zeros(shape.0, shape.1);
    let coeff_at = |n: usize| -> Option<f64> {
        if n <= trace.degree {
            Some(coeff[n])
        } else {
            None
        }
    };
    for (b, d_c) in d_blocks.iter().enumerate() {
        let base = 6 * b;
        if let Some(c1) = coeff_at(base + 1) {
            d_scaled.add_scaled(d_c, c1)?;
        }
        if let Some(c2) = coeff_at(base + 2) {
            d_pow2.add_scaled(d_c, c2)?;
        }
        if let Some(e) = &trace.high_parts[b] {
            // F = E B^3: dE = dF B^3t, dB3 += Et dF; E is quadratic in B.
            let d_e = d_c.matmul(&pow3_t)?;
            d_pow3 = d_pow3.add(&e.transpose().matmul(d_c)?)?;
            if let Some(c4) = coeff_at(base + 4) {
                d_scaled.add_scaled(&d_e, c4)?;
            }
            if let Some(c5) = coeff_at(base + 5) {
                d_pow2.add_scaled(&d_e, c5)?;
            }
        }
    }

    // B^6 = B^3 B^3
    d_pow3 = d_pow3
        .add(&d_pow6.matmul(&pow3_t)?)?
        .add(&pow3_t.matmul(&d_pow6)?)?;
    // B^3 = B^2 B
    d_pow2 = d_pow2.add(&d_pow3.matmul(&scaled_t)?)?;
    d_scaled = d_scaled.add(&trace.pow2.transpose().matmul(&d_pow3)?)?;
    // B^2 = B B
    d_scaled = d_scaled
        .add(&d_pow2.matmul(&scaled_t)?)?
        .add(&scaled_t.matmul(&d_pow2)?)?;
    // B = A / 2^s
    Ok(d_scaled.scale(0.5f64.powi(trace.squarings as i32)))
}

/// Orthogonal matrix `exp(A)` for a skew-symmetric input.
pub fn expm(a: &SkewSymmetric, cfg: &ExpmConfig) -> Result<Matrix> {
    expm_square(a.matrix(), cfg)
}

/// Adjoint of [`expm`] with respect to the algebra element: given the
/// gradient of some scalar loss in the exponential's output, returns the
/// gradient with respect to `A` through the same truncation and squarings
/// the forward pass used.
pub fn expm_grad(a: &SkewSymmetric, upstream: &Matrix, cfg: &ExpmConfig) -> Result<Matrix> {
    let trace = expm_square_trace(a.matrix(), cfg)?;
    expm_vjp(&trace, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::random_gaussian;

    /// Independent exponential oracle: plain term-by-term Taylor summation
    /// (no grouping) with its own scaling-and-squaring.
    fn expm_oracle(a: &Matrix, degree: usize, threshold: f64) -> Matrix {
        let n = a.rows();
        let norm = a.one_norm();
        let s = if norm > threshold {
            (norm / threshold).log2().ceil() as i32
        } else {
            0
        };
        let b = a.scale(0.5f64.powi(s));
        let mut sum = Matrix::identity(n);
        let mut term = Matrix::identity(n);
        for step in 1..=degree {
            term = term.matmul(&b).unwrap().scale(1.0 / step as f64);
            sum = sum.add(&term).unwrap();
        }
        for _ in 0..s {
            sum = sum.matmul(&sum).unwrap();
        }
        sum
    }

    /// Determinant by LU with partial pivoting; test-only oracle.
    fn det_oracle(a: &Matrix) -> f64 {
        let n = a.rows();
        let mut lu = a.clone();
        let mut det = 1.0;
        for col in 0..n {
            let mut pivot = col;
            for r in col + 1..n {
                if lu.get(r, col).abs() > lu.get(pivot, col).abs() {
                    pivot = r;
                }
            }
            if pivot != col {
                for c in 0..n {
                    let tmp = lu.get(col, c);
                    lu.set(col, c, lu.get(pivot, c));
                    lu.set(pivot, c, tmp);
                }
                det = -det;
            }
            let p = lu.get(col, col);
            if p == 0.0 {
                return 0.0;
            }
            det *= p;
            for r in col + 1..n {
                let f = lu.get(r, col) / p;
                for c in col..n {
                    lu.set(r, c, lu.get(r, c) - f * lu.get(col, c));
                }
            }
        }
        det
    }

    fn random_skew(rng: &mut Rng, m: usize, lo: f64, hi: f64) -> SkewSymmetric {
        lie_to_skew(&LieParams::random_uniform(rng, m, m, lo, hi).unwrap())
    }

    #[test]
    fn packed_len_formula() {
        assert_eq!(packed_len(2, 1), 1);
        assert_eq!(packed_len(3, 1), 2);
        assert_eq!(packed_len(3, 3), 3);
        assert_eq!(packed_len(64, 64), 2016);
        // enumeration oracle
        for m in 1..10 {
            for k in 1..=m {
                let count = (0..k).map(|j| m - j - 1).sum::<usize>();
                assert_eq!(packed_len(m, k), count);
            }
        }
    }

    #[test]
    fn unpack_layout() {
        let lp = LieParams::from_values(2, 1, vec![0.5]).unwrap();
        let l = unpack(&lp);
        assert_eq!(l, Matrix::from_rows(&[&[0.0, 0.0], &[0.5, 0.0]]).unwrap());

        let lp = LieParams::zeros(3, 3).unwrap();
        assert_eq!(unpack(&lp), Matrix::zeros(3, 3));

        // m=3, k=1: values fill column 0 rows 1..3
        let lp = LieParams::from_values(3, 1, vec![1.0, 2.0]).unwrap();
        let l = unpack(&lp);
        let expected =
            Matrix::from_rows(&[&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(l, expected);
    }

    #[test]
    fn unpack_matches_index_enumeration() {
        let mut rng = Rng::new(17);
        let lp = LieParams::random_uniform(&mut rng, 7, 4, -1.0, 1.0).unwrap();
        let l = unpack(&lp);
        for i in 0..7 {
            for j in 0..7 {
                let expect = if i > j && j < 4 {
                    lp.values()[lp.index(i, j)]
                } else {
                    0.0
                };
                assert_eq!(l.get(i, j), expect);
            }
        }
        // position() is the inverse of index()
        for idx in 0..lp.values().len() {
            let (i, j) = lp.position(idx);
            assert_eq!(lp.index(i, j), idx);
        }
    }

    #[test]
    fn lie_to_skew_cases() {
        let zero = LieParams::zeros(4, 2).unwrap();
        assert_eq!(lie_to_skew(&zero).matrix(), &Matrix::zeros(4, 4));

        let lp = LieParams::from_values(2, 1, vec![0.7]).unwrap();
        let a = lie_to_skew(&lp);
        assert_eq!(
            a.matrix(),
            &Matrix::from_rows(&[&[0.0, -0.7], &[0.7, 0.0]]).unwrap()
        );
    }

    #[test]
    fn skew_identity_holds_exactly() {
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let m = 2 + rng.below(12);
            let k = 1 + rng.below(m);
            let lp = LieParams::random_uniform(&mut rng, m, k, -5.0, 5.0).unwrap();
            let a = lie_to_skew(&lp);
            let defect = a.matrix().add(&a.matrix().transpose()).unwrap().max_abs();
            assert_eq!(defect, 0.0);
        }
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let a = lie_to_skew(&LieParams::zeros(5, 5).unwrap());
        let u = expm(&a, &ExpmConfig::default()).unwrap();
        assert_eq!(u, Matrix::identity(5));
    }

    #[test]
    fn expm_matches_closed_form_rotation() {
        // A = [[0, -t], [t, 0]] exponentiates to the rotation by t.
        let theta = std::f64::consts::FRAC_PI_2;
        let lp = LieParams::from_values(2, 1, vec![theta]).unwrap();
        let u = expm(&lie_to_skew(&lp), &ExpmConfig::default()).unwrap();
        let expected = Matrix::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]).unwrap();
        assert!(u.max_abs_diff(&expected) < 1e-12, "diff {}", u.max_abs_diff(&expected));
    }

    #[test]
    fn expm_matches_degree_30_oracle() {
        let mut rng = Rng::new(21);
        let a = random_skew(&mut rng, 16, -2.0, 2.0);
        let fast = expm(&a, &ExpmConfig::default()).unwrap();
        let reference = expm_oracle(a.matrix(), 30, 1.0);
        assert!(fast.max_abs_diff(&reference) < 1e-9);
    }

    #[test]
    fn expm_rejects_non_square() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(
            expm_square(&a, &ExpmConfig::default()),
            Err(Error::NonSquare { .. })
        ));
    }

    #[test]
    fn expm_overflow_error_when_squarings_exceeded() {
        let mut cfg = ExpmConfig::default();
        cfg.max_squarings = 2;
        let lp = LieParams::from_values(2, 1, vec![1.0e9]).unwrap();
        let err = expm(&lie_to_skew(&lp), &cfg).unwrap_err();
        assert!(matches!(err, Error::SquaringOverflow { .. }), "{err}");
    }

    #[test]
    fn orthogonality_over_random_parameters() {
        let mut rng = Rng::new(77);
        for &m in &[2, 5, 16, 64] {
            let lp = LieParams::random_uniform(&mut rng, m, m, -5.0, 5.0).unwrap();
            let u = expm(&lie_to_skew(&lp), &ExpmConfig::default()).unwrap();
            let gram = u.transpose().matmul(&u).unwrap();
            let defect = gram.max_abs_diff(&Matrix::identity(m));
            assert!(defect < 1e-10, "m={m} defect {defect:.3e}");
        }
    }

    #[test]
    fn determinant_is_plus_one() {
        let mut rng = Rng::new(6);
        for m in 1..=8 {
            let lp = LieParams::random_uniform(&mut rng, m, m.max(1), -3.0, 3.0).unwrap();
            let u = expm(&lie_to_skew(&lp), &ExpmConfig::default()).unwrap();
            let det = det_oracle(&u);
            assert!((det - 1.0).abs() < 1e-8, "m={m} det {det}");
        }
    }

    #[test]
    fn inverse_is_exponential_of_negation() {
        let mut rng = Rng::new(13);
        let a = random_skew(&mut rng, 9, -2.0, 2.0);
        let cfg = ExpmConfig::default();
        let u = expm(&a, &cfg).unwrap();
        let u_inv = expm_square(&a.matrix().scale(-1.0), &cfg).unwrap();
        let prod = u_inv.matmul(&u).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(9)) < 1e-10);
    }

    #[test]
    fn truncation_matches_oracle_inside_unit_ball() {
        // With scaling disabled and small norm, degree 18 is already at
        // machine precision against the degree-30 reference.
        let mut rng = Rng::new(31);
        for _ in 0..5 {
            let m = 3 + rng.below(8);
            let mut a = random_skew(&mut rng, m, -1.0, 1.0);
            let norm = a.matrix().one_norm();
            if norm > 1.0 {
                a = SkewSymmetric::from_matrix(a.matrix().scale(0.9 / norm)).unwrap();
            }
            let strict = ExpmConfig::strict_taylor();
            let fast = expm(&a, &strict).unwrap();
            let reference = expm_oracle(a.matrix(), 30, f64::INFINITY);
            assert!(fast.max_abs_diff(&reference) < 1e-13);
        }
    }

    #[test]
    fn grad_of_zero_upstream_is_zero() {
        let mut rng = Rng::new(8);
        let a = random_skew(&mut rng, 5, -1.0, 1.0);
        let g = expm_grad(&a, &Matrix::zeros(5, 5), &ExpmConfig::default()).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn grad_matches_scalar_calculus() {
        // 1x1 case: d/da exp(a) = exp(a).
        let a = Matrix::from_vec(1, 1, vec![0.37]).unwrap();
        let cfg = ExpmConfig::default();
        let trace = expm_square_trace(&a, &cfg).unwrap();
        let g = expm_vjp(&trace, &Matrix::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        let expect = 0.37f64.exp();
        assert!((g.get(0, 0) - expect).abs() < 1e-12);
        assert!((trace.result().get(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn grad_matches_finite_differences_on_matrix_entries() {
        // Perturb general (non-skew) entries so the test covers the full
        // Jacobian of the square-matrix path.
        let mut rng = Rng::new(40);
        let cfg = ExpmConfig::default();
        for &m in &[2, 6] {
            let a = random_gaussian(&mut rng, m, m, 0.8).unwrap();
            let upstream = random_gaussian(&mut rng, m, m, 1.0).unwrap();
            let trace = expm_square_trace(&a, &cfg).unwrap();
            let grad = expm_vjp(&trace, &upstream).unwrap();
            let h = 1e-6;
            for i in 0..m {
                for j in 0..m {
                    let mut plus = a.clone();
                    plus.set(i, j, plus.get(i, j) + h);
                    let mut minus = a.clone();
                    minus.set(i, j, minus.get(i, j) - h);
                    let loss = |mat: &Matrix| -> f64 {
                        let e = expm_square(mat, &cfg).unwrap();
                        e.data().iter().zip(upstream.data()).map(|(x, u)| x * u).sum()
                    };
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let ad = grad.get(i, j);
                    let denom = fd.abs().max(ad.abs()).max(1e-6);
                    assert!(
                        ((fd - ad) / denom).abs() < 1e-5,
                        "m={m} entry ({i},{j}): fd {fd} ad {ad}"
                    );
                }
            }
        }
    }

    #[test]
    fn grad_matches_finite_differences_through_packing() {
        let mut rng = Rng::new(55);
        let cfg = ExpmConfig::default();
        for &(m, k) in &[(4usize, 4usize), (10, 3)] {
            let lp = LieParams::random_uniform(&mut rng, m, k, -1.5, 1.5).unwrap();
            let upstream = random_gaussian(&mut rng, m, m, 1.0).unwrap();
            let d_a = expm_grad(&lie_to_skew(&lp), &upstream, &cfg).unwrap();
            let h = 1e-6;
            for idx in 0..lp.values().len() {
                let (i, j) = lp.position(idx);
                let ad = d_a.get(i, j) - d_a.get(j, i);
                let eval = |delta: f64| -> f64 {
                    let mut p = lp.clone();
                    p.values_mut()[idx] += delta;
                    let u = expm(&lie_to_skew(&p), &cfg).unwrap();
                    u.data().iter().zip(upstream.data()).map(|(x, g)| x * g).sum()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let denom = fd.abs().max(ad.abs()).max(1e-6);
                assert!(
                    ((fd - ad) / denom).abs() < 1e-5,
                    "m={m} k={k} packed {idx}: fd {fd} ad {ad}"
                );
            }
        }
    }

    #[test]
    fn norm_preserved_by_orthogonal_product() {
        let mut rng = Rng::new(90);
        let u = expm(&random_skew(&mut rng, 12, -3.0, 3.0), &ExpmConfig::default()).unwrap();
        let x = random_gaussian(&mut rng, 12, 1, 1.0).unwrap();
        let y = u.matmul(&x).unwrap();
        let rel = (crate::matrix::l2_norm(y.data()) - crate::matrix::l2_norm(x.data())).abs()
            / crate::matrix::l2_norm(x.data());
        assert!(rel < 1e-12);
    }
}
