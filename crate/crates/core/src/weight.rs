//! Rectangular weights with orthonormal columns, built from Lie parameters.
//!
//! The orthogonal matrix is always constructed in the larger of the two
//! dimensions; the excess columns are discarded and the kept block is
//! oriented so the weight maps fan-in vectors (length `m`) to fan-out
//! vectors (length `k`). Tall maps (`m > k`) project and therefore shrink
//! vectors, so their outputs are renormalized row by row; wide maps
//! (`m <= k`) embed and preserve the norm exactly.

use crate::error::{Error, Result};
use crate::lie::{expm, lie_to_skew, packed_len, ExpmConfig, LieParams};
use crate::matrix::{l2_norm, Matrix, Tensor4};

/// How the four filter dimensions map onto the flattened weight shape (m, k).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mapping {
    /// m = c_in * d_H * d_W (fan-in), k = c_out (fan-out). The default.
    FanInToFanOut,
    /// Explicit shape; `m * k` must equal the filter element count.
    Custom { m: usize, k: usize },
}

/// Filter dimensions plus the chosen flattening.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterSpec {
    pub c_out: usize,
    pub c_in: usize,
    pub d_h: usize,
    pub d_w: usize,
    pub mapping: Mapping,
}

impl FilterSpec {
    /// Default fan-in/fan-out mapping for a (c_out, c_in, d_H, d_W) filter.
    pub fn new(c_out: usize, c_in: usize, d_h: usize, d_w: usize) -> Result<FilterSpec> {
        let spec = FilterSpec { c_out, c_in, d_h, d_w, mapping: Mapping::FanInToFanOut };
        spec.validate()?;
        Ok(spec)
    }

    /// Same dimensions under an explicit (m, k) flattening.
    pub fn with_custom_mapping(
        c_out: usize,
        c_in: usize,
        d_h: usize,
        d_w: usize,
        m: usize,
        k: usize,
    ) -> Result<FilterSpec> {
        let spec = FilterSpec { c_out, c_in, d_h, d_w, mapping: Mapping::Custom { m, k } };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.c_out < 1 || self.c_in < 1 || self.d_h < 1 || self.d_w < 1 {
            return Err(Error::InvalidDimensions {
                what: "filter spec",
                detail: format!(
                    "all dims must be >= 1, got ({}, {}, {}, {})",
                    self.c_out, self.c_in, self.d_h, self.d_w
                ),
            });
        }
        let (m, k) = self.weight_shape();
        if m < 1 || k < 1 || m * k != self.element_count() {
            return Err(Error::InvalidDimensions {
                what: "filter spec",
                detail: format!(
                    "mapping ({m} x {k}) does not cover {} filter values",
                    self.element_count()
                ),
            });
        }
        Ok(())
    }

    /// Total filter element count c_out * c_in * d_H * d_W.
    pub fn element_count(&self) -> usize {
        self.c_out * self.c_in * self.d_h * self.d_w
    }

    /// Flattened weight shape (m = fan-in rows, k = fan-out columns).
    pub fn weight_shape(&self) -> (usize, usize) {
        match self.mapping {
            Mapping::FanInToFanOut => (self.c_in * self.d_h * self.d_w, self.c_out),
            Mapping::Custom { m, k } => (m, k),
        }
    }

    /// Dimensions of the Lie parameter block that generates this weight:
    /// ambient dimension max(m, k), active columns min(m, k).
    pub fn lie_shape(&self) -> (usize, usize) {
        let (m, k) = self.weight_shape();
        (m.max(k), m.min(k))
    }

    /// Packed trainable value count for this spec.
    pub fn param_count(&self) -> usize {
        let (lm, lk) = self.lie_shape();
        packed_len(lm, lk)
    }
}

/// Geometric regime of a rectangular unitary weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightCase {
    /// Fan-in exceeds fan-out: outputs live on a lower-dimensional subspace
    /// and are renormalized.
    Project,
    /// Fan-in at most fan-out: an isometric embedding, no normalization.
    Isometry,
}

/// A rectangular slice of an orthogonal matrix, oriented fan-in x fan-out.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryWeight {
    w: Matrix,
    case: WeightCase,
    source_dim: usize,
}

impl UnitaryWeight {
    /// The m x k weight; rows index fan-in, columns index fan-out.
    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    pub fn case(&self) -> WeightCase {
        self.case
    }

    /// Dimension of the square orthogonal matrix this was cut from.
    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols()
    }

    /// Wraps an already-materialized weight matrix (used when loading cached
    /// models); the caller vouches for orthonormality.
    pub fn from_cached(w: Matrix) -> UnitaryWeight {
        let case = weight_case(w.rows(), w.cols());
        let source_dim = w.rows().max(w.cols());
        UnitaryWeight { w, case, source_dim }
    }
}

/// Case split on (fan-in, fan-out).
pub fn weight_case(m: usize, k: usize) -> WeightCase {
    if m > k {
        WeightCase::Project
    } else {
        WeightCase::Isometry
    }
}

/// Builds the rectangular unitary weight for `spec` from packed parameters.
///
/// The orthogonal matrix is constructed in dimension max(m, k); its first
/// min(m, k) columns are kept and the block is oriented so that row vectors
/// of length m map to row vectors of length k.
pub fn build_weight(lp: &LieParams, spec: &FilterSpec, cfg: &ExpmConfig) -> Result<UnitaryWeight> {
    let (m, k) = spec.weight_shape();
    let (lie_m, lie_k) = spec.lie_shape();
    if lp.m() != lie_m || lp.k() != lie_k {
        return Err(Error::InvalidDimensions {
            what: "lie parameters for weight",
            detail: format!(
                "spec needs ambient {lie_m} with {lie_k} active columns, got {} and {}",
                lp.m(),
                lp.k()
            ),
        });
    }
    let u = expm(&lie_to_skew(lp), cfg)?;
    let kept = u.take_cols(lie_k)?;
    let w = if m > k { kept } else { kept.transpose() };
    debug_assert_eq!(w.shape(), (m, k));
    Ok(UnitaryWeight { w, case: weight_case(m, k), source_dim: lie_m })
}

/// Policy for rows whose mapped output has zero norm in the Project case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ZeroNormPolicy {
    /// Add eps^2 under the square root so the division is always defined.
    EpsilonGuard(f64),
    /// Fail with an error naming the offending row.
    Error,
}

/// Options for [`apply_weight_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApplyOptions {
    pub zero_norm: ZeroNormPolicy,
    /// Rescale normalized rows by the input row's norm instead of leaving
    /// them at unit length. Off by default.
    pub preserve_input_norm: bool,
}

impl Default for ApplyOptions {
    fn default() -> Self {
        ApplyOptions { zero_norm: ZeroNormPolicy::EpsilonGuard(1e-12), preserve_input_norm: false }
    }
}

/// Guarded Euclidean norm used by the Project-case normalization.
pub fn guarded_norm(row: &[f64], eps: f64) -> f64 {
    (row.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt()
}

/// Maps each row of `x` through the weight with default options.
pub fn apply_weight(w: &UnitaryWeight, x: &Matrix) -> Result<Matrix> {
    apply_weight_with(w, x, &ApplyOptions::default())
}

/// Maps each row of `x` (length fan-in) through the weight. In the Project
/// case every output row is divided by its own Euclidean norm; the Isometry
/// case needs no normalization because the embedding already preserves norms.
pub fn apply_weight_with(w: &UnitaryWeight, x: &Matrix, opts: &ApplyOptions) -> Result<Matrix> {
    if x.cols() != w.fan_in() {
        return Err(Error::ShapeMismatch {
            op: "apply_weight",
            left: x.shape(),
            right: w.w.shape(),
        });
    }
    let mut y = x.matmul(&w.w)?;
    if w.case == WeightCase::Project {
        for r in 0..y.rows() {
            let raw = l2_norm(y.row(r));
            let scale = match opts.zero_norm {
                ZeroNormPolicy::EpsilonGuard(eps) => guarded_norm(y.row(r), eps),
                ZeroNormPolicy::Error => {
                    if raw == 0.0 {
                        return Err(Error::ZeroNormRow { row: r });
                    }
                    raw
                }
            };
            if opts.preserve_input_norm {
                let factor = l2_norm(x.row(r)) / scale;
                for v in y.row_mut(r) {
                    *v *= factor;
                }
            } else {
                for v in y.row_mut(r) {
                    *v /= scale;
                }
            }
        }
    }
    Ok(y)
}

/// Reshapes the weight into the (c_out, c_in, d_H, d_W) filter tensor.
///
/// Weight entry (r, c) lands at flat tensor offset `c * m + r`; for the
/// fan-in/fan-out mapping this is filter (o, i, p, q) =
/// `w[i*dH*dW + p*dW + q][o]`.
pub fn reshape_to_filters(w: &UnitaryWeight, spec: &FilterSpec) -> Result<Tensor4> {
    let (m, k) = spec.weight_shape();
    if w.w.shape() != (m, k) {
        return Err(Error::ShapeMismatch {
            op: "reshape_to_filters",
            left: w.w.shape(),
            right: (m, k),
        });
    }
    let mut data = vec![0.0; spec.element_count()];
    for r in 0..m {
        for c in 0..k {
            data[c * m + r] = w.w.get(r, c);
        }
    }
    Tensor4::from_vec(spec.c_out, spec.c_in, spec.d_h, spec.d_w, data)
}

/// Inverse of [`reshape_to_filters`]: flattens a filter tensor into the
/// m x k weight matrix under the spec's mapping.
pub fn flatten_filters(filters: &Tensor4, spec: &FilterSpec) -> Result<Matrix> {
    let dims = filters.dims();
    if dims != (spec.c_out, spec.c_in, spec.d_h, spec.d_w) {
        return Err(Error::InvalidDimensions {
            what: "filter tensor",
            detail: format!(
                "got {:?}, spec says ({}, {}, {}, {})",
                dims, spec.c_out, spec.c_in, spec.d_h, spec.d_w
            ),
        });
    }
    let (m, k) = spec.weight_shape();
    let mut w = Matrix::zeros(m, k);
    let data = filters.data();
    for c in 0..k {
        for r in 0..m {
            w.set(r, c, data[c * m + r]);
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::random_gaussian;
    use crate::rng::Rng;

    fn unit_cfg() -> ExpmConfig {
        ExpmConfig::default()
    }

    #[test]
    fn identity_projection_keeps_leading_coordinates() {
        // lp = 0 gives U = I, so the map keeps the first k coordinates.
        let spec = FilterSpec::with_custom_mapping(2, 1, 1, 3, 3, 2).unwrap();
        let lp = LieParams::zeros(3, 2).unwrap();
        let w = build_weight(&lp, &spec, &unit_cfg()).unwrap();
        assert_eq!(w.case(), WeightCase::Project);
        let expected = Matrix::identity(3).take_cols(2).unwrap();
        assert_eq!(w.matrix(), &expected);
    }

    #[test]
    fn rotation_column_for_single_output() {
        let theta = 0.6f64;
        let spec = FilterSpec::with_custom_mapping(1, 1, 1, 2, 2, 1).unwrap();
        let lp = LieParams::from_values(2, 1, vec![theta]).unwrap();
        let w = build_weight(&lp, &spec, &unit_cfg()).unwrap();
        assert!((w.matrix().get(0, 0) - theta.cos()).abs() < 1e-12);
        assert!((w.matrix().get(1, 0) - theta.sin()).abs() < 1e-12);
        // the map is x -> cos(t) x1 + sin(t) x2
        let x = Matrix::from_rows(&[&[2.0, -1.0]]).unwrap();
        let y = x.matmul(w.matrix()).unwrap();
        assert!((y.get(0, 0) - (2.0 * theta.cos() - theta.sin())).abs() < 1e-12);
    }

    #[test]
    fn scalar_embedding_is_isometric() {
        let spec = FilterSpec::with_custom_mapping(3, 1, 1, 1, 1, 3).unwrap();
        let lp = LieParams::zeros(3, 1).unwrap();
        let w = build_weight(&lp, &spec, &unit_cfg()).unwrap();
        assert_eq!(w.case(), WeightCase::Isometry);
        let x = Matrix::from_rows(&[&[4.0]]).unwrap();
        let y = apply_weight(&w, &x).unwrap();
        assert_eq!(y.row(0), &[4.0, 0.0, 0.0]);
        assert_eq!(l2_norm(y.row(0)), 4.0);
    }

    #[test]
    fn build_weight_rejects_mismatched_params() {
        let spec = FilterSpec::new(4, 2, 3, 3).unwrap(); // m=18, k=4
        let lp = LieParams::zeros(7, 4).unwrap();
        assert!(build_weight(&lp, &spec, &unit_cfg()).is_err());
    }

    #[test]
    fn isometry_embeds_and_preserves_norm() {
        let spec = FilterSpec::with_custom_mapping(4, 1, 1, 2, 2, 4).unwrap();
        let lp = LieParams::zeros(4, 2).unwrap();
        let w = build_weight(&lp, &spec, &unit_cfg()).unwrap();
        let x = Matrix::from_rows(&[&[3.0, 4.0]]).unwrap();
        let y = apply_weight(&w, &x).unwrap();
        assert_eq!(y.row(0), &[3.0, 4.0, 0.0, 0.0]);
        assert_eq!(l2_norm(y.row(0)), 5.0);
    }

    #[test]
    fn projection_normalizes_to_unit_rows() {
        // 3-4-5 construction: raw output [3, 4] normalizes to [0.6, 0.8].
        let spec = FilterSpec::with_custom_mapping(2, 1, 1, 3, 3, 2).unwrap();
        let lp = LieParams::zeros(3, 2).unwrap();
        let w = build_weight(&lp, &spec, &unit_cfg()).unwrap();
        let x = Matrix::from_rows(&[&[3.0, 4.0, 12.0]]).unwrap();
        let y = apply_weight(&w, &x).unwrap();
        assert!((y.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((y.get(0, 1) - 0.8).abs() < 1e-12);
        assert!((l2_norm(y.row(0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_rows_are_unit_norm_for_random_weights() {
        let mut rng = Rng::new(2);
        let spec = FilterSpec::new(3, 2, 2, 2).unwrap(); // m=8, k=3
        let (lm, lk) = spec.lie_shape();
        let lp = LieParams::random_uniform(&mut rng, lm, lk, -2.0, 2.0).unwrap();
        let w = build_weight(&lp, &spec, &unit_cfg()).unwrap();
        let x = random_gaussian(&mut rng, 40, 8, 1.0).unwrap();
        let raw = x.matmul(w.matrix()).unwrap();
        let y = apply_weight(&w, &x).unwrap();
        for r in 0..y.rows() {
            // contraction before normalization, unit length after
            assert!(l2_norm(raw.row(r)) <= l2_norm(x.row(r)) + 1e-12);
            assert!((l2_norm(y.row(r)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn isometry_preserves_norm_for_random_weights() {
        let mut rng = Rng::new(4);
        let spec = FilterSpec::with_custom_mapping(12, 1, 1, 5, 5, 12).unwrap();
        let lp = LieParams::random_uniform(&mut rng, 12, 5, -2.0, 2.0).unwrap();
        let w = build_weight(&lp, &spec, &unit_cfg()).unwrap();
        let x = random_gaussian(&mut rng, 30, 5, 2.0).unwrap();
        let y = apply_weight(&w, &x).unwrap();
        for r in 0..y.rows() {
            let rel = (l2_norm(y.row(r)) - l2_norm(x.row(r))).abs() / l2_norm(x.row(r));
            assert!(rel < 1e-10, "row {r}: rel {rel}");
        }
    }

    #[test]
    fn kept_columns_are_orthonormal() {
        let mut rng = Rng::new(14);
        for &(m, k) in &[(9usize, 4usize), (4, 9), (6, 6)] {
            let spec = FilterSpec::with_custom_mapping(1, 1, m, k, m, k).unwrap();
            let (lm, lk) = spec.lie_shape();
            let lp = LieParams::random_uniform(&mut rng, lm, lk, -3.0, 3.0).unwrap();
            let w = build_weight(&lp, &spec, &unit_cfg()).unwrap();
            // the kept block has orthonormal columns in the source dimension
            let v = if m > k { w.matrix().clone() } else { w.matrix().transpose() };
            let gram = v.transpose().matmul(&v).unwrap();
            let defect = gram.max_abs_diff(&Matrix::identity(v.cols()));
            assert!(defect < 1e-10, "({m},{k}) defect {defect:.3e}");
        }
    }

    #[test]
    fn param_count_matches_packed_formula() {
        let spec = FilterSpec::new(4, 2, 3, 3).unwrap(); // m=18, k=4
        assert_eq!(spec.param_count(), 4 * 18 - 4 * 5 / 2);
        let square = FilterSpec::with_custom_mapping(8, 8, 1, 1, 8, 8).unwrap();
        assert_eq!(square.param_count(), 8 * 7 / 2);
    }

    #[test]
    fn zero_norm_policies() {
        let spec = FilterSpec::with_custom_mapping(1, 1, 1, 2, 2, 1).unwrap();
        let lp = LieParams::zeros(2, 1).unwrap();
        let w = build_weight(&lp, &spec, &unit_cfg()).unwrap();
        // the kept column is e1, so x = (0, 5) maps to exactly zero
        let x = Matrix::from_rows(&[&[0.0, 5.0]]).unwrap();
        let guarded = apply_weight(&w, &x).unwrap();
        assert_eq!(guarded.get(0, 0), 0.0);
        let strict = ApplyOptions { zero_norm: ZeroNormPolicy::Error, ..Default::default() };
        assert!(matches!(
            apply_weight_with(&w, &x, &strict),
            Err(Error::ZeroNormRow { row: 0 })
        ));
    }

    #[test]
    fn preserve_input_norm_mode() {
        let spec = FilterSpec::with_custom_mapping(2, 1, 1, 3, 3, 2).unwrap();
        let lp = LieParams::zeros(3, 2).unwrap();
        let w = build_weight(&lp, &spec, &unit_cfg()).unwrap();
        let x = Matrix::from_rows(&[&[3.0, 4.0, 0.0]]).unwrap();
        let opts = ApplyOptions { preserve_input_norm: true, ..Default::default() };
        let y = apply_weight_with(&w, &x, &opts).unwrap();
        assert!((l2_norm(y.row(0)) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn reshape_round_trip_is_identity() {
        let mut rng = Rng::new(23);
        let spec = FilterSpec::new(4, 2, 3, 3).unwrap();
        let (lm, lk) = spec.lie_shape();
        let lp = LieParams::random_uniform(&mut rng, lm, lk, -2.0, 2.0).unwrap();
        let w = build_weight(&lp, &spec, &unit_cfg()).unwrap();
        let filters = reshape_to_filters(&w, &spec).unwrap();
        let back = flatten_filters(&filters, &spec).unwrap();
        assert_eq!(&back, w.matrix());
    }

    #[test]
    fn reshape_degenerate_shapes() {
        let spec = FilterSpec::new(2, 1, 1, 1).unwrap(); // m=1, k=2
        let lp = LieParams::zeros(2, 1).unwrap();
        let w = build_weight(&lp, &spec, &unit_cfg()).unwrap();
        let filters = reshape_to_filters(&w, &spec).unwrap();
        assert_eq!(filters.dims(), (2, 1, 1, 1));
        assert_eq!(filters.get(0, 0, 0, 0), w.matrix().get(0, 0));
        assert_eq!(filters.get(1, 0, 0, 0), w.matrix().get(0, 1));
    }

    #[test]
    fn reshape_layout_matches_index_enumeration() {
        // c_out=4, c_in=2, 3x3 kernel: filter (o,i,p,q) = w[i*9 + p*3 + q][o]
        let mut rng = Rng::new(29);
        let spec = FilterSpec::new(4, 2, 3, 3).unwrap();
        let (lm, lk) = spec.lie_shape();
        let lp = LieParams::random_uniform(&mut rng, lm, lk, -1.0, 1.0).unwrap();
        let w = build_weight(&lp, &spec, &unit_cfg()).unwrap();
        let filters = reshape_to_filters(&w, &spec).unwrap();
        for o in 0..4 {
            for i in 0..2 {
                for p in 0..3 {
                    for q in 0..3 {
                        assert_eq!(
                            filters.get(o, i, p, q),
                            w.matrix().get(i * 9 + p * 3 + q, o)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn custom_mapping_must_cover_element_count() {
        assert!(FilterSpec::with_custom_mapping(4, 2, 3, 3, 10, 7).is_err());
        assert!(FilterSpec::with_custom_mapping(4, 2, 3, 3, 36, 2).is_ok());
    }
}
