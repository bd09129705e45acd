//! Lie groups of planar geometric transformations.
//!
//! Every group is represented by a fixed, Frobenius-orthogonal basis of 3x3
//! generator matrices spanning its tangent space at the identity. Coefficient
//! vectors over that basis reach concrete transformations through the matrix
//! exponential; the principal matrix logarithm inverts the map near the
//! identity. Transformations act on homogeneous plane coordinates.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Supported transformation groups, by tangent-space dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformGroup {
    /// Translations along x and y (2 parameters).
    Translation,
    /// Rotations combined with translations (3 parameters).
    RotationTranslation,
    /// Isotropic scalings combined with translations (3 parameters).
    ScaleTranslation,
    /// Rotation, isotropic scale, and translation (4 parameters).
    Similarity,
    /// Full affine maps (6 parameters).
    Affine,
    /// Projective maps modulo overall scale (8 parameters).
    Projective,
}

impl TransformGroup {
    pub const ALL: [TransformGroup; 6] = [
        TransformGroup::Translation,
        TransformGroup::RotationTranslation,
        TransformGroup::ScaleTranslation,
        TransformGroup::Similarity,
        TransformGroup::Affine,
        TransformGroup::Projective,
    ];

    /// Dimension of the tangent space at the identity.
    pub fn dim(self) -> usize {
        match self {
            TransformGroup::Translation => 2,
            TransformGroup::RotationTranslation => 3,
            TransformGroup::ScaleTranslation => 3,
            TransformGroup::Similarity => 4,
            TransformGroup::Affine => 6,
            TransformGroup::Projective => 8,
        }
    }

    /// Canonical lowercase name, also accepted by [`TransformGroup::parse`].
    pub fn name(self) -> &'static str {
        match self {
            TransformGroup::Translation => "translation",
            TransformGroup::RotationTranslation => "rotation-translation",
            TransformGroup::ScaleTranslation => "scale-translation",
            TransformGroup::Similarity => "similarity",
            TransformGroup::Affine => "affine",
            TransformGroup::Projective => "projective",
        }
    }

    pub fn parse(name: &str) -> Result<TransformGroup> {
        match name.trim().to_ascii_lowercase().as_str() {
            "translation" | "t" => Ok(TransformGroup::Translation),
            "rotation-translation" | "r+t" => Ok(TransformGroup::RotationTranslation),
            "scale-translation" | "s+t" => Ok(TransformGroup::ScaleTranslation),
            "similarity" | "sim" => Ok(TransformGroup::Similarity),
            "affine" => Ok(TransformGroup::Affine),
            "projective" => Ok(TransformGroup::Projective),
            other => Err(Error::InvalidParams(format!(
                "unknown transformation group \"{other}\""
            ))),
        }
    }

    /// Generator matrices, in the coefficient order used everywhere else.
    ///
    /// The bases are, with `E(i, j)` the single-entry matrix:
    /// translation `[E(0,2), E(1,2)]`; rotation generator `E(1,0) - E(0,1)`;
    /// isotropic scale generator `E(0,0) + E(1,1)`. Rotation-translation and
    /// scale-translation append their third generator after the translations,
    /// similarity appends rotation then scale, affine is
    /// `[E(0,2), E(1,2), E(0,0), E(0,1), E(1,0), E(1,1)]`, and projective
    /// appends `E(2,0), E(2,1)` to the affine basis. Each basis is pairwise
    /// orthogonal under the Frobenius inner product.
    pub fn generators(self) -> Vec<Matrix3<f64>> {
        let rot = sub(&e(1, 0), &e(0, 1));
        let scl = add(&e(0, 0), &e(1, 1));
        match self {
            TransformGroup::Translation => vec![e(0, 2), e(1, 2)],
            TransformGroup::RotationTranslation => vec![e(0, 2), e(1, 2), rot],
            TransformGroup::ScaleTranslation => vec![e(0, 2), e(1, 2), scl],
            TransformGroup::Similarity => vec![e(0, 2), e(1, 2), rot, scl],
            TransformGroup::Affine => {
                vec![e(0, 2), e(1, 2), e(0, 0), e(0, 1), e(1, 0), e(1, 1)]
            }
            TransformGroup::Projective => vec![
                e(0, 2),
                e(1, 2),
                e(0, 0),
                e(0, 1),
                e(1, 0),
                e(1, 1),
                e(2, 0),
                e(2, 1),
            ],
        }
    }

    fn is_projective(self) -> bool {
        matches!(self, TransformGroup::Projective)
    }
}

fn e(i: usize, j: usize) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    m[(i, j)] = 1.0;
    m
}

fn add(a: &Matrix3<f64>, b: &Matrix3<f64>) -> Matrix3<f64> {
    a + b
}

fn sub(a: &Matrix3<f64>, b: &Matrix3<f64>) -> Matrix3<f64> {
    a - b
}

fn frobenius_dot(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn frobenius_norm(a: &Matrix3<f64>) -> f64 {
    frobenius_dot(a, a).sqrt()
}

/// An invertible planar transformation stored as a 3x3 homogeneous matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    matrix: Matrix3<f64>,
}

impl Transform {
    pub fn identity() -> Transform {
        Transform {
            matrix: Matrix3::identity(),
        }
    }

    /// Wraps a homogeneous matrix. Entries must be finite and the matrix
    /// safely invertible.
    pub fn from_matrix(matrix: Matrix3<f64>) -> Result<Transform> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("transform matrix has non-finite entries".into()));
        }
        if matrix.determinant().abs() < 1e-12 {
            return Err(Error::Format("transform matrix is singular".into()));
        }
        Ok(Transform { matrix })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn determinant(&self) -> f64 {
        self.matrix.determinant()
    }

    pub fn inverse(&self) -> Result<Transform> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| Error::InvalidParams("transform is not invertible".into()))?;
        Ok(Transform { matrix: inv })
    }

    /// Composition of the two transformations: `other` acts first, then `self`.
    pub fn compose(&self, other: &Transform) -> Transform {
        Transform {
            matrix: self.matrix * other.matrix,
        }
    }

    /// Applies the transformation to a point in centered plane coordinates.
    pub fn apply_point(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let q = self.matrix * Vector3::new(x, y, 1.0);
        if q.z.abs() < 1e-12 {
            return Err(Error::HorizonPoint { x, y });
        }
        Ok((q.x / q.z, q.y / q.z))
    }

    /// Serializes the matrix as nine whitespace-separated numbers, row major.
    pub fn to_line(&self) -> String {
        let m = &self.matrix;
        format!(
            "{} {} {} {} {} {} {} {} {}",
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)]
        )
    }

    /// Parses the format written by [`Transform::to_line`].
    pub fn from_line(line: &str) -> Result<Transform> {
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad matrix entry \"{tok}\"")))
            })
            .collect::<Result<_>>()?;
        if values.len() != 9 {
            return Err(Error::Format(format!(
                "expected 9 matrix entries, found {}",
                values.len()
            )));
        }
        Transform::from_matrix(Matrix3::from_row_slice(&values))
    }

    /// Largest absolute entry-wise difference between two transforms.
    pub fn max_abs_diff(&self, other: &Transform) -> f64 {
        self.matrix
            .iter()
            .zip(other.matrix.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A tangent vector at the identity, as coefficients over the group's
/// generator basis.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    group: TransformGroup,
    coeffs: Vec<f64>,
}

impl TangentVector {
    pub fn new(group: TransformGroup, coeffs: Vec<f64>) -> Result<TangentVector> {
        if coeffs.len() != group.dim() {
            return Err(Error::DimensionMismatch(format!(
                "group {} has dimension {}, got {} coefficients",
                group.name(),
                group.dim(),
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(
                "tangent coefficients must be finite".into(),
            ));
        }
        Ok(TangentVector { group, coeffs })
    }

    pub fn zeros(group: TransformGroup) -> TangentVector {
        TangentVector {
            group,
            coeffs: vec![0.0; group.dim()],
        }
    }

    pub fn group(&self) -> TransformGroup {
        self.group
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Euclidean norm of the coefficient vector.
    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> TangentVector {
        TangentVector {
            group: self.group,
            coeffs: self.coeffs.iter().map(|v| v * factor).collect(),
        }
    }

    /// Component-wise sum. Both vectors must live in the same group.
    pub fn add(&self, other: &TangentVector) -> TangentVector {
        assert_eq!(self.group, other.group, "mixed tangent spaces");
        TangentVector {
            group: self.group,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// The generator combination `sum_j c_j G_j`.
    pub fn algebra_matrix(&self) -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        for (c, g) in self.coeffs.iter().zip(self.group.generators()) {
            m += g * *c;
        }
        m
    }
}

/// Exponential map from the tangent space onto the group.
///
/// Scaling and squaring around an order-14 Taylor expansion; exact to
/// machine precision for the generator norms seen in practice.
pub fn exp_map(v: &TangentVector) -> Transform {
    Transform {
        matrix: matrix_exp(&v.algebra_matrix()),
    }
}

fn matrix_exp(m: &Matrix3<f64>) -> Matrix3<f64> {
    let mut scaled = *m;
    let mut squarings = 0u32;
    while frobenius_norm(&scaled) > 0.5 && squarings < 64 {
        scaled *= 0.5;
        squarings += 1;
    }
    let mut term = Matrix3::identity();
    let mut sum = Matrix3::identity();
    for k in 1..=14 {
        term = term * scaled / k as f64;
        sum += term;
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    sum
}

/// Principal matrix logarithm, expanded over the group's generator basis.
///
/// Inverse scaling and squaring: Denman-Beavers square roots bring the
/// matrix close to the identity, a Mercator series finishes the job. For
/// the projective group the multiple of the identity left over from the
/// overall scale ambiguity is gauged away before expansion. Fails with
/// [`Error::LogUndefined`] when the principal logarithm does not exist or
/// does not lie in the span of the generators.
pub fn log_map(t: &Transform, group: TransformGroup) -> Result<TangentVector> {
    if t.determinant() <= 0.0 {
        return Err(Error::LogUndefined(
            "matrix has non-positive determinant".into(),
        ));
    }
    let mut l = matrix_log(t.matrix())?;
    if group.is_projective() {
        let gauge = l[(2, 2)];
        l -= Matrix3::identity() * gauge;
    }
    let generators = group.generators();
    let coeffs: Vec<f64> = generators
        .iter()
        .map(|g| frobenius_dot(&l, g) / frobenius_dot(g, g))
        .collect();
    let mut residual = l;
    for (c, g) in coeffs.iter().zip(&generators) {
        residual -= g * *c;
    }
    if frobenius_norm(&residual) > 1e-6 {
        return Err(Error::LogUndefined(format!(
            "logarithm lies outside the {} generator span",
            group.name()
        )));
    }
    TangentVector::new(group, coeffs)
}

fn matrix_log(t: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let identity = Matrix3::identity();
    let mut current = *t;
    let mut roots = 0u32;
    while frobenius_norm(&(current - identity)) > 0.3 {
        if roots >= 40 {
            return Err(Error::LogUndefined(
                "square-root scaling did not converge".into(),
            ));
        }
        current = principal_sqrt(&current)?;
        roots += 1;
    }
    let x = current - identity;
    let mut power = x;
    let mut sum = x;
    for k in 2..=40 {
        power *= x;
        let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
        sum += power * (sign / k as f64);
    }
    Ok(sum * f64::powi(2.0, roots as i32))
}

fn principal_sqrt(a: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let mut y = *a;
    let mut z = Matrix3::identity();
    for _ in 0..100 {
        let y_inv = y
            .try_inverse()
            .ok_or_else(|| Error::LogUndefined("singular square-root iterate".into()))?;
        let z_inv = z
            .try_inverse()
            .ok_or_else(|| Error::LogUndefined("singular square-root iterate".into()))?;
        let y_next = (y + z_inv) * 0.5;
        let z_next = (z + y_inv) * 0.5;
        let delta = frobenius_norm(&(y_next - y));
        y = y_next;
        z = z_next;
        if delta <= 1e-15 * frobenius_norm(&y).max(1.0) {
            return Ok(y);
        }
    }
    Err(Error::LogUndefined(
        "square-root iteration did not converge".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn translation_matrix(a: f64, b: f64) -> Matrix3<f64> {
        let mut m = Matrix3::identity();
        m[(0, 2)] = a;
        m[(1, 2)] = b;
        m
    }

    fn rotation_translation_matrix(theta: f64, a: f64, b: f64) -> Matrix3<f64> {
        let (s, c) = theta.sin_cos();
        Matrix3::new(c, -s, a, s, c, b, 0.0, 0.0, 1.0)
    }

    fn scale_matrix(log_s: f64) -> Matrix3<f64> {
        let s = log_s.exp();
        Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn generator_counts_match_dimensions() {
        for group in TransformGroup::ALL {
            assert_eq!(group.generators().len(), group.dim());
        }
    }

    #[test]
    fn generator_bases_are_orthogonal() {
        for group in TransformGroup::ALL {
            let gens = group.generators();
            for i in 0..gens.len() {
                for j in 0..i {
                    assert_eq!(frobenius_dot(&gens[i], &gens[j]), 0.0);
                }
            }
        }
    }

    #[test]
    fn exp_of_zero_is_identity() {
        for group in TransformGroup::ALL {
            let t = exp_map(&TangentVector::zeros(group));
            assert_eq!(t.max_abs_diff(&Transform::identity()), 0.0);
        }
    }

    #[test]
    fn translation_exp_is_exact() {
        let v = TangentVector::new(TransformGroup::Translation, vec![3.25, -1.5]).unwrap();
        let t = exp_map(&v);
        let expected = translation_matrix(3.25, -1.5);
        for (a, b) in t.matrix().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn rotation_exp_matches_closed_form() {
        let theta = 0.7;
        let v =
            TangentVector::new(TransformGroup::RotationTranslation, vec![0.0, 0.0, theta])
                .unwrap();
        let t = exp_map(&v);
        let expected = rotation_translation_matrix(theta, 0.0, 0.0);
        for (a, b) in t.matrix().iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_translation_exp_matches_se2_closed_form() {
        // exp of [tx, ty, theta] translates by V(theta) * (tx, ty) with
        // V = [[sin t / t, -(1 - cos t) / t], [(1 - cos t) / t, sin t / t]].
        let (tx, ty, theta) = (1.3, -0.4, 0.9);
        let v = TangentVector::new(TransformGroup::RotationTranslation, vec![tx, ty, theta])
            .unwrap();
        let t = exp_map(&v);
        let s = theta.sin() / theta;
        let c = (1.0 - theta.cos()) / theta;
        let expected = rotation_translation_matrix(
            theta,
            s * tx - c * ty,
            c * tx + s * ty,
        );
        for (a, b) in t.matrix().iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn scale_exp_matches_closed_form() {
        let v =
            TangentVector::new(TransformGroup::ScaleTranslation, vec![0.0, 0.0, 0.35]).unwrap();
        let t = exp_map(&v);
        let expected = scale_matrix(0.35);
        for (a, b) in t.matrix().iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn bottom_row_of_affine_exp_is_exact() {
        let v = TangentVector::new(
            TransformGroup::Affine,
            vec![0.4, -0.2, 0.1, 0.3, -0.25, 0.05],
        )
        .unwrap();
        let m = exp_map(&v);
        assert_eq!(m.matrix()[(2, 0)], 0.0);
        assert_eq!(m.matrix()[(2, 1)], 0.0);
        assert_eq!(m.matrix()[(2, 2)], 1.0);
    }

    #[test]
    fn log_inverts_exp_across_groups() {
        let samples: Vec<(TransformGroup, Vec<f64>)> = vec![
            (TransformGroup::Translation, vec![2.0, -3.5]),
            (TransformGroup::RotationTranslation, vec![1.5, 0.3, 0.8]),
            (TransformGroup::ScaleTranslation, vec![-0.7, 1.2, 0.4]),
            (TransformGroup::Similarity, vec![0.5, -0.5, 0.6, -0.3]),
            (
                TransformGroup::Affine,
                vec![0.8, -0.6, 0.15, 0.2, -0.1, 0.25],
            ),
            (
                TransformGroup::Projective,
                vec![0.3, -0.2, 0.1, 0.05, -0.08, 0.12, 0.01, -0.02],
            ),
        ];
        for (group, coeffs) in samples {
            let v = TangentVector::new(group, coeffs.clone()).unwrap();
            let back = log_map(&exp_map(&v), group).unwrap();
            for (a, b) in coeffs.iter().zip(back.coeffs()) {
                assert!(
                    (a - b).abs() <= 1e-9,
                    "{}: {a} vs {b}",
                    group.name()
                );
            }
        }
    }

    #[test]
    fn log_of_pi_rotation_is_undefined() {
        // The exact half-turn has both plane eigenvalues at -1.
        let flip =
            Transform::from_matrix(Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0))
                .unwrap();
        assert!(matches!(
            log_map(&flip, TransformGroup::RotationTranslation),
            Err(Error::LogUndefined(_))
        ));
    }

    #[test]
    fn log_of_reflection_is_undefined() {
        let mirror =
            Transform::from_matrix(Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0))
                .unwrap();
        assert!(matches!(
            log_map(&mirror, TransformGroup::Affine),
            Err(Error::LogUndefined(_))
        ));
    }

    #[test]
    fn log_outside_group_span_is_rejected() {
        // A rotation has no logarithm inside the translation group.
        let rot = Transform::from_matrix(rotation_translation_matrix(0.5, 0.0, 0.0)).unwrap();
        assert!(matches!(
            log_map(&rot, TransformGroup::Translation),
            Err(Error::LogUndefined(_))
        ));
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let shift = Transform::from_matrix(translation_matrix(1.0, 0.0)).unwrap();
        let quarter =
            Transform::from_matrix(rotation_translation_matrix(std::f64::consts::FRAC_PI_2, 0.0, 0.0))
                .unwrap();
        // Rotate first, then translate: origin ends at (1, 0).
        let a = shift.compose(&quarter);
        let (x, y) = a.apply_point(0.0, 0.0).unwrap();
        assert_abs_diff_eq!(x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y, 0.0, epsilon = 1e-12);
        // Translate first, then rotate: origin ends at (0, 1).
        let b = quarter.compose(&shift);
        let (x, y) = b.apply_point(0.0, 0.0).unwrap();
        assert_abs_diff_eq!(x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let v = TangentVector::new(
            TransformGroup::Affine,
            vec![0.8, -0.6, 0.15, 0.2, -0.1, 0.25],
        )
        .unwrap();
        let t = exp_map(&v);
        let round = t.compose(&t.inverse().unwrap());
        assert!(round.max_abs_diff(&Transform::identity()) < 1e-12);
    }

    #[test]
    fn horizon_points_are_reported() {
        let v = TangentVector::new(
            TransformGroup::Projective,
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2, 0.0],
        )
        .unwrap();
        let t = exp_map(&v);
        // exp(0.2 E20) = I + 0.2 E20 maps (x, y) to weight 1 + 0.2 x, which
        // vanishes on the line x = -5.
        assert!(matches!(
            t.apply_point(-5.0, 1.0),
            Err(Error::HorizonPoint { .. })
        ));
        assert!(t.apply_point(-4.0, 1.0).is_ok());
    }

    #[test]
    fn transform_line_round_trips() {
        let v = TangentVector::new(TransformGroup::Similarity, vec![0.5, -0.25, 0.3, -0.1])
            .unwrap();
        let t = exp_map(&v);
        let back = Transform::from_line(&t.to_line()).unwrap();
        assert_eq!(t.max_abs_diff(&back), 0.0);
    }

    #[test]
    fn transform_line_rejects_bad_input() {
        assert!(Transform::from_line("1 2 3").is_err());
        assert!(Transform::from_line("1 2 3 4 5 6 7 8 x").is_err());
        assert!(Transform::from_line("0 0 0 0 0 0 0 0 0").is_err());
    }

    #[test]
    fn tangent_vector_validates_dimension() {
        assert!(TangentVector::new(TransformGroup::Translation, vec![1.0]).is_err());
        assert!(TangentVector::new(TransformGroup::Translation, vec![1.0, f64::NAN]).is_err());
    }
}
