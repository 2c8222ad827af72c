//! Single-bounce measurement geometry.
//!
//! A single-bounce path between a receiver `i` and a sender `j` is described
//! by its total length `d` and the two bearings at which it leaves/arrives at
//! each end (global frame, counterclockwise from +x). Eliminating the unknown
//! leg lengths gives the linear relation
//!
//! ```text
//! d = g(theta_ij, theta_ji)^T (s_i - s_j)
//! ```
//!
//! where `theta_ji` is the bearing observed at the receiver and `theta_ij`
//! the bearing observed at the sender. Stacking `R` such rows yields the edge
//! constraint `s_i - s_j ~ G^+ d` with covariance basis `G^+ (G^+)^T`.

use std::f64::consts::{PI, TAU};

use log::debug;
use nalgebra::{DVector, Matrix2, Matrix2xX, MatrixXx2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default `|sin(theta_ji - theta_ij)|` threshold below which a row is singular.
pub const DEFAULT_EPS_SING: f64 = 1e-6;
/// Default LOS detection window around an angular separation of pi (1 degree).
pub const DEFAULT_EPS_LOS: f64 = PI / 180.0;
/// Relative singular-value threshold used to decide the rank of `G`.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("singular geometry: |sin(theta_ji - theta_ij)| = {0:e} is below the threshold")]
    SingularGeometry(f64),
    #[error("path is not line-of-sight")]
    NotLineOfSight,
    #[error("every path of the edge was dropped as degenerate")]
    AllPathsDegenerate,
    #[error("edge geometry has numerical rank 0")]
    RankDeficient,
    #[error("edge has no paths")]
    NoPaths,
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(&'static str),
}

/// Planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const ORIGIN: Position = Position { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn distance_to(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Bearing of `other` as seen from `self`, in `[0, 2pi)`.
    pub fn bearing_to(&self, other: &Position) -> f64 {
        normalize_angle((other.y - self.y).atan2(other.x - self.x))
    }
}

impl From<Vector2<f64>> for Position {
    fn from(v: Vector2<f64>) -> Self {
        Self { x: v.x, y: v.y }
    }
}

/// Wraps an angle into `[0, 2pi)`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    // rem_euclid of a tiny negative value rounds up to exactly TAU
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_signed(a: f64) -> f64 {
    let r = normalize_angle(a);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

pub fn unit(theta: f64) -> Vector2<f64> {
    Vector2::new(theta.cos(), theta.sin())
}

/// One path's measured length and the bearings at both of its ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathMeasurement {
    /// Full path length in meters.
    pub range: f64,
    /// Bearing of the arriving path at the receiver `i` (`theta_ji`).
    pub aoa_at_receiver: f64,
    /// Bearing of the path at the sender `j` (`theta_ij`).
    pub aoa_at_sender: f64,
}

impl PathMeasurement {
    /// Builds a measurement, normalizing both angles into `[0, 2pi)`.
    pub fn new(range: f64, aoa_at_receiver: f64, aoa_at_sender: f64) -> Self {
        Self {
            range,
            aoa_at_receiver: normalize_angle(aoa_at_receiver),
            aoa_at_sender: normalize_angle(aoa_at_sender),
        }
    }

    /// The same physical path observed in the opposite direction.
    pub fn reversed(&self) -> Self {
        Self {
            range: self.range,
            aoa_at_receiver: self.aoa_at_sender,
            aoa_at_sender: self.aoa_at_receiver,
        }
    }

    /// Only finiteness is checked. Noisy ranges may go negative and the
    /// linear model handles them as is.
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.range.is_finite() || !self.aoa_at_receiver.is_finite() || !self.aoa_at_sender.is_finite()
        {
            return Err(GeometryError::InvalidMeasurement("non-finite field"));
        }
        Ok(())
    }

    /// Signed angular separation `theta_ji - theta_ij` wrapped into `(-pi, pi]`.
    pub fn separation(&self) -> f64 {
        wrap_signed(self.aoa_at_receiver - self.aoa_at_sender)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PathClass {
    SingleBounce,
    LineOfSight,
    Degenerate,
}

/// Thresholds shared by classification and constraint building.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryTolerances {
    /// LOS window around a separation of pi, radians.
    pub eps_los: f64,
    /// Minimum `|sin(separation)|` for a usable single-bounce row.
    pub eps_sing: f64,
    /// Relative singular-value threshold for rank decisions.
    pub rank_tol: f64,
}

impl Default for GeometryTolerances {
    fn default() -> Self {
        Self {
            eps_los: DEFAULT_EPS_LOS,
            eps_sing: DEFAULT_EPS_SING,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

impl GeometryTolerances {
    pub fn with_eps_los(eps_los: f64) -> Self {
        Self {
            eps_los,
            ..Self::default()
        }
    }
}

/// Steering vector `g(theta_ij, theta_ji)` mapping `s_i - s_j` onto the path length.
///
/// `theta_ij` is the sender-side bearing and `theta_ji` the receiver-side
/// bearing. Swapping the arguments flips the sign.
pub fn steering_vector(theta_ij: f64, theta_ji: f64, eps_sing: f64) -> Result<Vector2<f64>, GeometryError> {
    let denom = (theta_ji - theta_ij).sin();
    if denom.abs() <= eps_sing {
        return Err(GeometryError::SingularGeometry(denom.abs()));
    }
    Ok(Vector2::new(
        (theta_ij.sin() + theta_ji.sin()) / denom,
        -(theta_ij.cos() + theta_ji.cos()) / denom,
    ))
}

pub fn classify_path(m: &PathMeasurement, tol: &GeometryTolerances) -> PathClass {
    let sep = m.separation();
    if (sep.abs() - PI).abs() <= tol.eps_los {
        PathClass::LineOfSight
    } else if sep.sin().abs() <= tol.eps_sing {
        PathClass::Degenerate
    } else {
        PathClass::SingleBounce
    }
}

/// Exact constraint rows for a LOS path: `s_i - s_j = d * u(theta_ij)`.
///
/// Returns the identity geometry block and the matching offset.
pub fn los_rows(m: &PathMeasurement, tol: &GeometryTolerances) -> Result<(Matrix2<f64>, Vector2<f64>), GeometryError> {
    if classify_path(m, tol) != PathClass::LineOfSight {
        return Err(GeometryError::NotLineOfSight);
    }
    Ok((Matrix2::identity(), m.range * unit(m.aoa_at_sender)))
}

/// Fused linear-Gaussian relation for one directed edge `j -> i`:
/// `s_i - s_j ~ N(offset, sigma^2 * basis)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConstraint {
    /// Stacked constraint rows `G`, one per row of the linear system.
    pub geometry: MatrixXx2<f64>,
    /// Right-hand side `d` matching `geometry` row by row.
    pub rhs: DVector<f64>,
    /// Moore-Penrose pseudo-inverse `G^+`.
    pub pseudo_inverse: Matrix2xX<f64>,
    /// `G^+ d`, the estimate of `s_i - s_j`.
    pub offset: Vector2<f64>,
    /// `G^+ (G^+)^T`.
    pub basis: Matrix2<f64>,
    /// Number of paths that contributed rows.
    pub path_count: usize,
    /// Indices (into the input path list) of paths dropped as degenerate.
    pub dropped: Vec<usize>,
}

impl EdgeConstraint {
    /// Builds a constraint from pre-stacked rows.
    pub fn from_rows(
        geometry: MatrixXx2<f64>,
        rhs: DVector<f64>,
        path_count: usize,
        rank_tol: f64,
    ) -> Result<Self, GeometryError> {
        if geometry.nrows() == 0 {
            return Err(GeometryError::NoPaths);
        }
        assert_eq!(geometry.nrows(), rhs.len(), "row count mismatch");
        let pseudo_inverse = pseudo_inverse(&geometry, rank_tol)?;
        let offset = &pseudo_inverse * &rhs;
        let basis = &pseudo_inverse * pseudo_inverse.transpose();
        let basis = (basis + basis.transpose()) * 0.5;
        Ok(Self {
            geometry,
            rhs,
            pseudo_inverse,
            offset: Vector2::new(offset[0], offset[1]),
            basis,
            path_count,
            dropped: Vec::new(),
        })
    }

    /// Largest eigenvalue of the covariance basis.
    pub fn basis_max_eigenvalue(&self) -> f64 {
        self.basis.symmetric_eigenvalues().max()
    }

    pub fn rank(&self, rank_tol: f64) -> usize {
        numerical_rank(&self.geometry, rank_tol)
    }
}

fn numerical_rank(g: &MatrixXx2<f64>, rank_tol: f64) -> usize {
    let sv = g.singular_values();
    let smax = sv.max();
    if !(smax > 0.0) || !smax.is_finite() {
        return 0;
    }
    sv.iter().filter(|&&s| s >= rank_tol * smax).count()
}

/// Pseudo-inverse of an `R x 2` matrix.
///
/// Full column rank uses `(G^T G)^-1 G^T`; a single row uses
/// `G^T (G G^T)^-1`; several mutually parallel rows fall back to a truncated
/// SVD.
pub fn pseudo_inverse(g: &MatrixXx2<f64>, rank_tol: f64) -> Result<Matrix2xX<f64>, GeometryError> {
    match numerical_rank(g, rank_tol) {
        0 => Err(GeometryError::RankDeficient),
        2 => {
            let gt = g.transpose();
            let normal: Matrix2<f64> = &gt * g;
            let inv = normal.try_inverse().ok_or(GeometryError::RankDeficient)?;
            Ok(inv * gt)
        }
        _ if g.nrows() == 1 => {
            let norm2 = g.norm_squared();
            Ok(g.transpose() / norm2)
        }
        _ => {
            let svd = g.clone().svd(true, true);
            let smax = svd.singular_values.max();
            svd.pseudo_inverse(rank_tol * smax)
                .map_err(|_| GeometryError::RankDeficient)
        }
    }
}

/// Classifies and stacks the paths of one directed edge into an [`EdgeConstraint`].
pub fn build_edge_constraint(
    paths: &[PathMeasurement],
    tol: &GeometryTolerances,
) -> Result<EdgeConstraint, GeometryError> {
    if paths.is_empty() {
        return Err(GeometryError::NoPaths);
    }
    let mut rows: Vec<RowVector2<f64>> = Vec::with_capacity(paths.len() + 1);
    let mut rhs: Vec<f64> = Vec::with_capacity(paths.len() + 1);
    let mut dropped = Vec::new();
    for (idx, m) in paths.iter().enumerate() {
        m.validate()?;
        match classify_path(m, tol) {
            PathClass::SingleBounce => {
                let g = steering_vector(m.aoa_at_sender, m.aoa_at_receiver, tol.eps_sing)?;
                rows.push(g.transpose());
                rhs.push(m.range);
            }
            PathClass::LineOfSight => {
                let (_, offset) = los_rows(m, tol)?;
                rows.push(RowVector2::new(1.0, 0.0));
                rows.push(RowVector2::new(0.0, 1.0));
                rhs.push(offset.x);
                rhs.push(offset.y);
            }
            PathClass::Degenerate => {
                debug!("dropping degenerate path {idx}: separation {:.3e} rad", m.separation());
                dropped.push(idx);
            }
        }
    }
    if rows.is_empty() {
        return Err(GeometryError::AllPathsDegenerate);
    }
    let geometry = MatrixXx2::from_rows(&rows);
    let mut c = EdgeConstraint::from_rows(
        geometry,
        DVector::from_vec(rhs),
        paths.len() - dropped.len(),
        tol.rank_tol,
    )?;
    c.dropped = dropped;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2};

    const TOL: f64 = 1e-12;

    #[test]
    fn steering_vector_examples() {
        let g = steering_vector(0.0, FRAC_PI_2, DEFAULT_EPS_SING).unwrap();
        assert_abs_diff_eq!(g, Vector2::new(1.0, -1.0), epsilon = TOL);

        let g = steering_vector(FRAC_PI_4, 3.0 * FRAC_PI_4, DEFAULT_EPS_SING).unwrap();
        assert_abs_diff_eq!(g, Vector2::new(SQRT_2, 0.0), epsilon = TOL);
    }

    #[test]
    fn steering_vector_matches_mirror_path_length() {
        // S_j = (4,0) reflected across y = 2 is (4,4); path length |S_i - S_j'| = 4 sqrt 2.
        let g = steering_vector(3.0 * FRAC_PI_4, FRAC_PI_4, DEFAULT_EPS_SING).unwrap();
        let diff = Vector2::new(-4.0, 0.0);
        assert_abs_diff_eq!(g.dot(&diff), 4.0 * SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn steering_vector_rejects_los() {
        assert!(matches!(
            steering_vector(0.0, PI, DEFAULT_EPS_SING),
            Err(GeometryError::SingularGeometry(_))
        ));
    }

    #[test]
    fn classification() {
        let tol = GeometryTolerances::with_eps_los(0.01);
        let los = PathMeasurement::new(1.0, PI, 0.0);
        assert_eq!(classify_path(&los, &tol), PathClass::LineOfSight);
        let sb = PathMeasurement::new(1.0, 3.0 * FRAC_PI_4, FRAC_PI_4);
        assert_eq!(classify_path(&sb, &tol), PathClass::SingleBounce);
        let deg = PathMeasurement::new(1.0, 0.1, 0.1);
        assert_eq!(classify_path(&deg, &tol), PathClass::Degenerate);
        // wrap-around: 359.9 deg vs 179.9 deg is still LOS
        let wrapped = PathMeasurement::new(1.0, 0.0f64.to_radians() - 1e-3, PI - 1e-3);
        assert_eq!(classify_path(&wrapped, &tol), PathClass::LineOfSight);
    }

    #[test]
    fn los_row_offsets() {
        let tol = GeometryTolerances::default();
        let cases = [
            (5.0, 0.0, PI, Vector2::new(5.0, 0.0)),
            (5.0, FRAC_PI_2, 3.0 * FRAC_PI_2, Vector2::new(0.0, 5.0)),
            (4.0 * SQRT_2, FRAC_PI_4, 5.0 * FRAC_PI_4, Vector2::new(4.0, 4.0)),
        ];
        for (d, theta_ij, theta_ji, expected) in cases {
            let m = PathMeasurement::new(d, theta_ji, theta_ij);
            let (g, offset) = los_rows(&m, &tol).unwrap();
            assert_eq!(g, Matrix2::identity());
            assert_abs_diff_eq!(offset, expected, epsilon = 1e-12);
        }
        let sb = PathMeasurement::new(1.0, FRAC_PI_2, 0.0);
        assert_eq!(los_rows(&sb, &tol), Err(GeometryError::NotLineOfSight));
    }

    #[test]
    fn orthonormal_two_row_constraint() {
        let g = MatrixXx2::from_row_slice(&[1.0, 0.0, 0.0, 1.0]);
        let c = EdgeConstraint::from_rows(g, DVector::from_vec(vec![2.0, 3.0]), 2, DEFAULT_RANK_TOL).unwrap();
        assert_abs_diff_eq!(c.offset, Vector2::new(2.0, 3.0), epsilon = TOL);
        assert_abs_diff_eq!(c.basis, Matrix2::identity(), epsilon = TOL);
    }

    #[test]
    fn single_row_minimum_norm() {
        let g = MatrixXx2::from_row_slice(&[1.0, 0.0]);
        let c = EdgeConstraint::from_rows(g, DVector::from_vec(vec![2.0]), 1, DEFAULT_RANK_TOL).unwrap();
        assert_abs_diff_eq!(c.pseudo_inverse[(0, 0)], 1.0, epsilon = TOL);
        assert_abs_diff_eq!(c.pseudo_inverse[(1, 0)], 0.0, epsilon = TOL);
        assert_abs_diff_eq!(c.offset, Vector2::new(2.0, 0.0), epsilon = TOL);
        assert_abs_diff_eq!(c.basis, Matrix2::new(1.0, 0.0, 0.0, 0.0), epsilon = TOL);
    }

    #[test]
    fn parallel_rows_use_truncated_svd() {
        let g = MatrixXx2::from_row_slice(&[1.0, 1.0, 2.0, 2.0]);
        let c = EdgeConstraint::from_rows(g.clone(), DVector::from_vec(vec![1.0, 2.0]), 2, DEFAULT_RANK_TOL).unwrap();
        let p = &c.pseudo_inverse;
        assert_abs_diff_eq!(&g * p * &g, g, epsilon = 1e-12);
        // minimum-norm solution of x + y = 1 is (0.5, 0.5)
        assert_abs_diff_eq!(c.offset, Vector2::new(0.5, 0.5), epsilon = 1e-12);
    }

    #[test]
    fn zero_rows_are_rank_deficient() {
        let g = MatrixXx2::from_row_slice(&[0.0, 0.0]);
        assert_eq!(
            EdgeConstraint::from_rows(g, DVector::from_vec(vec![1.0]), 1, DEFAULT_RANK_TOL),
            Err(GeometryError::RankDeficient)
        );
    }

    #[test]
    fn degenerate_paths_are_dropped() {
        let tol = GeometryTolerances::default();
        let paths = [
            PathMeasurement::new(3.0, 0.2, 0.2),
            PathMeasurement::new(4.0 * SQRT_2, FRAC_PI_4, 3.0 * FRAC_PI_4),
        ];
        let c = build_edge_constraint(&paths, &tol).unwrap();
        assert_eq!(c.dropped, vec![0]);
        assert_eq!(c.path_count, 1);
        assert_eq!(c.geometry.nrows(), 1);

        let all_bad = [PathMeasurement::new(3.0, 0.2, 0.2)];
        assert_eq!(build_edge_constraint(&all_bad, &tol), Err(GeometryError::AllPathsDegenerate));
        assert_eq!(build_edge_constraint(&[], &tol), Err(GeometryError::NoPaths));
    }

    #[test]
    fn los_path_contributes_two_rows() {
        let tol = GeometryTolerances::default();
        // s_i = (0,0), s_j = (3,4): s_i - s_j = (-3,-4)
        let theta_ji = (4.0f64).atan2(3.0);
        let m = PathMeasurement::new(5.0, theta_ji, theta_ji + PI);
        let c = build_edge_constraint(&[m], &tol).unwrap();
        assert_eq!(c.geometry.nrows(), 2);
        assert_abs_diff_eq!(c.offset, Vector2::new(-3.0, -4.0), epsilon = 1e-12);
    }

    #[test]
    fn non_finite_range_is_rejected() {
        let tol = GeometryTolerances::default();
        let m = PathMeasurement::new(f64::NAN, 0.0, 1.0);
        assert!(matches!(
            build_edge_constraint(&[m], &tol),
            Err(GeometryError::InvalidMeasurement(_))
        ));
        // negative noisy ranges stay usable
        assert!(build_edge_constraint(&[PathMeasurement::new(-1.0, 0.0, 1.0)], &tol).is_ok());
    }

    #[test]
    fn angle_normalization() {
        assert_eq!(normalize_angle(-1e-18), 0.0);
        assert_abs_diff_eq!(normalize_angle(-FRAC_PI_2), 3.0 * FRAC_PI_2, epsilon = TOL);
        assert_abs_diff_eq!(wrap_signed(3.0 * FRAC_PI_2), -FRAC_PI_2, epsilon = TOL);
        assert_abs_diff_eq!(wrap_signed(PI), PI, epsilon = TOL);
    }
}
