//! Geometric observability of the pose from plane correspondences.
//!
//! Every correspondence contributes a row `L = [nᵀ, (p × n)ᵀ]` to a 6×6
//! Hessian. Its translation and rotation blocks are diagonalized separately,
//! each point is scored against the eigen-axes, and axes with too few
//! informative points become rows of a [`ConstraintMatrix`] whose null-space
//! projector filters the filter increment.

use nalgebra::{DMatrix, Matrix3, Matrix6, RowVector6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// A correspondence: point in the sensor-centered frame and unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointNormal {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizabilityParams {
    /// Minimum absolute score for a point to count as informative on an axis.
    pub eta: f64,
    /// Minimum informative points per axis.
    pub n_min: usize,
}

impl Default for LocalizabilityParams {
    fn default() -> Self {
        Self { eta: 0.8, n_min: 30 }
    }
}

/// Accumulated `Σ LᵀL`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizabilityHessian {
    pub lambda: Matrix6<f64>,
}

pub fn hessian_row(p: &Vector3<f64>, n: &Vector3<f64>) -> RowVector6<f64> {
    let m = p.cross(n);
    RowVector6::new(n.x, n.y, n.z, m.x, m.y, m.z)
}

impl LocalizabilityHessian {
    pub fn zero() -> Self {
        Self { lambda: Matrix6::zeros() }
    }

    pub fn translation_block(&self) -> Matrix3<f64> {
        self.lambda.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn rotation_block(&self) -> Matrix3<f64> {
        self.lambda.fixed_view::<3, 3>(3, 3).into_owned()
    }
}

pub fn accumulate(points: &[PointNormal]) -> LocalizabilityHessian {
    let mut lambda = Matrix6::zeros();
    for pn in points {
        let l = hessian_row(&pn.point, &pn.normal);
        lambda += l.transpose() * l;
    }
    LocalizabilityHessian { lambda }
}

/// Eigen-decomposition with ascending eigenvalues and a deterministic sign.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigenAxes {
    pub values: Vector3<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: Matrix3<f64>,
}

fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let scale = v.amax().max(f64::MIN_POSITIVE);
    match v.iter().find(|c| c.abs() > 1e-12 * scale) {
        Some(c) if *c < 0.0 => -v,
        _ => v,
    }
}

pub fn sorted_eigen(m: &Matrix3<f64>) -> EigenAxes {
    let eig = SymmetricEigen::new(*m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut values = Vector3::zeros();
    let mut vectors = Matrix3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let v = canonical_sign(eig.eigenvectors.column(src).into_owned());
        vectors.set_column(dst, &v.normalize());
    }
    EigenAxes { values, vectors }
}

/// The two 3×3 eigenbases of a Hessian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eigenbasis {
    pub translation: EigenAxes,
    pub rotation: EigenAxes,
}

impl Eigenbasis {
    pub fn of(h: &LocalizabilityHessian) -> Self {
        Self {
            translation: sorted_eigen(&h.translation_block()),
            rotation: sorted_eigen(&h.rotation_block()),
        }
    }
}

/// Score of one point: `[nᵀE_t, (p×n / ‖p×n‖)ᵀE_r]`.
pub fn score_point(basis: &Eigenbasis, pn: &PointNormal) -> Vector6<f64> {
    let st = basis.translation.vectors.transpose() * pn.normal;
    let m = pn.point.cross(&pn.normal);
    let norm = m.norm();
    let sr = if norm > 1e-12 * pn.point.norm().max(1.0) {
        basis.rotation.vectors.transpose() * (m / norm)
    } else {
        Vector3::zeros()
    };
    Vector6::new(st.x, st.y, st.z, sr.x, sr.y, sr.z)
}

pub fn score_points(basis: &Eigenbasis, points: &[PointNormal]) -> Vec<Vector6<f64>> {
    points.iter().map(|pn| score_point(basis, pn)).collect()
}

/// Rows of unit, mutually orthogonal 6-vectors and the cached `Υ = Cᵀ(CCᵀ)⁻¹`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintMatrix {
    c: DMatrix<f64>,
    upsilon: DMatrix<f64>,
}

impl Default for ConstraintMatrix {
    fn default() -> Self {
        Self::empty()
    }
}

impl ConstraintMatrix {
    pub fn empty() -> Self {
        Self { c: DMatrix::zeros(0, 6), upsilon: DMatrix::zeros(6, 0) }
    }

    /// Panics if the rows are linearly dependent.
    pub fn from_rows(rows: &[RowVector6<f64>]) -> Self {
        if rows.is_empty() {
            return Self::empty();
        }
        let c = DMatrix::from_fn(rows.len(), 6, |i, j| rows[i][j]);
        let gram = &c * c.transpose();
        let inv = gram.try_inverse().expect("constraint rows must be linearly independent");
        let upsilon = c.transpose() * inv;
        Self { c, upsilon }
    }

    pub fn is_empty(&self) -> bool {
        self.c.nrows() == 0
    }

    pub fn rank(&self) -> usize {
        self.c.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn upsilon(&self) -> &DMatrix<f64> {
        &self.upsilon
    }

    /// `I − ΥC`.
    pub fn projector(&self) -> Matrix6<f64> {
        let mut p = Matrix6::identity();
        if !self.is_empty() {
            let uc = &self.upsilon * &self.c;
            p -= Matrix6::from_fn(|i, j| uc[(i, j)]);
        }
        p
    }

    /// Orthogonal projection of `delta` onto the null space of `C`.
    pub fn project(&self, delta: &Vector6<f64>) -> Vector6<f64> {
        if self.is_empty() {
            return *delta;
        }
        let d = nalgebra::DVector::from_column_slice(delta.as_slice());
        let coeff = &self.c * &d;
        let out = d - &self.upsilon * coeff;
        Vector6::from_column_slice(out.as_slice())
    }

    /// Expresses the rotation part of every row in a frame rotated by `r`:
    /// world row `e` becomes `rᵀ e`.
    pub fn with_rotation_frame(&self, r: &Matrix3<f64>) -> Self {
        let rows: Vec<RowVector6<f64>> = (0..self.rank())
            .map(|i| {
                let row = self.c.row(i);
                let rot = r.transpose() * Vector3::new(row[3], row[4], row[5]);
                RowVector6::new(row[0], row[1], row[2], rot.x, rot.y, rot.z)
            })
            .collect();
        Self::from_rows(&rows)
    }
}

/// Per-update degeneracy summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizabilityReport {
    pub translation_eigenvalues: [f64; 3],
    pub rotation_eigenvalues: [f64; 3],
    /// Informative point counts per eigen-axis, translation first.
    pub informative: [usize; 6],
    /// Indices (0..6) of under-constrained eigen-axes.
    pub constrained_axes: Vec<usize>,
}

pub fn build_constraints(
    basis: &Eigenbasis,
    scores: &[Vector6<f64>],
    params: &LocalizabilityParams,
) -> (ConstraintMatrix, LocalizabilityReport) {
    let mut informative = [0usize; 6];
    for s in scores {
        for (axis, count) in informative.iter_mut().enumerate() {
            if s[axis].abs() > params.eta {
                *count += 1;
            }
        }
    }
    let mut rows = Vec::new();
    let mut constrained_axes = Vec::new();
    for (axis, &count) in informative.iter().enumerate() {
        if count >= params.n_min {
            continue;
        }
        constrained_axes.push(axis);
        let mut row = RowVector6::zeros();
        if axis < 3 {
            let v = basis.translation.vectors.column(axis);
            row.fixed_columns_mut::<3>(0).copy_from(&v.transpose());
        } else {
            let v = basis.rotation.vectors.column(axis - 3);
            row.fixed_columns_mut::<3>(3).copy_from(&v.transpose());
        }
        rows.push(row);
    }
    let report = LocalizabilityReport {
        translation_eigenvalues: basis.translation.values.into(),
        rotation_eigenvalues: basis.rotation.values.into(),
        informative,
        constrained_axes,
    };
    (ConstraintMatrix::from_rows(&rows), report)
}

/// Runs the full analysis: Hessian, eigenbasis, scores, constraints.
pub fn analyze(points: &[PointNormal], params: &LocalizabilityParams) -> (ConstraintMatrix, LocalizabilityReport) {
    let h = accumulate(points);
    let basis = Eigenbasis::of(&h);
    let scores = score_points(&basis, points);
    build_constraints(&basis, &scores, params)
}

pub fn project_increment(delta: &Vector6<f64>, c: &ConstraintMatrix) -> Vector6<f64> {
    c.project(delta)
}
