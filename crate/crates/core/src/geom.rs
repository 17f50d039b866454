//! Geometric primitives shared by every stage: labeled point clouds, rigid
//! transforms, the least-squares rigid solver and principal axes.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Quaternion, SymmetricEigen, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A position in millimetres.
pub type Point3 = Vector3<f64>;

/// Label value for points that belong to no branch.
pub const UNASSIGNED: i32 = -1;
/// Label value for sternum points.
pub const STERNUM: i32 = 0;

/// An ordered set of points with one integer label per point.
///
/// Label 0 marks the sternum, 1.. mark cartilage branches and -1 marks
/// unassigned points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub labels: Vec<i32>,
}

impl PointCloud {
    /// Unlabeled cloud (every label is [`UNASSIGNED`]).
    pub fn new(points: Vec<Point3>) -> Self {
        let labels = vec![UNASSIGNED; points.len()];
        Self { points, labels }
    }

    pub fn with_labels(points: Vec<Point3>, labels: Vec<i32>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l < UNASSIGNED) {
            return Err(Error::InvalidParams(format!("label {bad} out of range")));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidParams("non-finite coordinate".into()));
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points carrying `label`, in input order.
    pub fn with_label(&self, label: i32) -> PointCloud {
        self.filter(|_, l| l == label)
    }

    pub fn filter(&self, mut keep: impl FnMut(usize, i32) -> bool) -> PointCloud {
        let mut out = PointCloud::default();
        for (i, (p, &l)) in self.points.iter().zip(&self.labels).enumerate() {
            if keep(i, l) {
                out.points.push(*p);
                out.labels.push(l);
            }
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Distinct labels in ascending order.
    pub fn label_set(&self) -> Vec<i32> {
        let mut labels = self.labels.clone();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    pub fn push(&mut self, p: Point3, label: i32) {
        self.points.push(p);
        self.labels.push(label);
    }

    /// Axis-aligned bounding box `(min, max)`; `None` when empty.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(
            self.points
                .iter()
                .fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))),
        )
    }
}

/// Rotation followed by translation: `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        if !t.is_valid(1e-9) {
            return Err(Error::InvalidParams(
                "rotation is not orthonormal with determinant +1".into(),
            ));
        }
        Ok(t)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation =
            nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
                .into_inner();
        Self {
            rotation,
            translation,
        }
    }

    /// Orthonormality and determinant check at tolerance `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max() <= tol;
        ortho
            && (r.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|c| c.is_finite())
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0)
            .clamp(-1.0, 1.0)
            .acos()
    }

    /// Row-major 3×3 rotation followed by the translation vector.
    pub fn to_row_major(&self) -> ([f64; 9], [f64; 3]) {
        let r = &self.rotation;
        (
            [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            [self.translation.x, self.translation.y, self.translation.z],
        )
    }
}

pub fn centroid(cloud: &PointCloud) -> Result<Point3> {
    centroid_of(&cloud.points)
}

pub fn centroid_of(points: &[Point3]) -> Result<Point3> {
    if points.is_empty() {
        return Err(Error::EmptyInput("centroid of an empty cloud"));
    }
    let sum = points.iter().fold(Vector3::zeros(), |acc, p| acc + p);
    Ok(sum / points.len() as f64)
}

/// Least-squares rigid fit mapping `source[i]` onto `target[i]`.
///
/// The rotation is the unit quaternion maximizing Horn's 4×4 symmetric
/// form of the cross-covariance, which is always a proper rotation and
/// stays accurate for nearly collinear inputs. The cross-covariance
/// singular values decide degeneracy.
pub fn fit_rigid(source: &PointCloud, target: &PointCloud) -> Result<RigidTransform> {
    fit_rigid_points(&source.points, &target.points)
}

pub fn fit_rigid_points(source: &[Point3], target: &[Point3]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::PairMismatch {
            source_len: source.len(),
            target_len: target.len(),
        });
    }
    if source.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "rigid fit needs at least 3 pairs, got {}",
            source.len()
        )));
    }
    let cs = centroid_of(source)?;
    let ct = centroid_of(target)?;
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s - cs) * (t - ct).transpose();
    }
    let mut sv = h.singular_values();
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::DegenerateGeometry(
            "paired points are collinear or coincident".into(),
        ));
    }
    let rotation = horn_rotation(&h);
    if !rotation.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalFailure(
            "rigid fit produced non-finite rotation".into(),
        ));
    }
    Ok(RigidTransform {
        rotation,
        translation: ct - rotation * cs,
    })
}

fn horn_rotation(h: &Matrix3<f64>) -> Matrix3<f64> {
    let (xx, xy, xz) = (h[(0, 0)], h[(0, 1)], h[(0, 2)]);
    let (yx, yy, yz) = (h[(1, 0)], h[(1, 1)], h[(1, 2)]);
    let (zx, zy, zz) = (h[(2, 0)], h[(2, 1)], h[(2, 2)]);
    #[rustfmt::skip]
    let n = Matrix4::new(
        xx + yy + zz, yz - zy,      zx - xz,      xy - yx,
        yz - zy,      xx - yy - zz, xy + yx,      zx + xz,
        zx - xz,      xy + yx,      yy - xx - zz, yz + zy,
        xy - yx,      zx + xz,      yz + zy,      zz - xx - yy,
    );
    let eig = n.symmetric_eigen();
    let q = eig.eigenvectors.column(eig.eigenvalues.imax());
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner()
}

/// Mean squared distance between `transform(source[i])` and `target[i]`.
pub fn rigid_residual(transform: &RigidTransform, source: &[Point3], target: &[Point3]) -> f64 {
    let n = source.len().max(1) as f64;
    source
        .iter()
        .zip(target)
        .map(|(s, t)| (transform.apply_point(s) - t).norm_squared())
        .sum::<f64>()
        / n
}

pub fn apply(transform: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| transform.apply_point(p))
            .collect(),
        labels: cloud.labels.clone(),
    }
}

/// Principal axes of a cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrincipalAxes {
    pub center: Point3,
    /// Unit axes as columns, ordered by descending eigenvalue, right-handed.
    pub axes: Matrix3<f64>,
    pub eigenvalues: Vector3<f64>,
}

impl PrincipalAxes {
    pub fn axis(&self, i: usize) -> Vector3<f64> {
        self.axes.column(i).into_owned()
    }
}

/// Population covariance of a point set.
pub fn covariance(points: &[Point3]) -> Result<(Point3, Matrix3<f64>)> {
    let c = centroid_of(points)?;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    Ok((c, cov / points.len() as f64))
}

/// PCA of a cloud. Collinear input is accepted (trailing eigenvalues are 0);
/// only a zero covariance is rejected.
pub fn pca_axes(cloud: &PointCloud) -> Result<PrincipalAxes> {
    pca_of(&cloud.points)
}

pub fn pca_of(points: &[Point3]) -> Result<PrincipalAxes> {
    let (center, cov) = covariance(points)?;
    if !(cov.trace() > 0.0) {
        return Err(Error::DegenerateGeometry("zero covariance".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Matrix3::zeros();
    let mut eigenvalues = Vector3::zeros();
    for (col, &k) in order.iter().enumerate() {
        axes.set_column(col, &eig.eigenvectors.column(k));
        eigenvalues[col] = eig.eigenvalues[k].max(0.0);
    }
    let third = axes.column(0).cross(&axes.column(1));
    axes.set_column(2, &third.normalize());
    Ok(PrincipalAxes {
        center,
        axes,
        eigenvalues,
    })
}

/// Parse the XYZL text format: `x y z [label]` per line, `#` comments.
pub fn parse_xyzl(text: &str, origin: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(err(format!("expected 3 or 4 fields, got {}", fields.len())));
        }
        let mut xyz = [0.0; 3];
        for (slot, f) in xyz.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .map_err(|e| err(format!("bad coordinate {f:?}: {e}")))?;
            if !slot.is_finite() {
                return Err(err(format!("non-finite coordinate {f:?}")));
            }
        }
        let label = match fields.get(3) {
            Some(f) => f
                .parse::<i32>()
                .map_err(|e| err(format!("bad label {f:?}: {e}")))?,
            None => UNASSIGNED,
        };
        points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
        labels.push(label);
    }
    PointCloud::with_labels(points, labels)
}

pub fn format_xyzl(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 48);
    out.push_str("# x y z label\n");
    for (p, l) in cloud.points.iter().zip(&cloud.labels) {
        let _ = writeln!(out, "{} {} {} {}", p.x, p.y, p.z, l);
    }
    out
}

pub fn read_xyzl(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyzl(&text, &path.display().to_string())
}

pub fn write_xyzl(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_xyzl(cloud)).map_err(|e| Error::io(path, e))
}
