//! Acquisition geometry for a circular cone-beam scan.
//!
//! World frame: origin at the isocenter, `z` is the rotation axis. In-plane
//! rigid motion is `{rz, tx, ty}`, out-of-plane motion is `{rx, ry, tz}`.
//! Detector pixel coordinates `(u, v)` are continuous pixel indices, so the
//! center of pixel `(i, j)` sits at `(i, j)`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Matrix4x3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest homogeneous weight accepted by [`ProjectionMatrix::project`].
pub const MIN_HOMOGENEOUS_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub nu: usize,
    pub nv: usize,
    /// Pixel pitch along `u` in mm.
    pub du: f64,
    /// Pixel pitch along `v` in mm.
    pub dv: f64,
    /// Principal point in pixels.
    pub u0: f64,
    pub v0: f64,
}

impl DetectorSpec {
    /// Detector with the principal point at its geometric center.
    pub fn centered(nu: usize, nv: usize, du: f64, dv: f64) -> Self {
        Self {
            nu,
            nv,
            du,
            dv,
            u0: (nu as f64 - 1.0) / 2.0,
            v0: (nv as f64 - 1.0) / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nu < 2 || self.nv < 2 {
            return Err(Error::validation(
                "detector.nu/nv",
                format!("need at least 2 pixels per axis, got {}x{}", self.nu, self.nv),
            ));
        }
        if !(self.du > 0.0 && self.dv > 0.0) {
            return Err(Error::validation("detector.du/dv", "pixel pitch must be positive"));
        }
        if !(self.u0 >= 0.0 && self.u0 < self.nu as f64) {
            return Err(Error::validation("detector.u0", format!("{} outside [0, nu)", self.u0)));
        }
        if !(self.v0 >= 0.0 && self.v0 < self.nv as f64) {
            return Err(Error::validation("detector.v0", format!("{} outside [0, nv)", self.v0)));
        }
        Ok(())
    }

    /// Metric offset (mm) of pixel coordinate `u` from the principal point.
    #[inline]
    pub fn u_mm(&self, u: f64) -> f64 {
        (u - self.u0) * self.du
    }

    #[inline]
    pub fn v_mm(&self, v: f64) -> f64 {
        (v - self.v0) * self.dv
    }

    /// Half-extent of the sensitive area in mm, measured from the principal
    /// point toward the nearest edge along each axis.
    pub fn half_extent_mm(&self) -> (f64, f64) {
        let u_lo = (self.u0 + 0.5) * self.du;
        let u_hi = (self.nu as f64 - 0.5 - self.u0) * self.du;
        let v_lo = (self.v0 + 0.5) * self.dv;
        let v_hi = (self.nv as f64 - 0.5 - self.v0) * self.dv;
        (u_lo.min(u_hi), v_lo.min(v_hi))
    }

    /// Length of the detector diagonal in mm.
    pub fn diagonal_mm(&self) -> f64 {
        let w = self.nu as f64 * self.du;
        let h = self.nv as f64 * self.dv;
        (w * w + h * h).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircularGeometry {
    /// Source to isocenter distance (mm).
    pub sid: f64,
    /// Source to detector distance (mm).
    pub sdd: f64,
    pub n_views: usize,
    /// Total scan arc in radians.
    pub angular_range: f64,
    pub detector: DetectorSpec,
}

impl Default for CircularGeometry {
    /// 180 views over a full turn, 224 x 64 detector with 2 mm pixels.
    fn default() -> Self {
        Self {
            sid: 750.0,
            sdd: 1200.0,
            n_views: 180,
            angular_range: 2.0 * PI,
            detector: DetectorSpec::centered(224, 64, 2.0, 2.0),
        }
    }
}

impl CircularGeometry {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if !(self.sid > 0.0 && self.sid < self.sdd) {
            return Err(Error::validation(
                "geometry.sid",
                format!("need 0 < sid < sdd, got sid={} sdd={}", self.sid, self.sdd),
            ));
        }
        if self.n_views < 2 {
            return Err(Error::validation("geometry.n_views", "need at least 2 views"));
        }
        if !(self.angular_range > 0.0 && self.angular_range <= 2.0 * PI + 1e-12) {
            return Err(Error::validation(
                "geometry.angular_range",
                format!("{} outside (0, 2pi]", self.angular_range),
            ));
        }
        Ok(())
    }

    pub fn angular_step(&self) -> f64 {
        self.angular_range / self.n_views as f64
    }

    pub fn view_angle(&self, k: usize) -> f64 {
        k as f64 * self.angular_step()
    }

    pub fn magnification(&self) -> f64 {
        self.sdd / self.sid
    }

    /// Intrinsic matrix mapping camera-frame mm to detector pixels.
    pub fn intrinsics(&self) -> Matrix3<f64> {
        let d = &self.detector;
        Matrix3::new(
            self.sdd / d.du,
            0.0,
            d.u0,
            0.0,
            self.sdd / d.dv,
            d.v0,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Radius of the transaxial field of view at the isocenter.
    pub fn fov_radius(&self) -> f64 {
        let (half_u, _) = self.detector.half_extent_mm();
        self.sid * (half_u / self.sdd).atan().sin()
    }
}

/// A 3x4 camera matrix mapping world mm to homogeneous detector pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(pub Matrix3x4<f64>);

impl ProjectionMatrix {
    pub fn new(m: Matrix3x4<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.0
    }

    pub fn left_block(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn homogeneous(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.0 * Vector4::new(x.x, x.y, x.z, 1.0)
    }

    /// Projects a world point to detector pixels.
    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>> {
        let h = self.homogeneous(x);
        if h.z.abs() <= MIN_HOMOGENEOUS_WEIGHT {
            return Err(Error::DegeneratePoint(h.z));
        }
        Ok(Vector2::new(h.x / h.z, h.y / h.z))
    }

    /// Homogeneous weight of `x`; metric depth along the principal ray when
    /// the matrix is normalized.
    pub fn depth(&self, x: &Vector3<f64>) -> f64 {
        let r = self.0.row(2);
        r[0] * x.x + r[1] * x.y + r[2] * x.z + r[3]
    }

    /// Source position: the right null space of the matrix.
    pub fn center(&self) -> Result<Vector3<f64>> {
        let a = self.left_block();
        let b = self.0.column(3).into_owned();
        let inv = a
            .try_inverse()
            .ok_or_else(|| Error::validation("projection matrix", "left 3x3 block is singular"))?;
        Ok(-(inv * b))
    }

    /// Effective camera `P * M`.
    pub fn compose(&self, m: &RigidTransform) -> ProjectionMatrix {
        ProjectionMatrix(self.0 * m.0)
    }

    pub fn scaled(&self, s: f64) -> ProjectionMatrix {
        ProjectionMatrix(self.0 * s)
    }

    /// Rescales so the first three entries of the last row have unit norm
    /// and the world origin (the isocenter) has positive depth.
    pub fn normalized(&self) -> ProjectionMatrix {
        let r = self.0.fixed_view::<1, 3>(2, 0).norm();
        let m = self.0 / r;
        if m[(2, 3)] < 0.0 {
            ProjectionMatrix(-m)
        } else {
            ProjectionMatrix(m)
        }
    }

    /// Moore-Penrose pseudoinverse `P^T (P P^T)^-1`.
    pub fn pseudo_inverse(&self) -> Result<Matrix4x3<f64>> {
        let pt = self.0.transpose();
        let inv = (self.0 * pt)
            .try_inverse()
            .ok_or_else(|| Error::validation("projection matrix", "rank deficient"))?;
        Ok(pt * inv)
    }

    /// Ray through detector pixel `(u, v)`: source position and unit
    /// direction pointing into the half-space of positive depth.
    pub fn ray(&self, u: f64, v: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
        let a = self.left_block();
        let inv = a
            .try_inverse()
            .ok_or_else(|| Error::validation("projection matrix", "left 3x3 block is singular"))?;
        let b = self.0.column(3).into_owned();
        let origin = -(inv * b);
        let mut dir = inv * Vector3::new(u, v, 1.0);
        let n = dir.norm();
        if !(n > 0.0) {
            return Err(Error::DegeneratePoint(0.0));
        }
        dir /= n;
        if a.row(2).transpose().dot(&dir) < 0.0 {
            dir = -dir;
        }
        Ok((origin, dir))
    }
}

/// Ordered list of calibrated views of one circular acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub views: Vec<ProjectionMatrix>,
    pub geometry: CircularGeometry,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Per-view effective cameras `T_i * M_i`.
    pub fn effective(&self, motion: &MotionTrajectory) -> Result<Vec<ProjectionMatrix>> {
        check_lengths(self, motion)?;
        Ok(self
            .views
            .iter()
            .zip(motion.transforms.iter())
            .map(|(p, m)| p.compose(m))
            .collect())
    }

    /// Writes one row per view with the 12 matrix entries in row-major order.
    pub fn to_csv_string(&self) -> String {
        let d = &self.geometry.detector;
        let mut out = format!("# projmat {} {} {} {}\n", d.nu, d.nv, d.du, d.dv);
        for p in &self.views {
            let m = p.matrix();
            let row: Vec<String> = (0..3)
                .flat_map(|r| (0..4).map(move |c| (r, c)))
                .map(|(r, c)| format!("{:.17e}", m[(r, c)]))
                .collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Trajectory> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text).map_err(|e| match e {
            Error::Validation { reason, .. } => Error::format(path, reason),
            other => other,
        })
    }

    /// Parses the CSV form. The circular geometry parameters are recovered
    /// from the matrices (source radius, focal length, principal point and
    /// angular step).
    pub fn from_csv_str(text: &str) -> Result<Trajectory> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::validation("trajectory csv", "empty file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != "#" || fields[1] != "projmat" {
            return Err(Error::validation(
                "trajectory csv",
                format!("expected header '# projmat nu nv du dv', got '{header}'"),
            ));
        }
        let parse_err = |what: &str| Error::validation("trajectory csv", format!("bad {what}"));
        let nu: usize = fields[2].parse().map_err(|_| parse_err("nu"))?;
        let nv: usize = fields[3].parse().map_err(|_| parse_err("nv"))?;
        let du: f64 = fields[4].parse().map_err(|_| parse_err("du"))?;
        let dv: f64 = fields[5].parse().map_err(|_| parse_err("dv"))?;

        let mut views = Vec::new();
        for (i, line) in lines.enumerate() {
            let vals: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|_| parse_err(&format!("row {i}")))?;
            if vals.len() != 12 {
                return Err(Error::validation(
                    "trajectory csv",
                    format!("row {i} has {} entries, expected 12", vals.len()),
                ));
            }
            views.push(ProjectionMatrix(Matrix3x4::from_row_slice(&vals)).normalized());
        }
        if views.len() < 2 {
            return Err(Error::validation("trajectory csv", "need at least 2 views"));
        }

        let p0 = views[0].normalized();
        let a = p0.left_block();
        let kkt = a * a.transpose();
        let u0 = kkt[(0, 2)];
        let v0 = kkt[(1, 2)];
        let fx = (kkt[(0, 0)] - u0 * u0).max(0.0).sqrt();
        let c0 = views[0].center()?;
        let c1 = views[1].center()?;
        let sid = c0.norm();
        let step = c0.cross(&c1).norm().atan2(c0.dot(&c1));
        let geometry = CircularGeometry {
            sid,
            sdd: fx * du,
            n_views: views.len(),
            angular_range: (step * views.len() as f64).min(2.0 * PI),
            detector: DetectorSpec { nu, nv, du, dv, u0, v0 },
        };
        Ok(Trajectory { views, geometry })
    }
}

/// Builds the calibrated circular trajectory.
///
/// View `k` has its source at angle `k * range / n_views` on a circle of
/// radius `sid` in the `z = 0` plane. At angle zero the source sits on the
/// negative `y` axis and the detector `u` axis is parallel to world `x`;
/// detector `v` is parallel to world `z`.
pub fn circular_trajectory(geom: &CircularGeometry) -> Result<Trajectory> {
    geom.validate()?;
    let k = geom.intrinsics();
    let views = (0..geom.n_views)
        .map(|i| {
            let th = geom.view_angle(i);
            let (s, c) = th.sin_cos();
            let source = Vector3::new(geom.sid * s, -geom.sid * c, 0.0);
            let e_u = Vector3::new(c, s, 0.0);
            let e_v = Vector3::new(0.0, 0.0, 1.0);
            let fwd = Vector3::new(-s, c, 0.0);
            let r = Matrix3::from_rows(&[e_u.transpose(), e_v.transpose(), fwd.transpose()]);
            let t = -(r * source);
            let mut rt = Matrix3x4::zeros();
            rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            rt.set_column(3, &t);
            ProjectionMatrix(k * rt)
        })
        .collect();
    Ok(Trajectory {
        views,
        geometry: *geom,
    })
}

/// Rigid parameters in the order `(rx, ry, rz, tx, ty, tz)`; radians and mm.
pub type RigidParams = [f64; 6];

pub const PARAM_NAMES: [&str; 6] = ["rx", "ry", "rz", "tx", "ty", "tz"];

/// Element of SE(3) as a homogeneous 4x4 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform(pub Matrix4<f64>);

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self(m)
    }

    /// `R = Rz(rz) * Ry(ry) * Rx(rx)` followed by translation `(tx, ty, tz)`.
    pub fn from_params(p: &RigidParams) -> Self {
        let [rx, ry, rz, tx, ty, tz] = *p;
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        let r = Matrix3::new(
            cz * cy,
            cz * sy * sx - sz * cx,
            cz * sy * cx + sz * sx,
            sz * cy,
            sz * sy * sx + cz * cx,
            sz * sy * cx - cz * sx,
            -sy,
            cy * sx,
            cy * cx,
        );
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3)
            .copy_from(&Vector3::new(tx, ty, tz));
        Self(m)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_part(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation_part());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self(m)
    }

    /// `self * other` (apply `other` first).
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x + self.translation_part()
    }

    pub fn apply_vector(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x
    }

    /// Checks orthonormality, unit determinant and the homogeneous bottom row.
    pub fn check(&self) -> Result<()> {
        let r = self.rotation();
        let ortho = (r.transpose() * r - Matrix3::identity()).norm();
        let det = r.determinant();
        let row = self.0.row(3);
        if ortho >= 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::validation(
                "rigid transform",
                format!("not a rotation: |R^T R - I| = {ortho:e}, det = {det}"),
            ));
        }
        if row[0] != 0.0 || row[1] != 0.0 || row[2] != 0.0 || row[3] != 1.0 {
            return Err(Error::validation("rigid transform", "bottom row must be (0,0,0,1)"));
        }
        Ok(())
    }
}

/// Per-view patient pose.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionTrajectory {
    pub transforms: Vec<RigidTransform>,
}

impl MotionTrajectory {
    pub fn identity(n_views: usize) -> Self {
        Self {
            transforms: vec![RigidTransform::identity(); n_views],
        }
    }

    pub fn constant(n_views: usize, m: RigidTransform) -> Self {
        Self {
            transforms: vec![m; n_views],
        }
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    /// Per-view `self_i^-1 * other_i`.
    pub fn relative_to(&self, other: &MotionTrajectory) -> Result<MotionTrajectory> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} views", self.len()),
                actual: format!("{} views", other.len()),
            });
        }
        Ok(MotionTrajectory {
            transforms: self
                .transforms
                .iter()
                .zip(&other.transforms)
                .map(|(a, b)| a.inverse().compose(b))
                .collect(),
        })
    }
}

fn check_lengths(traj: &Trajectory, motion: &MotionTrajectory) -> Result<()> {
    if traj.len() != motion.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} motion transforms", traj.len()),
            actual: format!("{}", motion.len()),
        });
    }
    Ok(())
}

/// Virtual 3-D marker positions used for the reprojection error.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerSet {
    points: Vec<Vector3<f64>>,
}

impl MarkerSet {
    /// Accepts points whose transaxial radius lies inside the field of view.
    pub fn new(points: Vec<Vector3<f64>>, geom: &CircularGeometry) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::validation("markers", "marker set is empty"));
        }
        let r_fov = geom.fov_radius();
        for (i, p) in points.iter().enumerate() {
            let r = p.x.hypot(p.y);
            if !(r < r_fov) || !p.z.is_finite() {
                return Err(Error::validation(
                    format!("markers[{i}]"),
                    format!("transaxial radius {r:.2} mm outside field of view {r_fov:.2} mm"),
                ));
            }
        }
        Ok(Self { points })
    }

    /// The 8 corners of a 100 mm cube centered at the isocenter plus the
    /// isocenter itself.
    pub fn default_markers() -> Self {
        let mut points = Vec::with_capacity(9);
        for &x in &[-50.0, 50.0] {
            for &y in &[-50.0, 50.0] {
                for &z in &[-50.0, 50.0] {
                    points.push(Vector3::new(x, y, z));
                }
            }
        }
        points.push(Vector3::zeros());
        Self { points }
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }
}

/// Mean detector displacement of each view's markers, in pixels.
pub fn rpe_per_view(
    traj: &Trajectory,
    motion: &MotionTrajectory,
    markers: &MarkerSet,
) -> Result<Vec<f64>> {
    check_lengths(traj, motion)?;
    let n_markers = markers.points.len() as f64;
    traj.views
        .iter()
        .zip(&motion.transforms)
        .enumerate()
        .map(|(view, (p, m))| {
            let moved = p.compose(m);
            let mut sum = 0.0;
            for (k, x) in markers.points.iter().enumerate() {
                let degenerate = |w: f64| Error::DegenerateProjection { view, marker: k, weight: w };
                let a = moved.project(x).map_err(|_| degenerate(moved.depth(x)))?;
                let b = p.project(x).map_err(|_| degenerate(p.depth(x)))?;
                sum += (a - b).norm();
            }
            Ok(sum / n_markers)
        })
        .collect()
}

/// Reprojection error: mean over views and markers of
/// `|project(T_i M_i, x) - project(T_i, x)|` in detector pixels.
pub fn rpe(traj: &Trajectory, motion: &MotionTrajectory, markers: &MarkerSet) -> Result<f64> {
    let per_view = rpe_per_view(traj, motion, markers)?;
    Ok(per_view.iter().sum::<f64>() / per_view.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_geometry() -> CircularGeometry {
        CircularGeometry {
            sid: 750.0,
            sdd: 1200.0,
            n_views: 36,
            angular_range: 2.0 * PI,
            detector: DetectorSpec::centered(128, 64, 2.0, 2.0),
        }
    }

    #[test]
    fn isocenter_projects_to_principal_point() {
        let g = small_geometry();
        let traj = circular_trajectory(&g).unwrap();
        for p in &traj.views {
            let uv = p.project(&Vector3::zeros()).unwrap();
            assert!((uv.x - g.detector.u0).abs() < 1e-9);
            assert!((uv.y - g.detector.v0).abs() < 1e-9);
        }
    }

    #[test]
    fn axial_offset_follows_magnification() {
        let g = small_geometry();
        let traj = circular_trajectory(&g).unwrap();
        let h = 17.5;
        let uv = traj.views[0].project(&Vector3::new(0.0, 0.0, h)).unwrap();
        let expected = g.detector.v0 + h * (g.sdd / g.detector.dv) / g.sid;
        assert!((uv.y - expected).abs() < 1e-9);
    }

    #[test]
    fn opposite_views_have_antipodal_sources() {
        let g = small_geometry();
        let traj = circular_trajectory(&g).unwrap();
        let half = g.n_views / 2;
        for k in 0..half {
            let s = traj.views[k].center().unwrap() + traj.views[k + half].center().unwrap();
            assert!(s.norm() < 1e-9, "view {k}: {s:?}");
        }
    }

    #[test]
    fn sources_lie_on_the_scan_circle() {
        let g = small_geometry();
        let traj = circular_trajectory(&g).unwrap();
        for p in &traj.views {
            let c = p.center().unwrap();
            assert!((c.norm() - g.sid).abs() < 1e-9);
            assert!(c.z.abs() < 1e-12);
            assert!((p.depth(&Vector3::zeros()) - g.sid).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let mut g = small_geometry();
        g.sdd = 500.0;
        assert!(circular_trajectory(&g).is_err());
        let mut g = small_geometry();
        g.n_views = 1;
        assert!(g.validate().is_err());
        let mut g = small_geometry();
        g.detector.u0 = 200.0;
        assert!(g.validate().is_err());
        let mut g = small_geometry();
        g.angular_range = 7.0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn canonical_camera_projection() {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        let p = ProjectionMatrix(m);
        let uv = p.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(uv, Vector2::new(0.0, 0.0));
        let uv5 = p.scaled(5.0).project(&Vector3::new(0.3, -0.2, 2.0)).unwrap();
        let uv1 = p.project(&Vector3::new(0.3, -0.2, 2.0)).unwrap();
        assert!((uv5 - uv1).norm() < 1e-15);
    }

    #[test]
    fn projection_matches_explicit_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = Matrix3x4::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let p = ProjectionMatrix(m);
            let x = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let xt = [x.x, x.y, x.z, 1.0];
            let dot = |r: usize| (0..4).map(|c| m[(r, c)] * xt[c]).sum::<f64>();
            let w = dot(2);
            if w.abs() < 1e-6 {
                continue;
            }
            let uv = p.project(&x).unwrap();
            assert!((uv.x - dot(0) / w).abs() < 1e-9 * (1.0 + uv.x.abs()));
            assert!((uv.y - dot(1) / w).abs() < 1e-9 * (1.0 + uv.y.abs()));
        }
    }

    #[test]
    fn point_on_principal_plane_is_degenerate() {
        let g = small_geometry();
        let traj = circular_trajectory(&g).unwrap();
        let c = traj.views[0].center().unwrap();
        // a point beside the source, in the plane through it parallel to the detector
        let x = c + Vector3::new(10.0, 0.0, 5.0);
        assert!(matches!(traj.views[0].project(&x), Err(Error::DegeneratePoint(_))));
    }

    #[test]
    fn se3_identity_and_quarter_turn() {
        assert_eq!(RigidTransform::from_params(&[0.0; 6]).0, Matrix4::identity());
        let q = RigidTransform::from_params(&[0.0, 0.0, PI / 2.0, 0.0, 0.0, 0.0]);
        let y = q.apply_point(&Vector3::new(1.0, 0.0, 0.0));
        assert!((y - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn se3_inverse_against_matrix_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let p: RigidParams = std::array::from_fn(|k| {
                if k < 3 {
                    rng.gen_range(-PI..PI)
                } else {
                    rng.gen_range(-100.0..100.0)
                }
            });
            let t = RigidTransform::from_params(&p);
            let generic = t.0.try_inverse().unwrap();
            assert!((t.inverse().0 - generic).norm() < 1e-10);
            assert!((t.compose(&t.inverse()).0 - Matrix4::identity()).norm() < 1e-10);
        }
    }

    #[test]
    fn rpe_zero_for_identity_motion() {
        let g = small_geometry();
        let traj = circular_trajectory(&g).unwrap();
        let m = MotionTrajectory::identity(g.n_views);
        assert_eq!(rpe(&traj, &m, &MarkerSet::default_markers()).unwrap(), 0.0);
    }

    #[test]
    fn rpe_of_detector_parallel_translation() {
        let g = small_geometry();
        let traj = circular_trajectory(&g).unwrap();
        let markers = MarkerSet::new(vec![Vector3::zeros()], &g).unwrap();
        let d = 3.0;
        let m = MotionTrajectory::constant(g.n_views, RigidTransform::translation(Vector3::new(d, 0.0, 0.0)));
        let per_view = rpe_per_view(&traj, &m, &markers).unwrap();
        let expected = d * (g.sdd / g.detector.du) / g.sid;
        assert!((per_view[0] - expected).abs() < 1e-9);

        let m2 = MotionTrajectory::constant(g.n_views, RigidTransform::translation(Vector3::new(2.0 * d, 0.0, 0.0)));
        let per_view2 = rpe_per_view(&traj, &m2, &markers).unwrap();
        assert!((per_view2[0] - 2.0 * per_view[0]).abs() < 1e-9);
    }

    #[test]
    fn rpe_length_mismatch() {
        let g = small_geometry();
        let traj = circular_trajectory(&g).unwrap();
        let m = MotionTrajectory::identity(3);
        assert!(matches!(
            rpe(&traj, &m, &MarkerSet::default_markers()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn rpe_reports_degenerate_marker() {
        let g = small_geometry();
        let traj = circular_trajectory(&g).unwrap();
        let markers = MarkerSet::new(vec![Vector3::zeros()], &g).unwrap();
        // moving the isocenter onto the principal plane of view 0
        let m = MotionTrajectory::constant(g.n_views, RigidTransform::translation(Vector3::new(0.0, -g.sid, 0.0)));
        let err = rpe(&traj, &m, &markers).unwrap_err();
        assert!(matches!(err, Error::DegenerateProjection { view: 0, marker: 0, .. }), "{err}");
    }

    #[test]
    fn marker_set_rejects_points_outside_fov() {
        let g = small_geometry();
        assert!(MarkerSet::new(vec![], &g).is_err());
        assert!(MarkerSet::new(vec![Vector3::new(500.0, 0.0, 0.0)], &g).is_err());
        let markers = MarkerSet::default_markers();
        assert_eq!(markers.points().len(), 9);
    }

    #[test]
    fn csv_round_trip_recovers_geometry() {
        let g = small_geometry();
        let traj = circular_trajectory(&g).unwrap();
        let back = Trajectory::from_csv_str(&traj.to_csv_string()).unwrap();
        assert_eq!(back.len(), traj.len());
        for (a, b) in back.views.iter().zip(&traj.views) {
            assert!((a.0 - b.0).norm() < 1e-9);
        }
        let bg = back.geometry;
        assert!((bg.sid - g.sid).abs() < 1e-6);
        assert!((bg.sdd - g.sdd).abs() < 1e-6);
        assert!((bg.detector.u0 - g.detector.u0).abs() < 1e-6);
        assert!((bg.angular_range - g.angular_range).abs() < 1e-9);
        assert!(Trajectory::from_csv_str("# projmat 1 2\n").is_err());
    }

    #[test]
    fn ray_passes_through_pixel() {
        let g = small_geometry();
        let traj = circular_trajectory(&g).unwrap();
        let p = traj.views[5].compose(&RigidTransform::from_params(&[0.02, -0.01, 0.1, 3.0, -2.0, 4.0]));
        let (o, d) = p.ray(40.25, 20.5).unwrap();
        let x = o + d * 700.0;
        let uv = p.project(&x).unwrap();
        assert!((uv - Vector2::new(40.25, 20.5)).norm() < 1e-9);
        assert!(p.depth(&x) > 0.0);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn se3_output_is_rigid(
            rx in -10.0..10.0f64, ry in -10.0..10.0f64, rz in -10.0..10.0f64,
            tx in -1e3..1e3f64, ty in -1e3..1e3f64, tz in -1e3..1e3f64,
        ) {
            prop_assert!(RigidTransform::from_params(&[rx, ry, rz, tx, ty, tz]).check().is_ok());
        }
    }

    proptest! {
        #[test]
        fn projection_is_scale_invariant(s in prop::sample::select(vec![-7.0, -0.5, 1e-3, 2.0, 5.0, 1e4]),
                                         x in -80.0..80.0f64, y in -80.0..80.0f64, z in -40.0..40.0f64) {
            let g = tests::small_geometry();
            let traj = circular_trajectory(&g).unwrap();
            let p = traj.views[7];
            let a = p.project(&Vector3::new(x, y, z)).unwrap();
            let b = p.scaled(s).project(&Vector3::new(x, y, z)).unwrap();
            prop_assert!((a - b).norm() < 1e-9);
        }

        #[test]
        fn rpe_is_nonnegative(rx in -0.1..0.1f64, tz in -20.0..20.0f64, tx in -20.0..20.0f64) {
            let g = tests::small_geometry();
            let traj = circular_trajectory(&g).unwrap();
            let m = MotionTrajectory::constant(g.n_views, RigidTransform::from_params(&[rx, 0.0, 0.0, tx, 0.0, tz]));
            prop_assert!(rpe(&traj, &m, &MarkerSet::default_markers()).unwrap() >= 0.0);
        }
    }
}
