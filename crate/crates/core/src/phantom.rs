//! Analytic ellipsoid phantoms, exact cone-beam line integrals, and the
//! projection-stack and volume containers shared by the other modules.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DetectorSpec, MotionTrajectory, RigidTransform, Trajectory};

/// One ellipsoid; densities of overlapping ellipsoids add.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// Center in mm.
    pub center: [f64; 3],
    /// Semi-axes in mm, in the ellipsoid's own frame.
    pub semi_axes: [f64; 3],
    /// Orientation as `(rx, ry, rz)` radians, same ZYX convention as
    /// [`RigidTransform::from_params`].
    #[serde(default)]
    pub euler: [f64; 3],
    /// Attenuation in 1/mm; negative values carve nested structures.
    pub density: f64,
}

impl Ellipsoid {
    pub fn ball(center: [f64; 3], radius: f64, density: f64) -> Self {
        Self {
            center,
            semi_axes: [radius; 3],
            euler: [0.0; 3],
            density,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.semi_axes.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::validation("ellipsoid.semi_axes", "must be strictly positive"));
        }
        if !self.density.is_finite() || self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::validation("ellipsoid", "non-finite center or density"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let [rx, ry, rz] = self.euler;
        RigidTransform::from_params(&[rx, ry, rz, 0.0, 0.0, 0.0]).rotation()
    }
}

/// Ellipsoid prepared for intersection tests: world to unit-sphere map.
#[derive(Debug, Clone, Copy)]
struct Canonical {
    center: Vector3<f64>,
    /// `diag(1/a) * R^T`
    to_unit: Matrix3<f64>,
    density: f64,
}

impl Canonical {
    fn new(e: &Ellipsoid) -> Self {
        let inv_axes = Matrix3::from_diagonal(&Vector3::new(
            1.0 / e.semi_axes[0],
            1.0 / e.semi_axes[1],
            1.0 / e.semi_axes[2],
        ));
        Self {
            center: Vector3::from(e.center),
            to_unit: inv_axes * e.rotation().transpose(),
            density: e.density,
        }
    }

    /// Chord length of the ray `origin + t * dir` (`|dir| = 1`).
    #[inline]
    fn chord(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
        let p = self.to_unit * (origin - self.center);
        let d = self.to_unit * dir;
        let a = d.norm_squared();
        let b = p.dot(&d);
        let c = p.norm_squared() - 1.0;
        let disc = b * b - a * c;
        if disc <= 0.0 {
            0.0
        } else {
            2.0 * disc.sqrt() / a
        }
    }

    #[inline]
    fn contains(&self, x: &Vector3<f64>) -> bool {
        (self.to_unit * (x - self.center)).norm_squared() <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub ellipsoids: Vec<Ellipsoid>,
}

impl Phantom {
    pub fn new(ellipsoids: Vec<Ellipsoid>) -> Result<Self> {
        let p = Self { ellipsoids };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ellipsoids.is_empty() {
            return Err(Error::validation("phantom.ellipsoids", "phantom is empty"));
        }
        for (i, e) in self.ellipsoids.iter().enumerate() {
            e.validate().map_err(|err| match err {
                Error::Validation { field, reason } => {
                    Error::validation(format!("phantom.ellipsoids[{i}].{field}"), reason)
                }
                other => other,
            })?;
        }
        Ok(())
    }

    /// Head-like default: a dense skull shell (0.5) around a brain (0.2)
    /// with three small off-center inserts of +/-0.1.
    pub fn default_head() -> Self {
        let skull = Ellipsoid {
            center: [0.0, 0.0, 0.0],
            semi_axes: [85.0, 105.0, 95.0],
            euler: [0.0; 3],
            density: 0.5,
        };
        let brain = Ellipsoid {
            center: [0.0, 0.0, 0.0],
            semi_axes: [79.0, 99.0, 89.0],
            euler: [0.0; 3],
            density: -0.3,
        };
        Self {
            ellipsoids: vec![
                skull,
                brain,
                Ellipsoid::ball([30.0, 40.0, 0.0], 12.0, 0.1),
                Ellipsoid::ball([-35.0, -20.0, 8.0], 15.0, -0.1),
                Ellipsoid::ball([12.0, -55.0, -6.0], 10.0, 0.1),
            ],
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut p = self.clone();
        for e in &mut p.ellipsoids {
            e.density *= factor;
        }
        p
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        let mut p = self.clone();
        for e in &mut p.ellipsoids {
            for k in 0..3 {
                e.center[k] += t[k];
            }
        }
        p
    }

    /// Largest distance from the isocenter of any ellipsoid surface point
    /// in the `xy` plane (bounding-sphere estimate).
    pub fn transaxial_radius(&self) -> f64 {
        self.ellipsoids
            .iter()
            .map(|e| e.center[0].hypot(e.center[1]) + e.semi_axes.iter().cloned().fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }

    fn canonical(&self) -> Vec<Canonical> {
        self.ellipsoids.iter().map(Canonical::new).collect()
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Phantom = serde_json::from_str(&text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Line integral of the phantom along `origin + t * direction`, `t` over
/// the whole real line.
pub fn line_integral(phantom: &Phantom, origin: &Vector3<f64>, direction: &Vector3<f64>) -> Result<f64> {
    let n = direction.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::validation("direction", format!("not a unit vector (norm {n})")));
    }
    Ok(phantom
        .canonical()
        .iter()
        .map(|e| e.density * e.chord(origin, direction))
        .sum())
}

/// Measured line integrals, `n_views x nv x nu`, view-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    pub detector: DetectorSpec,
    pub n_views: usize,
    pub data: Vec<f32>,
}

impl ProjectionStack {
    pub fn zeros(detector: DetectorSpec, n_views: usize) -> Self {
        Self {
            detector,
            n_views,
            data: vec![0.0; n_views * detector.nu * detector.nv],
        }
    }

    pub fn view_len(&self) -> usize {
        self.detector.nu * self.detector.nv
    }

    pub fn view(&self, i: usize) -> &[f32] {
        let n = self.view_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn view_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.view_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    #[inline]
    pub fn at(&self, view: usize, v: usize, u: usize) -> f32 {
        self.data[(view * self.detector.nv + v) * self.detector.nu + u]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.n_views * self.view_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", self.n_views * self.view_len()),
                actual: format!("{}", self.data.len()),
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("projection stack", "non-finite value"));
        }
        Ok(())
    }

    pub fn scaled(&self, a: f32) -> Self {
        let mut s = self.clone();
        s.data.iter_mut().for_each(|v| *v *= a);
        s
    }

    /// Adds zero-mean Gaussian noise with standard deviation `sigma`.
    pub fn add_gaussian_noise(&mut self, sigma: f64, seed: u64) -> Result<()> {
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| Error::validation("noise_sigma", e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut self.data {
            *v += normal.sample(&mut rng) as f32;
        }
        Ok(())
    }
}

/// Regular voxel grid; `origin` is the center of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    /// Grid centered on the isocenter.
    pub fn centered(nx: usize, ny: usize, nz: usize, spacing: [f64; 3]) -> Self {
        let half = |n: usize, s: f64| -(n as f64 - 1.0) / 2.0 * s;
        Self {
            nx,
            ny,
            nz,
            spacing,
            origin: [half(nx, spacing[0]), half(ny, spacing[1]), half(nz, spacing[2])],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::validation("grid", "dimensions must be nonzero"));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::validation("grid.spacing", "must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn position(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + ix as f64 * self.spacing[0],
            self.origin[1] + iy as f64 * self.spacing[1],
            self.origin[2] + iz as f64 * self.spacing[2],
        )
    }

    /// The single axial plane `z = 0` with this grid's in-plane layout.
    pub fn central_plane(&self) -> Grid {
        Grid {
            nz: 1,
            origin: [self.origin[0], self.origin[1], 0.0],
            ..*self
        }
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }
}

/// Reconstructed or voxelized attenuation values, `x` fastest, `z` slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            data: vec![0.0; grid.len()],
            grid,
        }
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.grid.ny + iy) * self.grid.nx + ix
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f32 {
        self.data[self.index(ix, iy, iz)]
    }

    pub fn slice(&self, iz: usize) -> &[f32] {
        let n = self.grid.slice_len();
        &self.data[iz * n..(iz + 1) * n]
    }

    /// The axial slice nearest to `z = 0`.
    pub fn central_slice(&self) -> &[f32] {
        let iz = (-self.grid.origin[2] / self.grid.spacing[2]).round();
        let iz = (iz.max(0.0) as usize).min(self.grid.nz - 1);
        self.slice(iz)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.data.len() != self.grid.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} voxels", self.grid.len()),
                actual: format!("{}", self.data.len()),
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("volume", "non-finite value"));
        }
        Ok(())
    }
}

/// Simulates the acquisition: pixel `(u, v)` of view `i` is the line
/// integral along the ray of the effective camera `T_i * M_i`, which sees
/// the object moved by `M_i`.
pub fn forward_project(
    phantom: &Phantom,
    traj: &Trajectory,
    motion: &MotionTrajectory,
) -> Result<ProjectionStack> {
    let det = traj.geometry.detector;
    forward_project_rows(phantom, traj, motion, 0..det.nv)
}

/// As [`forward_project`], but only detector rows in `rows` are simulated;
/// the others stay zero.
pub fn forward_project_rows(
    phantom: &Phantom,
    traj: &Trajectory,
    motion: &MotionTrajectory,
    rows: std::ops::Range<usize>,
) -> Result<ProjectionStack> {
    forward_project_integrated(phantom, traj, motion, rows, 1)
}

/// Default rays per pixel axis for simulated acquisitions.
pub const DETECTOR_SUBSAMPLES: usize = 3;

/// Pixel-integrating projector: each detector pixel averages the line
/// integrals of `subsamples x subsamples` rays spread evenly over its area.
/// `subsamples = 1` is the pixel-center projector.
pub fn forward_project_integrated(
    phantom: &Phantom,
    traj: &Trajectory,
    motion: &MotionTrajectory,
    rows: std::ops::Range<usize>,
    subsamples: usize,
) -> Result<ProjectionStack> {
    phantom.validate()?;
    if subsamples == 0 {
        return Err(Error::validation("simulation.detector_subsamples", "must be at least 1"));
    }
    let det = traj.geometry.detector;
    let cams = traj.effective(motion)?;
    let ells = phantom.canonical();
    let rows = rows.start.min(det.nv)..rows.end.min(det.nv);
    let offsets: Vec<f64> = (0..subsamples)
        .map(|k| (k as f64 + 0.5) / subsamples as f64 - 0.5)
        .collect();
    let norm = 1.0 / (subsamples * subsamples) as f64;
    let views: Vec<Vec<f32>> = cams
        .par_iter()
        .map(|cam| -> Result<Vec<f32>> {
            let mut out = vec![0.0f32; det.nu * det.nv];
            let a_inv = cam
                .left_block()
                .try_inverse()
                .ok_or_else(|| Error::validation("projection matrix", "left 3x3 block is singular"))?;
            let (origin, _) = cam.ray(det.u0, det.v0)?;
            let fwd = cam.left_block().row(2).transpose();
            for v in rows.clone() {
                for u in 0..det.nu {
                    let mut acc = 0.0;
                    for &dv in &offsets {
                        for &du in &offsets {
                            let mut dir = a_inv * Vector3::new(u as f64 + du, v as f64 + dv, 1.0);
                            let n = dir.norm();
                            if !(n > 0.0) {
                                return Err(Error::DegeneratePoint(0.0));
                            }
                            dir /= n;
                            if fwd.dot(&dir) < 0.0 {
                                dir = -dir;
                            }
                            for e in &ells {
                                acc += e.density * e.chord(&origin, &dir);
                            }
                        }
                    }
                    out[v * det.nu + u] = (acc * norm) as f32;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(ProjectionStack {
        detector: det,
        n_views: traj.len(),
        data: views.concat(),
    })
}

/// Samples the phantom density at every voxel center.
pub fn voxelize(phantom: &Phantom, grid: &Grid) -> Result<Volume> {
    grid.validate()?;
    let ells = phantom.canonical();
    let mut vol = Volume::zeros(*grid);
    let n = grid.slice_len();
    vol.data
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(iz, slab)| {
            for iy in 0..grid.ny {
                for ix in 0..grid.nx {
                    let x = grid.position(ix, iy, iz);
                    let d: f64 = ells.iter().filter(|e| e.contains(&x)).map(|e| e.density).sum();
                    slab[iy * grid.nx + ix] = d as f32;
                }
            }
        });
    Ok(vol)
}

/// Voxels inside the union of the phantom's ellipsoids.
pub fn support_mask(phantom: &Phantom, grid: &Grid) -> Vec<bool> {
    let ells = phantom.canonical();
    let mut mask = Vec::with_capacity(grid.len());
    for iz in 0..grid.nz {
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let x = grid.position(ix, iy, iz);
                mask.push(ells.iter().any(|e| e.contains(&x)));
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{circular_trajectory, CircularGeometry};
    use rand::Rng;
    use std::f64::consts::PI;

    fn unit_ball() -> Phantom {
        Phantom::new(vec![Ellipsoid::ball([0.0; 3], 1.0, 1.0)]).unwrap()
    }

    fn small_geometry(n_views: usize) -> CircularGeometry {
        CircularGeometry {
            sid: 750.0,
            sdd: 1200.0,
            n_views,
            angular_range: 2.0 * PI,
            detector: DetectorSpec::centered(96, 24, 3.0, 3.0),
        }
    }

    /// Midpoint-rule ray marching with a fixed step.
    fn ray_march(p: &Phantom, o: &Vector3<f64>, d: &Vector3<f64>, step: f64, half_len: f64) -> f64 {
        let ells = p.canonical();
        let n = (2.0 * half_len / step).round() as usize;
        let mut acc = 0.0;
        for k in 0..n {
            let t = -half_len + (k as f64 + 0.5) * step;
            let x = o + d * t;
            acc += ells.iter().filter(|e| e.contains(&x)).map(|e| e.density).sum::<f64>();
        }
        acc * step
    }

    #[test]
    fn chord_basics() {
        let p = unit_ball();
        let miss = line_integral(&p, &Vector3::new(0.0, 5.0, 0.0), &Vector3::x()).unwrap();
        assert_eq!(miss, 0.0);
        let center = line_integral(&p, &Vector3::new(-10.0, 0.0, 0.0), &Vector3::x()).unwrap();
        assert!((center - 2.0).abs() < 1e-12);
    }

    #[test]
    fn offset_chord_matches_geometry() {
        let r = 20.0;
        let density = 0.7;
        let p = Phantom::new(vec![Ellipsoid::ball([0.0; 3], r, density)]).unwrap();
        for &b in &[0.0, 5.0, 12.5, 19.0] {
            let li = line_integral(&p, &Vector3::new(-100.0, b, 0.0), &Vector3::x()).unwrap();
            let expected = 2.0 * (r * r - b * b).sqrt() * density;
            assert!((li - expected).abs() < 1e-10);
            let marched = ray_march(&p, &Vector3::new(0.0, b, 0.0), &Vector3::x(), 0.001, 30.0);
            assert!((marched - expected).abs() < 1e-2);
        }
    }

    #[test]
    fn non_unit_direction_rejected() {
        let err = line_integral(&unit_ball(), &Vector3::zeros(), &Vector3::new(1.0, 1.0, 0.0));
        assert!(matches!(err, Err(Error::Validation { .. })));
    }

    #[test]
    fn line_integral_matches_ray_marching_on_random_rays() {
        let p = Phantom::default_head();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 100 {
            let o = Vector3::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), rng.gen_range(-30.0..30.0));
            let d = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3)).normalize();
            let exact = line_integral(&p, &o, &d).unwrap();
            if exact.abs() < 1.0 {
                continue;
            }
            let marched = ray_march(&p, &o, &d, 0.02, 200.0);
            assert!(((marched - exact) / exact).abs() < 1e-3, "{exact} vs {marched}");
            checked += 1;
        }
    }

    #[test]
    fn mirrored_views_are_mirror_images() {
        let g = small_geometry(24);
        let traj = circular_trajectory(&g).unwrap();
        let p = Phantom::new(vec![
            Ellipsoid { center: [0.0, 10.0, 0.0], semi_axes: [40.0, 60.0, 30.0], euler: [0.0; 3], density: 0.3 },
            Ellipsoid::ball([20.0, 0.0, 5.0], 10.0, 0.2),
            Ellipsoid::ball([-20.0, 0.0, 5.0], 10.0, 0.2),
        ])
        .unwrap();
        let stack = forward_project(&p, &traj, &MotionTrajectory::identity(g.n_views)).unwrap();
        let det = g.detector;
        for k in 1..g.n_views / 2 {
            let m = g.n_views - k;
            for v in 0..det.nv {
                for u in 0..det.nu {
                    let a = stack.at(k, v, u);
                    let b = stack.at(m, v, det.nu - 1 - u);
                    assert!((a - b).abs() < 1e-5 * (1.0 + a.abs()), "view {k} ({u},{v}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn zero_density_gives_zero_stack() {
        let g = small_geometry(8);
        let traj = circular_trajectory(&g).unwrap();
        let p = Phantom::default_head().scaled(0.0);
        let stack = forward_project(&p, &traj, &MotionTrajectory::identity(8)).unwrap();
        assert!(stack.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_density_doubles_projections() {
        let g = small_geometry(6);
        let traj = circular_trajectory(&g).unwrap();
        let id = MotionTrajectory::identity(6);
        let p = Phantom::default_head();
        let a = forward_project(&p, &traj, &id).unwrap();
        let b = forward_project(&p.scaled(2.0), &traj, &id).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn integrated_projector_bins_a_finer_detector() {
        let g = small_geometry(3);
        let traj = circular_trajectory(&g).unwrap();
        let mut fine_g = g.clone();
        fine_g.detector = DetectorSpec::centered(2 * 96, 2 * 24, 1.5, 1.5);
        let fine_traj = circular_trajectory(&fine_g).unwrap();
        let p = Phantom::default_head();
        let m = MotionTrajectory::constant(3, RigidTransform::from_params(&[0.02, -0.01, 0.05, 3.0, -2.0, 1.0]));
        let coarse = forward_project_integrated(&p, &traj, &m, 0..24, 2).unwrap();
        let fine = forward_project(&p, &fine_traj, &m).unwrap();
        for k in 0..3 {
            for v in 0..24 {
                for u in 0..96 {
                    let f = |a: usize, b: usize| fine.data[k * 192 * 48 + (2 * v + a) * 192 + 2 * u + b] as f64;
                    let binned = 0.25 * (f(0, 0) + f(0, 1) + f(1, 0) + f(1, 1));
                    let got = coarse.data[k * 96 * 24 + v * 96 + u] as f64;
                    assert!((got - binned).abs() < 1e-4 * (1.0 + binned.abs()), "{got} vs {binned}");
                }
            }
        }
        let single = forward_project_integrated(&p, &traj, &m, 0..24, 1).unwrap();
        assert_eq!(single, forward_project(&p, &traj, &m).unwrap());
        assert!(forward_project_integrated(&p, &traj, &m, 0..24, 0).is_err());
    }

    #[test]
    fn object_motion_equals_camera_motion() {
        let g = small_geometry(10);
        let traj = circular_trajectory(&g).unwrap();
        let p = Phantom::default_head();
        let t = [4.0, -3.0, 2.5];
        let moved = forward_project(&p.translated(t), &traj, &MotionTrajectory::identity(10)).unwrap();
        let m = MotionTrajectory::constant(10, RigidTransform::translation(Vector3::from(t)));
        let via_camera = forward_project(&p, &traj, &m).unwrap();
        for (a, b) in moved.data.iter().zip(&via_camera.data) {
            assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn object_motion_equals_camera_motion_for_random_rigid_transforms() {
        let g = small_geometry(4);
        let traj = circular_trajectory(&g).unwrap();
        let p = Phantom::default_head();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let params = [
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            ];
            let m = RigidTransform::from_params(&params);
            // apply M to every ellipsoid: new center M c, new rotation R_M R_e
            let mut moved = p.clone();
            for e in &mut moved.ellipsoids {
                let c = m.apply_point(&Vector3::from(e.center));
                e.center = [c.x, c.y, c.z];
                let r = m.rotation() * e.rotation();
                // recover ZYX angles
                let ry = (-r[(2, 0)]).asin();
                let rx = r[(2, 1)].atan2(r[(2, 2)]);
                let rz = r[(1, 0)].atan2(r[(0, 0)]);
                e.euler = [rx, ry, rz];
            }
            let a = forward_project(&moved, &traj, &MotionTrajectory::identity(4)).unwrap();
            let b = forward_project(&p, &traj, &MotionTrajectory::constant(4, m)).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-5 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn voxelize_values_and_mass() {
        let p = unit_ball();
        let g = Grid::centered(3, 3, 3, [1.0; 3]);
        let v = voxelize(&p, &g).unwrap();
        assert_eq!(v.at(1, 1, 1), 1.0);
        let far = voxelize(&p, &Grid { origin: [50.0, 50.0, 50.0], ..g }).unwrap();
        assert!(far.data.iter().all(|&x| x == 0.0));

        let r = 20.0;
        let ball = Phantom::new(vec![Ellipsoid::ball([0.0; 3], r, 0.8)]).unwrap();
        let g = Grid::centered(64, 64, 64, [0.7; 3]);
        let v = voxelize(&ball, &g).unwrap();
        let mass: f64 = v.data.iter().map(|&x| x as f64).sum::<f64>() * g.voxel_volume();
        let exact = 4.0 / 3.0 * PI * r.powi(3) * 0.8;
        assert!(((mass - exact) / exact).abs() < 0.02, "{mass} vs {exact}");
    }

    #[test]
    fn phantom_validation() {
        assert!(Phantom::new(vec![]).is_err());
        let bad = Ellipsoid { semi_axes: [1.0, 0.0, 1.0], ..Ellipsoid::ball([0.0; 3], 1.0, 1.0) };
        let err = Phantom::new(vec![Ellipsoid::ball([0.0; 3], 1.0, 1.0), bad]).unwrap_err();
        assert!(err.to_string().contains("ellipsoids[1]"), "{err}");
    }

    #[test]
    fn phantom_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phantom.json");
        let p = Phantom::default_head();
        p.write_json(&path).unwrap();
        assert_eq!(Phantom::read_json(&path).unwrap(), p);
    }

    #[test]
    fn noise_is_reproducible() {
        let det = DetectorSpec::centered(8, 4, 1.0, 1.0);
        let mut a = ProjectionStack::zeros(det, 3);
        let mut b = a.clone();
        a.add_gaussian_noise(0.1, 9).unwrap();
        b.add_gaussian_noise(0.1, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().any(|&v| v != 0.0));
    }
}
