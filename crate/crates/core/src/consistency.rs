//! Epipolar consistency of cone-beam projections.
//!
//! Each projection is reduced once to a table of `dR/ds`, the derivative of
//! the 2-D Radon transform of its cosine-weighted image. Two views are then
//! compared along the lines cut out by planes through both source positions.
//! By Grangeat's relation, `(1 + s^2/D^2) dR/ds` on such a line is the same
//! in both views when geometry and data agree (`D` is the source to detector
//! distance and `s` the line's distance from the principal point).

use std::f64::consts::PI;

use log::debug;
use nalgebra::{Matrix3, Matrix4x3, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CircularGeometry, DetectorSpec, MotionTrajectory, ProjectionMatrix, Trajectory};
use crate::phantom::ProjectionStack;

/// Sampling of the `(theta, s)` line space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LutGrid {
    pub n_theta: usize,
    pub n_s: usize,
    /// Largest `|s|` in mm.
    pub s_max: f64,
}

impl LutGrid {
    pub fn with_sizes(det: &DetectorSpec, n_theta: usize, n_s: usize) -> Self {
        let (u_lo, u_hi) = ((-1.0 - det.u0) * det.du, (det.nu as f64 - det.u0) * det.du);
        let (v_lo, v_hi) = ((-1.0 - det.v0) * det.dv, (det.nv as f64 - det.v0) * det.dv);
        let s_max = [u_lo.hypot(v_lo), u_lo.hypot(v_hi), u_hi.hypot(v_lo), u_hi.hypot(v_hi)]
            .into_iter()
            .fold(0.0, f64::max);
        Self { n_theta, n_s, s_max }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_theta < 16 || self.n_s < 16 {
            return Err(Error::validation(
                "consistency.lut",
                format!("need n_theta, n_s >= 16, got {} x {}", self.n_theta, self.n_s),
            ));
        }
        if !(self.s_max > 0.0 && self.s_max.is_finite()) {
            return Err(Error::validation("consistency.lut.s_max", "must be positive"));
        }
        Ok(())
    }

    pub fn theta(&self, k: usize) -> f64 {
        PI * k as f64 / self.n_theta as f64
    }

    pub fn ds(&self) -> f64 {
        2.0 * self.s_max / (self.n_s - 1) as f64
    }

    pub fn s(&self, m: usize) -> f64 {
        -self.s_max + m as f64 * self.ds()
    }

    pub fn len(&self) -> usize {
        self.n_theta * self.n_s
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `dR/ds` of one view on a [`LutGrid`], row-major in `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadonLut {
    pub grid: LutGrid,
    pub values: Vec<f32>,
}

impl RadonLut {
    pub fn at(&self, k: usize, m: usize) -> f32 {
        self.values[k * self.grid.n_s + m]
    }

    fn row(&self, k: usize) -> &[f32] {
        &self.values[k * self.grid.n_s..(k + 1) * self.grid.n_s]
    }

    fn interp_s(&self, k: usize, s: f64) -> f64 {
        let g = &self.grid;
        let x = (s + g.s_max) / g.ds();
        if !(x >= 0.0 && x <= (g.n_s - 1) as f64) {
            return 0.0;
        }
        let m = (x.floor() as usize).min(g.n_s - 2);
        let f = x - m as f64;
        let row = self.row(k);
        (1.0 - f) * row[m] as f64 + f * row[m + 1] as f64
    }

    /// Bilinear lookup for `theta` in `[0, pi)`. Between the last angle and
    /// `pi` the table continues through `R(theta + pi, s) = R(theta, -s)`.
    pub fn lookup(&self, theta: f64, s: f64) -> f64 {
        let n = self.grid.n_theta;
        let x = (theta / PI * n as f64).clamp(0.0, n as f64);
        let k = (x.floor() as usize).min(n - 1);
        let f = x - k as f64;
        let a = self.interp_s(k, s);
        let b = if k + 1 < n {
            self.interp_s(k + 1, s)
        } else {
            -self.interp_s(0, -s)
        };
        (1.0 - f) * a + f * b
    }
}

/// Zero-padded image with bilinear sampling in pixel coordinates.
struct PaddedImage {
    w: usize,
    data: Vec<f64>,
}

impl PaddedImage {
    fn new(image: &[f64], nu: usize, nv: usize) -> Self {
        let w = nu + 3;
        let mut data = vec![0.0; w * (nv + 3)];
        for v in 0..nv {
            data[(v + 1) * w + 1..(v + 1) * w + 1 + nu].copy_from_slice(&image[v * nu..(v + 1) * nu]);
        }
        Self { w, data }
    }

    /// Valid for `x` in `[-1, nu]`, `y` in `[-1, nv]`.
    #[inline]
    fn sample(&self, x: f64, y: f64) -> f64 {
        let xf = x.floor();
        let yf = y.floor();
        let fx = x - xf;
        let fy = y - yf;
        let i = (yf as isize + 1) as usize * self.w + (xf as isize + 1) as usize;
        let d = &self.data;
        let top = d[i] + fx * (d[i + 1] - d[i]);
        let bot = d[i + self.w] + fx * (d[i + self.w + 1] - d[i + self.w]);
        top + fy * (bot - top)
    }
}

/// Separable Gaussian blur with edge-replicate padding; `sigma` in pixels.
fn gaussian_blur(image: &mut [f64], nu: usize, nv: usize, sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let mut line = Vec::new();
    let mut pass = |image: &mut [f64], n: usize, count: usize, index: &dyn Fn(usize, usize) -> usize| {
        for c in 0..count {
            line.clear();
            line.extend((0..n).map(|i| image[index(c, i)]));
            for i in 0..n {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let src = (i as isize + j as isize - r).clamp(0, n as isize - 1);
                    acc += k * line[src as usize];
                }
                image[index(c, i)] = acc;
            }
        }
    };
    pass(image, nu, nv, &|row, i| row * nu + i);
    pass(image, nv, nu, &|col, i| i * nu + col);
}

/// Parameter interval where `lo + t * dir` stays inside `[min, max]`.
fn clip_slab(lo: f64, dir: f64, min: f64, max: f64, t: &mut (f64, f64)) {
    if dir.abs() < 1e-15 {
        if lo < min || lo > max {
            *t = (1.0, 0.0);
        }
        return;
    }
    let a = (min - lo) / dir;
    let b = (max - lo) / dir;
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    t.0 = t.0.max(a);
    t.1 = t.1.min(b);
}

/// Exact integral of the bilinear interpolant along
/// `u cos(theta) + v sin(theta) = s` (mm about the principal point). The
/// integrand is quadratic between pixel-grid crossings, so Simpson's rule on
/// each piece is exact.
fn radon_line(img: &PaddedImage, det: &DetectorSpec, theta: f64, s: f64) -> f64 {
    let (sn, cs) = theta.sin_cos();
    let x0 = s * cs / det.du + det.u0;
    let y0 = s * sn / det.dv + det.v0;
    let dx = -sn / det.du;
    let dy = cs / det.dv;
    let eps = 1e-9;
    let mut t = (f64::NEG_INFINITY, f64::INFINITY);
    clip_slab(x0, dx, -1.0 + eps, det.nu as f64 - eps, &mut t);
    clip_slab(y0, dy, -1.0 + eps, det.nv as f64 - eps, &mut t);
    if !(t.1 > t.0) {
        return 0.0;
    }
    // first grid crossing after t.0 and spacing of crossings, per axis
    let crossing = |p0: f64, d: f64| -> (f64, f64) {
        if d.abs() < 1e-15 {
            return (f64::INFINITY, f64::INFINITY);
        }
        let p = p0 + t.0 * d;
        let k = if d > 0.0 { p.floor() + 1.0 } else { p.ceil() - 1.0 };
        ((k - p0) / d, 1.0 / d.abs())
    };
    let (mut tx, step_x) = crossing(x0, dx);
    let (mut ty, step_y) = crossing(y0, dy);
    let f = |t: f64| img.sample(x0 + t * dx, y0 + t * dy);
    let mut ta = t.0;
    let mut fa = f(ta);
    let mut acc = 0.0;
    loop {
        let tb = tx.min(ty).min(t.1);
        if tb > ta {
            let fb = f(tb);
            acc += (tb - ta) / 6.0 * (fa + 4.0 * f(0.5 * (ta + tb)) + fb);
            fa = fb;
            ta = tb;
        }
        if tb >= t.1 {
            break;
        }
        if tx <= tb {
            tx += step_x;
        }
        if ty <= tb {
            ty += step_y;
        }
    }
    acc
}

/// Builds `dR/ds` for one projection image (`nv x nu`, row-major).
/// `cosine_sdd` enables the FDK cosine weight for that source to detector
/// distance; `None` integrates the raw image. A positive `smoothing_px`
/// blurs the weighted image first, which suppresses the aliasing of sharp
/// edges in the derivative.
pub fn radon_derivative_lut(
    image: &[f32],
    det: &DetectorSpec,
    cosine_sdd: Option<f64>,
    grid: &LutGrid,
    smoothing_px: f64,
) -> Result<RadonLut> {
    det.validate()?;
    grid.validate()?;
    if image.len() != det.nu * det.nv {
        return Err(Error::ShapeMismatch {
            expected: format!("{} pixels", det.nu * det.nv),
            actual: format!("{}", image.len()),
        });
    }
    if image.iter().any(|p| !p.is_finite()) {
        return Err(Error::validation("projection", "non-finite pixel"));
    }
    if !(smoothing_px >= 0.0) {
        return Err(Error::validation("consistency.smoothing_px", "must be non-negative"));
    }
    let mut weighted: Vec<f64> = image.iter().map(|&p| p as f64).collect();
    if let Some(d) = cosine_sdd {
        for v in 0..det.nv {
            for u in 0..det.nu {
                let (um, vm) = (det.u_mm(u as f64), det.v_mm(v as f64));
                weighted[v * det.nu + u] *= d / (d * d + um * um + vm * vm).sqrt();
            }
        }
    }
    if smoothing_px > 0.0 {
        gaussian_blur(&mut weighted, det.nu, det.nv, smoothing_px);
    }
    let img = PaddedImage::new(&weighted, det.nu, det.nv);
    let ds = grid.ds();
    let mut values = vec![0.0f32; grid.len()];
    let mut radon = vec![0.0; grid.n_s];
    for k in 0..grid.n_theta {
        let theta = grid.theta(k);
        for (m, r) in radon.iter_mut().enumerate() {
            *r = radon_line(&img, det, theta, grid.s(m));
        }
        let row = &mut values[k * grid.n_s..(k + 1) * grid.n_s];
        let last = grid.n_s - 1;
        row[0] = ((radon[1] - radon[0]) / ds) as f32;
        row[last] = ((radon[last] - radon[last - 1]) / ds) as f32;
        for m in 1..last {
            row[m] = ((radon[m + 1] - radon[m - 1]) / (2.0 * ds)) as f32;
        }
    }
    Ok(RadonLut { grid: *grid, values })
}

/// Settings for the per-view tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LutConfig {
    pub n_theta: usize,
    /// Samples in `s`; `None` uses two per pixel pitch along the diagonal.
    pub n_s: Option<usize>,
    /// Gaussian pre-blur of the weighted projections, in pixels.
    pub smoothing_px: f64,
}

impl Default for LutConfig {
    fn default() -> Self {
        Self {
            n_theta: 180,
            n_s: None,
            smoothing_px: 3.0,
        }
    }
}

impl LutConfig {
    pub fn grid(&self, det: &DetectorSpec) -> LutGrid {
        let n_s = self
            .n_s
            .unwrap_or_else(|| ((2.0 * det.diagonal_mm() / det.du).ceil() as usize).max(16));
        LutGrid::with_sizes(det, self.n_theta, n_s)
    }
}

/// Tables for every view of a stack, built once from the measured data.
pub fn build_luts(stack: &ProjectionStack, geom: &CircularGeometry, cfg: &LutConfig) -> Result<Vec<RadonLut>> {
    stack.validate()?;
    let grid = cfg.grid(&stack.detector);
    (0..stack.n_views)
        .into_par_iter()
        .map(|i| radon_derivative_lut(stack.view(i), &stack.detector, Some(geom.sdd), &grid, cfg.smoothing_px))
        .collect()
}

/// A detector line `u cos(theta) + v sin(theta) = s` in mm about the
/// principal point, with `theta` in `[0, pi)`. `sign` is -1 when the plane's
/// orientation was flipped to bring `theta` into range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorLine {
    pub theta: f64,
    pub s: f64,
    pub sign: f64,
}

impl DetectorLine {
    /// Signed distance of a detector point (mm) from the line.
    pub fn residual(&self, u_mm: f64, v_mm: f64) -> f64 {
        u_mm * self.theta.cos() + v_mm * self.theta.sin() - self.s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarSample {
    pub kappa: f64,
    pub line_i: DetectorLine,
    pub line_j: DetectorLine,
}

/// Everything about one effective camera needed to map planes to lines.
#[derive(Debug, Clone)]
pub struct EpipolarCamera {
    pub matrix: ProjectionMatrix,
    pinv_t: Matrix3<f64>,
    pinv_t_last: Vector3<f64>,
    rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
    det: DetectorSpec,
    sdd: f64,
    margin_px: f64,
}

impl EpipolarCamera {
    /// `margin_px` keeps accepted lines that many pixels away from the top
    /// and bottom detector rows.
    pub fn new(matrix: ProjectionMatrix, geom: &CircularGeometry, margin_px: f64) -> Result<Self> {
        let matrix = matrix.normalized();
        let pinv: Matrix4x3<f64> = matrix.pseudo_inverse()?;
        let pinv_t = pinv.transpose();
        let k_inv = geom
            .intrinsics()
            .try_inverse()
            .ok_or_else(|| Error::validation("geometry", "singular intrinsics"))?;
        Ok(Self {
            pinv_t: pinv_t.fixed_view::<3, 3>(0, 0).into_owned(),
            pinv_t_last: pinv_t.column(3).into_owned(),
            rotation: k_inv * matrix.left_block(),
            center: matrix.center()?,
            det: geom.detector,
            sdd: geom.sdd,
            margin_px,
            matrix,
        })
    }

    /// Detector line of the plane `{x : n . (x - point) = 0}`, which must
    /// contain this camera's source. Orientation follows `n`.
    pub fn plane_line(&self, n: &Vector3<f64>, point: &Vector3<f64>) -> Option<DetectorLine> {
        let e = Vector4::new(n.x, n.y, n.z, -n.dot(point));
        let l = self.pinv_t * e.xyz() + self.pinv_t_last * e.w;
        let d = &self.det;
        // pixel line -> mm line a u + b v + c = 0
        let mut a = l.x / d.du;
        let mut b = l.y / d.dv;
        let mut c = l.x * d.u0 + l.y * d.v0 + l.z;
        let n_cam = self.rotation * n;
        if a * self.sdd * n_cam.x + b * self.sdd * n_cam.y + c * n_cam.z < 0.0 {
            a = -a;
            b = -b;
            c = -c;
        }
        let norm = a.hypot(b);
        if !(norm > 1e-300) {
            return None;
        }
        let mut theta = b.atan2(a);
        let mut s = -c / norm;
        let mut sign = 1.0;
        if theta < 0.0 {
            theta += PI;
            s = -s;
            sign = -1.0;
        }
        if theta >= PI {
            theta -= PI;
            s = -s;
            sign = -sign;
        }
        Some(DetectorLine { theta, s, sign })
    }

    /// True when the line enters and leaves through the two lateral detector
    /// edges (inside the row margin), so its integral covers the full
    /// detector width.
    pub fn spans_width(&self, line: &DetectorLine) -> bool {
        let d = &self.det;
        let (sn, cs) = line.theta.sin_cos();
        if sn.abs() < 1e-12 {
            return false;
        }
        let (v_lo, v_hi) = (d.v_mm(self.margin_px), d.v_mm((d.nv - 1) as f64 - self.margin_px));
        [d.u_mm(0.0), d.u_mm((d.nu - 1) as f64)].iter().all(|&u| {
            let v = (line.s - u * cs) / sn;
            v >= v_lo && v <= v_hi
        })
    }

    /// Value comparable across views: `(1 + s^2/D^2) dR/ds`, oriented.
    pub fn grangeat_value(&self, lut: &RadonLut, line: &DetectorLine) -> f64 {
        let w = 1.0 + line.s * line.s / (self.sdd * self.sdd);
        line.sign * w * lut.lookup(line.theta, line.s)
    }
}

/// Orthonormal frame of the plane pencil around the baseline `ci -> cj`:
/// `n(kappa) = cos(kappa) a + sin(kappa) (b x a)`, with `a` the world z axis
/// made orthogonal to the baseline, so `kappa = 0` is the plane closest to
/// the acquisition plane.
pub fn plane_pencil(ci: &Vector3<f64>, cj: &Vector3<f64>) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let baseline = cj - ci;
    let len = baseline.norm();
    if !(len > 1e-6) {
        return None;
    }
    let b = baseline / len;
    let mut a = Vector3::z() - b * b.z;
    if a.norm() < 1e-6 {
        a = Vector3::x() - b * b.x;
    }
    let a = a.normalize();
    Some((a, b.cross(&a)))
}

fn pencil_normal(frame: &(Vector3<f64>, Vector3<f64>), kappa: f64) -> Vector3<f64> {
    frame.0 * kappa.cos() + frame.1 * kappa.sin()
}

/// Line pair induced by the plane at angle `kappa`, if it spans both
/// detectors.
pub fn sample_at(ci: &EpipolarCamera, cj: &EpipolarCamera, kappa: f64) -> Option<EpipolarSample> {
    let frame = plane_pencil(&ci.center, &cj.center)?;
    sample_in_frame(ci, cj, &frame, kappa)
}

fn sample_in_frame(
    ci: &EpipolarCamera,
    cj: &EpipolarCamera,
    frame: &(Vector3<f64>, Vector3<f64>),
    kappa: f64,
) -> Option<EpipolarSample> {
    let n = pencil_normal(frame, kappa);
    let line_i = ci.plane_line(&n, &ci.center)?;
    let line_j = cj.plane_line(&n, &ci.center)?;
    (ci.spans_width(&line_i) && cj.spans_width(&line_j)).then_some(EpipolarSample { kappa, line_i, line_j })
}

const KAPPA_SCAN: usize = 64;
const KAPPA_BISECT: usize = 30;

/// `n_kappa` planes spread over the largest contiguous range of plane
/// angles whose lines span both detectors.
pub fn epipolar_samples(
    ci: &EpipolarCamera,
    cj: &EpipolarCamera,
    n_kappa: usize,
    pair: (usize, usize),
) -> Result<Vec<EpipolarSample>> {
    let frame = plane_pencil(&ci.center, &cj.center).ok_or(Error::DegeneratePair(pair.0, pair.1))?;
    let valid = |k: f64| sample_in_frame(ci, cj, &frame, k).is_some();
    let half = PI / 2.0;
    let scan: Vec<f64> = (0..KAPPA_SCAN)
        .map(|m| -half + PI * (m as f64 + 0.5) / KAPPA_SCAN as f64)
        .collect();
    let ok: Vec<bool> = scan.iter().map(|&k| valid(k)).collect();
    // longest run of valid scan points
    let (mut best, mut start) = (None::<(usize, usize)>, None);
    for m in 0..=KAPPA_SCAN {
        match (m < KAPPA_SCAN && ok[m], start) {
            (true, None) => start = Some(m),
            (false, Some(s)) => {
                if best.map_or(true, |(a, b)| m - s > b - a) {
                    best = Some((s, m));
                }
                start = None;
            }
            _ => {}
        }
    }
    let Some((first, end)) = best else {
        return Ok(Vec::new());
    };
    let last = end - 1;
    let refine = |mut inside: f64, mut outside: f64| {
        for _ in 0..KAPPA_BISECT {
            let mid = 0.5 * (inside + outside);
            if valid(mid) {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        inside
    };
    let lo = if first == 0 { -half } else { refine(scan[first], scan[first - 1]) };
    let hi = if last + 1 == KAPPA_SCAN { half } else { refine(scan[last], scan[last + 1]) };
    Ok((0..n_kappa)
        .filter_map(|m| {
            let k = lo + (hi - lo) * (m as f64 + 0.5) / n_kappa as f64;
            sample_in_frame(ci, cj, &frame, k)
        })
        .collect())
}

/// Mean squared difference of the oriented Grangeat values over the
/// samples.
pub fn ecc_pair(
    cam_i: &EpipolarCamera,
    lut_i: &RadonLut,
    cam_j: &EpipolarCamera,
    lut_j: &RadonLut,
    samples: &[EpipolarSample],
    pair: (usize, usize),
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyPair(pair.0, pair.1));
    }
    let sum: f64 = samples
        .iter()
        .map(|smp| {
            let d = cam_i.grangeat_value(lut_i, &smp.line_i) - cam_j.grangeat_value(lut_j, &smp.line_j);
            d * d
        })
        .sum();
    Ok(sum / samples.len() as f64)
}

/// View-pair sampling for the total consistency cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    /// View offsets used are `stride, 2 stride, ...`.
    pub stride: usize,
    /// Largest angular separation of a pair, in degrees.
    pub max_separation_deg: f64,
    pub n_kappa: usize,
    /// Rows kept clear at the top and bottom of the detector; should be at
    /// least twice the table smoothing.
    pub edge_margin_px: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            max_separation_deg: 90.0,
            n_kappa: 64,
            edge_margin_px: 6.0,
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::validation("consistency.stride", "must be positive"));
        }
        if self.n_kappa == 0 {
            return Err(Error::validation("consistency.n_kappa", "must be positive"));
        }
        if !(self.edge_margin_px >= 0.0) {
            return Err(Error::validation("consistency.edge_margin_px", "must be non-negative"));
        }
        if !(self.max_separation_deg > 0.0) {
            return Err(Error::validation("consistency.max_separation_deg", "must be positive"));
        }
        Ok(())
    }

    /// Pairs `(i, j)` with `j - i` a multiple of the stride and separation
    /// within the limit; no wrap-around.
    pub fn pairs(&self, geom: &CircularGeometry) -> Vec<(usize, usize)> {
        let step = geom.angular_step().to_degrees();
        let n = geom.n_views;
        let mut out = Vec::new();
        for i in 0..n {
            let mut d = self.stride;
            while i + d < n && d as f64 * step <= self.max_separation_deg + 1e-9 {
                out.push((i, i + d));
                d += self.stride;
            }
        }
        out
    }
}

/// Sum of [`ecc_pair`] over the configured pairs for the effective
/// geometry `T_i M_i`. The tables stay fixed; only the lines move.
pub fn ecc_total(
    traj: &Trajectory,
    motion: &MotionTrajectory,
    luts: &[RadonLut],
    cfg: &PairConfig,
) -> Result<f64> {
    ecc_total_pairs(traj, motion, luts, cfg, &cfg.pairs(&traj.geometry))
}

pub fn ecc_total_pairs(
    traj: &Trajectory,
    motion: &MotionTrajectory,
    luts: &[RadonLut],
    cfg: &PairConfig,
    pairs: &[(usize, usize)],
) -> Result<f64> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::validation("consistency.pairs", "empty pair list"));
    }
    if luts.len() != traj.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} lookup tables", traj.len()),
            actual: format!("{}", luts.len()),
        });
    }
    let cams: Vec<EpipolarCamera> = traj
        .effective(motion)?
        .into_iter()
        .map(|p| EpipolarCamera::new(p, &traj.geometry, cfg.edge_margin_px))
        .collect::<Result<_>>()?;
    let terms: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| -> Result<Option<f64>> {
            let samples = epipolar_samples(&cams[i], &cams[j], cfg.n_kappa, (i, j))?;
            match ecc_pair(&cams[i], &luts[i], &cams[j], &luts[j], &samples, (i, j)) {
                Ok(v) => Ok(Some(v)),
                Err(Error::EmptyPair(a, b)) => {
                    debug!("skipping view pair ({a}, {b}): no epipolar samples");
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let used: Vec<f64> = terms.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::EmptyPair(pairs[0].0, pairs[0].1));
    }
    Ok(used.iter().sum())
}
