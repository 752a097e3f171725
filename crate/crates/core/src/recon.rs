//! FDK reconstruction with motion-adjusted projection matrices.
//!
//! Weighting and ramp filtering depend only on the detector, so a stack is
//! filtered once ([`prefilter`]) and can then be backprojected under any
//! number of motion estimates ([`backproject`]).

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CircularGeometry, DetectorSpec, MotionTrajectory, Trajectory};
use crate::phantom::{Grid, ProjectionStack, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconMode {
    #[default]
    Full,
    /// Only the axial plane `z = 0`.
    CentralSlice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterMethod {
    /// Direct convolution with the Ram-Lak kernel.
    Spatial,
    /// Zero-padded circular convolution through the FFT.
    #[default]
    Fourier,
}

/// FDK cosine weight `sdd / sqrt(sdd^2 + u^2 + v^2)` at pixel `(u, v)`.
pub fn cosine_weight_at(det: &DetectorSpec, sdd: f64, u: f64, v: f64) -> f64 {
    let um = det.u_mm(u);
    let vm = det.v_mm(v);
    sdd / (sdd * sdd + um * um + vm * vm).sqrt()
}

pub fn cosine_weight(stack: &ProjectionStack, geom: &CircularGeometry) -> ProjectionStack {
    let det = stack.detector;
    let weights: Vec<f32> = (0..det.nv)
        .flat_map(|v| (0..det.nu).map(move |u| (u, v)))
        .map(|(u, v)| cosine_weight_at(&det, geom.sdd, u as f64, v as f64) as f32)
        .collect();
    let mut out = stack.clone();
    for view in out.data.chunks_mut(weights.len()) {
        for (p, w) in view.iter_mut().zip(&weights) {
            *p *= w;
        }
    }
    out
}

/// Discrete Ram-Lak kernel value at integer offset `n` for pitch `du`.
pub fn ram_lak(n: i64, du: f64) -> f64 {
    if n == 0 {
        1.0 / (4.0 * du * du)
    } else if n % 2 == 0 {
        0.0
    } else {
        let x = std::f64::consts::PI * n as f64 * du;
        -1.0 / (x * x)
    }
}

/// Row filter shared across all rows of a detector.
pub struct RampFilter {
    nu: usize,
    du: f64,
    method: FilterMethod,
    padded: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    kernel_hat: Vec<Complex<f64>>,
    kernel: Vec<f64>,
}

impl RampFilter {
    pub fn new(nu: usize, du: f64, method: FilterMethod) -> Self {
        let padded = (2 * nu).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(padded);
        let ifft = planner.plan_fft_inverse(padded);
        let mut kernel_hat: Vec<Complex<f64>> = (0..padded)
            .map(|k| {
                let n = if k <= padded / 2 { k as i64 } else { k as i64 - padded as i64 };
                Complex::new(ram_lak(n, du), 0.0)
            })
            .collect();
        fft.process(&mut kernel_hat);
        // offsets -(nu-1)..=(nu-1)
        let kernel = (0..2 * nu - 1)
            .map(|k| ram_lak(k as i64 - (nu as i64 - 1), du))
            .collect();
        Self {
            nu,
            du,
            method,
            padded,
            fft,
            ifft,
            kernel_hat,
            kernel,
        }
    }

    /// Filters one row in place; result is `du * sum_m row[m] h(k - m)`.
    pub fn apply(&self, row: &mut [f32]) {
        debug_assert_eq!(row.len(), self.nu);
        match self.method {
            FilterMethod::Spatial => {
                let src: Vec<f64> = row.iter().map(|&x| x as f64).collect();
                let off = self.nu - 1;
                for (k, out) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (m, &x) in src.iter().enumerate() {
                        if x != 0.0 {
                            acc += x * self.kernel[k + off - m];
                        }
                    }
                    *out = (acc * self.du) as f32;
                }
            }
            FilterMethod::Fourier => {
                let mut buf = vec![Complex::new(0.0, 0.0); self.padded];
                for (b, &x) in buf.iter_mut().zip(row.iter()) {
                    b.re = x as f64;
                }
                self.fft.process(&mut buf);
                for (b, k) in buf.iter_mut().zip(&self.kernel_hat) {
                    *b *= k;
                }
                self.ifft.process(&mut buf);
                let scale = self.du / self.padded as f64;
                for (out, b) in row.iter_mut().zip(&buf) {
                    *out = (b.re * scale) as f32;
                }
            }
        }
    }
}

/// Convolves every detector row with the Ram-Lak kernel.
pub fn ramp_filter(stack: &ProjectionStack, method: FilterMethod) -> Result<ProjectionStack> {
    let det = stack.detector;
    if det.nu < 4 {
        return Err(Error::validation("detector.nu", "ramp filtering needs at least 4 columns"));
    }
    let filter = RampFilter::new(det.nu, det.du, method);
    let mut out = stack.clone();
    out.data
        .par_chunks_mut(det.nu)
        .for_each(|row| filter.apply(row));
    Ok(out)
}

/// Cosine-weighted, ramp-filtered projections ready for backprojection.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredStack(pub ProjectionStack);

pub fn prefilter(stack: &ProjectionStack, geom: &CircularGeometry, method: FilterMethod) -> Result<FilteredStack> {
    stack.validate()?;
    if stack.detector != geom.detector {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", geom.detector),
            actual: format!("{:?}", stack.detector),
        });
    }
    Ok(FilteredStack(ramp_filter(&cosine_weight(stack, geom), method)?))
}

/// Voxel-driven backprojection with bilinear detector sampling. Each view
/// contributes `0.5 * dbeta * m * (sid / U)^2 * Q(u, v)` where `U` is the
/// depth of the voxel along the principal ray and `m = sdd / sid` maps the
/// detector-plane filter to the isocenter plane. Assumes a full scan.
pub fn backproject(
    filtered: &FilteredStack,
    traj: &Trajectory,
    motion: &MotionTrajectory,
    grid: &Grid,
    mode: ReconMode,
) -> Result<Volume> {
    let stack = &filtered.0;
    grid.validate()?;
    if stack.n_views != traj.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} views", traj.len()),
            actual: format!("{} projections", stack.n_views),
        });
    }
    let geom = &traj.geometry;
    let det = stack.detector;
    let cams = traj.effective(motion)?;
    let out_grid = match mode {
        ReconMode::Full => *grid,
        ReconMode::CentralSlice => grid.central_plane(),
    };
    let scale = 0.5 * geom.angular_step() * geom.magnification() * geom.sid * geom.sid;
    let nu = det.nu;
    let nv = det.nv;
    let u_max = (nu - 1) as f64;
    let v_max = (nv - 1) as f64;

    let mut vol = Volume::zeros(out_grid);
    let g = out_grid;
    vol.data
        .par_chunks_mut(g.nx)
        .enumerate()
        .try_for_each(|(row_index, out_row)| -> Result<()> {
            let iy = row_index % g.ny;
            let iz = row_index / g.ny;
            let start = g.position(0, iy, iz);
            let mut acc = vec![0.0f64; g.nx];
            for (i, cam) in cams.iter().enumerate() {
                let view = stack.view(i);
                let m = cam.matrix();
                let h0 = cam.homogeneous(&start);
                let step = [m[(0, 0)] * g.spacing[0], m[(1, 0)] * g.spacing[0], m[(2, 0)] * g.spacing[0]];
                for (ix, a) in acc.iter_mut().enumerate() {
                    let t = ix as f64;
                    let w = h0.z + t * step[2];
                    if w <= crate::geometry::MIN_HOMOGENEOUS_WEIGHT {
                        return Err(Error::DegeneratePoint(w));
                    }
                    let inv_w = 1.0 / w;
                    let u = (h0.x + t * step[0]) * inv_w;
                    let v = (h0.y + t * step[1]) * inv_w;
                    if !(u >= 0.0 && u <= u_max && v >= 0.0 && v <= v_max) {
                        continue;
                    }
                    let u_f = u.floor();
                    let v_f = v.floor();
                    let iu = (u_f as usize).min(nu - 2);
                    let iv = (v_f as usize).min(nv - 2);
                    let fu = u - iu as f64;
                    let fv = v - iv as f64;
                    let base = iv * nu + iu;
                    let p00 = view[base] as f64;
                    let p01 = view[base + 1] as f64;
                    let p10 = view[base + nu] as f64;
                    let p11 = view[base + nu + 1] as f64;
                    let top = p00 + fu * (p01 - p00);
                    let bot = p10 + fu * (p11 - p10);
                    *a += (top + fv * (bot - top)) * inv_w * inv_w;
                }
            }
            for (o, a) in out_row.iter_mut().zip(&acc) {
                *o = (a * scale) as f32;
            }
            Ok(())
        })?;
    Ok(vol)
}

/// Full FDK: cosine weighting, ramp filtering, motion-aware backprojection.
pub fn fdk(
    stack: &ProjectionStack,
    traj: &Trajectory,
    motion: &MotionTrajectory,
    grid: &Grid,
    mode: ReconMode,
) -> Result<Volume> {
    let filtered = prefilter(stack, &traj.geometry, FilterMethod::Fourier)?;
    backproject(&filtered, traj, motion, grid, mode)
}
