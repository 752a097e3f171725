//! Spline motion models over the view index.
//!
//! Simulated ground-truth motion uses Akima splines, estimated motion uses
//! PCHIP. Each spline carries six parameter tracks `(rx, ry, rz, tx, ty, tz)`
//! sampled at shared node positions.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{MotionTrajectory, RigidParams, RigidTransform, PARAM_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplineKind {
    Akima,
    Pchip,
}

impl SplineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplineKind::Akima => "akima",
            SplineKind::Pchip => "pchip",
        }
    }
}

impl std::str::FromStr for SplineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "akima" => Ok(SplineKind::Akima),
            "pchip" => Ok(SplineKind::Pchip),
            other => Err(Error::validation("spline.kind", format!("unknown kind '{other}'"))),
        }
    }
}

/// Piecewise cubic Hermite interpolant with precomputed node slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

fn check_nodes(xs: &[f64], ys: &[f64], min_nodes: usize) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} node values", xs.len()),
            actual: format!("{}", ys.len()),
        });
    }
    if xs.len() < min_nodes {
        return Err(Error::validation(
            "spline nodes",
            format!("need at least {min_nodes} nodes, got {}", xs.len()),
        ));
    }
    if xs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::validation("spline nodes", "node positions must be strictly increasing"));
    }
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::validation("spline nodes", "non-finite node value"));
    }
    Ok(())
}

fn secants(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0]))
        .collect()
}

impl HermiteSpline {
    /// Akima slopes: weighted average of neighboring secants, with two
    /// linearly extrapolated secants appended at each end.
    pub fn akima(xs: &[f64], ys: &[f64]) -> Result<Self> {
        check_nodes(xs, ys, 5)?;
        let m = secants(xs, ys);
        let n = m.len();
        let mut ext = Vec::with_capacity(n + 4);
        let m_m1 = 2.0 * m[0] - m[1];
        let m_m2 = 2.0 * m_m1 - m[0];
        let m_p1 = 2.0 * m[n - 1] - m[n - 2];
        let m_p2 = 2.0 * m_p1 - m[n - 1];
        ext.push(m_m2);
        ext.push(m_m1);
        ext.extend_from_slice(&m);
        ext.push(m_p1);
        ext.push(m_p2);
        // ext[k + 2] is the secant m_k
        let weights: Vec<(f64, f64)> = (0..xs.len())
            .map(|i| {
                let f1 = (ext[i + 3] - ext[i + 2]).abs();
                let f2 = (ext[i + 1] - ext[i]).abs();
                (f1, f2)
            })
            .collect();
        let max_w = weights.iter().map(|(a, b)| a + b).fold(0.0, f64::max);
        let slopes = weights
            .iter()
            .enumerate()
            .map(|(i, &(f1, f2))| {
                let (a, b) = (ext[i + 1], ext[i + 2]);
                if f1 + f2 > 1e-9 * max_w {
                    (f1 * a + f2 * b) / (f1 + f2)
                } else {
                    0.5 * (a + b)
                }
            })
            .collect();
        Ok(Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            slopes,
        })
    }

    /// Fritsch-Carlson monotone slopes (weighted harmonic mean in the
    /// interior, shape-preserving three-point rule at the ends).
    pub fn pchip(xs: &[f64], ys: &[f64]) -> Result<Self> {
        check_nodes(xs, ys, 2)?;
        let m = secants(xs, ys);
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let n = xs.len();
        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes[0] = m[0];
            slopes[1] = m[0];
        } else {
            for k in 1..n - 1 {
                let (a, b) = (m[k - 1], m[k]);
                if a == 0.0 || b == 0.0 || a.signum() != b.signum() {
                    slopes[k] = 0.0;
                } else {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    slopes[k] = (w1 + w2) / (w1 / a + w2 / b);
                }
            }
            slopes[0] = pchip_end_slope(h[0], h[1], m[0], m[1]);
            slopes[n - 1] = pchip_end_slope(h[n - 2], h[n - 3], m[n - 2], m[n - 3]);
        }
        Ok(Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            slopes,
        })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.xs[0], self.xs[self.xs.len() - 1])
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        let (lo, hi) = self.domain();
        if !(x >= lo && x <= hi) {
            return Err(Error::validation(
                "spline query",
                format!("{x} outside node range [{lo}, {hi}]"),
            ));
        }
        let k = match self.xs.binary_search_by(|p| p.total_cmp(&x)) {
            Ok(i) => return Ok(self.ys[i]),
            Err(i) => i - 1,
        };
        Ok(self.segment_value(k, x))
    }

    fn segment_value(&self, k: usize, x: f64) -> f64 {
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let t2 = t * t;
        let h01 = t2 * (3.0 - 2.0 * t);
        let h10 = t * (1.0 - t) * (1.0 - t);
        let h11 = t2 * (t - 1.0);
        self.ys[k] + h01 * (self.ys[k + 1] - self.ys[k]) + h * (h10 * self.slopes[k] + h11 * self.slopes[k + 1])
    }

    /// Derivative of segment `k` at `x` (may lie outside the segment).
    pub fn segment_derivative(&self, k: usize, x: f64) -> f64 {
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let d01 = 6.0 * t * (1.0 - t) / h;
        let d10 = (1.0 - t) * (1.0 - 3.0 * t);
        let d11 = t * (3.0 * t - 2.0);
        d01 * (self.ys[k + 1] - self.ys[k]) + d10 * self.slopes[k] + d11 * self.slopes[k + 1]
    }

    pub fn n_segments(&self) -> usize {
        self.xs.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.xs
    }
}

fn pchip_end_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() || m0 == 0.0 {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

/// Akima interpolation of `(xs, ys)` at `x`; needs at least 5 nodes.
pub fn akima_eval(xs: &[f64], ys: &[f64], x: f64) -> Result<f64> {
    HermiteSpline::akima(xs, ys)?.eval(x)
}

/// PCHIP interpolation of `(xs, ys)` at `x`; needs at least 2 nodes.
pub fn pchip_eval(xs: &[f64], ys: &[f64], x: f64) -> Result<f64> {
    HermiteSpline::pchip(xs, ys)?.eval(x)
}

/// Which rigid parameters a motion family or an optimizer touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFamily {
    /// `rz, tx, ty`
    InPlane,
    /// `rx, ry, tz`
    OutPlane,
    /// `rx, tz`
    TzRx,
    Mixed,
}

impl MotionFamily {
    pub fn mask(self) -> [bool; 6] {
        match self {
            MotionFamily::InPlane => [false, false, true, true, true, false],
            MotionFamily::OutPlane => [true, true, false, false, false, true],
            MotionFamily::TzRx => [true, false, false, false, false, true],
            MotionFamily::Mixed => [true; 6],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MotionFamily::InPlane => "in_plane",
            MotionFamily::OutPlane => "out_plane",
            MotionFamily::TzRx => "tz_rx",
            MotionFamily::Mixed => "mixed",
        }
    }
}

/// Motion amplitude: translations in mm, rotations in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Amplitude {
    pub translation_mm: f64,
    pub rotation_rad: f64,
}

impl Amplitude {
    pub fn new(translation_mm: f64, rotation_deg: f64) -> Self {
        Self {
            translation_mm,
            rotation_rad: rotation_deg.to_radians(),
        }
    }

    pub fn scaled(self, s: f64) -> Self {
        Self {
            translation_mm: self.translation_mm * s,
            rotation_rad: self.rotation_rad * s,
        }
    }

    fn for_param(self, k: usize) -> f64 {
        if k < 3 {
            self.rotation_rad
        } else {
            self.translation_mm
        }
    }
}

/// Six rigid-parameter tracks sampled at shared node positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSpline {
    pub kind: SplineKind,
    pub node_views: Vec<f64>,
    /// `node_values[p][k]`: parameter `p` at node `k`.
    pub node_values: [Vec<f64>; 6],
}

/// Node positions uniformly spaced over `[0, n_views - 1]`.
pub fn uniform_nodes(n_nodes: usize, n_views: usize) -> Vec<f64> {
    let last = (n_views - 1) as f64;
    (0..n_nodes)
        .map(|k| last * k as f64 / (n_nodes - 1) as f64)
        .collect()
}

impl MotionSpline {
    pub fn zeros(kind: SplineKind, node_views: Vec<f64>) -> Self {
        let n = node_views.len();
        Self {
            kind,
            node_views,
            node_values: std::array::from_fn(|_| vec![0.0; n]),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.node_views.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes() < 3 {
            return Err(Error::validation("spline.nodes", "need at least 3 nodes"));
        }
        for (p, track) in self.node_values.iter().enumerate() {
            check_nodes(&self.node_views, track, 3).map_err(|e| match e {
                Error::Validation { reason, .. } => Error::validation(format!("spline.{}", PARAM_NAMES[p]), reason),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Interpolants for the six tracks. Akima splines with fewer than five
    /// nodes fall back to PCHIP.
    pub fn interpolants(&self) -> Result<Vec<HermiteSpline>> {
        self.validate()?;
        self.node_values
            .iter()
            .map(|ys| match self.kind {
                SplineKind::Akima if self.n_nodes() >= 5 => HermiteSpline::akima(&self.node_views, ys),
                _ => HermiteSpline::pchip(&self.node_views, ys),
            })
            .collect()
    }

    /// Parameters at fractional view index `x`.
    pub fn params_at(&self, x: f64) -> Result<RigidParams> {
        let splines = self.interpolants()?;
        let mut out = [0.0; 6];
        for (o, s) in out.iter_mut().zip(&splines) {
            *o = s.eval(x)?;
        }
        Ok(out)
    }

    /// Evaluates all tracks at every view and builds the rigid transforms.
    pub fn sample_params(&self, n_views: usize) -> Result<Vec<RigidParams>> {
        let splines = self.interpolants()?;
        (0..n_views)
            .map(|i| {
                let mut p = [0.0; 6];
                for (o, s) in p.iter_mut().zip(&splines) {
                    *o = s.eval(i as f64)?;
                }
                Ok(p)
            })
            .collect()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for track in &mut out.node_values {
            track.iter_mut().for_each(|v| *v *= s);
        }
        out
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("kind,node_view,rx,ry,rz,tx,ty,tz\n");
        for k in 0..self.n_nodes() {
            let _ = write!(out, "{},{}", self.kind.as_str(), self.node_views[k]);
            for track in &self.node_values {
                let _ = write!(out, ",{:.17e}", track[k]);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut node_views = Vec::new();
        let mut node_values: [Vec<f64>; 6] = Default::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("kind") {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 8 {
                return Err(Error::validation(
                    format!("motion csv line {}", i + 1),
                    format!("expected 8 columns, got {}", cols.len()),
                ));
            }
            let k: SplineKind = cols[0].parse()?;
            if kind.is_some_and(|prev| prev != k) {
                return Err(Error::validation("motion csv", "mixed spline kinds"));
            }
            kind = Some(k);
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::validation(format!("motion csv line {}", i + 1), format!("bad number '{s}'")))
            };
            node_views.push(num(cols[1])?);
            for p in 0..6 {
                node_values[p].push(num(cols[2 + p])?);
            }
        }
        let spline = Self {
            kind: kind.ok_or_else(|| Error::validation("motion csv", "no nodes"))?,
            node_views,
            node_values,
        };
        spline.validate()?;
        Ok(spline)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }
}

/// Per-view rigid transforms from the spline tracks.
pub fn sample_motion(spline: &MotionSpline, n_views: usize) -> Result<MotionTrajectory> {
    Ok(MotionTrajectory {
        transforms: spline
            .sample_params(n_views)?
            .iter()
            .map(RigidTransform::from_params)
            .collect(),
    })
}

/// Spline family of simulated ground-truth motion.
pub const SIMULATION_SPLINE: SplineKind = SplineKind::Akima;

/// Random Akima motion: node values uniform in `+/- amplitude` on the
/// family's tracks, zero elsewhere; the first node is pinned to zero.
pub fn random_motion(
    seed: u64,
    amplitude: Amplitude,
    n_nodes: usize,
    n_views: usize,
    family: MotionFamily,
) -> Result<MotionSpline> {
    if n_nodes < 5 {
        return Err(Error::validation("motion.n_nodes", "Akima motion needs at least 5 nodes"));
    }
    if n_views < n_nodes {
        return Err(Error::validation("motion.n_nodes", "more nodes than views"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spline = MotionSpline::zeros(SIMULATION_SPLINE, uniform_nodes(n_nodes, n_views));
    let mask = family.mask();
    for k in 1..n_nodes {
        for p in 0..6 {
            // draw unconditionally so the families share one random stream
            let u: f64 = rng.gen_range(-1.0..=1.0);
            if mask[p] {
                spline.node_values[p][k] = u * amplitude.for_param(p);
            }
        }
    }
    Ok(spline)
}
