//! Image-quality metrics on the central axial slice: histogram entropy,
//! the oracle reprojection error, and a small convolutional RPE regressor.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rpe, MarkerSet, MotionTrajectory, Trajectory};
use crate::motion::{random_motion, sample_motion, Amplitude, MotionFamily};
use crate::phantom::{forward_project_integrated, Grid, Phantom, DETECTOR_SUBSAMPLES};
use crate::recon::{fdk, ReconMode};

pub const ENTROPY_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IqmKind {
    Entropy,
    OracleRpe,
    Regressor,
}

impl IqmKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IqmKind::Entropy => "entropy",
            IqmKind::OracleRpe => "oracle_rpe",
            IqmKind::Regressor => "regressor",
        }
    }
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`, split
/// into the sample below and the interpolated increment above it.
fn percentile(sorted: &[f64], q: f64) -> (f64, f64) {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    (sorted[lo], (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Shannon entropy (nats) of the intensity histogram. Bins span the 1st to
/// 99th percentile; values outside are counted in the end bins.
pub fn entropy_iqm(slice: &[f32], n_bins: usize) -> Result<f64> {
    if n_bins < 2 {
        return Err(Error::validation("iqm.n_bins", "need at least 2 bins"));
    }
    if slice.is_empty() {
        return Err(Error::validation("iqm.slice", "empty slice"));
    }
    if slice.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("iqm.slice", "non-finite value"));
    }
    let mut sorted: Vec<f64> = slice.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let (lo, lo_frac) = percentile(&sorted, 0.01);
    let (hi, hi_frac) = percentile(&sorted, 0.99);
    // differences first so a constant offset cancels exactly
    let width = (hi - lo) + hi_frac - lo_frac;
    if !(width > 0.0) {
        return Ok(0.0);
    }
    let mut counts = vec![0usize; n_bins];
    for &v in slice {
        let t = ((v as f64 - lo) - lo_frac) / width * n_bins as f64;
        let k = if t <= 0.0 { 0 } else { (t as usize).min(n_bins - 1) };
        counts[k] += 1;
    }
    let n = slice.len() as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

/// Reprojection error of an estimate against the true motion: the RPE of
/// the residual `M_true^-1 * M_est` on the truly acquired trajectory.
pub fn oracle_rpe(
    traj: &Trajectory,
    true_motion: &MotionTrajectory,
    estimate: &MotionTrajectory,
    markers: &MarkerSet,
) -> Result<f64> {
    let acquired = Trajectory {
        views: traj.effective(true_motion)?,
        geometry: traj.geometry,
    };
    rpe(&acquired, &true_motion.relative_to(estimate)?, markers)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

/// Shifts to zero mean and scales to unit variance; a constant slice is
/// only shifted.
pub fn normalize_slice(slice: &[f32]) -> (Vec<f32>, Normalization) {
    let n = slice.len().max(1) as f64;
    let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = slice.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    let out = slice.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect();
    (out, Normalization { mean, std })
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa > 0.0 && sbb > 0.0 {
        sab / (saa * sbb).sqrt()
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Network

/// Channel widths of the four stride-2 convolutions.
pub const CHANNELS: [usize; 4] = [8, 16, 32, 64];
pub const INPUT_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvShape {
    cin: usize,
    cout: usize,
}

impl ConvShape {
    fn n_weights(self) -> usize {
        self.cout * self.cin * 9
    }

    fn n_params(self) -> usize {
        self.n_weights() + self.cout
    }
}

fn out_size(n: usize) -> usize {
    (n - 1) / 2 + 1
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Feature map, channel-major.
#[derive(Debug, Clone)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Map {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map { c, h, w, data: vec![0.0; c * h * w] }
    }
}

fn conv_forward(input: &Map, shape: ConvShape, params: &[f64]) -> Map {
    let (w, b) = params.split_at(shape.n_weights());
    let (ho, wo) = (out_size(input.h), out_size(input.w));
    let mut out = Map::zeros(shape.cout, ho, wo);
    for oc in 0..shape.cout {
        let plane = &mut out.data[oc * ho * wo..(oc + 1) * ho * wo];
        plane.fill(b[oc]);
        for ic in 0..shape.cin {
            let k = &w[(oc * shape.cin + ic) * 9..][..9];
            let src = &input.data[ic * input.h * input.w..][..input.h * input.w];
            for oy in 0..ho {
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    let row = &src[iy as usize * input.w..][..input.w];
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for kx in 0..3 {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < input.w as isize {
                                acc += k[ky * 3 + kx] * row[ix as usize];
                            }
                        }
                        plane[oy * wo + ox] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Accumulates parameter gradients into `grad` and returns the gradient
/// with respect to the input (skipped for the first layer).
fn conv_backward(
    input: &Map,
    dz: &Map,
    shape: ConvShape,
    params: &[f64],
    grad: &mut [f64],
    need_input_grad: bool,
) -> Option<Map> {
    let w = &params[..shape.n_weights()];
    let (gw, gb) = grad.split_at_mut(shape.n_weights());
    let (ho, wo) = (dz.h, dz.w);
    let mut din = need_input_grad.then(|| Map::zeros(input.c, input.h, input.w));
    for oc in 0..shape.cout {
        let d = &dz.data[oc * ho * wo..][..ho * wo];
        gb[oc] += d.iter().sum::<f64>();
        for ic in 0..shape.cin {
            let base = (oc * shape.cin + ic) * 9;
            let src = &input.data[ic * input.h * input.w..][..input.h * input.w];
            for oy in 0..ho {
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let g = d[oy * wo + ox];
                        for kx in 0..3 {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= input.w as isize {
                                continue;
                            }
                            let idx = iy * input.w + ix as usize;
                            gw[base + ky * 3 + kx] += g * src[idx];
                            if let Some(din) = din.as_mut() {
                                din.data[ic * input.h * input.w + idx] += g * w[base + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

/// Four stride-2 3x3 convolutions with SiLU, global average pooling and an
/// affine output, evaluated in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<ConvShape>,
    pub params: Vec<f64>,
}

struct Tape {
    /// Layer inputs followed by the last activation.
    acts: Vec<Map>,
    pre: Vec<Map>,
    pooled: Vec<f64>,
    output: f64,
}

impl Network {
    fn shapes(channels: &[usize]) -> Vec<ConvShape> {
        let mut cin = 1;
        channels
            .iter()
            .map(|&cout| {
                let s = ConvShape { cin, cout };
                cin = cout;
                s
            })
            .collect()
    }

    fn with_channels(channels: &[usize], params: Vec<f64>) -> Result<Self> {
        let layers = Self::shapes(channels);
        let net = Network { layers, params };
        if net.params.len() != net.n_params() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", net.n_params()),
                actual: format!("{}", net.params.len()),
            });
        }
        Ok(net)
    }

    /// He-initialized convolutions, zero biases, output bias `bias0`.
    pub fn init(seed: u64, bias0: f64) -> Self {
        let layers = Self::shapes(&CHANNELS);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for s in &layers {
            let normal = Normal::new(0.0, (2.0 / (s.cin * 9) as f64).sqrt()).unwrap();
            params.extend((0..s.n_weights()).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat(0.0).take(s.cout));
        }
        let last = layers.last().unwrap().cout;
        let normal = Normal::new(0.0, (1.0 / last as f64).sqrt()).unwrap();
        params.extend((0..last).map(|_| normal.sample(&mut rng)));
        params.push(bias0);
        Network { layers, params }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|s| s.n_params()).sum::<usize>() + self.head_width() + 1
    }

    fn head_width(&self) -> usize {
        self.layers.last().map_or(1, |s| s.cout)
    }

    fn layer_params(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.layers
            .iter()
            .map(|s| {
                let r = start..start + s.n_params();
                start = r.end;
                r
            })
            .collect()
    }

    fn run(&self, input: &[f32], side: usize) -> Result<Tape> {
        if input.len() != side * side || side == 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("{side}x{side} slice"),
                actual: format!("{} values", input.len()),
            });
        }
        let ranges = self.layer_params();
        let mut acts = vec![Map { c: 1, h: side, w: side, data: input.iter().map(|&v| v as f64).collect() }];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (s, r) in self.layers.iter().zip(&ranges) {
            let z = conv_forward(acts.last().unwrap(), *s, &self.params[r.clone()]);
            let a = Map { data: z.data.iter().map(|&v| silu(v)).collect(), ..z.clone() };
            pre.push(z);
            acts.push(a);
        }
        let last = acts.last().unwrap();
        let hw = (last.h * last.w) as f64;
        let pooled: Vec<f64> = last.data.chunks(last.h * last.w).map(|c| c.iter().sum::<f64>() / hw).collect();
        let head = &self.params[ranges.last().map_or(0, |r| r.end)..];
        let output = head[pooled.len()] + pooled.iter().zip(head).map(|(p, w)| p * w).sum::<f64>();
        Ok(Tape { acts, pre, pooled, output })
    }

    pub fn forward(&self, input: &[f32], side: usize) -> Result<f64> {
        Ok(self.run(input, side)?.output)
    }

    /// Output and gradient of `0.5 * weight * (output - target)^2`
    /// accumulated into `grad`; returns the output.
    fn accumulate_grad(&self, input: &[f32], side: usize, target: f64, weight: f64, grad: &mut [f64]) -> Result<f64> {
        let tape = self.run(input, side)?;
        let dout = weight * (tape.output - target);
        let ranges = self.layer_params();
        let head_start = ranges.last().map_or(0, |r| r.end);
        let nh = tape.pooled.len();
        for k in 0..nh {
            grad[head_start + k] += dout * tape.pooled[k];
        }
        grad[head_start + nh] += dout;
        let last = tape.acts.last().unwrap();
        let hw = last.h * last.w;
        let mut da = Map::zeros(last.c, last.h, last.w);
        for c in 0..last.c {
            let g = dout * self.params[head_start + c] / hw as f64;
            da.data[c * hw..(c + 1) * hw].fill(g);
        }
        for l in (0..self.layers.len()).rev() {
            let z = &tape.pre[l];
            let mut dz = da;
            for (d, &zv) in dz.data.iter_mut().zip(&z.data) {
                *d *= silu_grad(zv);
            }
            let r = ranges[l].clone();
            let din = conv_backward(&tape.acts[l], &dz, self.layers[l], &self.params[r.clone()], &mut grad[r], l > 0);
            match din {
                Some(d) => da = d,
                None => break,
            }
        }
        Ok(tape.output)
    }

    /// Mean squared error over a batch and its gradient.
    pub fn mse_and_grad(&self, inputs: &[&[f32]], targets: &[f64], side: usize) -> Result<(f64, Vec<f64>)> {
        let n = inputs.len() as f64;
        let per_sample: Vec<(f64, Vec<f64>)> = inputs
            .par_iter()
            .zip(targets.par_iter())
            .map(|(x, &t)| {
                let mut g = vec![0.0; self.params.len()];
                let out = self.accumulate_grad(x, side, t, 2.0 / n, &mut g)?;
                Ok(((out - t).powi(2), g))
            })
            .collect::<Result<_>>()?;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (l, g) in &per_sample {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok((loss / n, grad))
    }

    pub fn mse(&self, inputs: &[&[f32]], targets: &[f64], side: usize) -> Result<f64> {
        let preds = self.predict_all(inputs, side)?;
        Ok(preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / inputs.len() as f64)
    }

    fn predict_all(&self, inputs: &[&[f32]], side: usize) -> Result<Vec<f64>> {
        inputs.par_iter().map(|x| self.forward(x, side)).collect()
    }
}

/// Trained regressor with single-precision weights as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorModel {
    pub channels: Vec<usize>,
    pub input_size: usize,
    pub weights: Vec<f32>,
}

const MODEL_MAGIC: &[u8; 4] = b"RPEM";

impl RegressorModel {
    pub fn from_network(net: &Network, input_size: usize) -> Self {
        RegressorModel {
            channels: net.layers.iter().map(|s| s.cout).collect(),
            input_size,
            weights: net.params.iter().map(|&w| w as f32).collect(),
        }
    }

    pub fn network(&self) -> Result<Network> {
        Network::with_channels(&self.channels, self.weights.iter().map(|&w| w as f64).collect())
    }

    /// Layout: `RPEM`, u32 layer count, u32 channel width per layer, u32
    /// input side, u32 weight count, then the weights; all little-endian.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(self.channels.len() as u32).to_le_bytes())?;
        for &c in &self.channels {
            w.write_all(&(c as u32).to_le_bytes())?;
        }
        w.write_all(&(self.input_size as u32).to_le_bytes())?;
        w.write_all(&(self.weights.len() as u32).to_le_bytes())?;
        for &x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = std::io::BufWriter::new(f);
        self.write_to(&mut buf).and_then(|_| buf.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err("missing RPEM magic".into());
        }
        let n_layers = r.u32()?;
        if n_layers == 0 || n_layers > 16 {
            return Err(format!("implausible layer count {n_layers}"));
        }
        let channels = (0..n_layers).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let input_size = r.u32()?;
        let n = r.u32()?;
        let expected = Network::shapes(&channels).iter().map(|s| s.n_params()).sum::<usize>() + channels[n_layers - 1] + 1;
        if n != expected {
            return Err(format!("weight count {n} does not match layer dims ({expected})"));
        }
        let weights = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if r.pos != bytes.len() {
            return Err("trailing bytes after weights".into());
        }
        Ok(RegressorModel { channels, input_size, weights })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or("truncated model file")?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

/// Raw network output for a normalized slice; may be negative.
pub fn regressor_infer(model: &RegressorModel, slice: &[f32]) -> Result<f64> {
    model.network()?.forward(slice, model.input_size)
}

/// Predicted RPE clamped at zero, as reported.
pub fn predicted_rpe(model: &RegressorModel, slice: &[f32]) -> Result<f64> {
    Ok(regressor_infer(model, slice)?.max(0.0))
}

// ---------------------------------------------------------------------------
// Training data

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub slice: Vec<f32>,
    pub normalization: Normalization,
    /// RPE in detector pixels.
    pub label: f64,
    pub family: MotionFamily,
    pub amplitude: Amplitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSetConfig {
    pub n_samples: usize,
    /// Per-sample amplitudes are drawn uniformly from zero to these.
    pub max_translation_mm: f64,
    pub max_rotation_deg: f64,
    pub n_nodes: usize,
    pub families: Vec<MotionFamily>,
    pub input_size: usize,
    pub pixel_mm: f64,
    /// Rays per detector pixel along each axis in the simulation.
    pub detector_subsamples: usize,
}

impl Default for TrainingSetConfig {
    fn default() -> Self {
        TrainingSetConfig {
            n_samples: 500,
            max_translation_mm: 5.0,
            max_rotation_deg: 2.0,
            n_nodes: 10,
            families: vec![MotionFamily::InPlane],
            input_size: INPUT_SIZE,
            pixel_mm: 4.0,
            detector_subsamples: DETECTOR_SUBSAMPLES,
        }
    }
}

impl TrainingSetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::validation("training.n_samples", "must be positive"));
        }
        if !(self.max_translation_mm >= 0.0 && self.max_rotation_deg >= 0.0) {
            return Err(Error::validation("training.max_amplitude", "must be non-negative"));
        }
        if self.families.is_empty() {
            return Err(Error::validation("training.families", "need at least one motion family"));
        }
        if self.input_size < 4 || !(self.pixel_mm > 0.0) {
            return Err(Error::validation("training.input_size", "need at least 4 pixels of positive size"));
        }
        if self.detector_subsamples == 0 {
            return Err(Error::validation("training.detector_subsamples", "must be at least 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid::centered(self.input_size, self.input_size, 1, [self.pixel_mm; 3])
    }
}

/// Detector rows read when backprojecting the plane `z = 0` without motion.
fn central_rows(traj: &Trajectory) -> std::ops::Range<usize> {
    let det = traj.geometry.detector;
    let v = det.v0.floor().max(0.0) as usize;
    v.saturating_sub(1)..(v + 3).min(det.nv)
}

/// Uncompensated central slice of `phantom` under `motion`, normalized.
pub fn corrupted_slice(
    phantom: &Phantom,
    traj: &Trajectory,
    motion: &MotionTrajectory,
    grid: &Grid,
    subsamples: usize,
) -> Result<(Vec<f32>, Normalization)> {
    let stack = forward_project_integrated(phantom, traj, motion, central_rows(traj), subsamples)?;
    let vol = fdk(&stack, traj, &MotionTrajectory::identity(traj.len()), grid, ReconMode::CentralSlice)?;
    Ok(normalize_slice(&vol.data))
}

/// One sample per index: sample `i` depends only on `(seed, i)`.
pub fn build_training_set(
    seed: u64,
    cfg: &TrainingSetConfig,
    phantom: &Phantom,
    traj: &Trajectory,
    markers: &MarkerSet,
) -> Result<Vec<TrainingSample>> {
    cfg.validate()?;
    let grid = cfg.grid();
    let n_views = traj.len();
    (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let family = cfg.families[rng.gen_range(0..cfg.families.len())];
            let scale: f64 = rng.gen_range(0.0..=1.0);
            let amplitude = Amplitude::new(cfg.max_translation_mm, cfg.max_rotation_deg).scaled(scale);
            let spline = random_motion(rng.gen(), amplitude, cfg.n_nodes, n_views, family)?;
            let motion = sample_motion(&spline, n_views)?;
            let (slice, normalization) = corrupted_slice(phantom, traj, &motion, &grid, cfg.detector_subsamples)?;
            let label = rpe(traj, &motion, markers)?;
            Ok(TrainingSample { slice, normalization, label, family, amplitude })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            learning_rate: 2e-3,
            batch_size: 16,
            val_fraction: 0.2,
            seed: 7,
        }
    }
}

pub const MIN_TRAINING_SAMPLES: usize = 50;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("train.epochs", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("train.learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("train.batch_size", "must be positive"));
        }
        if !(self.val_fraction >= 0.2 && self.val_fraction < 1.0) {
            return Err(Error::validation("train.val_fraction", "held-out split must be in [0.2, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_pearson: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRegressor {
    pub model: RegressorModel,
    pub history: Vec<EpochLog>,
    pub val_indices: Vec<usize>,
}

impl TrainedRegressor {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse,val_pearson_r\n");
        for e in &self.history {
            s.push_str(&format!("{},{:.9e},{:.9e},{:.9}\n", e.epoch, e.train_mse, e.val_mse, e.val_pearson));
        }
        s
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Mini-batch Adam on the mean squared error. The held-out split is a
/// seeded permutation; per-sample gradients are summed in index order so
/// results do not depend on the thread count. Returns the weights of the
/// epoch with the lowest validation error.
pub fn regressor_train(samples: &[TrainingSample], cfg: &TrainConfig) -> Result<TrainedRegressor> {
    cfg.validate()?;
    if samples.len() < MIN_TRAINING_SAMPLES {
        return Err(Error::validation(
            "training.n_samples",
            format!("need at least {MIN_TRAINING_SAMPLES} samples, got {}", samples.len()),
        ));
    }
    let side = (samples[0].slice.len() as f64).sqrt() as usize;
    if let Some(bad) = samples.iter().position(|s| s.slice.len() != side * side) {
        return Err(Error::ShapeMismatch {
            expected: format!("{side}x{side} slices"),
            actual: format!("sample {bad} with {} values", samples[bad].slice.len()),
        });
    }
    if samples.iter().any(|s| !(s.label >= 0.0)) {
        return Err(Error::validation("training.labels", "labels must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64 * cfg.val_fraction).ceil() as usize).max(1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_inputs: Vec<&[f32]> = val_idx.iter().map(|&i| samples[i].slice.as_slice()).collect();
    let val_labels: Vec<f64> = val_idx.iter().map(|&i| samples[i].label).collect();
    let mean_label = train_idx.iter().map(|&i| samples[i].label).sum::<f64>() / train_idx.len() as f64;

    let mut net = Network::init(rng.gen(), mean_label);
    let mut adam = Adam::new(net.params.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let inputs: Vec<&[f32]> = batch.iter().map(|&i| samples[i].slice.as_slice()).collect();
            let labels: Vec<f64> = batch.iter().map(|&i| samples[i].label).collect();
            let (loss, grad) = net.mse_and_grad(&inputs, &labels, side)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged {
                    epoch,
                    detail: format!("batch loss {loss} after {} optimizer steps", adam.t),
                });
            }
            sum += loss * batch.len() as f64;
            adam.step(&mut net.params, &grad, cfg.learning_rate);
        }
        let train_mse = sum / train_idx.len() as f64;
        let preds = net.predict_all(&val_inputs, side)?;
        let val_mse = preds.iter().zip(&val_labels).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / preds.len() as f64;
        if !val_mse.is_finite() {
            return Err(Error::TrainingDiverged { epoch, detail: format!("validation loss {val_mse}") });
        }
        let val_pearson = pearson(&preds, &val_labels);
        log::info!("epoch {epoch}: train mse {train_mse:.4e}, val mse {val_mse:.4e}, val r {val_pearson:.4}");
        history.push(EpochLog { epoch, train_mse, val_mse, val_pearson });
        if best.as_ref().map_or(true, |(b, _)| val_mse < *b) {
            best = Some((val_mse, net.params.clone()));
        }
    }
    net.params = best.map(|(_, p)| p).unwrap_or(net.params);
    Ok(TrainedRegressor {
        model: RegressorModel::from_network(&net, side),
        history,
        val_indices: val_idx.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{circular_trajectory, CircularGeometry, DetectorSpec};
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_iqm(&[0.7; 100], ENTROPY_BINS).unwrap(), 0.0);
        let two: Vec<f32> = (0..200).map(|i| if i % 2 == 0 { 1.0 } else { 3.0 }).collect();
        assert!((entropy_iqm(&two, ENTROPY_BINS).unwrap() - 2f64.ln()).abs() < 1e-9);
        assert!(entropy_iqm(&two, 1).is_err());
        assert!(entropy_iqm(&[f32::NAN, 1.0], 8).is_err());
    }

    #[test]
    fn entropy_of_uniform_ramp_approaches_log_bins() {
        let ramp: Vec<f32> = (0..25600).map(|i| i as f32).collect();
        let h = entropy_iqm(&ramp, 256).unwrap();
        // the 1% tails pile into the end bins
        assert!(h < 256f64.ln() && h > 256f64.ln() - 0.1, "{h}");
    }

    proptest! {
        #[test]
        fn entropy_is_invariant_under_affine_rescaling(
            seed in 0u64..500,
            scale_exp in -3i32..4,
            offset in -64i32..64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img: Vec<f32> = (0..1024).map(|_| rng.gen_range(0..4096) as f32 / 64.0).collect();
            let a = 2f32.powi(scale_exp);
            let b = offset as f32;
            let rescaled: Vec<f32> = img.iter().map(|v| v * a + b).collect();
            let h0 = entropy_iqm(&img, ENTROPY_BINS).unwrap();
            let h1 = entropy_iqm(&rescaled, ENTROPY_BINS).unwrap();
            prop_assert!((h0 - h1).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_gives_zero_mean_unit_variance() {
        let img: Vec<f32> = (0..256).map(|i| (i as f32 * 0.3).sin() * 4.0 + 2.0).collect();
        let (n, norm) = normalize_slice(&img);
        let mean = n.iter().map(|&v| v as f64).sum::<f64>() / 256.0;
        let var = n.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 256.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);
        assert!((norm.mean - 2.0).abs() < 0.1);
        let (c, norm) = normalize_slice(&[3.0; 16]);
        assert!(c.iter().all(|&v| v == 0.0));
        assert_eq!(norm.std, 1.0);
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &[2.0, 4.0, 6.0, 8.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[1.0; 4]), 0.0);
    }

    fn toy_net(seed: u64) -> Network {
        let mut net = Network::init(seed, 0.3);
        // non-zero biases so their gradients are exercised off the origin
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
        for p in net.params.iter_mut() {
            *p += rng.gen_range(-0.05..0.05);
        }
        net
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        let mut net = toy_net(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs: Vec<Vec<f32>> = (0..3).map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0f32)).collect()).collect();
        let refs: Vec<&[f32]> = inputs.iter().map(|v| v.as_slice()).collect();
        let targets = [0.5, 1.5, -0.2];
        let (_, grad) = net.mse_and_grad(&refs, &targets, 4).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..net.params.len() {
            let orig = net.params[i];
            net.params[i] = orig + h;
            let fp = net.mse(&refs, &targets, 4).unwrap();
            net.params[i] = orig - h;
            let fm = net.mse(&refs, &targets, 4).unwrap();
            net.params[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let diff = (numeric - grad[i]).abs();
            if diff > 1e-6 {
                worst = worst.max(diff / numeric.abs().max(grad[i].abs()));
            }
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let net = Network::init(3, 0.0);
        let model = RegressorModel::from_network(&net, 64);
        let zeros = vec![0.0f32; 64 * 64];
        let a = regressor_infer(&model, &zeros).unwrap();
        assert!(a.is_finite());
        assert_eq!(a.to_bits(), regressor_infer(&model, &zeros).unwrap().to_bits());
        assert!(predicted_rpe(&model, &zeros).unwrap() >= 0.0);
        assert!(matches!(regressor_infer(&model, &zeros[..100]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn model_file_round_trip() {
        let net = Network::init(4, 1.0);
        let model = RegressorModel::from_network(&net, 64);
        let mut bytes = Vec::new();
        model.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"RPEM");
        assert_eq!(bytes.len(), 4 + 4 + 16 + 8 + 4 * net.n_params());
        assert_eq!(RegressorModel::from_bytes(&bytes).unwrap(), model);
        assert!(RegressorModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(RegressorModel::from_bytes(&bad).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rpem");
        model.write(&path).unwrap();
        assert_eq!(RegressorModel::read(&path).unwrap(), model);
    }

    fn toy_samples(n: usize, label: impl Fn(usize) -> f64) -> Vec<TrainingSample> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                TrainingSample {
                    slice: (0..64).map(|_| rng.gen_range(-1.0..1.0f32)).collect(),
                    normalization: Normalization { mean: 0.0, std: 1.0 },
                    label: label(i),
                    family: MotionFamily::InPlane,
                    amplitude: Amplitude::new(0.0, 0.0),
                }
            })
            .collect()
    }

    #[test]
    fn constant_labels_are_learned_by_the_bias() {
        let samples = toy_samples(60, |_| 2.5);
        let cfg = TrainConfig { epochs: 20, ..TrainConfig::default() };
        let trained = regressor_train(&samples, &cfg).unwrap();
        assert_eq!(trained.history.len(), 20);
        let best = trained.history.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
        assert!(best < 1e-4, "{best}");
        let csv = trained.log_csv();
        assert_eq!(csv.lines().count(), 21);
        assert!(csv.starts_with("epoch,train_mse,val_mse,val_pearson_r"));
    }

    #[test]
    fn training_is_reproducible_and_validates_inputs() {
        let samples = toy_samples(60, |i| (i % 7) as f64 * 0.3);
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
        let a = regressor_train(&samples, &cfg).unwrap();
        let b = regressor_train(&samples, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.val_indices.len(), 12);
        assert!(regressor_train(&samples[..40], &cfg).is_err());
        let bad = TrainConfig { val_fraction: 0.1, ..cfg.clone() };
        assert!(regressor_train(&samples, &bad).is_err());
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let samples = toy_samples(60, |i| i as f64 * 1e200);
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        assert!(matches!(regressor_train(&samples, &cfg), Err(Error::TrainingDiverged { .. })));
    }

    fn small_setup() -> (Trajectory, Phantom) {
        let geom = CircularGeometry {
            sid: 750.0,
            sdd: 1200.0,
            n_views: 60,
            angular_range: 2.0 * PI,
            detector: DetectorSpec::centered(224, 64, 2.0, 2.0),
        };
        (circular_trajectory(&geom).unwrap(), Phantom::default_head())
    }

    #[test]
    fn training_set_contract() {
        let (traj, phantom) = small_setup();
        let markers = MarkerSet::default_markers();
        let cfg = TrainingSetConfig { n_samples: 4, input_size: 16, pixel_mm: 16.0, ..TrainingSetConfig::default() };
        let a = build_training_set(5, &cfg, &phantom, &traj, &markers).unwrap();
        let b = build_training_set(5, &cfg, &phantom, &traj, &markers).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|s| s.slice.len() == 256 && s.label >= 0.0));
        let zero = TrainingSetConfig { max_translation_mm: 0.0, max_rotation_deg: 0.0, ..cfg };
        let z = build_training_set(5, &zero, &phantom, &traj, &markers).unwrap();
        assert!(z.iter().all(|s| s.label == 0.0));
    }

    #[test]
    fn central_rows_match_full_projection_for_central_slice() {
        let (traj, phantom) = small_setup();
        let grid = Grid::centered(32, 32, 1, [8.0; 3]);
        let id = MotionTrajectory::identity(traj.len());
        let (fast, _) = corrupted_slice(&phantom, &traj, &id, &grid, 2).unwrap();
        let nv = traj.geometry.detector.nv;
        let full = forward_project_integrated(&phantom, &traj, &id, 0..nv, 2).unwrap();
        let vol = fdk(&full, &traj, &id, &grid, ReconMode::CentralSlice).unwrap();
        let (slow, _) = normalize_slice(&vol.data);
        assert_eq!(fast, slow);
    }

    #[test]
    fn labels_double_when_translation_spline_is_scaled() {
        let (traj, _) = small_setup();
        let markers = MarkerSet::default_markers();
        let spline = random_motion(9, Amplitude::new(3.0, 0.0), 6, traj.len(), MotionFamily::InPlane).unwrap();
        let mut tx_only = spline.clone();
        tx_only.node_values[2].iter_mut().for_each(|v| *v = 0.0);
        tx_only.node_values[4].iter_mut().for_each(|v| *v = 0.0);
        let a = rpe(&traj, &sample_motion(&tx_only, traj.len()).unwrap(), &markers).unwrap();
        let b = rpe(&traj, &sample_motion(&tx_only.scaled(2.0), traj.len()).unwrap(), &markers).unwrap();
        assert!(b > a && a > 0.0);
    }

    #[test]
    fn oracle_rpe_is_zero_at_truth_and_equals_rpe_without_motion() {
        let (traj, _) = small_setup();
        let markers = MarkerSet::default_markers();
        let spline = random_motion(2, Amplitude::new(4.0, 1.5), 6, traj.len(), MotionFamily::Mixed).unwrap();
        let truth = sample_motion(&spline, traj.len()).unwrap();
        let id = MotionTrajectory::identity(traj.len());
        assert!(oracle_rpe(&traj, &truth, &truth, &markers).unwrap() < 1e-9);
        let plain = rpe(&traj, &truth, &markers).unwrap();
        assert_eq!(oracle_rpe(&traj, &id, &truth, &markers).unwrap(), plain);
    }
}
