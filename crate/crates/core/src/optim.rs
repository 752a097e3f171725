//! Motion estimation: block-wise Nelder-Mead over PCHIP node parameters,
//! minimizing `IQM(FDK(M)) + lambda * ECC(M)`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::consistency::{build_luts, ecc_total_pairs, LutConfig, PairConfig, RadonLut};
use crate::error::{Error, Result};
use crate::geometry::{MarkerSet, MotionTrajectory, Trajectory};
use crate::iqm::{entropy_iqm, normalize_slice, oracle_rpe, IqmKind, Network, RegressorModel, ENTROPY_BINS};
use crate::motion::{sample_motion, uniform_nodes, MotionSpline, SplineKind};
use crate::phantom::{Grid, ProjectionStack, Volume};
use crate::recon::{backproject, prefilter, FilterMethod, FilteredStack, ReconMode};

// ---------------------------------------------------------------------------
// Nelder-Mead

#[derive(Debug, Clone, PartialEq)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    /// Best vertex value after each iteration.
    pub trace: Vec<f64>,
}

/// Nelder-Mead simplex with reflection 1, expansion 2, contraction 0.5 and
/// shrink 0.5. The initial simplex is `x0` plus one vertex per coordinate
/// offset by `steps[i]`. Stops when the spread of vertex values drops
/// below `tol` or after `max_evals` evaluations.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], steps: &[f64], tol: f64, max_evals: usize) -> Result<NmResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let n = x0.len();
    if n == 0 {
        return Err(Error::validation("nelder_mead.x0", "empty parameter vector"));
    }
    if steps.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} steps"),
            actual: format!("{}", steps.len()),
        });
    }
    if !(tol >= 0.0) {
        return Err(Error::validation("nelder_mead.tol", "must be non-negative"));
    }
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> Result<f64> {
        *evals += 1;
        let v = f(x)?;
        if v.is_nan() {
            return Err(Error::NonFiniteObjective { point: x.to_vec() });
        }
        Ok(v)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(x0, &mut evals)?;
    if !f0.is_finite() {
        return Err(Error::NonFiniteObjective { point: x0.to_vec() });
    }
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += steps[i];
        let v = eval(&x, &mut evals)?;
        simplex.push((x, v));
    }
    let mut trace = Vec::new();
    let combine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + t * (q - p)).collect() };
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        trace.push(simplex[0].1);
        let spread = simplex[n].1 - simplex[0].1;
        if spread <= tol || evals >= max_evals {
            break;
        }
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let worst = simplex[n].clone();
        // centroid + t * (centroid - worst)
        let point = |t: f64| combine(&centroid, &worst.0, -t);
        let xr = point(1.0);
        let fr = eval(&xr, &mut evals)?;
        if fr < simplex[0].1 {
            let xe = point(2.0);
            let fe = eval(&xe, &mut evals)?;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let xc = point(0.5);
                let fc = eval(&xc, &mut evals)?;
                (xc, fc)
            } else {
                let xc = point(-0.5);
                let fc = eval(&xc, &mut evals)?;
                (xc, fc)
            };
            if fc < worst.1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let xs = combine(&best, &vertex.0, 0.5);
                    let fs = eval(&xs, &mut evals)?;
                    *vertex = (xs, fs);
                }
            }
        }
    }
    let (x, f) = simplex.swap_remove(0);
    Ok(NmResult { x, f, evals, trace })
}

// ---------------------------------------------------------------------------
// Objective

/// Spline family of the motion estimate.
pub const ESTIMATION_SPLINE: SplineKind = SplineKind::Pchip;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ParamPreset {
    #[default]
    All,
    InPlane,
    OutPlane,
}

impl ParamPreset {
    pub fn mask(self) -> [bool; 6] {
        match self {
            ParamPreset::All => [true; 6],
            ParamPreset::InPlane => crate::motion::MotionFamily::InPlane.mask(),
            ParamPreset::OutPlane => crate::motion::MotionFamily::OutPlane.mask(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub iqm: IqmKind,
    pub lambda: Lambda,
    pub active: ParamPreset,
    pub pairs: PairConfig,
    pub lut: LutConfig,
    /// Slice reconstructed for the entropy metric.
    pub slice_size: usize,
    pub slice_pixel_mm: f64,
    /// Slice reconstructed for the regressor.
    pub regressor_size: usize,
    pub regressor_pixel_mm: f64,
    pub n_nodes: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            iqm: IqmKind::OracleRpe,
            lambda: Lambda::Auto,
            active: ParamPreset::All,
            pairs: PairConfig::default(),
            lut: LutConfig::default(),
            slice_size: 128,
            slice_pixel_mm: 2.0,
            regressor_size: crate::iqm::INPUT_SIZE,
            regressor_pixel_mm: 4.0,
            n_nodes: 7,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if let Lambda::Fixed(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::validation("objective.lambda", "must be finite and non-negative"));
            }
        }
        if self.n_nodes < 2 {
            return Err(Error::validation("objective.n_nodes", "need at least 2 estimation nodes"));
        }
        if self.slice_size == 0 || !(self.slice_pixel_mm > 0.0) {
            return Err(Error::validation("objective.slice_size", "slice must be non-empty with positive pixels"));
        }
        if self.regressor_size == 0 || !(self.regressor_pixel_mm > 0.0) {
            return Err(Error::validation("objective.regressor_size", "slice must be non-empty with positive pixels"));
        }
        self.pairs.validate()?;
        self.lut.grid(&crate::geometry::DetectorSpec::centered(16, 16, 1.0, 1.0)).validate()?;
        Ok(())
    }

    pub fn uses_ecc(&self) -> bool {
        !matches!(self.lambda, Lambda::Fixed(l) if l == 0.0)
    }
}

/// What the IQM term is evaluated against.
pub enum IqmSource {
    Entropy,
    /// Ground-truth motion of the measured stack.
    Oracle { truth: MotionTrajectory, markers: MarkerSet },
    Regressor(RegressorModel),
}

impl IqmSource {
    pub fn kind(&self) -> IqmKind {
        match self {
            IqmSource::Entropy => IqmKind::Entropy,
            IqmSource::Oracle { .. } => IqmKind::OracleRpe,
            IqmSource::Regressor(_) => IqmKind::Regressor,
        }
    }
}

enum Metric {
    Entropy(Grid),
    Oracle { truth: MotionTrajectory, markers: MarkerSet },
    Regressor { net: Network, grid: Grid },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    pub iqm: f64,
    /// `None` when the consistency term is disabled.
    pub ecc: Option<f64>,
}

impl Terms {
    pub fn total(&self, lambda: f64) -> f64 {
        self.iqm + lambda * self.ecc.unwrap_or(0.0)
    }
}

/// Precomputed state for repeated objective evaluations on one stack.
pub struct Problem<'a> {
    pub traj: &'a Trajectory,
    pub cfg: ObjectiveConfig,
    filtered: Option<FilteredStack>,
    luts: Option<Vec<RadonLut>>,
    pairs: Vec<(usize, usize)>,
    metric: Metric,
    pub node_views: Vec<f64>,
}

impl<'a> Problem<'a> {
    /// Filters the stack and builds the Radon LUTs as needed by `cfg`.
    pub fn new(stack: &ProjectionStack, traj: &'a Trajectory, cfg: ObjectiveConfig, iqm: IqmSource) -> Result<Self> {
        cfg.validate()?;
        stack.validate()?;
        if iqm.kind() != cfg.iqm {
            return Err(Error::validation(
                "objective.iqm",
                format!("configured {} but given a {} source", cfg.iqm.as_str(), iqm.kind().as_str()),
            ));
        }
        if stack.n_views != traj.len() || stack.detector != traj.geometry.detector {
            return Err(Error::ShapeMismatch {
                expected: format!("{} views on the trajectory detector", traj.len()),
                actual: format!("{} views", stack.n_views),
            });
        }
        if cfg.n_nodes > traj.len() {
            return Err(Error::validation("objective.n_nodes", "more nodes than views"));
        }
        let metric = match iqm {
            IqmSource::Entropy => {
                Metric::Entropy(Grid::centered(cfg.slice_size, cfg.slice_size, 1, [cfg.slice_pixel_mm; 3]))
            }
            IqmSource::Oracle { truth, markers } => {
                if truth.len() != traj.len() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{} true transforms", traj.len()),
                        actual: format!("{}", truth.len()),
                    });
                }
                Metric::Oracle { truth, markers }
            }
            IqmSource::Regressor(model) => {
                if model.input_size != cfg.regressor_size {
                    return Err(Error::validation(
                        "objective.regressor_size",
                        format!("model expects {} pixels, config asks for {}", model.input_size, cfg.regressor_size),
                    ));
                }
                let grid = Grid::centered(cfg.regressor_size, cfg.regressor_size, 1, [cfg.regressor_pixel_mm; 3]);
                Metric::Regressor { net: model.network()?, grid }
            }
        };
        let filtered = match metric {
            Metric::Oracle { .. } => None,
            _ => Some(prefilter(stack, &traj.geometry, FilterMethod::Fourier)?),
        };
        let (luts, pairs) = if cfg.uses_ecc() {
            let t = Instant::now();
            let luts = build_luts(stack, &traj.geometry, &cfg.lut)?;
            log::info!("built {} Radon lookup tables in {:.1} s", luts.len(), t.elapsed().as_secs_f64());
            (Some(luts), cfg.pairs.pairs(&traj.geometry))
        } else {
            (None, Vec::new())
        };
        Ok(Problem {
            traj,
            node_views: uniform_nodes(cfg.n_nodes, traj.len()),
            cfg,
            filtered,
            luts,
            pairs,
            metric,
        })
    }

    pub fn iqm_kind(&self) -> IqmKind {
        self.cfg.iqm
    }

    pub fn zero_spline(&self) -> MotionSpline {
        MotionSpline::zeros(ESTIMATION_SPLINE, self.node_views.clone())
    }

    pub fn motion(&self, spline: &MotionSpline) -> Result<MotionTrajectory> {
        sample_motion(spline, self.traj.len())
    }

    fn slice(&self, motion: &MotionTrajectory, grid: &Grid) -> Result<Volume> {
        let filtered = self.filtered.as_ref().expect("image metrics prefilter the stack");
        backproject(filtered, self.traj, motion, grid, ReconMode::CentralSlice)
    }

    pub fn iqm_term(&self, motion: &MotionTrajectory) -> Result<f64> {
        match &self.metric {
            Metric::Entropy(grid) => entropy_iqm(&self.slice(motion, grid)?.data, ENTROPY_BINS),
            Metric::Oracle { truth, markers } => oracle_rpe(self.traj, truth, motion, markers),
            Metric::Regressor { net, grid } => {
                let (x, _) = normalize_slice(&self.slice(motion, grid)?.data);
                net.forward(&x, grid.nx)
            }
        }
    }

    pub fn ecc_term(&self, motion: &MotionTrajectory) -> Result<Option<f64>> {
        match &self.luts {
            Some(luts) => ecc_total_pairs(self.traj, motion, luts, &self.cfg.pairs, &self.pairs).map(Some),
            None => Ok(None),
        }
    }

    pub fn terms(&self, spline: &MotionSpline) -> Result<Terms> {
        let motion = self.motion(spline)?;
        let terms = Terms { iqm: self.iqm_term(&motion)?, ecc: self.ecc_term(&motion)? };
        if !terms.iqm.is_finite() || terms.ecc.is_some_and(|e| !e.is_finite()) {
            return Err(Error::NonFiniteObjective { point: spline.node_values.concat() });
        }
        Ok(terms)
    }

    /// `IQM + lambda * ECC` for the given node parameters.
    pub fn objective(&self, spline: &MotionSpline, lambda: f64) -> Result<f64> {
        Ok(self.terms(spline)?.total(lambda))
    }
}

/// Balances the two terms at the starting point: `iqm / max(ecc, floor)`
/// clamped to `[1e-6, 1e6]`. A zero IQM term gives 1.
pub fn auto_lambda(iqm: f64, ecc: f64) -> f64 {
    if iqm == 0.0 {
        log::warn!("IQM term is zero at the initial estimate; using lambda = 1");
        return 1.0;
    }
    let floor = f64::EPSILON * iqm.abs().max(1.0);
    if ecc <= floor {
        log::warn!("ECC term {ecc:e} is below the floor {floor:e}; lambda clamped");
    }
    (iqm.abs() / ecc.max(floor)).clamp(1e-6, 1e6)
}

pub const STEP_TRANSLATION_MM_PER_PX: f64 = 0.5;
pub const STEP_ROTATION_PER_PX: f64 = 0.5;
pub const STEP_FLOOR_PX: f64 = 0.1;
/// RPE-equivalent used to scale the simplex for the entropy metric.
pub const ENTROPY_STEP_PX: f64 = 4.0;

/// Initial simplex steps `(translation mm, rotation rad)` for an initial
/// RPE estimate in pixels.
pub fn initial_simplex_scale(rpe_px: f64) -> (f64, f64) {
    let r = if rpe_px.is_finite() { rpe_px.max(STEP_FLOOR_PX) } else { STEP_FLOOR_PX };
    (STEP_TRANSLATION_MM_PER_PX * r, STEP_ROTATION_PER_PX * r / 100.0)
}

// ---------------------------------------------------------------------------
// Compensation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockSchedule {
    pub block_size: usize,
    pub max_sweeps: usize,
    /// Stop when a sweep lowers the objective by less than this fraction.
    pub epsilon: f64,
    pub max_evals_per_block: usize,
    /// Simplex stops when its value spread falls below this fraction of
    /// the current objective.
    pub simplex_tol: f64,
}

impl Default for BlockSchedule {
    fn default() -> Self {
        BlockSchedule {
            block_size: 3,
            max_sweeps: 5,
            epsilon: 1e-3,
            max_evals_per_block: 400,
            simplex_tol: 1e-4,
        }
    }
}

impl BlockSchedule {
    pub fn validate(&self, n_free_nodes: usize) -> Result<()> {
        if self.block_size == 0 || self.block_size > n_free_nodes.max(1) {
            return Err(Error::validation(
                "schedule.block_size",
                format!("must be between 1 and {n_free_nodes} free nodes"),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::validation("schedule.epsilon", "must be positive"));
        }
        if self.max_sweeps == 0 || self.max_evals_per_block < 2 {
            return Err(Error::validation("schedule", "need at least one sweep and two evaluations per block"));
        }
        if !(self.simplex_tol >= 0.0) {
            return Err(Error::validation("schedule.simplex_tol", "must be non-negative"));
        }
        Ok(())
    }

    /// Consecutive node blocks, skipping the pinned first node.
    pub fn blocks(&self, n_nodes: usize) -> Vec<std::ops::Range<usize>> {
        (1..n_nodes)
            .step_by(self.block_size)
            .map(|s| s..(s + self.block_size).min(n_nodes))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub sweep: usize,
    pub nodes: (usize, usize),
    pub evals: usize,
    pub start: f64,
    pub result: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub iqm: IqmKind,
    pub lambda: f64,
    pub lambda_mode: Lambda,
    pub active: ParamPreset,
    pub schedule: BlockSchedule,
    pub initial: Terms,
    pub final_terms: Terms,
    pub step_translation_mm: f64,
    pub step_rotation_rad: f64,
    /// Objective after the start point and after each block.
    pub objective_trace: Vec<f64>,
    pub blocks: Vec<BlockRecord>,
    pub sweep_seconds: Vec<f64>,
    pub evaluations: usize,
    pub sweeps: usize,
}

pub struct Compensation {
    pub spline: MotionSpline,
    pub motion: MotionTrajectory,
    pub report: RunReport,
}

/// Estimates the motion by sweeping blocks of consecutive nodes; only block
/// solutions that lower the objective are kept.
pub fn estimate_motion(problem: &Problem, schedule: &BlockSchedule) -> Result<Compensation> {
    let n_nodes = problem.node_views.len();
    schedule.validate(n_nodes - 1)?;
    let mask = problem.cfg.active.mask();
    let active: Vec<usize> = (0..6).filter(|&p| mask[p]).collect();
    let mut spline = problem.zero_spline();
    let initial = problem.terms(&spline)?;
    let lambda = match (problem.cfg.lambda, initial.ecc) {
        (Lambda::Fixed(l), _) => l,
        (Lambda::Auto, Some(ecc)) => auto_lambda(initial.iqm, ecc),
        (Lambda::Auto, None) => 0.0,
    };
    let step_px = match problem.iqm_kind() {
        IqmKind::Entropy => ENTROPY_STEP_PX,
        _ => initial.iqm.max(0.0),
    };
    let (step_t, step_r) = initial_simplex_scale(step_px);
    log::info!(
        "{} objective: iqm {:.5}, ecc {:?}, lambda {lambda:.4e}, steps {step_t:.3} mm / {step_r:.4} rad",
        problem.iqm_kind().as_str(),
        initial.iqm,
        initial.ecc
    );
    let mut current = initial.total(lambda);
    let mut trace = vec![current];
    let mut blocks = Vec::new();
    let mut sweep_seconds = Vec::new();
    let mut evaluations = 1;
    let mut sweeps = 0;
    for sweep in 0..schedule.max_sweeps {
        let t = Instant::now();
        let sweep_start = current;
        for block in schedule.blocks(n_nodes) {
            let x0: Vec<f64> = block
                .clone()
                .flat_map(|k| active.iter().map(move |&p| (p, k)))
                .map(|(p, k)| spline.node_values[p][k])
                .collect();
            let steps: Vec<f64> = block
                .clone()
                .flat_map(|_| active.iter().map(|&p| if p < 3 { step_r } else { step_t }))
                .collect();
            let apply = |s: &mut MotionSpline, x: &[f64]| {
                let mut it = x.iter();
                for k in block.clone() {
                    for &p in &active {
                        s.node_values[p][k] = *it.next().unwrap();
                    }
                }
            };
            let mut trial = spline.clone();
            let tol = schedule.simplex_tol * current.abs();
            let res = nelder_mead(
                |x| {
                    apply(&mut trial, x);
                    problem.objective(&trial, lambda)
                },
                &x0,
                &steps,
                tol,
                schedule.max_evals_per_block,
            )?;
            evaluations += res.evals;
            let accepted = res.f < current;
            blocks.push(BlockRecord {
                sweep,
                nodes: (block.start, block.end - 1),
                evals: res.evals,
                start: current,
                result: res.f,
                accepted,
            });
            if accepted {
                apply(&mut spline, &res.x);
                current = res.f;
            }
            trace.push(current);
        }
        sweeps += 1;
        sweep_seconds.push(t.elapsed().as_secs_f64());
        let decrease = (sweep_start - current) / sweep_start.abs().max(f64::MIN_POSITIVE);
        log::info!("sweep {sweep}: objective {current:.6} (relative decrease {decrease:.3e})");
        if sweep == 0 && decrease <= 0.0 {
            log::warn!("first sweep did not lower the objective");
        }
        if decrease < schedule.epsilon {
            break;
        }
    }
    let final_terms = problem.terms(&spline)?;
    let motion = problem.motion(&spline)?;
    Ok(Compensation {
        spline,
        motion,
        report: RunReport {
            iqm: problem.iqm_kind(),
            lambda,
            lambda_mode: problem.cfg.lambda,
            active: problem.cfg.active,
            schedule: schedule.clone(),
            initial,
            final_terms,
            step_translation_mm: step_t,
            step_rotation_rad: step_r,
            objective_trace: trace,
            blocks,
            sweep_seconds,
            evaluations,
            sweeps,
        },
    })
}

/// Motion estimation followed by a full-volume FDK with the estimate. The
/// stack is only read.
pub fn compensate(
    stack: &ProjectionStack,
    traj: &Trajectory,
    cfg: &ObjectiveConfig,
    iqm: IqmSource,
    schedule: &BlockSchedule,
    volume_grid: &Grid,
) -> Result<(Compensation, Volume)> {
    let problem = Problem::new(stack, traj, cfg.clone(), iqm)?;
    let comp = estimate_motion(&problem, schedule)?;
    let filtered = match &problem.filtered {
        Some(f) => f.clone(),
        None => prefilter(stack, &traj.geometry, FilterMethod::Fourier)?,
    };
    let volume = backproject(&filtered, traj, &comp.motion, volume_grid, ReconMode::Full)?;
    Ok((comp, volume))
}
