//! The `simulate`, `train`, `compensate` and `evaluate` commands.
//!
//! Output directory layout:
//!
//! | file | written by |
//! |---|---|
//! | `config.json` | every command (resolved config) |
//! | `phantom.json`, `trajectory.csv`, `motion_true.csv` | simulate |
//! | `stack_clean.rawp`, `stack_motion.rawp` | simulate |
//! | `ground_truth.rawv`, `reference.rawv`, `uncompensated.rawv` | simulate |
//! | `model.rpem`, `training_log.csv`, `training_report.json` | train |
//! | `compensated_<method>.rawv`, `motion_<method>.csv`, `report_<method>.json` | compensate |
//! | `metrics.csv` | compensate, evaluate |
//! | `slices_<method>.pgm` | evaluate |
//! | `manifest.json` | every command |
//!
//! `manifest.json` lists the SHA-256 of every artifact next to the config
//! hash and seed. CSV outputs start with a `# config_sha256=... seed=...`
//! comment line.
//!
//! Slice images are 16-bit PGMs of the central axial slice, four panels
//! side by side: motion-free reference, uncompensated, compensated and the
//! absolute difference compensated minus reference. The first three share
//! a window spanning the reference slice's minimum to maximum; the
//! difference panel maps `[0, width / 4]` of that window to black..white.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cbct_autofocus::geometry::{circular_trajectory, MarkerSet, MotionTrajectory, Trajectory};
use cbct_autofocus::io::{self, Window};
use cbct_autofocus::iqm::{
    build_training_set, oracle_rpe, regressor_train, IqmKind, RegressorModel,
};
use cbct_autofocus::metrics::{artifact_suppression, data_range, dilate, rmse, ssim, SsimParams, MASK_DILATION};
use cbct_autofocus::motion::{random_motion, sample_motion, MotionSpline};
use cbct_autofocus::optim::{compensate, IqmSource, RunReport};
use cbct_autofocus::phantom::{forward_project_integrated, support_mask, voxelize, Phantom, ProjectionStack, Volume};
use cbct_autofocus::recon::{fdk, ReconMode};
use cbct_autofocus::{Error, Result};

use crate::config::{Config, MethodConfig};

pub const METRICS_HEADER: &str = "dataset,family,method,artifact_suppression_pct,ssim,rmse,runtime_s,note";
const NOISE_STREAM: u64 = 0x6e6f_6973_65;

/// A config bound to an output directory.
pub struct Run {
    pub cfg: Config,
    pub out: PathBuf,
    hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config_sha256: String,
    pub seed: u64,
    pub n_samples: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub best_val_pearson: f64,
    pub label_mean_px: f64,
    pub label_max_px: f64,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub config_sha256: String,
    pub seed: u64,
    pub method: String,
    pub iqm: IqmKind,
    /// SHA-256 of the measured stack before and after compensation.
    pub stack_sha256_before: String,
    pub stack_sha256_after: String,
    /// Reprojection error of the residual motion against the injected one.
    pub residual_rpe_px: f64,
    pub uncompensated_rpe_px: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub artifact_suppression_pct: Option<f64>,
    pub runtime_s: f64,
    pub run: RunReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub artifact_suppression_pct: Option<f64>,
    pub ssim: f64,
    pub rmse: f64,
    pub runtime_s: f64,
    pub note: String,
}

fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn stack_sha256(stack: &ProjectionStack) -> String {
    let mut h = Sha256::new();
    for v in &stack.data {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

impl Run {
    pub fn new(cfg: Config, out: impl Into<PathBuf>) -> Result<Run> {
        cfg.validate()?;
        let out = out.into();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let hash = cfg.hash();
        Ok(Run { cfg, out, hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn stamp(&self) -> String {
        format!("# config_sha256={} seed={}\n", self.hash, self.cfg.seed)
    }

    fn elapsed(&self, t: Instant) -> f64 {
        if self.cfg.deterministic {
            0.0
        } else {
            t.elapsed().as_secs_f64()
        }
    }

    fn trajectory(&self) -> Result<Trajectory> {
        circular_trajectory(&self.cfg.geometry.circular())
    }

    /// Records the hashes of `files` in the manifest. A manifest from a
    /// different config is replaced.
    fn register(&self, files: &[&str]) -> Result<()> {
        let path = self.path("manifest.json");
        let mut manifest = match read_json::<Manifest>(&path) {
            Ok(m) if m.config_sha256 == self.hash && m.seed == self.cfg.seed => m,
            _ => Manifest {
                config_sha256: self.hash.clone(),
                seed: self.cfg.seed,
                artifacts: BTreeMap::new(),
            },
        };
        write_json(&self.path("config.json"), &self.cfg)?;
        for name in files.iter().copied().chain(["config.json"]) {
            let p = self.path(name);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            manifest.artifacts.insert(name.to_string(), sha256_bytes(&bytes));
        }
        write_json(&path, &manifest)
    }

    fn project(&self, phantom: &Phantom, traj: &Trajectory, motion: &MotionTrajectory) -> Result<ProjectionStack> {
        let s = &self.cfg.simulation;
        let nv = traj.geometry.detector.nv;
        let mut stack = forward_project_integrated(phantom, traj, motion, 0..nv, s.detector_subsamples)?;
        if s.noise_sigma > 0.0 {
            stack.add_gaussian_noise(s.noise_sigma, self.cfg.seed ^ NOISE_STREAM)?;
        }
        Ok(stack)
    }

    pub fn simulate(&self) -> Result<()> {
        let s = &self.cfg.simulation;
        let phantom = self.cfg.phantom()?;
        let traj = self.trajectory()?;
        let n = traj.len();
        let spline = random_motion(self.cfg.seed, s.amplitude(), s.n_nodes, n, s.family)?;
        let truth = sample_motion(&spline, n)?;
        let t = Instant::now();
        let clean = self.project(&phantom, &traj, &MotionTrajectory::identity(n))?;
        let moved = self.project(&phantom, &traj, &truth)?;
        log::info!("simulated 2 x {n} views in {:.1} s", t.elapsed().as_secs_f64());

        let grid = self.cfg.reconstruction.grid();
        let id = MotionTrajectory::identity(n);
        let reference = fdk(&clean, &traj, &id, &grid, ReconMode::Full)?;
        let uncompensated = fdk(&moved, &traj, &id, &grid, ReconMode::Full)?;

        phantom.write_json(&self.path("phantom.json"))?;
        traj.write_csv(&self.path("trajectory.csv"))?;
        write_text(&self.path("motion_true.csv"), &(self.stamp() + &spline.to_csv_string()))?;
        io::write_stack(&clean, &self.path("stack_clean.rawp"))?;
        io::write_stack(&moved, &self.path("stack_motion.rawp"))?;
        io::write_volume(&voxelize(&phantom, &grid)?, &self.path("ground_truth.rawv"))?;
        io::write_volume(&reference, &self.path("reference.rawv"))?;
        io::write_volume(&uncompensated, &self.path("uncompensated.rawv"))?;
        self.register(&[
            "phantom.json",
            "trajectory.csv",
            "motion_true.csv",
            "stack_clean.rawp",
            "stack_motion.rawp",
            "ground_truth.rawv",
            "reference.rawv",
            "uncompensated.rawv",
        ])
    }

    pub fn train(&self) -> Result<()> {
        let t_cfg = &self.cfg.training;
        let phantom = self.cfg.phantom()?;
        let traj = self.trajectory()?;
        let t = Instant::now();
        let samples = build_training_set(self.cfg.seed, &t_cfg.set, &phantom, &traj, &MarkerSet::default_markers())?;
        log::info!("built {} training samples in {:.1} s", samples.len(), t.elapsed().as_secs_f64());
        let trained = regressor_train(&samples, &t_cfg.fit)?;
        let best = trained
            .history
            .iter()
            .min_by(|a, b| a.val_mse.total_cmp(&b.val_mse))
            .copied()
            .ok_or_else(|| Error::validation("training.fit.epochs", "no epochs ran"))?;
        let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
        let report = TrainingReport {
            config_sha256: self.hash.clone(),
            seed: self.cfg.seed,
            n_samples: samples.len(),
            best_epoch: best.epoch,
            best_val_mse: best.val_mse,
            best_val_pearson: best.val_pearson,
            label_mean_px: labels.iter().sum::<f64>() / labels.len() as f64,
            label_max_px: labels.iter().copied().fold(0.0, f64::max),
            runtime_s: self.elapsed(t),
        };
        trained.model.write(&self.path("model.rpem"))?;
        write_text(&self.path("training_log.csv"), &(self.stamp() + &trained.log_csv()))?;
        write_json(&self.path("training_report.json"), &report)?;
        log::info!(
            "best epoch {}: validation MSE {:.4}, Pearson r {:.3}",
            best.epoch,
            best.val_mse,
            best.val_pearson
        );
        self.register(&["model.rpem", "training_log.csv", "training_report.json"])
    }

    fn model_path(&self, m: &MethodConfig) -> PathBuf {
        m.model.clone().unwrap_or_else(|| self.path("model.rpem"))
    }

    fn iqm_source(&self, index: usize, m: &MethodConfig, truth: &MotionTrajectory) -> Result<IqmSource> {
        Ok(match m.iqm {
            IqmKind::Entropy => IqmSource::Entropy,
            IqmKind::OracleRpe => IqmSource::Oracle {
                truth: truth.clone(),
                markers: MarkerSet::default_markers(),
            },
            IqmKind::Regressor => {
                let path = self.model_path(m);
                if !path.is_file() {
                    return Err(Error::validation(
                        format!("compensation.methods[{index}].model"),
                        format!("regressor model {} not found; run `train` first or set the path", path.display()),
                    ));
                }
                IqmSource::Regressor(RegressorModel::read(&path)?)
            }
        })
    }

    fn true_motion(&self, n_views: usize) -> Result<MotionTrajectory> {
        let path = self.path("motion_true.csv");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let spline = MotionSpline::from_csv_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        sample_motion(&spline, n_views)
    }

    pub fn compensate(&self) -> Result<()> {
        let traj = self.trajectory()?;
        let n = traj.len();
        let stack = io::read_stack(&self.path("stack_motion.rawp"))?;
        if stack.n_views != n || stack.detector != traj.geometry.detector {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} views of the configured detector"),
                actual: format!("{} views, {:?}", stack.n_views, stack.detector),
            });
        }
        let truth = self.true_motion(n)?;
        let scorer = Scorer::new(self)?;
        let markers = MarkerSet::default_markers();
        let uncompensated_rpe = oracle_rpe(&traj, &truth, &MotionTrajectory::identity(n), &markers)?;
        let before = stack_sha256(&stack);
        let mut files = Vec::new();
        for (i, m) in self.cfg.compensation.methods.iter().enumerate() {
            let source = self.iqm_source(i, m, &truth)?;
            log::info!("compensating with method '{}' ({})", m.name, m.iqm.as_str());
            let t = Instant::now();
            let (mut comp, volume) = compensate(
                &stack,
                &traj,
                &self.cfg.objective(m),
                source,
                &self.cfg.compensation.schedule,
                &self.cfg.reconstruction.grid(),
            )?;
            let runtime_s = self.elapsed(t);
            if self.cfg.deterministic {
                comp.report.sweep_seconds.iter_mut().for_each(|s| *s = 0.0);
            }
            let after = stack_sha256(&stack);
            if after != before {
                return Err(Error::validation("stack_motion.rawp", "projection data changed during compensation"));
            }
            let (r, s) = scorer.score(&volume)?;
            let report = MethodReport {
                config_sha256: self.hash.clone(),
                seed: self.cfg.seed,
                method: m.name.clone(),
                iqm: m.iqm,
                stack_sha256_before: before.clone(),
                stack_sha256_after: after,
                residual_rpe_px: oracle_rpe(&traj, &truth, &comp.motion, &markers)?,
                uncompensated_rpe_px: uncompensated_rpe,
                rmse: r,
                ssim: s,
                artifact_suppression_pct: scorer.suppression(r),
                runtime_s,
                run: comp.report,
            };
            let vol_name = format!("compensated_{}.rawv", m.name);
            let motion_name = format!("motion_{}.csv", m.name);
            let report_name = format!("report_{}.json", m.name);
            io::write_volume(&volume, &self.path(&vol_name))?;
            write_text(&self.path(&motion_name), &(self.stamp() + &comp.spline.to_csv_string()))?;
            write_json(&self.path(&report_name), &report)?;
            files.extend([vol_name, motion_name, report_name]);
        }
        self.write_metrics(&scorer)?;
        files.push("metrics.csv".into());
        let names: Vec<&str> = files.iter().map(String::as_str).collect();
        self.register(&names)
    }

    /// Rows for the uncompensated volume and every configured method.
    pub fn metrics_rows(&self, scorer: &Scorer) -> Result<Vec<MetricsRow>> {
        let note = if scorer.baseline > 0.0 {
            String::new()
        } else {
            "uncompensated RMSE is zero; artifact suppression undefined".to_string()
        };
        let mut rows = vec![MetricsRow {
            method: "uncompensated".into(),
            artifact_suppression_pct: scorer.suppression(scorer.baseline),
            ssim: scorer.uncompensated_ssim,
            rmse: scorer.baseline,
            runtime_s: 0.0,
            note: note.clone(),
        }];
        for m in &self.cfg.compensation.methods {
            let volume = io::read_volume(&self.path(&format!("compensated_{}.rawv", m.name)))?;
            let report: MethodReport = read_json(&self.path(&format!("report_{}.json", m.name)))?;
            let (r, s) = scorer.score(&volume)?;
            rows.push(MetricsRow {
                method: m.name.clone(),
                artifact_suppression_pct: scorer.suppression(r),
                ssim: s,
                rmse: r,
                runtime_s: report.runtime_s,
                note: note.clone(),
            });
        }
        Ok(rows)
    }

    fn write_metrics(&self, scorer: &Scorer) -> Result<()> {
        let mut csv = self.stamp();
        csv.push_str(METRICS_HEADER);
        csv.push('\n');
        for row in self.metrics_rows(scorer)? {
            let as_pct = row.artifact_suppression_pct.map(|a| format!("{a:.2}")).unwrap_or_default();
            let _ = writeln!(
                csv,
                "{},{},{},{},{:.6},{:.6e},{:.1},{}",
                self.cfg.dataset,
                self.cfg.simulation.family.as_str(),
                row.method,
                as_pct,
                row.ssim,
                row.rmse,
                row.runtime_s,
                row.note
            );
        }
        write_text(&self.path("metrics.csv"), &csv)
    }

    pub fn evaluate(&self) -> Result<()> {
        let scorer = Scorer::new(self)?;
        self.write_metrics(&scorer)?;
        let mut files = vec!["metrics.csv".to_string()];
        let nx = scorer.reference.grid.nx;
        let reference = scorer.reference.central_slice();
        let uncompensated = scorer.uncompensated.central_slice();
        let window = Window::from_range(reference);
        for m in &self.cfg.compensation.methods {
            let volume = io::read_volume(&self.path(&format!("compensated_{}.rawv", m.name)))?;
            let slice = volume.central_slice();
            let diff: Vec<f32> = slice.iter().zip(reference).map(|(a, b)| (a - b).abs()).collect();
            let diff_scaled: Vec<f32> = diff.iter().map(|d| (window.lo + 4.0 * *d as f64) as f32).collect();
            let tiled = io::tile_horizontal(&[reference, uncompensated, slice, &diff_scaled], nx)?;
            let name = format!("slices_{}.pgm", m.name);
            io::write_pgm(&tiled, 4 * nx, window, &self.path(&name))?;
            files.push(name);
        }
        let names: Vec<&str> = files.iter().map(String::as_str).collect();
        self.register(&names)
    }

    /// simulate, train (when a method needs the regressor), compensate,
    /// evaluate.
    pub fn all(&self) -> Result<()> {
        self.simulate()?;
        if self.cfg.uses_regressor() {
            self.train()?;
        }
        self.compensate()?;
        self.evaluate()
    }
}

/// RMSE over the dilated phantom support and central-slice SSIM, both
/// against the motion-free reconstruction.
pub struct Scorer {
    pub reference: Volume,
    pub uncompensated: Volume,
    mask: Vec<bool>,
    range: f64,
    pub baseline: f64,
    pub uncompensated_ssim: f64,
}

impl Scorer {
    pub fn new(run: &Run) -> Result<Scorer> {
        let reference = io::read_volume(&run.path("reference.rawv"))?;
        let uncompensated = io::read_volume(&run.path("uncompensated.rawv"))?;
        let phantom = Phantom::read_json(&run.path("phantom.json"))?;
        Scorer::from_volumes(reference, uncompensated, &phantom)
    }

    pub fn from_volumes(reference: Volume, uncompensated: Volume, phantom: &Phantom) -> Result<Scorer> {
        if uncompensated.grid != reference.grid {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", reference.grid),
                actual: format!("{:?}", uncompensated.grid),
            });
        }
        let grid = reference.grid;
        let mask = dilate(&support_mask(phantom, &grid), &grid, MASK_DILATION)?;
        let range = data_range(reference.central_slice());
        let mut scorer = Scorer {
            reference,
            uncompensated,
            mask,
            range,
            baseline: 0.0,
            uncompensated_ssim: 0.0,
        };
        let (b, s) = scorer.score(&scorer.uncompensated)?;
        scorer.baseline = b;
        scorer.uncompensated_ssim = s;
        Ok(scorer)
    }

    /// `(rmse, ssim)` of `volume`.
    pub fn score(&self, volume: &Volume) -> Result<(f64, f64)> {
        if volume.grid != self.reference.grid {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.reference.grid),
                actual: format!("{:?}", volume.grid),
            });
        }
        let r = rmse(&self.reference.data, &volume.data, Some(&self.mask))?;
        let range = if self.range > 0.0 { self.range } else { 1.0 };
        let s = ssim(
            self.reference.central_slice(),
            volume.central_slice(),
            self.reference.grid.nx,
            range,
            &SsimParams::default(),
        )?;
        Ok((r, s))
    }

    /// Artifact suppression in percent, `None` without a baseline error.
    pub fn suppression(&self, rmse: f64) -> Option<f64> {
        artifact_suppression(self.baseline, rmse).ok()
    }
}
