//! Experiment configuration: one JSON file per run.
//!
//! Every section and field is optional; missing values take the defaults
//! below. Unknown fields are rejected. Errors name the offending field as
//! a dotted path, e.g. `compensation.methods[1].lambda`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cbct_autofocus::consistency::{LutConfig, PairConfig};
use cbct_autofocus::geometry::{CircularGeometry, DetectorSpec};
use cbct_autofocus::iqm::{IqmKind, TrainConfig, TrainingSetConfig, MIN_TRAINING_SAMPLES};
use cbct_autofocus::motion::{Amplitude, MotionFamily, SIMULATION_SPLINE};
use cbct_autofocus::optim::{BlockSchedule, Lambda, ObjectiveConfig, ParamPreset, ESTIMATION_SPLINE};
use cbct_autofocus::phantom::{Grid, Phantom, DETECTOR_SUBSAMPLES};
use cbct_autofocus::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Label written to the `dataset` column of the metrics.
    pub dataset: String,
    pub seed: u64,
    /// Write zero runtimes so repeated runs give identical files.
    pub deterministic: bool,
    /// Phantom definition (JSON); the built-in head phantom when absent.
    /// Relative paths are resolved against the config file.
    pub phantom: Option<PathBuf>,
    pub geometry: GeometryConfig,
    pub simulation: SimulationConfig,
    pub reconstruction: ReconstructionConfig,
    pub training: TrainingConfig,
    pub compensation: CompensationConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            dataset: "head".into(),
            seed: 1,
            deterministic: true,
            phantom: None,
            geometry: GeometryConfig::default(),
            simulation: SimulationConfig::default(),
            reconstruction: ReconstructionConfig::default(),
            training: TrainingConfig::default(),
            compensation: CompensationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub sid_mm: f64,
    pub sdd_mm: f64,
    pub n_views: usize,
    pub angular_range_deg: f64,
    pub detector_cols: usize,
    pub detector_rows: usize,
    pub pixel_mm: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        let g = CircularGeometry::default();
        GeometryConfig {
            sid_mm: g.sid,
            sdd_mm: g.sdd,
            n_views: g.n_views,
            angular_range_deg: g.angular_range.to_degrees(),
            detector_cols: g.detector.nu,
            detector_rows: g.detector.nv,
            pixel_mm: g.detector.du,
        }
    }
}

impl GeometryConfig {
    pub fn circular(&self) -> CircularGeometry {
        CircularGeometry {
            sid: self.sid_mm,
            sdd: self.sdd_mm,
            n_views: self.n_views,
            angular_range: self.angular_range_deg.to_radians(),
            detector: DetectorSpec::centered(self.detector_cols, self.detector_rows, self.pixel_mm, self.pixel_mm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub family: MotionFamily,
    pub max_translation_mm: f64,
    pub max_rotation_deg: f64,
    /// Akima nodes of the injected motion.
    pub n_nodes: usize,
    pub detector_subsamples: usize,
    /// Standard deviation of additive Gaussian noise on the line integrals.
    pub noise_sigma: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            family: MotionFamily::InPlane,
            max_translation_mm: 5.0,
            max_rotation_deg: 2.0,
            n_nodes: 10,
            detector_subsamples: DETECTOR_SUBSAMPLES,
            noise_sigma: 0.0,
        }
    }
}

impl SimulationConfig {
    pub fn amplitude(&self) -> Amplitude {
        Amplitude::new(self.max_translation_mm, self.max_rotation_deg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub voxel_mm: f64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig { nx: 128, ny: 128, nz: 17, voxel_mm: 2.0 }
    }
}

impl ReconstructionConfig {
    pub fn grid(&self) -> Grid {
        Grid::centered(self.nx, self.ny, self.nz, [self.voxel_mm; 3])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub set: TrainingSetConfig,
    pub fit: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    /// Row label in the metrics and suffix of the output files.
    pub name: String,
    pub iqm: IqmKind,
    pub lambda: Lambda,
    /// Regressor weights; `model.rpem` in the output directory when absent.
    pub model: Option<PathBuf>,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            name: "proposed".into(),
            iqm: IqmKind::Regressor,
            lambda: Lambda::Auto,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompensationConfig {
    pub active: ParamPreset,
    /// PCHIP nodes of the motion estimate.
    pub n_nodes: usize,
    pub pairs: PairConfig,
    pub lut: LutConfig,
    pub schedule: BlockSchedule,
    pub methods: Vec<MethodConfig>,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        CompensationConfig {
            active: ParamPreset::All,
            n_nodes: 13,
            pairs: PairConfig { stride: 8, ..PairConfig::default() },
            lut: LutConfig::default(),
            schedule: BlockSchedule { max_evals_per_block: 1500, ..BlockSchedule::default() },
            methods: vec![
                MethodConfig {
                    name: "entropy".into(),
                    iqm: IqmKind::Entropy,
                    lambda: Lambda::Fixed(0.0),
                    model: None,
                },
                MethodConfig::default(),
            ],
        }
    }
}

/// Rewrites the field path of a validation error to sit under `prefix`,
/// replacing the leading segment the library used.
fn under(prefix: &str, e: Error) -> Error {
    match e {
        Error::Validation { field, reason } => {
            let rest = field.split_once('.').map(|(_, r)| r).unwrap_or(&field);
            Error::validation(format!("{prefix}.{rest}"), reason)
        }
        other => other,
    }
}

fn check(ok: bool, field: &str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::validation(field, reason))
    }
}

impl Config {
    /// Parses and validates a config file.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Config::from_json(&text)?;
        if let Some(p) = &cfg.phantom {
            if p.is_relative() {
                cfg.phantom = Some(path.parent().unwrap_or(Path::new(".")).join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without validating; errors carry the JSON path.
    pub fn from_json(text: &str) -> Result<Config> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "config".to_string() } else { path };
            Error::validation(field, e.into_inner().to_string())
        })
    }

    pub fn validate(&self) -> Result<()> {
        check(!self.dataset.is_empty() && !self.dataset.contains(','), "dataset", "must be non-empty without commas")?;
        let g = &self.geometry;
        check(g.n_views >= 2, "geometry.n_views", "need at least 2 views")?;
        check(g.pixel_mm > 0.0, "geometry.pixel_mm", "must be positive")?;
        check(g.angular_range_deg > 0.0 && g.angular_range_deg <= 360.0, "geometry.angular_range_deg", "must be in (0, 360]")?;
        g.circular().validate().map_err(|e| under("geometry", e))?;

        let s = &self.simulation;
        check(
            s.max_translation_mm >= 0.0 && s.max_rotation_deg >= 0.0,
            "simulation.max_translation_mm",
            "amplitudes must be non-negative",
        )?;
        check(s.n_nodes >= 5 && s.n_nodes <= g.n_views, "simulation.n_nodes", "need 5 to n_views nodes")?;
        check(s.detector_subsamples >= 1, "simulation.detector_subsamples", "must be at least 1")?;
        check(s.noise_sigma >= 0.0 && s.noise_sigma.is_finite(), "simulation.noise_sigma", "must be non-negative")?;

        let r = &self.reconstruction;
        check(r.nx > 0 && r.ny > 0 && r.nz > 0, "reconstruction.nx", "grid dimensions must be positive")?;
        check(r.voxel_mm > 0.0, "reconstruction.voxel_mm", "must be positive")?;

        let t = &self.training;
        t.set.validate().map_err(|e| under("training.set", e))?;
        check(
            t.set.n_samples >= MIN_TRAINING_SAMPLES,
            "training.set.n_samples",
            &format!("need at least {MIN_TRAINING_SAMPLES} samples"),
        )?;
        t.fit.validate().map_err(|e| under("training.fit", e))?;

        let c = &self.compensation;
        check(c.n_nodes >= 2 && c.n_nodes <= g.n_views, "compensation.n_nodes", "need 2 to n_views nodes")?;
        check(
            SIMULATION_SPLINE != ESTIMATION_SPLINE,
            "compensation",
            "simulation and estimation must use different spline families",
        )?;
        c.schedule
            .validate(c.n_nodes - 1)
            .map_err(|e| under("compensation.schedule", e))?;
        check(!c.methods.is_empty(), "compensation.methods", "need at least one method")?;
        for (i, m) in c.methods.iter().enumerate() {
            let field = format!("compensation.methods[{i}]");
            check(
                !m.name.is_empty() && m.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-'),
                &format!("{field}.name"),
                "use letters, digits, '_' or '-'",
            )?;
            check(
                m.name != "uncompensated" && !c.methods[..i].iter().any(|o| o.name == m.name),
                &format!("{field}.name"),
                "names must be unique and not 'uncompensated'",
            )?;
            self.objective(m).validate().map_err(|e| under(&field, e))?;
        }
        Ok(())
    }

    /// Objective settings for one compensation method.
    pub fn objective(&self, m: &MethodConfig) -> ObjectiveConfig {
        let c = &self.compensation;
        ObjectiveConfig {
            iqm: m.iqm,
            lambda: m.lambda,
            active: c.active,
            pairs: c.pairs,
            lut: c.lut,
            slice_size: self.reconstruction.nx.max(self.reconstruction.ny),
            slice_pixel_mm: self.reconstruction.voxel_mm,
            regressor_size: self.training.set.input_size,
            regressor_pixel_mm: self.training.set.pixel_mm,
            n_nodes: c.n_nodes,
        }
    }

    pub fn phantom(&self) -> Result<Phantom> {
        match &self.phantom {
            Some(p) => Phantom::read_json(p),
            None => Ok(Phantom::default_head()),
        }
    }

    pub fn uses_regressor(&self) -> bool {
        self.compensation.methods.iter().any(|m| m.iqm == IqmKind::Regressor)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
