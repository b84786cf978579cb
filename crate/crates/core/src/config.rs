//! TOML run configuration for the `deform` command. Relative paths are
//! resolved against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::body_loss::BodyLossParams;
use crate::guidance::{CameraSet, GuidanceWeights};
use crate::mesh::Vec3;
use crate::optimize::{ObjectiveConfig, SecondStageStart};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub meshes: MeshPaths,
    #[serde(default)]
    pub contacts: ContactSpec,
    #[serde(default)]
    pub weights: Weights,
    #[serde(default)]
    pub cameras: Option<CameraSpec>,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub output: OutputSpec,
    /// Directory the config was loaded from.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshPaths {
    pub template: PathBuf,
    pub body: Option<PathBuf>,
    pub guidance: Option<PathBuf>,
}

/// Contact points as body vertex indices or as an OBJ of points.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactSpec {
    pub indices: Option<Vec<usize>>,
    pub points: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Weights {
    pub semantic: f64,
    pub contact: f64,
    pub penetration: f64,
    pub threshold: f64,
    pub alpha: f64,
    pub chamfer: f64,
    pub image: f64,
}

impl Default for Weights {
    fn default() -> Self {
        let d = ObjectiveConfig::default();
        Weights {
            semantic: d.lambda_semantic,
            contact: d.body.lambda_contact,
            penetration: d.body.lambda_penetration,
            threshold: d.body.threshold,
            alpha: d.alpha,
            chamfer: d.guidance.chamfer,
            image: d.guidance.image,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSpec {
    pub resolution: usize,
    /// Softness in pixels.
    pub sigma_pixels: f64,
    /// View directions; the eight cube diagonals when absent.
    pub directions: Option<Vec<[f64; 3]>>,
    pub up: [f64; 3],
    /// Frame centre and half extent; fitted to the meshes when absent.
    pub center: Option<[f64; 3]>,
    pub half_extent: Option<f64>,
    /// Target silhouettes, one per view, instead of rendering the guidance mesh.
    pub silhouettes: Option<Vec<PathBuf>>,
}

impl Default for CameraSpec {
    fn default() -> Self {
        CameraSpec {
            resolution: 64,
            sigma_pixels: 0.5,
            directions: None,
            up: [0.0, 0.0, 1.0],
            center: None,
            half_extent: None,
            silhouettes: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    #[default]
    Joint,
    TwoStage,
    TwoStageFromGuidance,
}

impl RunMode {
    pub fn second_stage_start(&self) -> Option<SecondStageStart> {
        match self {
            RunMode::Joint => None,
            RunMode::TwoStage => Some(SecondStageStart::SemanticResult),
            RunMode::TwoStageFromGuidance => Some(SecondStageStart::GuidanceMesh),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub mode: RunMode,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub samples: usize,
    pub resample: bool,
    pub pin: Option<usize>,
    pub snapshot_every: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        let d = ObjectiveConfig::default();
        OptimizerSpec {
            mode: RunMode::Joint,
            iterations: d.iterations,
            learning_rate: d.learning_rate,
            beta1: d.betas.0,
            beta2: d.betas.1,
            epsilon: d.epsilon,
            seed: d.seed,
            samples: d.samples,
            resample: d.resample,
            pin: d.pin,
            snapshot_every: d.snapshot_every,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub mesh: String,
    pub record: String,
    pub timings: String,
    pub penetration_map: String,
    pub snapshots: String,
    /// Also write PGM silhouettes of the final mesh for every camera.
    pub silhouettes: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: PathBuf::from("out"),
            mesh: "final.obj".into(),
            record: "record.csv".into(),
            timings: "timings.csv".into(),
            penetration_map: "penetration.txt".into(),
            snapshots: "snapshots".into(),
            silhouettes: false,
        }
    }
}

fn vec3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.base_dir = base_dir.into();
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    fn check(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.contacts.indices.is_some() && self.contacts.points.is_some() {
            return bad("give contacts either as indices or as points, not both");
        }
        let has_contacts = self.contacts.indices.is_some() || self.contacts.points.is_some();
        if has_contacts && self.meshes.body.is_none() {
            return bad("contacts need a body mesh");
        }
        if self.weights.contact > 0.0 && self.meshes.body.is_some() && !has_contacts {
            return bad("a positive contact weight needs contacts");
        }
        let semantic = self.weights.semantic > 0.0;
        if semantic && self.weights.chamfer > 0.0 && self.meshes.guidance.is_none() {
            return bad("chamfer guidance needs a guidance mesh");
        }
        if semantic && self.weights.image > 0.0 {
            match &self.cameras {
                None => return bad("image guidance needs a [cameras] section"),
                Some(c) if c.silhouettes.is_none() && self.meshes.guidance.is_none() => {
                    return bad("image guidance needs a guidance mesh or target silhouettes")
                }
                _ => {}
            }
        }
        if let Some(c) = &self.cameras {
            if !(c.sigma_pixels > 0.0) {
                return bad("cameras.sigma_pixels must be positive");
            }
            if let (Some(s), Some(d)) = (&c.silhouettes, &c.directions) {
                if s.len() != d.len() {
                    return bad("one silhouette per camera direction is required");
                }
            } else if let Some(s) = &c.silhouettes {
                if s.len() != 8 {
                    return bad("the default camera set has eight views, so eight silhouettes are required");
                }
            }
        }
        if self.optimizer.mode != RunMode::Joint && (self.meshes.guidance.is_none() || self.meshes.body.is_none()) {
            return bad("two-stage runs need both a guidance mesh and a body");
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output.dir)
    }

    /// Weights and optimizer settings; cameras are attached separately once
    /// the meshes are loaded.
    pub fn objective(&self) -> ObjectiveConfig {
        let w = &self.weights;
        let o = &self.optimizer;
        let snapshot_dir = (o.snapshot_every > 0).then(|| self.output_dir().join(&self.output.snapshots));
        ObjectiveConfig {
            lambda_semantic: w.semantic,
            body: BodyLossParams {
                lambda_contact: w.contact,
                lambda_penetration: w.penetration,
                threshold: w.threshold,
            },
            alpha: w.alpha,
            guidance: GuidanceWeights {
                chamfer: w.chamfer,
                image: w.image,
            },
            cameras: None,
            sigma: ObjectiveConfig::default().sigma,
            samples: o.samples,
            resample: o.resample,
            iterations: o.iterations,
            learning_rate: o.learning_rate,
            betas: (o.beta1, o.beta2),
            epsilon: o.epsilon,
            snapshot_every: o.snapshot_every,
            snapshot_dir,
            seed: o.seed,
            pin: o.pin,
        }
    }
}

impl CameraSpec {
    /// Builds the camera set; `frame` supplies the fitted centre and half
    /// extent used when the config leaves them out.
    pub fn build(&self, frame: (Vec3, f64)) -> Result<(CameraSet, f64), crate::guidance::GuidanceError> {
        let center = self.center.map(vec3).unwrap_or(frame.0);
        let half = self.half_extent.unwrap_or(frame.1);
        let set = match &self.directions {
            None => CameraSet::default_views(center, half, self.resolution)?,
            Some(dirs) => CameraSet::new(
                dirs.iter()
                    .map(|d| crate::guidance::Camera::new(vec3(*d), vec3(self.up), center, half, self.resolution))
                    .collect::<Result<_, _>>()?,
            )?,
        };
        let sigma = self.sigma_pixels * 2.0 * half / self.resolution as f64;
        Ok((set, sigma))
    }
}
