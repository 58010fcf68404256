//! JSON run configuration for `softshare train`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use softshare::model::{build_shortest_path_model_with, ArchitectureSpec};
use softshare::sharing::{CoefficientInit, ConvStrategy};
use softshare::task::CurriculumSpec;
use softshare::train::{OptimizerConfig, Schedule, TrainConfig};
use softshare::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Shared CNN; `templates` defaults to one per block.
    Scnn {
        depth: usize,
        width: usize,
        #[serde(default)]
        templates: Option<usize>,
    },
    Cnn { depth: usize, width: usize },
    /// Architecture spec JSON, relative to the config file.
    Custom { spec: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// One SPTH1 file per phase, relative to the config file.
    Files(Vec<PathBuf>),
    Generate {
        #[serde(default = "default_grid")]
        grid: usize,
        #[serde(default = "default_obstacle_p")]
        obstacle_p: f64,
        /// Dataset seed; the run seed when absent.
        #[serde(default)]
        seed: Option<u64>,
    },
}

fn default_grid() -> usize {
    softshare::task::DEFAULT_GRID
}

fn default_obstacle_p() -> f64 {
    softshare::task::DEFAULT_OBSTACLE_P
}

fn default_init() -> CoefficientInit {
    CoefficientInit::Orthogonal
}

fn default_batch() -> usize {
    32
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default = "default_init")]
    pub init: CoefficientInit,
    #[serde(default)]
    pub strategy: ConvStrategy,
    pub curriculum: CurriculumSpec,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub lambda_r: f64,
    /// One independent run per seed, each in `out_dir/seed-<s>`.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Parses and validates `path`; relative paths are resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let ModelConfig::Custom { spec } = &mut self.model {
            fix(spec);
        }
        if let DataConfig::Files(files) = &mut self.data {
            files.iter_mut().for_each(fix);
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            curriculum: self.curriculum,
            batch_size: self.batch_size,
            val_fraction: self.val_fraction,
            optimizer: self.optimizer.clone(),
            schedule: self.schedule.clone(),
            lambda_r: self.lambda_r,
            seed,
        }
    }

    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        match &self.model {
            ModelConfig::Scnn {
                depth,
                width,
                templates,
            } => Ok(build_shortest_path_model_with(
                Some(templates.unwrap_or(*depth)),
                *depth,
                *width,
            )),
            ModelConfig::Cnn { depth, width } => {
                Ok(build_shortest_path_model_with(None, *depth, *width))
            }
            ModelConfig::Custom { spec } => {
                let text = std::fs::read_to_string(spec)?;
                let spec: ArchitectureSpec = serde_json::from_str(&text)?;
                spec.validate()?;
                Ok(spec)
            }
        }
    }

    /// Every violated constraint, so a bad config is fixed in one pass.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.train_config(0).violations();
        match &self.model {
            ModelConfig::Scnn {
                depth,
                width,
                templates,
            } => {
                if *depth == 0 || *width == 0 {
                    v.push("model.depth and model.width must be positive".into());
                }
                if *templates == Some(0) {
                    v.push("model.templates must be positive".into());
                }
            }
            ModelConfig::Cnn { depth, width } => {
                if *depth == 0 || *width == 0 {
                    v.push("model.depth and model.width must be positive".into());
                }
            }
            ModelConfig::Custom { spec } => {
                if let Err(e) = self.architecture() {
                    v.push(format!("model.spec {}: {e}", spec.display()));
                }
            }
        }
        if self.seeds.is_empty() {
            v.push("seeds must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            v.push(format!("seeds must be distinct, got {:?}", self.seeds));
        }
        match &self.data {
            DataConfig::Files(files) => {
                if files.len() != self.curriculum.phases {
                    v.push(format!(
                        "data.files lists {} files for {} phases",
                        files.len(),
                        self.curriculum.phases
                    ));
                }
                for f in files.iter().filter(|f| !f.is_file()) {
                    v.push(format!("data file {} does not exist", f.display()));
                }
            }
            DataConfig::Generate {
                grid, obstacle_p, ..
            } => {
                if !(2..=u16::MAX as usize).contains(grid) {
                    v.push(format!("data.grid must be in 2..=65535, got {grid}"));
                }
                if !(0.0..1.0).contains(obstacle_p) {
                    v.push(format!("data.obstacle_p must be in [0, 1), got {obstacle_p}"));
                }
            }
        }
        if self.out_dir.as_os_str().is_empty() {
            v.push("out_dir must not be empty".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}
