//! Run configuration: one TOML file holding every training hyperparameter.
//!
//! Blocks left out, and keys left out of a block, take stage defaults. The
//! stage is decided by the architecture's dimensionality, so a slice network
//! defaults to `N = 10` and targets `(0.7, 0.1, 0.1, 0.1)`, a patch network
//! to `N = 5` and `(0.4, 0.2, 0.2, 0.2)`.
//!
//! ```toml
//! architecture = "3d_standard"
//! seed = 7
//!
//! [optimizer]
//! iterations = 300
//!
//! [ensemble]
//! thresholds = { tumor = 0.4, core = 0.3, enhancing = 0.4 }
//! comparison = "inclusive"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::ArchitectureSpec;
use crate::error::{Error, Result};
use crate::loss::{LossCoefficients, TargetWeights};
use crate::optim::OptimizerConfig;
use crate::vote::{Comparison, Thresholds};

/// Loss block. `c_main` and `c_k` only matter for networks with subnetworks;
/// when `c_k` is absent the remaining `1 - c_main` is split evenly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub targets: TargetWeights,
    pub c_main: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_k: Option<Vec<f64>>,
}

impl LossConfig {
    pub fn planar() -> Self {
        LossConfig {
            targets: TargetWeights::planar_default(),
            c_main: 0.75,
            c_k: None,
        }
    }

    pub fn volumetric() -> Self {
        LossConfig {
            targets: TargetWeights::volumetric_default(),
            c_main: 0.75,
            c_k: None,
        }
    }

    /// Mixing weights for `subnetworks` auxiliary heads.
    pub fn coefficients(&self, subnetworks: usize) -> Result<LossCoefficients> {
        let c = LossCoefficients {
            c_main: self.c_main,
            c_k: match &self.c_k {
                Some(c) => c.clone(),
                None => vec![(1.0 - self.c_main) / subnetworks.max(1) as f64; subnetworks],
            },
        };
        if c.c_k.len() != subnetworks {
            return Err(Error::Config(format!(
                "loss.c_k has {} entries, the network has {subnetworks} subnetworks",
                c.c_k.len()
            )));
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub thresholds: Thresholds,
    pub comparison: Comparison,
}

/// Data handling block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// 3D training patch extents.
    pub patch: [usize; 3],
    /// Multiplier applied after dividing by the non-zero median.
    pub normalization_constant: f64,
    /// Slices per 2D training batch.
    pub slice_batch: usize,
    /// Patches per 3D training batch.
    pub patch_batch: usize,
    /// Draw patch origins so that half of them center on tumor voxels.
    pub class_balanced: bool,
    /// Fraction of training patients held out for monitoring, in `[0, 1)`.
    pub monitor_fraction: f64,
    /// Iterations between monitoring evaluations; 0 disables monitoring.
    pub monitor_every: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            patch: [24, 24, 24],
            normalization_constant: 1.0,
            slice_batch: 4,
            patch_batch: 1,
            class_balanced: false,
            monitor_fraction: 0.2,
            monitor_every: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch.contains(&0) {
            return Err(Error::Config(format!(
                "pipeline.patch {:?} has a zero extent",
                self.patch
            )));
        }
        if !(self.normalization_constant > 0.0 && self.normalization_constant.is_finite()) {
            return Err(Error::Config(format!(
                "pipeline.normalization_constant {} must be positive",
                self.normalization_constant
            )));
        }
        if self.slice_batch == 0 || self.patch_batch == 0 {
            return Err(Error::Config("pipeline batch sizes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.monitor_fraction) {
            return Err(Error::Config(format!(
                "pipeline.monitor_fraction {} outside [0, 1)",
                self.monitor_fraction
            )));
        }
        Ok(())
    }
}

/// A fully resolved run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Builtin architecture name or path to an architecture file.
    pub architecture: String,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub ensemble: EnsembleConfig,
    pub pipeline: PipelineConfig,
    /// Directory relative architecture paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults for a network of the given dimensionality.
    pub fn defaults(architecture: impl Into<String>, dims: usize) -> Self {
        let (optimizer, loss) = if dims == 2 {
            (OptimizerConfig::planar(), LossConfig::planar())
        } else {
            (OptimizerConfig::volumetric(), LossConfig::volumetric())
        };
        RunConfig {
            architecture: architecture.into(),
            seed: 0,
            optimizer,
            loss,
            ensemble: EnsembleConfig::default(),
            pipeline: PipelineConfig::default(),
            base_dir: None,
        }
    }

    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let architecture = user
            .get("architecture")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Config("missing string key `architecture`".into()))?
            .to_owned();
        let spec = resolve_architecture(&architecture, base_dir)?;
        let defaults = Self::defaults(architecture, spec.dims);
        let mut merged = toml::Table::try_from(&defaults).map_err(|e| Error::Serde(e.to_string()))?;
        overlay(&mut merged, user);
        let mut config: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.base_dir = base_dir.map(Path::to_path_buf);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.pipeline.validate()?;
        if !(0.0..=1.0).contains(&self.loss.c_main) {
            return Err(Error::Config(format!(
                "loss.c_main {} outside [0, 1]",
                self.loss.c_main
            )));
        }
        let spec = self.architecture_spec()?;
        if self.loss.targets.classes() != spec.classes {
            return Err(Error::Config(format!(
                "loss.targets has {} entries for {} classes",
                self.loss.targets.classes(),
                spec.classes
            )));
        }
        Ok(())
    }

    pub fn architecture_spec(&self) -> Result<ArchitectureSpec> {
        resolve_architecture(&self.architecture, self.base_dir.as_deref())
    }
}

/// Recursively replace `base` entries with `user` entries; tables merge.
fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Find an architecture by file path (with or without `.toml`), relative to
/// `base_dir` or the working directory, then by builtin name.
pub fn resolve_architecture(reference: &str, base_dir: Option<&Path>) -> Result<ArchitectureSpec> {
    let mut candidates = Vec::new();
    for root in base_dir.into_iter().chain(std::iter::once(Path::new(""))) {
        let p = root.join(reference);
        candidates.push(p.with_extension("toml"));
        candidates.push(p);
    }
    if let Some(path) = candidates.iter().find(|p| p.is_file()) {
        return ArchitectureSpec::load(path);
    }
    let stem = Path::new(reference)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(reference);
    ArchitectureSpec::builtin(stem).map_err(|_| {
        Error::Config(format!(
            "architecture {reference:?} is neither a readable file nor a builtin name"
        ))
    })
}
