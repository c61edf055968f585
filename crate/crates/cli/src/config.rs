//! Pipeline configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shapeflow::interpolant::{DriftNetConfig, NoiseModel, SigmaSchedule, TrainingConfig};
use shapeflow::mesh::{Patch, Vec3};
use shapeflow::registration::RegistrationConfig;
use shapeflow::transport::{ElasticExtensionConfig, SmoothingConfig};
use shapeflow::uq::BLOOD_VISCOSITY;

use crate::CliError;

/// Output root override.
pub const ENV_OUTPUT: &str = "SHAPEFLOW_OUTPUT";
/// Worker thread count override.
pub const ENV_THREADS: &str = "SHAPEFLOW_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Hex template hierarchy ("hexhierarchy-v1"). Its finest boundary is
    /// the surface template.
    pub template: PathBuf,
    /// Directory of `<name>.obj` target surfaces, each with a
    /// `<name>.centerline.json` condition.
    pub shapes: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { template: "template.json".into(), shapes: "shapes".into(), output: "out".into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Checkpoint {
    Train,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    /// Perturbed conditions per base condition and radius factor.
    pub n_perturbations: usize,
    /// SDE trajectories averaged into each generated geometry.
    pub n_samples: usize,
    pub time_steps: usize,
    pub alpha_r: Vec<f64>,
    pub gauss_amplitude: f64,
    pub gauss_length_scale: f64,
    pub noise: NoiseModel,
    /// Directory of base `*.centerline.json` conditions; the shapes
    /// directory when unset.
    pub conditions: Option<PathBuf>,
    pub checkpoint: Checkpoint,
    /// Sampling schedule; the training schedule when unset.
    pub schedule: Option<SigmaSchedule>,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            n_perturbations: 10,
            n_samples: 32,
            time_steps: 50,
            alpha_r: vec![0.7, 1.0, 1.3],
            gauss_amplitude: 0.0,
            gauss_length_scale: 1.0,
            noise: NoiseModel::Independent,
            conditions: None,
            checkpoint: Checkpoint::Train,
            schedule: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSection {
    pub elastic: ElasticExtensionConfig,
    pub smoothing: SmoothingConfig,
    /// Run aspect-ratio smoothing on every level after extension.
    pub smooth: bool,
}

impl Default for TransportSection {
    fn default() -> Self {
        TransportSection { elastic: ElasticExtensionConfig::default(), smoothing: SmoothingConfig::default(), smooth: true }
    }
}

/// A named cutting plane for section biomarkers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSection {
    pub name: String,
    pub point: Vec3,
    pub normal: Vec3,
    #[serde(default = "default_polar_grid")]
    pub polar_grid: (usize, usize),
}

fn default_polar_grid() -> (usize, usize) {
    (32, 64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Directory holding `quality.csv` and per-geometry folders; the extend
    /// output when unset.
    pub input: Option<PathBuf>,
    /// Coefficient of the wall shear stress. Defaults to the dynamic viscosity
    /// of blood in Pa·s.
    pub viscosity: f64,
    pub wall_patches: Vec<Patch>,
    pub sections: Vec<NamedSection>,
    /// Section names for the pressure drop `p̄(descending) − p̄(inlet)`.
    pub inlet: Option<String>,
    pub descending: Option<String>,
    /// Another analysis output to compare against with W₁.
    pub reference: Option<PathBuf>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            input: None,
            viscosity: BLOOD_VISCOSITY,
            wall_patches: vec![Patch::Wall],
            sections: Vec::new(),
            inlet: None,
            descending: None,
            reference: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; it replaces the seeds of the stage sections.
    pub seed: u64,
    /// Worker threads; all cores when unset.
    pub threads: Option<usize>,
    pub paths: Paths,
    pub registration: RegistrationConfig,
    pub drift: DriftNetConfig,
    pub training: TrainingConfig,
    pub sampling: SamplingSection,
    pub transport: TransportSection,
    pub analysis: AnalysisSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            threads: None,
            paths: Paths::default(),
            registration: RegistrationConfig::default(),
            drift: DriftNetConfig::default(),
            training: TrainingConfig::default(),
            sampling: SamplingSection::default(),
            transport: TransportSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

/// A parsed configuration with paths resolved against the file's directory.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    /// SHA-256 of the configuration as written (before path resolution).
    pub hash: String,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn dump(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads, hashes and resolves a configuration file, then applies the
    /// environment overrides.
    pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let hash = config.hash();
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut config.paths.template);
        resolve(base, &mut config.paths.shapes);
        resolve(base, &mut config.paths.output);
        for p in [&mut config.sampling.conditions, &mut config.analysis.input, &mut config.analysis.reference].into_iter().flatten() {
            resolve(base, p);
        }
        if let Ok(out) = std::env::var(ENV_OUTPUT) {
            config.paths.output = out.into();
        }
        if let Ok(t) = std::env::var(ENV_THREADS) {
            let n = t.parse().map_err(|_| CliError::Config(format!("{ENV_THREADS}={t} is not a thread count")))?;
            config.threads = Some(n);
        }
        config.apply_seed();
        Ok(LoadedConfig { config, hash })
    }

    /// Hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("configuration serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn apply_seed(&mut self) {
        self.registration.seed = self.seed;
        self.drift.seed = self.seed;
        self.training.seed = self.seed;
    }

    /// Schema and value checks shared by every subcommand.
    pub fn validate(&self) -> Result<(), CliError> {
        let err = |e: shapeflow::Error| CliError::Config(e.to_string());
        self.registration.validate().map_err(err)?;
        self.drift.validate().map_err(err)?;
        self.training.validate().map_err(err)?;
        self.transport.elastic.validate().map_err(err)?;
        self.transport.smoothing.validate().map_err(err)?;
        if let Some(s) = &self.sampling.schedule {
            s.validate().map_err(err)?;
        }
        let s = &self.sampling;
        if s.n_perturbations == 0 || s.n_samples == 0 || s.time_steps == 0 {
            return Err(CliError::Config("sampling needs n_perturbations, n_samples and time_steps >= 1".into()));
        }
        if s.alpha_r.is_empty() || s.alpha_r.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(CliError::Config("alpha_r must be a nonempty list of positive factors".into()));
        }
        if !(s.gauss_amplitude >= 0.0 && s.gauss_length_scale > 0.0) {
            return Err(CliError::Config("Gaussian field needs amplitude >= 0 and length scale > 0".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("thread count must be positive".into()));
        }
        if !(self.analysis.viscosity >= 0.0) {
            return Err(CliError::Config("viscosity must be non-negative".into()));
        }
        Ok(())
    }

    pub fn require_template(&self) -> Result<(), CliError> {
        require(&self.paths.template, "template")
    }

    pub fn require_shapes(&self) -> Result<(), CliError> {
        require(&self.paths.shapes, "shapes directory")
    }

    pub fn sampling_schedule(&self) -> SigmaSchedule {
        self.sampling.schedule.unwrap_or(self.training.schedule)
    }
}

fn require(p: &Path, what: &str) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", p.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&c.dump()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("sed = 3").is_err());
        assert!(PipelineConfig::from_toml("[training]\nepoch = 3").is_err());
        let c = PipelineConfig::from_toml("seed = 5\n[sampling]\nalpha_r = [0.7]\n").unwrap();
        assert_eq!((c.seed, c.sampling.alpha_r.clone()), (5, vec![0.7]));
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut c = PipelineConfig::default();
        c.sampling.alpha_r = vec![-1.0];
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.training.decay = 1.5;
        assert!(c.validate().is_err());
    }
}
