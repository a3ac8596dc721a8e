//! TOML run configurations, one per subcommand. Unknown keys are rejected
//! and relative paths resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linkage_bayes::LinkageConfig;
use crate::linkage_fs::FsConfig;
use crate::sae_bayes::SaePrior;
use crate::sae_core::FitOptions;
use crate::sae_linked::VarianceForm;
use crate::simharness::{PopulationSpec, SimulationConfig};

/// A record file and its schema sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileInput {
    pub data: PathBuf,
    pub schema: PathBuf,
}

/// Two files plus a link list between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkedFiles {
    pub file1: FileInput,
    pub file2: FileInput,
    pub links: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkFsConfig {
    pub file1: FileInput,
    pub file2: FileInput,
    /// Optional true links, for error rates.
    #[serde(default)]
    pub truth: Option<PathBuf>,
    pub fs: FsConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkBayesConfig {
    pub file1: FileInput,
    pub file2: FileInput,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    pub linkage: LinkageConfig,
    /// Prior weights on the number of links `t = 0..=min(N1, N2)`; uniform
    /// when absent.
    #[serde(default)]
    pub t_prior: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeFitConfig {
    /// `domain, y, x...` unit table.
    #[serde(default)]
    pub units: Option<PathBuf>,
    /// Alternatively, response and covariates joined through links.
    #[serde(default)]
    pub linked: Option<LinkedFiles>,
    /// `domain, N_d, X̄...` without the intercept column.
    pub population: PathBuf,
    #[serde(default)]
    pub domain_prefix: String,
    /// Prepend an intercept to unit tables (linked input always has one).
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub adjusted: bool,
    #[serde(default)]
    pub lambda_file: Option<PathBuf>,
    #[serde(default)]
    pub audit_file: Option<PathBuf>,
    #[serde(default)]
    pub variance_form: VarianceForm,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Strategy {
    #[serde(rename = "feedback")]
    #[value(name = "feedback")]
    Feedback,
    #[serde(rename = "nonfeedback")]
    #[value(name = "nonfeedback")]
    Nonfeedback,
    #[serde(rename = "fixed-C")]
    #[value(name = "fixed-C")]
    FixedC,
}

fn default_inner() -> usize {
    100
}
fn default_burn() -> usize {
    1000
}
fn default_draws() -> usize {
    5000
}
fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeBayesConfig {
    #[serde(default)]
    pub strategy: Option<Strategy>,
    /// fixed-C input: a unit table ...
    #[serde(default)]
    pub units: Option<PathBuf>,
    /// ... or files joined by a given link list.
    #[serde(default)]
    pub linked: Option<LinkedFiles>,
    /// Linkage strategies: file 1 carries the response, file 2 the covariates.
    #[serde(default)]
    pub file1: Option<FileInput>,
    #[serde(default)]
    pub file2: Option<FileInput>,
    pub population: PathBuf,
    #[serde(default)]
    pub domain_prefix: String,
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default)]
    pub prior: SaePrior,
    #[serde(default)]
    pub linkage: Option<LinkageConfig>,
    #[serde(default = "default_inner")]
    pub inner_len: usize,
    #[serde(default = "default_burn")]
    pub n_burn: usize,
    #[serde(default = "default_draws")]
    pub n_draws: usize,
    #[serde(default = "one")]
    pub feedback_weight: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    #[serde(default)]
    pub population: PopulationSpec,
    /// Also draw a sample of this size from the perturbed file.
    #[serde(default)]
    pub sample_size: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Parsed config plus its source text and directory.
pub struct Loaded<T> {
    pub config: T,
    pub text: String,
}

pub fn load<T: DeserializeOwned + ResolvePaths>(path: &Path) -> Result<Loaded<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut config: T = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    config.resolve(&base);
    config.check_inputs()?;
    Ok(Loaded { config, text })
}

pub trait ResolvePaths {
    fn resolve(&mut self, base: &Path);
    fn inputs(&self) -> Vec<&Path>;

    fn check_inputs(&self) -> Result<()> {
        for p in self.inputs() {
            if !p.is_file() {
                return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found")));
            }
        }
        Ok(())
    }
}

fn fix(p: &mut PathBuf, base: &Path) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl FileInput {
    fn resolve(&mut self, base: &Path) {
        fix(&mut self.data, base);
        fix(&mut self.schema, base);
    }

    fn inputs(&self) -> [&Path; 2] {
        [&self.data, &self.schema]
    }
}

impl LinkedFiles {
    fn resolve(&mut self, base: &Path) {
        self.file1.resolve(base);
        self.file2.resolve(base);
        fix(&mut self.links, base);
    }

    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = self.file1.inputs().into();
        v.extend(self.file2.inputs());
        v.push(&self.links);
        v
    }
}

fn fix_opt(p: &mut Option<PathBuf>, base: &Path) {
    if let Some(p) = p {
        fix(p, base);
    }
}

impl ResolvePaths for LinkFsConfig {
    fn resolve(&mut self, base: &Path) {
        self.file1.resolve(base);
        self.file2.resolve(base);
        fix_opt(&mut self.truth, base);
        fix_opt(&mut self.output_dir, base);
    }

    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = self.file1.inputs().into();
        v.extend(self.file2.inputs());
        v.extend(self.truth.as_deref());
        v
    }
}

impl ResolvePaths for LinkBayesConfig {
    fn resolve(&mut self, base: &Path) {
        self.file1.resolve(base);
        self.file2.resolve(base);
        fix_opt(&mut self.truth, base);
        fix_opt(&mut self.output_dir, base);
    }

    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = self.file1.inputs().into();
        v.extend(self.file2.inputs());
        v.extend(self.truth.as_deref());
        v
    }
}

impl ResolvePaths for SaeFitConfig {
    fn resolve(&mut self, base: &Path) {
        fix_opt(&mut self.units, base);
        if let Some(l) = &mut self.linked {
            l.resolve(base);
        }
        fix(&mut self.population, base);
        fix_opt(&mut self.lambda_file, base);
        fix_opt(&mut self.audit_file, base);
        fix_opt(&mut self.output_dir, base);
    }

    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = vec![&self.population];
        v.extend(self.units.as_deref());
        if let Some(l) = &self.linked {
            v.extend(l.inputs());
        }
        v.extend(self.lambda_file.as_deref());
        v.extend(self.audit_file.as_deref());
        v
    }
}

impl ResolvePaths for SaeBayesConfig {
    fn resolve(&mut self, base: &Path) {
        fix_opt(&mut self.units, base);
        if let Some(l) = &mut self.linked {
            l.resolve(base);
        }
        for f in [&mut self.file1, &mut self.file2].into_iter().flatten() {
            f.resolve(base);
        }
        fix(&mut self.population, base);
        fix_opt(&mut self.output_dir, base);
    }

    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = vec![&self.population];
        v.extend(self.units.as_deref());
        if let Some(l) = &self.linked {
            v.extend(l.inputs());
        }
        for f in [&self.file1, &self.file2].into_iter().flatten() {
            v.extend(f.inputs());
        }
        v
    }
}

impl ResolvePaths for SimulateConfig {
    fn resolve(&mut self, base: &Path) {
        fix_opt(&mut self.output_dir, base);
    }

    fn inputs(&self) -> Vec<&Path> {
        Vec::new()
    }
}

impl ResolvePaths for GenerateConfig {
    fn resolve(&mut self, base: &Path) {
        fix_opt(&mut self.output_dir, base);
    }

    fn inputs(&self) -> Vec<&Path> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_errors() {
        let r: std::result::Result<SimulateConfig, _> = toml::from_str(
            "seed = 1\n[simulation]\nreplications = 2\nn_sample = 10\nn_samples = 3\n",
        );
        assert!(r.is_err());
        let r: std::result::Result<SaeBayesConfig, _> =
            toml::from_str("population = \"p.csv\"\n[prior]\na_e = 0.1\nb_ee = 0.1\n");
        assert!(r.is_err());
    }

    #[test]
    fn strategy_names() {
        let c: SaeBayesConfig = toml::from_str("population = \"p.csv\"\nstrategy = \"fixed-C\"\n").unwrap();
        assert_eq!(c.strategy, Some(Strategy::FixedC));
    }

    #[test]
    fn relative_paths_follow_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(&cfg, "population = \"pop.csv\"\nunits = \"u.csv\"\n").unwrap();
        let err = load::<SaeFitConfig>(&cfg).err().unwrap().to_string();
        assert!(err.contains(&dir.path().join("pop.csv").display().to_string()), "{err}");
    }
}
