//! Run configuration: one TOML document drives every stage.

use std::path::{Path, PathBuf};

use af_horizon_core::cohort::{Split, SplitFractions, FOLLOW_UP_THRESHOLD_DAYS};
use af_horizon_core::ecgsig::SynthConfig;
use af_horizon_core::neuralnet::{NetConfig, TrainConfig};
use af_horizon_core::survival::{CovariateSpec, RiskBins, RiskEncoding, Ties};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into the generator, split, training and bootstrap.
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub label: LabelConfig,
    pub split: SplitConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub survival: SurvivalConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            label: LabelConfig::default(),
            split: SplitConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            survival: SurvivalConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

/// Artifact locations. Relative paths resolve against `out_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub manifest: PathBuf,
    pub waveform_dir: PathBuf,
    pub model: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: "run".into(),
            manifest: "manifest.csv".into(),
            waveform_dir: ".".into(),
            model: "model.afh".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub follow_up_threshold_days: i64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            follow_up_threshold_days: FOLLOW_UP_THRESHOLD_DAYS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let f = SplitFractions::default();
        Self {
            train: f.train,
            validation: f.validation,
            test: f.test,
        }
    }
}

impl SplitConfig {
    pub fn fractions(&self) -> SplitFractions {
        SplitFractions {
            train: self.train,
            validation: self.validation,
            test: self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bootstrap_replicates: usize,
    pub ci_level: f64,
    pub batch_size: usize,
    /// Split used to pick the max-F1 threshold.
    pub threshold_split: Split,
    /// Split on which reported metrics are computed.
    pub report_split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bootstrap_replicates: 1000,
            ci_level: 0.95,
            batch_size: 64,
            threshold_split: Split::Validation,
            report_split: Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskCovariate {
    Groups,
    Raw,
    None,
}

/// One Cox model. `binary = "all"` is spelled as `all_binary = true`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoxModelConfig {
    pub name: String,
    pub risk: RiskCovariate,
    pub age: bool,
    pub sex: bool,
    pub binary: Vec<usize>,
    pub all_binary: bool,
}

impl Default for CoxModelConfig {
    fn default() -> Self {
        Self {
            name: "model".into(),
            risk: RiskCovariate::Groups,
            age: false,
            sex: false,
            binary: Vec::new(),
            all_binary: false,
        }
    }
}

impl CoxModelConfig {
    pub fn spec(&self, bins: &RiskBins, n_covariates: usize) -> CovariateSpec {
        CovariateSpec {
            risk: match self.risk {
                RiskCovariate::Groups => RiskEncoding::Groups(bins.clone()),
                RiskCovariate::Raw => RiskEncoding::Raw,
                RiskCovariate::None => RiskEncoding::None,
            },
            age: self.age,
            sex: self.sex,
            binary: if self.all_binary {
                (0..n_covariates).collect()
            } else {
                self.binary.clone()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalConfig {
    pub split: Split,
    pub risk_bin_edges: Vec<f64>,
    pub ties: Ties,
    pub at_risk_interval_weeks: f64,
    pub horizon_weeks: f64,
    pub models: Vec<CoxModelConfig>,
}

impl Default for SurvivalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            risk_bin_edges: RiskBins::default().edges,
            ties: Ties::Efron,
            at_risk_interval_weeks: 50.0,
            horizon_weeks: 400.0,
            models: vec![
                CoxModelConfig {
                    name: "unadjusted".into(),
                    ..CoxModelConfig::default()
                },
                CoxModelConfig {
                    name: "age_sex_adjusted".into(),
                    age: true,
                    sex: true,
                    ..CoxModelConfig::default()
                },
            ],
        }
    }
}

impl SurvivalConfig {
    pub fn bins(&self) -> RiskBins {
        RiskBins {
            edges: self.risk_bin_edges.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Svg,
    All,
}

impl Format {
    pub fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::All)
    }
    pub fn json(self) -> bool {
        matches!(self, Format::Json | Format::All)
    }
    pub fn svg(self) -> bool {
        matches!(self, Format::Svg | Format::All)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Optional renderings (curve tables, plots) to emit. Stage hand-off
    /// files are always written.
    pub format: Format,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            format: Format::All,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| CliError::MissingArtifact(path.to_path_buf()))?;
        Self::from_toml(&text)
    }

    /// Copies the master seed into the per-module configurations.
    pub fn resolve(mut self) -> Self {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |e: String| CliError::Validation(e);
        self.synth.validate().map_err(|e| v(e.to_string()))?;
        self.split
            .fractions()
            .validate()
            .map_err(|e| v(e.to_string()))?;
        self.net.validate().map_err(|e| v(e.to_string()))?;
        self.train.validate().map_err(|e| v(e.to_string()))?;
        self.survival
            .bins()
            .validate()
            .map_err(|e| v(e.to_string()))?;
        if self.label.follow_up_threshold_days < 0 {
            return Err(v("follow_up_threshold_days must be non-negative".into()));
        }
        if !(self.eval.ci_level > 0.0 && self.eval.ci_level < 1.0)
            || self.eval.bootstrap_replicates == 0
        {
            return Err(v(
                "eval needs 0 < ci_level < 1 and bootstrap_replicates > 0".into(),
            ));
        }
        if self.eval.batch_size == 0 {
            return Err(v("eval.batch_size must be positive".into()));
        }
        if !(self.survival.at_risk_interval_weeks > 0.0) || !(self.survival.horizon_weeks > 0.0) {
            return Err(v("at-risk interval and horizon must be positive".into()));
        }
        for m in &self.survival.models {
            if let Some(&i) = m.binary.iter().find(|&&i| i >= self.synth.n_covariates) {
                return Err(v(format!(
                    "model `{}` uses covariate {i} of {}",
                    m.name, self.synth.n_covariates
                )));
            }
        }
        let splits = [
            self.eval.threshold_split,
            self.eval.report_split,
            self.survival.split,
        ];
        if splits
            .iter()
            .any(|s| matches!(s, Split::Unassigned | Split::Excluded))
        {
            return Err(v(
                "evaluation and survival splits must be Train, Validation or Test".into(),
            ));
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON of the
    /// resolved configuration, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn out(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.paths.out_dir.join(rel)
    }
}
