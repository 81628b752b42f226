//! Run configuration: one TOML file names the inputs, the calibration
//! weights, the Monte Carlo sizes and the collateral terms. File paths
//! are resolved relative to the configuration file, and the seed is
//! mandatory so reruns are reproducible by construction.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::calibration::{CalibrationOptions, CalibrationWeights, Measure, PWeight};
use crate::error::{Error, Result};
use crate::matfun::SquareMatrix;
use crate::optim::LmOptions;
use crate::rating::RatingScale;
use crate::xva::{CollateralRegime, PortfolioModel, XvaConfig};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub inputs: InputsSection,
    pub output: OutputSection,
    pub calibration: CalibrationSection,
    pub simulation: SimulationSection,
    pub portfolio: PortfolioSection,
    pub xva: XvaSection,
    pub thresholds: ThresholdsSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsSection {
    pub labels: Vec<String>,
    pub matrix_files: Vec<PathBuf>,
    pub pd_file: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    /// "unit" for equal weights on the generator penalty, "infinite" to
    /// pin the historical generator and fit the default curve alone.
    pub p_weight: String,
    pub q_weight: f64,
    pub max_iterations: usize,
    /// Optional breakpoints; validated against the PD tenors when given.
    #[serde(default)]
    pub breakpoints: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub n_paths: usize,
    pub seed: u64,
    pub measure: String,
    pub initial_rating: String,
    #[serde(default)]
    pub dump_paths: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioSection {
    pub initial_value: f64,
    pub n_flows: usize,
    pub vol_scale: f64,
    pub maturity: f64,
    pub postings_per_year: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XvaSection {
    pub lgd_bank: f64,
    pub lgd_cpty: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub bank_initial: String,
    pub cpty_initial: String,
    pub regimes: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdsSection {
    pub bank: Vec<f64>,
    pub cpty: Vec<f64>,
}

impl RunConfig {
    /// Load and validate a configuration file; relative input paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(display.clone(), e))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::parse(&display, e.to_string()))?;

        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for file in &mut config.inputs.matrix_files {
            *file = resolve(base, file);
        }
        config.inputs.pd_file = resolve(base, &config.inputs.pd_file);

        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        for file in &self.inputs.matrix_files {
            if !file.exists() {
                return Err(Error::Config(format!(
                    "matrix file does not exist: {}",
                    file.display()
                )));
            }
        }
        if !self.inputs.pd_file.exists() {
            return Err(Error::Config(format!(
                "pd file does not exist: {}",
                self.inputs.pd_file.display()
            )));
        }
        let k = self.inputs.labels.len();
        if self.thresholds.bank.len() != k || self.thresholds.cpty.len() != k {
            return Err(Error::Config(format!(
                "threshold vectors must have {k} entries (one per rating)"
            )));
        }
        self.scale()?;
        self.measure()?;
        self.regimes()?;
        let scale = self.scale()?;
        self.rating_index(&self.simulation.initial_rating, &scale)?;
        self.rating_index(&self.xva.bank_initial, &scale)?;
        self.rating_index(&self.xva.cpty_initial, &scale)?;
        self.weights(k)?;
        Ok(())
    }

    pub fn scale(&self) -> Result<RatingScale> {
        RatingScale::new(self.inputs.labels.clone())
    }

    pub fn measure(&self) -> Result<Measure> {
        self.simulation.measure.parse()
    }

    pub fn regimes(&self) -> Result<Vec<CollateralRegime>> {
        self.xva.regimes.iter().map(|r| r.parse()).collect()
    }

    fn rating_index(&self, label: &str, scale: &RatingScale) -> Result<usize> {
        scale
            .index_of(label)
            .ok_or_else(|| Error::Config(format!("unknown rating label '{label}'")))
    }

    pub fn weights(&self, dim: usize) -> Result<CalibrationWeights> {
        let p_weight = match self.calibration.p_weight.as_str() {
            "unit" => PWeight::Matrix(SquareMatrix::from_element(dim, dim, 1.0)),
            "infinite" => PWeight::Infinite,
            other => {
                return Err(Error::Config(format!(
                    "p_weight must be 'unit' or 'infinite', got '{other}'"
                )))
            }
        };
        if !(self.calibration.q_weight.is_finite() && self.calibration.q_weight >= 0.0) {
            return Err(Error::Config("q_weight must be finite and non-negative".into()));
        }
        Ok(CalibrationWeights {
            p_weight,
            q_weight: nalgebra::DVector::from_element(dim, self.calibration.q_weight),
        })
    }

    pub fn calibration_options(&self) -> CalibrationOptions {
        let mut options = CalibrationOptions::default();
        options.lm = LmOptions {
            max_iterations: self.calibration.max_iterations,
            ..options.lm
        };
        options
    }

    pub fn portfolio_model(&self) -> PortfolioModel {
        PortfolioModel {
            initial_value: self.portfolio.initial_value,
            n_flows: self.portfolio.n_flows,
            vol_scale: self.portfolio.vol_scale,
            maturity: self.portfolio.maturity,
            postings_per_year: self.portfolio.postings_per_year,
        }
    }

    pub fn xva_config(&self) -> Result<XvaConfig> {
        let scale = self.scale()?;
        Ok(XvaConfig {
            lgd_bank: self.xva.lgd_bank,
            lgd_cpty: self.xva.lgd_cpty,
            n_paths: self.xva.n_paths,
            seed: self.xva.seed,
            bank_initial: self.rating_index(&self.xva.bank_initial, &scale)?,
            cpty_initial: self.rating_index(&self.xva.cpty_initial, &scale)?,
        })
    }

    pub fn simulation_initial_index(&self) -> Result<usize> {
        let scale = self.scale()?;
        self.rating_index(&self.simulation.initial_rating, &scale)
    }
}

fn resolve(base: &Path, file: &Path) -> PathBuf {
    if file.is_absolute() {
        file.to_path_buf()
    } else {
        base.join(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_config() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join("fitch_run.toml")
    }

    #[test]
    fn loads_reference_config() {
        let config = RunConfig::load(&fixture_config()).unwrap();
        assert_eq!(config.inputs.labels.len(), 7);
        assert_eq!(config.inputs.matrix_files.len(), 4);
        assert!(config.inputs.pd_file.exists());
        assert_eq!(config.simulation.seed, 42);
        assert_eq!(config.regimes().unwrap().len(), 3);
        let xva = config.xva_config().unwrap();
        assert_eq!(xva.bank_initial, 0);
        assert_eq!(xva.cpty_initial, 3);
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.toml");
        let text = std::fs::read_to_string(fixture_config()).unwrap();
        std::fs::write(&path, text.replace("fitch_1m.csv", "missing.csv")).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("missing.csv"), "{err}");
    }
}
