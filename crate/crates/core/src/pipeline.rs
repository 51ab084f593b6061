//! End-to-end settings shared by the CLI and the Monte Carlo engine.

use serde::{Deserialize, Serialize};

use crate::crossfit::{cross_fit, NuisanceConfig, NuisanceFits};
use crate::data::{make_folds, make_stratified_folds, Dataset};
use crate::error::{Error, Result};
use crate::gate::BandwidthConfig;
use crate::kernel::KernelSpec;
use crate::rng;
use crate::score::ScoreVariant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub folds: usize,
    pub stratify: bool,
    pub trim_c: f64,
    pub learners: NuisanceConfig,
    pub kernel_order: u32,
    pub bandwidth: BandwidthConfig,
    pub level: f64,
    pub score: ScoreVariant,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            folds: 2,
            stratify: true,
            trim_c: 0.01,
            learners: NuisanceConfig::default(),
            kernel_order: 2,
            bandwidth: BandwidthConfig::default(),
            level: 0.95,
            score: ScoreVariant::Aipw,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Validation(format!("folds must be at least 2, got {}", self.folds)));
        }
        if !(self.trim_c > 0.0 && self.trim_c < 0.5) {
            return Err(Error::Validation(format!("trim_c must lie in (0, 0.5), got {}", self.trim_c)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Validation(format!("level must lie in (0, 1), got {}", self.level)));
        }
        self.kernel()?;
        self.bandwidth.validate()?;
        self.learners.validate()
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        KernelSpec::new(self.kernel_order)
    }

    /// Builds the fold plan and cross-fits the nuisances.
    pub fn fit_nuisances(&self, ds: &Dataset, seed: u64) -> Result<NuisanceFits> {
        self.fit_nuisances_with(ds, &self.learners, seed)
    }

    pub fn fit_nuisances_with(&self, ds: &Dataset, learners: &NuisanceConfig, seed: u64) -> Result<NuisanceFits> {
        let fold_seed = rng::derive_seed(seed, &[rng::tag::FOLDS]);
        let plan = if self.stratify {
            make_stratified_folds(&ds.d, self.folds, fold_seed)?
        } else {
            make_folds(ds.n(), self.folds, fold_seed)?
        };
        cross_fit(ds, &plan, learners, self.trim_c, seed)
    }
}
