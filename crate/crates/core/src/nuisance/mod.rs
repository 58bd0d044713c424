//! Nuisance estimation: conditional mean `mu(w) = E[Y | W = w]`, conditional
//! second moment `nu(w) = E[Y^2 | W = w]` and per-factor marginals, fitted on
//! the training part of a fold, plus integrals over products of the fitted
//! marginals.

pub mod cellmean;
pub mod expansion;
pub mod polyls;

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimand::{BuildingBlock, FactorSet};
use crate::seed;

/// Relative tolerance below which the outcome variance counts as zero.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Balanced, seeded partition of `0..n` into `folds` groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n: usize,
    pub folds: usize,
    pub seed: u64,
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.folds];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

pub fn make_fold_plan(n: usize, folds: usize, seed: u64) -> Result<FoldPlan> {
    if folds < 2 {
        return Err(Error::InvalidConfig(format!(
            "fold count must be at least 2, got {folds}"
        )));
    }
    if n < 2 * folds {
        return Err(Error::TooFewObservations { n, folds });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % folds;
    }
    Ok(FoldPlan {
        n,
        folds,
        seed,
        assignment,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    /// Cell means when every factor is discrete, polynomial least squares otherwise.
    #[default]
    Auto,
    CellMean,
    PolyLs,
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearnerKind::Auto => "auto",
            LearnerKind::CellMean => "cellmean",
            LearnerKind::PolyLs => "polyls",
        })
    }
}

impl std::str::FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "auto" => Ok(LearnerKind::Auto),
            "cellmean" | "cell" => Ok(LearnerKind::CellMean),
            "polyls" | "poly" => Ok(LearnerKind::PolyLs),
            other => Err(Error::InvalidConfig(format!("unknown learner '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub learner: LearnerKind,
    /// Maximum total degree of the polynomial basis.
    pub degree: u32,
    /// Maximum number of distinct factors in one basis term; `None` keeps the
    /// full interaction tensor.
    pub interaction_order: Option<usize>,
    pub ridge: f64,
    pub mc_draws: usize,
    pub mc_seed: u64,
    /// Largest level-product size integrated by exact enumeration.
    pub enumeration_limit: usize,
    pub force_monte_carlo: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            learner: LearnerKind::Auto,
            degree: 3,
            interaction_order: None,
            ridge: 1e-8,
            mc_draws: 2000,
            mc_seed: 0,
            enumeration_limit: 10_000,
            force_monte_carlo: false,
        }
    }
}

impl LearnerConfig {
    pub fn cellmean() -> Self {
        LearnerConfig {
            learner: LearnerKind::CellMean,
            ..Default::default()
        }
    }

    pub fn polyls(degree: u32) -> Self {
        LearnerConfig {
            learner: LearnerKind::PolyLs,
            degree,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc_draws < 100 {
            return Err(Error::InvalidConfig(format!(
                "mc_draws must be at least 100, got {}",
                self.mc_draws
            )));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "ridge must be finite and non-negative, got {}",
                self.ridge
            )));
        }
        if self.interaction_order == Some(0) && self.degree > 0 {
            return Err(Error::InvalidConfig(
                "interaction_order must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Concrete learner for a training set of `train_size` rows. Auto picks
    /// cell means when every factor is discrete and the level grid averages
    /// at least `AUTO_ROWS_PER_CELL` training rows per cell; sparse discrete
    /// grids fall back to a pairwise polynomial, continuous data to the full one.
    fn resolve(&self, data: &Dataset, train_size: usize) -> LearnerConfig {
        if self.learner != LearnerKind::Auto {
            return self.clone();
        }
        let cells = data.factors().iter().try_fold(1usize, |acc, f| {
            f.kind.num_levels().and_then(|l| acc.checked_mul(l))
        });
        match cells {
            Some(c) if c.saturating_mul(AUTO_ROWS_PER_CELL) <= train_size => LearnerConfig {
                learner: LearnerKind::CellMean,
                ..self.clone()
            },
            Some(_) => LearnerConfig {
                learner: LearnerKind::PolyLs,
                interaction_order: self.interaction_order.or(Some(2)),
                ..self.clone()
            },
            None => LearnerConfig {
                learner: LearnerKind::PolyLs,
                ..self.clone()
            },
        }
    }
}

const AUTO_ROWS_PER_CELL: usize = 5;

/// How integrals over the fitted product measure are evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum IntegrationMode {
    ExactEnumeration,
    MonteCarlo {
        draws: usize,
        seed: u64,
    },
    /// Closed-form moments of a basis expansion.
    ExactMoments,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarginalEstimate {
    Discrete {
        factor: usize,
        probs: Vec<f64>,
    },
    Continuous {
        factor: usize,
        values: Vec<f64>,
    },
    /// A known distribution, e.g. for injected true nuisances.
    Analytic {
        factor: usize,
        distribution: String,
    },
}

impl MarginalEstimate {
    pub fn factor(&self) -> usize {
        match self {
            MarginalEstimate::Discrete { factor, .. }
            | MarginalEstimate::Continuous { factor, .. }
            | MarginalEstimate::Analytic { factor, .. } => *factor,
        }
    }
}

/// Fitted regression surfaces together with the product of fitted marginals.
pub trait NuisanceModel: Send + Sync + fmt::Debug {
    fn num_factors(&self) -> usize;
    fn mu(&self, w: &[f64]) -> f64;
    fn nu(&self, w: &[f64]) -> f64;
    /// `E[Y]` under the product measure.
    fn mean_y(&self) -> f64;
    /// `E[Y^2]` under the product measure.
    fn second_moment_y(&self) -> f64;
    /// `E[(Y - E[Y])^2 | W_k = w_k]`.
    fn centered_square_given(&self, k: usize, w_k: f64) -> f64;
    fn block(&self, excluded: FactorSet) -> Box<dyn BlockModel + '_>;
    /// False when `mu` falls back to a default at `w` (e.g. an empty cell).
    fn in_support(&self, _w: &[f64]) -> bool {
        true
    }
}

/// Integrals tied to one excluded set `S`, with `m(w) = E[mu(W) | W_{-S} = w_{-S}]`.
pub trait BlockModel: Send + Sync {
    fn excluded(&self) -> FactorSet;
    fn conditional_mean(&self, w: &[f64]) -> f64;
    /// `E[m(W)^2]`.
    fn numerator(&self) -> f64;
    /// Monte Carlo standard error of [`BlockModel::numerator`], if any.
    fn numerator_std_error(&self) -> Option<f64> {
        None
    }
    /// `E[mu(W) m(W) | W_k = w_k]`.
    fn mu_times_excluded_given(&self, k: usize, w_k: f64) -> f64;
    /// `E[m(W)^2 | W_k = w_k]`.
    fn excluded_squared_given(&self, k: usize, w_k: f64) -> f64;
}

#[derive(Clone, Debug)]
pub struct NuisanceFit {
    /// Fold whose observations were held out, `None` for injected models.
    pub fold: Option<usize>,
    pub learner_tag: String,
    pub integration: IntegrationMode,
    pub marginals: Vec<MarginalEstimate>,
    pub diagnostics: Vec<String>,
    model: Arc<dyn NuisanceModel>,
}

impl NuisanceFit {
    /// Wrap an externally supplied model (such as known true nuisances).
    pub fn from_model(
        model: Arc<dyn NuisanceModel>,
        learner_tag: impl Into<String>,
        integration: IntegrationMode,
        marginals: Vec<MarginalEstimate>,
    ) -> Self {
        NuisanceFit {
            fold: None,
            learner_tag: learner_tag.into(),
            integration,
            marginals,
            diagnostics: Vec::new(),
            model,
        }
    }

    pub fn with_fold(mut self, fold: usize) -> Self {
        self.fold = Some(fold);
        self
    }

    pub fn model(&self) -> &dyn NuisanceModel {
        self.model.as_ref()
    }

    pub fn num_factors(&self) -> usize {
        self.model.num_factors()
    }

    pub fn mu(&self, w: &[f64]) -> f64 {
        self.model.mu(w)
    }

    pub fn nu(&self, w: &[f64]) -> f64 {
        self.model.nu(w)
    }

    pub fn mean_y(&self) -> f64 {
        self.model.mean_y()
    }

    /// `Var(Y)` under the fitted product measure.
    pub fn var_y(&self) -> Result<f64> {
        let second = self.model.second_moment_y();
        let mean = self.model.mean_y();
        let raw = second - mean * mean;
        if !raw.is_finite() {
            return Err(Error::Numerical(format!(
                "outcome variance is not finite ({raw})"
            )));
        }
        let floor = VARIANCE_FLOOR * second.abs().max(1.0);
        if raw < -floor {
            // separately fitted surfaces can violate nu >= mu^2
            log::warn!("fitted outcome variance {raw} is negative; clamped to {floor}");
            return Ok(floor);
        }
        if raw <= floor {
            return Err(Error::DegenerateVariance { value: raw });
        }
        Ok(raw)
    }

    pub fn block(&self, excluded: FactorSet) -> Box<dyn BlockModel + '_> {
        self.model.block(excluded)
    }
}

/// Fit `mu`, `nu` and marginals on every observation outside `fold`.
pub fn fit_nuisances(
    data: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    learner: &LearnerConfig,
) -> Result<NuisanceFit> {
    if fold >= plan.folds {
        return Err(Error::InvalidConfig(format!(
            "fold {fold} out of range for a {}-fold plan",
            plan.folds
        )));
    }
    if plan.n != data.n() {
        return Err(Error::InvalidConfig(format!(
            "fold plan covers {} observations but the dataset has {}",
            plan.n,
            data.n()
        )));
    }
    let train = plan.train_indices(fold);
    let mut fit = fit_on_indices(data, &train, fold, learner)?;
    fit.fold = Some(fold);
    Ok(fit)
}

/// Fit on an explicit training index set; `tag` decorrelates Monte Carlo draws.
pub fn fit_on_indices(
    data: &Dataset,
    train: &[usize],
    tag: usize,
    learner: &LearnerConfig,
) -> Result<NuisanceFit> {
    learner.validate()?;
    let learner = &learner.resolve(data, train.len());
    match learner.learner {
        LearnerKind::CellMean => {
            let fitted = cellmean::fit(data, train, tag as u64, learner)?;
            Ok(NuisanceFit {
                fold: None,
                learner_tag: "cellmean".into(),
                integration: fitted.integration,
                marginals: fitted.marginals,
                diagnostics: fitted.diagnostics,
                model: Arc::new(fitted.model),
            })
        }
        _ => {
            let fitted = polyls::fit(data, train, learner)?;
            Ok(NuisanceFit {
                fold: None,
                learner_tag: format!(
                    "polyls(degree={}, order={})",
                    learner.degree,
                    learner
                        .interaction_order
                        .map_or_else(|| "full".to_string(), |o| o.to_string())
                ),
                integration: IntegrationMode::ExactMoments,
                marginals: fitted.marginals,
                diagnostics: fitted.diagnostics,
                model: Arc::new(fitted.model),
            })
        }
    }
}

/// One fit per fold, in fold order.
pub fn fit_all_folds(
    data: &Dataset,
    plan: &FoldPlan,
    learner: &LearnerConfig,
) -> Result<Vec<NuisanceFit>> {
    (0..plan.folds)
        .into_par_iter()
        .map(|l| fit_nuisances(data, plan, l, learner))
        .collect()
}

/// The fitted mean with the factors in `excluded` integrated out against
/// their marginals and the remaining factors held at `w`.
pub fn conditional_mean_excluding(fit: &NuisanceFit, excluded: FactorSet, w: &[f64]) -> f64 {
    if excluded.is_empty() {
        return fit.mu(w);
    }
    fit.block(excluded).conditional_mean(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockValue {
    /// `E[E[Y | W_{-S}]^2]`.
    pub numerator: f64,
    pub var_y: f64,
    pub numerator_std_error: Option<f64>,
}

impl BlockValue {
    pub fn ratio(&self) -> f64 {
        self.numerator / self.var_y
    }
}

pub fn block_value(fit: &NuisanceFit, block: BuildingBlock) -> Result<BlockValue> {
    let var_y = fit.var_y()?;
    let b = fit.block(block.excluded);
    Ok(BlockValue {
        numerator: b.numerator(),
        var_y,
        numerator_std_error: b.numerator_std_error(),
    })
}

/// Integrands whose conditional expectation given one factor enters the
/// efficient correction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integrand {
    /// `mu(W) * m_S(W)`.
    MuTimesMuExcl(FactorSet),
    /// `m_S(W)^2`.
    MuExclSquared(FactorSet),
    /// `(Y - E[Y])^2`, through `nu` and `mu`.
    YSquaredCentered,
}

pub fn conditional_moment_given_factor(
    fit: &NuisanceFit,
    integrand: Integrand,
    k: usize,
    w_k: f64,
) -> f64 {
    match integrand {
        Integrand::MuTimesMuExcl(s) => fit.block(s).mu_times_excluded_given(k, w_k),
        Integrand::MuExclSquared(s) => fit.block(s).excluded_squared_given(k, w_k),
        Integrand::YSquaredCentered => fit.model.centered_square_given(k, w_k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_plan_examples() {
        let p = make_fold_plan(10, 5, 7).unwrap();
        assert_eq!(p.fold_sizes(), vec![2; 5]);
        let p = make_fold_plan(11, 5, 7).unwrap();
        let mut sizes = p.fold_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        assert!(matches!(
            make_fold_plan(3, 5, 7),
            Err(Error::TooFewObservations { .. })
        ));
        assert!(matches!(
            make_fold_plan(10, 1, 7),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn fold_plan_is_deterministic() {
        assert_eq!(
            make_fold_plan(101, 4, 3).unwrap(),
            make_fold_plan(101, 4, 3).unwrap()
        );
        assert_ne!(
            make_fold_plan(101, 4, 3).unwrap().assignment,
            make_fold_plan(101, 4, 4).unwrap().assignment
        );
    }

    #[test]
    fn learner_config_defaults_from_toml() {
        let cfg: LearnerConfig = toml::from_str("learner = \"polyls\"\ndegree = 2").unwrap();
        assert_eq!(cfg.learner, LearnerKind::PolyLs);
        assert_eq!(cfg.degree, 2);
        assert_eq!(cfg.ridge, 1e-8);
        assert_eq!(cfg.mc_draws, 2000);
        let bad = LearnerConfig {
            mc_draws: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
