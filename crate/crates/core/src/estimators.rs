//! Plug-in and one-step (cross-fitted) estimators of signed block
//! combinations.
//!
//! Each fold `l` contributes the plug-in value `xi(P_{-l})` computed from the
//! nuisances fitted without fold `l`, and every held-out observation `i` gets
//! `xi_i = xi(P_{-l}) + phi(Y_i, W_i; P_{-l})`. The estimate is the mean of the
//! `xi_i`, and their spread gives the standard error.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimand::{expand_estimand, BuildingBlock, EstimandSpec, SignedBlockCombination};
use crate::inference::normal_quantile;
use crate::nuisance::{fit_all_folds, BlockModel, FoldPlan, LearnerConfig, NuisanceFit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "plugin")]
    PlugIn,
    #[serde(rename = "if")]
    OneStepIf,
    #[serde(rename = "eif")]
    OneStepEif,
}

impl Method {
    pub fn is_one_step(self) -> bool {
        !matches!(self, Method::PlugIn)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::PlugIn => "plugin",
            Method::OneStepIf => "if",
            Method::OneStepEif => "eif",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plugin" | "plug-in" => Ok(Method::PlugIn),
            "if" | "onestepif" | "one-step-if" => Ok(Method::OneStepIf),
            "eif" | "onestepeif" | "one-step-eif" => Ok(Method::OneStepEif),
            other => Err(Error::InvalidConfig(format!(
                "unknown method '{other}' (expected plugin, if or eif)"
            ))),
        }
    }
}

/// Ratio correction shared by every block of a combination:
/// `phi = phi_num / V - num * phi_var / V^2`, where `num` and `phi_num` are
/// already signed sums over the blocks.
pub fn delta_method_combine(
    signed_numerators: f64,
    var_y: f64,
    signed_phi_numerators: f64,
    phi_var_y: f64,
) -> f64 {
    signed_phi_numerators / var_y - signed_numerators * phi_var_y / (var_y * var_y)
}

/// Numerator score of one block under the nonparametric model:
/// `2 y m - m^2 - Theta`.
pub fn if_numerator_score(y: f64, cond_mean: f64, numerator: f64) -> f64 {
    2.0 * y * cond_mean - cond_mean * cond_mean - numerator
}

/// Variance score under the nonparametric model: `(y - E[Y])^2 - Var(Y)`.
pub fn if_variance_score(y: f64, mean_y: f64, var_y: f64) -> f64 {
    (y - mean_y).powi(2) - var_y
}

/// Per-factor ingredients of the efficient numerator score for one block.
pub struct EifBlockTerms<'a> {
    pub cond_mean: f64,
    pub mu: f64,
    pub numerator: f64,
    /// `E[mu m | W_k = w_k]` for excluded `k`, `E[m^2 | W_k = w_k]` otherwise.
    pub given_factor: &'a [f64],
    pub excluded: crate::estimand::FactorSet,
}

/// Efficient numerator score when the factors are independent.
pub fn eif_numerator_score(y: f64, t: &EifBlockTerms<'_>) -> f64 {
    let k = t.given_factor.len();
    let s = t.excluded.len();
    let mut sum = 2.0 * (y - t.mu) * t.cond_mean;
    for (j, g) in t.given_factor.iter().enumerate() {
        sum += if t.excluded.contains(j) { 2.0 * g } else { *g };
    }
    sum - (2 * s + (k - s)) as f64 * t.numerator
}

/// Efficient variance score when the factors are independent. `nu - mu^2`
/// is left unclamped: its mean must track `E[Y^2] - E[mu^2]` for the
/// correction to stay unbiased, even where a fitted surface goes negative.
pub fn eif_variance_score(
    y: f64,
    mu: f64,
    nu: f64,
    mean_y: f64,
    var_y: f64,
    centered_given: &[f64],
) -> f64 {
    let cond_var = nu - mu * mu;
    let k = centered_given.len() as f64;
    (y - mean_y).powi(2) - cond_var - (mu - mean_y).powi(2) + centered_given.iter().sum::<f64>()
        - k * var_y
}

/// Nonparametric influence value of a single building block ratio.
pub fn phi_if(y: f64, w: &[f64], fit: &NuisanceFit, block: BuildingBlock) -> Result<f64> {
    let var_y = fit.var_y()?;
    let b = fit.block(block.excluded);
    let m = b.conditional_mean(w);
    let theta = b.numerator();
    Ok(delta_method_combine(
        theta,
        var_y,
        if_numerator_score(y, m, theta),
        if_variance_score(y, fit.mean_y(), var_y),
    ))
}

/// Efficient influence value of a single building block ratio.
pub fn phi_eif(y: f64, w: &[f64], fit: &NuisanceFit, block: BuildingBlock) -> Result<f64> {
    let var_y = fit.var_y()?;
    let b = fit.block(block.excluded);
    let k = fit.num_factors();
    let given: Vec<f64> = (0..k)
        .map(|j| block_given_factor(b.as_ref(), j, w[j]))
        .collect();
    let centered: Vec<f64> = (0..k)
        .map(|j| fit.model().centered_square_given(j, w[j]))
        .collect();
    let terms = EifBlockTerms {
        cond_mean: b.conditional_mean(w),
        mu: fit.mu(w),
        numerator: b.numerator(),
        given_factor: &given,
        excluded: block.excluded,
    };
    Ok(delta_method_combine(
        b.numerator(),
        var_y,
        eif_numerator_score(y, &terms),
        eif_variance_score(y, fit.mu(w), fit.nu(w), fit.mean_y(), var_y, &centered),
    ))
}

fn block_given_factor(b: &dyn BlockModel, k: usize, w_k: f64) -> f64 {
    if b.excluded().contains(k) {
        b.mu_times_excluded_given(k, w_k)
    } else {
        b.excluded_squared_given(k, w_k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerObservationRecord {
    pub index: usize,
    pub fold: usize,
    /// `xi(P_{-l}) + phi_i`.
    pub xi_hat_i: f64,
    pub plug_in: f64,
    pub correction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub size: usize,
    pub plug_in: f64,
    /// Mean of the fold's `xi_hat_i` (equal to `plug_in` for the plug-in method).
    pub estimate: f64,
    pub var_y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSeeds {
    pub fold_plan: u64,
    pub monte_carlo: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimand: EstimandSpec,
    pub method: Method,
    /// Unclipped estimate.
    pub point: f64,
    /// `max(point, 0)`.
    pub point_clipped: f64,
    pub std_error: Option<f64>,
    pub ci: Option<[f64; 2]>,
    pub alpha: f64,
    pub n: usize,
    pub folds: usize,
    pub seeds: ReportSeeds,
    pub learner: String,
    pub folds_detail: Vec<FoldSummary>,
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Estimate {
    pub report: EstimateReport,
    /// Empty for the plug-in method.
    pub records: Vec<PerObservationRecord>,
}

/// Fold-size weighted plug-in value of a combination.
pub fn plugin_estimate(
    plan: &FoldPlan,
    fits: &[NuisanceFit],
    combo: &SignedBlockCombination,
) -> Result<f64> {
    check_fits(plan, fits)?;
    let sizes = plan.fold_sizes();
    let mut total = 0.0;
    for (l, fit) in fits.iter().enumerate() {
        total += sizes[l] as f64 * fold_plugin(fit, combo)?.0;
    }
    Ok(total / plan.n as f64)
}

fn fold_plugin(fit: &NuisanceFit, combo: &SignedBlockCombination) -> Result<(f64, f64)> {
    let var_y = fit.var_y()?;
    let num: f64 = combo
        .terms()
        .iter()
        .map(|(s, b)| f64::from(*s) * fit.block(b.excluded).numerator())
        .sum();
    Ok((num / var_y, var_y))
}

fn check_fits(plan: &FoldPlan, fits: &[NuisanceFit]) -> Result<()> {
    if fits.len() != plan.folds {
        return Err(Error::InvalidConfig(format!(
            "{} nuisance fits supplied for a {}-fold plan",
            fits.len(),
            plan.folds
        )));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// Fit nuisances per fold and run the requested estimator.
pub fn one_step_estimate(
    data: &Dataset,
    plan: &FoldPlan,
    learner: &LearnerConfig,
    spec: &EstimandSpec,
    method: Method,
    alpha: f64,
) -> Result<Estimate> {
    spec.validate(data.num_factors())?;
    check_alpha(alpha)?;
    let fits = fit_all_folds(data, plan, learner)?;
    let mut est = estimate_with_fits(data, plan, &fits, spec, method, alpha)?;
    est.report.seeds.monte_carlo = learner.mc_seed;
    Ok(est)
}

/// Run an estimator with nuisances already fitted (one per fold, in order).
pub fn estimate_with_fits(
    data: &Dataset,
    plan: &FoldPlan,
    fits: &[NuisanceFit],
    spec: &EstimandSpec,
    method: Method,
    alpha: f64,
) -> Result<Estimate> {
    spec.validate(data.num_factors())?;
    check_alpha(alpha)?;
    check_fits(plan, fits)?;
    if plan.n != data.n() {
        return Err(Error::InvalidConfig(format!(
            "fold plan covers {} observations but the dataset has {}",
            plan.n,
            data.n()
        )));
    }
    let combo = expand_estimand(spec);
    let folds: Vec<FoldOutput> = (0..plan.folds)
        .into_par_iter()
        .map(|l| evaluate_fold(data, plan, l, &fits[l], &combo, method))
        .collect::<Result<_>>()?;

    let n = plan.n as f64;
    let mut diagnostics = Vec::new();
    for (l, fit) in fits.iter().enumerate() {
        for d in &fit.diagnostics {
            diagnostics.push(format!("fold {l}: {d}"));
        }
        if fit.model().second_moment_y() < fit.mean_y().powi(2) {
            diagnostics.push(format!(
                "fold {l}: ClampedVariance: fitted outcome variance is negative"
            ));
        }
    }
    let unsupported: usize = folds.iter().map(|f| f.unsupported).sum();
    if unsupported > 0 {
        diagnostics.push(format!(
            "EmptyCell: {unsupported} held-out observations fall in cells empty in their training folds"
        ));
    }
    let folds_detail: Vec<FoldSummary> = folds.iter().map(|f| f.summary.clone()).collect();
    let learner = fits
        .first()
        .map(|f| f.learner_tag.clone())
        .unwrap_or_default();
    let seeds = ReportSeeds {
        fold_plan: plan.seed,
        monte_carlo: 0,
    };

    let (point, std_error, ci, records) = if method.is_one_step() {
        let records: Vec<PerObservationRecord> = {
            let mut r: Vec<_> = folds.into_iter().flat_map(|f| f.records).collect();
            r.sort_by_key(|r| r.index);
            r
        };
        let point = records.iter().map(|r| r.xi_hat_i).sum::<f64>() / n;
        let sigma2 = records
            .iter()
            .map(|r| (r.xi_hat_i - point).powi(2))
            .sum::<f64>()
            / n;
        let se = (sigma2 / n).sqrt();
        let z = normal_quantile(1.0 - alpha / 2.0);
        (
            point,
            Some(se),
            Some([point - z * se, point + z * se]),
            records,
        )
    } else {
        let point = folds_detail
            .iter()
            .map(|f| f.size as f64 * f.plug_in)
            .sum::<f64>()
            / n;
        (point, None, None, Vec::new())
    };
    Ok(Estimate {
        report: EstimateReport {
            estimand: *spec,
            method,
            point,
            point_clipped: point.max(0.0),
            std_error,
            ci,
            alpha,
            n: plan.n,
            folds: plan.folds,
            seeds,
            learner,
            folds_detail,
            diagnostics,
        },
        records,
    })
}

struct FoldOutput {
    summary: FoldSummary,
    records: Vec<PerObservationRecord>,
    unsupported: usize,
}

/// Memoized conditional moments given one factor, keyed by the factor value.
struct GivenTable {
    values: Vec<HashMap<u64, f64>>,
}

impl GivenTable {
    fn build(test: &[usize], data: &Dataset, f: impl Fn(usize, f64) -> f64 + Sync) -> Self {
        let values = (0..data.num_factors())
            .map(|k| {
                let col = data.column(k);
                let mut distinct: Vec<f64> = test.iter().map(|&i| col[i]).collect();
                distinct.sort_by(f64::total_cmp);
                distinct.dedup();
                distinct
                    .par_iter()
                    .map(|&v| (v.to_bits(), f(k, v)))
                    .collect::<Vec<_>>()
                    .into_iter()
                    .collect()
            })
            .collect();
        GivenTable { values }
    }

    fn get(&self, k: usize, v: f64) -> f64 {
        self.values[k][&v.to_bits()]
    }
}

fn evaluate_fold(
    data: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    fit: &NuisanceFit,
    combo: &SignedBlockCombination,
    method: Method,
) -> Result<FoldOutput> {
    let var_y = fit.var_y()?;
    let mean_y = fit.mean_y();
    let blocks: Vec<(f64, Box<dyn BlockModel + '_>)> = combo
        .terms()
        .iter()
        .map(|(s, b)| (f64::from(*s), fit.block(b.excluded)))
        .collect();
    let signed_num: f64 = blocks.iter().map(|(s, b)| s * b.numerator()).sum();
    let plug_in = signed_num / var_y;
    let test = plan.test_indices(fold);
    let k = data.num_factors();
    let y = data.outcome();

    let unsupported = test
        .iter()
        .filter(|&&i| !fit.model().in_support(&data.row(i)))
        .count();

    if !method.is_one_step() {
        return Ok(FoldOutput {
            summary: FoldSummary {
                fold,
                size: test.len(),
                plug_in,
                estimate: plug_in,
                var_y,
            },
            records: Vec::new(),
            unsupported,
        });
    }

    let eif_tables = if method == Method::OneStepEif {
        let per_block: Vec<GivenTable> = blocks
            .iter()
            .map(|(_, b)| {
                GivenTable::build(&test, data, |j, v| block_given_factor(b.as_ref(), j, v))
            })
            .collect();
        let centered =
            GivenTable::build(&test, data, |j, v| fit.model().centered_square_given(j, v));
        Some((per_block, centered))
    } else {
        None
    };

    let records: Vec<PerObservationRecord> = test
        .par_iter()
        .map_init(
            || (Vec::with_capacity(k), vec![0.0; k], vec![0.0; k]),
            |(w, given, centered), &i| {
                data.row_into(i, w);
                let yi = y[i];
                let (phi_num, phi_var) = match &eif_tables {
                    None => {
                        let num: f64 = blocks
                            .iter()
                            .map(|(s, b)| {
                                s * if_numerator_score(yi, b.conditional_mean(w), b.numerator())
                            })
                            .sum();
                        (num, if_variance_score(yi, mean_y, var_y))
                    }
                    Some((per_block, centered_table)) => {
                        let mu = fit.mu(w);
                        let mut num = 0.0;
                        for ((s, b), table) in blocks.iter().zip(per_block) {
                            for j in 0..k {
                                given[j] = table.get(j, w[j]);
                            }
                            let terms = EifBlockTerms {
                                cond_mean: b.conditional_mean(w),
                                mu,
                                numerator: b.numerator(),
                                given_factor: given,
                                excluded: b.excluded(),
                            };
                            num += s * eif_numerator_score(yi, &terms);
                        }
                        for j in 0..k {
                            centered[j] = centered_table.get(j, w[j]);
                        }
                        (
                            num,
                            eif_variance_score(yi, mu, fit.nu(w), mean_y, var_y, centered),
                        )
                    }
                };
                let correction = delta_method_combine(signed_num, var_y, phi_num, phi_var);
                PerObservationRecord {
                    index: i,
                    fold,
                    xi_hat_i: plug_in + correction,
                    plug_in,
                    correction,
                }
            },
        )
        .collect();
    let estimate = records.iter().map(|r| r.xi_hat_i).sum::<f64>() / records.len() as f64;
    Ok(FoldOutput {
        summary: FoldSummary {
            fold,
            size: test.len(),
            plug_in,
            estimate,
            var_y,
        },
        records,
        unsupported,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimand::FactorSet;

    #[test]
    fn delta_method_trivial_cases() {
        assert_eq!(delta_method_combine(0.0, 2.0, 0.0, 5.0), 0.0);
        assert_eq!(delta_method_combine(3.0, 2.0, 1.0, 0.0), 0.5);
    }

    #[test]
    fn if_matches_unfactored_ratio_form() {
        // (2 y m - m^2) / V - Theta (y - EY)^2 / V^2
        let (y, m, theta, v, ey): (f64, f64, f64, f64, f64) = (1.3, 0.4, 0.7, 2.1, 0.2);
        let direct = (2.0 * y * m - m * m) / v - theta * (y - ey).powi(2) / (v * v);
        let combined = delta_method_combine(
            theta,
            v,
            if_numerator_score(y, m, theta),
            if_variance_score(y, ey, v),
        );
        assert!((direct - combined).abs() < 1e-14);
    }

    #[test]
    fn eif_vanishes_for_constant_nuisances() {
        let given = [4.0, 4.0];
        let t = EifBlockTerms {
            cond_mean: 2.0,
            mu: 2.0,
            numerator: 4.0,
            given_factor: &given,
            excluded: FactorSet::singleton(0),
        };
        // 2 * 4 + 4 - 3 * 4
        assert_eq!(eif_numerator_score(2.0, &t), 0.0);
        // zero mean: every block term vanishes whatever the variance score
        let zero = EifBlockTerms {
            cond_mean: 0.0,
            mu: 0.0,
            numerator: 0.0,
            given_factor: &[0.0, 0.0],
            excluded: FactorSet::singleton(0),
        };
        let phi_var = eif_variance_score(0.0, 0.0, 1.0, 0.0, 1.0, &[1.0, 1.0]);
        assert_eq!(
            delta_method_combine(0.0, 1.0, eif_numerator_score(0.0, &zero), phi_var),
            0.0
        );
    }

    #[test]
    fn method_round_trip() {
        for m in [Method::PlugIn, Method::OneStepIf, Method::OneStepEif] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("foo".parse::<Method>().is_err());
    }
}
