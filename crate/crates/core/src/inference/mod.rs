//! Inference on explainabilities: randomization tests of the degenerate null
//! `xi = 0`, normal-approximation intervals, the sequential procedure that
//! gates the interval on the test, and hierarchical screening of factors and
//! pairs.

mod normal;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimand::{expand_estimand, EstimandSpec, FactorSet};
use crate::estimators::{
    estimate_with_fits, one_step_estimate, plugin_estimate, EstimateReport, Method,
};
use crate::nuisance::{fit_all_folds, make_fold_plan, FoldPlan, LearnerConfig, NuisanceFit};
use crate::seed::{self, derive_seed};

pub use normal::normal_quantile;

/// Statistic recomputed on each permuted dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Statistic {
    #[default]
    #[serde(rename = "plugin")]
    PlugIn,
    #[serde(rename = "if")]
    OneStepIf,
}

impl FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plugin" | "plug-in" => Ok(Statistic::PlugIn),
            "if" => Ok(Statistic::OneStepIf),
            other => Err(Error::InvalidConfig(format!(
                "unknown statistic '{other}' (expected plugin or if)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizationConfig {
    pub permutations: usize,
    pub statistic: Statistic,
    pub seed: u64,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        RandomizationConfig {
            permutations: 999,
            statistic: Statistic::PlugIn,
            seed: 0,
        }
    }
}

/// Cross-fitting setup shared by every estimate in an inference run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub folds: usize,
    pub fold_seed: u64,
    pub learner: LearnerConfig,
    pub method: Method,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            folds: 5,
            fold_seed: 0,
            learner: LearnerConfig::default(),
            method: Method::OneStepEif,
        }
    }
}

impl EstimationConfig {
    pub fn plan(&self, n: usize) -> Result<FoldPlan> {
        make_fold_plan(n, self.folds, self.fold_seed)
    }
}

/// Move the rows of every column in `subset` by one shared permutation:
/// row `i` of the result holds row `perm[i]` of the input.
pub fn apply_permutation(data: &Dataset, subset: FactorSet, perm: &[usize]) -> Dataset {
    let mut out = data.clone();
    for k in subset.iter() {
        let col = data.column(k);
        out = out.with_column(k, perm.iter().map(|&j| col[j]).collect());
    }
    out
}

/// Jointly permute the columns in `subset` by a uniformly random permutation;
/// other columns and the outcome are untouched.
pub fn permute_subset(data: &Dataset, subset: FactorSet, rng: &mut seed::Rng) -> Dataset {
    let mut perm: Vec<usize> = (0..data.n()).collect();
    perm.shuffle(rng);
    apply_permutation(data, subset, &perm)
}

/// `(1 + #{T_b >= T_obs}) / (1 + B)`.
pub fn randomization_p_value(observed: f64, permuted: &[f64]) -> f64 {
    let exceed = permuted.iter().filter(|&&t| t >= observed).count();
    (1 + exceed) as f64 / (1 + permuted.len()) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizationOutcome {
    pub p_value: f64,
    pub observed_stat: f64,
    pub permuted_stats: Vec<f64>,
}

fn statistic_value(
    data: &Dataset,
    plan: &FoldPlan,
    learner: &LearnerConfig,
    spec: &EstimandSpec,
    statistic: Statistic,
) -> Result<f64> {
    let fits = fit_all_folds(data, plan, learner)?;
    match statistic {
        Statistic::PlugIn => plugin_estimate(plan, &fits, &expand_estimand(spec)),
        Statistic::OneStepIf => {
            Ok(
                estimate_with_fits(data, plan, &fits, spec, Method::OneStepIf, 0.05)?
                    .report
                    .point,
            )
        }
    }
}

/// Randomization test of `xi(spec) = 0`, permuting the factors of `spec`.
/// The fold plan stays fixed and nuisances are refitted on every permutation.
pub fn randomization_test(
    data: &Dataset,
    spec: &EstimandSpec,
    config: &RandomizationConfig,
    estimation: &EstimationConfig,
) -> Result<RandomizationOutcome> {
    spec.validate(data.num_factors())?;
    if config.permutations == 0 {
        return Err(Error::InvalidConfig(
            "at least one permutation is required".into(),
        ));
    }
    let plan = estimation.plan(data.n())?;
    let target = spec.factors();
    let observed = statistic_value(data, &plan, &estimation.learner, spec, config.statistic)?;
    let permuted: Vec<f64> = (0..config.permutations)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed::derived_rng(config.seed, &[b as u64]);
            let permuted = permute_subset(data, target, &mut rng);
            statistic_value(
                &permuted,
                &plan,
                &estimation.learner,
                spec,
                config.statistic,
            )
        })
        .collect::<Result<_>>()?;
    Ok(RandomizationOutcome {
        p_value: randomization_p_value(observed, &permuted),
        observed_stat: observed,
        permuted_stats: permuted,
    })
}

/// Normal-approximation interval `point -/+ z_{1 - alpha/2} se`.
pub fn confidence_interval(report: &EstimateReport, alpha: f64) -> Result<[f64; 2]> {
    let se = report.std_error.ok_or(Error::MissingStdError)?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let z = normal_quantile(1.0 - alpha / 2.0);
    Ok([report.point - z * se, report.point + z * se])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Reject,
    FailToReject,
}

/// Confidence set returned when the randomization gate does not reject.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    /// `{0}`.
    #[default]
    Point,
    /// `[0, inf)`, conservative.
    HalfLine,
}

impl FromStr for Fallback {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "point" | "pointzero" | "zero" => Ok(Fallback::Point),
            "halfline" | "half-line" => Ok(Fallback::HalfLine),
            other => Err(Error::InvalidConfig(format!(
                "unknown fallback '{other}' (expected point or halfline)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConfidenceSet {
    PointZero,
    HalfLine,
    Interval { lo: f64, hi: f64 },
}

impl ConfidenceSet {
    pub fn contains(&self, x: f64) -> bool {
        match *self {
            ConfidenceSet::PointZero => x == 0.0,
            ConfidenceSet::HalfLine => x >= 0.0,
            ConfidenceSet::Interval { lo, hi } => lo <= x && x <= hi,
        }
    }
}

impl fmt::Display for ConfidenceSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfidenceSet::PointZero => write!(f, "{{0}}"),
            ConfidenceSet::HalfLine => write!(f, "[0, inf)"),
            ConfidenceSet::Interval { lo, hi } => write!(f, "[{lo}, {hi}]"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum TraceStep {
    RandomizationTest {
        statistic: Statistic,
        permutations: usize,
        observed_stat: f64,
        p_value: f64,
        decision: Decision,
    },
    GateSkipped {
        reason: String,
    },
    Fallback {
        set: ConfidenceSet,
    },
    ConfidenceInterval {
        method: Method,
        point: f64,
        std_error: f64,
        lo: f64,
        hi: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub estimand: EstimandSpec,
    pub alpha: f64,
    pub p_value: Option<f64>,
    pub observed_stat: Option<f64>,
    pub permuted_stats: Vec<f64>,
    pub decision: Option<Decision>,
    pub confidence_set: ConfidenceSet,
    pub estimate: Option<EstimateReport>,
    pub trace: Vec<TraceStep>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequentialConfig {
    pub randomization: RandomizationConfig,
    pub estimation: EstimationConfig,
    pub fallback: Fallback,
    /// Run the randomization gate for interaction estimands too. Heuristic:
    /// a zero interaction need not make its influence function vanish.
    pub force_interaction_gate: bool,
}

/// Randomization gate at level `alpha`, then (on rejection) the one-step
/// interval at the same level.
pub fn sequential_confidence_set(
    data: &Dataset,
    spec: &EstimandSpec,
    alpha: f64,
    config: &SequentialConfig,
) -> Result<InferenceResult> {
    sequential_with_fits(data, spec, alpha, config, None)
}

fn sequential_with_fits(
    data: &Dataset,
    spec: &EstimandSpec,
    alpha: f64,
    config: &SequentialConfig,
    fits: Option<(&FoldPlan, &[NuisanceFit])>,
) -> Result<InferenceResult> {
    spec.validate(data.num_factors())?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if !config.estimation.method.is_one_step() {
        return Err(Error::InvalidConfig(
            "the interval stage needs a one-step method (if or eif)".into(),
        ));
    }
    let mut trace = Vec::new();
    let mut result = InferenceResult {
        estimand: *spec,
        alpha,
        p_value: None,
        observed_stat: None,
        permuted_stats: Vec::new(),
        decision: None,
        confidence_set: ConfidenceSet::HalfLine,
        estimate: None,
        trace: Vec::new(),
    };

    if spec.is_interaction() && !config.force_interaction_gate {
        trace.push(TraceStep::GateSkipped {
            reason: "interaction estimands are not gated; reporting the asymptotic interval".into(),
        });
    } else {
        let outcome = randomization_test(data, spec, &config.randomization, &config.estimation)?;
        let decision = if outcome.p_value <= alpha {
            Decision::Reject
        } else {
            Decision::FailToReject
        };
        trace.push(TraceStep::RandomizationTest {
            statistic: config.randomization.statistic,
            permutations: config.randomization.permutations,
            observed_stat: outcome.observed_stat,
            p_value: outcome.p_value,
            decision,
        });
        result.p_value = Some(outcome.p_value);
        result.observed_stat = Some(outcome.observed_stat);
        result.permuted_stats = outcome.permuted_stats;
        result.decision = Some(decision);
        if decision == Decision::FailToReject {
            let set = match config.fallback {
                Fallback::Point => ConfidenceSet::PointZero,
                Fallback::HalfLine => ConfidenceSet::HalfLine,
            };
            trace.push(TraceStep::Fallback { set });
            result.confidence_set = set;
            result.trace = trace;
            return Ok(result);
        }
    }

    let est = match fits {
        Some((plan, fits)) => {
            estimate_with_fits(data, plan, fits, spec, config.estimation.method, alpha)?
        }
        None => {
            let plan = config.estimation.plan(data.n())?;
            one_step_estimate(
                data,
                &plan,
                &config.estimation.learner,
                spec,
                config.estimation.method,
                alpha,
            )?
        }
    };
    let [lo, hi] = est.report.ci.ok_or(Error::MissingStdError)?;
    trace.push(TraceStep::ConfidenceInterval {
        method: est.report.method,
        point: est.report.point,
        std_error: est.report.std_error.unwrap_or(0.0),
        lo,
        hi,
    });
    result.confidence_set = ConfidenceSet::Interval { lo, hi };
    result.estimate = Some(est.report);
    result.trace = trace;
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreenDecision {
    /// Gate rejected; the interval comes from the one-step estimate.
    Reject,
    /// Gate did not reject; the total is set to zero.
    FailToReject,
    /// Interaction involving a factor that was not rejected; set to zero untested.
    ImpliedZero,
    /// Interaction between two rejected factors, reported with its interval.
    Estimated,
}

impl fmt::Display for ScreenDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScreenDecision::Reject => "reject",
            ScreenDecision::FailToReject => "fail_to_reject",
            ScreenDecision::ImpliedZero => "implied_zero",
            ScreenDecision::Estimated => "estimated",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenRow {
    /// Factor name, or `a:b` for a pair.
    pub factor: String,
    pub estimand: EstimandSpec,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub p_value: Option<f64>,
    pub decision: ScreenDecision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenTable {
    pub alpha: f64,
    pub rows: Vec<ScreenRow>,
    pub results: Vec<InferenceResult>,
}

impl ScreenTable {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "factor", "estimate", "se", "ci_lo", "ci_hi", "p_value", "decision",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.factor.clone(),
                r.estimate.to_string(),
                opt(r.se),
                opt(r.ci_lo),
                opt(r.ci_hi),
                opt(r.p_value),
                r.decision.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Screen every factor with the sequential procedure, then estimate the
/// interactions among rejected factors. Pairs touching a non-rejected factor
/// are reported as zero without testing.
pub fn hierarchical_screen(
    data: &Dataset,
    alpha: f64,
    config: &SequentialConfig,
) -> Result<ScreenTable> {
    let k = data.num_factors();
    let plan = config.estimation.plan(data.n())?;
    let fits = fit_all_folds(data, &plan, &config.estimation.learner)?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    let mut rejected = vec![false; k];
    for (j, flag) in rejected.iter_mut().enumerate() {
        let spec = EstimandSpec::total([j]);
        let res = sequential_with_fits(data, &spec, alpha, config, Some((&plan, &fits)))?;
        *flag = res.decision == Some(Decision::Reject);
        let row = match (&res.estimate, *flag) {
            (Some(est), true) => ScreenRow {
                factor: data.factor(j).name.clone(),
                estimand: spec,
                estimate: est.point,
                se: est.std_error,
                ci_lo: est.ci.map(|c| c[0]),
                ci_hi: est.ci.map(|c| c[1]),
                p_value: res.p_value,
                decision: ScreenDecision::Reject,
            },
            _ => ScreenRow {
                factor: data.factor(j).name.clone(),
                estimand: spec,
                estimate: 0.0,
                se: None,
                ci_lo: None,
                ci_hi: None,
                p_value: res.p_value,
                decision: ScreenDecision::FailToReject,
            },
        };
        rows.push(row);
        results.push(res);
    }
    for a in 0..k {
        for b in a + 1..k {
            let spec = EstimandSpec::interaction(a, b);
            let label = format!("{}:{}", data.factor(a).name, data.factor(b).name);
            if rejected[a] && rejected[b] {
                let est =
                    estimate_with_fits(data, &plan, &fits, &spec, config.estimation.method, alpha)?;
                rows.push(ScreenRow {
                    factor: label,
                    estimand: spec,
                    estimate: est.report.point,
                    se: est.report.std_error,
                    ci_lo: est.report.ci.map(|c| c[0]),
                    ci_hi: est.report.ci.map(|c| c[1]),
                    p_value: None,
                    decision: ScreenDecision::Estimated,
                });
            } else {
                rows.push(ScreenRow {
                    factor: label,
                    estimand: spec,
                    estimate: 0.0,
                    se: None,
                    ci_lo: None,
                    ci_hi: None,
                    p_value: None,
                    decision: ScreenDecision::ImpliedZero,
                });
            }
        }
    }
    Ok(ScreenTable {
        alpha,
        rows,
        results,
    })
}

/// Seed of the `b`-th permutation, exposed so callers can replay one draw.
pub fn permutation_seed(master: u64, b: usize) -> u64 {
    derive_seed(master, &[b as u64])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Factor;

    fn small() -> Dataset {
        Dataset::new(
            "y",
            vec![1.0, 2.0, 3.0],
            vec![
                Factor::continuous("a", vec![10.0, 20.0, 30.0]),
                Factor::continuous("b", vec![-1.0, -2.0, -3.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn identity_permutation_is_noop() {
        let d = small();
        assert_eq!(apply_permutation(&d, FactorSet::full(2), &[0, 1, 2]), d);
    }

    #[test]
    fn cyclic_shift_of_one_column() {
        let d = small();
        // rho = (2, 3, 1) in one-based notation
        let p = apply_permutation(&d, FactorSet::singleton(0), &[1, 2, 0]);
        assert_eq!(p.column(0), &[20.0, 30.0, 10.0]);
        assert_eq!(p.column(1), d.column(1));
        assert_eq!(p.outcome(), d.outcome());
    }

    #[test]
    fn joint_permutation_keeps_rows_together() {
        let d = small();
        let mut rng = seed::rng(3);
        let p = permute_subset(&d, FactorSet::full(2), &mut rng);
        for i in 0..3 {
            assert_eq!(p.column(1)[i], -p.column(0)[i] / 10.0);
        }
    }

    #[test]
    fn p_value_formula() {
        assert_eq!(randomization_p_value(1.0, &[0.5; 19]), 0.05);
        assert_eq!(randomization_p_value(1.0, &[1.0; 19]), 1.0);
        assert_eq!(randomization_p_value(1.0, &[2.0, 0.0, 0.0]), 0.5);
    }

    #[test]
    fn interval_from_report() {
        let report = EstimateReport {
            estimand: EstimandSpec::total([0]),
            method: Method::OneStepEif,
            point: 0.5,
            point_clipped: 0.5,
            std_error: Some(0.1),
            ci: None,
            alpha: 0.05,
            n: 100,
            folds: 2,
            seeds: crate::estimators::ReportSeeds {
                fold_plan: 0,
                monte_carlo: 0,
            },
            learner: String::new(),
            folds_detail: Vec::new(),
            diagnostics: Vec::new(),
        };
        let [lo, hi] = confidence_interval(&report, 0.05).unwrap();
        assert!((lo - 0.304_003_601_545_994_6).abs() < 1e-9);
        assert!((hi - 0.695_996_398_454_005_4).abs() < 1e-9);
        let [lo, hi] = confidence_interval(&report, 1.0).unwrap();
        assert_eq!(lo, hi);
        let plug = EstimateReport {
            std_error: None,
            ..report
        };
        assert!(matches!(
            confidence_interval(&plug, 0.05),
            Err(Error::MissingStdError)
        ));
    }

    #[test]
    fn confidence_set_membership() {
        assert!(ConfidenceSet::PointZero.contains(0.0));
        assert!(!ConfidenceSet::PointZero.contains(0.1));
        assert!(ConfidenceSet::HalfLine.contains(3.0));
        assert!(ConfidenceSet::Interval { lo: 0.1, hi: 0.2 }.contains(0.15));
    }
}
