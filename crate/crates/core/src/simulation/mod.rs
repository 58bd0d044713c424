//! Data-generating processes with known explainabilities, exact and Monte
//! Carlo oracles, and a seeded study harness reporting bias, spread and
//! coverage.

pub mod poly;

use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Factor};
use crate::error::{Error, Result};
use crate::estimand::{expand_estimand, EstimandSpec, FactorSet};
use crate::estimators::{estimate_with_fits, Method};
use crate::nuisance::expansion::{Basis, BasisMarginal, Expansion, ExpansionModel};
use crate::nuisance::{
    fit_all_folds, make_fold_plan, IntegrationMode, LearnerConfig, MarginalEstimate, NuisanceFit,
};
use crate::seed::{derive_seed, derived_rng};

pub use poly::{FactorDist, Poly};

/// Noise level of the outcome, stated either as a variance or as a standard
/// deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSpec {
    Variance(f64),
    Sd(f64),
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::Variance(0.5)
    }
}

impl NoiseSpec {
    pub fn variance(self) -> f64 {
        match self {
            NoiseSpec::Variance(v) => v,
            NoiseSpec::Sd(s) => s * s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CustomTerm {
    pub coef: f64,
    pub exponents: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DgpKind {
    /// `Y = W1^3 + W2^3 + W3^3 + W1 W2^2 + sigma W1^2 W3 + E`, `W_k ~ U(-1, 1)`.
    PaperPolynomial {
        sigma: f64,
        #[serde(default)]
        noise: NoiseSpec,
    },
    /// `Y = W1 + W2 + E` with standard normal factors and noise.
    AdditiveGaussian,
    /// Polynomial outcome surface over independent factors.
    Custom {
        factors: Vec<FactorDist>,
        terms: Vec<CustomTerm>,
        #[serde(default)]
        noise: NoiseSpec,
    },
}

impl DgpKind {
    pub fn paper(sigma: f64) -> Self {
        DgpKind::PaperPolynomial {
            sigma,
            noise: NoiseSpec::default(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            DgpKind::PaperPolynomial { .. } => "paper_polynomial",
            DgpKind::AdditiveGaussian => "additive_gaussian",
            DgpKind::Custom { .. } => "custom",
        }
    }

    pub fn sigma(&self) -> Option<f64> {
        match self {
            DgpKind::PaperPolynomial { sigma, .. } => Some(*sigma),
            _ => None,
        }
    }

    pub fn num_factors(&self) -> usize {
        self.factor_dists().len()
    }

    pub fn factor_dists(&self) -> Vec<FactorDist> {
        match self {
            DgpKind::PaperPolynomial { .. } => vec![FactorDist::Uniform; 3],
            DgpKind::AdditiveGaussian => vec![FactorDist::StandardNormal; 2],
            DgpKind::Custom { factors, .. } => factors.clone(),
        }
    }

    pub fn noise_variance(&self) -> f64 {
        match self {
            DgpKind::PaperPolynomial { noise, .. } | DgpKind::Custom { noise, .. } => {
                noise.variance()
            }
            DgpKind::AdditiveGaussian => 1.0,
        }
    }

    /// `E[Y | W]` as a polynomial.
    pub fn mean_surface(&self) -> Poly {
        match self {
            DgpKind::PaperPolynomial { sigma, .. } => Poly::from_terms(
                3,
                &[
                    (1.0, vec![3, 0, 0]),
                    (1.0, vec![0, 3, 0]),
                    (1.0, vec![0, 0, 3]),
                    (1.0, vec![1, 2, 0]),
                    (*sigma, vec![2, 0, 1]),
                ],
            ),
            DgpKind::AdditiveGaussian => {
                Poly::from_terms(2, &[(1.0, vec![1, 0]), (1.0, vec![0, 1])])
            }
            DgpKind::Custom { factors, terms, .. } => {
                let mut p = Poly::zero(factors.len());
                for t in terms {
                    p.add_term(t.exponents.clone(), t.coef);
                }
                p
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let noise = self.noise_variance();
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise variance must be finite and non-negative, got {noise}"
            )));
        }
        if let DgpKind::Custom { factors, terms, .. } = self {
            if factors.is_empty() {
                return Err(Error::InvalidConfig(
                    "custom DGP needs at least one factor".into(),
                ));
            }
            if let Some(t) = terms.iter().find(|t| t.exponents.len() != factors.len()) {
                return Err(Error::InvalidConfig(format!(
                    "custom term has {} exponents for {} factors",
                    t.exponents.len(),
                    factors.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    pub seed: u64,
}

/// Exact nuisances of a generated dataset.
#[derive(Clone, Debug)]
pub struct TrueNuisance {
    pub mean_surface: Poly,
    pub dists: Vec<FactorDist>,
    pub noise_variance: f64,
}

impl TrueNuisance {
    pub fn of(kind: &DgpKind) -> Self {
        TrueNuisance {
            mean_surface: kind.mean_surface(),
            dists: kind.factor_dists(),
            noise_variance: kind.noise_variance(),
        }
    }

    /// Injectable fit: `mu` is the mean surface, `nu = mu^2 + noise variance`,
    /// marginals are the generating distributions.
    pub fn fit(&self) -> NuisanceFit {
        let k = self.dists.len();
        let bases = vec![Basis::standard_powers(); k];
        let marginals: Vec<BasisMarginal> = self
            .dists
            .iter()
            .map(|d| match d {
                FactorDist::Uniform => BasisMarginal::Uniform,
                FactorDist::StandardNormal => BasisMarginal::StandardNormal,
            })
            .collect();
        let mut mu = Expansion::zero(k);
        for (e, c) in self.mean_surface.terms() {
            mu.add_term(e.iter().map(|&p| p as u16).collect(), c);
        }
        let nu = mu
            .mul(&mu, &bases)
            .add(&Expansion::constant(k, self.noise_variance));
        let model = ExpansionModel::new(bases, marginals, mu, nu);
        let descr = self
            .dists
            .iter()
            .enumerate()
            .map(|(j, d)| MarginalEstimate::Analytic {
                factor: j,
                distribution: match d {
                    FactorDist::Uniform => "uniform(-1, 1)".into(),
                    FactorDist::StandardNormal => "normal(0, 1)".into(),
                },
            })
            .collect();
        NuisanceFit::from_model(
            Arc::new(model),
            "true",
            IntegrationMode::ExactMoments,
            descr,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub data: Dataset,
    pub truth: TrueNuisance,
}

/// Draw `n` observations; deterministic given the seed.
pub fn generate(spec: &DgpSpec) -> Result<Generated> {
    spec.kind.validate()?;
    let dists = spec.kind.factor_dists();
    let k = dists.len();
    let f = spec.kind.mean_surface();
    let sd = spec.kind.noise_variance().sqrt();
    let mut rng = derived_rng(spec.seed, &[]);
    let mut cols = vec![Vec::with_capacity(spec.n); k];
    let mut y = Vec::with_capacity(spec.n);
    let mut w = vec![0.0; k];
    for _ in 0..spec.n {
        for (j, d) in dists.iter().enumerate() {
            w[j] = match d {
                FactorDist::Uniform => rng.random_range(-1.0..1.0),
                FactorDist::StandardNormal => StandardNormal.sample(&mut rng),
            };
            cols[j].push(w[j]);
        }
        let e: f64 = StandardNormal.sample(&mut rng);
        y.push(f.eval(&w) + sd * e);
    }
    let factors = cols
        .into_iter()
        .enumerate()
        .map(|(j, c)| Factor::continuous(format!("W{}", j + 1), c))
        .collect();
    Ok(Generated {
        data: Dataset::new("Y", y, factors)?,
        truth: TrueNuisance::of(&spec.kind),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum OracleMethod {
    Symbolic,
    MonteCarlo { draws: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub estimand: EstimandSpec,
    pub true_value: f64,
    pub method: OracleMethod,
    /// Zero for symbolic values, three standard errors for Monte Carlo.
    pub numeric_error_bound: f64,
}

/// Exact value by polynomial moment arithmetic.
pub fn oracle_xi(kind: &DgpKind, estimand: &EstimandSpec) -> Result<OracleValue> {
    kind.validate()?;
    estimand.validate(kind.num_factors())?;
    let f = kind.mean_surface();
    let dists = kind.factor_dists();
    let mean = f.expectation(&dists);
    let var = f.mul(&f).expectation(&dists) - mean * mean + kind.noise_variance();
    if var <= 0.0 {
        return Err(Error::DegenerateVariance { value: var });
    }
    let combo = expand_estimand(estimand);
    let values: Vec<f64> = combo
        .blocks()
        .map(|b| {
            let m = f.expect_over(b.excluded, &dists);
            m.mul(&m).expectation(&dists) / var
        })
        .collect();
    Ok(OracleValue {
        estimand: *estimand,
        true_value: combo.combine(&values),
        method: OracleMethod::Symbolic,
        numeric_error_bound: 0.0,
    })
}

const ORACLE_CHUNK: usize = 100_000;

/// Pick-freeze Monte Carlo estimate with a delta-method error bound.
pub fn oracle_xi_monte_carlo(
    kind: &DgpKind,
    estimand: &EstimandSpec,
    draws: usize,
    seed: u64,
) -> Result<OracleValue> {
    kind.validate()?;
    estimand.validate(kind.num_factors())?;
    if draws < 2 {
        return Err(Error::InvalidConfig(
            "Monte Carlo oracle needs at least two draws".into(),
        ));
    }
    let f = kind.mean_surface();
    let dists = kind.factor_dists();
    let k = dists.len();
    let combo = expand_estimand(estimand);
    let terms: Vec<(f64, FactorSet)> = combo
        .terms()
        .iter()
        .map(|(s, b)| (f64::from(*s), b.excluded))
        .collect();
    let chunks = draws.div_ceil(ORACLE_CHUNK);
    // running sums of (g, f, f^2) and their cross products
    let sums = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = ORACLE_CHUNK.min(draws - c * ORACLE_CHUNK);
            let mut rng = derived_rng(seed, &[c as u64]);
            let mut acc = [0.0f64; 9];
            let mut a = vec![0.0; k];
            let mut b = vec![0.0; k];
            let mut mix = vec![0.0; k];
            let draw = |rng: &mut crate::seed::Rng, d: FactorDist| -> f64 {
                match d {
                    FactorDist::Uniform => rng.random_range(-1.0..1.0),
                    FactorDist::StandardNormal => StandardNormal.sample(rng),
                }
            };
            for _ in 0..len {
                for j in 0..k {
                    a[j] = draw(&mut rng, dists[j]);
                    b[j] = draw(&mut rng, dists[j]);
                }
                let fa = f.eval(&a);
                let mut g = 0.0;
                for (s, excl) in &terms {
                    for j in 0..k {
                        mix[j] = if excl.contains(j) { b[j] } else { a[j] };
                    }
                    g += s * fa * f.eval(&mix);
                }
                let v = [g, fa, fa * fa];
                acc[0] += v[0];
                acc[1] += v[1];
                acc[2] += v[2];
                acc[3] += v[0] * v[0];
                acc[4] += v[0] * v[1];
                acc[5] += v[0] * v[2];
                acc[6] += v[1] * v[1];
                acc[7] += v[1] * v[2];
                acc[8] += v[2] * v[2];
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold([0.0f64; 9], |mut t, a| {
            for (x, y) in t.iter_mut().zip(a) {
                *x += y;
            }
            t
        });
    let m = draws as f64;
    let mean = [sums[0] / m, sums[1] / m, sums[2] / m];
    let cov = |p: usize, q: usize, s: f64| s / m - mean[p] * mean[q];
    let sigma = [
        [cov(0, 0, sums[3]), cov(0, 1, sums[4]), cov(0, 2, sums[5])],
        [cov(0, 1, sums[4]), cov(1, 1, sums[6]), cov(1, 2, sums[7])],
        [cov(0, 2, sums[5]), cov(1, 2, sums[7]), cov(2, 2, sums[8])],
    ];
    let var = mean[2] - mean[1] * mean[1] + kind.noise_variance();
    if var <= 0.0 {
        return Err(Error::DegenerateVariance { value: var });
    }
    let value = mean[0] / var;
    let grad = [
        1.0 / var,
        2.0 * mean[0] * mean[1] / (var * var),
        -mean[0] / (var * var),
    ];
    let mut avar = 0.0;
    for p in 0..3 {
        for q in 0..3 {
            avar += grad[p] * sigma[p][q] * grad[q];
        }
    }
    let se = (avar.max(0.0) / m).sqrt();
    Ok(OracleValue {
        estimand: *estimand,
        true_value: value,
        method: OracleMethod::MonteCarlo { draws, seed },
        numeric_error_bound: 3.0 * se,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NuisanceMode {
    /// Inject the exact nuisances of the generating process.
    True,
    Estimated {
        learner: LearnerConfig,
    },
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub dgp: DgpKind,
    pub n: usize,
    pub methods: Vec<Method>,
    pub estimands: Vec<EstimandSpec>,
    pub trials: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_folds() -> usize {
    5
}

fn default_nuisance() -> NuisanceMode {
    NuisanceMode::True
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub cells: Vec<StudyCell>,
    #[serde(default = "default_nuisance")]
    pub nuisance: NuisanceMode,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    /// Record wall-clock seconds per cell (makes output non-reproducible).
    #[serde(default)]
    pub timing: bool,
}

/// The true-nuisance grid over sample sizes for the three estimands of the
/// polynomial design, both one-step methods.
pub fn figure1_preset(trials: usize, n_grid: &[usize], seed: u64) -> StudyConfig {
    let estimands = vec![
        EstimandSpec::total([2]),
        EstimandSpec::total([0, 2]),
        EstimandSpec::interaction(0, 2),
    ];
    StudyConfig {
        cells: n_grid
            .iter()
            .map(|&n| StudyCell {
                dgp: DgpKind::paper(1.0),
                n,
                methods: vec![Method::OneStepIf, Method::OneStepEif],
                estimands: estimands.clone(),
                trials,
                alpha: 0.05,
            })
            .collect(),
        nuisance: NuisanceMode::True,
        folds: 5,
        seed,
        timing: false,
    }
}

pub const FIGURE1_N_GRID: [usize; 5] = [250, 500, 1000, 2000, 4000];

/// One trial's estimate of one (method, estimand) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialEstimate {
    pub point: f64,
    pub ci: Option<[f64; 2]>,
}

/// All trials of a cell: `estimates[method][estimand][trial]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTrials {
    pub oracle: Vec<f64>,
    pub estimates: Vec<Vec<Vec<TrialEstimate>>>,
    pub seconds: f64,
}

fn cell_label(index: usize, cell: &StudyCell) -> String {
    format!("#{index} {} n={}", cell.dgp.label(), cell.n)
}

/// Run every trial of one cell. Trial `t` draws from seed
/// `derive_seed(master, [cell_index, t])`.
pub fn simulate_cell(
    cell: &StudyCell,
    cell_index: usize,
    nuisance: &NuisanceMode,
    folds: usize,
    master_seed: u64,
) -> Result<CellTrials> {
    let label = cell_label(cell_index, cell);
    let fail = |e: Error| Error::StudyCell {
        cell: label.clone(),
        reason: e.to_string(),
    };
    if cell.trials == 0 {
        return Err(fail(Error::InvalidConfig(
            "trials must be at least 1".into(),
        )));
    }
    let oracle: Vec<f64> = cell
        .estimands
        .iter()
        .map(|e| oracle_xi(&cell.dgp, e).map(|o| o.true_value))
        .collect::<Result<_>>()
        .map_err(fail)?;
    let start = Instant::now();
    let per_trial: Vec<Vec<Vec<TrialEstimate>>> = (0..cell.trials)
        .into_par_iter()
        .map(|t| {
            let trial_seed = derive_seed(master_seed, &[cell_index as u64, t as u64]);
            run_trial(cell, nuisance, folds, trial_seed)
        })
        .collect::<Result<_>>()
        .map_err(fail)?;
    let seconds = start.elapsed().as_secs_f64();
    let estimates = (0..cell.methods.len())
        .map(|m| {
            (0..cell.estimands.len())
                .map(|e| per_trial.iter().map(|t| t[m][e]).collect())
                .collect()
        })
        .collect();
    Ok(CellTrials {
        oracle,
        estimates,
        seconds,
    })
}

fn run_trial(
    cell: &StudyCell,
    nuisance: &NuisanceMode,
    folds: usize,
    seed: u64,
) -> Result<Vec<Vec<TrialEstimate>>> {
    let gen = generate(&DgpSpec {
        kind: cell.dgp.clone(),
        n: cell.n,
        seed: derive_seed(seed, &[0]),
    })?;
    let plan = make_fold_plan(cell.n, folds, derive_seed(seed, &[1]))?;
    let fits = match nuisance {
        NuisanceMode::True => {
            let fit = gen.truth.fit();
            (0..folds).map(|l| fit.clone().with_fold(l)).collect()
        }
        NuisanceMode::Estimated { learner } => {
            let learner = LearnerConfig {
                mc_seed: derive_seed(seed, &[2]),
                ..learner.clone()
            };
            fit_all_folds(&gen.data, &plan, &learner)?
        }
    };
    cell.methods
        .iter()
        .map(|&method| {
            cell.estimands
                .iter()
                .map(|spec| {
                    let est =
                        estimate_with_fits(&gen.data, &plan, &fits, spec, method, cell.alpha)?;
                    Ok(TrialEstimate {
                        point: est.report.point,
                        ci: est.report.ci,
                    })
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub dgp: String,
    pub sigma: Option<f64>,
    pub n: usize,
    pub method: Method,
    pub estimand: EstimandSpec,
    pub trials: usize,
    pub oracle: f64,
    pub bias: f64,
    pub sd_sqrt_n: f64,
    pub coverage: Option<f64>,
    pub mean_ci_width: Option<f64>,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
}

/// Sample standard deviation (divisor `len - 1`; zero for a single value).
pub fn sample_sd(values: &[f64]) -> f64 {
    let len = values.len();
    if len < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / len as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (len - 1) as f64).sqrt()
}

pub fn summarize_cell(cell: &StudyCell, trials: &CellTrials, timing: bool) -> Vec<StudyRow> {
    let mut rows = Vec::new();
    for (m, method) in cell.methods.iter().enumerate() {
        for (e, spec) in cell.estimands.iter().enumerate() {
            let est = &trials.estimates[m][e];
            let truth = trials.oracle[e];
            let points: Vec<f64> = est.iter().map(|t| t.point).collect();
            let count = points.len() as f64;
            let mean = points.iter().sum::<f64>() / count;
            let cis: Vec<[f64; 2]> = est.iter().filter_map(|t| t.ci).collect();
            let (coverage, width) = if cis.is_empty() {
                (None, None)
            } else {
                let c = cis
                    .iter()
                    .filter(|c| c[0] <= truth && truth <= c[1])
                    .count() as f64
                    / cis.len() as f64;
                let w = cis.iter().map(|c| c[1] - c[0]).sum::<f64>() / cis.len() as f64;
                (Some(c), Some(w))
            };
            rows.push(StudyRow {
                dgp: cell.dgp.label().to_string(),
                sigma: cell.dgp.sigma(),
                n: cell.n,
                method: *method,
                estimand: *spec,
                trials: est.len(),
                oracle: truth,
                bias: mean - truth,
                sd_sqrt_n: sample_sd(&points) * (cell.n as f64).sqrt(),
                coverage,
                mean_ci_width: width,
                seconds: timing.then_some(trials.seconds),
            });
        }
    }
    rows
}

/// Run every cell in order and aggregate.
pub fn run_study(config: &StudyConfig) -> Result<StudyResult> {
    if config.cells.is_empty() {
        return Err(Error::InvalidConfig("study grid is empty".into()));
    }
    for cell in &config.cells {
        cell.dgp.validate()?;
        for e in &cell.estimands {
            e.validate(cell.dgp.num_factors())?;
        }
    }
    let mut rows = Vec::new();
    for (i, cell) in config.cells.iter().enumerate() {
        let trials = simulate_cell(cell, i, &config.nuisance, config.folds, config.seed)?;
        log::info!(
            "study cell {} done in {:.2}s",
            cell_label(i, cell),
            trials.seconds
        );
        rows.extend(summarize_cell(cell, &trials, config.timing));
    }
    Ok(StudyResult { rows })
}

impl StudyResult {
    pub const CSV_HEADER: [&'static str; 11] = [
        "dgp",
        "sigma",
        "n",
        "method",
        "estimand",
        "trials",
        "bias",
        "sd_sqrt_n",
        "coverage",
        "mean_ci_width",
        "seconds",
    ];

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.dgp.clone(),
                opt(r.sigma),
                r.n.to_string(),
                r.method.to_string(),
                r.estimand.to_string(),
                r.trials.to_string(),
                r.bias.to_string(),
                r.sd_sqrt_n.to_string(),
                opt(r.coverage),
                opt(r.mean_ci_width),
                opt(r.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Fixed-width text table for terminals.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<18} {:>6} {:>6} {:<7} {:<16} {:>7} {:>10} {:>10} {:>9}\n",
            "dgp", "sigma", "n", "method", "estimand", "trials", "bias", "sd*sqrt(n)", "coverage"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<18} {:>6} {:>6} {:<7} {:<16} {:>7} {:>10.5} {:>10.4} {:>9}\n",
                r.dgp,
                r.sigma.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                r.n,
                r.method.to_string(),
                r.estimand.to_string(),
                r.trials,
                r.bias,
                r.sd_sqrt_n,
                r.coverage
                    .map(|c| format!("{c:.3}"))
                    .unwrap_or_else(|| "-".into()),
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let spec = DgpSpec {
            kind: DgpKind::paper(1.0),
            n: 5,
            seed: 11,
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.data.n(), 5);
        let c = generate(&DgpSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn true_mu_at_ones() {
        let t = TrueNuisance::of(&DgpKind::paper(1.0)).fit();
        assert_eq!(t.mu(&[1.0, 1.0, 1.0]), 5.0);
        assert_eq!(t.nu(&[1.0, 1.0, 1.0]), 25.5);
        assert!(t.model().num_factors() == 3);
    }

    #[test]
    fn additive_gaussian_oracles() {
        let g = DgpKind::AdditiveGaussian;
        assert_eq!(
            oracle_xi(&g, &EstimandSpec::interaction(0, 1))
                .unwrap()
                .true_value,
            0.0
        );
        let t = oracle_xi(&g, &EstimandSpec::total([0])).unwrap().true_value;
        assert!((t - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn noise_spec_labels() {
        assert_eq!(NoiseSpec::Sd(0.5).variance(), 0.25);
        assert_eq!(NoiseSpec::default().variance(), 0.5);
        let k: DgpKind =
            serde_json::from_str(r#"{"kind":"paper_polynomial","sigma":1.0,"noise":{"sd":1.0}}"#)
                .unwrap();
        assert_eq!(k.noise_variance(), 1.0);
    }
}
