//! Cell-mean learner for all-discrete designs: `mu` and `nu` are the means of
//! `Y` and `Y^2` within each factor-level cell, marginals are empirical level
//! frequencies. Integrals enumerate the level product when it is small enough
//! and fall back to seeded Monte Carlo otherwise.

use std::collections::HashMap;

use rand::Rng as _;

use crate::data::{Dataset, FactorKind};
use crate::error::{Error, Result};
use crate::estimand::FactorSet;
use crate::seed::{derive_seed, derived_rng};

use super::{BlockModel, IntegrationMode, LearnerConfig, MarginalEstimate, NuisanceModel};

/// Tag mixed into the seed of the model-level (block independent) draws.
const MODEL_DRAWS_TAG: u64 = u64::MAX;

pub(crate) struct CellFit {
    pub model: CellMeanModel,
    pub marginals: Vec<MarginalEstimate>,
    pub integration: IntegrationMode,
    pub diagnostics: Vec<String>,
}

#[derive(Debug)]
pub struct CellMeanModel {
    levels: Vec<usize>,
    probs: Vec<Vec<f64>>,
    fallback_mu: f64,
    fallback_nu: f64,
    store: Store,
    mean_y: f64,
    second_y: f64,
    /// `E[(Y - E[Y])^2 | W_k = level]`, indexed `[k][level]`.
    centered_sq: Vec<Vec<f64>>,
}

#[derive(Debug)]
enum Store {
    Dense(Dense),
    Sampled(Sampled),
}

#[derive(Debug)]
struct Dense {
    strides: Vec<usize>,
    mu: Vec<f64>,
    nu: Vec<f64>,
    observed: Vec<bool>,
    /// Product-measure weight of each cell.
    weight: Vec<f64>,
    /// Weight of each cell with factor `k` left out, indexed `[k][cell]`.
    weight_without: Vec<Vec<f64>>,
}

#[derive(Debug)]
struct Sampled {
    shifts: Vec<u32>,
    /// Cell key to `(mu, nu)`.
    cells: HashMap<u128, (f64, f64)>,
    draws: usize,
    seed: u64,
    /// Training values of each factor, resampled to draw from the marginal.
    columns: Vec<Vec<u16>>,
}

fn code_of(x: f64, levels: usize) -> Option<usize> {
    if x >= 0.0 && x.fract() == 0.0 && (x as usize) < levels {
        Some(x as usize)
    } else {
        None
    }
}

impl Dense {
    fn new(
        levels: &[usize],
        probs: &[Vec<f64>],
        mu: Vec<f64>,
        nu: Vec<f64>,
        observed: Vec<bool>,
    ) -> Self {
        let k = levels.len();
        let mut strides = vec![1; k];
        for j in (0..k.saturating_sub(1)).rev() {
            strides[j] = strides[j + 1] * levels[j + 1];
        }
        let cells = mu.len();
        let code = |c: usize, j: usize| (c / strides[j]) % levels[j];
        let weight: Vec<f64> = (0..cells)
            .map(|c| (0..k).map(|j| probs[j][code(c, j)]).product())
            .collect();
        let weight_without = (0..k)
            .map(|skip| {
                (0..cells)
                    .map(|c| {
                        (0..k)
                            .filter(|&j| j != skip)
                            .map(|j| probs[j][code(c, j)])
                            .product()
                    })
                    .collect()
            })
            .collect();
        Dense {
            strides,
            mu,
            nu,
            observed,
            weight,
            weight_without,
        }
    }

    fn code(&self, c: usize, j: usize, levels: &[usize]) -> usize {
        (c / self.strides[j]) % levels[j]
    }

    fn index(&self, w: &[f64], levels: &[usize], skip: FactorSet) -> Option<usize> {
        let mut c = 0;
        for (j, &l) in levels.iter().enumerate() {
            if skip.contains(j) {
                continue;
            }
            c += code_of(w[j], l)? * self.strides[j];
        }
        Some(c)
    }

    /// Replace `table` by its average over factor `j`, broadcast along that axis.
    fn contract(&self, table: &mut [f64], j: usize, levels: &[usize], probs: &[f64]) {
        let stride = self.strides[j];
        for c in 0..table.len() {
            if self.code(c, j, levels) != 0 {
                continue;
            }
            let s: f64 = (0..levels[j])
                .map(|a| probs[a] * table[c + a * stride])
                .sum();
            for a in 0..levels[j] {
                table[c + a * stride] = s;
            }
        }
    }

    /// `sum over cells with W_k = a of weight_without[k] * f`, for every level `a`.
    fn given_factor(&self, k: usize, levels: &[usize], f: impl Fn(usize) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; levels[k]];
        for (c, w) in self.weight_without[k].iter().enumerate() {
            out[self.code(c, k, levels)] += w * f(c);
        }
        out
    }
}

impl Sampled {
    fn key(&self, codes: &[u16]) -> u128 {
        codes
            .iter()
            .zip(&self.shifts)
            .fold(0u128, |acc, (&c, &s)| acc | (u128::from(c) << s))
    }

    fn draw_set(&self, seed: u64) -> Vec<Vec<u16>> {
        let mut rng = derived_rng(seed, &[]);
        (0..self.draws)
            .map(|_| {
                self.columns
                    .iter()
                    .map(|col| col[rng.random_range(0..col.len())])
                    .collect()
            })
            .collect()
    }
}

impl CellMeanModel {
    /// Model from explicit cell tables in row-major order (first factor
    /// slowest); cells flagged unobserved fall back to the weighted means.
    pub fn from_table(
        levels: Vec<usize>,
        probs: Vec<Vec<f64>>,
        mu: Vec<f64>,
        nu: Vec<f64>,
    ) -> Result<Self> {
        let cells: usize = levels.iter().product();
        if mu.len() != cells || nu.len() != cells || probs.len() != levels.len() {
            return Err(Error::InvalidConfig(
                "cell table does not match the level counts".into(),
            ));
        }
        for (p, &l) in probs.iter().zip(&levels) {
            if p.len() != l {
                return Err(Error::InvalidConfig(
                    "probability table does not match the level counts".into(),
                ));
            }
        }
        let dense = Dense::new(&levels, &probs, mu, nu, vec![true; cells]);
        let fallback_mu = dense.weight.iter().zip(&dense.mu).map(|(w, m)| w * m).sum();
        let fallback_nu = dense.weight.iter().zip(&dense.nu).map(|(w, m)| w * m).sum();
        Ok(Self::finish(
            levels,
            probs,
            fallback_mu,
            fallback_nu,
            Store::Dense(dense),
        ))
    }

    fn finish(
        levels: Vec<usize>,
        probs: Vec<Vec<f64>>,
        fallback_mu: f64,
        fallback_nu: f64,
        store: Store,
    ) -> Self {
        let mut model = CellMeanModel {
            levels,
            probs,
            fallback_mu,
            fallback_nu,
            store,
            mean_y: 0.0,
            second_y: 0.0,
            centered_sq: Vec::new(),
        };
        model.precompute();
        model
    }

    fn precompute(&mut self) {
        let k = self.levels.len();
        match &self.store {
            Store::Dense(d) => {
                let mean: f64 = d.weight.iter().zip(&d.mu).map(|(w, m)| w * m).sum();
                let second: f64 = d.weight.iter().zip(&d.nu).map(|(w, m)| w * m).sum();
                let centered: Vec<f64> =
                    d.mu.iter()
                        .zip(&d.nu)
                        .map(|(m, v)| v - 2.0 * mean * m + mean * mean)
                        .collect();
                self.mean_y = mean;
                self.second_y = second;
                self.centered_sq = (0..k)
                    .map(|j| d.given_factor(j, &self.levels, |c| centered[c]))
                    .collect();
            }
            Store::Sampled(s) => {
                let draws = s.draw_set(derive_seed(s.seed, &[MODEL_DRAWS_TAG]));
                let m = draws.len() as f64;
                let (mut mean, mut second) = (0.0, 0.0);
                for d in &draws {
                    let (mu, nu) = self.lookup_codes(s, d);
                    mean += mu;
                    second += nu;
                }
                mean /= m;
                second /= m;
                let mut centered_sq = Vec::with_capacity(k);
                let mut buf = Vec::new();
                for j in 0..k {
                    let per_level = (0..self.levels[j])
                        .map(|a| {
                            draws
                                .iter()
                                .map(|d| {
                                    buf.clone_from(d);
                                    buf[j] = a as u16;
                                    let (mu, nu) = self.lookup_codes(s, &buf);
                                    nu - 2.0 * mean * mu + mean * mean
                                })
                                .sum::<f64>()
                                / m
                        })
                        .collect();
                    centered_sq.push(per_level);
                }
                self.mean_y = mean;
                self.second_y = second;
                self.centered_sq = centered_sq;
            }
        }
    }

    fn lookup_codes(&self, s: &Sampled, codes: &[u16]) -> (f64, f64) {
        s.cells
            .get(&s.key(codes))
            .copied()
            .unwrap_or((self.fallback_mu, self.fallback_nu))
    }

    fn codes(&self, w: &[f64]) -> Option<Vec<u16>> {
        self.levels
            .iter()
            .enumerate()
            .map(|(j, &l)| code_of(w[j], l).map(|c| c as u16))
            .collect()
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn is_enumerated(&self) -> bool {
        matches!(self.store, Store::Dense(_))
    }
}

impl NuisanceModel for CellMeanModel {
    fn num_factors(&self) -> usize {
        self.levels.len()
    }

    fn mu(&self, w: &[f64]) -> f64 {
        match &self.store {
            Store::Dense(d) => d
                .index(w, &self.levels, FactorSet::empty())
                .map_or(self.fallback_mu, |c| d.mu[c]),
            Store::Sampled(s) => self
                .codes(w)
                .map_or(self.fallback_mu, |c| self.lookup_codes(s, &c).0),
        }
    }

    fn nu(&self, w: &[f64]) -> f64 {
        match &self.store {
            Store::Dense(d) => d
                .index(w, &self.levels, FactorSet::empty())
                .map_or(self.fallback_nu, |c| d.nu[c]),
            Store::Sampled(s) => self
                .codes(w)
                .map_or(self.fallback_nu, |c| self.lookup_codes(s, &c).1),
        }
    }

    fn mean_y(&self) -> f64 {
        self.mean_y
    }

    fn second_moment_y(&self) -> f64 {
        self.second_y
    }

    fn centered_square_given(&self, k: usize, w_k: f64) -> f64 {
        code_of(w_k, self.levels[k]).map_or(self.second_y - self.mean_y * self.mean_y, |a| {
            self.centered_sq[k][a]
        })
    }

    fn block(&self, excluded: FactorSet) -> Box<dyn BlockModel + '_> {
        match &self.store {
            Store::Dense(d) => Box::new(DenseBlock::new(self, d, excluded)),
            Store::Sampled(s) => Box::new(SampledBlock::new(self, s, excluded)),
        }
    }

    fn in_support(&self, w: &[f64]) -> bool {
        match &self.store {
            Store::Dense(d) => d
                .index(w, &self.levels, FactorSet::empty())
                .is_some_and(|c| d.observed[c]),
            Store::Sampled(s) => self
                .codes(w)
                .is_some_and(|c| s.cells.contains_key(&s.key(&c))),
        }
    }
}

struct DenseBlock<'a> {
    model: &'a CellMeanModel,
    dense: &'a Dense,
    excluded: FactorSet,
    cond_mean: Vec<f64>,
    numerator: f64,
    mu_times: Vec<Vec<f64>>,
    excl_sq: Vec<Option<Vec<f64>>>,
}

impl<'a> DenseBlock<'a> {
    fn new(model: &'a CellMeanModel, d: &'a Dense, excluded: FactorSet) -> Self {
        let levels = &model.levels;
        let mut m = d.mu.clone();
        for j in excluded.iter() {
            d.contract(&mut m, j, levels, &model.probs[j]);
        }
        let numerator = d.weight.iter().zip(&m).map(|(w, v)| w * v * v).sum();
        let k = levels.len();
        let mu_times = (0..k)
            .map(|j| d.given_factor(j, levels, |c| d.mu[c] * m[c]))
            .collect();
        let excl_sq = (0..k)
            .map(|j| (!excluded.contains(j)).then(|| d.given_factor(j, levels, |c| m[c] * m[c])))
            .collect();
        DenseBlock {
            model,
            dense: d,
            excluded,
            cond_mean: m,
            numerator,
            mu_times,
            excl_sq,
        }
    }
}

impl BlockModel for DenseBlock<'_> {
    fn excluded(&self) -> FactorSet {
        self.excluded
    }

    fn conditional_mean(&self, w: &[f64]) -> f64 {
        self.dense
            .index(w, &self.model.levels, self.excluded)
            .map_or(self.model.fallback_mu, |c| self.cond_mean[c])
    }

    fn numerator(&self) -> f64 {
        self.numerator
    }

    fn mu_times_excluded_given(&self, k: usize, w_k: f64) -> f64 {
        code_of(w_k, self.model.levels[k]).map_or(0.0, |a| self.mu_times[k][a])
    }

    fn excluded_squared_given(&self, k: usize, w_k: f64) -> f64 {
        match &self.excl_sq[k] {
            Some(v) => code_of(w_k, self.model.levels[k]).map_or(0.0, |a| v[a]),
            None => self.numerator,
        }
    }
}

/// Pick-freeze Monte Carlo: `a` and `b` are independent draw sets, and the
/// excluded coordinates of `a` are swapped for those of `b` to integrate them out.
struct SampledBlock<'a> {
    model: &'a CellMeanModel,
    sampled: &'a Sampled,
    excluded: FactorSet,
    a: Vec<Vec<u16>>,
    b: Vec<Vec<u16>>,
    numerator: f64,
    numerator_se: f64,
}

impl<'a> SampledBlock<'a> {
    fn new(model: &'a CellMeanModel, s: &'a Sampled, excluded: FactorSet) -> Self {
        let base = derive_seed(s.seed, &[excluded.bits()]);
        let a = s.draw_set(derive_seed(base, &[0]));
        let b = s.draw_set(derive_seed(base, &[1]));
        let mut block = SampledBlock {
            model,
            sampled: s,
            excluded,
            a,
            b,
            numerator: 0.0,
            numerator_se: 0.0,
        };
        let terms: Vec<f64> = (0..block.a.len())
            .map(|i| {
                let mixed = block.mixed(i, None);
                block.mu(&block.a[i]) * block.mu(&mixed)
            })
            .collect();
        let m = terms.len() as f64;
        let mean = terms.iter().sum::<f64>() / m;
        let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (m - 1.0);
        block.numerator = mean;
        block.numerator_se = (var / m).sqrt();
        block
    }

    fn mu(&self, codes: &[u16]) -> f64 {
        self.model.lookup_codes(self.sampled, codes).0
    }

    /// Draw `i` of `a` with excluded coordinates from `b` and optionally one
    /// coordinate pinned.
    fn mixed(&self, i: usize, pin: Option<(usize, u16)>) -> Vec<u16> {
        let mut out = self.a[i].clone();
        for j in self.excluded.iter() {
            out[j] = self.b[i][j];
        }
        if let Some((k, v)) = pin {
            out[k] = v;
        }
        out
    }
}

impl BlockModel for SampledBlock<'_> {
    fn excluded(&self) -> FactorSet {
        self.excluded
    }

    fn conditional_mean(&self, w: &[f64]) -> f64 {
        let mut codes = Vec::with_capacity(w.len());
        for (j, &l) in self.model.levels.iter().enumerate() {
            if self.excluded.contains(j) {
                codes.push(0);
            } else {
                match code_of(w[j], l) {
                    Some(c) => codes.push(c as u16),
                    None => return self.model.fallback_mu,
                }
            }
        }
        let total: f64 = self
            .b
            .iter()
            .map(|d| {
                for j in self.excluded.iter() {
                    codes[j] = d[j];
                }
                self.mu(&codes)
            })
            .sum();
        total / self.b.len() as f64
    }

    fn numerator(&self) -> f64 {
        self.numerator
    }

    fn numerator_std_error(&self) -> Option<f64> {
        Some(self.numerator_se)
    }

    fn mu_times_excluded_given(&self, k: usize, w_k: f64) -> f64 {
        let Some(v) = code_of(w_k, self.model.levels[k]) else {
            return 0.0;
        };
        let v = v as u16;
        let total: f64 = (0..self.a.len())
            .map(|i| {
                let mut left = self.a[i].clone();
                left[k] = v;
                let right = if self.excluded.contains(k) {
                    self.mixed(i, None)
                } else {
                    self.mixed(i, Some((k, v)))
                };
                self.mu(&left) * self.mu(&right)
            })
            .sum();
        total / self.a.len() as f64
    }

    fn excluded_squared_given(&self, k: usize, w_k: f64) -> f64 {
        if self.excluded.contains(k) {
            return self.numerator;
        }
        let Some(v) = code_of(w_k, self.model.levels[k]) else {
            return 0.0;
        };
        let v = v as u16;
        let total: f64 = (0..self.a.len())
            .map(|i| {
                let mut left = self.a[i].clone();
                left[k] = v;
                self.mu(&left) * self.mu(&self.mixed(i, Some((k, v))))
            })
            .sum();
        total / self.a.len() as f64
    }
}

pub(crate) fn fit(
    data: &Dataset,
    train: &[usize],
    tag: u64,
    cfg: &LearnerConfig,
) -> Result<CellFit> {
    let k = data.num_factors();
    let mut levels = Vec::with_capacity(k);
    for f in data.factors() {
        match &f.kind {
            FactorKind::Discrete { levels: l } => levels.push(l.len()),
            FactorKind::Continuous => {
                return Err(Error::LearnerMismatch {
                    learner: "cellmean".into(),
                    reason: format!("factor '{}' is continuous", f.name),
                })
            }
        }
    }
    if train.is_empty() {
        return Err(Error::TooFewObservations {
            n: data.n(),
            folds: 0,
        });
    }
    let n_train = train.len() as f64;
    let y = data.outcome();
    let fallback_mu = train.iter().map(|&i| y[i]).sum::<f64>() / n_train;
    let fallback_nu = train.iter().map(|&i| y[i] * y[i]).sum::<f64>() / n_train;

    let mut probs: Vec<Vec<f64>> = levels.iter().map(|&l| vec![0.0; l]).collect();
    for (j, p) in probs.iter_mut().enumerate() {
        let col = data.column(j);
        for &i in train {
            p[col[i] as usize] += 1.0;
        }
        p.iter_mut().for_each(|v| *v /= n_train);
    }
    let marginals = probs
        .iter()
        .enumerate()
        .map(|(j, p)| MarginalEstimate::Discrete {
            factor: j,
            probs: p.clone(),
        })
        .collect();

    let cells = levels
        .iter()
        .try_fold(1usize, |acc, &l| acc.checked_mul(l))
        .unwrap_or(usize::MAX);
    let mut diagnostics = Vec::new();
    let enumerate = !cfg.force_monte_carlo && cells <= cfg.enumeration_limit;
    let (store, integration) = if enumerate {
        let mut sum = vec![0.0; cells];
        let mut sum_sq = vec![0.0; cells];
        let mut count = vec![0usize; cells];
        let mut strides = vec![1; k];
        for j in (0..k.saturating_sub(1)).rev() {
            strides[j] = strides[j + 1] * levels[j + 1];
        }
        for &i in train {
            let c: usize = (0..k)
                .map(|j| data.column(j)[i] as usize * strides[j])
                .sum();
            sum[c] += y[i];
            sum_sq[c] += y[i] * y[i];
            count[c] += 1;
        }
        let observed: Vec<bool> = count.iter().map(|&c| c > 0).collect();
        let mu = (0..cells)
            .map(|c| {
                if count[c] > 0 {
                    sum[c] / count[c] as f64
                } else {
                    fallback_mu
                }
            })
            .collect();
        let nu = (0..cells)
            .map(|c| {
                if count[c] > 0 {
                    sum_sq[c] / count[c] as f64
                } else {
                    fallback_nu
                }
            })
            .collect();
        let empty = observed.iter().filter(|o| !**o).count();
        if empty > 0 {
            log::debug!(
                "cellmean: {empty} of {cells} cells empty in training fold, using global mean"
            );
            diagnostics.push(format!(
                "EmptyCell: {empty} of {cells} cells have no training observations"
            ));
        }
        (
            Store::Dense(Dense::new(&levels, &probs, mu, nu, observed)),
            IntegrationMode::ExactEnumeration,
        )
    } else {
        let bits: Vec<u32> = levels
            .iter()
            .map(|&l| usize::BITS - (l.max(2) - 1).leading_zeros())
            .collect();
        if bits.iter().sum::<u32>() > 128 || levels.iter().any(|&l| l > usize::from(u16::MAX)) {
            return Err(Error::InvalidConfig(
                "level product too large for Monte Carlo cell keys".into(),
            ));
        }
        let shifts: Vec<u32> = bits
            .iter()
            .scan(0u32, |acc, &b| {
                let s = *acc;
                *acc += b;
                Some(s)
            })
            .collect();
        let columns: Vec<Vec<u16>> = (0..k)
            .map(|j| train.iter().map(|&i| data.column(j)[i] as u16).collect())
            .collect();
        let seed = derive_seed(cfg.mc_seed, &[tag]);
        let mut s = Sampled {
            shifts,
            cells: HashMap::new(),
            draws: cfg.mc_draws,
            seed,
            columns,
        };
        let mut acc: HashMap<u128, (f64, f64, usize)> = HashMap::new();
        let mut codes = vec![0u16; k];
        for &i in train {
            for (j, c) in codes.iter_mut().enumerate() {
                *c = data.column(j)[i] as u16;
            }
            let e = acc.entry(s.key(&codes)).or_insert((0.0, 0.0, 0));
            e.0 += y[i];
            e.1 += y[i] * y[i];
            e.2 += 1;
        }
        s.cells = acc
            .into_iter()
            .map(|(key, (a, b, c))| (key, (a / c as f64, b / c as f64)))
            .collect();
        diagnostics.push(format!(
            "MonteCarlo integration: {} draws over {} observed of {} cells",
            cfg.mc_draws,
            s.cells.len(),
            if cells == usize::MAX {
                "many".to_string()
            } else {
                cells.to_string()
            }
        ));
        (
            Store::Sampled(s),
            IntegrationMode::MonteCarlo {
                draws: cfg.mc_draws,
                seed,
            },
        )
    };
    let model = CellMeanModel::finish(levels, probs, fallback_mu, fallback_nu, store);
    Ok(CellFit {
        model,
        marginals,
        integration,
        diagnostics,
    })
}
