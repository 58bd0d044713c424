//! Surfaces written as finite sums of products of univariate basis
//! functions, `f(w) = sum_t c_t prod_k b_{k, a_tk}(w_k)`.
//!
//! Under a product measure every integral of such a surface factorizes into
//! per-factor moments `E[b_{k,a}(W_k)]`, so conditional means, block
//! numerators and the per-factor conditional moments are exact. Each factor's
//! basis is closed under multiplication up to zero (powers add exponents,
//! indicators of distinct levels annihilate), which keeps products of
//! surfaces in the same representation.

use std::collections::BTreeMap;

use crate::estimand::FactorSet;

use super::{BlockModel, NuisanceModel};

/// Univariate basis of one factor. Index 0 is always the constant 1.
#[derive(Clone, Debug, PartialEq)]
pub enum Basis {
    /// `b_a(x) = ((x - center) / scale)^a`.
    Powers { center: f64, scale: f64 },
    /// `b_j(x) = 1{x == j}` for level codes `j >= 1`; level 0 is the
    /// reference and has no indicator of its own.
    Indicators { levels: usize },
}

impl Basis {
    pub fn standard_powers() -> Self {
        Basis::Powers {
            center: 0.0,
            scale: 1.0,
        }
    }

    #[inline]
    pub fn eval(&self, a: u16, x: f64) -> f64 {
        if a == 0 {
            return 1.0;
        }
        match *self {
            Basis::Powers { center, scale } => ((x - center) / scale).powi(i32::from(a)),
            Basis::Indicators { .. } => {
                if x == f64::from(a) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Index of `b_a * b_b`, or `None` when the product vanishes.
    #[inline]
    pub fn product(&self, a: u16, b: u16) -> Option<u16> {
        if a == 0 {
            return Some(b);
        }
        if b == 0 {
            return Some(a);
        }
        match self {
            Basis::Powers { .. } => Some(a + b),
            Basis::Indicators { .. } => (a == b).then_some(a),
        }
    }
}

/// A factor's distribution seen through its basis: `moment(a) = E[b_a(W_k)]`.
#[derive(Clone, Debug, PartialEq)]
pub enum BasisMarginal {
    /// Empirical distribution of transformed values `(x - center) / scale`.
    Sample { moments: Vec<f64>, values: Vec<f64> },
    /// Level probabilities (indexed by level code).
    Levels { probs: Vec<f64> },
    /// Uniform(-1, 1).
    Uniform,
    /// Normal(0, 1).
    StandardNormal,
}

impl BasisMarginal {
    /// Empirical marginal; power moments up to `max_power` are tabulated.
    pub fn sample(values: Vec<f64>, max_power: u16) -> Self {
        let n = values.len().max(1) as f64;
        let mut moments = vec![0.0; usize::from(max_power) + 1];
        for &v in &values {
            let mut p = 1.0;
            for m in moments.iter_mut() {
                *m += p;
                p *= v;
            }
        }
        for m in moments.iter_mut() {
            *m /= n;
        }
        BasisMarginal::Sample { moments, values }
    }

    pub fn moment(&self, a: u16) -> f64 {
        if a == 0 {
            return 1.0;
        }
        match self {
            BasisMarginal::Sample { moments, values } => match moments.get(usize::from(a)) {
                Some(m) => *m,
                None => {
                    values.iter().map(|v| v.powi(i32::from(a))).sum::<f64>()
                        / values.len().max(1) as f64
                }
            },
            BasisMarginal::Levels { probs } => probs.get(usize::from(a)).copied().unwrap_or(0.0),
            BasisMarginal::Uniform => {
                if a % 2 == 1 {
                    0.0
                } else {
                    1.0 / f64::from(a + 1)
                }
            }
            BasisMarginal::StandardNormal => {
                if a % 2 == 1 {
                    0.0
                } else {
                    // (a - 1)!!
                    (1..a).step_by(2).map(f64::from).product()
                }
            }
        }
    }
}

/// Coefficients keyed by per-factor basis indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Expansion {
    num_factors: usize,
    terms: BTreeMap<Vec<u16>, f64>,
}

impl Expansion {
    pub fn zero(num_factors: usize) -> Self {
        Expansion {
            num_factors,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(num_factors: usize, c: f64) -> Self {
        let mut e = Self::zero(num_factors);
        e.add_term(vec![0; num_factors], c);
        e
    }

    pub fn num_factors(&self) -> usize {
        self.num_factors
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u16], f64)> {
        self.terms.iter().map(|(k, v)| (k.as_slice(), *v))
    }

    pub fn add_term(&mut self, index: Vec<u16>, coef: f64) {
        debug_assert_eq!(index.len(), self.num_factors);
        if coef != 0.0 {
            *self.terms.entry(index).or_insert(0.0) += coef;
        }
    }

    pub fn add(&self, other: &Expansion) -> Expansion {
        let mut out = self.clone();
        for (idx, c) in &other.terms {
            out.add_term(idx.clone(), *c);
        }
        out
    }

    pub fn scale(&self, s: f64) -> Expansion {
        let mut out = Self::zero(self.num_factors);
        for (idx, c) in &self.terms {
            out.add_term(idx.clone(), c * s);
        }
        out
    }

    pub fn mul(&self, other: &Expansion, bases: &[Basis]) -> Expansion {
        let mut out = Self::zero(self.num_factors);
        for (ia, ca) in &self.terms {
            for (ib, cb) in &other.terms {
                let idx: Option<Vec<u16>> = (0..self.num_factors)
                    .map(|k| bases[k].product(ia[k], ib[k]))
                    .collect();
                if let Some(idx) = idx {
                    out.add_term(idx, ca * cb);
                }
            }
        }
        out
    }

    /// Integrate the factors in `over` against their marginals.
    pub fn integrate(&self, over: FactorSet, marginals: &[BasisMarginal]) -> Expansion {
        let mut out = Self::zero(self.num_factors);
        for (idx, c) in &self.terms {
            let mut coef = *c;
            let mut new_idx = idx.clone();
            for k in over.iter().filter(|&k| k < self.num_factors) {
                if idx[k] != 0 {
                    coef *= marginals[k].moment(idx[k]);
                    new_idx[k] = 0;
                }
            }
            out.add_term(new_idx, coef);
        }
        out
    }

    /// Coefficient of the constant term.
    pub fn constant_term(&self) -> f64 {
        self.terms
            .iter()
            .filter(|(idx, _)| idx.iter().all(|&a| a == 0))
            .map(|(_, c)| *c)
            .sum()
    }

    pub fn eval(&self, w: &[f64], bases: &[Basis]) -> f64 {
        self.terms
            .iter()
            .map(|(idx, c)| {
                idx.iter()
                    .enumerate()
                    .filter(|(_, &a)| a != 0)
                    .fold(*c, |acc, (k, &a)| acc * bases[k].eval(a, w[k]))
            })
            .sum()
    }

    /// Restrict to factor `k` after every other factor has been integrated:
    /// `(a, c)` pairs such that the surface equals `sum c * b_{k,a}(w_k)`.
    pub fn univariate(&self, k: usize) -> Univariate {
        let mut map: BTreeMap<u16, f64> = BTreeMap::new();
        for (idx, c) in &self.terms {
            debug_assert!(idx.iter().enumerate().all(|(j, &a)| j == k || a == 0));
            *map.entry(idx[k]).or_insert(0.0) += c;
        }
        Univariate {
            factor: k,
            coefs: map.into_iter().collect(),
        }
    }
}

/// A surface depending on a single factor.
#[derive(Clone, Debug, PartialEq)]
pub struct Univariate {
    factor: usize,
    coefs: Vec<(u16, f64)>,
}

impl Univariate {
    pub fn eval(&self, x: f64, bases: &[Basis]) -> f64 {
        let basis = &bases[self.factor];
        self.coefs.iter().map(|&(a, c)| c * basis.eval(a, x)).sum()
    }
}

/// Nuisance model whose conditional mean and second moment are expansions,
/// integrated exactly against per-factor basis marginals.
#[derive(Debug)]
pub struct ExpansionModel {
    bases: Vec<Basis>,
    marginals: Vec<BasisMarginal>,
    mu: Expansion,
    nu: Expansion,
    mean_y: f64,
    second_y: f64,
    centered_sq: Vec<Univariate>,
}

impl ExpansionModel {
    pub fn new(
        bases: Vec<Basis>,
        marginals: Vec<BasisMarginal>,
        mu: Expansion,
        nu: Expansion,
    ) -> Self {
        let k = bases.len();
        assert_eq!(marginals.len(), k);
        assert_eq!(mu.num_factors(), k);
        assert_eq!(nu.num_factors(), k);
        let all = FactorSet::full(k);
        let mean_y = mu.integrate(all, &marginals).constant_term();
        let second_y = nu.integrate(all, &marginals).constant_term();
        // (Y - E[Y])^2 given W has conditional mean nu - 2 E[Y] mu + E[Y]^2.
        let centered = nu
            .add(&mu.scale(-2.0 * mean_y))
            .add(&Expansion::constant(k, mean_y * mean_y));
        let centered_sq = (0..k)
            .map(|j| {
                centered
                    .integrate(all.difference(FactorSet::singleton(j)), &marginals)
                    .univariate(j)
            })
            .collect();
        ExpansionModel {
            bases,
            marginals,
            mu,
            nu,
            mean_y,
            second_y,
            centered_sq,
        }
    }

    pub fn bases(&self) -> &[Basis] {
        &self.bases
    }

    pub fn marginals(&self) -> &[BasisMarginal] {
        &self.marginals
    }

    pub fn mu_expansion(&self) -> &Expansion {
        &self.mu
    }

    pub fn nu_expansion(&self) -> &Expansion {
        &self.nu
    }
}

struct ExpansionBlock<'a> {
    model: &'a ExpansionModel,
    excluded: FactorSet,
    cond_mean: Expansion,
    numerator: f64,
    mu_times: Vec<Univariate>,
    excl_sq: Vec<Option<Univariate>>,
}

impl NuisanceModel for ExpansionModel {
    fn num_factors(&self) -> usize {
        self.bases.len()
    }

    fn mu(&self, w: &[f64]) -> f64 {
        self.mu.eval(w, &self.bases)
    }

    fn nu(&self, w: &[f64]) -> f64 {
        self.nu.eval(w, &self.bases)
    }

    fn mean_y(&self) -> f64 {
        self.mean_y
    }

    fn second_moment_y(&self) -> f64 {
        self.second_y
    }

    fn centered_square_given(&self, k: usize, w_k: f64) -> f64 {
        self.centered_sq[k].eval(w_k, &self.bases)
    }

    fn block(&self, excluded: FactorSet) -> Box<dyn BlockModel + '_> {
        let k = self.bases.len();
        let all = FactorSet::full(k);
        let m = self.mu.integrate(excluded, &self.marginals);
        let m_sq = m.mul(&m, &self.bases);
        let numerator = m_sq.integrate(all, &self.marginals).constant_term();
        let mu_m = self.mu.mul(&m, &self.bases);
        let mut mu_times = Vec::with_capacity(k);
        let mut excl_sq = Vec::with_capacity(k);
        for j in 0..k {
            let others = all.difference(FactorSet::singleton(j));
            mu_times.push(mu_m.integrate(others, &self.marginals).univariate(j));
            excl_sq.push(if excluded.contains(j) {
                None
            } else {
                Some(m_sq.integrate(others, &self.marginals).univariate(j))
            });
        }
        Box::new(ExpansionBlock {
            model: self,
            excluded,
            cond_mean: m,
            numerator,
            mu_times,
            excl_sq,
        })
    }
}

impl BlockModel for ExpansionBlock<'_> {
    fn excluded(&self) -> FactorSet {
        self.excluded
    }

    fn conditional_mean(&self, w: &[f64]) -> f64 {
        self.cond_mean.eval(w, &self.model.bases)
    }

    fn numerator(&self) -> f64 {
        self.numerator
    }

    fn mu_times_excluded_given(&self, k: usize, w_k: f64) -> f64 {
        self.mu_times[k].eval(w_k, &self.model.bases)
    }

    fn excluded_squared_given(&self, k: usize, w_k: f64) -> f64 {
        match &self.excl_sq[k] {
            Some(u) => u.eval(w_k, &self.model.bases),
            // the integrand does not involve W_k
            None => self.numerator,
        }
    }
}
