//! Multivariate polynomials in independent factors, with exact expectations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::estimand::FactorSet;

/// Distribution of one generated factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorDist {
    /// Uniform on (-1, 1).
    Uniform,
    /// Normal(0, 1).
    StandardNormal,
}

impl FactorDist {
    /// `E[W^p]`.
    pub fn moment(self, p: u32) -> f64 {
        if p % 2 == 1 {
            return 0.0;
        }
        match self {
            FactorDist::Uniform => 1.0 / f64::from(p + 1),
            FactorDist::StandardNormal => {
                let mut m = 1.0;
                let mut j = 1;
                while j < p {
                    m *= f64::from(j);
                    j += 2;
                }
                m
            }
        }
    }

    pub fn variance(self) -> f64 {
        self.moment(2)
    }
}

/// `sum_t c_t prod_k w_k^{e_tk}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Poly {
    num_vars: usize,
    terms: BTreeMap<Vec<u32>, f64>,
}

impl Poly {
    pub fn zero(num_vars: usize) -> Self {
        Poly {
            num_vars,
            terms: BTreeMap::new(),
        }
    }

    /// From `(coefficient, exponents)` pairs.
    pub fn from_terms(num_vars: usize, terms: &[(f64, Vec<u32>)]) -> Self {
        let mut p = Poly::zero(num_vars);
        for (c, e) in terms {
            assert_eq!(e.len(), num_vars, "exponent vector length");
            p.add_term(e.clone(), *c);
        }
        p
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u32], f64)> {
        self.terms.iter().map(|(e, c)| (e.as_slice(), *c))
    }

    pub fn add_term(&mut self, exps: Vec<u32>, coef: f64) {
        if coef == 0.0 {
            return;
        }
        let e = self.terms.entry(exps).or_insert(0.0);
        *e += coef;
    }

    pub fn add_constant(&self, c: f64) -> Poly {
        let mut out = self.clone();
        out.add_term(vec![0; self.num_vars], c);
        out
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero(self.num_vars);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                out.add_term(ea.iter().zip(eb).map(|(a, b)| a + b).collect(), ca * cb);
            }
        }
        out
    }

    pub fn eval(&self, w: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| {
                e.iter().zip(w).fold(
                    *c,
                    |acc, (&p, &x)| if p == 0 { acc } else { acc * x.powi(p as i32) },
                )
            })
            .sum()
    }

    /// Conditional expectation with the variables in `over` integrated out.
    pub fn expect_over(&self, over: FactorSet, dists: &[FactorDist]) -> Poly {
        let mut out = Poly::zero(self.num_vars);
        for (e, c) in &self.terms {
            let mut coef = *c;
            let mut exps = e.clone();
            for k in over.iter() {
                coef *= dists[k].moment(e[k]);
                exps[k] = 0;
            }
            out.add_term(exps, coef);
        }
        out
    }

    pub fn expectation(&self, dists: &[FactorDist]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| {
                e.iter()
                    .zip(dists)
                    .fold(*c, |acc, (&p, d)| acc * d.moment(p))
            })
            .sum()
    }

    pub fn max_degree(&self) -> u32 {
        self.terms.keys().map(|e| e.iter().sum()).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments() {
        assert_eq!(FactorDist::Uniform.moment(4), 0.2);
        assert_eq!(FactorDist::StandardNormal.moment(4), 3.0);
        assert_eq!(FactorDist::StandardNormal.moment(8), 105.0);
        assert_eq!(FactorDist::Uniform.moment(0), 1.0);
    }

    #[test]
    fn expectation_of_square() {
        // (w0 + w0 w1)^2 under uniforms: 1/3 + 1/9
        let p = Poly::from_terms(2, &[(1.0, vec![1, 0]), (1.0, vec![1, 1])]);
        let d = [FactorDist::Uniform; 2];
        assert!((p.mul(&p).expectation(&d) - (1.0 / 3.0 + 1.0 / 9.0)).abs() < 1e-15);
        let cond = p.expect_over(FactorSet::singleton(1), &d);
        assert_eq!(cond, Poly::from_terms(2, &[(1.0, vec![1, 0])]));
    }
}
