//! Ridge-stabilized least squares on a tensor-product basis: powers of
//! standardized values for continuous factors, level indicators for discrete
//! ones, with interaction terms up to a configurable order.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, FactorKind};
use crate::error::{Error, Result};

use super::expansion::{Basis, BasisMarginal, Expansion, ExpansionModel};
use super::{LearnerConfig, MarginalEstimate};

/// Multi-indices of the design: at most `max_order` active factors and total
/// degree at most `degree` (an indicator counts as degree one).
pub fn design_terms(bases: &[Basis], degree: u32, max_order: usize) -> Vec<Vec<u16>> {
    fn rec(
        bases: &[Basis],
        k: usize,
        degree_left: u32,
        order_left: usize,
        current: &mut Vec<u16>,
        out: &mut Vec<Vec<u16>>,
    ) {
        if k == bases.len() {
            out.push(current.clone());
            return;
        }
        current.push(0);
        rec(bases, k + 1, degree_left, order_left, current, out);
        current.pop();
        if order_left == 0 {
            return;
        }
        match bases[k] {
            Basis::Powers { .. } => {
                for a in 1..=degree_left {
                    current.push(a as u16);
                    rec(bases, k + 1, degree_left - a, order_left - 1, current, out);
                    current.pop();
                }
            }
            Basis::Indicators { levels } => {
                if degree_left >= 1 {
                    for j in 1..levels {
                        current.push(j as u16);
                        rec(bases, k + 1, degree_left - 1, order_left - 1, current, out);
                        current.pop();
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    rec(bases, 0, degree, max_order, &mut Vec::new(), &mut out);
    out
}

pub struct PolyFit {
    pub model: ExpansionModel,
    pub marginals: Vec<MarginalEstimate>,
    pub coefficients: Vec<(Vec<u16>, f64)>,
    pub diagnostics: Vec<String>,
}

fn solve_ridge(gram: &DMatrix<f64>, rhs: &DVector<f64>, ridge: f64) -> Result<(DVector<f64>, f64)> {
    let p = gram.nrows();
    let mut lambda = ridge;
    for _ in 0..8 {
        let mut g = gram.clone();
        // intercept (column 0) is not penalized
        for j in 1..p {
            g[(j, j)] += lambda;
        }
        if let Some(chol) = g.cholesky() {
            let beta = chol.solve(rhs);
            if beta.iter().all(|b| b.is_finite()) {
                return Ok((beta, lambda));
            }
        }
        if ridge <= 0.0 {
            return Err(Error::SingularDesign);
        }
        lambda *= 100.0;
    }
    Err(Error::Numerical(
        "ridge system could not be factorized".into(),
    ))
}

pub fn fit(data: &Dataset, train: &[usize], cfg: &LearnerConfig) -> Result<PolyFit> {
    if train.is_empty() {
        return Err(Error::TooFewObservations {
            n: data.n(),
            folds: 0,
        });
    }
    let k = data.num_factors();
    let n_train = train.len() as f64;
    let mut bases = Vec::with_capacity(k);
    let mut basis_marginals = Vec::with_capacity(k);
    let mut marginals = Vec::with_capacity(k);
    let max_power = (4 * cfg.degree + 2).min(u32::from(u16::MAX)) as u16;
    for j in 0..k {
        let col = data.column(j);
        match &data.factor(j).kind {
            FactorKind::Continuous => {
                let vals: Vec<f64> = train.iter().map(|&i| col[i]).collect();
                let center = vals.iter().sum::<f64>() / n_train;
                let var = vals.iter().map(|v| (v - center).powi(2)).sum::<f64>() / n_train;
                let scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
                let z: Vec<f64> = vals.iter().map(|v| (v - center) / scale).collect();
                bases.push(Basis::Powers { center, scale });
                basis_marginals.push(BasisMarginal::sample(z, max_power));
                marginals.push(MarginalEstimate::Continuous {
                    factor: j,
                    values: vals,
                });
            }
            FactorKind::Discrete { levels } => {
                let mut probs = vec![0.0; levels.len()];
                for &i in train {
                    probs[col[i] as usize] += 1.0;
                }
                probs.iter_mut().for_each(|p| *p /= n_train);
                bases.push(Basis::Indicators {
                    levels: levels.len(),
                });
                basis_marginals.push(BasisMarginal::Levels {
                    probs: probs.clone(),
                });
                marginals.push(MarginalEstimate::Discrete { factor: j, probs });
            }
        }
    }

    let terms = design_terms(
        &bases,
        cfg.degree,
        cfg.interaction_order.unwrap_or(usize::MAX),
    );
    let p = terms.len();
    let mut x = DMatrix::<f64>::zeros(train.len(), p);
    let mut w = Vec::with_capacity(k);
    for (r, &i) in train.iter().enumerate() {
        data.row_into(i, &mut w);
        for (c, idx) in terms.iter().enumerate() {
            x[(r, c)] = idx
                .iter()
                .enumerate()
                .filter(|(_, &a)| a != 0)
                .fold(1.0, |acc, (j, &a)| acc * bases[j].eval(a, w[j]));
        }
    }
    let y = DVector::from_iterator(train.len(), train.iter().map(|&i| data.outcome()[i]));
    let y2 = y.map(|v| v * v);
    let xt = x.transpose();
    let gram = &xt * &x / n_train;
    let (beta_mu, lambda_mu) = solve_ridge(&gram, &(&xt * &y / n_train), cfg.ridge)?;
    let (beta_nu, lambda_nu) = solve_ridge(&gram, &(&xt * &y2 / n_train), cfg.ridge)?;

    let mut diagnostics = Vec::new();
    if lambda_mu > cfg.ridge || lambda_nu > cfg.ridge {
        diagnostics.push(format!(
            "polyls: ridge raised to {:e} to factorize the design",
            lambda_mu.max(lambda_nu)
        ));
    }
    let mut mu = Expansion::zero(k);
    let mut nu = Expansion::zero(k);
    let mut coefficients = Vec::with_capacity(p);
    for (c, idx) in terms.into_iter().enumerate() {
        mu.add_term(idx.clone(), beta_mu[c]);
        nu.add_term(idx.clone(), beta_nu[c]);
        coefficients.push((idx, beta_mu[c]));
    }
    Ok(PolyFit {
        model: ExpansionModel::new(bases, basis_marginals, mu, nu),
        marginals,
        coefficients,
        diagnostics,
    })
}
