//! Estimand algebra: factor subsets, the total/interaction estimands and
//! their expansion into signed combinations of building blocks
//! `E[E[Y | W_{-S}]^2] / Var(Y)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of factors representable in a [`FactorSet`].
pub const MAX_FACTORS: usize = 64;

/// A subset of factor indices (0-based), stored as a bit mask.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FactorSet(u64);

impl FactorSet {
    pub const fn empty() -> Self {
        FactorSet(0)
    }

    /// All of `0..k`.
    pub fn full(k: usize) -> Self {
        assert!(k <= MAX_FACTORS, "at most {MAX_FACTORS} factors");
        if k == MAX_FACTORS {
            FactorSet(u64::MAX)
        } else {
            FactorSet((1u64 << k) - 1)
        }
    }

    pub fn singleton(k: usize) -> Self {
        assert!(k < MAX_FACTORS);
        FactorSet(1u64 << k)
    }

    pub fn from_bits(bits: u64) -> Self {
        FactorSet(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn contains(self, k: usize) -> bool {
        k < MAX_FACTORS && self.0 & (1u64 << k) != 0
    }

    pub fn insert(&mut self, k: usize) {
        assert!(k < MAX_FACTORS);
        self.0 |= 1u64 << k;
    }

    pub fn with(mut self, k: usize) -> Self {
        self.insert(k);
        self
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: Self) -> Self {
        FactorSet(self.0 | other.0)
    }

    pub fn difference(self, other: Self) -> Self {
        FactorSet(self.0 & !other.0)
    }

    pub fn is_subset(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    /// Complement within `0..k`.
    pub fn complement(self, k: usize) -> Self {
        Self::full(k).difference(self)
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..MAX_FACTORS).filter(move |k| bits & (1u64 << k) != 0)
    }

    /// Largest index + 1, or 0 for the empty set.
    pub fn span(self) -> usize {
        MAX_FACTORS - self.0.leading_zeros() as usize
    }

    /// Every non-empty subset, in increasing bit order.
    pub fn nonempty_subsets(self) -> Vec<FactorSet> {
        let mut out = Vec::new();
        let mut sub = self.0;
        while sub != 0 {
            out.push(FactorSet(sub));
            sub = (sub - 1) & self.0;
        }
        out.sort();
        out
    }
}

impl FromIterator<usize> for FactorSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut set = FactorSet::empty();
        for k in iter {
            set.insert(k);
        }
        set
    }
}

impl fmt::Debug for FactorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

/// Displays 1-based indices, e.g. `{1,3}`.
impl fmt::Display for FactorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|k| (k + 1).to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Which explainability quantity to target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EstimandSpec {
    /// Total explainability of the union of the factors in the set.
    TotalUnion(FactorSet),
    /// Pairwise interaction explainability (0-based indices, distinct).
    Interaction(usize, usize),
}

impl EstimandSpec {
    pub fn total(factors: impl IntoIterator<Item = usize>) -> Self {
        EstimandSpec::TotalUnion(factors.into_iter().collect())
    }

    pub fn interaction(k: usize, k2: usize) -> Self {
        EstimandSpec::Interaction(k, k2)
    }

    /// Factors the estimand refers to.
    pub fn factors(&self) -> FactorSet {
        match *self {
            EstimandSpec::TotalUnion(s) => s,
            EstimandSpec::Interaction(a, b) => FactorSet::singleton(a).with(b),
        }
    }

    pub fn is_interaction(&self) -> bool {
        matches!(self, EstimandSpec::Interaction(..))
    }

    pub fn validate(&self, num_factors: usize) -> Result<()> {
        match *self {
            EstimandSpec::TotalUnion(s) => {
                if s.is_empty() {
                    return Err(Error::InvalidEstimand("total set must be non-empty".into()));
                }
                if s.span() > num_factors {
                    return Err(Error::InvalidEstimand(format!(
                        "{s} refers to a factor beyond the {num_factors} available"
                    )));
                }
            }
            EstimandSpec::Interaction(a, b) => {
                if a == b {
                    return Err(Error::InvalidEstimand(format!(
                        "interaction indices must differ (got {} twice)",
                        a + 1
                    )));
                }
                if a >= num_factors || b >= num_factors {
                    return Err(Error::InvalidEstimand(format!(
                        "interaction ({},{}) refers to a factor beyond the {num_factors} available",
                        a + 1,
                        b + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Labels use 1-based indices: `total:1,3` and `interaction:1,3`.
impl fmt::Display for EstimandSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            EstimandSpec::TotalUnion(s) => {
                let parts: Vec<String> = s.iter().map(|k| (k + 1).to_string()).collect();
                write!(f, "total:{}", parts.join(","))
            }
            EstimandSpec::Interaction(a, b) => write!(f, "interaction:{},{}", a + 1, b + 1),
        }
    }
}

impl FromStr for EstimandSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| {
            Error::InvalidEstimand(format!(
                "`{s}`: expected `total:i,...` or `interaction:i,j`"
            ))
        })?;
        let indices = rest
            .split(',')
            .map(|t| {
                let t = t.trim();
                match t.parse::<usize>() {
                    Ok(v) if (1..=MAX_FACTORS).contains(&v) => Ok(v - 1),
                    _ => Err(Error::InvalidEstimand(format!(
                        "`{s}`: bad factor index `{t}` (1-based)"
                    ))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        match kind.trim().to_ascii_lowercase().as_str() {
            "total" | "t" => {
                if indices.is_empty() {
                    return Err(Error::InvalidEstimand(format!("`{s}`: empty set")));
                }
                Ok(EstimandSpec::TotalUnion(indices.into_iter().collect()))
            }
            "interaction" | "int" | "i" => match indices.as_slice() {
                [a, b] if a != b => Ok(EstimandSpec::Interaction(*a, *b)),
                _ => Err(Error::InvalidEstimand(format!(
                    "`{s}`: an interaction needs exactly two distinct factors"
                ))),
            },
            other => Err(Error::InvalidEstimand(format!(
                "unknown estimand kind `{other}`"
            ))),
        }
    }
}

impl TryFrom<String> for EstimandSpec {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<EstimandSpec> for String {
    fn from(value: EstimandSpec) -> String {
        value.to_string()
    }
}

/// The quantity `E[E[Y | W_{-S}]^2] / Var(Y)` for an excluded set `S`.
///
/// `excluded = {}` is `E[E[Y|W]^2] / Var(Y)`; excluding every factor leaves
/// `E[Y]^2 / Var(Y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BuildingBlock {
    pub excluded: FactorSet,
}

impl BuildingBlock {
    pub fn new(excluded: FactorSet) -> Self {
        BuildingBlock { excluded }
    }
}

/// A signed linear combination of building blocks; evaluates to an estimand.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedBlockCombination {
    terms: Vec<(i8, BuildingBlock)>,
}

impl SignedBlockCombination {
    pub fn terms(&self) -> &[(i8, BuildingBlock)] {
        &self.terms
    }

    pub fn blocks(&self) -> impl Iterator<Item = BuildingBlock> + '_ {
        self.terms.iter().map(|(_, b)| *b)
    }

    /// Apply the signs to per-block values (same order as [`Self::terms`]).
    pub fn combine(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.terms.len());
        self.terms
            .iter()
            .zip(values)
            .map(|((sign, _), v)| f64::from(*sign) * v)
            .sum()
    }
}

/// Expand an estimand into building blocks.
///
/// `TotalUnion(S)` becomes `+block({}) - block(S)`; `Interaction(k, k')`
/// becomes `+block({}) - block({k}) - block({k'}) + block({k,k'})`, which is
/// `xi(W_k) + xi(W_k') - xi(W_k v W_k')` written over blocks.
pub fn expand_estimand(spec: &EstimandSpec) -> SignedBlockCombination {
    let terms = match *spec {
        EstimandSpec::TotalUnion(s) => vec![
            (1, BuildingBlock::new(FactorSet::empty())),
            (-1, BuildingBlock::new(s)),
        ],
        EstimandSpec::Interaction(a, b) => vec![
            (1, BuildingBlock::new(FactorSet::empty())),
            (-1, BuildingBlock::new(FactorSet::singleton(a))),
            (-1, BuildingBlock::new(FactorSet::singleton(b))),
            (1, BuildingBlock::new(FactorSet::singleton(a).with(b))),
        ],
    };
    SignedBlockCombination { terms }
}

/// Residual of the anchored decomposition
/// `xi(v_{k in S} W_k) = sum_{{} != S' ⊆ S} (-1)^{|S'|-1} xi(^_{k in S'} W_k)`.
///
/// Singleton interactions are the single-factor totals; they are looked up in
/// `interactions` first and fall back to `totals`.
pub fn anchored_decomposition_check(
    totals: &BTreeMap<FactorSet, f64>,
    interactions: &BTreeMap<FactorSet, f64>,
    set: FactorSet,
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidEstimand(
            "decomposition needs a non-empty set".into(),
        ));
    }
    let lhs = *totals
        .get(&set)
        .ok_or_else(|| Error::MissingSubset(format!("total {set}")))?;
    let mut rhs = 0.0;
    for sub in set.nonempty_subsets() {
        let value = match interactions.get(&sub) {
            Some(v) => *v,
            None if sub.len() == 1 => *totals
                .get(&sub)
                .ok_or_else(|| Error::MissingSubset(format!("total {sub}")))?,
            None => return Err(Error::MissingSubset(format!("interaction {sub}"))),
        };
        let sign = if sub.len() % 2 == 1 { 1.0 } else { -1.0 };
        rhs += sign * value;
    }
    Ok((lhs - rhs).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ix: &[usize]) -> FactorSet {
        ix.iter().copied().collect()
    }

    #[test]
    fn total_expansion_two_blocks() {
        // factor 3 (1-based) is index 2
        let combo = expand_estimand(&EstimandSpec::total([2]));
        assert_eq!(
            combo.terms(),
            &[
                (1, BuildingBlock::new(set(&[]))),
                (-1, BuildingBlock::new(set(&[2])))
            ]
        );
    }

    #[test]
    fn interaction_expansion_four_blocks() {
        let combo = expand_estimand(&EstimandSpec::interaction(0, 2));
        assert_eq!(
            combo.terms(),
            &[
                (1, BuildingBlock::new(set(&[]))),
                (-1, BuildingBlock::new(set(&[0]))),
                (-1, BuildingBlock::new(set(&[2]))),
                (1, BuildingBlock::new(set(&[0, 2]))),
            ]
        );
    }

    #[test]
    fn full_exclusion_block() {
        let combo = expand_estimand(&EstimandSpec::TotalUnion(FactorSet::full(4)));
        assert_eq!(combo.terms()[1].1.excluded, FactorSet::full(4));
    }

    #[test]
    fn interaction_expansion_is_inclusion_exclusion_of_totals() {
        // Arbitrary block values; combine through totals and through the
        // interaction expansion.
        let value = |s: FactorSet| 0.1 + 0.37 * s.bits() as f64;
        let eval = |spec: EstimandSpec| {
            let combo = expand_estimand(&spec);
            let v: Vec<f64> = combo.blocks().map(|b| value(b.excluded)).collect();
            combo.combine(&v)
        };
        let inter = eval(EstimandSpec::interaction(1, 3));
        let via_totals = eval(EstimandSpec::total([1])) + eval(EstimandSpec::total([3]))
            - eval(EstimandSpec::total([1, 3]));
        assert!((inter - via_totals).abs() < 1e-12);
    }

    #[test]
    fn decomposition_identity() {
        let (a, b, c) = (0.3, 0.2, 0.05);
        let mut totals = BTreeMap::new();
        totals.insert(set(&[0]), a);
        totals.insert(set(&[1]), b);
        totals.insert(set(&[0, 1]), a + b - c);
        let mut inter = BTreeMap::new();
        inter.insert(set(&[0, 1]), c);
        let r = anchored_decomposition_check(&totals, &inter, set(&[0, 1])).unwrap();
        assert_eq!(r, 0.0);

        totals.insert(set(&[0, 1]), a + b - c + 0.1);
        let r = anchored_decomposition_check(&totals, &inter, set(&[0, 1])).unwrap();
        assert!((r - 0.1).abs() < 1e-12);
    }

    #[test]
    fn decomposition_missing_subset() {
        let mut totals = BTreeMap::new();
        totals.insert(set(&[0, 1]), 0.4);
        totals.insert(set(&[0]), 0.3);
        let err =
            anchored_decomposition_check(&totals, &BTreeMap::new(), set(&[0, 1])).unwrap_err();
        assert!(matches!(err, Error::MissingSubset(_)));
    }

    #[test]
    fn labels_round_trip() {
        for label in ["total:3", "total:1,3", "interaction:1,3"] {
            let spec: EstimandSpec = label.parse().unwrap();
            assert_eq!(spec.to_string(), label);
        }
        assert_eq!(
            "total:3".parse::<EstimandSpec>().unwrap(),
            EstimandSpec::total([2])
        );
        assert!("interaction:2,2".parse::<EstimandSpec>().is_err());
        assert!("total:0".parse::<EstimandSpec>().is_err());
        assert!("bogus:1".parse::<EstimandSpec>().is_err());
    }

    #[test]
    fn validation_bounds() {
        assert!(EstimandSpec::total([3]).validate(3).is_err());
        assert!(EstimandSpec::total([2]).validate(3).is_ok());
        assert!(EstimandSpec::Interaction(0, 0).validate(3).is_err());
        assert!(EstimandSpec::TotalUnion(FactorSet::empty())
            .validate(3)
            .is_err());
    }

    #[test]
    fn subsets_enumerated() {
        let subs = set(&[0, 2]).nonempty_subsets();
        assert_eq!(subs, vec![set(&[0]), set(&[2]), set(&[0, 2])]);
        assert_eq!(set(&[0, 5]).span(), 6);
        assert_eq!(set(&[1]).complement(3), set(&[0, 2]));
    }
}
