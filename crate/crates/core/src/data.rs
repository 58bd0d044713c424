//! Datasets: an outcome column plus `K` factor columns with kind metadata,
//! validated from raw string columns (CSV) against an optional schema.

use std::collections::{BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distinct-value threshold under which an undeclared numeric column is
/// treated as discrete.
pub const DISCRETE_INFERENCE_LIMIT: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FactorKind {
    /// Values are level codes `0..levels.len()` into this label list.
    Discrete {
        levels: Vec<String>,
    },
    Continuous,
}

impl FactorKind {
    pub fn is_discrete(&self) -> bool {
        matches!(self, FactorKind::Discrete { .. })
    }

    pub fn num_levels(&self) -> Option<usize> {
        match self {
            FactorKind::Discrete { levels } => Some(levels.len()),
            FactorKind::Continuous => None,
        }
    }
}

/// One factor column. Discrete values are stored as level codes in `f64`
/// so every factor vector is a plain `&[f64]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub name: String,
    pub kind: FactorKind,
    values: Vec<f64>,
}

impl Factor {
    pub fn continuous(name: impl Into<String>, values: Vec<f64>) -> Self {
        Factor {
            name: name.into(),
            kind: FactorKind::Continuous,
            values,
        }
    }

    /// `codes[i]` indexes into `levels`.
    pub fn discrete(name: impl Into<String>, levels: Vec<String>, codes: &[usize]) -> Self {
        Factor {
            name: name.into(),
            kind: FactorKind::Discrete { levels },
            values: codes.iter().map(|&c| c as f64).collect(),
        }
    }

    /// Discrete factor whose level labels are `0..num_levels`.
    pub fn discrete_codes(name: impl Into<String>, num_levels: usize, codes: &[usize]) -> Self {
        let levels = (0..num_levels).map(|l| l.to_string()).collect();
        Self::discrete(name, levels, codes)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn check(&self) -> Result<()> {
        match &self.kind {
            FactorKind::Discrete { levels } => {
                if levels.is_empty() {
                    return Err(Error::Schema(format!(
                        "factor `{}` declares no levels",
                        self.name
                    )));
                }
                for &v in &self.values {
                    if v.fract() != 0.0 || v < 0.0 || v as usize >= levels.len() {
                        return Err(Error::UnknownLevel {
                            value: v.to_string(),
                            factor: self.name.clone(),
                        });
                    }
                }
            }
            FactorKind::Continuous => {
                if let Some(row) = self.values.iter().position(|v| !v.is_finite()) {
                    return Err(Error::InvalidNumber {
                        column: self.name.clone(),
                        row,
                        value: self.values[row].to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Validated data: `n >= 2` rows, a finite outcome and `K >= 1` factors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    outcome_name: String,
    outcome: Vec<f64>,
    factors: Vec<Factor>,
}

impl Dataset {
    pub fn new(
        outcome_name: impl Into<String>,
        outcome: Vec<f64>,
        factors: Vec<Factor>,
    ) -> Result<Self> {
        let outcome_name = outcome_name.into();
        let n = outcome.len();
        if n < 2 || factors.is_empty() {
            return Err(Error::EmptyData);
        }
        if factors.len() > crate::estimand::MAX_FACTORS {
            return Err(Error::Schema(format!(
                "at most {} factors are supported",
                crate::estimand::MAX_FACTORS
            )));
        }
        if let Some(row) = outcome.iter().position(|y| !y.is_finite()) {
            return Err(Error::NonFiniteOutcome { row });
        }
        for f in &factors {
            if f.values.len() != n {
                return Err(Error::LengthMismatch {
                    column: f.name.clone(),
                    expected: n,
                    found: f.values.len(),
                });
            }
            f.check()?;
        }
        Ok(Dataset {
            outcome_name,
            outcome,
            factors,
        })
    }

    /// Read a CSV file with a header row and validate it against `schema`.
    pub fn from_csv_path(path: impl AsRef<Path>, schema: &Schema) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file, schema)
    }

    pub fn from_csv_reader<R: Read>(reader: R, schema: &Schema) -> Result<Self> {
        let raw = RawTable::from_csv_reader(reader)?;
        validate_dataset(&raw, schema)
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn factor(&self, k: usize) -> &Factor {
        &self.factors[k]
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.factors[k].values
    }

    pub fn all_discrete(&self) -> bool {
        self.factors.iter().all(|f| f.kind.is_discrete())
    }

    /// Factor vector of row `i`, written into `buf`.
    pub fn row_into(&self, i: usize, buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend(self.factors.iter().map(|f| f.values[i]));
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        let mut buf = Vec::with_capacity(self.factors.len());
        self.row_into(i, &mut buf);
        buf
    }

    /// Sample variance (divisor n) of the outcome.
    pub fn outcome_variance(&self) -> f64 {
        let n = self.n() as f64;
        let mean = self.outcome.iter().sum::<f64>() / n;
        self.outcome.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n
    }

    /// Copy of the dataset with factor column `k` replaced. Values must be
    /// admissible for the factor's kind (used by permutation).
    pub(crate) fn with_column(&self, k: usize, values: Vec<f64>) -> Dataset {
        debug_assert_eq!(values.len(), self.n());
        let mut out = self.clone();
        out.factors[k].values = values;
        out
    }

    /// Copy with the outcome replaced.
    pub fn with_outcome(&self, outcome: Vec<f64>) -> Result<Dataset> {
        Dataset::new(self.outcome_name.clone(), outcome, self.factors.clone())
    }

    /// A schema declaring every column of this dataset explicitly.
    pub fn schema(&self) -> Schema {
        Schema {
            outcome: self.outcome_name.clone(),
            factors: self
                .factors
                .iter()
                .map(|f| FactorDecl {
                    name: f.name.clone(),
                    kind: Some(match f.kind {
                        FactorKind::Discrete { .. } => DeclaredKind::Discrete,
                        FactorKind::Continuous => DeclaredKind::Continuous,
                    }),
                    levels: match &f.kind {
                        FactorKind::Discrete { levels } => Some(levels.clone()),
                        FactorKind::Continuous => None,
                    },
                })
                .collect(),
        }
    }

    /// Raw string columns (outcome first) that validate back to `self`.
    pub fn to_raw(&self) -> RawTable {
        let mut names = vec![self.outcome_name.clone()];
        let mut columns = vec![self
            .outcome
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()];
        for f in &self.factors {
            names.push(f.name.clone());
            columns.push(match &f.kind {
                FactorKind::Discrete { levels } => f
                    .values
                    .iter()
                    .map(|&v| levels[v as usize].clone())
                    .collect(),
                FactorKind::Continuous => f.values.iter().map(|v| v.to_string()).collect(),
            });
        }
        RawTable { names, columns }
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        self.to_raw().write_csv(writer)
    }
}

/// Named string columns, as read from a CSV file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RawTable {
    pub names: Vec<String>,
    pub columns: Vec<Vec<String>>,
}

impl RawTable {
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let mut columns = vec![Vec::new(); names.len()];
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != names.len() {
                let column = names
                    .get(record.len().min(names.len().saturating_sub(1)))
                    .cloned()
                    .unwrap_or_default();
                log::debug!(
                    "row {row} has {} fields, header has {}",
                    record.len(),
                    names.len()
                );
                return Err(Error::LengthMismatch {
                    column,
                    expected: names.len(),
                    found: record.len(),
                });
            }
            for (col, field) in columns.iter_mut().zip(record.iter()) {
                col.push(field.to_owned());
            }
        }
        Ok(RawTable { names, columns })
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.names)?;
        let n = self.columns.first().map_or(0, Vec::len);
        for i in 0..n {
            wtr.write_record(self.columns.iter().map(|c| c[i].as_str()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeclaredKind {
    Discrete,
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorDecl {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<DeclaredKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

/// Declares the outcome column and factor kinds. With no factor
/// declarations, every non-outcome column is a factor of inferred kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub outcome: String,
    #[serde(default)]
    pub factors: Vec<FactorDecl>,
}

impl Schema {
    pub fn outcome_only(outcome: impl Into<String>) -> Self {
        Schema {
            outcome: outcome.into(),
            factors: Vec::new(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        if path.as_ref().extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))
        } else {
            Self::from_toml_str(&text)
        }
    }
}

fn is_missing(s: &str) -> bool {
    s.is_empty() || s.eq_ignore_ascii_case("na")
}

fn parse_number(column: &str, row: usize, s: &str) -> Result<f64> {
    if is_missing(s) {
        return Err(Error::MissingValue {
            column: column.to_owned(),
            row,
        });
    }
    s.parse::<f64>().map_err(|_| Error::InvalidNumber {
        column: column.to_owned(),
        row,
        value: s.to_owned(),
    })
}

/// Sort level labels numerically when they all parse as numbers, else
/// lexicographically.
fn sorted_levels(values: &[String]) -> Vec<String> {
    let distinct: BTreeSet<&str> = values.iter().map(String::as_str).collect();
    let mut levels: Vec<String> = distinct.into_iter().map(str::to_owned).collect();
    let numeric: Option<Vec<f64>> = levels.iter().map(|l| l.parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut paired: Vec<(f64, String)> = nums.into_iter().zip(levels).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        levels = paired.into_iter().map(|(_, l)| l).collect();
    }
    levels
}

/// Validate raw columns against a schema and build a [`Dataset`].
///
/// Undeclared factor kinds are inferred: non-numeric columns and numeric
/// columns with at most [`DISCRETE_INFERENCE_LIMIT`] distinct values are
/// discrete. Undeclared level lists are inferred from the data.
pub fn validate_dataset(raw: &RawTable, schema: &Schema) -> Result<Dataset> {
    if raw.names.is_empty() || raw.columns.is_empty() {
        return Err(Error::EmptyData);
    }
    if raw.names.len() != raw.columns.len() {
        return Err(Error::Schema("column names and columns disagree".into()));
    }
    let index: HashMap<&str, usize> = raw
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let outcome_ix = *index
        .get(schema.outcome.as_str())
        .ok_or_else(|| Error::Schema(format!("outcome column `{}` not found", schema.outcome)))?;
    let n = raw.columns[outcome_ix].len();
    for (name, col) in raw.names.iter().zip(&raw.columns) {
        if col.len() != n {
            return Err(Error::LengthMismatch {
                column: name.clone(),
                expected: n,
                found: col.len(),
            });
        }
    }
    if n < 2 {
        return Err(Error::EmptyData);
    }

    let mut outcome = Vec::with_capacity(n);
    for (row, s) in raw.columns[outcome_ix].iter().enumerate() {
        let v = parse_number(&schema.outcome, row, s)?;
        if !v.is_finite() {
            return Err(Error::NonFiniteOutcome { row });
        }
        outcome.push(v);
    }

    let decls: Vec<FactorDecl> = if schema.factors.is_empty() {
        raw.names
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != outcome_ix)
            .map(|(_, name)| FactorDecl {
                name: name.clone(),
                kind: None,
                levels: None,
            })
            .collect()
    } else {
        schema.factors.clone()
    };
    if decls.is_empty() {
        return Err(Error::EmptyData);
    }

    let mut factors = Vec::with_capacity(decls.len());
    for decl in &decls {
        if decl.name == schema.outcome {
            return Err(Error::Schema(format!(
                "`{}` is both outcome and factor",
                decl.name
            )));
        }
        let ix = *index
            .get(decl.name.as_str())
            .ok_or_else(|| Error::Schema(format!("factor column `{}` not found", decl.name)))?;
        let col = &raw.columns[ix];
        if let Some(row) = col.iter().position(|s| is_missing(s)) {
            return Err(Error::MissingValue {
                column: decl.name.clone(),
                row,
            });
        }
        let kind = match (decl.kind, &decl.levels) {
            (Some(k), _) => k,
            (None, Some(_)) => DeclaredKind::Discrete,
            (None, None) => infer_kind(col),
        };
        let factor = match kind {
            DeclaredKind::Continuous => {
                if decl.levels.is_some() {
                    return Err(Error::Schema(format!(
                        "continuous factor `{}` cannot declare levels",
                        decl.name
                    )));
                }
                let values = col
                    .iter()
                    .enumerate()
                    .map(|(row, s)| {
                        let v = parse_number(&decl.name, row, s)?;
                        if v.is_finite() {
                            Ok(v)
                        } else {
                            Err(Error::InvalidNumber {
                                column: decl.name.clone(),
                                row,
                                value: s.clone(),
                            })
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Factor::continuous(decl.name.clone(), values)
            }
            DeclaredKind::Discrete => {
                let levels = match &decl.levels {
                    Some(l) => {
                        let distinct: BTreeSet<&String> = l.iter().collect();
                        if distinct.len() != l.len() || l.is_empty() {
                            return Err(Error::Schema(format!(
                                "factor `{}` declares an empty or duplicated level list",
                                decl.name
                            )));
                        }
                        l.clone()
                    }
                    None => sorted_levels(col),
                };
                let lookup: HashMap<&str, usize> = levels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (l.as_str(), i))
                    .collect();
                let codes = col
                    .iter()
                    .map(|s| {
                        lookup
                            .get(s.as_str())
                            .copied()
                            .ok_or_else(|| Error::UnknownLevel {
                                value: s.clone(),
                                factor: decl.name.clone(),
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Factor::discrete(decl.name.clone(), levels, &codes)
            }
        };
        factors.push(factor);
    }
    Dataset::new(schema.outcome.clone(), outcome, factors)
}

fn infer_kind(col: &[String]) -> DeclaredKind {
    let all_numeric = col
        .iter()
        .all(|s| s.parse::<f64>().is_ok_and(f64::is_finite));
    if !all_numeric {
        return DeclaredKind::Discrete;
    }
    let distinct: BTreeSet<&str> = col.iter().map(String::as_str).collect();
    if distinct.len() <= DISCRETE_INFERENCE_LIMIT {
        DeclaredKind::Discrete
    } else {
        DeclaredKind::Continuous
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(cols: &[(&str, &[&str])]) -> RawTable {
        RawTable {
            names: cols.iter().map(|(n, _)| n.to_string()).collect(),
            columns: cols
                .iter()
                .map(|(_, c)| c.iter().map(|s| s.to_string()).collect())
                .collect(),
        }
    }

    #[test]
    fn well_formed_input_infers_levels() {
        let raw = table(&[
            ("y", &["1.0", "2.5", "0.3", "4", "-1"]),
            ("a", &["lo", "hi", "lo", "hi", "lo"]),
            ("b", &["3", "1", "2", "1", "3"]),
        ]);
        let ds = validate_dataset(&raw, &Schema::outcome_only("y")).unwrap();
        assert_eq!(ds.n(), 5);
        assert_eq!(ds.num_factors(), 2);
        assert_eq!(
            ds.factor(0).kind,
            FactorKind::Discrete {
                levels: vec!["hi".into(), "lo".into()]
            }
        );
        assert_eq!(
            ds.factor(1).kind,
            FactorKind::Discrete {
                levels: vec!["1".into(), "2".into(), "3".into()]
            }
        );
        assert_eq!(ds.column(1), &[2.0, 0.0, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn non_finite_outcome_rejected() {
        let raw = table(&[
            ("y", &["1", "inf", "2", "3", "4"]),
            ("a", &["x", "y", "x", "y", "x"]),
        ]);
        let err = validate_dataset(&raw, &Schema::outcome_only("y")).unwrap_err();
        assert!(matches!(err, Error::NonFiniteOutcome { row: 1 }));
        let raw = table(&[
            ("y", &["1", "NaN", "2", "3", "4"]),
            ("a", &["x", "y", "x", "y", "x"]),
        ]);
        assert!(matches!(
            validate_dataset(&raw, &Schema::outcome_only("y")).unwrap_err(),
            Error::NonFiniteOutcome { row: 1 }
        ));
    }

    #[test]
    fn length_mismatch_rejected() {
        let raw = table(&[
            ("y", &["1", "2", "3", "4", "5"]),
            ("a", &["x", "y", "x", "y"]),
        ]);
        let err = validate_dataset(&raw, &Schema::outcome_only("y")).unwrap_err();
        assert!(matches!(
            err,
            Error::LengthMismatch {
                expected: 5,
                found: 4,
                ..
            }
        ));
    }

    #[test]
    fn unknown_level_rejected() {
        let raw = table(&[("y", &["1", "2", "3"]), ("a", &["x", "y", "z"])]);
        let schema = Schema {
            outcome: "y".into(),
            factors: vec![FactorDecl {
                name: "a".into(),
                kind: Some(DeclaredKind::Discrete),
                levels: Some(vec!["x".into(), "y".into()]),
            }],
        };
        let err = validate_dataset(&raw, &schema).unwrap_err();
        assert!(matches!(err, Error::UnknownLevel { ref value, .. } if value == "z"));
    }

    #[test]
    fn empty_and_missing() {
        assert!(matches!(
            validate_dataset(&RawTable::default(), &Schema::outcome_only("y")).unwrap_err(),
            Error::EmptyData
        ));
        let raw = table(&[("y", &["1", "", "3"]), ("a", &["x", "y", "x"])]);
        assert!(matches!(
            validate_dataset(&raw, &Schema::outcome_only("y")).unwrap_err(),
            Error::MissingValue { row: 1, .. }
        ));
        let raw = table(&[("y", &["1", "2", "3"]), ("a", &["x", "NA", "x"])]);
        assert!(matches!(
            validate_dataset(&raw, &Schema::outcome_only("y")).unwrap_err(),
            Error::MissingValue { row: 1, .. }
        ));
    }

    #[test]
    fn many_distinct_numbers_are_continuous() {
        let ys: Vec<String> = (0..30).map(|i| i.to_string()).collect();
        let ws: Vec<String> = (0..30).map(|i| format!("{}", i as f64 * 0.1)).collect();
        let raw = RawTable {
            names: vec!["y".into(), "w".into()],
            columns: vec![ys, ws],
        };
        let ds = validate_dataset(&raw, &Schema::outcome_only("y")).unwrap();
        assert_eq!(ds.factor(0).kind, FactorKind::Continuous);
    }

    #[test]
    fn schema_toml() {
        let schema = Schema::from_toml_str(
            r#"
            outcome = "y"
            [[factors]]
            name = "w1"
            kind = "discrete"
            levels = ["a", "b"]
            [[factors]]
            name = "w2"
            kind = "continuous"
            "#,
        )
        .unwrap();
        assert_eq!(schema.factors.len(), 2);
        assert_eq!(schema.factors[1].kind, Some(DeclaredKind::Continuous));
    }

    #[test]
    fn validation_idempotent() {
        let ds = Dataset::new(
            "y",
            vec![0.1, 0.2, 1.0 / 3.0, -7.25],
            vec![
                Factor::discrete_codes("a", 3, &[0, 2, 1, 2]),
                Factor::continuous("b", vec![0.5, 1e-9, -2.0 / 7.0, 3.0]),
            ],
        )
        .unwrap();
        let again = validate_dataset(&ds.to_raw(), &ds.schema()).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn csv_round_trip() {
        let ds = Dataset::new(
            "y",
            vec![1.5, 2.0, -0.25],
            vec![Factor::discrete(
                "a",
                vec!["p".into(), "q".into()],
                &[0, 1, 1],
            )],
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::from_csv_reader(buf.as_slice(), &ds.schema()).unwrap();
        assert_eq!(ds, back);
    }
}
