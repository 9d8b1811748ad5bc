use serde::{Deserialize, Serialize};

use super::dataset::{ColumnData, Dataset};
use super::schema::Schema;
use super::DataError;

/// One conjunct of a [`Filter`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Predicate {
    Eq { column: String, value: String },
    Ne { column: String, value: String },
    Ge { column: String, value: f64 },
    Le { column: String, value: f64 },
    Range { column: String, lo: f64, hi: f64 },
}

impl Predicate {
    pub fn column(&self) -> &str {
        match self {
            Predicate::Eq { column, .. }
            | Predicate::Ne { column, .. }
            | Predicate::Ge { column, .. }
            | Predicate::Le { column, .. }
            | Predicate::Range { column, .. } => column,
        }
    }

    fn validate(&self, schema: &Schema) -> Result<(), DataError> {
        let column = self.column();
        match self {
            Predicate::Eq { value, .. } | Predicate::Ne { value, .. } => {
                let (_, cats) = schema.categorical_column(column)?;
                if !cats.iter().any(|c| c == value) {
                    return Err(DataError::InvalidOperand {
                        column: column.to_string(),
                        detail: format!("`{value}` is not a declared category"),
                    });
                }
            }
            Predicate::Ge { value, .. } | Predicate::Le { value, .. } => {
                let (_, lo, hi) = schema.numeric_column(column)?;
                check_in_domain(column, *value, lo, hi)?;
            }
            Predicate::Range { lo, hi, .. } => {
                let (_, l, u) = schema.numeric_column(column)?;
                check_in_domain(column, *lo, l, u)?;
                check_in_domain(column, *hi, l, u)?;
                if lo > hi {
                    return Err(DataError::InvalidOperand {
                        column: column.to_string(),
                        detail: format!("range lower {lo} exceeds upper {hi}"),
                    });
                }
            }
        }
        Ok(())
    }
}

fn check_in_domain(column: &str, v: f64, lo: f64, hi: f64) -> Result<(), DataError> {
    if (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(DataError::InvalidOperand {
            column: column.to_string(),
            detail: format!("{v} outside declared bounds [{lo}, {hi}]"),
        })
    }
}

/// Conjunction of predicates. The empty filter selects every row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Filter {
    pub conjuncts: Vec<Predicate>,
}

impl Filter {
    pub fn all() -> Self {
        Filter::default()
    }

    pub fn and(mut self, p: Predicate) -> Self {
        self.conjuncts.push(p);
        self
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), DataError> {
        self.conjuncts.iter().try_for_each(|p| p.validate(schema))
    }

    /// Indexes of matching rows, in order.
    pub(crate) fn matching_rows(&self, data: &Dataset) -> Result<Vec<usize>, DataError> {
        let schema = data.schema();
        self.validate(schema)?;
        let mut keep = vec![true; data.len()];
        for p in &self.conjuncts {
            let idx = schema.column(p.column())?.0;
            match (p, data.column_data(idx)) {
                (Predicate::Eq { value, .. }, ColumnData::Categorical(v))
                | (Predicate::Ne { value, .. }, ColumnData::Categorical(v)) => {
                    let target = schema.columns[idx]
                        .categories()
                        .and_then(|c| c.iter().position(|x| x == value))
                        .expect("validated") as u32;
                    let want_eq = matches!(p, Predicate::Eq { .. });
                    for (k, &cell) in keep.iter_mut().zip(v) {
                        *k &= (cell == target) == want_eq;
                    }
                }
                (Predicate::Ge { value, .. }, ColumnData::Numeric(v)) => {
                    for (k, &cell) in keep.iter_mut().zip(v) {
                        *k &= cell >= *value;
                    }
                }
                (Predicate::Le { value, .. }, ColumnData::Numeric(v)) => {
                    for (k, &cell) in keep.iter_mut().zip(v) {
                        *k &= cell <= *value;
                    }
                }
                (Predicate::Range { lo, hi, .. }, ColumnData::Numeric(v)) => {
                    for (k, &cell) in keep.iter_mut().zip(v) {
                        *k &= (*lo..=*hi).contains(&cell);
                    }
                }
                _ => unreachable!("kinds checked by validate"),
            }
        }
        Ok(keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect())
    }
}

/// Rows satisfying every conjunct, order preserved, same schema.
pub fn apply_filter(data: &Dataset, filter: &Filter) -> Result<Dataset, DataError> {
    if filter.conjuncts.is_empty() {
        return Ok(data.clone());
    }
    let rows = filter.matching_rows(data)?;
    Ok(data.select_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CellValue, ColumnSpec};
    use proptest::prelude::*;

    fn people(ages: &[f64]) -> Dataset {
        let schema = Schema::new(
            "people",
            vec![ColumnSpec::numeric("age", 0.0, 120.0), ColumnSpec::categorical("group", ["A", "B"])],
        )
        .unwrap();
        let rows = ages
            .iter()
            .enumerate()
            .map(|(i, &a)| vec![CellValue::Num(a), CellValue::Cat(if i % 2 == 0 { "A" } else { "B" }.into())])
            .collect();
        Dataset::from_rows(schema, rows, false).unwrap()
    }

    fn ge(v: f64) -> Predicate {
        Predicate::Ge { column: "age".into(), value: v }
    }

    #[test]
    fn single_predicate() {
        let d = people(&[25.0, 34.0, 61.0]);
        let out = apply_filter(&d, &Filter::all().and(ge(30.0))).unwrap();
        assert_eq!(out.numeric(0), &[34.0, 61.0]);
    }

    #[test]
    fn empty_filter_is_identity() {
        let d = people(&[25.0, 34.0, 61.0]);
        assert_eq!(apply_filter(&d, &Filter::all()).unwrap(), d);
    }

    #[test]
    fn contradictory_conjuncts() {
        let d = people(&[25.0, 34.0, 61.0]);
        let f = Filter::all().and(ge(30.0)).and(Predicate::Le { column: "age".into(), value: 20.0 });
        assert!(apply_filter(&d, &f).unwrap().is_empty());
    }

    #[test]
    fn categorical_predicates() {
        let d = people(&[1.0, 2.0, 3.0, 4.0]);
        let eq = Filter::all().and(Predicate::Eq { column: "group".into(), value: "A".into() });
        assert_eq!(apply_filter(&d, &eq).unwrap().numeric(0), &[1.0, 3.0]);
        let ne = Filter::all().and(Predicate::Ne { column: "group".into(), value: "A".into() });
        assert_eq!(apply_filter(&d, &ne).unwrap().numeric(0), &[2.0, 4.0]);
    }

    #[test]
    fn validation_failures() {
        let d = people(&[1.0]);
        let unknown = Filter::all().and(Predicate::Ge { column: "height".into(), value: 1.0 });
        assert_eq!(apply_filter(&d, &unknown).unwrap_err(), DataError::UnknownColumn("height".into()));
        let kind = Filter::all().and(Predicate::Ge { column: "group".into(), value: 1.0 });
        assert!(matches!(apply_filter(&d, &kind), Err(DataError::KindMismatch { .. })));
        let range = Filter::all().and(Predicate::Range { column: "age".into(), lo: 50.0, hi: 10.0 });
        assert!(matches!(apply_filter(&d, &range), Err(DataError::InvalidOperand { .. })));
        let label = Filter::all().and(Predicate::Eq { column: "group".into(), value: "Z".into() });
        assert!(matches!(apply_filter(&d, &label), Err(DataError::InvalidOperand { .. })));
    }

    #[test]
    fn filter_json_shape() {
        let f: Filter = serde_json::from_str(
            r#"[{"op":"eq","column":"group","value":"A"},{"op":"range","column":"age","lo":1,"hi":2}]"#,
        )
        .unwrap();
        assert_eq!(f.conjuncts.len(), 2);
    }

    proptest! {
        #[test]
        fn idempotent_and_shrinking(
            ages in prop::collection::vec(0.0f64..120.0, 0..60),
            lo in 0.0f64..120.0,
        ) {
            let d = people(&ages);
            let f = Filter::all().and(ge(lo));
            let once = apply_filter(&d, &f).unwrap();
            let twice = apply_filter(&once, &f).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.len() <= d.len());
            let all_match = ages.iter().all(|&a| a >= lo);
            prop_assert_eq!(once.len() == d.len(), all_match);
        }
    }
}
