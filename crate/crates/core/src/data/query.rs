use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::filter::Filter;
use super::schema::Schema;
use super::DataError;
use crate::ids::QueryId;

/// A statistic request as it arrives from the API.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: QueryId,
    #[serde(flatten)]
    pub kind: QueryKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "statistic", rename_all = "snake_case")]
pub enum QueryKind {
    Count {
        #[serde(default)]
        filter: Filter,
    },
    Histogram {
        column: String,
        #[serde(default)]
        filter: Filter,
    },
    Mean {
        column: String,
        #[serde(default)]
        filter: Filter,
    },
    Quantile {
        column: String,
        q: f64,
        #[serde(default)]
        filter: Filter,
    },
    Ols {
        outcome: String,
        predictors: Vec<String>,
        #[serde(default)]
        filter: Filter,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    Count,
    Histogram,
    Mean,
    Quantile,
    Ols,
}

impl StatisticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StatisticKind::Count => "count",
            StatisticKind::Histogram => "histogram",
            StatisticKind::Mean => "mean",
            StatisticKind::Quantile => "quantile",
            StatisticKind::Ols => "ols",
        }
    }
}

impl Query {
    pub fn new(query_id: impl Into<QueryId>, kind: QueryKind) -> Self {
        Query { query_id: query_id.into(), kind }
    }

    pub fn count(query_id: impl Into<QueryId>, filter: Filter) -> Self {
        Query::new(query_id, QueryKind::Count { filter })
    }

    pub fn statistic(&self) -> StatisticKind {
        match self.kind {
            QueryKind::Count { .. } => StatisticKind::Count,
            QueryKind::Histogram { .. } => StatisticKind::Histogram,
            QueryKind::Mean { .. } => StatisticKind::Mean,
            QueryKind::Quantile { .. } => StatisticKind::Quantile,
            QueryKind::Ols { .. } => StatisticKind::Ols,
        }
    }

    pub fn filter(&self) -> &Filter {
        match &self.kind {
            QueryKind::Count { filter }
            | QueryKind::Histogram { filter, .. }
            | QueryKind::Mean { filter, .. }
            | QueryKind::Quantile { filter, .. }
            | QueryKind::Ols { filter, .. } => filter,
        }
    }

    /// Checks the query against a (public) schema.
    pub fn validate(&self, schema: &Schema) -> Result<(), DataError> {
        if !self.query_id.is_valid() {
            return Err(DataError::InvalidQuery(format!("invalid query id `{}`", self.query_id)));
        }
        match &self.kind {
            QueryKind::Count { .. } => {}
            QueryKind::Histogram { column, .. } => {
                schema.categorical_column(column)?;
            }
            QueryKind::Mean { column, .. } => {
                schema.numeric_column(column)?;
            }
            QueryKind::Quantile { column, q, .. } => {
                schema.numeric_column(column)?;
                if !(*q > 0.0 && *q < 1.0) {
                    return Err(DataError::InvalidQuery(format!("quantile level {q} not in (0, 1)")));
                }
            }
            QueryKind::Ols { outcome, predictors, .. } => {
                schema.numeric_column(outcome)?;
                if predictors.is_empty() {
                    return Err(DataError::InvalidQuery("regression needs at least one predictor".into()));
                }
                let mut seen = HashSet::new();
                for p in predictors {
                    schema.numeric_column(p)?;
                    if p == outcome {
                        return Err(DataError::InvalidQuery(format!("predictor `{p}` is the outcome")));
                    }
                    if !seen.insert(p) {
                        return Err(DataError::InvalidQuery(format!("predictor `{p}` repeated")));
                    }
                }
            }
        }
        self.filter().validate(schema)
    }
}
