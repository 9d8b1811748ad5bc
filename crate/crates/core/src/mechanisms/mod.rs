//! Pure ε-DP estimators for the five query variants.
//!
//! Every mechanism first reduces the filtered data to exact sufficient
//! statistics ([`Prepared`]) and then perturbs those with Laplace noise.
//! Adjacency is add/remove one record, so the record count itself is
//! sensitive and is never released without noise.

mod laplace;
mod ols;
mod quantile;

pub use laplace::laplace_sample;
pub(crate) use laplace::laplace;
pub(crate) use ols::{rescale_coefficients, solve_gram};
pub(crate) use quantile::invert_noisy_bins;

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{scale_unit, unscale_unit, DataError, Dataset, Filter, Query, QueryKind, Schema, StatisticKind};
use crate::ids::QueryId;
use crate::rng::RandomSource;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("noise scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("invalid mechanism configuration: {0}")]
    InvalidConfig(String),
}

/// Privacy loss of one mechanism run (pure ε-DP, δ = 0).
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PrivacyCost(f64);

impl PrivacyCost {
    pub fn new(epsilon: f64) -> Result<Self, MechanismError> {
        if epsilon > 0.0 && epsilon.is_finite() {
            Ok(PrivacyCost(epsilon))
        } else {
            Err(MechanismError::InvalidEpsilon(epsilon))
        }
    }

    pub fn epsilon(self) -> f64 {
        self.0
    }

    /// Basic sequential composition.
    pub fn sum<I: IntoIterator<Item = PrivacyCost>>(costs: I) -> f64 {
        costs.into_iter().map(|c| c.0).sum()
    }
}

impl TryFrom<f64> for PrivacyCost {
    type Error = MechanismError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        PrivacyCost::new(v)
    }
}

impl From<PrivacyCost> for f64 {
    fn from(c: PrivacyCost) -> f64 {
        c.0
    }
}

impl fmt::Display for PrivacyCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MechanismConfig {
    /// Share of a mean query's ε spent on the noisy sum; the rest goes to the count.
    pub mean_split: f64,
    /// Equal-width bins used by the quantile mechanism.
    pub k_bins: usize,
    /// Eigenvalues of the regression design block below this are treated as zero.
    pub eigen_floor: f64,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        MechanismConfig { mean_split: 0.5, k_bins: 1024, eigen_floor: 1e-6 }
    }
}

impl MechanismConfig {
    pub fn validate(&self) -> Result<(), MechanismError> {
        if !(self.mean_split > 0.0 && self.mean_split < 1.0) {
            return Err(MechanismError::InvalidConfig(format!("mean_split {} not in (0, 1)", self.mean_split)));
        }
        if self.k_bins < 2 {
            return Err(MechanismError::InvalidConfig("k_bins must be at least 2".into()));
        }
        if !(self.eigen_floor > 0.0 && self.eigen_floor.is_finite()) {
            return Err(MechanismError::InvalidConfig("eigen_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Released value(s) with component labels: the statistic name for scalars,
/// category labels for histograms, `intercept` plus predictor names for OLS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

impl Estimate {
    fn scalar(label: &str, value: f64) -> Self {
        Estimate { labels: vec![label.to_string()], values: vec![value] }
    }

    pub fn scalar_value(&self) -> f64 {
        self.values[0]
    }
}

/// One group of perturbed quantities sharing a noise scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseComponent {
    pub quantity: String,
    pub entries: usize,
    pub scale: f64,
    pub epsilon: f64,
}

/// Mechanism-specific noisy intermediates and flags. Everything here is
/// derived from noisy values or public metadata, so it is safe to keep with
/// the release and to post-process (bootstrap intervals).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "statistic", rename_all = "snake_case")]
pub enum NoiseDetail {
    Count,
    Histogram,
    Mean {
        split: f64,
        lower: f64,
        upper: f64,
        noisy_sum_unit: f64,
        noisy_count: f64,
        denominator_clamped: bool,
    },
    Quantile {
        q: f64,
        k_bins: usize,
        lower: f64,
        upper: f64,
        noisy_bins: Vec<f64>,
        total_clamped: bool,
    },
    Ols {
        entries: usize,
        entry_scale: f64,
        eigen_floor: f64,
        clipping_activated: bool,
        rank_deficient: bool,
        dim: usize,
        noisy_gram: Vec<f64>,
        predictor_bounds: Vec<(f64, f64)>,
        outcome_bounds: (f64, f64),
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub family: String,
    pub components: Vec<NoiseComponent>,
    pub noise_off: bool,
    pub detail: NoiseDetail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismResult {
    pub query_id: QueryId,
    pub statistic: StatisticKind,
    pub estimate: Estimate,
    pub noise_model: NoiseModel,
    pub cost: PrivacyCost,
}

/// L1 sensitivity under add/remove-one-record adjacency.
#[derive(Clone, Debug, PartialEq)]
pub enum Sensitivity {
    Scalar(f64),
    /// One bound per separately perturbed quantity.
    PerComponent(Vec<f64>),
}

impl Sensitivity {
    pub fn total(&self) -> f64 {
        match self {
            Sensitivity::Scalar(s) => *s,
            Sensitivity::PerComponent(v) => v.iter().sum(),
        }
    }
}

/// Number of unique entries of the symmetric augmented Gram matrix for `d` predictors.
pub fn gram_entries(d: usize) -> usize {
    (d + 2) * (d + 3) / 2
}

pub fn l1_sensitivity(query: &Query, schema: &Schema) -> Result<Sensitivity, MechanismError> {
    query.validate(schema)?;
    Ok(match &query.kind {
        QueryKind::Count { .. } | QueryKind::Histogram { .. } | QueryKind::Quantile { .. } => Sensitivity::Scalar(1.0),
        // noisy sum of [0,1]-scaled values, noisy count
        QueryKind::Mean { .. } => Sensitivity::PerComponent(vec![1.0, 1.0]),
        QueryKind::Ols { predictors, .. } => Sensitivity::PerComponent(vec![1.0; gram_entries(predictors.len())]),
    })
}

/// Exact sufficient statistics of a filtered query, before any noise.
#[derive(Clone, Debug)]
pub(crate) enum Prepared {
    Count {
        count: f64,
    },
    Histogram {
        labels: Vec<String>,
        cells: Vec<f64>,
    },
    Mean {
        lower: f64,
        upper: f64,
        sum_unit: f64,
        count: f64,
    },
    Quantile {
        q: f64,
        lower: f64,
        upper: f64,
        bins: Vec<f64>,
    },
    Ols {
        labels: Vec<String>,
        gram: DMatrix<f64>,
        count: f64,
        predictor_bounds: Vec<(f64, f64)>,
        outcome_bounds: (f64, f64),
    },
}

impl Prepared {
    pub(crate) fn build(query: &Query, data: &Dataset, config: &MechanismConfig) -> Result<Self, MechanismError> {
        config.validate()?;
        let schema = data.schema();
        query.validate(schema)?;
        let rows = query.filter().matching_rows(data)?;
        Ok(match &query.kind {
            QueryKind::Count { .. } => Prepared::Count { count: rows.len() as f64 },
            QueryKind::Histogram { column, .. } => {
                let (idx, cats) = schema.categorical_column(column)?;
                let col = data.categorical(idx);
                let mut cells = vec![0.0; cats.len()];
                for &r in &rows {
                    cells[col[r] as usize] += 1.0;
                }
                Prepared::Histogram { labels: cats.to_vec(), cells }
            }
            QueryKind::Mean { column, .. } => {
                let (idx, lower, upper) = schema.numeric_column(column)?;
                let col = data.numeric(idx);
                let mut sum_unit = 0.0;
                for &r in &rows {
                    sum_unit += scale_unit(col[r], lower, upper)?;
                }
                Prepared::Mean { lower, upper, sum_unit, count: rows.len() as f64 }
            }
            QueryKind::Quantile { column, q, .. } => {
                let (idx, lower, upper) = schema.numeric_column(column)?;
                let col = data.numeric(idx);
                let k = config.k_bins;
                let mut bins = vec![0.0; k];
                for &r in &rows {
                    let u = scale_unit(col[r], lower, upper)?;
                    let b = ((u * k as f64) as usize).min(k - 1);
                    bins[b] += 1.0;
                }
                Prepared::Quantile { q: *q, lower, upper, bins }
            }
            QueryKind::Ols { outcome, predictors, .. } => {
                let mut cols = Vec::with_capacity(predictors.len() + 1);
                let mut predictor_bounds = Vec::with_capacity(predictors.len());
                for p in predictors {
                    let (idx, l, u) = schema.numeric_column(p)?;
                    cols.push((data.numeric(idx), l, u));
                    predictor_bounds.push((l, u));
                }
                let (yi, yl, yu) = schema.numeric_column(outcome)?;
                cols.push((data.numeric(yi), yl, yu));
                let dim = predictors.len() + 2;
                let mut gram = DMatrix::<f64>::zeros(dim, dim);
                let mut z = vec![0.0; dim];
                z[0] = 1.0;
                for &r in &rows {
                    for (j, (col, l, u)) in cols.iter().enumerate() {
                        z[j + 1] = scale_unit(col[r], *l, *u)?;
                    }
                    for a in 0..dim {
                        for b in a..dim {
                            gram[(a, b)] += z[a] * z[b];
                        }
                    }
                }
                for a in 0..dim {
                    for b in 0..a {
                        gram[(a, b)] = gram[(b, a)];
                    }
                }
                let mut labels = vec!["intercept".to_string()];
                labels.extend(predictors.iter().cloned());
                Prepared::Ols { labels, gram, count: rows.len() as f64, predictor_bounds, outcome_bounds: (yl, yu) }
            }
        })
    }

    /// Size of the filtered subset. Only ever shown to reviewers.
    pub(crate) fn subset_size(&self) -> f64 {
        match self {
            Prepared::Count { count } | Prepared::Mean { count, .. } | Prepared::Ols { count, .. } => *count,
            Prepared::Histogram { cells, .. } => cells.iter().sum(),
            Prepared::Quantile { bins, .. } => bins.iter().sum(),
        }
    }

    pub(crate) fn privatize(
        &self,
        query_id: &QueryId,
        epsilon: PrivacyCost,
        rng: &mut RandomSource,
        config: &MechanismConfig,
    ) -> MechanismResult {
        let eps = epsilon.epsilon();
        let noise_off = rng.is_noise_off();
        let component = |quantity: &str, entries: usize, scale: f64, epsilon: f64| NoiseComponent {
            quantity: quantity.to_string(),
            entries,
            scale,
            epsilon,
        };
        let (statistic, estimate, components, detail) = match self {
            Prepared::Count { count } => {
                let scale = 1.0 / eps;
                let value = count + laplace(scale, rng);
                (
                    StatisticKind::Count,
                    Estimate::scalar("count", value),
                    vec![component("count", 1, scale, eps)],
                    NoiseDetail::Count,
                )
            }
            Prepared::Histogram { labels, cells } => {
                let scale = 1.0 / eps;
                let values = cells.iter().map(|c| c + laplace(scale, rng)).collect();
                (
                    StatisticKind::Histogram,
                    Estimate { labels: labels.clone(), values },
                    vec![component("cell counts", cells.len(), scale, eps)],
                    NoiseDetail::Histogram,
                )
            }
            Prepared::Mean { lower, upper, sum_unit, count } => {
                let eps_sum = eps * config.mean_split;
                let eps_count = eps - eps_sum;
                let (sum_scale, count_scale) = (1.0 / eps_sum, 1.0 / eps_count);
                let noisy_sum_unit = sum_unit + laplace(sum_scale, rng);
                let noisy_count = count + laplace(count_scale, rng);
                let (mean_unit, denominator_clamped) = ratio(noisy_sum_unit, noisy_count);
                (
                    StatisticKind::Mean,
                    Estimate::scalar("mean", unscale_unit(mean_unit, *lower, *upper)),
                    vec![
                        component("sum of unit-scaled values", 1, sum_scale, eps_sum),
                        component("count", 1, count_scale, eps_count),
                    ],
                    NoiseDetail::Mean {
                        split: config.mean_split,
                        lower: *lower,
                        upper: *upper,
                        noisy_sum_unit,
                        noisy_count,
                        denominator_clamped,
                    },
                )
            }
            Prepared::Quantile { q, lower, upper, bins } => {
                let scale = 1.0 / eps;
                let noisy_bins: Vec<f64> = bins.iter().map(|c| c + laplace(scale, rng)).collect();
                let (value, total_clamped) = invert_noisy_bins(&noisy_bins, *q, *lower, *upper);
                (
                    StatisticKind::Quantile,
                    Estimate::scalar("quantile", value),
                    vec![component("bin counts", bins.len(), scale, eps)],
                    NoiseDetail::Quantile {
                        q: *q,
                        k_bins: bins.len(),
                        lower: *lower,
                        upper: *upper,
                        noisy_bins,
                        total_clamped,
                    },
                )
            }
            Prepared::Ols { labels, gram, predictor_bounds, outcome_bounds, .. } => {
                let dim = gram.nrows();
                let entries = gram_entries(dim - 2);
                let scale = entries as f64 / eps;
                let mut noisy = gram.clone();
                for a in 0..dim {
                    for b in a..dim {
                        let v = gram[(a, b)] + laplace(scale, rng);
                        noisy[(a, b)] = v;
                        noisy[(b, a)] = v;
                    }
                }
                let solution = solve_gram(&noisy, config.eigen_floor);
                let values = rescale_coefficients(&solution.coefficients, predictor_bounds, *outcome_bounds);
                (
                    StatisticKind::Ols,
                    Estimate { labels: labels.clone(), values },
                    vec![component("augmented Gram entries", entries, scale, eps / entries as f64)],
                    NoiseDetail::Ols {
                        entries,
                        entry_scale: scale,
                        eigen_floor: config.eigen_floor,
                        clipping_activated: solution.clipping_activated,
                        rank_deficient: solution.rank_deficient,
                        dim,
                        noisy_gram: noisy.transpose().as_slice().to_vec(),
                        predictor_bounds: predictor_bounds.clone(),
                        outcome_bounds: *outcome_bounds,
                    },
                )
            }
        };
        MechanismResult {
            query_id: query_id.clone(),
            statistic,
            estimate,
            noise_model: NoiseModel { family: "laplace".to_string(), components, noise_off, detail },
            cost: epsilon,
        }
    }
}

/// Noisy ratio with the denominator clamped below at 1.
pub(crate) fn ratio(numerator: f64, denominator: f64) -> (f64, bool) {
    if denominator < 1.0 {
        (numerator, true)
    } else {
        (numerator / denominator, false)
    }
}

/// Runs any query variant at the given ε.
pub fn run_query(
    query: &Query,
    data: &Dataset,
    epsilon: PrivacyCost,
    rng: &mut RandomSource,
    config: &MechanismConfig,
) -> Result<MechanismResult, MechanismError> {
    let prepared = Prepared::build(query, data, config)?;
    Ok(prepared.privatize(&query.query_id, epsilon, rng, config))
}

/// Noisy filtered count: true count plus Laplace(1/ε).
pub fn dp_count(
    data: &Dataset,
    filter: &Filter,
    epsilon: PrivacyCost,
    rng: &mut RandomSource,
) -> Result<MechanismResult, MechanismError> {
    let q = Query::new("count", QueryKind::Count { filter: filter.clone() });
    run_query(&q, data, epsilon, rng, &MechanismConfig::default())
}

/// Per-category noisy counts over the public category list. Cells are
/// disjoint, so all of them share the single ε.
pub fn dp_histogram(
    data: &Dataset,
    column: &str,
    filter: &Filter,
    epsilon: PrivacyCost,
    rng: &mut RandomSource,
) -> Result<MechanismResult, MechanismError> {
    let q = Query::new("histogram", QueryKind::Histogram { column: column.to_string(), filter: filter.clone() });
    run_query(&q, data, epsilon, rng, &MechanismConfig::default())
}

/// Noisy-sum over noisy-count ratio on unit-scaled values, rescaled to the
/// column's units. ε is split evenly between the two.
pub fn dp_mean(
    data: &Dataset,
    column: &str,
    filter: &Filter,
    epsilon: PrivacyCost,
    rng: &mut RandomSource,
) -> Result<MechanismResult, MechanismError> {
    let q = Query::new("mean", QueryKind::Mean { column: column.to_string(), filter: filter.clone() });
    run_query(&q, data, epsilon, rng, &MechanismConfig::default())
}

/// Quantile by inverting a noisy equal-width binned CDF; returns the midpoint
/// of the selected bin.
pub fn dp_quantile(
    data: &Dataset,
    column: &str,
    q: f64,
    filter: &Filter,
    epsilon: PrivacyCost,
    rng: &mut RandomSource,
    k_bins: usize,
) -> Result<MechanismResult, MechanismError> {
    let query = Query::new("quantile", QueryKind::Quantile { column: column.to_string(), q, filter: filter.clone() });
    let config = MechanismConfig { k_bins, ..MechanismConfig::default() };
    run_query(&query, data, epsilon, rng, &config)
}

/// Least squares from a perturbed augmented Gram matrix of unit-scaled
/// variables; coefficients come back in original units, intercept first.
pub fn dp_ols(
    data: &Dataset,
    outcome: &str,
    predictors: &[&str],
    filter: &Filter,
    epsilon: PrivacyCost,
    rng: &mut RandomSource,
) -> Result<MechanismResult, MechanismError> {
    let query = Query::new(
        "ols",
        QueryKind::Ols {
            outcome: outcome.to_string(),
            predictors: predictors.iter().map(|p| p.to_string()).collect(),
            filter: filter.clone(),
        },
    );
    run_query(&query, data, epsilon, rng, &MechanismConfig::default())
}
