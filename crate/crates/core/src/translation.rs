//! Accuracy requirements in, ε out.
//!
//! An [`AccuracySpec`] asks that the released value lie within `alpha` of the
//! same-data noise-off value with probability at least `1 - beta`. Counts and
//! histograms invert the Laplace tail in closed form; means, quantiles and
//! regressions bisect over ε, simulating the mechanism on public synthetic
//! data at each candidate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, PublicDataset, Query, QueryKind, StatisticKind};
use crate::mechanisms::{MechanismConfig, MechanismError, NoiseDetail, Prepared, PrivacyCost};
use crate::ids::QueryId;
use crate::rng::RandomSource;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TranslationError {
    #[error("invalid accuracy spec: {0}")]
    InvalidSpec(String),
    #[error("invalid translation settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
}

impl From<DataError> for TranslationError {
    fn from(e: DataError) -> Self {
        TranslationError::Mechanism(e.into())
    }
}

/// Which error a histogram's accuracy target bounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramTarget {
    /// Each cell separately within alpha.
    #[default]
    PerCell,
    /// All cells simultaneously within alpha.
    WholeQuery,
}

/// Margin `alpha` in the statistic's units (rank fraction for quantiles),
/// attained with probability `1 - beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySpec {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub target: HistogramTarget,
}

impl AccuracySpec {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, TranslationError> {
        let spec = AccuracySpec { alpha, beta, target: HistogramTarget::PerCell };
        spec.validate()?;
        Ok(spec)
    }

    pub fn whole_query(mut self) -> Self {
        self.target = HistogramTarget::WholeQuery;
        self
    }

    pub fn confidence(&self) -> f64 {
        1.0 - self.beta
    }

    pub fn validate(&self) -> Result<(), TranslationError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(TranslationError::InvalidSpec(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(TranslationError::InvalidSpec(format!("beta must be in (0, 1), got {}", self.beta)));
        }
        Ok(())
    }

    /// True when `self` is no stricter than `other` on both axes and keeps
    /// the same histogram target.
    pub fn relaxes(&self, other: &AccuracySpec) -> bool {
        self.alpha >= other.alpha && self.beta >= other.beta && self.target == other.target
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationMethod {
    ClosedForm,
    Simulation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub attainment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationDetail {
    pub n_sims: usize,
    pub bracket: (f64, f64),
    pub achieved_attainment: f64,
    /// Every evaluated candidate, sorted by ε.
    pub curve: Vec<CurvePoint>,
    /// Adjacent curve points where attainment dropped as ε grew.
    pub monotonicity_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationResult {
    pub query_id: QueryId,
    pub epsilon: PrivacyCost,
    pub method: TranslationMethod,
    pub simulation: Option<SimulationDetail>,
}

/// Returned when even the top of the ε bracket misses the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Infeasible {
    pub query_id: QueryId,
    pub best_attainment: f64,
    pub required: f64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Translation {
    Feasible(TranslationResult),
    Infeasible(Infeasible),
}

impl Translation {
    pub fn epsilon(&self) -> Option<PrivacyCost> {
        match self {
            Translation::Feasible(t) => Some(t.epsilon),
            Translation::Infeasible(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSettings {
    pub eps_lo: f64,
    pub eps_hi: f64,
    pub n_sims: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings { eps_lo: 0.001, eps_hi: 100.0, n_sims: 2000, tolerance: 0.02, max_iterations: 60 }
    }
}

impl SimulationSettings {
    pub fn validate(&self) -> Result<(), TranslationError> {
        if !(self.eps_lo > 0.0 && self.eps_lo < self.eps_hi && self.eps_hi.is_finite()) {
            return Err(TranslationError::InvalidSettings("need 0 < eps_lo < eps_hi".into()));
        }
        if self.n_sims == 0 || self.max_iterations == 0 {
            return Err(TranslationError::InvalidSettings("n_sims and max_iterations must be positive".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(TranslationError::InvalidSettings("tolerance must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// ε such that `P(|Laplace(1/ε)| > alpha) = beta`, i.e. `ln(1/beta) / alpha`.
pub fn epsilon_for_count(spec: &AccuracySpec) -> Result<PrivacyCost, TranslationError> {
    spec.validate()?;
    Ok(PrivacyCost::new((1.0 / spec.beta).ln() / spec.alpha)?)
}

/// Per-cell target matches a count; the whole-query target takes a union
/// bound over `k_cells`: `ln(k / beta) / alpha`.
pub fn epsilon_for_histogram(spec: &AccuracySpec, k_cells: usize) -> Result<PrivacyCost, TranslationError> {
    spec.validate()?;
    if k_cells == 0 {
        return Err(TranslationError::InvalidSpec("histogram needs at least one cell".into()));
    }
    let numerator = match spec.target {
        HistogramTarget::PerCell => (1.0 / spec.beta).ln(),
        HistogramTarget::WholeQuery => (k_cells as f64 / spec.beta).ln(),
    };
    Ok(PrivacyCost::new(numerator / spec.alpha)?)
}

/// Translates any query; counts and histograms in closed form, everything
/// else by simulation on `synthetic`.
pub fn translate(
    query: &Query,
    spec: &AccuracySpec,
    synthetic: &PublicDataset,
    settings: &SimulationSettings,
    config: &MechanismConfig,
    rng: &mut RandomSource,
) -> Result<Translation, TranslationError> {
    spec.validate()?;
    query.validate(synthetic.schema())?;
    let closed = |epsilon| {
        Translation::Feasible(TranslationResult {
            query_id: query.query_id.clone(),
            epsilon,
            method: TranslationMethod::ClosedForm,
            simulation: None,
        })
    };
    match &query.kind {
        QueryKind::Count { .. } => Ok(closed(epsilon_for_count(spec)?)),
        QueryKind::Histogram { column, .. } => {
            let (_, cats) = synthetic.schema().categorical_column(column)?;
            Ok(closed(epsilon_for_histogram(spec, cats.len())?))
        }
        _ => epsilon_by_simulation(query, spec, synthetic, settings, config, rng),
    }
}

/// Attainment of one candidate ε: the fraction of simulated runs whose error
/// against the noise-off value is within `alpha`.
struct Simulator<'a> {
    prepared: Prepared,
    reference: Vec<f64>,
    statistic: StatisticKind,
    /// Sorted values of the quantile column in the filtered synthetic subset.
    rank_support: Vec<f64>,
    query_id: &'a QueryId,
    config: &'a MechanismConfig,
}

impl Simulator<'_> {
    fn error(&self, values: &[f64]) -> f64 {
        match self.statistic {
            StatisticKind::Quantile => (self.rank(values[0]) - self.rank(self.reference[0])).abs(),
            _ => values.iter().zip(&self.reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
        }
    }

    fn rank(&self, v: f64) -> f64 {
        if self.rank_support.is_empty() {
            return 0.0;
        }
        let below = self.rank_support.partition_point(|x| *x <= v);
        below as f64 / self.rank_support.len() as f64
    }

    fn attainment(&self, epsilon: f64, alpha: f64, n_sims: usize, seed: u64) -> f64 {
        let eps = PrivacyCost::new(epsilon).expect("bracket is positive");
        // Same seed at every candidate: common random numbers keep the
        // measured curve close to monotone.
        let mut rng = RandomSource::seeded(seed);
        let mut hits = 0usize;
        for _ in 0..n_sims {
            let r = self.prepared.privatize(self.query_id, eps, &mut rng, self.config);
            if self.error(&r.estimate.values) <= alpha {
                hits += 1;
            }
        }
        hits as f64 / n_sims as f64
    }
}

/// Bisection over ε on `[eps_lo, eps_hi]` (geometric midpoints).
///
/// Returns the smallest ε found whose attainment reaches the middle of the
/// acceptance band `[1 - beta, 1 - beta + tolerance]`, so re-running at the
/// returned ε with fresh noise stays inside the band.
pub fn epsilon_by_simulation(
    query: &Query,
    spec: &AccuracySpec,
    synthetic: &PublicDataset,
    settings: &SimulationSettings,
    config: &MechanismConfig,
    rng: &mut RandomSource,
) -> Result<Translation, TranslationError> {
    spec.validate()?;
    settings.validate()?;
    let sim = simulator(query, synthetic, config)?;
    let seed = rng.next_u64();
    let required = 1.0 - spec.beta;
    let aim = (required + settings.tolerance / 2.0).min(1.0);
    let mut curve = Vec::new();
    let measure = |eps: f64, curve: &mut Vec<CurvePoint>| {
        let a = sim.attainment(eps, spec.alpha, settings.n_sims, seed);
        curve.push(CurvePoint { epsilon: eps, attainment: a });
        a
    };

    let top = measure(settings.eps_hi, &mut curve);
    if top < required {
        sort_curve(&mut curve);
        return Ok(Translation::Infeasible(Infeasible {
            query_id: query.query_id.clone(),
            best_attainment: top,
            required,
            curve,
        }));
    }
    let bottom = measure(settings.eps_lo, &mut curve);
    let (mut lo, mut hi, mut hi_att) = (settings.eps_lo, settings.eps_hi, top);
    if bottom >= aim {
        hi = lo;
        hi_att = bottom;
    } else {
        for _ in 0..settings.max_iterations {
            if hi / lo < 1.0 + 1e-3 {
                break;
            }
            let mid = (lo * hi).sqrt();
            let a = measure(mid, &mut curve);
            if a >= aim {
                hi = mid;
                hi_att = a;
            } else {
                lo = mid;
            }
        }
    }
    sort_curve(&mut curve);
    let violations = curve.windows(2).filter(|w| w[1].attainment + 1e-12 < w[0].attainment).count();
    Ok(Translation::Feasible(TranslationResult {
        query_id: query.query_id.clone(),
        epsilon: PrivacyCost::new(hi)?,
        method: TranslationMethod::Simulation,
        simulation: Some(SimulationDetail {
            n_sims: settings.n_sims,
            bracket: (settings.eps_lo, settings.eps_hi),
            achieved_attainment: hi_att,
            curve,
            monotonicity_violations: violations,
        }),
    }))
}

fn sort_curve(curve: &mut [CurvePoint]) {
    curve.sort_by(|a, b| a.epsilon.partial_cmp(&b.epsilon).expect("finite"));
}

fn simulator<'a>(
    query: &'a Query,
    synthetic: &PublicDataset,
    config: &'a MechanismConfig,
) -> Result<Simulator<'a>, TranslationError> {
    let prepared = Prepared::build(query, synthetic, config)?;
    let reference = prepared
        .privatize(&query.query_id, PrivacyCost::new(1.0)?, &mut RandomSource::exact(), config)
        .estimate
        .values;
    let mut rank_support = Vec::new();
    if let QueryKind::Quantile { column, .. } = &query.kind {
        let rows = query.filter().matching_rows(synthetic)?;
        let (idx, _, _) = synthetic.schema().numeric_column(column)?;
        let col = synthetic.numeric(idx);
        rank_support = rows.iter().map(|&r| col[r]).collect();
        rank_support.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    }
    Ok(Simulator { prepared, reference, statistic: query.statistic(), rank_support, query_id: &query.query_id, config })
}

/// Measures attainment at a fixed ε with a fresh seed; used to check a
/// translation by re-simulation.
pub fn simulate_attainment(
    query: &Query,
    spec: &AccuracySpec,
    synthetic: &PublicDataset,
    epsilon: PrivacyCost,
    n_sims: usize,
    config: &MechanismConfig,
    seed: u64,
) -> Result<f64, TranslationError> {
    spec.validate()?;
    let sim = simulator(query, synthetic, config)?;
    Ok(sim.attainment(epsilon.epsilon(), spec.alpha, n_sims, seed))
}

/// One row of the accuracy preview shown before submission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreviewRow {
    pub query_id: QueryId,
    pub statistic: StatisticKind,
    pub labels: Vec<String>,
    /// Noise-off value on the synthetic data.
    pub synthetic_value: Vec<f64>,
    /// One seeded noisy draw at the translated ε; absent when infeasible.
    pub noisy_draw: Option<Vec<f64>>,
    pub ci_half_width: Option<f64>,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<PrivacyCost>,
    pub method: Option<TranslationMethod>,
    /// Set when the requested accuracy cannot be met; prompts the researcher
    /// to relax alpha or beta.
    pub infeasible: Option<Infeasible>,
}

/// Builds the preview table on public synthetic data. Consumes no budget.
pub fn preview_outputs(
    queries: &[Query],
    specs: &[AccuracySpec],
    synthetic: &PublicDataset,
    seed: u64,
    settings: &SimulationSettings,
    config: &MechanismConfig,
) -> Result<Vec<PreviewRow>, TranslationError> {
    if queries.len() != specs.len() {
        return Err(TranslationError::InvalidSpec(format!(
            "{} queries but {} accuracy specs",
            queries.len(),
            specs.len()
        )));
    }
    let mut root = RandomSource::seeded(seed);
    let mut rows = Vec::with_capacity(queries.len());
    for (query, spec) in queries.iter().zip(specs) {
        let mut translate_rng = root.fork();
        let mut draw_rng = root.fork();
        let prepared = Prepared::build(query, synthetic, config)?;
        let exact = prepared.privatize(&query.query_id, PrivacyCost::new(1.0)?, &mut RandomSource::exact(), config);
        let translation = translate(query, spec, synthetic, settings, config, &mut translate_rng)?;
        let mut row = PreviewRow {
            query_id: query.query_id.clone(),
            statistic: query.statistic(),
            labels: exact.estimate.labels.clone(),
            synthetic_value: exact.estimate.values.clone(),
            noisy_draw: None,
            ci_half_width: None,
            confidence: spec.confidence(),
            epsilon: None,
            method: None,
            infeasible: None,
        };
        match translation {
            Translation::Feasible(t) => {
                let noisy = prepared.privatize(&query.query_id, t.epsilon, &mut draw_rng, config);
                row.ci_half_width = Some(implied_half_width(&noisy.noise_model.detail, spec, t.epsilon));
                row.noisy_draw = Some(noisy.estimate.values);
                row.epsilon = Some(t.epsilon);
                row.method = Some(t.method);
            }
            Translation::Infeasible(inf) => row.infeasible = Some(inf),
        }
        rows.push(row);
    }
    Ok(rows)
}

// Counts and histograms: exact Laplace quantile. Simulated statistics: the
// requested margin, which the translation attains at confidence 1 - beta.
fn implied_half_width(detail: &NoiseDetail, spec: &AccuracySpec, epsilon: PrivacyCost) -> f64 {
    match detail {
        NoiseDetail::Count | NoiseDetail::Histogram => (1.0 / spec.beta).ln() / epsilon.epsilon(),
        _ => spec.alpha,
    }
}

/// Preview table as CSV for download.
pub fn preview_csv(rows: &[PreviewRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["query_id", "statistic", "component", "synthetic_value", "noisy_draw", "ci_half_width", "confidence", "status"])
        .expect("in-memory write");
    for r in rows {
        for (i, label) in r.labels.iter().enumerate() {
            let draw = r.noisy_draw.as_ref().map(|d| d[i].to_string()).unwrap_or_default();
            let half = r.ci_half_width.map(|h| h.to_string()).unwrap_or_default();
            let status = if r.infeasible.is_some() { "infeasible" } else { "ok" };
            w.write_record([
                r.query_id.as_str(),
                r.statistic.as_str(),
                label,
                &r.synthetic_value[i].to_string(),
                &draw,
                &half,
                &r.confidence.to_string(),
                status,
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
