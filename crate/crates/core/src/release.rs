//! Researcher-facing releases: intervals that account for the injected noise,
//! a results table and boilerplate methods language.
//!
//! Everything here is post-processing of noisy mechanism output. Nothing in
//! this module sees confidential rows or the random source used for release
//! noise; bootstrap draws come from a separate stream seeded by a hash of the
//! release itself, so rendering is deterministic.

use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Query, QueryKind, StatisticKind};
use crate::ids::{DatasetId, ProjectId, ProposalId, QueryId};
use crate::mechanisms::{
    invert_noisy_bins, laplace, ratio, rescale_coefficients, solve_gram, MechanismResult, NoiseDetail,
};
use crate::rng::RandomSource;
use crate::translation::AccuracySpec;

pub const BOOTSTRAP_REPLICATES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    /// Exact Laplace quantile around the estimate.
    TailBound,
    /// Parametric bootstrap over the recorded noise scales.
    Bootstrap,
    /// Test-mode result with no noise; the interval has zero width.
    NoiseOff,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.low <= v && v <= self.high
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub method: CiMethod,
    pub confidence: f64,
    /// One interval per estimate component.
    pub intervals: Vec<Interval>,
    pub replicates: Option<usize>,
}

/// Intervals at confidence `1 - beta` for each component of `result`.
///
/// Counts and histograms use `estimate ± b ln(1/beta)` with `b` the Laplace
/// scale. Means, quantiles and regressions replay the recorded noise around
/// the released noisy intermediates and invert the displacement quantiles
/// (basic bootstrap).
pub fn confidence_interval(result: &MechanismResult, beta: f64) -> ConfidenceInterval {
    confidence_interval_with(result, beta, BOOTSTRAP_REPLICATES)
}

pub fn confidence_interval_with(result: &MechanismResult, beta: f64, replicates: usize) -> ConfidenceInterval {
    let values = &result.estimate.values;
    let confidence = 1.0 - beta;
    if result.noise_model.noise_off {
        return ConfidenceInterval {
            method: CiMethod::NoiseOff,
            confidence,
            intervals: values.iter().map(|&v| Interval { low: v, high: v }).collect(),
            replicates: None,
        };
    }
    let detail = &result.noise_model.detail;
    if let NoiseDetail::Count | NoiseDetail::Histogram = detail {
        let scale = result.noise_model.components[0].scale;
        let half = scale * (1.0 / beta).ln();
        return ConfidenceInterval {
            method: CiMethod::TailBound,
            confidence,
            intervals: values.iter().map(|&v| Interval { low: v - half, high: v + half }).collect(),
            replicates: None,
        };
    }

    let replicates = replicates.max(1);
    let mut rng = RandomSource::seeded(bootstrap_seed(result));
    let scales: Vec<f64> = result.noise_model.components.iter().map(|c| c.scale).collect();
    let mut displacements: Vec<Vec<f64>> = vec![Vec::with_capacity(replicates); values.len()];
    for _ in 0..replicates {
        let replica = replay(detail, &scales, &mut rng);
        for (j, (r, v)) in replica.iter().zip(values).enumerate() {
            displacements[j].push(r - v);
        }
    }
    let intervals = displacements
        .iter_mut()
        .zip(values)
        .map(|(d, &v)| {
            d.sort_by(|a, b| a.total_cmp(b));
            let lo_q = empirical_quantile(d, beta / 2.0);
            let hi_q = empirical_quantile(d, 1.0 - beta / 2.0);
            Interval { low: v - hi_q, high: v - lo_q }
        })
        .collect();
    ConfidenceInterval { method: CiMethod::Bootstrap, confidence, intervals, replicates: Some(replicates) }
}

// One re-noised replicate of the released statistic.
fn replay(detail: &NoiseDetail, scales: &[f64], rng: &mut RandomSource) -> Vec<f64> {
    match detail {
        NoiseDetail::Mean { lower, upper, noisy_sum_unit, noisy_count, .. } => {
            let s = noisy_sum_unit + laplace(scales[0], rng);
            let c = noisy_count + laplace(scales[1], rng);
            let (m, _) = ratio(s, c);
            vec![lower + m * (upper - lower)]
        }
        NoiseDetail::Quantile { q, lower, upper, noisy_bins, .. } => {
            let bins: Vec<f64> = noisy_bins.iter().map(|b| b + laplace(scales[0], rng)).collect();
            vec![invert_noisy_bins(&bins, *q, *lower, *upper).0]
        }
        NoiseDetail::Ols { entry_scale, eigen_floor, dim, noisy_gram, predictor_bounds, outcome_bounds, .. } => {
            let dim = *dim;
            let mut g = DMatrix::from_row_slice(dim, dim, noisy_gram);
            for a in 0..dim {
                for b in a..dim {
                    let v = g[(a, b)] + laplace(*entry_scale, rng);
                    g[(a, b)] = v;
                    g[(b, a)] = v;
                }
            }
            let s = solve_gram(&g, *eigen_floor);
            rescale_coefficients(&s.coefficients, predictor_bounds, *outcome_bounds)
        }
        NoiseDetail::Count | NoiseDetail::Histogram => unreachable!("closed-form intervals"),
    }
}

fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = p * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < n {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[n - 1]
    }
}

fn bootstrap_seed(result: &MechanismResult) -> u64 {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&(&result.query_id, &result.estimate, &result.noise_model)).expect("serializes"));
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Whether privacy-loss parameters appear in researcher-facing documents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisclosureConfig {
    pub disclose_epsilon: bool,
}

impl Default for DisclosureConfig {
    fn default() -> Self {
        DisclosureConfig { disclose_epsilon: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleEntry {
    pub query_id: QueryId,
    pub quantity: String,
    pub entries: usize,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disclosure {
    pub family: String,
    pub scales: Vec<ScaleEntry>,
    /// Per-query ε; present only when the curator enables disclosure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<Vec<(QueryId, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_epsilon: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReleasedComponent {
    pub label: String,
    pub estimate: f64,
    pub ci: Interval,
    pub units: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReleasedQuery {
    pub query_id: QueryId,
    pub statistic: StatisticKind,
    pub description: String,
    pub confidence: f64,
    pub ci_method: CiMethod,
    pub replicates: Option<usize>,
    pub components: Vec<ReleasedComponent>,
    /// Noisy intermediates kept for reproducible post-processing.
    pub noise_detail: NoiseDetail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Release {
    pub proposal_id: ProposalId,
    pub project_id: ProjectId,
    pub dataset_id: DatasetId,
    pub revision: u32,
    pub released_at: DateTime<Utc>,
    pub queries: Vec<ReleasedQuery>,
    pub disclosure: Disclosure,
    pub methods_text: String,
}

pub struct ReleaseInput<'a> {
    pub proposal_id: &'a ProposalId,
    pub project_id: &'a ProjectId,
    pub dataset_id: &'a DatasetId,
    pub revision: u32,
    pub queries: &'a [Query],
    pub specs: &'a [AccuracySpec],
    pub results: &'a [MechanismResult],
}

impl Release {
    pub fn build(input: ReleaseInput<'_>, disclosure: DisclosureConfig, released_at: DateTime<Utc>) -> Release {
        let mut queries = Vec::with_capacity(input.results.len());
        let mut scales = Vec::new();
        let mut eps = Vec::new();
        for ((query, spec), result) in input.queries.iter().zip(input.specs).zip(input.results) {
            let ci = confidence_interval(result, spec.beta);
            let units = units_for(query, &result.estimate.labels);
            let components = result
                .estimate
                .labels
                .iter()
                .zip(&result.estimate.values)
                .zip(&ci.intervals)
                .zip(units)
                .map(|(((label, &estimate), &ci), units)| ReleasedComponent { label: label.clone(), estimate, ci, units })
                .collect();
            for c in &result.noise_model.components {
                scales.push(ScaleEntry {
                    query_id: query.query_id.clone(),
                    quantity: c.quantity.clone(),
                    entries: c.entries,
                    scale: c.scale,
                });
            }
            eps.push((query.query_id.clone(), result.cost.epsilon()));
            queries.push(ReleasedQuery {
                query_id: query.query_id.clone(),
                statistic: query.statistic(),
                description: describe(query),
                confidence: ci.confidence,
                ci_method: ci.method,
                replicates: ci.replicates,
                components,
                noise_detail: result.noise_model.detail.clone(),
            });
        }
        let total = crate::ledger::exact_sum(eps.iter().map(|(_, e)| *e));
        let mut release = Release {
            proposal_id: input.proposal_id.clone(),
            project_id: input.project_id.clone(),
            dataset_id: input.dataset_id.clone(),
            revision: input.revision,
            released_at,
            queries,
            disclosure: Disclosure {
                family: "laplace".into(),
                scales,
                epsilon: disclosure.disclose_epsilon.then_some(eps),
                total_epsilon: disclosure.disclose_epsilon.then_some(total),
            },
            methods_text: String::new(),
        };
        release.methods_text = render_methods_text(&release);
        release
    }
}

fn units_for(query: &Query, labels: &[String]) -> Vec<String> {
    match &query.kind {
        QueryKind::Count { .. } | QueryKind::Histogram { .. } => vec!["records".to_string(); labels.len()],
        QueryKind::Mean { column, .. } | QueryKind::Quantile { column, .. } => vec![column.clone()],
        QueryKind::Ols { outcome, predictors, .. } => {
            let mut u = vec![outcome.clone()];
            u.extend(predictors.iter().map(|p| format!("{outcome} per {p}")));
            u
        }
    }
}

fn describe(query: &Query) -> String {
    let filtered = if query.filter().conjuncts.is_empty() { "" } else { " among records matching the stated filter" };
    match &query.kind {
        QueryKind::Count { .. } => format!("number of records{filtered}"),
        QueryKind::Histogram { column, .. } => format!("number of records in each category of {column}{filtered}"),
        QueryKind::Mean { column, .. } => format!("mean of {column}{filtered}"),
        QueryKind::Quantile { column, q, .. } => format!("{} quantile of {column}{filtered}", fmt_num(*q)),
        QueryKind::Ols { outcome, predictors, .. } => {
            format!("least-squares regression of {outcome} on {}{filtered}", predictors.join(", "))
        }
    }
}

/// Presentation rounding: up to 4 decimals, trailing zeros dropped.
fn fmt_num(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
    if s == "-0" { "0".into() } else { s }
}

/// Results table as CSV. Multi-component statistics get one row per
/// component, with the component label in brackets after the query id.
pub fn results_csv(release: &Release) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["query_id", "statistic", "estimate", "ci_low", "ci_high", "confidence", "units"])
        .expect("in-memory write");
    for q in &release.queries {
        let multi = q.components.len() > 1;
        for c in &q.components {
            let id = if multi { format!("{}[{}]", q.query_id, c.label) } else { q.query_id.to_string() };
            w.write_record([
                id.as_str(),
                q.statistic.as_str(),
                &fmt_num(c.estimate),
                &fmt_num(c.ci.low),
                &fmt_num(c.ci.high),
                &fmt_num(q.confidence),
                &c.units,
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Full plain-text document: table, disclosure block and methods text.
pub fn render_release(release: &Release) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Release for proposal {} (revision {})", release.proposal_id, release.revision);
    let _ = writeln!(out, "Project {} on dataset {}", release.project_id, release.dataset_id);
    let _ = writeln!(out, "Released {}", release.released_at.format("%Y-%m-%d %H:%M:%S UTC"));
    out.push('\n');
    let _ = writeln!(out, "Results");
    for q in &release.queries {
        let _ = writeln!(out, "  {} ({}): {}", q.query_id, q.statistic.as_str(), q.description);
        for c in &q.components {
            let _ = writeln!(
                out,
                "    {:<16} {:>14}   {}% CI [{}, {}]   {}",
                c.label,
                fmt_num(c.estimate),
                fmt_num(q.confidence * 100.0),
                fmt_num(c.ci.low),
                fmt_num(c.ci.high),
                c.units
            );
        }
    }
    out.push('\n');
    let _ = writeln!(out, "Noise disclosure");
    let _ = writeln!(out, "  mechanism family: {}", release.disclosure.family);
    for s in &release.disclosure.scales {
        let _ = writeln!(out, "  {} {}: {} value(s), noise scale {}", s.query_id, s.quantity, s.entries, fmt_num(s.scale));
    }
    if let (Some(eps), Some(total)) = (&release.disclosure.epsilon, release.disclosure.total_epsilon) {
        for (q, e) in eps {
            let _ = writeln!(out, "  {q} privacy-loss parameter: {}", fmt_num(*e));
        }
        let _ = writeln!(out, "  total privacy-loss parameter: {}", fmt_num(total));
    }
    out.push('\n');
    let _ = writeln!(out, "Methods");
    out.push_str(&release.methods_text);
    out
}

/// Publication paragraph(s) for the release, from a fixed template.
pub fn render_methods_text(release: &Release) -> String {
    let mut p = String::new();
    p.push_str("The results reported here were computed on confidential data with calibrated random noise added to protect privacy. ");
    p.push_str("Noise was drawn from the Laplace distribution, scaled to the largest change a single record can make to each quantity (differential privacy). ");
    if let Some(total) = release.disclosure.total_epsilon {
        let _ = write!(p, "The total privacy-loss parameter (epsilon) for this release is {}. ", fmt_num(total));
    }
    p.push_str("\n\n");
    for q in &release.queries {
        let _ = write!(p, "{}: {}. ", q.query_id, capitalize(&q.description));
        match q.statistic {
            StatisticKind::Count => p.push_str("The count was released with Laplace noise added. "),
            StatisticKind::Histogram => {
                p.push_str("Each category count was released with independent Laplace noise; categories are disjoint, so they share one noise budget. ")
            }
            StatisticKind::Mean => p.push_str(
                "The mean was computed as a noisy sum divided by a noisy count, each perturbed with Laplace noise, with values bounded to the declared range. ",
            ),
            StatisticKind::Quantile => p.push_str(
                "The quantile was read from a noisy cumulative histogram of equal-width bins over the declared range and reported at the midpoint of the selected bin. ",
            ),
            StatisticKind::Ols => p.push_str(
                "Coefficients were obtained by sufficient-statistic perturbation: Laplace noise was added to the cross-products of the bounded, rescaled variables, the perturbed matrix was projected to be positive semi-definite, and the normal equations were solved. ",
            ),
        }
        match q.ci_method {
            CiMethod::TailBound => {
                let _ = write!(
                    p,
                    "The {}% interval is the estimate plus or minus the corresponding quantile of the Laplace noise, so it covers the noise-free value with at least that probability.",
                    fmt_num(q.confidence * 100.0)
                );
            }
            CiMethod::Bootstrap => {
                let _ = write!(
                    p,
                    "The {}% interval was obtained by a parametric bootstrap: the recorded noise was simulated {} times around the released noisy quantities and the interval inverts the spread of the resulting estimates.",
                    fmt_num(q.confidence * 100.0),
                    q.replicates.unwrap_or(BOOTSTRAP_REPLICATES)
                );
            }
            CiMethod::NoiseOff => p.push_str("This result was produced in a test mode without noise; its interval has zero width."),
        }
        p.push_str("\n\n");
    }
    p.push_str(
        "The intervals describe uncertainty due to the added noise only; they do not include sampling error of the underlying survey or administrative data. ",
    );
    p.push_str(
        "Because noise is drawn afresh for every request, repeating the same request, or another researcher asking the same question, yields different noisy values; all of them are equally valid.\n",
    );
    p
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}
