// A private regression and mean, packaged as a release with intervals, a
// results table and methods text.
//
// ```bash
// cargo run --example regression_release
// ```

use std::error::Error;

use chrono::Utc;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use validation_server::data::{CellValue, ColumnSpec, Dataset, Filter, Query, QueryKind, Schema};
use validation_server::mechanisms::{run_query, MechanismConfig, PrivacyCost};
use validation_server::release::{render_release, results_csv, DisclosureConfig, Release, ReleaseInput};
use validation_server::rng::RandomSource;
use validation_server::translation::AccuracySpec;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let schema = Schema::new(
        "wages",
        vec![
            ColumnSpec::numeric("schooling", 0.0, 20.0),
            ColumnSpec::numeric("experience", 0.0, 40.0),
            ColumnSpec::numeric("wage", 0.0, 100.0),
        ],
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = (0..20_000)
        .map(|_| {
            let s: f64 = rng.random_range(8.0..20.0);
            let e: f64 = rng.random_range(0.0..40.0);
            let w = (5.0 + 2.0 * s + 0.4 * e + rng.random_range(-10.0..10.0_f64)).clamp(0.0, 100.0);
            vec![CellValue::Num(s), CellValue::Num(e), CellValue::Num(w)]
        })
        .collect();
    let data = Dataset::from_rows(schema, rows, true)?;

    let queries = vec![
        Query::new(
            "wage_model",
            QueryKind::Ols { outcome: "wage".into(), predictors: vec!["schooling".into(), "experience".into()], filter: Filter::all() },
        ),
        Query::new("mean_wage", QueryKind::Mean { column: "wage".into(), filter: Filter::all() }),
    ];
    let specs = vec![AccuracySpec::new(0.5, 0.05)?, AccuracySpec::new(1.0, 0.05)?];
    let budget = [PrivacyCost::new(2.0)?, PrivacyCost::new(0.5)?];
    let config = MechanismConfig::default();
    let mut noise = RandomSource::secure();
    let results = queries
        .iter()
        .zip(budget)
        .map(|(q, eps)| run_query(q, &data, eps, &mut noise, &config))
        .collect::<Result<Vec<_>, _>>()?;

    let release = Release::build(
        ReleaseInput {
            proposal_id: &"wages-p1".into(),
            project_id: &"wages".into(),
            dataset_id: &"wages".into(),
            revision: 1,
            queries: &queries,
            specs: &specs,
            results: &results,
        },
        DisclosureConfig { disclose_epsilon: true },
        Utc::now(),
    );
    println!("{}", render_release(&release));
    println!("{}", results_csv(&release));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
