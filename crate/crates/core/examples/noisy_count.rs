// Noisy counts and a histogram with their confidence intervals.
//
// ```bash
// cargo run --example noisy_count
// ```

use std::error::Error;

use validation_server::data::{CellValue, ColumnSpec, Dataset, Filter, Predicate, Schema};
use validation_server::mechanisms::{dp_count, dp_histogram};
use validation_server::release::confidence_interval;
use validation_server::rng::RandomSource;
use validation_server::translation::{epsilon_for_count, AccuracySpec};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let schema = Schema::new(
        "households",
        vec![ColumnSpec::categorical("state", ["ca", "ny", "tx"]), ColumnSpec::numeric("children", 0.0, 8.0)],
    )?;
    let rows = (0..900)
        .map(|i| vec![["ca", "ny", "tx"][i % 3].into(), CellValue::Num((i % 5) as f64)])
        .collect();
    let data = Dataset::from_rows(schema, rows, true)?;

    // "within 5 households, 95% of the time"
    let spec = AccuracySpec::new(5.0, 0.05)?;
    let eps = epsilon_for_count(&spec)?;
    let mut rng = RandomSource::secure();

    let with_kids = Filter::all().and(Predicate::Ge { column: "children".into(), value: 1.0 });
    let count = dp_count(&data, &with_kids, eps, &mut rng)?;
    let ci = confidence_interval(&count, spec.beta);
    println!(
        "households with children: {:.1}  95% CI [{:.1}, {:.1}]",
        count.estimate.values[0], ci.intervals[0].low, ci.intervals[0].high
    );

    let hist = dp_histogram(&data, "state", &Filter::all(), eps, &mut rng)?;
    let ci = confidence_interval(&hist, spec.beta);
    for ((label, value), iv) in hist.estimate.labels.iter().zip(&hist.estimate.values).zip(&ci.intervals) {
        println!("  {label}: {value:.1}  [{:.1}, {:.1}]", iv.low, iv.high);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
