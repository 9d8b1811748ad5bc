// Turning accuracy requirements into privacy loss, and previewing the
// result on synthetic data before anything touches confidential records.
//
// ```bash
// cargo run --example accuracy_translation
// ```

use std::error::Error;

use validation_server::data::{ColumnSpec, Filter, Predicate, Query, QueryKind, Schema};
use validation_server::mechanisms::MechanismConfig;
use validation_server::synthetic::generate_placeholder;
use validation_server::translation::{epsilon_for_count, epsilon_for_histogram, preview_outputs, AccuracySpec, SimulationSettings};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    // Closed forms.
    for alpha in [1.0, 5.0, 25.0] {
        let eps = epsilon_for_count(&AccuracySpec::new(alpha, 0.05)?)?;
        println!("count within {alpha:>4} at 95%: epsilon {:.4}", eps.epsilon());
    }
    let whole = AccuracySpec::new(5.0, 0.05)?.whole_query();
    println!("10-cell histogram, all cells within 5: epsilon {:.4}", epsilon_for_histogram(&whole, 10)?.epsilon());

    // Simulation-backed translation on a placeholder twin.
    let schema = Schema::new(
        "earnings",
        vec![ColumnSpec::numeric("wage", 0.0, 200.0), ColumnSpec::categorical("sector", ["public", "private"])],
    )?;
    let synthetic = generate_placeholder(&schema, 5000, 42)?;
    let public = Filter::all().and(Predicate::Eq { column: "sector".into(), value: "public".into() });
    let queries = vec![
        Query::count("public_workers", public.clone()),
        Query::new("mean_wage", QueryKind::Mean { column: "wage".into(), filter: public.clone() }),
        Query::new("median_wage", QueryKind::Quantile { column: "wage".into(), q: 0.5, filter: public }),
        // Asks for more than any budget in range can give.
        Query::new("mean_wage_tight", QueryKind::Mean { column: "wage".into(), filter: Filter::all() }),
    ];
    let specs = vec![
        AccuracySpec::new(10.0, 0.05)?,
        AccuracySpec::new(2.0, 0.05)?,
        AccuracySpec::new(0.02, 0.05)?,
        AccuracySpec::new(1e-4, 0.01)?,
    ];
    let settings = SimulationSettings { n_sims: 500, ..SimulationSettings::default() };
    let rows = preview_outputs(&queries, &specs, &synthetic, 7, &settings, &MechanismConfig::default())?;
    for row in rows {
        match (&row.epsilon, &row.infeasible) {
            (Some(eps), _) => println!(
                "{:<16} synthetic {:>9.3}  noisy draw {:>9.3}  +/- {:>7.3}  epsilon {:.4}",
                row.query_id.as_str(),
                row.synthetic_value[0],
                row.noisy_draw.as_ref().map_or(f64::NAN, |v| v[0]),
                row.ci_half_width.unwrap_or(f64::NAN),
                eps.epsilon()
            ),
            (None, Some(inf)) => println!(
                "{:<16} cannot reach {:.2} (best {:.3}); relax alpha or beta",
                row.query_id.as_str(),
                inf.required,
                inf.best_attainment
            ),
            (None, None) => unreachable!(),
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
