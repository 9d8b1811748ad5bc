// Registering a synthetic twin: a curator file is checked against the
// confidential schema, or a uniform placeholder is generated from a seed.
//
// ```bash
// cargo run --example synthetic_twin
// ```

use std::error::Error;

use validation_server::data::{ColumnSpec, Filter, Query, QueryKind, Schema};
use validation_server::mechanisms::{MechanismConfig, PrivacyCost};
use validation_server::synthetic::{read_synthetic_csv, run_preview, SyntheticRegistration};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let schema = Schema::new(
        "clinic",
        vec![ColumnSpec::numeric("age", 0.0, 110.0), ColumnSpec::categorical("visit", ["routine", "urgent"])],
    )?;

    let bad = "age,visit\n34,routine\n140,urgent\n";
    if let Err(violations) = read_synthetic_csv(&schema, bad) {
        for v in violations {
            println!("rejected: {v}");
        }
    }

    let good = "age,visit\n34,routine\n71,urgent\n52,routine\n";
    let curated = SyntheticRegistration::curator_supplied(&schema, read_synthetic_csv(&schema, good).map_err(|v| format!("{v:?}"))?, None)
        .map_err(|v| format!("{v:?}"))?;
    println!("curator twin: {} rows ({:?})", curated.record().rows, curated.record().provenance);

    let placeholder = SyntheticRegistration::placeholder(&schema, 1000, 2024)?;
    println!("placeholder twin: {}", serde_json::to_string(placeholder.record())?);

    let query = Query::new("mean_age", QueryKind::Mean { column: "age".into(), filter: Filter::all() });
    let preview = run_preview(&query, placeholder.data(), Some(PrivacyCost::new(0.5)?), 1, &MechanismConfig::default())?;
    println!(
        "mean age on the twin: exact {:.2}, one noisy draw {:.2}",
        preview.exact.estimate.values[0],
        preview.noisy.map_or(f64::NAN, |r| r.estimate.values[0])
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
