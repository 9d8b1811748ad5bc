// The privacy ledger: two-phase spending, exact totals, audit of the
// digest chain and detection of an edited file.
//
// ```bash
// cargo run --example ledger_audit
// ```

use std::error::Error;

use validation_server::ledger::{verify_file, ExecutionFailure, Ledger, LEDGER_FILE};
use validation_server::mechanisms::PrivacyCost;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let ledger = Ledger::open(dir.path())?;
    let project = ledger.open_project("emily", "CTC uptake", &"irs_ctc".into())?.project_id;

    let eps = PrivacyCost::new(0.1)?;
    for i in 0..10 {
        let reservation = ledger.reserve(&project, &[(format!("p1/q{i}"), eps)])?;
        ledger.commit(&reservation)?;
    }
    // A failed computation releases its reservation instead of spending it.
    let failed = ledger.reserve_and_commit(&project, &[("p2/q0".to_string(), eps)], || Err::<(), _>("mechanism failed"));
    if let Err(ExecutionFailure::Execution(why)) = failed {
        println!("failed run ({why}): reservation voided");
    }
    println!("spent: {} (ten commits of 0.1, summed exactly)", ledger.total_spent(&project)?);

    let path = dir.path().join(LEDGER_FILE);
    let report = verify_file(&path)?;
    println!("chain ok: {} entries, head {}", report.entries, &report.head_digest[..16]);
    println!("{}", serde_json::to_string_pretty(&ledger.global_report())?);

    let text = std::fs::read_to_string(&path)?;
    std::fs::write(&path, text.replacen("\"epsilon\":0.1", "\"epsilon\":0.01", 1))?;
    match verify_file(&path) {
        Ok(_) => println!("tampering went unnoticed"),
        Err(e) => println!("edited file rejected: {e}"),
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
