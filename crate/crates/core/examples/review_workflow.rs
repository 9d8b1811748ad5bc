// The proposal lifecycle without HTTP: submit, compile the reviewer report,
// request a relaxation, accept it, approve, execute and release.
//
// ```bash
// cargo run --example review_workflow
// ```

use std::error::Error;
use std::sync::Arc;

use validation_server::data::{CellValue, ColumnSpec, ConfidentialDataset, Dataset, Filter, Predicate, Query, QueryKind, Schema};
use validation_server::ledger::Ledger;
use validation_server::rng::RandomSource;
use validation_server::synthetic::generate_placeholder;
use validation_server::translation::AccuracySpec;
use validation_server::workflow::{Actor, Decision, Role, SubmitRequest, Workflow, WorkflowSettings};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let schema = Schema::new(
        "benefits",
        vec![ColumnSpec::categorical("county", ["east", "west"]), ColumnSpec::numeric("benefit", 0.0, 1000.0)],
    )?;
    let rows = (0..3000).map(|i| vec![["east", "west"][i % 2].into(), CellValue::Num((i % 1000) as f64)]).collect();
    let confidential = ConfidentialDataset::new(Dataset::from_rows(schema.clone(), rows, true)?)?;
    let synthetic = generate_placeholder(&schema, 3000, 1)?;

    let ledger = Arc::new(Ledger::in_memory());
    let project = ledger.open_project("emily", "Benefit levels", &"benefits".into())?.project_id;
    let wf = Workflow::in_memory(ledger, WorkflowSettings::default());
    let (emily, rita) = (Actor::new("emily", Role::Researcher), Actor::new("rita", Role::Reviewer));

    let east = Filter::all().and(Predicate::Eq { column: "county".into(), value: "east".into() });
    let request = SubmitRequest {
        queries: vec![
            Query::count("east_cases", east.clone()),
            Query::new("east_mean", QueryKind::Mean { column: "benefit".into(), filter: east }),
        ],
        specs: vec![AccuracySpec::new(3.0, 0.05)?, AccuracySpec::new(10.0, 0.05)?],
        justification: "Compare benefit levels across counties.".into(),
        planned_outputs: "One table.".into(),
    };
    let proposal = wf.submit(&emily, &project, request, &schema)?;
    let id = proposal.proposal_id.clone();
    let report = wf.compile_report(&id, &confidential, &synthetic)?;
    println!("report for {id}: total epsilon {:.4}, advisory exceeded: {}", report.total_epsilon, report.advisory_exceeded);

    // The reviewer asks for a looser count; the researcher accepts.
    let relaxed = vec![AccuracySpec::new(6.0, 0.05)?, AccuracySpec::new(10.0, 0.05)?];
    wf.decide(&rita, &id, Decision::adjust(relaxed, Some("count can be coarser".into())), &synthetic, None)?;
    let p = wf.respond_adjustment(&emily, &id, true)?;
    let report = wf.compile_report(&id, &confidential, &synthetic)?;
    println!("revision {}: total epsilon {:.4}", p.revision, report.total_epsilon);

    wf.decide(&rita, &id, Decision::approve(), &synthetic, None)?;
    let release = wf.execute(&rita, &id, &confidential, &mut RandomSource::secure())?;
    for q in &release.queries {
        let c = &q.components[0];
        println!("{}: {:.2} [{:.2}, {:.2}] {}", q.query_id.as_str(), c.estimate, c.ci.low, c.ci.high, c.units);
    }
    let p = wf.proposal(&id)?;
    let path: Vec<&str> = p.history.iter().map(|t| t.to.as_str()).collect();
    println!("history: {}", path.join(" -> "));
    println!("spent: {:.4}", wf.ledger().total_spent(&project)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
