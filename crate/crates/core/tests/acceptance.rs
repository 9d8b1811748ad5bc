//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Each check computes its expected values independently of the
//! library (direct sums, normal equations, sorted order statistics).

mod common;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use validation_server::data::{
    CellValue, ColumnSpec, ConfidentialDataset, Dataset, Filter, Predicate, PublicDataset, Query, QueryKind, Schema,
};
use validation_server::ledger::{exact_sum, verify_file, Ledger, LedgerError, LEDGER_FILE};
use validation_server::mechanisms::{dp_count, dp_histogram, dp_mean, dp_ols, dp_quantile, MechanismConfig, PrivacyCost};
use validation_server::release::confidence_interval;
use validation_server::rng::RandomSource;
use validation_server::synthetic::generate_placeholder;
use validation_server::translation::{
    epsilon_by_simulation, epsilon_for_count, simulate_attainment, AccuracySpec, SimulationSettings, Translation,
};
use validation_server::workflow::{
    replay_history, Actor, CrashPoint, Decision, ProposalState, Role, SubmitRequest, Workflow, WorkflowError,
    WorkflowSettings,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("tail calibration", tail_calibration),
        ("zero-noise oracle equivalence", zero_noise_oracles),
        ("empirical DP smoke test", dp_smoke_test),
        ("composition and ledger", composition_and_ledger),
        ("workflow soundness", workflow_soundness),
        ("accuracy round trip via simulation", accuracy_round_trip),
        ("CI coverage", ci_coverage),
        ("end-to-end walkthrough over HTTP", walkthrough),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name} ({detail}; {secs:.2}s)", i + 1),
            Err(why) => {
                failures += 1;
                println!("criterion {}: FAIL  {name} ({why}; {secs:.2}s)", i + 1);
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}

fn within(start: Instant, limit: u64) -> Result<(), String> {
    let t = start.elapsed();
    if t > Duration::from_secs(limit) {
        return Err(format!("took {:.1}s, limit {limit}s", t.as_secs_f64()));
    }
    Ok(())
}

fn people(n: usize, seed: u64) -> Dataset {
    let schema = Schema::new(
        "people",
        vec![
            ColumnSpec::numeric("x", 0.0, 10.0),
            ColumnSpec::numeric("z", 0.0, 20.0),
            ColumnSpec::numeric("y", 0.0, 50.0),
            ColumnSpec::categorical("g", ["a", "b", "c"]),
        ],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(0.0..10.0);
            let z: f64 = rng.random_range(0.0..20.0);
            let y = (2.0 + 3.0 * x - 0.5 * z + rng.random_range(-4.0..4.0_f64)).clamp(0.0, 50.0);
            let g = ["a", "b", "c"][rng.random_range(0..3)];
            vec![CellValue::Num(x), CellValue::Num(z), CellValue::Num(y), g.into()]
        })
        .collect();
    Dataset::from_rows(schema, rows, true).unwrap()
}

fn column(data: &Dataset, name: &str) -> Vec<f64> {
    data.numeric(data.schema().column_index(name).unwrap()).to_vec()
}

fn labels(data: &Dataset, name: &str) -> Vec<String> {
    let (idx, cats) = data.schema().categorical_column(name).unwrap();
    data.categorical(idx).iter().map(|&c| cats[c as usize].clone()).collect()
}

fn tail_calibration() -> Outcome {
    let start = Instant::now();
    let eps = epsilon_for_count(&AccuracySpec::new(5.0, 0.05).unwrap()).unwrap();
    ensure!((eps.epsilon() - 0.5991).abs() < 1e-4, "epsilon {}", eps);
    let data = people(500, 1);
    let filter = Filter::all().and(Predicate::Eq { column: "g".into(), value: "b".into() });
    let truth = labels(&data, "g").iter().filter(|g| *g == "b").count() as f64;
    let mut rng = RandomSource::seeded(11);
    let runs = 100_000;
    let mut exceed = 0;
    for _ in 0..runs {
        let r = dp_count(&data, &filter, eps, &mut rng).unwrap();
        if (r.estimate.values[0] - truth).abs() > 5.0 {
            exceed += 1;
        }
    }
    let p = exceed as f64 / runs as f64;
    ensure!((0.04..=0.06).contains(&p), "P(|error| > 5) = {p}");
    within(start, 10)?;
    Ok(format!("epsilon {:.4}, P(|error| > 5) = {p:.4}", eps.epsilon()))
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn zero_noise_oracles() -> Outcome {
    let start = Instant::now();
    let data = people(1000, 2);
    let filter = Filter::all().and(Predicate::Ge { column: "x".into(), value: 1.0 });
    let (x, z, y, g) = (column(&data, "x"), column(&data, "z"), column(&data, "y"), labels(&data, "g"));
    let keep: Vec<usize> = (0..data.len()).filter(|&i| x[i] >= 1.0).collect();
    let eps = PrivacyCost::new(1.0).unwrap();
    let off = || RandomSource::noise_off();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1.0);

    let count = dp_count(&data, &filter, eps, &mut off()).unwrap().estimate.values[0];
    ensure!(close(count, keep.len() as f64), "count {count} vs {}", keep.len());

    let hist = dp_histogram(&data, "g", &filter, eps, &mut off()).unwrap().estimate;
    for (label, value) in hist.labels.iter().zip(&hist.values) {
        let truth = keep.iter().filter(|&&i| &g[i] == label).count() as f64;
        ensure!(close(*value, truth), "histogram cell {label}: {value} vs {truth}");
    }

    let mean = dp_mean(&data, "y", &filter, eps, &mut off()).unwrap().estimate.values[0];
    let truth = keep.iter().map(|&i| y[i]).sum::<f64>() / keep.len() as f64;
    ensure!(close(mean, truth), "mean {mean} vs {truth}");

    let ols = dp_ols(&data, "y", &["x", "z"], &filter, eps, &mut off()).unwrap().estimate.values;
    let rows: Vec<[f64; 3]> = keep.iter().map(|&i| [1.0, x[i], z[i]]).collect();
    let xtx = (0..3).map(|a| (0..3).map(|b| rows.iter().map(|r| r[a] * r[b]).sum()).collect()).collect();
    let xty = (0..3).map(|a| keep.iter().zip(&rows).map(|(&i, r)| r[a] * y[i]).sum()).collect();
    let beta = solve(xtx, xty);
    for (got, want) in ols.iter().zip(&beta) {
        ensure!(close(*got, *want), "ols {ols:?} vs {beta:?}");
    }

    let k = 1024;
    let quantile = dp_quantile(&data, "y", 0.5, &filter, eps, &mut off(), k).unwrap().estimate.values[0];
    let mut sorted: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let order = sorted[((0.5 * sorted.len() as f64).ceil() as usize).max(1) - 1];
    let width = 50.0 / k as f64;
    ensure!((quantile - order).abs() <= width, "quantile {quantile} vs {order} (bin width {width})");
    within(start, 5)?;
    Ok(format!("5 statistics match; quantile off by {:.4} of bin width {width:.4}", (quantile - order).abs()))
}

fn dp_smoke_test() -> Outcome {
    let start = Instant::now();
    let full = people(100, 3);
    let schema = full.schema().clone();
    let rows: Vec<Vec<CellValue>> = (1..full.len())
        .map(|i| {
            vec![
                CellValue::Num(full.numeric(0)[i]),
                CellValue::Num(full.numeric(1)[i]),
                CellValue::Num(full.numeric(2)[i]),
                labels(&full, "g")[i].as_str().into(),
            ]
        })
        .collect();
    let neighbor = Dataset::from_rows(schema, rows, true).unwrap();
    let eps = PrivacyCost::new(1.0).unwrap();
    let draws = 1_000_000;
    let histogram = |data: &Dataset, seed: u64| {
        let mut rng = RandomSource::seeded(seed);
        let mut bins: HashMap<i64, u64> = HashMap::new();
        for _ in 0..draws {
            let v = dp_count(data, &Filter::all(), eps, &mut rng).unwrap().estimate.values[0];
            *bins.entry(v.floor() as i64).or_default() += 1;
        }
        bins
    };
    let (a, b) = (histogram(&full, 21), histogram(&neighbor, 22));
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for (bin, &ca) in &a {
        let cb = b.get(bin).copied().unwrap_or(0);
        if ca >= 1000 && cb >= 1000 {
            compared += 1;
            worst = worst.max(ca as f64 / cb as f64).max(cb as f64 / ca as f64);
        }
    }
    let bound = std::f64::consts::E * 1.1;
    ensure!(compared > 5, "only {compared} comparable bins");
    ensure!(worst <= bound, "max ratio {worst} > {bound}");
    within(start, 60)?;
    Ok(format!("max bin ratio {worst:.3} over {compared} bins (bound {bound:.3})"))
}

fn ctc_schema() -> Schema {
    Schema::new(
        "ctc",
        vec![ColumnSpec::numeric("income", 0.0, 100.0), ColumnSpec::categorical("region", ["north", "south"])],
    )
    .unwrap()
}

fn ctc_confidential(n: usize, seed: u64) -> ConfidentialDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Only northern records: queries on the south hit an empty subset.
    let rows = (0..n)
        .map(|_| vec![CellValue::Num((rng.random_range(20.0..90.0_f64) * 10.0).round() / 10.0), "north".into()])
        .collect();
    ConfidentialDataset::new(Dataset::from_rows(ctc_schema(), rows, true).unwrap()).unwrap()
}

fn ctc_request(mean: bool) -> SubmitRequest {
    let south = Filter::all().and(Predicate::Eq { column: "region".into(), value: "south".into() });
    let mut queries = vec![
        Query::count("all", Filter::all()),
        Query::count("south", south.clone()),
        Query::new("regions", QueryKind::Histogram { column: "region".into(), filter: Filter::all() }),
    ];
    let mut specs = vec![AccuracySpec::new(10.0, 0.05).unwrap(); 3];
    if mean {
        queries.push(Query::new("mean_south", QueryKind::Mean { column: "income".into(), filter: south }));
        specs.push(AccuracySpec::new(20.0, 0.1).unwrap());
    }
    SubmitRequest { queries, specs, justification: "Uptake by region.".into(), planned_outputs: String::new() }
}

fn fast_settings() -> WorkflowSettings {
    WorkflowSettings {
        simulation: SimulationSettings { n_sims: 100, max_iterations: 14, ..SimulationSettings::default() },
        ..WorkflowSettings::default()
    }
}

fn composition_and_ledger() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let ledger_dir = dir.path().join("ledger");
    let ledger = Arc::new(Ledger::open(&ledger_dir).unwrap());
    let project = ledger.open_project("emily", "CTC", &"ctc".into()).unwrap().project_id;
    let eps = PrivacyCost::new(0.1).unwrap();
    std::thread::scope(|s| {
        for i in 0..100 {
            let (ledger, project) = (&ledger, &project);
            s.spawn(move || {
                let r = ledger.reserve(project, &[(format!("c{i}/q"), eps)]).unwrap();
                ledger.commit(&r).unwrap();
            });
        }
    });
    let total = ledger.total_spent(&project).unwrap();
    ensure!(total == 10.0, "total_spent {total:?}");
    ensure!(exact_sum(vec![0.1; 100]) == 10.0, "exact_sum");
    drop(ledger);
    let path = ledger_dir.join(LEDGER_FILE);
    let verified = verify_file(&path).map_err(|e| e.to_string())?;
    ensure!(verified.entries == 200, "{} entries", verified.entries);
    let reopened = Ledger::open(&ledger_dir).map_err(|e| e.to_string())?;
    ensure!(reopened.total_spent(&project).unwrap() == 10.0, "total after reopen");
    drop(reopened);

    // Tampering: altered amount, deleted line, reordered lines.
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut altered = lines.clone();
    let edited = altered[57].replace("0.1", "0.01");
    altered[57] = &edited;
    let mut deleted = lines.clone();
    deleted.remove(120);
    let mut swapped = lines.clone();
    swapped.swap(10, 11);
    for (what, variant) in [("altered", altered), ("deleted", deleted), ("swapped", swapped)] {
        let t = dir.path().join(format!("{what}.jsonl"));
        std::fs::write(&t, variant.join("\n") + "\n").unwrap();
        ensure!(matches!(verify_file(&t), Err(LedgerError::ChainBroken { .. })), "{what} ledger verified");
    }

    // Crash injection during execute, then restart from disk.
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let confidential = ctc_confidential(300, 4);
    let synthetic = generate_placeholder(&ctc_schema(), 400, 5).unwrap();
    let mut seen = BTreeMap::new();
    for round in 0..50 {
        let crash = CrashPoint::ALL[rng.random_range(0..CrashPoint::ALL.len())];
        *seen.entry(format!("{crash:?}")).or_insert(0) += 1;
        crash_round(round, crash, rng.random(), &confidential, &synthetic).map_err(|e| format!("round {round} {crash:?}: {e}"))?;
    }
    within(start, 120)?;
    Ok(format!("total 10.0 exact, 3 tamper variants caught, 50 crash rounds over {} kill points", seen.len()))
}

fn crash_round(
    round: usize,
    crash: CrashPoint,
    seed: u64,
    confidential: &ConfidentialDataset,
    synthetic: &PublicDataset,
) -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let (emily, rita) = (Actor::new("emily", Role::Researcher), Actor::new("rita", Role::Reviewer));
    let open = || -> Result<Workflow, String> {
        let ledger = Arc::new(Ledger::open(&dir.path().join("ledger")).map_err(|e| e.to_string())?);
        Ok(Workflow::open(&dir.path().join("workflow"), ledger, fast_settings()).map_err(|e| e.to_string())?.0)
    };
    let wf = open()?;
    let project = wf.ledger().open_project("emily", "CTC", &"ctc".into()).unwrap().project_id;
    let p = wf.submit(&emily, &project, ctc_request(round % 2 == 0), &ctc_schema()).map_err(|e| e.to_string())?;
    let id = p.proposal_id.clone();
    let report = wf.compile_report(&id, confidential, synthetic).map_err(|e| e.to_string())?;
    wf.decide(&rita, &id, Decision::approve(), synthetic, None).map_err(|e| e.to_string())?;
    let err = wf.execute_with(&rita, &id, confidential, &mut RandomSource::seeded(seed), Some(crash));
    ensure!(matches!(err, Err(WorkflowError::Crashed(_)) | Err(WorkflowError::Execution(_))), "no crash: {err:?}");
    drop(wf);

    let wf = open()?;
    let path = dir.path().join("ledger").join(LEDGER_FILE);
    verify_file(&path).map_err(|e| format!("chain after restart: {e}"))?;
    let check = |wf: &Workflow| -> Result<ProposalState, String> {
        let p = wf.proposal(&id).map_err(|e| e.to_string())?;
        let replayed = replay_history(&p.history).map_err(|e| e.to_string())?;
        ensure!(replayed == p.state, "history replays to {replayed:?}, state {:?}", p.state);
        ensure!(wf.ledger().open_reservations("").is_empty(), "open reservations remain");
        let committed = wf.ledger().committed_with_prefix(&format!("{id}/"));
        let approved = p.history.iter().any(|t| t.to == ProposalState::Approved);
        match p.state {
            ProposalState::Released => {
                ensure!(approved, "released without approval");
                ensure!(committed.len() == p.queries.len(), "{} commits", committed.len());
                ensure!(wf.release(&id).is_some(), "released without a release record");
            }
            ProposalState::Approved => {
                ensure!(committed.is_empty(), "approved proposal holds commits");
                ensure!(wf.release(&id).is_none(), "release before execution");
            }
            other => return Err(format!("unexpected state {other:?}")),
        }
        let spent = wf.ledger().total_spent(&project).unwrap();
        let expected = if p.state == ProposalState::Released { report.total_epsilon } else { 0.0 };
        ensure!((spent - expected).abs() < 1e-9, "spent {spent}, expected {expected}");
        Ok(p.state)
    };
    let state = check(&wf)?;
    let expect_released = matches!(
        crash,
        CrashPoint::AfterCommit | CrashPoint::AfterExecuted | CrashPoint::AfterReleasePersisted
    );
    ensure!((state == ProposalState::Released) == expect_released, "state {state:?} after {crash:?}");
    if state == ProposalState::Approved {
        wf.execute(&rita, &id, confidential, &mut RandomSource::seeded(seed)).map_err(|e| format!("retry: {e}"))?;
    }
    ensure!(wf.execute(&rita, &id, confidential, &mut RandomSource::seeded(seed)).is_err(), "second execution accepted");
    ensure!(check(&wf)? == ProposalState::Released, "not released after retry");
    verify_file(&path).map_err(|e| e.to_string())?;
    Ok(())
}

struct Fuzz {
    wf: Workflow,
    project: validation_server::ids::ProjectId,
    actors: [Actor; 4],
    confidential: ConfidentialDataset,
    synthetic: PublicDataset,
}

fn workflow_soundness() -> Outcome {
    let start = Instant::now();
    let confidential = ctc_confidential(60, 7);
    let synthetic = generate_placeholder(&ctc_schema(), 300, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut stats: BTreeMap<&str, usize> = BTreeMap::new();
    for seq in 0..10_000 {
        let ledger = Arc::new(Ledger::in_memory());
        let project = ledger.open_project("emily", "CTC", &"ctc".into()).unwrap().project_id;
        let f = Fuzz {
            wf: Workflow::in_memory(ledger, fast_settings()),
            project,
            actors: [
                Actor::new("emily", Role::Researcher),
                Actor::new("omar", Role::Researcher),
                Actor::new("rita", Role::Reviewer),
                Actor::new("adam", Role::Admin),
            ],
            confidential: confidential.clone(),
            synthetic: synthetic.clone(),
        };
        let steps = rng.random_range(1..=20);
        for _ in 0..steps {
            fuzz_step(&f, &mut rng).map_err(|e| format!("sequence {seq}: {e}"))?;
            check_invariants(&f).map_err(|e| format!("sequence {seq}: {e}"))?;
        }
        for p in f.wf.proposals() {
            *stats.entry(p.state.as_str()).or_default() += 1;
        }
    }
    ensure!(stats.get("released").copied().unwrap_or(0) > 1000, "too few releases reached: {stats:?}");
    within(start, 600)?;
    Ok(format!("10000 sequences, final states {stats:?}"))
}

fn fuzz_step(f: &Fuzz, rng: &mut ChaCha8Rng) -> Result<(), String> {
    // Usually the role the operation needs; otherwise anyone, to exercise
    // the authorization checks.
    let random = rng.random_range(0..4);
    let fitting = rng.random_bool(0.6);
    let actor_for = |role: usize| &f.actors[if fitting { role } else { random }];
    // Mostly act on live proposals so sequences get deep into the lifecycle.
    let all: Vec<_> = f.wf.proposals();
    let live: Vec<_> = all.iter().filter(|p| !p.state.is_terminal()).map(|p| p.proposal_id.clone()).collect();
    let ids: Vec<_> = all.iter().map(|p| p.proposal_id.clone()).collect();
    let pick = |rng: &mut ChaCha8Rng| {
        let from = if !live.is_empty() && rng.random_bool(0.85) { &live } else { &ids };
        from.get(rng.random_range(0..from.len().max(1))).cloned()
    };
    let op = if live.is_empty() && rng.random_bool(0.5) { 0 } else { rng.random_range(0..14) };
    match op {
        0 => {
            let _ = f.wf.submit(actor_for(0), &f.project, ctc_request(rng.random_bool(0.2)), &ctc_schema());
        }
        1..=3 => {
            if let Some(id) = pick(rng) {
                let _ = f.wf.compile_report(&id, &f.confidential, &f.synthetic);
            }
        }
        4..=6 => {
            if let Some(id) = pick(rng) {
                let p = f.wf.proposal(&id).unwrap();
                let decision = match rng.random_range(0..4) {
                    0 | 1 => Decision::approve(),
                    2 => Decision::reject("insufficient justification"),
                    _ => {
                        let factor = if rng.random_bool(0.8) { 1.5 } else { 0.5 };
                        let specs = p.specs.iter().map(|s| AccuracySpec { alpha: s.alpha * factor, ..*s }).collect();
                        Decision::adjust(specs, Some("relax".into()))
                    }
                };
                let version = if rng.random_bool(0.9) { Some(p.version) } else { Some(p.version + 1) };
                let _ = f.wf.decide(actor_for(2), &id, decision, &f.synthetic, version);
            }
        }
        7 => {
            if let Some(id) = pick(rng) {
                let _ = f.wf.respond_adjustment(actor_for(0), &id, rng.random_bool(0.7));
            }
        }
        8..=12 => {
            if let Some(id) = pick(rng) {
                let crash = if rng.random_bool(0.3) { Some(CrashPoint::ALL[rng.random_range(0..7)]) } else { None };
                let mut source = RandomSource::seeded(rng.random());
                if let Err(WorkflowError::Crashed(_)) = f.wf.execute_with(actor_for(if rng.random_bool(0.5) { 2 } else { 3 }), &id, &f.confidential, &mut source, crash) {
                    f.wf.recover().map_err(|e| format!("recover: {e}"))?;
                }
            }
        }
        _ => {
            f.wf.recover().map_err(|e| format!("recover: {e}"))?;
        }
    }
    Ok(())
}

fn check_invariants(f: &Fuzz) -> Result<(), String> {
    let reviewer = &f.actors[2];
    let mut forbidden: Vec<String> = vec!["DRYRUN_".into()];
    for p in f.wf.proposals() {
        if let Ok(report) = f.wf.report(reviewer, &p.proposal_id) {
            forbidden.extend(report.findings().map(|(_, finding)| finding.detail.clone()));
        }
    }
    let mut committed_total = 0.0;
    for p in f.wf.proposals() {
        let state = replay_history(&p.history).map_err(|e| e.to_string())?;
        ensure!(state == p.state, "{} history replays to {state:?}, state {:?}", p.proposal_id, p.state);
        let approved_at = p.history.iter().position(|t| t.to == ProposalState::Approved);
        let committed = f.wf.ledger().committed_with_prefix(&format!("{}/", p.proposal_id));
        committed_total += committed.iter().map(|e| e.epsilon.epsilon()).sum::<f64>();
        if !committed.is_empty() {
            ensure!(approved_at.is_some(), "{} committed budget without approval", p.proposal_id);
        }
        if matches!(p.state, ProposalState::Executed | ProposalState::Released) {
            let approved_at = approved_at.ok_or(format!("{} reached {:?} without approval", p.proposal_id, p.state))?;
            let executed_at = p.history.iter().position(|t| t.to == ProposalState::Executed).unwrap();
            ensure!(approved_at < executed_at, "{} executed before approval", p.proposal_id);
            ensure!(committed.len() == p.queries.len(), "{} released with {} commits", p.proposal_id, committed.len());
        }
        if f.wf.release(&p.proposal_id).is_some() {
            ensure!(approved_at.is_some(), "{} has a release without approval", p.proposal_id);
        }
        ensure!(f.wf.report(&f.actors[0], &p.proposal_id).is_err(), "researcher read the reviewer report");
    }
    let spent = f.wf.ledger().total_spent(&f.project).unwrap();
    ensure!((spent - committed_total).abs() < 1e-9, "ledger total {spent} vs committed {committed_total}");
    ensure!(f.wf.ledger().open_reservations("").is_empty(), "reservation left open");

    // What a researcher can see: their proposals and releases.
    let mut payloads = vec![serde_json::to_string(&f.wf.proposals_for_project(&f.project)).unwrap()];
    for p in f.wf.proposals_for_project(&f.project) {
        if let Some(r) = f.wf.release(&p.proposal_id) {
            payloads.push(serde_json::to_string(&r).unwrap());
        }
    }
    for body in &payloads {
        for needle in &forbidden {
            ensure!(!body.contains(needle.as_str()), "`{needle}` in researcher payload");
        }
    }
    Ok(())
}

fn accuracy_round_trip() -> Outcome {
    let start = Instant::now();
    let schema = Schema::new("survey", vec![ColumnSpec::numeric("score", 0.0, 100.0)]).unwrap();
    let synthetic = generate_placeholder(&schema, 10_000, 606).unwrap();
    let query = Query::new("mean_score", QueryKind::Mean { column: "score".into(), filter: Filter::all() });
    let spec = AccuracySpec::new(2.0, 0.05).unwrap();
    let settings = SimulationSettings::default();
    let config = MechanismConfig::default();
    let translation =
        epsilon_by_simulation(&query, &spec, &synthetic, &settings, &config, &mut RandomSource::seeded(6)).map_err(|e| e.to_string())?;
    let Translation::Feasible(t) = translation else {
        return Err("infeasible".into());
    };
    let attainment = simulate_attainment(&query, &spec, &synthetic, t.epsilon, 20_000, &config, 0xC0FFEE).map_err(|e| e.to_string())?;
    ensure!((0.95..=0.97).contains(&attainment), "re-simulated attainment {attainment} at epsilon {}", t.epsilon);
    within(start, 120)?;
    Ok(format!("epsilon {:.4}, re-simulated attainment {attainment:.4} over 20000 runs", t.epsilon.epsilon()))
}

fn ci_coverage() -> Outcome {
    let data = people(400, 9);
    let filter = Filter::all().and(Predicate::Eq { column: "g".into(), value: "a".into() });
    let truth = labels(&data, "g").iter().filter(|g| *g == "a").count() as f64;
    let eps = epsilon_for_count(&AccuracySpec::new(5.0, 0.05).unwrap()).unwrap();
    let mut rng = RandomSource::seeded(77);
    let reps = 100_000;
    let mut covered = 0;
    for _ in 0..reps {
        let r = dp_count(&data, &filter, eps, &mut rng).unwrap();
        if confidence_interval(&r, 0.05).intervals[0].contains(truth) {
            covered += 1;
        }
    }
    let count_cov = covered as f64 / reps as f64;
    ensure!((count_cov - 0.95).abs() <= 0.01, "count coverage {count_cov}");

    // Means go through the whole pipeline: submit, report, approve, execute,
    // release.
    let confidential = ctc_confidential(2000, 10);
    let income = column(&confidential, "income");
    let truth = income.iter().sum::<f64>() / income.len() as f64;
    let synthetic = generate_placeholder(&ctc_schema(), 2000, 11).unwrap();
    let ledger = Arc::new(Ledger::in_memory());
    let project = ledger.open_project("emily", "CTC", &"ctc".into()).unwrap().project_id;
    let settings = WorkflowSettings { default_advisory_threshold: None, ..WorkflowSettings::default() };
    let wf = Workflow::in_memory(ledger, settings);
    let (emily, rita) = (Actor::new("emily", Role::Researcher), Actor::new("rita", Role::Reviewer));
    let request = SubmitRequest {
        queries: vec![Query::new("mean_income", QueryKind::Mean { column: "income".into(), filter: Filter::all() })],
        specs: vec![AccuracySpec::new(2.0, 0.05).unwrap()],
        justification: "Average income.".into(),
        planned_outputs: String::new(),
    };
    let runs = 1000;
    let mut covered = 0;
    for i in 0..runs {
        let p = wf.submit(&emily, &project, request.clone(), &ctc_schema()).map_err(|e| e.to_string())?;
        wf.compile_report(&p.proposal_id, &confidential, &synthetic).map_err(|e| e.to_string())?;
        wf.decide(&rita, &p.proposal_id, Decision::approve(), &synthetic, None).map_err(|e| e.to_string())?;
        let release = wf
            .execute(&rita, &p.proposal_id, &confidential, &mut RandomSource::seeded(1000 + i))
            .map_err(|e| e.to_string())?;
        if release.queries[0].components[0].ci.contains(truth) {
            covered += 1;
        }
    }
    let mean_cov = covered as f64 / runs as f64;
    ensure!((mean_cov - 0.95).abs() <= 0.02, "mean coverage {mean_cov} (count coverage {count_cov})");
    Ok(format!("count coverage {count_cov:.4} over {reps}, mean coverage {mean_cov:.3} over {runs} pipeline runs"))
}

fn walkthrough() -> Outcome {
    let start = Instant::now();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let detail = rt.block_on(emily())?;
    within(start, 30)?;
    Ok(detail)
}

async fn emily() -> Outcome {
    use common::*;
    let dir = tempfile::tempdir().unwrap();
    prepare_data_dir(dir.path(), 5000);
    let s = Server::start(config(dir.path().join("data"))).await;

    ensure!(s.raw("GET", "/health", None, None).await.status == 200, "health");
    let datasets = s.get("/datasets", EMILY).await.data();
    ensure!(datasets[0]["dataset_id"] == DATASET, "dataset list {datasets}");
    let synthetic = s.get(&format!("/datasets/{DATASET}/synthetic"), EMILY).await;
    ensure!(synthetic.body.lines().count() == 2001, "synthetic download");

    let r = s.post("/projects", EMILY, json!({ "title": "CTC uptake by race", "dataset_id": DATASET })).await;
    ensure!(r.status == 201, "open project: {}", r.body);
    let project = r.data()["project_id"].as_str().unwrap().to_string();
    let base = format!("/projects/{project}");
    let (queries, specs) = emily_queries();

    let r = s.post(&format!("{base}/queries/validate"), EMILY, json!({ "queries": queries })).await;
    let checks = r.data()["queries"].clone();
    ensure!(checks.as_array().unwrap().iter().all(|c| c["valid"] == true), "validation: {checks}");
    let r = s.post(&format!("{base}/translate"), EMILY, json!({ "queries": queries, "specs": specs, "seed": 1 })).await;
    ensure!(r.status == 200, "translate: {}", r.body);
    let preview = r.data();
    ensure!(preview.as_array().unwrap().iter().all(|row| row["infeasible"].is_null()), "infeasible preview: {preview}");

    let body = json!({
        "queries": queries,
        "specs": specs,
        "justification": "Test whether Black and Hispanic families claim the CTC at lower rates than White families.",
        "planned_outputs": "Claim counts and rates by race; average credit; median income."
    });
    let r = s.post(&format!("{base}/submit"), EMILY, body).await;
    ensure!(r.status == 201, "submit: {}", r.body);
    let proposal = r.data()["proposal_id"].as_str().unwrap().to_string();

    let queue = s.get("/review/queue", RITA).await.data();
    ensure!(queue.as_array().unwrap().iter().any(|p| p["proposal_id"] == proposal.as_str()), "queue {queue}");
    let report = s.get(&format!("/review/{proposal}/report"), RITA).await.data();
    let rows = report["rows"].as_array().unwrap();
    let per_query: Vec<f64> = rows.iter().filter_map(|r| r["translation"]["epsilon"].as_f64()).collect();
    ensure!(per_query.len() == 5, "per-query epsilon missing: {report}");
    let total = report["total_epsilon"].as_f64().unwrap();
    ensure!((per_query.iter().sum::<f64>() - total).abs() < 1e-9, "total {total} vs {per_query:?}");
    ensure!(report.to_string().contains("DRYRUN_EMPTY_SUBSET"), "dry-run finding absent");

    let r = s.post(&format!("/review/{proposal}/decision"), RITA, json!({ "kind": "approve", "note": "Meets guidelines." })).await;
    ensure!(r.status == 200, "approve: {}", r.body);
    let r = s.post(&format!("/review/{proposal}/execute"), RITA, json!({})).await;
    ensure!(r.status == 200, "execute: {}", r.body);

    let release = s.get(&format!("{base}/release"), EMILY).await.data();
    let queries_out = release["release"]["queries"].as_array().unwrap();
    ensure!(queries_out.len() == 5, "release queries");
    for q in queries_out {
        for c in q["components"].as_array().unwrap() {
            let (est, lo, hi) = (c["estimate"].as_f64().unwrap(), c["ci"]["low"].as_f64().unwrap(), c["ci"]["high"].as_f64().unwrap());
            ensure!(lo <= est && est <= hi, "CI [{lo}, {hi}] excludes {est}");
        }
    }
    let methods = s.get(&format!("{base}/release/methods.txt"), EMILY).await.body;
    ensure!(methods.contains("calibrated random noise"), "methods text: {methods}");
    let csv = s.get(&format!("{base}/release/results.csv"), EMILY).await.body;
    ensure!(csv.starts_with("query_id,statistic,estimate,ci_low,ci_high,confidence,units"), "csv header");
    let spent = s.get(&base, EMILY).await.data()["total_epsilon_spent"].as_f64().unwrap();
    ensure!((spent - total).abs() < 1e-9, "spent {spent} vs approved {total}");
    for body in s.researcher_log.lock().iter() {
        ensure!(!SENTINELS.iter().any(|x| body.contains(x)) && !body.contains("DRYRUN_"), "leak in {body}");
    }
    s.stop();
    Ok(format!("5 queries released, total epsilon {total:.3}, {} CSV rows", csv.lines().count() - 1))
}
