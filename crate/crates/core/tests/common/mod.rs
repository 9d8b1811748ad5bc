//! Fixtures shared by the integration tests: the tax-credit dataset, CLI
//! helpers and an in-process HTTP server with a small client.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use validation_server::data::{ColumnSpec, Schema};
use validation_server::service::{build_app, AppState, Config};
use validation_server::workflow::Role;

pub const DATASET: &str = "irs_ctc";
pub const EMILY: &str = "emily-token-0001";
pub const OMAR: &str = "omar-token-0002";
pub const RITA: &str = "rita-token-0003";
pub const ADAM: &str = "adam-token-0004";

/// Values planted in one confidential record. Aggregates never reproduce
/// them, so any occurrence in a researcher payload is a leak.
pub const SENTINELS: [&str; 2] = ["31415.92653", "2718.28182"];

pub fn schema() -> Schema {
    Schema::new(
        DATASET,
        vec![
            ColumnSpec::categorical("race", ["white", "black", "hispanic", "asian", "other"]),
            ColumnSpec::categorical("claimed_ctc", ["yes", "no"]),
            ColumnSpec::numeric("children", 0.0, 6.0),
            ColumnSpec::numeric("income", 0.0, 250_000.0),
            ColumnSpec::numeric("ctc_amount", 0.0, 6000.0),
        ],
    )
    .unwrap()
}

/// Confidential rows. No record has race `other`, which the uniform
/// placeholder twin does contain.
pub fn confidential_csv(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("race,claimed_ctc,children,income,ctc_amount\n");
    out.push_str(&format!("white,yes,2,{},{}\n", SENTINELS[0], SENTINELS[1]));
    for _ in 1..n {
        let u: f64 = rng.random();
        let (race, p_claim) = match u {
            u if u < 0.60 => ("white", 0.86),
            u if u < 0.75 => ("black", 0.71),
            u if u < 0.95 => ("hispanic", 0.73),
            _ => ("asian", 0.81),
        };
        let children: u32 = rng.random_range(1..=4);
        let claimed = rng.random::<f64>() < p_claim;
        let income = (rng.random_range(8_000.0..180_000.0_f64) * 100.0).round() / 100.0;
        let amount = if claimed { (children as f64 * 2000.0 - rng.random_range(0.0..800.0)).clamp(0.0, 6000.0).round() } else { 0.0 };
        out.push_str(&format!("{race},{},{children},{income},{amount}\n", if claimed { "yes" } else { "no" }));
    }
    out
}

pub fn vsadmin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsadmin")).args(args).env("RUST_LOG", "warn").output().expect("vsadmin runs")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Ingests the dataset and registers a placeholder twin through the CLI.
pub fn prepare_data_dir(dir: &Path, rows: usize) {
    let manifest = dir.join("irs_ctc.json");
    std::fs::write(&manifest, serde_json::to_vec_pretty(&schema()).unwrap()).unwrap();
    let csv = dir.join("irs_ctc.csv");
    std::fs::write(&csv, confidential_csv(rows, 2024)).unwrap();
    let data = dir.join("data");
    let data = data.to_str().unwrap();
    let out = vsadmin(&["ingest", "--data-dir", data, "--manifest", manifest.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert!(out.status.success(), "ingest failed: {}", stderr(&out));
    let out = vsadmin(&["register-synthetic", "--data-dir", data, "--dataset", DATASET, "--placeholder", "2000", "7"]);
    assert!(out.status.success(), "register failed: {}", stderr(&out));
}

pub fn config(data_dir: PathBuf) -> Config {
    Config::new(data_dir)
        .with_token(EMILY, Role::Researcher, "emily")
        .with_token(OMAR, Role::Researcher, "omar")
        .with_token(RITA, Role::Reviewer, "rita")
        .with_token(ADAM, Role::Admin, "adam")
}

pub struct Response {
    pub status: u16,
    pub body: String,
}

impl Response {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.body).unwrap_or_else(|e| panic!("not JSON ({e}): {}", self.body))
    }

    pub fn data(&self) -> Value {
        let v = self.json();
        assert_eq!(v["schema_version"], 1, "{}", self.body);
        v["data"].clone()
    }

    pub fn error_code(&self) -> String {
        self.json()["error"]["code"].as_str().unwrap_or_default().to_string()
    }
}

pub struct Server {
    pub base: String,
    pub state: Arc<AppState>,
    client: reqwest::Client,
    task: tokio::task::JoinHandle<()>,
    /// Every body returned to a researcher token, for containment greps.
    pub researcher_log: Mutex<Vec<String>>,
}

impl Server {
    pub async fn start(config: Config) -> Server {
        let (app, state) = build_app(config).expect("app builds");
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let task = tokio::spawn(async move {
            axum::serve(listener, app).await.unwrap();
        });
        Server { base, state, client: reqwest::Client::new(), task, researcher_log: Mutex::new(Vec::new()) }
    }

    pub async fn raw(&self, method: &str, path: &str, token: Option<&str>, body: Option<Vec<u8>>) -> Response {
        let url = format!("{}{}", self.base, path);
        let mut req = match method {
            "GET" => self.client.get(url),
            "POST" => self.client.post(url),
            other => panic!("unsupported method {other}"),
        };
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.header("content-type", "application/json").body(b);
        }
        let resp = req.send().await.expect("request sent");
        let status = resp.status().as_u16();
        let body = resp.text().await.unwrap();
        if matches!(token, Some(EMILY) | Some(OMAR)) {
            self.researcher_log.lock().push(body.clone());
        }
        Response { status, body }
    }

    pub async fn get(&self, path: &str, token: &str) -> Response {
        self.raw("GET", path, Some(token), None).await
    }

    pub async fn post(&self, path: &str, token: &str, body: Value) -> Response {
        self.raw("POST", path, Some(token), Some(serde_json::to_vec(&body).unwrap())).await
    }

    pub fn stop(self) {
        self.task.abort();
    }
}

pub fn eq(column: &str, value: &str) -> Value {
    json!({ "op": "eq", "column": column, "value": value })
}

/// The tax-credit questions: uptake by race, the average credit among
/// Black claimants, median income, and a subset that is empty in the
/// confidential data.
pub fn emily_queries() -> (Value, Value) {
    let queries = json!([
        { "query_id": "households_by_race", "statistic": "histogram", "column": "race" },
        { "query_id": "claims_by_race", "statistic": "histogram", "column": "race", "filter": [eq("claimed_ctc", "yes")] },
        { "query_id": "mean_credit_black", "statistic": "mean", "column": "ctc_amount",
          "filter": [eq("race", "black"), eq("claimed_ctc", "yes")] },
        { "query_id": "median_income", "statistic": "quantile", "column": "income", "q": 0.5 },
        { "query_id": "claims_other", "statistic": "count", "filter": [eq("race", "other"), eq("claimed_ctc", "yes")] }
    ]);
    let specs = json!([
        { "alpha": 30.0, "beta": 0.05 },
        { "alpha": 30.0, "beta": 0.05 },
        { "alpha": 150.0, "beta": 0.05 },
        { "alpha": 0.02, "beta": 0.05 },
        { "alpha": 20.0, "beta": 0.05 }
    ]);
    (queries, specs)
}

/// Opens a project for Emily and submits the standard proposal; returns
/// (project id, proposal id).
pub async fn open_and_submit(server: &Server) -> (String, String) {
    let r = server.post("/projects", EMILY, json!({ "title": "CTC uptake by race", "dataset_id": DATASET })).await;
    assert_eq!(r.status, 201, "{}", r.body);
    let project = r.data()["project_id"].as_str().unwrap().to_string();
    let (queries, specs) = emily_queries();
    let body = json!({
        "queries": queries,
        "specs": specs,
        "justification": "Measure whether Black and Hispanic families claim the CTC at lower rates, to target outreach.",
        "planned_outputs": "Uptake rates by race with confidence intervals."
    });
    let r = server.post(&format!("/projects/{project}/submit"), EMILY, body).await;
    assert_eq!(r.status, 201, "{}", r.body);
    let proposal = r.data()["proposal_id"].as_str().unwrap().to_string();
    (project, proposal)
}
