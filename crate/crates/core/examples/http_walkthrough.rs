// A researcher and a reviewer working through the HTTP API: register a
// dataset, preview, submit, review, approve, execute, download.
//
// ```bash
// cargo run --example http_walkthrough
// ```

use std::error::Error;

use serde_json::{json, Value};
use validation_server::data::{ColumnSpec, Schema};
use validation_server::service::{build_app, store, Config};
use validation_server::workflow::Role;

const RESEARCHER: &str = "researcher-token";
const REVIEWER: &str = "reviewer-token";

struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    async fn call(&self, token: &str, path: &str, body: Option<Value>) -> Result<Value, Box<dyn Error>> {
        let url = format!("{}{path}", self.base);
        let req = match body {
            Some(b) => self.http.post(url).json(&b),
            None => self.http.get(url),
        };
        let resp: Value = req.bearer_auth(token).send().await?.json().await?;
        match resp.get("error") {
            Some(err) => Err(format!("{path}: {err}").into()),
            None => Ok(resp["data"].clone()),
        }
    }

    async fn text(&self, token: &str, path: &str) -> Result<String, Box<dyn Error>> {
        Ok(self.http.get(format!("{}{path}", self.base)).bearer_auth(token).send().await?.text().await?)
    }
}

async fn walkthrough() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let schema = Schema::new(
        "ctc",
        vec![
            ColumnSpec::categorical("race", ["white", "black", "hispanic"]),
            ColumnSpec::categorical("claimed", ["yes", "no"]),
            ColumnSpec::numeric("credit", 0.0, 6000.0),
        ],
    )?;
    let mut csv = String::from("race,claimed,credit\n");
    for i in 0..3000 {
        let race = ["white", "black", "hispanic"][i % 3];
        let claimed = i % 7 != 0;
        csv.push_str(&format!("{race},{},{}\n", if claimed { "yes" } else { "no" }, if claimed { 1000 + (i % 4) * 1000 } else { 0 }));
    }
    store::ingest(dir.path(), &schema, csv.as_bytes())?;
    store::register_placeholder(dir.path(), &"ctc".into(), 2000, 9)?;

    let config = Config::new(dir.path())
        .with_token(RESEARCHER, Role::Researcher, "emily")
        .with_token(REVIEWER, Role::Reviewer, "rita");
    let (app, _state) = build_app(config)?;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let c = Client { base: format!("http://{}", listener.local_addr()?), http: reqwest::Client::new() };
    let server = tokio::spawn(async move { axum::serve(listener, app).await });

    let project = c.call(RESEARCHER, "/projects", Some(json!({ "title": "CTC uptake", "dataset_id": "ctc" }))).await?;
    let base = format!("/projects/{}", project["project_id"].as_str().unwrap_or_default());
    let queries = json!([
        { "query_id": "claims_by_race", "statistic": "histogram", "column": "race",
          "filter": [{ "op": "eq", "column": "claimed", "value": "yes" }] },
        { "query_id": "mean_credit", "statistic": "mean", "column": "credit",
          "filter": [{ "op": "eq", "column": "claimed", "value": "yes" }] }
    ]);
    let specs = json!([{ "alpha": 25.0, "beta": 0.05 }, { "alpha": 100.0, "beta": 0.05 }]);

    let preview = c.call(RESEARCHER, &format!("{base}/translate"), Some(json!({ "queries": queries, "specs": specs, "seed": 1 }))).await?;
    for row in preview.as_array().into_iter().flatten() {
        println!("preview {}: synthetic {} noisy {}", row["query_id"], row["synthetic_value"], row["noisy_draw"]);
    }
    let body = json!({ "queries": queries, "specs": specs, "justification": "Who claims the credit?" });
    let proposal = c.call(RESEARCHER, &format!("{base}/submit"), Some(body)).await?;
    let id = proposal["proposal_id"].as_str().unwrap_or_default().to_string();

    let report = c.call(REVIEWER, &format!("/review/{id}/report"), None).await?;
    println!("reviewer sees total epsilon {}", report["total_epsilon"]);
    c.call(REVIEWER, &format!("/review/{id}/decision"), Some(json!({ "kind": "approve" }))).await?;
    c.call(REVIEWER, &format!("/review/{id}/execute"), Some(json!({}))).await?;

    println!("{}", c.text(RESEARCHER, &format!("{base}/release/results.csv")).await?);
    println!("{}", c.text(RESEARCHER, &format!("{base}/release/methods.txt")).await?);
    server.abort();
    Ok(())
}

pub fn run_example() -> Result<(), Box<dyn Error>> {
    tokio::runtime::Runtime::new()?.block_on(walkthrough())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
