use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use voltlab::server::app;

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => builder.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn send_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = send(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn campaign_body(results_dir: &str, package: &str, baseline: u32, iterations: u32, auto: bool) -> Value {
    json!({
        "iterations": iterations,
        "baseline_iterations": baseline,
        "auto_advance": auto,
        "results_dir": results_dir,
        "plan": {
            "app_package": package,
            "app_apk_path": "app.apk",
            "test_apk_path": "test.apk",
            "test_class": "com.example.EnergyTest",
            "test_runner": "androidx.test.runner.AndroidJUnitRunner",
            "mode": "aut",
            "device_data_path": "/sdcard/voltlab"
        },
        "source": {
            "kind": "simulated",
            "rate_hz": 1000,
            "runtime_current_limit": 8.0,
            "usb_channel_enabled": true,
            "serial_number": null,
            "profile": {
                "baseline_current": 0.2,
                "active_current": 0.5,
                "voltage": 4.0,
                "noise_sd": 0.01,
                "seed": 0,
                "active_window": null,
                "dropped_samples": 0
            },
            "replay_path": null
        }
    })
}

async fn wait_for(app: &Router, pred: impl Fn(&Value) -> bool) -> Value {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let (status, view) = send_json(app, "GET", "/campaign", None).await;
        assert_eq!(status, StatusCode::OK);
        if pred(&view) {
            return view;
        }
        assert!(Instant::now() < deadline, "timed out; last view {view}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

fn sse_events(body: &[u8]) -> Vec<Value> {
    String::from_utf8_lossy(body)
        .lines()
        .filter_map(|l| l.strip_prefix("data:"))
        .map(|d| serde_json::from_str(d.trim()).unwrap())
        .collect()
}

#[tokio::test]
async fn no_campaign_yet() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path());
    let (status, _) = send_json(&app, "GET", "/campaign", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send_json(&app, "POST", "/campaign/decision", Some(json!({"action": "next_iteration"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn event_stream_covers_five_iterations() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path());
    let (status, view) = send_json(&app, "POST", "/campaign", Some(campaign_body("run", "com.a", 0, 5, true))).await;
    assert_eq!(status, StatusCode::CREATED, "{view}");
    let (status, body) = send(&app, "GET", "/campaign/events", None).await;
    assert_eq!(status, StatusCode::OK);
    let events = sse_events(&body);
    let seqs: Vec<u64> = events.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>(), "gap-free, strictly increasing");
    let completed = events.iter().filter(|e| e["kind"] == "iteration_completed").count();
    assert_eq!(completed, 5);
    assert_eq!(events.last().unwrap()["kind"], "campaign_done");

    // resume from the middle
    let (_, body) = send(&app, "GET", "/campaign/events?since=3", None).await;
    assert_eq!(sse_events(&body)[0]["seq"], 4);
    let (_, log) = send_json(&app, "GET", "/campaign/log?since=0", None).await;
    assert_eq!(log.as_array().unwrap().len(), events.len());

    let view = wait_for(&app, |v| v["running"] == false).await;
    assert_eq!(view["state"]["phase"], "done");
    let (status, _) = send_json(&app, "POST", "/campaign/decision", Some(json!({"action": "next_iteration"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, list) = send_json(&app, "GET", "/artifacts", None).await;
    assert_eq!(status, StatusCode::OK);
    let files: Vec<&str> = list["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    assert!(files.contains(&"aut/trace_R5.csv"), "{files:?}");
    assert!(files.contains(&"campaign.json"));
}

#[tokio::test]
async fn decisions_and_conflicts() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path());
    let (status, _) = send_json(&app, "POST", "/campaign", Some(campaign_body("run", "com.a", 0, 2, false))).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, _) = send_json(&app, "POST", "/campaign", Some(campaign_body("other", "com.b", 0, 2, false))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let view = wait_for(&app, |v| v["state"]["awaiting_decision"] == true).await;
    assert_eq!(view["state"]["current_iteration"], 1);

    let (status, _) = send_json(&app, "POST", "/campaign/decision", Some(json!({"action": "skip"}))).await;
    assert!(status.is_client_error() && status != StatusCode::CONFLICT, "{status}");

    let (status, view) =
        send_json(&app, "POST", "/campaign/decision", Some(json!({"action": "rerun_iteration"}))).await;
    assert_eq!(status, StatusCode::OK, "{view}");
    assert_eq!(view["state"]["current_iteration"], 1);
    assert_eq!(view["state"]["records"][0]["attempt"], 1);
    assert_eq!(view["state"]["records"].as_array().unwrap().len(), 1);

    let (_, log) = send_json(&app, "GET", "/campaign/log", None).await;
    let started: Vec<&Value> = log.as_array().unwrap().iter().filter(|e| e["kind"] == "iteration_started").collect();
    assert_eq!(started.len(), 2);
    assert_eq!(started[1]["payload"]["index"], 1);

    for action in ["next_iteration", "next_iteration"] {
        wait_for(&app, |v| v["state"]["awaiting_decision"] == true).await;
        let (status, _) = send_json(&app, "POST", "/campaign/decision", Some(json!({ "action": action }))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let view = wait_for(&app, |v| v["running"] == false).await;
    assert_eq!(view["state"]["phase"], "done");

    // a new campaign may start once the old one is done
    let (status, _) = send_json(&app, "POST", "/campaign", Some(campaign_body("second", "com.b", 0, 1, true))).await;
    assert_eq!(status, StatusCode::CREATED);
    wait_for(&app, |v| v["running"] == false).await;
}

#[tokio::test]
async fn refused_campaign() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path());
    let mut body = campaign_body("run", "com.a", 0, 2, true);
    body["device"] = json!({ "api_level": 19 });
    let (status, err) = send_json(&app, "POST", "/campaign", Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(err["error"].as_str().unwrap().contains("API level 19"));
}

async fn run_to_data(app: &Router, dir: &str, package: &str) {
    let (status, _) = send_json(app, "POST", "/campaign", Some(campaign_body(dir, package, 2, 3, true))).await;
    assert_eq!(status, StatusCode::CREATED);
    wait_for(app, |v| v["running"] == false).await;
    let (status, summary) = send_json(app, "POST", "/preprocess", Some(json!({ "results_dir": dir }))).await;
    assert_eq!(status, StatusCode::OK, "{summary}");
    assert_eq!(summary["rows"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn stage_endpoints_match_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path());
    run_to_data(&app, "a", "com.a").await;
    run_to_data(&app, "b", "com.b").await;

    let (status, cols) = send_json(&app, "GET", "/data/columns?path=a/data.csv", None).await;
    assert_eq!(status, StatusCode::OK);
    let cols = cols.as_array().unwrap();
    assert_eq!(cols.len(), 7);
    assert_eq!(cols[0]["name"], "package");
    assert_eq!(cols[0]["categories"], json!(["com.a"]));

    let spec = json!({ "test": "kruskal_wallis", "dependent": "energy_j", "independent": "package" });
    let (status, out) = send_json(
        &app,
        "POST",
        "/analysis",
        Some(json!({ "data": ["a/data.csv", "b/data.csv"], "spec": spec, "out_dir": "served" })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{out}");
    let served_md = std::fs::read_to_string(tmp.path().join("served/report.md")).unwrap();
    assert_eq!(out["report"]["markdown"], served_md.as_str());

    let plot_spec = json!({ "kind": "box", "dependent": "energy_j", "independent": "package" });
    let (status, svg) =
        send(&app, "POST", "/plot", Some(json!({ "data": ["a/data.csv", "b/data.csv"], "spec": plot_spec }))).await;
    assert_eq!(status, StatusCode::OK);

    // the same stages through the binary
    let data = |d: &str| tmp.path().join(d).join("data.csv");
    let cli_dir = tmp.path().join("cli");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_voltlab"))
        .args(["analyze", "--test", "kruskal_wallis", "--dependent", "energy_j", "--independent", "package", "--data"])
        .args([data("a"), data("b")])
        .arg("--out-dir")
        .arg(&cli_dir)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert_eq!(std::fs::read_to_string(cli_dir.join("report.md")).unwrap(), served_md);

    let cli_svg = tmp.path().join("cli.svg");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_voltlab"))
        .args(["plot", "--kind", "box", "--dependent", "energy_j", "--independent", "package", "--data"])
        .args([data("a"), data("b")])
        .arg("--out")
        .arg(&cli_svg)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert_eq!(std::fs::read(&cli_svg).unwrap(), svg);

    let (status, err) = send_json(&app, "POST", "/preprocess", Some(json!({ "results_dir": "missing" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(err["error"].as_str().unwrap().contains("campaign.json"));
}
