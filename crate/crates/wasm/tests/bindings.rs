use serde_json::{json, Value};
use voltlab_wasm::{analyze_json, columns_json, downsample, plot_svg, simulate_json, MAX_POINTS};

const DATA: &str = "package,iteration,energy_j,cpu_pct,mem_pct,rx_bytes,tx_bytes
com.a,1,0.41,12.5,3.1,1200,300
com.a,2,0.39,12.0,3.0,1180,310
com.a,3,0.44,13.1,3.2,1250,290
com.b,1,1.21,20.4,4.0,5200,900
com.b,2,1.18,19.9,4.1,5100,950
com.b,3,1.25,21.0,3.9,5300,880
com.c,1,2.02,30.2,5.0,9000,1500
com.c,2,1.97,29.8,5.1,9100,1480
com.c,3,2.05,30.5,4.9,8900,1520
";

#[test]
fn simulation_energy_and_downsampling() {
    let req = json!({ "baseline_current": 0.2, "active_current": 0.2, "voltage": 4.0, "duration_s": 1.0 });
    let out: Value = serde_json::from_str(&simulate_json(&req.to_string()).unwrap()).unwrap();
    assert_eq!(out["samples"], 5000);
    assert!((out["energy_j"].as_f64().unwrap() - 0.8).abs() < 1e-9);
    let points = out["points"].as_array().unwrap();
    assert!(points.len() <= MAX_POINTS);
    assert!(out["active_energy_j"].is_null());
}

#[test]
fn simulation_active_window_and_warning() {
    let req = json!({
        "baseline_current": 0.2, "active_current": 0.6, "voltage": 4.0,
        "active": [0.5, 1.5], "dropped_samples": 1200, "duration_s": 2.0
    });
    let out: Value = serde_json::from_str(&simulate_json(&req.to_string()).unwrap()).unwrap();
    assert_eq!(out["warn"], true);
    assert_eq!(out["dropped"], 1200);
    let active = out["active_energy_j"].as_f64().unwrap();
    // 0.6 A x 4 V over the window, less the lost share of samples
    assert!(active > 0.0 && active <= 2.4 + 1e-9, "{active}");
}

#[test]
fn bad_request_is_an_error() {
    assert!(simulate_json("{}").is_err());
    let req = json!({ "baseline_current": 0.2, "active_current": 0.1, "voltage": 4.0 });
    assert!(simulate_json(&req.to_string()).is_err());
}

#[test]
fn downsample_keeps_small_inputs() {
    let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 1.0)).collect();
    assert_eq!(downsample(&pts, 20), pts);
    let big: Vec<(f64, f64)> = (0..10_001).map(|i| (i as f64, 2.0)).collect();
    let d = downsample(&big, MAX_POINTS);
    assert!(d.len() <= MAX_POINTS);
    assert!(d.iter().all(|p| p.1 == 2.0));
}

#[test]
fn analysis_over_csv_text() {
    let spec = json!({ "test": "kruskal_wallis", "dependent": "energy_j", "independent": "package" });
    let out: Value = serde_json::from_str(&analyze_json(DATA, &spec.to_string()).unwrap()).unwrap();
    assert!((out["result"]["statistic"].as_f64().unwrap() - 7.2).abs() < 1e-9);
    assert!(out["markdown"].as_str().unwrap().contains("reject the null hypothesis"));
}

#[test]
fn plot_and_columns() {
    let spec = json!({ "kind": "box", "dependent": "energy_j", "independent": "package" });
    let svg = plot_svg(DATA, &spec.to_string()).unwrap();
    assert_eq!(svg.matches("<!-- box ").count(), 3);
    let cols: Vec<String> = serde_json::from_str(&columns_json(DATA).unwrap()).unwrap();
    assert_eq!(cols.len(), 7);
    let empty = DATA.lines().next().unwrap().to_string() + "\n";
    assert!(plot_svg(&empty, &spec.to_string()).is_err());
}
