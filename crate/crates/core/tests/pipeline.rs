//! End-to-end checks on scenario outputs: CSV, traces and manifest agree.

use semran::experiments::{parse_overrides, plan, read_csv, run_scenario, Manifest, Scenario, CSV_COLUMNS};
use semran::oracle::kpis_from_jsonl;
use sha2::{Digest, Sha256};

fn short_plan(scenario: Scenario) -> semran::experiments::Plan {
    let overrides = parse_overrides("horizon_slots = 400\n").unwrap();
    plan(scenario, &[1, 2], &overrides).unwrap()
}

#[test]
fn csv_rows_match_cells_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let p = short_plan(Scenario::Bandwidth);
    let out = run_scenario(&p, dir.path(), 2, true).unwrap();
    let text = std::fs::read_to_string(&out.csv).unwrap();
    let (header, rows) = read_csv(&text).unwrap();
    assert_eq!(header[0], "# schema_version = 1");
    let mut cols: Vec<&str> = CSV_COLUMNS.to_vec();
    cols.sort_unstable();
    assert_eq!(rows[0].keys().map(String::as_str).collect::<Vec<_>>(), cols);
    assert_eq!(rows.len(), p.n_cells());

    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&out.manifest).unwrap()).unwrap();
    assert_eq!(manifest.csv_sha256, hex::encode(Sha256::digest(text.as_bytes())));
    assert_eq!(manifest.cells.len(), rows.len());

    let traces = out.traces.unwrap();
    for (row, cell) in rows.iter().zip(&manifest.cells) {
        assert_eq!(row["paradigm"], cell.paradigm);
        assert_eq!(row["seed"], cell.seed.to_string());
        let trace = std::fs::read_to_string(traces.join(cell.trace.as_ref().unwrap())).unwrap();
        assert_eq!(cell.trace_sha256.as_deref(), Some(hex::encode(Sha256::digest(trace.as_bytes())).as_str()));
        let cfg = p.cell_config(0, 0, 1).unwrap();
        let deadline = cfg.latency_budget_slots as f64;
        let k = kpis_from_jsonl(&trace, deadline, deadline + cfg.phy.undelivered_penalty_slots).unwrap();
        assert_eq!(row["tasks"], k.tasks.to_string());
        assert_eq!(row["successes"], k.successes.to_string());
        let tsr: f64 = row["tsr"].parse().unwrap();
        assert!((tsr - k.tsr).abs() < 1e-12);
    }
}

#[test]
fn header_lines_carry_schema_and_config_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let p = short_plan(Scenario::TsrVsSnr);
    let out = run_scenario(&p, dir.path(), 1, false).unwrap();
    assert!(out.traces.is_none());
    let text = std::fs::read_to_string(&out.csv).unwrap();
    assert!(text.starts_with("# schema_version = 1\n"));
    assert_eq!(text.matches("config_hash = ").count(), p.arms.len());
}

#[test]
fn pareto_rows_are_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_scenario(&short_plan(Scenario::Pareto), dir.path(), 1, false).unwrap();
    assert!(out.results.iter().all(|r| r.is_frontier.is_some()));
    assert!(out.results.iter().any(|r| r.is_frontier == Some(true)));
}

#[test]
fn drift_rows_carry_drift_statistics() {
    let overrides = parse_overrides("horizon_slots = 600\nshift_t0 = 300\nwindow_delta = 50\n").unwrap();
    let p = plan(Scenario::Drift, &[1], &overrides).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_scenario(&p, dir.path(), 1, false).unwrap();
    assert!(out.results.iter().all(|r| r.drift.is_some()));
}

#[test]
fn reserved_overrides_are_rejected() {
    for text in ["seed = 3\n", "paradigm = TrRan\n"] {
        let o = parse_overrides(text).unwrap();
        let err = plan(Scenario::Learning, &[1], &o).unwrap_err();
        assert!(err.is_validation());
    }
    let bad = parse_overrides("snr_db = loud\n").unwrap();
    assert!(plan(Scenario::Bandwidth, &[1], &bad).unwrap_err().is_validation());
}
