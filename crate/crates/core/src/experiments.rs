//! Scenario presets, the seed-replicated sweep driver, and the CSV,
//! JSON-lines trace and manifest writers.
//!
//! A scenario expands into cells (arm × sweep point × seed). Each cell's
//! config is built in a fixed order: paradigm defaults, scenario preset,
//! user overrides, arm settings, sweep value, seed. Arms of one scenario
//! share the seed list and therefore the same world, channels and task
//! streams. Cells are independent and may run on several threads; results
//! are merged and sorted before anything is written.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, Paradigm, ScenarioConfig};
use crate::control::POWER_LEVELS_W;
use crate::engine::{run, EngineError, Hooks, NoHooks, RunOutput, SlotRow, TraceWriter, World, TRACE_SCHEMA_VERSION};
use crate::kpi::{compute_kpis, pareto_indices, KpiError, KpiRecord};
use crate::monitors::ActionTaken;

/// Version of the CSV column layout.
pub const CSV_SCHEMA_VERSION: u32 = 1;
/// Slots before the shift used for the pre-shift TSR.
pub const PRE_SHIFT_WINDOW: u64 = 500;
/// Slots after a rollback over which the recovered TSR is measured.
pub const RECOVERY_WINDOW: u64 = 50;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid setting '{key}': {message}")]
    Setting { key: String, message: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Kpi(#[from] KpiError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    /// True for errors caused by the configuration rather than the run.
    pub fn is_validation(&self) -> bool {
        matches!(self, ExperimentError::Config(_) | ExperimentError::Setting { .. })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    TsrVsSnr,
    Bandwidth,
    Learning,
    Pareto,
    CSweep,
    Drift,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::TsrVsSnr,
        Scenario::Bandwidth,
        Scenario::Learning,
        Scenario::Pareto,
        Scenario::CSweep,
        Scenario::Drift,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::TsrVsSnr => "tsr-vs-snr",
            Scenario::Bandwidth => "bandwidth",
            Scenario::Learning => "learning",
            Scenario::Pareto => "pareto",
            Scenario::CSweep => "c-sweep",
            Scenario::Drift => "drift",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| format!("unknown scenario '{s}'"))
    }
}

/// One configuration arm of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    /// Value of the `paradigm` column.
    pub label: String,
    pub paradigm: Paradigm,
    /// Applied after the user overrides.
    pub settings: Vec<(String, String)>,
}

impl Arm {
    fn plain(paradigm: Paradigm) -> Self {
        Self {
            label: paradigm.to_string(),
            paradigm,
            settings: Vec::new(),
        }
    }
}

/// Keys and values of one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub values: Vec<(String, f64)>,
}

impl SweepPoint {
    fn single(key: &str, v: f64) -> Self {
        Self {
            values: vec![(key.to_string(), v)],
        }
    }

    pub fn key(&self) -> String {
        self.values.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join("+")
    }

    pub fn value(&self) -> String {
        self.values.iter().map(|(_, v)| fmt_f(*v)).collect::<Vec<_>>().join("+")
    }

    pub fn numeric(&self) -> Vec<f64> {
        self.values.iter().map(|(_, v)| *v).collect()
    }
}

/// A fully expanded scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub scenario: Scenario,
    /// Preset keys shared by every arm.
    pub preset: Vec<(String, String)>,
    pub arms: Vec<Arm>,
    pub points: Vec<SweepPoint>,
    pub seeds: Vec<u64>,
    /// User overrides, applied after the preset.
    pub overrides: Vec<(String, String)>,
}

fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

const ALL_PARADIGMS: [Paradigm; 4] = [
    Paradigm::TrRan,
    Paradigm::AiORan,
    Paradigm::SemComOnly,
    Paradigm::TwoTimescale,
];

/// Settings that make the codec learn fast enough for coupling effects to
/// show within the horizon; shared by `learning` and `c-sweep`.
const STRESS: [(&str, &str); 5] = [
    ("snr_db", "15"),
    ("codec_loss_weight", "3000"),
    ("grad_clip", "0.1"),
    ("monitors", "true"),
    ("monitor_action", "LogOnly"),
];

/// Keys a user override may not set: they identify the cell.
const RESERVED: [&str; 2] = ["paradigm", "seed"];

/// Expand `scenario` for `seeds` with user `overrides`.
pub fn plan(scenario: Scenario, seeds: &[u64], overrides: &[(String, String)]) -> Result<Plan, ExperimentError> {
    for (k, _) in overrides {
        if RESERVED.contains(&k.as_str()) {
            return Err(ExperimentError::Setting {
                key: k.clone(),
                message: "set per cell by the scenario; remove it from the config".into(),
            });
        }
    }
    let (preset, arms, points) = match scenario {
        Scenario::TsrVsSnr => (
            kv(&[("horizon_slots", "20000")]),
            ALL_PARADIGMS.iter().map(|&p| Arm::plain(p)).collect(),
            [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0]
                .iter()
                .map(|&v| SweepPoint::single("snr_db", v))
                .collect(),
        ),
        Scenario::Bandwidth => (
            kv(&[("horizon_slots", "20000"), ("snr_db", "10")]),
            ALL_PARADIGMS.iter().map(|&p| Arm::plain(p)).collect(),
            [5.0, 10.0, 15.0, 20.0]
                .iter()
                .map(|&v| SweepPoint::single("bandwidth_units", v))
                .collect(),
        ),
        Scenario::Learning => {
            let mut preset = kv(&STRESS);
            preset.push(("horizon_slots".into(), "50000".into()));
            (
                preset,
                ALL_PARADIGMS.iter().map(|&p| Arm::plain(p)).collect(),
                vec![SweepPoint { values: Vec::new() }],
            )
        }
        Scenario::Pareto => {
            let mut points = Vec::new();
            for &p in &POWER_LEVELS_W {
                for d in [3.0, 6.0] {
                    points.push(SweepPoint {
                        values: vec![("power_level_w".into(), p), ("latency_budget_slots".into(), d)],
                    });
                }
            }
            (
                kv(&[("horizon_slots", "10000"), ("snr_db", "10")]),
                ALL_PARADIGMS.iter().map(|&p| Arm::plain(p)).collect(),
                points,
            )
        }
        Scenario::CSweep => {
            let mut preset = kv(&STRESS);
            preset.push(("horizon_slots".into(), "50000".into()));
            preset.push(("ablation".into(), "true".into()));
            preset.push(("k_period".into(), "1".into()));
            (
                preset,
                vec![Arm::plain(Paradigm::TwoTimescale)],
                [1.0, 0.3, 0.1, 0.03]
                    .iter()
                    .map(|&v| SweepPoint::single("c_ratio", v))
                    .collect(),
            )
        }
        Scenario::Drift => (
            kv(&[
                ("horizon_slots", "8000"),
                ("oran", "true"),
                ("validation_margin", "1.0"),
                ("monitors", "true"),
                ("monitor_action", "Rollback"),
                ("k_period", "2"),
                ("codec_loss_weight", "600"),
                ("shift_t0", "5000"),
            ]),
            vec![Arm::plain(Paradigm::TwoTimescale)],
            [0.0, 2.0]
                .iter()
                .map(|&v| SweepPoint::single("shift_sigma", v))
                .collect(),
        ),
    };
    let plan = Plan {
        scenario,
        preset,
        arms,
        points,
        seeds: seeds.to_vec(),
        overrides: overrides.to_vec(),
    };
    for arm in 0..plan.arms.len() {
        for point in 0..plan.points.len() {
            plan.cell_config(arm, point, plan.seeds.first().copied().unwrap_or(1))?;
        }
    }
    Ok(plan)
}

fn apply(cfg: &mut ScenarioConfig, pairs: &[(String, String)]) -> Result<(), ExperimentError> {
    for (k, v) in pairs {
        cfg.set(k, v).map_err(|message| ExperimentError::Setting {
            key: k.clone(),
            message,
        })?;
    }
    Ok(())
}

impl Plan {
    /// Resolved and validated config of one cell.
    pub fn cell_config(&self, arm: usize, point: usize, seed: u64) -> Result<ScenarioConfig, ExperimentError> {
        let a = &self.arms[arm];
        let mut cfg = ScenarioConfig::defaults_for(a.paradigm);
        apply(&mut cfg, &self.preset)?;
        apply(&mut cfg, &self.overrides)?;
        apply(&mut cfg, &a.settings)?;
        let sweep: Vec<(String, String)> = self.points[point]
            .values
            .iter()
            .map(|(k, v)| {
                // integer-valued keys reject a trailing ".0"
                let text = if v.fract() == 0.0 && v.abs() < 1e15 { format!("{}", *v as i64) } else { fmt_f(*v) };
                (k.clone(), text)
            })
            .collect();
        apply(&mut cfg, &sweep)?;
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_cells(&self) -> usize {
        self.arms.len() * self.points.len() * self.seeds.len()
    }
}

/// Drift-injection statistics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftStats {
    /// Slots from the shift to the first check with Drift above `eps1`.
    pub detection_delay: Option<u64>,
    /// Slots from the shift to the first rollback.
    pub rollback_delay: Option<u64>,
    pub pre_shift_tsr: f64,
    /// TSR between the shift and the rollback (or `3Δ` without one).
    pub dip_tsr: f64,
    /// TSR over the [`RECOVERY_WINDOW`] slots after the rollback.
    pub recovery_tsr: Option<f64>,
}

impl DriftStats {
    pub fn dip_depth(&self) -> f64 {
        self.pre_shift_tsr - self.dip_tsr
    }

    /// Recovered to within `tol` of the pre-shift TSR.
    pub fn recovered(&self, tol: f64) -> Option<bool> {
        self.recovery_tsr.map(|r| r >= self.pre_shift_tsr - tol)
    }
}

/// TSR over slots in `[a, b)`.
pub fn window_tsr(rows: &[SlotRow], a: u64, b: u64) -> f64 {
    let (mut n, mut s) = (0u64, 0u64);
    for r in rows.iter().filter(|r| r.t >= a && r.t < b) {
        n += r.tasks;
        s += r.successes;
    }
    if n == 0 {
        0.0
    } else {
        s as f64 / n as f64
    }
}

/// Drift statistics for a run whose shift starts at `t0`.
pub fn drift_stats(out: &RunOutput, cfg: &ScenarioConfig, t0: u64) -> DriftStats {
    let detection_delay = out
        .monitor_rows
        .iter()
        .find(|m| m.t >= t0 && m.drift.is_some_and(|d| d > cfg.monitor.eps1))
        .map(|m| m.t - t0);
    let rollback = out.rollbacks.iter().copied().find(|&r| r >= t0);
    let dip_end = rollback.unwrap_or(t0 + 3 * cfg.monitor.window_delta);
    DriftStats {
        detection_delay,
        rollback_delay: rollback.map(|r| r - t0),
        pre_shift_tsr: window_tsr(&out.rows, t0.saturating_sub(PRE_SHIFT_WINDOW), t0),
        dip_tsr: window_tsr(&out.rows, t0, dip_end.max(t0 + 1)),
        recovery_tsr: rollback.map(|r| window_tsr(&out.rows, r + 1, r + 1 + RECOVERY_WINDOW)),
    }
}

/// Outcome of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub arm: usize,
    pub point: usize,
    pub paradigm: String,
    pub sweep_key: String,
    pub sweep_value: String,
    pub sweep_numeric: Vec<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub kpi: KpiRecord,
    pub slots_run: u64,
    pub codec_version_final: u64,
    /// Monitor checks with an action other than `None`.
    pub triggers: u64,
    pub rollbacks: u64,
    pub osc_median: Option<f64>,
    pub osc_max: Option<f64>,
    pub drift: Option<DriftStats>,
    /// Set for scenarios with a latency–energy frontier: whether this
    /// cell's sweep point is on its arm's frontier of seed means.
    pub is_frontier: Option<bool>,
    /// Trace file name relative to the traces directory.
    pub trace_file: Option<String>,
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Summarize a finished run into a [`CellResult`].
pub fn summarize(plan: &Plan, arm: usize, point: usize, cfg: &ScenarioConfig, out: &RunOutput) -> Result<CellResult, ExperimentError> {
    let deadline = cfg.latency_budget_slots as f64;
    let kpi = compute_kpis(&out.rows, deadline, deadline + cfg.phy.undelivered_penalty_slots)?;
    let mut osc: Vec<f64> = out.monitor_rows.iter().filter_map(|m| m.osc).collect();
    let osc_max = osc.iter().cloned().fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))));
    let triggers = out.monitor_rows.iter().filter(|m| m.action != ActionTaken::None).count() as u64;
    let drift = cfg.injection.shift_t0.map(|t0| drift_stats(out, cfg, t0));
    let p = &plan.points[point];
    Ok(CellResult {
        arm,
        point,
        paradigm: plan.arms[arm].label.clone(),
        sweep_key: p.key(),
        sweep_value: p.value(),
        sweep_numeric: p.numeric(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        kpi,
        slots_run: out.summary.slots_run,
        codec_version_final: out.final_codec.version,
        triggers,
        rollbacks: out.rollbacks.len() as u64,
        osc_median: median(&mut osc),
        osc_max,
        drift,
        is_frontier: None,
        trace_file: None,
    })
}

/// Where and whether to write per-cell traces.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceSink {
    None,
    Dir(PathBuf),
}

fn trace_name(plan: &Plan, arm: usize, point: usize, seed: u64) -> String {
    let p = &plan.points[point];
    let sweep = if p.values.is_empty() { "none".to_string() } else { format!("{}={}", p.key(), p.value()) };
    format!("{}__{}__seed{}.jsonl", plan.arms[arm].label, sweep, seed)
}

/// Run one cell.
pub fn run_cell(plan: &Plan, arm: usize, point: usize, seed: u64, world: &World, sink: &TraceSink) -> Result<CellResult, ExperimentError> {
    let cfg = plan.cell_config(arm, point, seed)?;
    match sink {
        TraceSink::None => {
            let out = run(&cfg, world, &mut NoHooks)?;
            summarize(plan, arm, point, &cfg, &out)
        }
        TraceSink::Dir(dir) => {
            let name = trace_name(plan, arm, point, seed);
            let path = dir.join(&name);
            let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            let mut writer = TraceWriter::new(BufWriter::new(file));
            let out = run(&cfg, world, &mut writer as &mut dyn Hooks)?;
            writer.finish().map_err(|e| io_err(&path, e))?;
            let mut res = summarize(plan, arm, point, &cfg, &out)?;
            res.trace_file = Some(name);
            Ok(res)
        }
    }
}

/// Run `f` over `0..n` on `jobs` threads; results keep index order.
fn parallel_map<T: Send, F>(n: usize, jobs: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                slots.lock().expect("result lock")[i] = Some(v);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|v| v.expect("every index ran"))
        .collect()
}

/// Run every cell of `plan` and return results sorted by
/// (paradigm, sweep value, seed), with frontier flags filled in.
pub fn execute(plan: &Plan, jobs: usize, sink: &TraceSink) -> Result<Vec<CellResult>, ExperimentError> {
    if let TraceSink::Dir(dir) = sink {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    // one world per distinct world key, shared across arms (common random numbers)
    let mut keys: BTreeMap<String, (usize, usize, u64)> = BTreeMap::new();
    let mut cells = Vec::with_capacity(plan.n_cells());
    for arm in 0..plan.arms.len() {
        for point in 0..plan.points.len() {
            for &seed in &plan.seeds {
                let cfg = plan.cell_config(arm, point, seed)?;
                let key = World::key(&cfg);
                keys.entry(key.clone()).or_insert((arm, point, seed));
                cells.push((arm, point, seed, key));
            }
        }
    }
    let key_list: Vec<(String, (usize, usize, u64))> = keys.into_iter().collect();
    let worlds = parallel_map(key_list.len(), jobs, |i| {
        let (arm, point, seed) = key_list[i].1;
        let cfg = plan.cell_config(arm, point, seed)?;
        Ok::<_, ExperimentError>(Arc::new(World::build(&cfg)?))
    });
    let mut by_key = BTreeMap::new();
    for ((key, _), w) in key_list.into_iter().zip(worlds) {
        by_key.insert(key, w?);
    }
    let results = parallel_map(cells.len(), jobs, |i| {
        let (arm, point, seed, key) = &cells[i];
        run_cell(plan, *arm, *point, *seed, &by_key[key], sink)
    });
    let mut results: Vec<CellResult> = results.into_iter().collect::<Result<_, _>>()?;
    sort_results(&mut results);
    if plan.scenario == Scenario::Pareto {
        flag_frontiers(&mut results);
    }
    Ok(results)
}

/// Deterministic row order: paradigm label, sweep values, seed.
pub fn sort_results(results: &mut [CellResult]) {
    results.sort_by(|a, b| {
        a.paradigm
            .cmp(&b.paradigm)
            .then_with(|| {
                a.sweep_numeric
                    .iter()
                    .zip(&b.sweep_numeric)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then(a.seed.cmp(&b.seed))
    });
}

/// Seed-mean (latency, energy per success) per (paradigm, sweep value),
/// in row order. Points with no success in any seed are skipped.
pub fn seed_mean_points(results: &[CellResult]) -> Vec<(String, String, (f64, f64))> {
    let mut out: Vec<(String, String, (f64, f64))> = Vec::new();
    let mut groups: Vec<(String, String, Vec<&CellResult>)> = Vec::new();
    for r in results {
        match groups.last_mut() {
            Some((p, v, g)) if *p == r.paradigm && *v == r.sweep_value => g.push(r),
            _ => groups.push((r.paradigm.clone(), r.sweep_value.clone(), vec![r])),
        }
    }
    for (p, v, g) in groups {
        let energies: Vec<f64> = g.iter().filter_map(|r| r.kpi.energy_per_success_j).collect();
        if energies.len() != g.len() {
            continue;
        }
        let n = g.len() as f64;
        let lat = g.iter().map(|r| r.kpi.mean_latency_slots).sum::<f64>() / n;
        let en = energies.iter().sum::<f64>() / n;
        out.push((p, v, (lat, en)));
    }
    out
}

/// Mark rows whose sweep point lies on its paradigm's seed-mean frontier.
pub fn flag_frontiers(results: &mut [CellResult]) {
    let means = seed_mean_points(results);
    let mut on: BTreeMap<(String, String), bool> = BTreeMap::new();
    let mut paradigms: Vec<String> = means.iter().map(|m| m.0.clone()).collect();
    paradigms.dedup();
    for p in paradigms {
        let pts: Vec<&(String, String, (f64, f64))> = means.iter().filter(|m| m.0 == p).collect();
        let coords: Vec<(f64, f64)> = pts.iter().map(|m| m.2).collect();
        let front = pareto_indices(&coords);
        for (i, m) in pts.iter().enumerate() {
            on.insert((m.0.clone(), m.1.clone()), front.contains(&i));
        }
    }
    for r in results.iter_mut() {
        r.is_frontier = Some(on.get(&(r.paradigm.clone(), r.sweep_value.clone())).copied().unwrap_or(false));
    }
}

/// Shortest round-trip decimal form.
pub fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV columns, in order.
pub const CSV_COLUMNS: [&str; 29] = [
    "scenario",
    "paradigm",
    "sweep_key",
    "sweep_value",
    "seed",
    "tasks",
    "successes",
    "tsr",
    "sbe",
    "mean_latency_slots",
    "p95_latency_slots",
    "energy_per_success_j",
    "reward_mean",
    "reward_var_final_third",
    "reward_slope",
    "oscillation_count",
    "slots_to_stabilize",
    "slots_run",
    "codec_version_final",
    "triggers",
    "rollbacks",
    "osc_median",
    "osc_max",
    "detection_delay",
    "rollback_delay",
    "pre_shift_tsr",
    "dip_depth",
    "recovery_tsr",
    "is_frontier",
];

fn csv_record(scenario: Scenario, r: &CellResult) -> Vec<String> {
    let k = &r.kpi;
    let d = r.drift.as_ref();
    vec![
        scenario.to_string(),
        r.paradigm.clone(),
        r.sweep_key.clone(),
        r.sweep_value.clone(),
        r.seed.to_string(),
        k.tasks.to_string(),
        k.successes.to_string(),
        fmt_f(k.tsr),
        fmt_f(k.sbe),
        fmt_f(k.mean_latency_slots),
        fmt_f(k.p95_latency_slots),
        opt(k.energy_per_success_j.map(fmt_f)),
        fmt_f(k.reward_mean),
        fmt_f(k.reward_var_final_third),
        fmt_f(k.reward_slope),
        k.oscillation_count.to_string(),
        opt(k.slots_to_stabilize),
        r.slots_run.to_string(),
        r.codec_version_final.to_string(),
        r.triggers.to_string(),
        r.rollbacks.to_string(),
        opt(r.osc_median.map(fmt_f)),
        opt(r.osc_max.map(fmt_f)),
        opt(d.and_then(|d| d.detection_delay)),
        opt(d.and_then(|d| d.rollback_delay)),
        opt(d.map(|d| fmt_f(d.pre_shift_tsr))),
        opt(d.map(|d| fmt_f(d.dip_depth()))),
        opt(d.and_then(|d| d.recovery_tsr).map(fmt_f)),
        opt(r.is_frontier),
    ]
}

/// `#`-prefixed header: schema, build tag, scenario, seeds, sweep, and the
/// resolved config of each arm at its first sweep point.
pub fn csv_header(plan: &Plan) -> Result<String, ExperimentError> {
    let mut h = String::new();
    h.push_str(&format!("# schema_version = {CSV_SCHEMA_VERSION}\n"));
    h.push_str(&format!("# build = {}\n", crate::BUILD_TAG));
    h.push_str(&format!("# scenario = {}\n", plan.scenario));
    let seeds: Vec<String> = plan.seeds.iter().map(|s| s.to_string()).collect();
    h.push_str(&format!("# seeds = {}\n", seeds.join(",")));
    if let Some(first) = plan.points.first() {
        if !first.values.is_empty() {
            let vals: Vec<String> = plan.points.iter().map(|p| p.value()).collect();
            h.push_str(&format!("# sweep {} = {}\n", first.key(), vals.join(",")));
        }
    }
    for (i, arm) in plan.arms.iter().enumerate() {
        let cfg = plan.cell_config(i, 0, plan.seeds.first().copied().unwrap_or(1))?;
        h.push_str(&format!("# [arm {}] config_hash = {}\n", arm.label, cfg.hash()));
        h.push_str(&cfg.header_block());
    }
    Ok(h)
}

/// Write the scenario CSV to `w`.
pub fn write_csv<W: Write>(plan: &Plan, results: &[CellResult], mut w: W) -> Result<(), ExperimentError> {
    let header = csv_header(plan)?;
    w.write_all(header.as_bytes()).map_err(|e| io_err(Path::new("<csv>"), e))?;
    let mut cw = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    cw.write_record(CSV_COLUMNS)?;
    for r in results {
        cw.write_record(csv_record(plan.scenario, r))?;
    }
    cw.flush().map_err(|e| io_err(Path::new("<csv>"), e))?;
    Ok(())
}

/// Read back a scenario CSV: header lines and data rows keyed by column.
pub fn read_csv(text: &str) -> Result<(Vec<String>, Vec<BTreeMap<String, String>>), ExperimentError> {
    let header: Vec<String> = text.lines().take_while(|l| l.starts_with('#')).map(str::to_string).collect();
    let body: String = text.lines().skip(header.len()).map(|l| format!("{l}\n")).collect();
    let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let cols: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(cols.iter().cloned().zip(rec.iter().map(str::to_string)).collect());
    }
    Ok((header, rows))
}

fn sha256_file(path: &Path) -> Result<String, ExperimentError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Manifest entry for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCell {
    pub paradigm: String,
    pub sweep_key: String,
    pub sweep_value: String,
    pub seed: u64,
    pub config_hash: String,
    pub trace: Option<String>,
    pub trace_sha256: Option<String>,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub csv_schema_version: u32,
    pub trace_schema_version: u32,
    pub build: String,
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub csv: String,
    pub csv_sha256: String,
    pub traces_dir: Option<String>,
    pub cells: Vec<ManifestCell>,
}

/// Paths produced by [`run_scenario`].
#[derive(Debug, Clone)]
pub struct ScenarioOutput {
    pub csv: PathBuf,
    pub traces: Option<PathBuf>,
    pub manifest: PathBuf,
    pub results: Vec<CellResult>,
}

/// Run `plan` and write `<scenario>.csv`, `<scenario>.traces/` (when
/// `traces`) and `manifest.json` under `out_dir`.
pub fn run_scenario(plan: &Plan, out_dir: &Path, jobs: usize, traces: bool) -> Result<ScenarioOutput, ExperimentError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let name = plan.scenario.as_str();
    let trace_dir = out_dir.join(format!("{name}.traces"));
    let sink = if traces { TraceSink::Dir(trace_dir.clone()) } else { TraceSink::None };
    let results = execute(plan, jobs, &sink)?;
    let csv_path = out_dir.join(format!("{name}.csv"));
    let file = fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    let mut bw = BufWriter::new(file);
    write_csv(plan, &results, &mut bw)?;
    bw.flush().map_err(|e| io_err(&csv_path, e))?;
    drop(bw);
    let mut cells = Vec::with_capacity(results.len());
    for r in &results {
        let trace_sha256 = match &r.trace_file {
            Some(f) => Some(sha256_file(&trace_dir.join(f))?),
            None => None,
        };
        cells.push(ManifestCell {
            paradigm: r.paradigm.clone(),
            sweep_key: r.sweep_key.clone(),
            sweep_value: r.sweep_value.clone(),
            seed: r.seed,
            config_hash: r.config_hash.clone(),
            trace: r.trace_file.clone(),
            trace_sha256,
        });
    }
    let manifest = Manifest {
        csv_schema_version: CSV_SCHEMA_VERSION,
        trace_schema_version: TRACE_SCHEMA_VERSION,
        build: crate::BUILD_TAG.to_string(),
        scenario: name.to_string(),
        seeds: plan.seeds.clone(),
        csv: format!("{name}.csv"),
        csv_sha256: sha256_file(&csv_path)?,
        traces_dir: traces.then(|| format!("{name}.traces")),
        cells,
    };
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, format!("{text}\n")).map_err(|e| io_err(&manifest_path, e))?;
    Ok(ScenarioOutput {
        csv: csv_path,
        traces: traces.then_some(trace_dir),
        manifest: manifest_path,
        results,
    })
}

/// Parse a `key = value` override file. Keys are checked against the
/// config schema by [`plan`].
pub fn parse_overrides(text: &str) -> Result<Vec<(String, String)>, ExperimentError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Parse {
                line: idx + 1,
                message: format!("expected 'key = value', got '{line}'"),
            }
            .into());
        };
        let k = k.trim().to_string();
        if out.iter().any(|(x, _)| *x == k) {
            return Err(ConfigError::Parse {
                line: idx + 1,
                message: format!("duplicate key '{k}'"),
            }
            .into());
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(scenario: Scenario) -> Plan {
        plan(scenario, &[1, 2], &[("horizon_slots".into(), "300".into())]).unwrap()
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.as_str().parse::<Scenario>().unwrap(), s);
        }
        assert!("fig3".parse::<Scenario>().is_err());
    }

    #[test]
    fn every_preset_validates() {
        for s in Scenario::ALL {
            let p = plan(s, &[1], &[]).unwrap();
            assert!(p.n_cells() > 0);
        }
    }

    #[test]
    fn overrides_apply_before_sweep_values() {
        let p = plan(Scenario::TsrVsSnr, &[3], &[("snr_db".into(), "99".into())]).unwrap();
        let cfg = p.cell_config(0, 0, 3).unwrap();
        assert_eq!(cfg.snr_db, -5.0);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn reserved_and_unknown_keys_are_rejected() {
        let e = plan(Scenario::Bandwidth, &[1], &[("seed".into(), "4".into())]).unwrap_err();
        assert!(e.is_validation());
        let e = plan(Scenario::Bandwidth, &[1], &[("bogus".into(), "4".into())]).unwrap_err();
        assert!(e.is_validation());
        let e = plan(Scenario::Bandwidth, &[1], &[("n_agents".into(), "0".into())]).unwrap_err();
        assert!(e.is_validation());
    }

    #[test]
    fn learning_arms_match_the_coupling_study() {
        let p = plan(Scenario::Learning, &[1], &[]).unwrap();
        let sem = p.arms.iter().position(|a| a.paradigm == Paradigm::SemComOnly).unwrap();
        let tt = p.arms.iter().position(|a| a.paradigm == Paradigm::TwoTimescale).unwrap();
        let c = p.cell_config(sem, 0, 1).unwrap();
        assert_eq!((c.schedule.c_ratio, c.schedule.k_period), (1.0, 1));
        let c = p.cell_config(tt, 0, 1).unwrap();
        assert_eq!((c.schedule.c_ratio, c.schedule.k_period), (0.1, 50));
        assert_eq!(c.horizon_slots, 50_000);
    }

    #[test]
    fn c_sweep_varies_only_the_step_ratio() {
        let p = plan(Scenario::CSweep, &[1], &[]).unwrap();
        let cs: Vec<(f64, u64)> = (0..p.points.len())
            .map(|i| {
                let c = p.cell_config(0, i, 1).unwrap();
                (c.schedule.c_ratio, c.schedule.k_period)
            })
            .collect();
        assert_eq!(cs, vec![(1.0, 1), (0.3, 1), (0.1, 1), (0.03, 1)]);
    }

    #[test]
    fn results_are_sorted_and_independent_of_jobs() {
        let p = tiny(Scenario::Bandwidth);
        let a = execute(&p, 1, &TraceSink::None).unwrap();
        let b = execute(&p, 3, &TraceSink::None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), p.n_cells());
        let labels: Vec<&str> = a.iter().map(|r| r.paradigm.as_str()).collect();
        let mut sorted = labels.clone();
        sorted.sort();
        assert_eq!(labels, sorted);
        assert_eq!(a[0].sweep_value, "5.0");
        assert_eq!((a[0].seed, a[1].seed), (1, 2));
    }

    #[test]
    fn csv_round_trips_through_reader() {
        let p = tiny(Scenario::TsrVsSnr);
        let res = execute(&p, 1, &TraceSink::None).unwrap();
        let mut buf = Vec::new();
        write_csv(&p, &res, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let (header, rows) = read_csv(&text).unwrap();
        assert!(header[0].contains("schema_version = 1"));
        assert!(header.iter().any(|l| l.starts_with("# build = ")));
        assert!(header.iter().any(|l| l == "# paradigm = TwoTimescale"));
        assert_eq!(rows.len(), res.len());
        assert_eq!(rows[0]["tsr"].parse::<f64>().unwrap(), res[0].kpi.tsr);
    }

    #[test]
    fn frontier_flags_follow_seed_means() {
        let p = tiny(Scenario::Pareto);
        let res = execute(&p, 1, &TraceSink::None).unwrap();
        assert!(res.iter().all(|r| r.is_frontier.is_some()));
        for para in ["TrRan", "TwoTimescale"] {
            assert!(res.iter().any(|r| r.paradigm == para && r.is_frontier == Some(true)));
        }
    }

    #[test]
    fn overrides_file_parses() {
        let o = parse_overrides("# c\nsnr_db = 5 # trailing\n\nn_agents=3\n").unwrap();
        assert_eq!(o, vec![("snr_db".into(), "5".into()), ("n_agents".into(), "3".into())]);
        assert!(parse_overrides("a = 1\na = 2\n").is_err());
        assert!(parse_overrides("novalue\n").is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }
}
