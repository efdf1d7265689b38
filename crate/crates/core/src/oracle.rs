//! Standalone oracles: central-difference gradient checks for the codec
//! and the actor, brute-force Pareto and Nash checks, and a KPI
//! recomputation that reads JSON-lines traces without the trace types.

use serde::{Deserialize, Serialize};

use crate::codec::{loss_and_gradient, surrogate_loss, CodecParams, ReferenceEmbedder, SlowItem, TaskModel};
use crate::config::{CodecConfig, Paradigm, ScenarioConfig};
use crate::engine::{run, TraceWriter, World};
use crate::control::{actor_gradient, actor_surrogate, Actor, Transition};
use crate::kpi::{compute_kpis, pareto_brute_force, pareto_frontier};
use crate::linalg::norm;
use crate::rng::SimRng;
use crate::testbed::{play_matrix_game, GameSettings, MatrixGame};

/// Stream ids used only by the oracles.
pub mod streams {
    pub const GRADCHECK: u64 = 20_000;
    pub const PARETO: u64 = 21_000;
}

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&d) / scale
    }
}

fn codec_slot(p: &mut CodecParams, k: usize) -> &mut f64 {
    let (a, b, c) = (p.theta.len(), p.theta_bias.len(), p.phi.len());
    if k < a {
        &mut p.theta[k]
    } else if k < a + b {
        &mut p.theta_bias[k - a]
    } else if k < a + b + c {
        &mut p.phi[k - a - b]
    } else {
        &mut p.phi_bias[k - a - b - c]
    }
}

/// Relative error between the analytic codec gradient and central
/// differences of the surrogate loss on one random small instance.
pub fn codec_gradcheck(seed: u64) -> f64 {
    let mut rng = SimRng::new(seed, streams::GRADCHECK);
    let cfg = CodecConfig {
        input_dim: 6,
        embed_dim: 4,
        reference_dim: 3,
        n_classes: 3,
        ..CodecConfig::default()
    };
    let proj = ReferenceEmbedder::random_projection(cfg.reference_dim, cfg.input_dim, &mut rng);
    let (task, reference) = TaskModel::generate(&cfg, proj, &mut rng).expect("valid small task");
    let params = CodecParams::init(cfg.input_dim, cfg.embed_dim, &mut rng);
    let items: Vec<SlowItem> = (0..5)
        .map(|i| SlowItem {
            x: task.sample(&mut rng, i).x,
            noise: (0..cfg.embed_dim).map(|_| 0.2 * rng.normal()).collect(),
            active_dims: 1 + rng.below(cfg.embed_dim),
        })
        .collect();
    let (_, g) = loss_and_gradient(&params, &items, &reference).expect("gradient");
    let analytic: Vec<f64> = g.theta.iter().chain(&g.theta_bias).chain(&g.phi).chain(&g.phi_bias).copied().collect();
    let mut p = params.clone();
    let numeric: Vec<f64> = (0..analytic.len())
        .map(|k| {
            let orig = *codec_slot(&mut p, k);
            *codec_slot(&mut p, k) = orig + FD_STEP;
            let lp = surrogate_loss(&p, &items, &reference).expect("loss");
            *codec_slot(&mut p, k) = orig - FD_STEP;
            let lm = surrogate_loss(&p, &items, &reference).expect("loss");
            *codec_slot(&mut p, k) = orig;
            (lp - lm) / (2.0 * FD_STEP)
        })
        .collect();
    rel_err(&analytic, &numeric)
}

/// Relative error between the analytic actor gradient and central
/// differences of the clipped surrogate on one random small instance.
/// Behaviour log-probabilities keep every ratio inside the clip band.
pub fn actor_gradcheck(seed: u64) -> f64 {
    let mut rng = SimRng::new(seed, streams::GRADCHECK + 1);
    let (na, nf, clip, entropy_weight) = (6, 4, 0.2, 0.05);
    let mut actor = Actor::zeros(na, nf, 0.01);
    actor.weights.iter_mut().for_each(|w| *w = 0.5 * rng.normal());
    let batch: Vec<Transition> = (0..8)
        .map(|_| {
            let features: Vec<f64> = (0..nf).map(|_| rng.normal()).collect();
            let action = rng.below(na);
            let logprob = actor.probs(&features)[action].ln() + 0.1 * (2.0 * rng.uniform() - 1.0);
            Transition {
                features,
                action,
                logprob,
                reward: 0.0,
                summary: Vec::new(),
            }
        })
        .collect();
    let adv: Vec<f64> = (0..batch.len()).map(|_| rng.normal()).collect();
    let analytic = actor_gradient(&actor, &batch, &adv, entropy_weight, clip);
    let mut a = actor.clone();
    let numeric: Vec<f64> = (0..analytic.len())
        .map(|k| {
            let orig = a.weights[k];
            a.weights[k] = orig + FD_STEP;
            let fp = actor_surrogate(&a, &batch, &adv, entropy_weight, clip);
            a.weights[k] = orig - FD_STEP;
            let fm = actor_surrogate(&a, &batch, &adv, entropy_weight, clip);
            a.weights[k] = orig;
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect();
    rel_err(&analytic, &numeric)
}

/// Worst relative errors over `instances` codec and actor checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub codec_worst: f64,
    pub actor_worst: f64,
}

pub fn gradcheck(instances: usize) -> GradCheckReport {
    let worst = |f: fn(u64) -> f64| (1..=instances as u64).map(f).fold(0.0, f64::max);
    GradCheckReport {
        instances,
        codec_worst: worst(codec_gradcheck),
        actor_worst: worst(actor_gradcheck),
    }
}

/// Number of random point sets on which the frontier differs from the
/// brute-force dominance filter.
pub fn pareto_mismatches(sets: usize, points: usize, seed: u64) -> usize {
    let mut rng = SimRng::new(seed, streams::PARETO);
    (0..sets)
        .filter(|_| {
            // coarse grid so ties and duplicates occur
            let pts: Vec<(f64, f64)> = (0..points)
                .map(|_| ((rng.below(50) as f64) / 10.0, (rng.below(50) as f64) / 10.0))
                .collect();
            pareto_frontier(&pts) != pareto_brute_force(&pts)
        })
        .count()
}

/// Per-seed outcome of the matrix-game oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashReport {
    pub equilibrium: (usize, usize),
    pub payoff: (f64, f64),
    /// Seeds whose greedy joint action is the equilibrium and whose tail
    /// payoff is within `tol` of it for both players.
    pub passed: usize,
    pub seeds: usize,
}

pub fn nash_check(seeds: usize, tol: f64) -> NashReport {
    let game = MatrixGame::reference();
    let eq = game.pure_nash();
    assert_eq!(eq.len(), 1, "reference game must have a unique pure equilibrium");
    let (a, b) = eq[0];
    let payoff = game.payoff[a][b];
    let settings = GameSettings::default();
    let passed = (1..=seeds as u64)
        .filter(|&s| {
            let o = play_matrix_game(&game, s, &settings);
            o.greedy == (a, b) && (o.tail_payoff.0 - payoff.0).abs() <= tol && (o.tail_payoff.1 - payoff.1).abs() <= tol
        })
        .count();
    NashReport {
        equilibrium: (a, b),
        payoff,
        passed,
        seeds,
    }
}

/// KPIs recomputed from trace text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceKpis {
    pub tasks: u64,
    pub successes: u64,
    pub tsr: f64,
    pub sbe: f64,
    pub mean_latency_slots: f64,
    pub p95_latency_slots: f64,
    pub energy_per_success_j: Option<f64>,
    pub reward_mean: f64,
    pub reward_var_final_third: f64,
    pub reward_slope: f64,
}

/// Recompute KPIs from JSON-lines trace text, reading fields by name.
/// Slot rows must appear in slot order.
pub fn kpis_from_jsonl(text: &str, deadline: f64, overflow_latency: f64) -> Result<TraceKpis, String> {
    let (mut tasks, mut successes, mut grants, mut slots) = (0u64, 0u64, 0u64, 0u64);
    let (mut latency, mut energy) = (0.0, 0.0);
    let mut hist: Vec<u64> = Vec::new();
    let mut rewards: Vec<f64> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        if v["kind"] != "slot" {
            continue;
        }
        let u = |k: &str| v[k].as_u64().ok_or_else(|| format!("line {}: missing {k}", i + 1));
        let f = |k: &str| v[k].as_f64().ok_or_else(|| format!("line {}: missing {k}", i + 1));
        tasks += u("tasks")?;
        successes += u("successes")?;
        latency += f("latency_sum")?;
        energy += f("energy")?;
        slots += 1;
        let arr = |k: &str| v[k].as_array().cloned().ok_or_else(|| format!("line {}: missing {k}", i + 1));
        for g in arr("grants")? {
            grants += g.as_u64().ok_or("bad grant")?;
        }
        let h = arr("lat_hist")?;
        if hist.is_empty() {
            hist = vec![0; h.len()];
        }
        for (acc, x) in hist.iter_mut().zip(&h) {
            *acc += x.as_u64().ok_or("bad histogram entry")?;
        }
        let r = arr("rewards")?;
        let vals: Vec<f64> = r.iter().map(|x| x.as_f64().ok_or("bad reward")).collect::<Result<_, _>>()?;
        rewards.push(if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 });
    }
    if slots == 0 {
        return Err("no slot rows".into());
    }
    let tsr = if tasks > 0 { successes as f64 / tasks as f64 } else { 0.0 };
    let mean_bw = grants as f64 / slots as f64;
    // p95 as the upper edge of the bin where the cumulative count first
    // reaches ceil(0.95 n); the last bin is the overflow bin
    let total: u64 = hist.iter().sum();
    let p95 = if total == 0 {
        0.0
    } else {
        let need = ((0.95 * total as f64).ceil() as u64).max(1);
        let mut seen = 0;
        let mut bin = hist.len() - 1;
        for (b, c) in hist.iter().enumerate() {
            seen += c;
            if seen >= need {
                bin = b;
                break;
            }
        }
        if bin == hist.len() - 1 {
            overflow_latency
        } else {
            (bin + 1) as f64 * deadline / (hist.len() - 1) as f64
        }
    };
    let n = rewards.len();
    let tail = &rewards[n - n / 3..];
    // Welford on the tail
    let (mut m, mut s2) = (0.0, 0.0);
    for (k, x) in tail.iter().enumerate() {
        let d = x - m;
        m += d / (k + 1) as f64;
        s2 += d * (x - m);
    }
    let var = if tail.is_empty() { 0.0 } else { s2 / tail.len() as f64 };
    // slope from raw sums over the slot index
    let nf = n as f64;
    let (sx, sxx) = (nf * (nf - 1.0) / 2.0, (nf - 1.0) * nf * (2.0 * nf - 1.0) / 6.0);
    let sy: f64 = rewards.iter().sum();
    let sxy: f64 = rewards.iter().enumerate().map(|(i, y)| i as f64 * y).sum();
    let den = nf * sxx - sx * sx;
    let slope = if n < 2 { 0.0 } else { (nf * sxy - sx * sy) / den };
    Ok(TraceKpis {
        tasks,
        successes,
        tsr,
        sbe: if mean_bw > 0.0 { tsr / mean_bw } else { 0.0 },
        mean_latency_slots: if tasks > 0 { latency / tasks as f64 } else { 0.0 },
        p95_latency_slots: p95,
        energy_per_success_j: (successes > 0).then(|| energy / successes as f64),
        reward_mean: sy / nf,
        reward_var_final_third: var,
        reward_slope: slope,
    })
}

/// Largest scaled difference `|a − b| / max(1, |a|)` between the KPIs of
/// a run and their recomputation from its JSON-lines trace.
pub fn kpi_trace_mismatch(paradigm: Paradigm, horizon: u64, seed: u64) -> Result<f64, String> {
    let mut cfg = ScenarioConfig::defaults_for(paradigm);
    cfg.horizon_slots = horizon;
    cfg.seed = seed;
    let world = World::build(&cfg).map_err(|e| e.to_string())?;
    let mut writer = TraceWriter::new(Vec::new());
    let out = run(&cfg, &world, &mut writer).map_err(|e| e.to_string())?;
    let text = String::from_utf8(writer.finish().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let deadline = cfg.latency_budget_slots as f64;
    let overflow = deadline + cfg.phy.undelivered_penalty_slots;
    let a = compute_kpis(&out.rows, deadline, overflow).map_err(|e| e.to_string())?;
    let b = kpis_from_jsonl(&text, deadline, overflow)?;
    if (a.tasks, a.successes) != (b.tasks, b.successes) || a.energy_per_success_j.is_some() != b.energy_per_success_j.is_some() {
        return Ok(f64::INFINITY);
    }
    let pairs = [
        (a.tsr, b.tsr),
        (a.sbe, b.sbe),
        (a.mean_latency_slots, b.mean_latency_slots),
        (a.p95_latency_slots, b.p95_latency_slots),
        (a.energy_per_success_j.unwrap_or(0.0), b.energy_per_success_j.unwrap_or(0.0)),
        (a.reward_mean, b.reward_mean),
        (a.reward_var_final_third, b.reward_var_final_third),
        (a.reward_slope, b.reward_slope),
    ];
    Ok(pairs.iter().map(|(x, y)| (x - y).abs() / x.abs().max(1.0)).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_cases() {
        assert_eq!(rel_err(&[0.0], &[0.0]), 0.0);
        assert!((rel_err(&[1.0, 0.0], &[1.0, 1e-3]) - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_central_differences() {
        let r = gradcheck(5);
        assert!(r.codec_worst < 1e-4 && r.actor_worst < 1e-4, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let g = vec![1.0, 2.0, 3.0];
        let mut h = g.clone();
        h[1] *= 1.001;
        assert!(rel_err(&g, &h) > 1e-4);
    }

    #[test]
    fn pareto_oracle_agrees() {
        assert_eq!(pareto_mismatches(50, 60, 1), 0);
    }

    #[test]
    fn trace_kpis_match_in_memory_kpis() {
        assert!(kpi_trace_mismatch(Paradigm::TwoTimescale, 600, 2).unwrap() <= 1e-12);
    }

    #[test]
    fn jsonl_kpis_reject_garbage() {
        assert!(kpis_from_jsonl("{not json}\n", 5.0, 6.0).is_err());
        assert!(kpis_from_jsonl("", 5.0, 6.0).is_err());
    }
}
