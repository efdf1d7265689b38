//! Task-level KPIs, learning-stability statistics and Pareto extraction.
//!
//! Every KPI is computed from per-slot trace fields, so a reader of the
//! JSON-lines trace can recompute them independently.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{SlotRow, LAT_HIST_BINS};

/// Moving-average window of the stabilization rule, slots.
pub const STABILIZE_WINDOW: usize = 500;
/// Relative band of the stabilization rule.
pub const STABILIZE_BAND: f64 = 0.02;
/// Smoothing window of the oscillation counter, slots.
pub const OSC_SMOOTH_WINDOW: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum KpiError {
    #[error("trace has no slots")]
    EmptyTrace,
}

/// Task-level KPIs of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiRecord {
    pub tasks: u64,
    pub successes: u64,
    /// `successes / tasks`, 0 when no task resolved.
    pub tsr: f64,
    /// `tsr` per mean allocated bandwidth unit per slot.
    pub sbe: f64,
    pub mean_latency_slots: f64,
    /// Upper edge of the latency-histogram bin holding the 95th
    /// percentile; the overflow bin reports `deadline + penalty`.
    pub p95_latency_slots: f64,
    /// Joules per successful task; `None` when nothing succeeded.
    pub energy_per_success_j: Option<f64>,
    pub reward_mean: f64,
    pub reward_var_final_third: f64,
    pub reward_slope: f64,
    pub oscillation_count: u64,
    /// First slot after which the moving-average reward stays in band.
    pub slots_to_stabilize: Option<u64>,
}

/// Compute [`KpiRecord`] from a slot trace. `deadline` and
/// `overflow_latency` resolve the histogram edges.
pub fn compute_kpis(rows: &[SlotRow], deadline: f64, overflow_latency: f64) -> Result<KpiRecord, KpiError> {
    if rows.is_empty() {
        return Err(KpiError::EmptyTrace);
    }
    let mut tasks = 0u64;
    let mut successes = 0u64;
    let mut latency = 0.0;
    let mut granted = 0u64;
    let mut energy = 0.0;
    let mut hist = [0u64; LAT_HIST_BINS];
    for r in rows {
        tasks += r.tasks;
        successes += r.successes;
        latency += r.latency_sum;
        granted += r.granted_units();
        energy += r.energy;
        for (h, v) in hist.iter_mut().zip(&r.lat_hist) {
            *h += v;
        }
    }
    let tsr = if tasks > 0 { successes as f64 / tasks as f64 } else { 0.0 };
    let mean_bw = granted as f64 / rows.len() as f64;
    let sbe = if mean_bw > 0.0 { tsr / mean_bw } else { 0.0 };
    let mean_latency = if tasks > 0 { latency / tasks as f64 } else { 0.0 };
    let p95 = histogram_quantile(&hist, 0.95, deadline, overflow_latency);
    let energy_per_success = (successes > 0).then(|| energy / successes as f64);
    let mut sorted: Vec<&SlotRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.t);
    let rewards: Vec<f64> = sorted.iter().map(|r| r.reward_mean()).collect();
    let stats = stability_stats(&rewards);
    Ok(KpiRecord {
        tasks,
        successes,
        tsr,
        sbe,
        mean_latency_slots: mean_latency,
        p95_latency_slots: p95,
        energy_per_success_j: energy_per_success,
        reward_mean: rewards.iter().sum::<f64>() / rewards.len() as f64,
        reward_var_final_third: stats.variance_final_third,
        reward_slope: stats.lsq_slope,
        oscillation_count: stats.oscillation_count,
        slots_to_stabilize: slots_to_stabilize(&rewards).map(|k| sorted[k].t),
    })
}

/// Quantile `q` of the latency histogram, as a bin upper edge.
pub fn histogram_quantile(hist: &[u64], q: f64, deadline: f64, overflow_latency: f64) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let target = (q * total as f64).ceil().max(1.0) as u64;
    let mut cum = 0;
    for (b, &h) in hist.iter().enumerate() {
        cum += h;
        if cum >= target {
            return if b + 1 == hist.len() {
                overflow_latency
            } else {
                (b + 1) as f64 * deadline / (hist.len() - 1) as f64
            };
        }
    }
    overflow_latency
}

/// Learning-stability statistics of a reward trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityStats {
    pub variance_final_third: f64,
    pub lsq_slope: f64,
    pub oscillation_count: u64,
}

/// Population variance of the final third, least-squares slope per slot
/// over the whole trace, and sign changes of the derivative of the
/// trailing 100-slot moving average.
pub fn stability_stats(trace: &[f64]) -> StabilityStats {
    let n = trace.len();
    if n < 2 {
        return StabilityStats {
            variance_final_third: 0.0,
            lsq_slope: 0.0,
            oscillation_count: 0,
        };
    }
    let tail = &trace[n - n / 3..];
    let variance = if tail.is_empty() {
        0.0
    } else {
        // shifted by the first value so constant runs give exactly zero
        let k = tail[0];
        let mean = tail.iter().map(|v| v - k).sum::<f64>() / tail.len() as f64;
        tail.iter().map(|v| (v - k - mean) * (v - k - mean)).sum::<f64>() / tail.len() as f64
    };
    let nf = n as f64;
    let xm = (nf - 1.0) / 2.0;
    let ym = trace.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in trace.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (y - ym);
        sxx += dx * dx;
    }
    StabilityStats {
        variance_final_third: variance,
        lsq_slope: sxy / sxx,
        oscillation_count: oscillation_count(trace, OSC_SMOOTH_WINDOW),
    }
}

/// Trailing moving averages; element `k` averages `trace[k+1-w..=k]`.
pub fn moving_average(trace: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || trace.len() < w {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(trace.len() - w + 1);
    let mut s: f64 = trace[..w].iter().sum();
    out.push(s / w as f64);
    for k in w..trace.len() {
        s += trace[k] - trace[k - w];
        out.push(s / w as f64);
    }
    out
}

/// Sign changes of the first difference of the `w`-slot moving average;
/// zero differences carry no sign.
pub fn oscillation_count(trace: &[f64], w: usize) -> u64 {
    let ma = moving_average(trace, w);
    let mut count = 0;
    let mut last = 0.0f64;
    let tol = 1e-12 * (1.0 + ma.iter().fold(0.0, |m: f64, x| m.max(x.abs())));
    for d in ma.windows(2).map(|p| p[1] - p[0]) {
        if d.abs() <= tol {
            continue;
        }
        if last != 0.0 && d.signum() != last.signum() {
            count += 1;
        }
        last = d;
    }
    count
}

/// Index of the first slot after which the trailing 500-slot moving
/// average stays within ±2% of its final value, or `None` when the
/// trace is shorter than the window.
pub fn slots_to_stabilize(trace: &[f64]) -> Option<usize> {
    let ma = moving_average(trace, STABILIZE_WINDOW);
    let last = *ma.last()?;
    let band = STABILIZE_BAND * last.abs();
    let mut first = ma.len() - 1;
    for k in (0..ma.len()).rev() {
        if (ma[k] - last).abs() <= band {
            first = k;
        } else {
            break;
        }
    }
    Some(first + STABILIZE_WINDOW - 1)
}

/// `p` dominates `q`: no worse in both coordinates, better in one.
pub fn dominates(p: (f64, f64), q: (f64, f64)) -> bool {
    p.0 <= q.0 && p.1 <= q.1 && (p.0 < q.0 || p.1 < q.1)
}

/// Indices of non-dominated points (lower is better), in input order.
pub fn pareto_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[a].1.total_cmp(&points[b].1))
    });
    let mut keep = vec![false; points.len()];
    let mut best_prev = f64::INFINITY;
    let mut k = 0;
    while k < order.len() {
        let lat = points[order[k]].0;
        let mut end = k;
        while end < order.len() && points[order[end]].0 == lat {
            end += 1;
        }
        let group_min = points[order[k]].1;
        if group_min < best_prev {
            for &i in &order[k..end] {
                if points[i].1 == group_min {
                    keep[i] = true;
                }
            }
            best_prev = group_min;
        }
        k = end;
    }
    (0..points.len()).filter(|&i| keep[i]).collect()
}

/// Non-dominated points, in input order.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    pareto_indices(points).into_iter().map(|i| points[i]).collect()
}

/// Quadratic-time dominance filter.
pub fn pareto_brute_force(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    points
        .iter()
        .filter(|&&q| !points.iter().any(|&p| dominates(p, q)))
        .copied()
        .collect()
}

/// Every point of `b` is matched or beaten in both coordinates by some
/// point of `a`.
pub fn weakly_dominates(a: &[(f64, f64)], b: &[(f64, f64)]) -> bool {
    b.iter().all(|q| a.iter().any(|p| p.0 <= q.0 && p.1 <= q.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(t: u64, tasks: u64, successes: u64, grant: u32, reward: f64) -> SlotRow {
        let mut lat_hist = vec![0; LAT_HIST_BINS];
        lat_hist[1] = tasks;
        SlotRow {
            t,
            actions: vec![0],
            rewards: vec![reward],
            grants: vec![grant],
            util: 0.0,
            dist: 0.0,
            epen: 0.0,
            lpen: 0.0,
            j: 0.0,
            tasks,
            successes,
            latency_sum: tasks as f64 * 0.7,
            lat_hist,
            energy: 1e-3,
            d_sem: None,
            tsr_window: None,
            gradnorm: None,
            codec_version: 1,
            k: 1,
            c: 1.0,
            overflow: false,
        }
    }

    #[test]
    fn tsr_and_sbe_examples() {
        let rows = vec![row(0, 10, 8, 10, 0.0)];
        let k = compute_kpis(&rows, 5.0, 10.0).unwrap();
        assert_eq!(k.tsr, 0.8);
        assert!((k.sbe - 0.08).abs() < 1e-15);
        assert_eq!(k.p95_latency_slots, 1.0);
    }

    #[test]
    fn empty_trace_errors() {
        assert_eq!(compute_kpis(&[], 5.0, 10.0), Err(KpiError::EmptyTrace));
    }

    #[test]
    fn zero_successes_flag_energy() {
        let k = compute_kpis(&[row(0, 3, 0, 1, 0.0)], 5.0, 10.0).unwrap();
        assert_eq!(k.energy_per_success_j, None);
    }

    #[test]
    fn pareto_example() {
        let pts = [(1.0, 3.0), (2.0, 2.0), (3.0, 1.0), (2.0, 3.0)];
        assert_eq!(pareto_frontier(&pts), vec![(1.0, 3.0), (2.0, 2.0), (3.0, 1.0)]);
        assert_eq!(pareto_frontier(&[(4.0, 4.0)]), vec![(4.0, 4.0)]);
    }

    #[test]
    fn constant_trace_has_zero_stats() {
        let s = stability_stats(&[0.3; 1000]);
        assert_eq!(s.variance_final_third, 0.0);
        assert!(s.lsq_slope.abs() < 1e-15);
        assert_eq!(s.oscillation_count, 0);
    }

    #[test]
    fn ramp_variance_matches_closed_form() {
        let trace: Vec<f64> = (0..900).map(|i| 2.0 * i as f64 + 1.0).collect();
        let s = stability_stats(&trace);
        // final third is an arithmetic sequence of 300 terms with step 2
        let m = 300.0f64;
        let expected = 4.0 * (m * m - 1.0) / 12.0;
        assert!((s.variance_final_third - expected).abs() < 1e-9 * expected);
        assert!((s.lsq_slope - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sine_oscillation_count() {
        let trace: Vec<f64> = (0..10_000)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / 1000.0).sin())
            .collect();
        let n = stability_stats(&trace).oscillation_count;
        assert!((19..=21).contains(&n), "{n}");
    }

    #[test]
    fn stabilization_point() {
        let mut trace = vec![0.01; 1000];
        trace.extend(vec![1.0; 2000]);
        // the moving average first reaches 0.98 once 490 ones are in the window
        assert_eq!(slots_to_stabilize(&trace), Some(1489));
        assert_eq!(slots_to_stabilize(&[1.0; 10]), None);
    }

    proptest! {
        #[test]
        fn frontier_matches_brute_force(pts in prop::collection::vec((0u8..20, 0u8..20), 1..200)) {
            let pts: Vec<(f64, f64)> = pts.into_iter().map(|(a, b)| (a as f64, b as f64)).collect();
            let front = pareto_frontier(&pts);
            prop_assert_eq!(&front, &pareto_brute_force(&pts));
            for p in &front {
                prop_assert!(!front.iter().any(|q| dominates(*q, *p)));
            }
            for q in &pts {
                prop_assert!(front.contains(q) || front.iter().any(|p| dominates(*p, *q)));
            }
        }

        #[test]
        fn field_kpis_ignore_row_order(seed in 0u64..1000) {
            let mut rows: Vec<SlotRow> = (0..50)
                .map(|t| row(t, (t * 7 + seed) % 5, (t + seed) % 3 % ((t * 7 + seed) % 5 + 1), 1 + (t % 4) as u32, t as f64))
                .collect();
            let a = compute_kpis(&rows, 5.0, 10.0).unwrap();
            rows.reverse();
            let b = compute_kpis(&rows, 5.0, 10.0).unwrap();
            prop_assert_eq!(a.tsr, b.tsr);
            prop_assert_eq!(a.tasks, b.tasks);
            prop_assert_eq!(a.p95_latency_slots, b.p95_latency_slots);
            prop_assert!((a.sbe - b.sbe).abs() < 1e-12);
            prop_assert_eq!(a.reward_var_final_third, b.reward_var_final_third);
        }
    }
}
