//! Timescale-separation health monitors.
//!
//! Representation drift on cached probe inputs, reward non-stationarity as
//! a KL divergence between windowed reward histograms, relative policy
//! oscillation, and the controller that throttles `K`, reduces `c` or
//! requests a codec rollback.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::cosine_distortion;
use crate::config::{MonitorAction, MonitorConfig};
use crate::linalg::norm;

/// Reward histogram range; matches the reward clip.
pub const REWARD_RANGE: (f64, f64) = (-5.0, 5.0);
/// Minimum samples per window for the non-stationarity estimate.
pub const MIN_NS_SAMPLES: usize = 30;

#[derive(Debug, Error, PartialEq)]
pub enum MonitorError {
    #[error("insufficient history")]
    InsufficientHistory,
    #[error("zero snapshot norm")]
    ZeroSnapshotNorm,
}

/// Mean `1 − cos` between matching probe embeddings at two times.
pub fn drift(current: &[Vec<f64>], past: &[Vec<f64>]) -> Result<f64, MonitorError> {
    if current.is_empty() || current.len() != past.len() {
        return Err(MonitorError::InsufficientHistory);
    }
    let total: f64 = current
        .iter()
        .zip(past)
        .map(|(a, b)| cosine_distortion(a, b).value)
        .sum();
    Ok(total / current.len() as f64)
}

/// Counts over `bins` equal-width bins spanning [`REWARD_RANGE`]; values
/// outside the range fall into the end bins.
pub fn reward_histogram(rewards: &[f64], bins: usize) -> Vec<f64> {
    let (lo, hi) = REWARD_RANGE;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0; bins];
    for r in rewards {
        let k = (((r - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[k] += 1.0;
    }
    counts
}

/// Laplace-smoothed distribution `(c_k + α) / (N + α·bins)`.
pub fn smoothed_distribution(counts: &[f64], alpha: f64) -> Vec<f64> {
    let n: f64 = counts.iter().sum();
    let denom = n + alpha * counts.len() as f64;
    counts.iter().map(|c| (c + alpha) / denom).collect()
}

/// `KL(p ‖ q)` in nats; terms with `p_k = 0` contribute zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, qk)| pk * (pk / qk).ln())
        .sum()
}

/// Reward non-stationarity: KL between the recent window `p` and the
/// preceding window `q`.
pub fn ns(recent: &[f64], older: &[f64], bins: usize, alpha: f64) -> Result<f64, MonitorError> {
    if recent.len() < MIN_NS_SAMPLES || older.len() < MIN_NS_SAMPLES {
        return Err(MonitorError::InsufficientHistory);
    }
    let p = smoothed_distribution(&reward_histogram(recent, bins), alpha);
    let q = smoothed_distribution(&reward_histogram(older, bins), alpha);
    Ok(kl_divergence(&p, &q).max(0.0))
}

/// `‖θ_t − θ_{t−Δ}‖ / ‖θ_{t−Δ}‖`.
pub fn osc(current: &[f64], snapshot: &[f64]) -> Result<f64, MonitorError> {
    let ns = norm(snapshot);
    if ns == 0.0 {
        return Err(MonitorError::ZeroSnapshotNorm);
    }
    let diff: f64 = current
        .iter()
        .zip(snapshot)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff / ns)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MonitorValues {
    pub drift: Option<f64>,
    pub ns: Option<f64>,
    pub osc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionTaken {
    None,
    /// Breach recorded, no action (log-only mode or action above ceiling).
    Logged,
    ThrottleK,
    ReduceC,
    Rollback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub t: u64,
    pub metric: String,
    pub value: f64,
    pub action: ActionTaken,
}

fn rank(a: MonitorAction) -> u8 {
    match a {
        MonitorAction::LogOnly => 0,
        MonitorAction::ThrottleK => 1,
        MonitorAction::ReduceC => 2,
        MonitorAction::Rollback => 3,
    }
}

/// Breach bookkeeping for [`adapt`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaptState {
    pub drift_streak: u32,
    pub ns_streak: u32,
    pub osc_streak: u32,
}

/// Decide the mitigation for one check.
///
/// Drift above `eps1` throttles `K`, NS above `eps2` reduces `c`, and Osc
/// above `eps3` for `persistence` consecutive checks requests a rollback.
/// When the ceiling is `Rollback`, a drift breach that persists for
/// `persistence` checks also escalates to rollback. At most one action is
/// taken per check, priority rollback > reduce-c > throttle-K, restricted
/// to actions at or below the configured ceiling.
pub fn adapt(values: &MonitorValues, cfg: &MonitorConfig, state: &mut AdaptState) -> ActionTaken {
    let drift_b = values.drift.is_some_and(|v| v > cfg.eps1);
    let ns_b = values.ns.is_some_and(|v| v > cfg.eps2);
    let osc_b = values.osc.is_some_and(|v| v > cfg.eps3);
    state.drift_streak = if drift_b { state.drift_streak + 1 } else { 0 };
    state.ns_streak = if ns_b { state.ns_streak + 1 } else { 0 };
    state.osc_streak = if osc_b { state.osc_streak + 1 } else { 0 };
    if !(drift_b || ns_b || osc_b) {
        return ActionTaken::None;
    }
    let ceiling = rank(cfg.action);
    let wants_rollback = state.osc_streak >= cfg.persistence
        || (cfg.action == MonitorAction::Rollback && state.drift_streak >= cfg.persistence);
    if wants_rollback && ceiling >= 3 {
        return ActionTaken::Rollback;
    }
    if ns_b && ceiling >= 2 {
        return ActionTaken::ReduceC;
    }
    if drift_b && ceiling >= 1 {
        return ActionTaken::ThrottleK;
    }
    ActionTaken::Logged
}

/// Windowed histories feeding the three monitors.
#[derive(Debug, Clone)]
pub struct MonitorState {
    cfg: MonitorConfig,
    /// `(slot, probe embeddings)` per check.
    probe_history: VecDeque<(u64, Vec<Vec<f64>>)>,
    /// `(slot, per-agent rewards)` per slot.
    reward_history: VecDeque<(u64, Vec<f64>)>,
    /// `(slot, concatenated actor weights)` per check.
    policy_history: VecDeque<(u64, Vec<f64>)>,
    pub last_values: MonitorValues,
    pub adapt_state: AdaptState,
    pub trigger_log: Vec<TriggerEvent>,
}

impl MonitorState {
    pub fn new(cfg: MonitorConfig) -> Self {
        Self {
            cfg,
            probe_history: VecDeque::new(),
            reward_history: VecDeque::new(),
            policy_history: VecDeque::new(),
            last_values: MonitorValues::default(),
            adapt_state: AdaptState::default(),
            trigger_log: Vec::new(),
        }
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.cfg
    }

    fn horizon(&self) -> u64 {
        2 * self.cfg.window_delta
    }

    fn trim(&mut self, t: u64) {
        let h = self.horizon();
        let keep = |s: u64| s + h >= t;
        while self.reward_history.front().is_some_and(|(s, _)| !keep(*s)) {
            self.reward_history.pop_front();
        }
        while self.probe_history.front().is_some_and(|(s, _)| !keep(*s)) {
            self.probe_history.pop_front();
        }
        while self.policy_history.front().is_some_and(|(s, _)| !keep(*s)) {
            self.policy_history.pop_front();
        }
    }

    pub fn record_rewards(&mut self, t: u64, rewards: &[f64]) {
        self.reward_history.push_back((t, rewards.to_vec()));
        self.trim(t);
    }

    /// Latest stored entry at or before `slot`.
    fn at_or_before<T>(hist: &VecDeque<(u64, T)>, slot: u64) -> Option<&T> {
        hist.iter().rev().find(|(s, _)| *s <= slot).map(|(_, v)| v)
    }

    /// Record a check at slot `t` and compute the three metrics.
    /// `probes` is `None` when there is no codec to monitor.
    pub fn evaluate(&mut self, t: u64, probes: Option<Vec<Vec<f64>>>, actor: Vec<f64>) -> MonitorValues {
        let delta = self.cfg.window_delta;
        let mut values = MonitorValues::default();
        if let Some(p) = probes {
            if t >= delta {
                if let Some(old) = Self::at_or_before(&self.probe_history, t - delta) {
                    if self.probe_history.front().is_some_and(|(s, _)| *s + delta <= t) {
                        values.drift = drift(&p, old).ok();
                    }
                }
            }
            self.probe_history.push_back((t, p));
        }
        if t >= delta {
            if let Some(old) = Self::at_or_before(&self.policy_history, t - delta) {
                values.osc = osc(&actor, old).ok();
            }
        }
        self.policy_history.push_back((t, actor));
        if t >= 2 * delta {
            let recent: Vec<f64> = self
                .reward_history
                .iter()
                .filter(|(s, _)| *s + delta >= t + 1 && *s < t)
                .flat_map(|(_, r)| r.iter().cloned())
                .collect();
            let older: Vec<f64> = self
                .reward_history
                .iter()
                .filter(|(s, _)| *s + 2 * delta >= t + 1 && *s + delta < t + 1)
                .flat_map(|(_, r)| r.iter().cloned())
                .collect();
            values.ns = ns(&recent, &older, self.cfg.histogram_bins, self.cfg.laplace_alpha).ok();
        }
        self.trim(t);
        self.last_values = values;
        values
    }

    /// Apply the decision rule and log every breach.
    pub fn decide(&mut self, t: u64, values: &MonitorValues) -> ActionTaken {
        let action = adapt(values, &self.cfg, &mut self.adapt_state);
        if action != ActionTaken::None {
            for (metric, v, thr) in [
                ("drift", values.drift, self.cfg.eps1),
                ("ns", values.ns, self.cfg.eps2),
                ("osc", values.osc, self.cfg.eps3),
            ] {
                if let Some(v) = v.filter(|v| *v > thr) {
                    self.trigger_log.push(TriggerEvent {
                        t,
                        metric: metric.to_string(),
                        value: v,
                        action,
                    });
                }
            }
        }
        action
    }

    /// Forget all windows (after a rollback).
    pub fn reset(&mut self) {
        self.probe_history.clear();
        self.reward_history.clear();
        self.policy_history.clear();
        self.adapt_state = AdaptState::default();
        self.last_values = MonitorValues::default();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_probes_have_zero_drift() {
        let p = vec![vec![1.0, 2.0], vec![-0.5, 0.3]];
        assert_eq!(drift(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn rotated_probes_have_unit_drift() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let b = vec![vec![0.0, 1.0], vec![-2.0, 0.0]];
        assert_eq!(drift(&b, &a).unwrap(), 1.0);
    }

    #[test]
    fn bernoulli_kl_closed_form() {
        let p = [0.5, 0.5];
        let q = [0.9, 0.1];
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl_divergence(&p, &q) - expected).abs() < 1e-15);
        assert!((expected - 0.5108).abs() < 1e-4);
        let counts_p = [5.0, 5.0];
        let counts_q = [9.0, 1.0];
        let kl = kl_divergence(
            &smoothed_distribution(&counts_p, 0.0),
            &smoothed_distribution(&counts_q, 0.0),
        );
        assert!((kl - expected).abs() < 1e-12);
    }

    #[test]
    fn smoothing_keeps_kl_finite() {
        let p = smoothed_distribution(&[3.0, 0.0, 4.0], 0.5);
        let q = smoothed_distribution(&[0.0, 7.0, 0.0], 0.5);
        assert!(kl_divergence(&p, &q).is_finite());
    }

    #[test]
    fn identical_windows_have_zero_ns() {
        let r: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        for alpha in [0.0, 0.5, 2.0] {
            assert_eq!(ns(&r, &r, 16, alpha).unwrap(), 0.0);
        }
        assert_eq!(ns(&r[..10], &r, 16, 0.5), Err(MonitorError::InsufficientHistory));
    }

    #[test]
    fn osc_examples() {
        let th = vec![0.5, -1.0, 2.0];
        assert_eq!(osc(&th, &th).unwrap(), 0.0);
        let doubled: Vec<f64> = th.iter().map(|v| 2.0 * v).collect();
        assert!((osc(&doubled, &th).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = th.iter().map(|v| -v).collect();
        assert!((osc(&neg, &th).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(osc(&th, &[0.0; 3]), Err(MonitorError::ZeroSnapshotNorm));
    }

    fn cfg(action: MonitorAction) -> MonitorConfig {
        MonitorConfig {
            enabled: true,
            action,
            ..MonitorConfig::default()
        }
    }

    #[test]
    fn adapt_rule_table() {
        let c = cfg(MonitorAction::Rollback);
        let mut st = AdaptState::default();
        let quiet = MonitorValues {
            drift: Some(0.0),
            ns: Some(0.0),
            osc: Some(0.0),
        };
        assert_eq!(adapt(&quiet, &c, &mut st), ActionTaken::None);
        let drifty = MonitorValues {
            drift: Some(2.0 * c.eps1),
            ..quiet
        };
        assert_eq!(adapt(&drifty, &c, &mut st), ActionTaken::ThrottleK);
        let mut st = AdaptState::default();
        let both = MonitorValues {
            drift: Some(1.0),
            ns: Some(1.0),
            osc: Some(0.0),
        };
        assert_eq!(adapt(&both, &c, &mut st), ActionTaken::ReduceC);
        let mut st = AdaptState::default();
        let osc_hi = MonitorValues {
            osc: Some(1.0),
            ..quiet
        };
        assert_eq!(adapt(&osc_hi, &c, &mut st), ActionTaken::Logged);
        assert_eq!(adapt(&osc_hi, &c, &mut st), ActionTaken::Logged);
        assert_eq!(adapt(&osc_hi, &c, &mut st), ActionTaken::Rollback);
    }

    #[test]
    fn persistent_drift_escalates_only_under_rollback_ceiling() {
        let drifty = MonitorValues {
            drift: Some(1.0),
            ns: None,
            osc: None,
        };
        let c = cfg(MonitorAction::Rollback);
        let mut st = AdaptState::default();
        let seq: Vec<_> = (0..3).map(|_| adapt(&drifty, &c, &mut st)).collect();
        assert_eq!(seq, vec![ActionTaken::ThrottleK, ActionTaken::ThrottleK, ActionTaken::Rollback]);
        let c = cfg(MonitorAction::ThrottleK);
        let mut st = AdaptState::default();
        for _ in 0..5 {
            assert_eq!(adapt(&drifty, &c, &mut st), ActionTaken::ThrottleK);
        }
        let c = cfg(MonitorAction::LogOnly);
        let mut st = AdaptState::default();
        assert_eq!(adapt(&drifty, &c, &mut st), ActionTaken::Logged);
    }

    #[test]
    fn state_compares_against_delta_old_snapshot() {
        let mut m = MonitorState::new(MonitorConfig {
            window_delta: 20,
            ..MonitorConfig::default()
        });
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![0.0, 1.0]];
        for t in (0..=40).step_by(10) {
            let probes = if t < 30 { a.clone() } else { b.clone() };
            let v = m.evaluate(t, Some(probes), vec![1.0, 1.0]);
            match t {
                0 | 10 => assert!(v.drift.is_none()),
                20 => assert_eq!(v.drift, Some(0.0)),
                30 | 40 => assert_eq!(v.drift, Some(1.0)),
                _ => unreachable!(),
            }
        }
    }
}
