//! Fast-loop agentic control.
//!
//! Observations, the discrete action grid, bandwidth allocation, the scalar
//! interference model, reward assembly, softmax actors with a linear critic
//! (shared for CTDE, per agent otherwise), the heuristic baseline policy and
//! the intent side channel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{db_to_linear, linear_to_db, TransmissionReport};
use crate::config::{ControlConfig, PhyConfig, ScenarioConfig};
use crate::linalg::dot;
use crate::rng::SimRng;

/// Transmit power levels, watts.
pub const POWER_LEVELS_W: [f64; 4] = [0.05, 0.1, 0.15, 0.2];
/// Largest bandwidth request, units.
pub const MAX_BW_REQUEST: u32 = 4;
/// Token budgets, symbols.
pub const TOKEN_DIMS: [usize; 3] = [4, 8, 16];
/// Index of the mid power level used by the heuristic.
pub const MID_POWER_IDX: usize = 1;
/// Index of the token budget the heuristic keeps.
pub const DEFAULT_TOKEN_IDX: usize = 1;

/// Upper edges of the SINR buckets, dB.
pub const SINR_EDGES_DB: [f64; 4] = [0.0, 5.0, 10.0, 15.0];
/// Lower edges of queue buckets 1.. (bucket 0 is an empty queue).
pub const QUEUE_EDGES: [usize; 3] = [1, 9, 17];
/// Upper edges of the distortion buckets.
pub const DISTORTION_EDGES: [f64; 3] = [0.05, 0.15, 0.4];
pub const SINR_BUCKETS: usize = SINR_EDGES_DB.len() + 1;
pub const QUEUE_BUCKETS: usize = QUEUE_EDGES.len() + 1;
pub const DISTORTION_BUCKETS: usize = DISTORTION_EDGES.len() + 1;
pub const INTENT_DIM: usize = 3;
/// Feature layout: SINR one-hot, queue one-hot, distortion one-hot,
/// neighbor intents, bias.
pub const N_FEATURES: usize = SINR_BUCKETS + QUEUE_BUCKETS + DISTORTION_BUCKETS + INTENT_DIM + 1;
/// Side-channel symbols charged per slot for intent exchange.
pub const INTENT_SYMBOLS: u64 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("non-finite policy gradient; update rejected")]
    NonFiniteGradient,
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionTuple {
    pub power_idx: usize,
    /// Requested bandwidth units, 1..=4.
    pub bw_request: u32,
    /// Token budget index; `None` for bit-centric paradigms.
    pub token_idx: Option<usize>,
}

impl ActionTuple {
    pub fn n_actions(semantic: bool) -> usize {
        let base = POWER_LEVELS_W.len() * MAX_BW_REQUEST as usize;
        if semantic {
            base * TOKEN_DIMS.len()
        } else {
            base
        }
    }

    /// Flat index `power + 4·(bw − 1) + 16·token`.
    pub fn index(&self) -> usize {
        let np = POWER_LEVELS_W.len();
        self.power_idx
            + np * (self.bw_request as usize - 1)
            + np * MAX_BW_REQUEST as usize * self.token_idx.unwrap_or(0)
    }

    pub fn from_index(idx: usize, semantic: bool) -> Self {
        let np = POWER_LEVELS_W.len();
        let nb = MAX_BW_REQUEST as usize;
        assert!(idx < Self::n_actions(semantic), "action index out of range");
        Self {
            power_idx: idx % np,
            bw_request: ((idx / np) % nb) as u32 + 1,
            token_idx: semantic.then_some(idx / (np * nb)),
        }
    }

    pub fn power_w(&self) -> f64 {
        POWER_LEVELS_W[self.power_idx]
    }

    pub fn token_dim(&self) -> Option<usize> {
        self.token_idx.map(|i| TOKEN_DIMS[i])
    }
}

fn bucket_upper(v: f64, edges: &[f64]) -> usize {
    edges.iter().position(|e| v < *e).unwrap_or(edges.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub sinr_bucket: usize,
    pub queue_len: usize,
    pub last_distortion_bucket: usize,
    pub neighbor_intents: [f64; INTENT_DIM],
    pub bias: f64,
}

impl Observation {
    pub fn new(last_sinr_db: f64, queue_len: usize, last_distortion: f64, neighbor_intents: [f64; INTENT_DIM]) -> Self {
        Self {
            sinr_bucket: bucket_upper(last_sinr_db, &SINR_EDGES_DB),
            queue_len,
            last_distortion_bucket: bucket_upper(last_distortion, &DISTORTION_EDGES),
            neighbor_intents,
            bias: 1.0,
        }
    }

    pub fn queue_bucket(&self) -> usize {
        QUEUE_EDGES
            .iter()
            .rposition(|e| self.queue_len >= *e)
            .map(|i| i + 1)
            .unwrap_or(0)
    }

    pub fn features(&self) -> Vec<f64> {
        let mut f = vec![0.0; N_FEATURES];
        f[self.sinr_bucket] = 1.0;
        f[SINR_BUCKETS + self.queue_bucket()] = 1.0;
        f[SINR_BUCKETS + QUEUE_BUCKETS + self.last_distortion_bucket] = 1.0;
        let o = SINR_BUCKETS + QUEUE_BUCKETS + DISTORTION_BUCKETS;
        f[o..o + INTENT_DIM].copy_from_slice(&self.neighbor_intents);
        f[N_FEATURES - 1] = self.bias;
        f
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub grants: Vec<u32>,
    /// Requests exceeded the budget.
    pub overflow: bool,
    /// Budget smaller than the number of agents.
    pub infeasible: bool,
}

/// Split `budget` units among requests.
///
/// Under budget every request is granted. Otherwise grants minimize the L1
/// distance to the proportional shares subject to every grant being at
/// least one unit (largest remainder with a unit floor), assigning units
/// greedily and breaking ties by lowest agent index. If `budget` is
/// smaller than the number of agents, the `budget` largest requesters get
/// one unit each and the rest get zero.
pub fn allocate_bandwidth(requests: &[u32], budget: u32) -> Allocation {
    let n = requests.len();
    let total: u64 = requests.iter().map(|&r| r as u64).sum();
    if total <= budget as u64 {
        return Allocation {
            grants: requests.to_vec(),
            overflow: false,
            infeasible: false,
        };
    }
    if (budget as usize) < n {
        tracing::debug!(budget, agents = n, "bandwidth budget below agent count");
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| requests[b].cmp(&requests[a]).then(a.cmp(&b)));
        let mut grants = vec![0; n];
        for &i in order.iter().take(budget as usize) {
            grants[i] = 1;
        }
        return Allocation {
            grants,
            overflow: true,
            infeasible: true,
        };
    }
    let shares: Vec<f64> = requests
        .iter()
        .map(|&r| r as f64 * budget as f64 / total as f64)
        .collect();
    let mut grants = vec![1u32; n];
    for _ in n as u32..budget {
        let mut best = 0;
        let mut best_gain = f64::NEG_INFINITY;
        for (i, (&g, &q)) in grants.iter().zip(&shares).enumerate() {
            let gain = (g as f64 - q).abs() - (g as f64 + 1.0 - q).abs();
            if gain > best_gain + 1e-12 {
                best_gain = gain;
                best = i;
            }
        }
        grants[best] += 1;
    }
    Allocation {
        grants,
        overflow: true,
        infeasible: false,
    }
}

/// Noise floor per bandwidth unit such that a capped-power transmitter on
/// one unit sees `snr_db` without interference.
pub fn noise_floor_w(snr_db: f64, phy: &PhyConfig) -> f64 {
    phy.power_cap_w / db_to_linear(snr_db)
}

/// `own / (noise_floor · bw + coupling · others)`, in dB.
pub fn effective_sinr(own_power_w: f64, own_bw: u32, others_power_sum_w: f64, noise_floor_w: f64, coupling: f64) -> f64 {
    assert!(own_bw >= 1, "own_bw must be >= 1");
    linear_to_db(own_power_w / (noise_floor_w * own_bw as f64 + coupling * others_power_sum_w))
}

/// Reward weights taken from the scenario config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_e: f64,
    pub lambda_l: f64,
    pub energy_ref_j: f64,
    pub deadline_slots: f64,
    pub clip: f64,
}

impl RewardWeights {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        Self {
            alpha: cfg.alpha,
            beta: cfg.beta,
            lambda_e: cfg.lambda_e,
            lambda_l: cfg.lambda_l,
            energy_ref_j: cfg.control.energy_ref_j,
            deadline_slots: cfg.latency_budget_slots as f64,
            clip: cfg.control.reward_clip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    /// Clipped reward.
    pub r: f64,
    /// Reward before clipping.
    pub unclipped: f64,
    pub task_utility: f64,
    pub distortion_term: f64,
    pub energy_penalty: f64,
    pub latency_penalty: f64,
}

pub fn assemble_reward(task_success: bool, d_sem: f64, report: &TransmissionReport, w: &RewardWeights) -> RewardRecord {
    let task_utility = if task_success { 1.0 } else { 0.0 };
    let distortion_term = d_sem / 2.0;
    let energy_penalty = report.energy_joules / w.energy_ref_j;
    let latency_penalty = (report.latency_slots - w.deadline_slots).max(0.0) / w.deadline_slots;
    let unclipped = w.alpha * task_utility
        - w.beta * distortion_term
        - w.lambda_e * energy_penalty
        - w.lambda_l * latency_penalty;
    RewardRecord {
        r: unclipped.clamp(-w.clip, w.clip),
        unclipped,
        task_utility,
        distortion_term,
        energy_penalty,
        latency_penalty,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    Sample,
    Greedy,
}

/// Linear softmax actor `π(a|s) = (1 − Aε)·softmax(W f)_a + ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub n_actions: usize,
    pub n_features: usize,
    /// `n_actions × n_features`, row-major.
    pub weights: Vec<f64>,
    pub explore_floor: f64,
}

impl Actor {
    pub fn zeros(n_actions: usize, n_features: usize, explore_floor: f64) -> Self {
        assert!(explore_floor * n_actions as f64 <= 1.0, "exploration floor too large");
        Self {
            n_actions,
            n_features,
            weights: vec![0.0; n_actions * n_features],
            explore_floor,
        }
    }

    pub fn logits(&self, f: &[f64]) -> Vec<f64> {
        self.weights.chunks_exact(self.n_features).map(|w| dot(w, f)).collect()
    }

    fn softmax(logits: &[f64]) -> Vec<f64> {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn mix(&self) -> f64 {
        1.0 - self.explore_floor * self.n_actions as f64
    }

    /// Softmax of the logits before the exploration floor.
    pub fn base_probs(&self, f: &[f64]) -> Vec<f64> {
        Self::softmax(&self.logits(f))
    }

    pub fn probs(&self, f: &[f64]) -> Vec<f64> {
        let k = self.mix();
        self.base_probs(f)
            .into_iter()
            .map(|s| k * s + self.explore_floor)
            .collect()
    }

    pub fn select(&self, f: &[f64], rng: &mut SimRng, mode: SelectMode) -> (usize, f64) {
        let p = self.probs(f);
        let a = match mode {
            SelectMode::Greedy => {
                let l = self.logits(f);
                let mut best = 0;
                for (i, v) in l.iter().enumerate() {
                    if *v > l[best] {
                        best = i;
                    }
                }
                best
            }
            SelectMode::Sample => {
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut pick = p.len() - 1;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
        };
        (a, p[a].ln())
    }

    pub fn entropy(&self, f: &[f64]) -> f64 {
        -self.probs(f).iter().map(|p| p * p.ln()).sum::<f64>()
    }

    /// Gradient of `ln π(a|s)` with respect to the logits.
    pub fn dlogp_dlogits(&self, f: &[f64], a: usize) -> Vec<f64> {
        let s = self.base_probs(f);
        let k = self.mix();
        let pa = k * s[a] + self.explore_floor;
        (0..self.n_actions)
            .map(|b| {
                let delta = if a == b { 1.0 } else { 0.0 };
                k * s[a] * (delta - s[b]) / pa
            })
            .collect()
    }

    /// Gradient of the policy entropy with respect to the logits.
    pub fn dentropy_dlogits(&self, f: &[f64]) -> Vec<f64> {
        let s = self.base_probs(f);
        let k = self.mix();
        let logp: Vec<f64> = s.iter().map(|si| (k * si + self.explore_floor).ln()).collect();
        let mean: f64 = s.iter().zip(&logp).map(|(si, lp)| si * lp).sum();
        s.iter()
            .zip(&logp)
            .map(|(si, lp)| -k * si * (lp - mean))
            .collect()
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.weights, &self.weights)
    }
}

/// Linear state-value critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub weights: Vec<f64>,
}

impl Critic {
    pub fn zeros(n: usize) -> Self {
        Self { weights: vec![0.0; n] }
    }

    pub fn value(&self, summary: &[f64]) -> f64 {
        dot(&self.weights, summary)
    }
}

/// Actor per agent plus one shared critic (CTDE) or one critic per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub actors: Vec<Actor>,
    pub critics: Vec<Critic>,
    pub version: u64,
}

impl PolicyParams {
    pub fn new(n_agents: usize, semantic: bool, shared_critic: bool, explore_floor: f64) -> Self {
        let na = ActionTuple::n_actions(semantic);
        let (n_critics, summary_dim) = if shared_critic {
            (1, 2 * N_FEATURES)
        } else {
            (n_agents, N_FEATURES)
        };
        Self {
            actors: (0..n_agents).map(|_| Actor::zeros(na, N_FEATURES, explore_floor)).collect(),
            critics: vec![Critic::zeros(summary_dim); n_critics],
            version: 0,
        }
    }

    pub fn shared_critic(&self) -> bool {
        self.critics[0].weights.len() == 2 * N_FEATURES
    }

    pub fn critic_for(&self, agent: usize) -> &Critic {
        if self.critics.len() == 1 {
            &self.critics[0]
        } else {
            &self.critics[agent]
        }
    }

    /// All actor weights concatenated.
    pub fn actor_vector(&self) -> Vec<f64> {
        self.actors.iter().flat_map(|a| a.weights.iter().cloned()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.actors.iter().all(|a| a.weights.iter().all(|v| v.is_finite()))
            && self.critics.iter().all(|c| c.weights.iter().all(|v| v.is_finite()))
    }
}

/// Critic input: own features, or own features followed by the mean
/// features of all agents when the critic is shared.
pub fn joint_summary(own: &[f64], all: &[Vec<f64>], shared: bool) -> Vec<f64> {
    if !shared {
        return own.to_vec();
    }
    let mut s = own.to_vec();
    let n = all.len() as f64;
    for k in 0..own.len() {
        s.push(all.iter().map(|f| f[k]).sum::<f64>() / n);
    }
    s
}

/// One fast-loop sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub features: Vec<f64>,
    pub action: usize,
    /// Log-probability under the behaviour policy.
    pub logprob: f64,
    pub reward: f64,
    pub summary: Vec<f64>,
}

/// Discounted returns within one trajectory (truncated at its end).
pub fn discounted_returns(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        g = r + discount * g;
        out[i] = g;
    }
    out
}

/// Gradient of the clipped surrogate
/// `mean_k[min(ρ_k A_k, clip(ρ_k) A_k)] + w · mean_k H(π(·|s_k))`
/// with `ρ_k = π(a_k|s_k) / exp(logprob_k)`, with respect to the actor
/// weights. At `ρ = 1` this is the advantage actor-critic gradient.
pub fn actor_gradient(actor: &Actor, batch: &[Transition], advantages: &[f64], entropy_weight: f64, clip: f64) -> Vec<f64> {
    let mut g = vec![0.0; actor.weights.len()];
    let nf = actor.n_features;
    let scale = 1.0 / batch.len() as f64;
    for (tr, &adv) in batch.iter().zip(advantages) {
        let p = actor.probs(&tr.features);
        let ratio = (p[tr.action].ln() - tr.logprob).exp();
        let clipped = (adv > 0.0 && ratio > 1.0 + clip) || (adv < 0.0 && ratio < 1.0 - clip);
        let mut gl = vec![0.0; actor.n_actions];
        if !clipped && adv != 0.0 {
            for (gi, d) in gl.iter_mut().zip(actor.dlogp_dlogits(&tr.features, tr.action)) {
                *gi += adv * ratio * d;
            }
        }
        if entropy_weight != 0.0 {
            for (gi, d) in gl.iter_mut().zip(actor.dentropy_dlogits(&tr.features)) {
                *gi += entropy_weight * d;
            }
        }
        for (b, gb) in gl.iter().enumerate() {
            if *gb == 0.0 {
                continue;
            }
            for (w, fk) in g[b * nf..(b + 1) * nf].iter_mut().zip(&tr.features) {
                *w += scale * gb * fk;
            }
        }
    }
    g
}

/// The surrogate whose gradient [`actor_gradient`] returns.
pub fn actor_surrogate(actor: &Actor, batch: &[Transition], advantages: &[f64], entropy_weight: f64, clip: f64) -> f64 {
    let scale = 1.0 / batch.len() as f64;
    batch
        .iter()
        .zip(advantages)
        .map(|(tr, &adv)| {
            let p = actor.probs(&tr.features);
            let ratio = (p[tr.action].ln() - tr.logprob).exp();
            let obj = (ratio * adv).min(ratio.clamp(1.0 - clip, 1.0 + clip) * adv);
            scale * (obj + entropy_weight * actor.entropy(&tr.features))
        })
        .sum()
}

/// One fast-loop update. `trajectories[i]` holds agent `i`'s samples since
/// its last update, in time order. Returns the successor params with the
/// version incremented, or rejects a non-finite update.
pub fn fast_update(params: &PolicyParams, trajectories: &[Vec<Transition>], eta: f64, cfg: &ControlConfig) -> Result<PolicyParams, ControlError> {
    if trajectories.len() != params.actors.len() {
        return Err(ControlError::DimensionMismatch(format!(
            "{} trajectories for {} agents",
            trajectories.len(),
            params.actors.len()
        )));
    }
    if trajectories.iter().all(|t| t.is_empty()) {
        return Err(ControlError::EmptyTrajectory);
    }
    let mut next = params.clone();
    // returns and advantages under the pre-update critic
    let mut advantages = Vec::with_capacity(trajectories.len());
    for (i, traj) in trajectories.iter().enumerate() {
        let rewards: Vec<f64> = traj.iter().map(|t| t.reward).collect();
        let g = discounted_returns(&rewards, cfg.discount);
        let critic = params.critic_for(i);
        let adv: Vec<f64> = traj.iter().zip(&g).map(|(t, gk)| gk - critic.value(&t.summary)).collect();
        advantages.push(adv);
    }
    for (i, traj) in trajectories.iter().enumerate() {
        if traj.is_empty() {
            continue;
        }
        let epochs = cfg.ppo_epochs.max(1);
        for _ in 0..epochs {
            let g = actor_gradient(&next.actors[i], traj, &advantages[i], cfg.entropy_weight, cfg.ppo_clip);
            for (w, gi) in next.actors[i].weights.iter_mut().zip(&g) {
                *w += eta * gi;
            }
        }
    }
    // critic: squared-error gradient on the same batch
    let critic_step = eta * cfg.critic_scale;
    let n_critics = next.critics.len();
    for c in 0..n_critics {
        let dim = next.critics[c].weights.len();
        let mut g = vec![0.0; dim];
        let mut count = 0usize;
        for (i, traj) in trajectories.iter().enumerate() {
            if n_critics > 1 && i != c {
                continue;
            }
            for (t, adv) in traj.iter().zip(&advantages[i]) {
                for (gk, sk) in g.iter_mut().zip(&t.summary) {
                    *gk += adv * sk;
                }
                count += 1;
            }
        }
        if count > 0 {
            for (w, gk) in next.critics[c].weights.iter_mut().zip(&g) {
                *w += critic_step * gk / count as f64;
            }
        }
    }
    if !next.is_finite() {
        tracing::warn!("policy update rejected: non-finite parameters");
        return Err(ControlError::NonFiniteGradient);
    }
    next.version = params.version + 1;
    Ok(next)
}

/// Fixed rule: max power above two queued tasks, else mid power;
/// `bw = min(4, 1 + queue)`.
pub fn heuristic_policy(obs: &Observation, semantic: bool) -> ActionTuple {
    let power_idx = if obs.queue_len > 2 {
        POWER_LEVELS_W.len() - 1
    } else {
        MID_POWER_IDX
    };
    ActionTuple {
        power_idx,
        bw_request: (1 + obs.queue_len as u32).min(MAX_BW_REQUEST),
        token_idx: semantic.then_some(DEFAULT_TOKEN_IDX),
    }
}

/// Planned action scaled into `[0, 1]³`.
pub fn broadcast_intent(planned: &ActionTuple) -> [f64; INTENT_DIM] {
    [
        planned.power_idx as f64 / (POWER_LEVELS_W.len() - 1) as f64,
        (planned.bw_request - 1) as f64 / (MAX_BW_REQUEST - 1) as f64,
        planned.token_idx.map(|t| t as f64 / (TOKEN_DIMS.len() - 1) as f64).unwrap_or(0.0),
    ]
}

/// Mean of the other agents' intents for each agent.
pub fn neighbor_intents(intents: &[[f64; INTENT_DIM]]) -> Vec<[f64; INTENT_DIM]> {
    let n = intents.len();
    (0..n)
        .map(|i| {
            let mut m = [0.0; INTENT_DIM];
            if n > 1 {
                for (j, v) in intents.iter().enumerate() {
                    if j != i {
                        for k in 0..INTENT_DIM {
                            m[k] += v[k] / (n - 1) as f64;
                        }
                    }
                }
            }
            m
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_index_round_trip() {
        for semantic in [false, true] {
            for i in 0..ActionTuple::n_actions(semantic) {
                assert_eq!(ActionTuple::from_index(i, semantic).index(), i);
            }
        }
        assert_eq!(ActionTuple::n_actions(false), 16);
        assert_eq!(ActionTuple::n_actions(true), 48);
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_bandwidth(&[2, 3], 10).grants, vec![2, 3]);
        assert_eq!(allocate_bandwidth(&[4, 4, 4], 6).grants, vec![2, 2, 2]);
        assert_eq!(allocate_bandwidth(&[3, 2, 1], 4).grants, vec![2, 1, 1]);
        let a = allocate_bandwidth(&[1, 4, 2], 2);
        assert!(a.infeasible);
        assert_eq!(a.grants, vec![0, 1, 1]);
    }

    #[test]
    fn sinr_examples() {
        let v = effective_sinr(0.1, 1, 0.4, 1e-3, 0.05);
        assert!((v - 10.0 * (0.1f64 / 0.021).log10()).abs() < 1e-12);
        assert!((v - 6.78).abs() < 0.01);
        let alone = effective_sinr(0.1, 1, 0.0, 1e-3, 0.05);
        assert!((alone - 20.0).abs() < 1e-12);
        assert!(effective_sinr(0.1, 1, 0.8, 1e-3, 0.05) < v);
    }

    #[test]
    fn observation_layout() {
        let o = Observation::new(7.0, 0, 0.01, [0.0; 3]);
        let f = o.features();
        assert_eq!(f.len(), N_FEATURES);
        assert_eq!(N_FEATURES, 17);
        assert_eq!(f.iter().sum::<f64>(), 4.0);
        assert_eq!(o.sinr_bucket, 2);
        assert_eq!(o.queue_bucket(), 0);
        assert_eq!(Observation::new(7.0, 9, 0.0, [0.0; 3]).queue_bucket(), 2);
        assert_eq!(Observation::new(7.0, 100, 0.0, [0.0; 3]).queue_bucket(), 3);
        assert_eq!(Observation::new(-9.0, 1, 3.0, [0.0; 3]).last_distortion_bucket, 3);
    }

    #[test]
    fn reward_examples() {
        let w = RewardWeights {
            alpha: 1.0,
            beta: 1.0,
            lambda_e: 0.1,
            lambda_l: 0.1,
            energy_ref_j: 1e-5,
            deadline_slots: 5.0,
            clip: 5.0,
        };
        let quiet = TransmissionReport {
            payload: 8,
            airtime_slots: 0.0,
            energy_joules: 0.0,
            delivered: true,
            attempts: 1,
            latency_slots: 1.0,
            power_clamped: false,
        };
        assert_eq!(assemble_reward(true, 0.0, &quiet, &w).r, 1.0);
        let worst = assemble_reward(false, 2.0, &quiet, &w);
        assert_eq!(worst.task_utility, 0.0);
        assert_eq!(worst.distortion_term, 1.0);
        assert_eq!(worst.r, -1.0);
        let mut late = quiet;
        late.latency_slots = 7.5;
        late.energy_joules = 2e-5;
        let r = assemble_reward(true, 0.4, &late, &w);
        assert!((r.r - (1.0 - 0.2 - 0.1 * 2.0 - 0.1 * 0.5)).abs() < 1e-12);
        late.energy_joules = 1.0;
        let r = assemble_reward(true, 0.0, &late, &w);
        assert_eq!(r.r, -5.0);
    }

    #[test]
    fn heuristic_rule_table() {
        let q0 = heuristic_policy(&Observation::new(5.0, 0, 0.0, [0.0; 3]), false);
        assert_eq!((q0.power_idx, q0.bw_request), (MID_POWER_IDX, 1));
        let q5 = heuristic_policy(&Observation::new(5.0, 5, 0.0, [0.0; 3]), false);
        assert_eq!((q5.power_idx, q5.bw_request), (3, 4));
        assert_eq!(q5.token_idx, None);
    }

    #[test]
    fn intent_scaling() {
        let a = ActionTuple {
            power_idx: 3,
            bw_request: 4,
            token_idx: Some(2),
        };
        assert_eq!(broadcast_intent(&a), [1.0, 1.0, 1.0]);
        let n = neighbor_intents(&[[1.0, 0.0, 0.5], [0.0, 1.0, 0.5], [0.5, 0.5, 0.5]]);
        assert_eq!(n[0], [0.25, 0.75, 0.5]);
    }

    #[test]
    fn zero_weights_are_uniform() {
        let a = Actor::zeros(5, 3, 0.0);
        let p = a.probs(&[1.0, 0.0, 1.0]);
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn greedy_tie_goes_low() {
        let mut a = Actor::zeros(4, 1, 0.0);
        a.weights = vec![0.0, 2.0, 2.0, 1.0];
        let mut rng = SimRng::new(1, 1);
        assert_eq!(a.select(&[1.0], &mut rng, SelectMode::Greedy).0, 1);
    }

    #[test]
    fn floor_is_respected() {
        let mut a = Actor::zeros(16, 1, 1e-4);
        a.weights[3] = 500.0;
        let p = a.probs(&[1.0]);
        assert!(p.iter().all(|v| *v >= 1e-4));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn returns_are_discounted() {
        let g = discounted_returns(&[1.0, 0.0, 2.0], 0.5);
        assert_eq!(g, vec![1.5, 1.0, 2.0]);
    }

    #[test]
    fn zero_advantage_without_entropy_is_a_no_op() {
        let mut params = PolicyParams::new(2, false, true, 0.0);
        params.actors[0].weights[5] = 0.3;
        let f = Observation::new(3.0, 2, 0.1, [0.0; 3]).features();
        let summary = joint_summary(&f, &[f.clone(), f.clone()], true);
        let tr = Transition {
            features: f,
            action: 2,
            logprob: (1.0f64 / 16.0).ln(),
            reward: 0.0,
            summary,
        };
        let cfg = ControlConfig {
            entropy_weight: 0.0,
            ..ControlConfig::default()
        };
        let next = fast_update(&params, &[vec![tr.clone()], vec![tr]], 0.5, &cfg).unwrap();
        assert_eq!(next.actors, params.actors);
        assert_eq!(next.version, params.version + 1);
    }
}
