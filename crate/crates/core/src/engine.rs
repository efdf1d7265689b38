//! Two-timescale engine.
//!
//! One run steps every agent through arrivals, observation, action,
//! bandwidth allocation, transport and reward each slot, applies the fast
//! policy update at the end of each decision period and the slow codec
//! update every `K` slots, and drives the monitors, telemetry and registry
//! at their placement cadences. Every slot produces one trace row.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    analog_transmit, db_to_linear, energy_of, linear_to_db, shannon_bits_per_slot, ChannelState,
    TokenPlan,
};
use crate::codec::{
    cosine_distortion, loss_and_gradient, nearest_class, pretrain, semantic_confidence,
    slow_train_step, CodecError, CodecParams, ReferenceEmbedder, SemanticSample, SlowItem,
    TaskModel, TrainingPair, MAX_DISTORTION,
};
use crate::config::{step_sizes, ConfigError, ScenarioConfig, SlowLoopHost};
use crate::control::{
    actor_gradient, allocate_bandwidth, assemble_reward, broadcast_intent, discounted_returns,
    effective_sinr, fast_update, heuristic_policy, joint_summary, neighbor_intents, noise_floor_w,
    ActionTuple, ControlError, Observation, PolicyParams, RewardWeights, SelectMode, Transition,
    INTENT_DIM, INTENT_SYMBOLS, TOKEN_DIMS,
};
use crate::linalg::{matvec, norm};
use crate::monitors::{ActionTaken, MonitorState, MonitorValues, TriggerEvent};
use crate::oran::{
    package_telemetry, rapp_cycle, validation_tsr, AuditEvent, ModelRegistry, RadioKpis,
    RappSettings, TelemetryRecord, TsrWindow,
};
use crate::rng::{streams, SimRng};

/// Version of the per-slot trace schema.
pub const TRACE_SCHEMA_VERSION: u32 = 1;
/// Latency histogram: ten bins of one tenth of the deadline plus overflow.
pub const LAT_HIST_BINS: usize = 11;
/// Encode plus decode calls charged per agent and slot with traffic.
pub const CODEC_OPS_PER_SLOT: u64 = 2;
/// Gradient-norm estimates averaged by the stopping rule.
pub const GRADNORM_WINDOW: usize = 5;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Oran(#[from] crate::oran::OranError),
}

/// Everything drawn once per seed and shared by all arms of an experiment:
/// the task, the frozen reference embedder, the pretrained codec, monitor
/// probes, the validation set and the drift direction.
#[derive(Debug, Clone)]
pub struct World {
    pub seed: u64,
    pub task: TaskModel,
    pub reference: ReferenceEmbedder,
    pub pretrained: CodecParams,
    pub probes: Vec<Vec<f64>>,
    pub validation: Vec<SemanticSample>,
    /// Unit vector in input space along which drift is injected.
    pub drift_direction: Vec<f64>,
    /// Standard deviation of the validation inputs projected on
    /// `drift_direction`; the unit of the injected shift.
    pub drift_sigma: f64,
}

impl World {
    pub fn build(cfg: &ScenarioConfig) -> Result<Self, EngineError> {
        let seed = cfg.seed;
        let cc = &cfg.codec;
        let mut rng = SimRng::new(seed, streams::REFERENCE);
        let projection = ReferenceEmbedder::random_projection(cc.reference_dim, cc.input_dim, &mut rng);
        let mut rng = SimRng::new(seed, streams::TASK_MODEL);
        let (task, reference) = TaskModel::generate(cc, projection, &mut rng)?;
        let mut rng = SimRng::new(seed, streams::CODEC_INIT);
        let init = CodecParams::init(cc.input_dim, cc.embed_dim, &mut rng);
        let mut rng = SimRng::new(seed, streams::CODEC_PRETRAIN);
        let pretrained = pretrain(init, &task, &reference, cc, &mut rng)?;
        let mut rng = SimRng::new(seed, streams::PROBES);
        let probes = (0..cfg.monitor.probe_count)
            .map(|i| task.sample(&mut rng, i as u64).x)
            .collect();
        let mut rng = SimRng::new(seed, streams::VALIDATION);
        let validation: Vec<SemanticSample> = (0..cfg.oran.validation_size)
            .map(|i| task.sample(&mut rng, i as u64))
            .collect();
        let mut rng = SimRng::new(seed, streams::DRIFT_DIRECTION);
        let u = loop {
            let u = rng.normal_vec(cc.reference_dim);
            if norm(&u) > 1e-9 {
                break u;
            }
        };
        let nu = norm(&u);
        let u: Vec<f64> = u.iter().map(|v| v / nu).collect();
        let drift_direction = crate::linalg::matvec_t(reference.projection(), cc.reference_dim, cc.input_dim, &u);
        let proj: Vec<f64> = validation_proj(&validation, &drift_direction);
        let mean = proj.iter().sum::<f64>() / proj.len().max(1) as f64;
        let drift_sigma = (proj.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / proj.len().max(1) as f64).sqrt();
        Ok(Self {
            seed,
            task,
            reference,
            pretrained,
            probes,
            validation,
            drift_direction,
            drift_sigma,
        })
    }

    /// Config fields that determine the world. Arms whose keys are equal
    /// can share one world.
    pub fn key(cfg: &ScenarioConfig) -> String {
        format!(
            "{}|{:?}|{}|{}",
            cfg.seed, cfg.codec, cfg.monitor.probe_count, cfg.oran.validation_size
        )
    }
}

fn validation_proj(samples: &[SemanticSample], dir: &[f64]) -> Vec<f64> {
    samples.iter().map(|s| crate::linalg::dot(&s.x, dir)).collect()
}

/// One per-slot trace row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRow {
    pub t: u64,
    /// Flat action index per agent.
    pub actions: Vec<usize>,
    /// Slot reward per agent: mean clipped reward of resolved tasks.
    pub rewards: Vec<f64>,
    pub grants: Vec<u32>,
    /// `Σ α · utility` over resolved tasks.
    pub util: f64,
    /// `Σ β · distortion_term`.
    pub dist: f64,
    /// `Σ λ_e · energy_penalty`.
    pub epen: f64,
    /// `Σ λ_l · latency_penalty`.
    pub lpen: f64,
    /// `util − dist − epen − lpen`.
    pub j: f64,
    pub tasks: u64,
    pub successes: u64,
    pub latency_sum: f64,
    pub lat_hist: Vec<u64>,
    /// Transmit, compute and side-channel energy spent this slot, joules.
    pub energy: f64,
    /// Mean semantic distortion of resolved tasks.
    pub d_sem: Option<f64>,
    /// Success rate over the stopping window.
    pub tsr_window: Option<f64>,
    pub gradnorm: Option<f64>,
    pub codec_version: u64,
    pub k: u64,
    pub c: f64,
    pub overflow: bool,
}

impl SlotRow {
    pub fn reward_mean(&self) -> f64 {
        if self.rewards.is_empty() {
            0.0
        } else {
            self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
        }
    }

    pub fn granted_units(&self) -> u64 {
        self.grants.iter().map(|&g| g as u64).sum()
    }
}

/// One monitor check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorRow {
    pub t: u64,
    pub drift: Option<f64>,
    pub ns: Option<f64>,
    pub osc: Option<f64>,
    pub action: ActionTaken,
}

/// A trace line, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TraceRow {
    Slot(SlotRow),
    Monitor(MonitorRow),
}

impl TraceRow {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace rows serialize")
    }
}

/// Callbacks invoked during a run. All methods default to no-ops.
pub trait Hooks {
    fn on_slot(&mut self, _row: &SlotRow) {}
    /// Near-RT telemetry at the P1 cadence. Receives no raw task inputs.
    fn on_telemetry(&mut self, _record: &TelemetryRecord) {}
    fn on_monitor(&mut self, _row: &MonitorRow) {}
}

/// Hooks that do nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHooks;

impl Hooks for NoHooks {}

/// Writes every slot and monitor row as a JSON line.
pub struct TraceWriter<W: std::io::Write> {
    out: W,
    error: Option<std::io::Error>,
}

impl<W: std::io::Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, error: None }
    }

    fn write(&mut self, row: TraceRow) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{}", row.to_json()) {
                self.error = Some(e);
            }
        }
    }

    /// Flush and return the writer, or the first I/O error.
    pub fn finish(mut self) -> std::io::Result<W> {
        if let Some(e) = self.error {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: std::io::Write> Hooks for TraceWriter<W> {
    fn on_slot(&mut self, row: &SlotRow) {
        self.write(TraceRow::Slot(row.clone()));
    }

    fn on_monitor(&mut self, row: &MonitorRow) {
        self.write(TraceRow::Monitor(row.clone()));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub slots_run: u64,
    pub stopped_early: bool,
    pub final_tsr: f64,
    pub final_gradnorm: Option<f64>,
    /// First slot at which the stopping predicate held, whether or not
    /// stopping was enabled.
    pub first_stop_slot: Option<u64>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub rows: Vec<SlotRow>,
    pub monitor_rows: Vec<MonitorRow>,
    pub triggers: Vec<TriggerEvent>,
    /// Slots at which a rollback was requested.
    pub rollbacks: Vec<u64>,
    pub telemetry_records: u64,
    pub audit: Vec<AuditEvent>,
    pub final_codec: CodecParams,
    pub final_policy: PolicyParams,
    /// Slow updates skipped or rejected, with the cause.
    pub slow_events: Vec<(u64, String)>,
}

#[derive(Debug, Clone)]
struct Task {
    sample: SemanticSample,
    arrival: u64,
    bits_done: f64,
    attempts: u32,
    airtime: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Resolved {
    success: bool,
    d_sem: f64,
    latency: f64,
    energy: f64,
}

struct Agent {
    queue: VecDeque<Task>,
    channel: ChannelState,
    task_rng: SimRng,
    noise_rng: SimRng,
    action_rng: SimRng,
    next_task_id: u64,
    last_sinr_db: f64,
    last_distortion: f64,
    action: ActionTuple,
    action_idx: usize,
    logprob: f64,
    features: Vec<f64>,
    summary: Vec<f64>,
    traj: Vec<Transition>,
    recent: VecDeque<Transition>,
    window: TsrWindow,
    period_tasks: u64,
    period_successes: u64,
    last_task_id: u64,
    last_confidence: f64,
}

/// A codec snapshot with the reference projection folded into the
/// decoder, so `ℰ(decode(z)) = m z + m0`.
struct CodecView {
    params: CodecParams,
    m: Vec<f64>,
    m0: Vec<f64>,
}

impl CodecView {
    fn new(params: CodecParams, reference: &ReferenceEmbedder) -> Self {
        let (de, dd, d) = (reference.dim(), params.input_dim, params.embed_dim);
        let p = reference.projection();
        let mut m = vec![0.0; de * d];
        for r in 0..de {
            for k in 0..dd {
                let prk = p[r * dd + k];
                for c in 0..d {
                    m[r * d + c] += prk * params.phi[k * d + c];
                }
            }
        }
        let m0 = matvec(p, de, dd, &params.phi_bias);
        Self { params, m, m0 }
    }

    fn embed_decoded(&self, z: &[f64]) -> Vec<f64> {
        let mut e = matvec(&self.m, self.m0.len(), z.len(), z);
        for (ei, bi) in e.iter_mut().zip(&self.m0) {
            *ei += bi;
        }
        e
    }
}

fn quantize(x: &[f64], bits: u32, range: f64) -> Vec<f64> {
    let levels = (1u64 << bits.min(52)) as f64;
    let step = 2.0 * range / levels;
    x.iter()
        .map(|v| {
            let idx = ((v.clamp(-range, range) + range) / step).floor().min(levels - 1.0);
            -range + (idx + 0.5) * step
        })
        .collect()
}

fn lat_bin(latency: f64, deadline: f64) -> usize {
    if latency >= deadline {
        LAT_HIST_BINS - 1
    } else {
        ((latency / (deadline / 10.0)).floor() as usize).min(LAT_HIST_BINS - 2)
    }
}

/// Stopping predicate: the TSR window has flattened and the recent
/// gradient-norm estimates are small.
pub fn stopping_check(tsr_history: &[f64], gradnorms: &[f64], tsr_tol: f64, grad_tol: f64) -> bool {
    if tsr_history.is_empty() || gradnorms.is_empty() {
        return false;
    }
    let max = tsr_history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = tsr_history.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = gradnorms.iter().sum::<f64>() / gradnorms.len() as f64;
    max - min <= tsr_tol && mean <= grad_tol
}

struct SlowState {
    k_eff: u64,
    c_eff: f64,
    last_slow: u64,
    buffer: VecDeque<TrainingPair>,
}

/// Run one scenario on `world`.
pub fn run(cfg: &ScenarioConfig, world: &World, hooks: &mut dyn Hooks) -> Result<RunOutput, EngineError> {
    cfg.validate()?;
    Engine::new(cfg, world).run(hooks)
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    world: &'a World,
    semantic: bool,
    agents: Vec<Agent>,
    policy: PolicyParams,
    codec: CodecView,
    pending_codec: Option<CodecParams>,
    registry: Option<ModelRegistry>,
    monitor: Option<MonitorState>,
    slow: SlowState,
    weights: RewardWeights,
    intents: Vec<[f64; INTENT_DIM]>,
    tsr_slots: VecDeque<(u64, u64)>,
    tsr_counts: (u64, u64),
    tsr_history: VecDeque<f64>,
    gradnorms: VecDeque<f64>,
    last_gradnorm: Option<f64>,
    gradnorm_rng: SimRng,
    rows: Vec<SlotRow>,
    monitor_rows: Vec<MonitorRow>,
    rollbacks: Vec<u64>,
    telemetry_records: u64,
    slow_events: Vec<(u64, String)>,
    first_stop_slot: Option<u64>,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ScenarioConfig, world: &'a World) -> Self {
        let semantic = cfg.paradigm.is_semantic();
        let n = cfg.n_agents;
        let seed = cfg.seed;
        let agents = (0..n)
            .map(|i| Agent {
                queue: VecDeque::new(),
                channel: ChannelState::from_config(cfg.snr_db, &cfg.phy, SimRng::for_agent(seed, streams::FADING, i)),
                task_rng: SimRng::for_agent(seed, streams::TASKS, i),
                noise_rng: SimRng::for_agent(seed, streams::ANALOG_NOISE, i),
                action_rng: SimRng::for_agent(seed, streams::ACTIONS, i),
                next_task_id: 0,
                last_sinr_db: cfg.snr_db,
                last_distortion: 0.0,
                action: ActionTuple {
                    power_idx: 0,
                    bw_request: 1,
                    token_idx: semantic.then_some(0),
                },
                action_idx: 0,
                logprob: 0.0,
                features: Vec::new(),
                summary: Vec::new(),
                traj: Vec::new(),
                recent: VecDeque::new(),
                window: TsrWindow::new(cfg.oran.telemetry_window),
                period_tasks: 0,
                period_successes: 0,
                last_task_id: 0,
                last_confidence: 1.0,
            })
            .collect();
        let policy = PolicyParams::new(n, semantic, cfg.paradigm.shares_critic(), cfg.control.explore_floor);
        let codec = CodecView::new(world.pretrained.clone(), &world.reference);
        let registry = cfg.oran.enabled.then(|| {
            let v = validation_tsr(&world.pretrained, &world.validation, &world.reference).ok();
            ModelRegistry::new(
                &world.pretrained,
                v,
                [cfg.alpha, cfg.beta, cfg.lambda_e, cfg.lambda_l],
                0,
            )
        });
        let monitor = cfg.monitor.enabled.then(|| MonitorState::new(cfg.monitor));
        Self {
            cfg,
            world,
            semantic,
            agents,
            policy,
            codec,
            pending_codec: None,
            registry,
            monitor,
            slow: SlowState {
                k_eff: cfg.schedule.k_period,
                c_eff: cfg.schedule.c_ratio,
                last_slow: 0,
                buffer: VecDeque::new(),
            },
            weights: RewardWeights::from_config(cfg),
            intents: vec![[0.0; INTENT_DIM]; n],
            tsr_slots: VecDeque::new(),
            tsr_counts: (0, 0),
            tsr_history: VecDeque::new(),
            gradnorms: VecDeque::new(),
            last_gradnorm: None,
            gradnorm_rng: SimRng::new(seed, streams::GRADNORM_PROBE),
            rows: Vec::with_capacity(cfg.horizon_slots as usize),
            monitor_rows: Vec::new(),
            rollbacks: Vec::new(),
            telemetry_records: 0,
            slow_events: Vec::new(),
            first_stop_slot: None,
        }
    }

    fn run(mut self, hooks: &mut dyn Hooks) -> Result<RunOutput, EngineError> {
        let mut stopped_early = false;
        let mut t = 0;
        while t < self.cfg.horizon_slots {
            let row = self.step(t, hooks)?;
            hooks.on_slot(&row);
            self.rows.push(row);
            if self.check_stop(t) && self.cfg.stop.enabled {
                stopped_early = t + 1 < self.cfg.horizon_slots;
                t += 1;
                break;
            }
            t += 1;
        }
        let (tasks, successes) = self.tsr_counts;
        let summary = RunSummary {
            slots_run: t,
            stopped_early,
            final_tsr: if tasks > 0 { successes as f64 / tasks as f64 } else { 0.0 },
            final_gradnorm: self.last_gradnorm,
            first_stop_slot: self.first_stop_slot,
        };
        let triggers = self.monitor.as_ref().map(|m| m.trigger_log.clone()).unwrap_or_default();
        let audit = self.registry.as_ref().map(|r| r.audit().to_vec()).unwrap_or_default();
        Ok(RunOutput {
            summary,
            rows: self.rows,
            monitor_rows: self.monitor_rows,
            triggers,
            rollbacks: self.rollbacks,
            telemetry_records: self.telemetry_records,
            audit,
            final_codec: self.codec.params,
            final_policy: self.policy,
            slow_events: self.slow_events,
        })
    }

    fn check_stop(&mut self, t: u64) -> bool {
        let w = self.cfg.stop.tsr_window;
        if self.tsr_history.len() < w || self.gradnorms.is_empty() {
            return false;
        }
        let hist: Vec<f64> = self.tsr_history.iter().cloned().collect();
        let g: Vec<f64> = self.gradnorms.iter().cloned().collect();
        let ok = stopping_check(&hist, &g, self.cfg.stop.tsr_tol, self.cfg.stop.grad_tol);
        if ok && self.first_stop_slot.is_none() {
            self.first_stop_slot = Some(t);
        }
        ok
    }

    fn power_of(&self, a: &ActionTuple) -> f64 {
        self.cfg.power_level_w.unwrap_or_else(|| a.power_w())
    }

    fn step(&mut self, t: u64, hooks: &mut dyn Hooks) -> Result<SlotRow, EngineError> {
        let cfg = self.cfg;
        let n = cfg.n_agents;
        let deadline = cfg.latency_budget_slots as f64;
        let period = cfg.decision_period();
        if let Some(p) = self.pending_codec.take() {
            self.codec = CodecView::new(p, &self.world.reference);
        }
        let mut resolved: Vec<Vec<Resolved>> = vec![Vec::new(); n];

        // expiry, block-boundary resets and arrivals
        let block = cfg.phy.block_length_slots;
        for (i, agent) in self.agents.iter_mut().enumerate() {
            while agent.queue.front().is_some_and(|task| t >= task.arrival + cfg.latency_budget_slots as u64) {
                let task = agent.queue.pop_front().expect("front exists");
                resolved[i].push(Self::failed(&task, cfg, agent.last_sinr_db));
            }
            if t % block == 0 && !self.semantic {
                if let Some(head) = agent.queue.front_mut() {
                    if head.bits_done > 0.0 {
                        head.bits_done = 0.0;
                        head.attempts += 1;
                    }
                }
                if agent.queue.front().is_some_and(|h| h.attempts > cfg.phy.max_attempts) {
                    let task = agent.queue.pop_front().expect("front exists");
                    resolved[i].push(Self::failed(&task, cfg, agent.last_sinr_db));
                }
            }
            for _ in 0..cfg.n_devices_per_agent {
                if agent.task_rng.bernoulli(cfg.task_arrival_prob) {
                    let id = agent.next_task_id;
                    agent.next_task_id += 1;
                    let sample = self.world.task.sample(&mut agent.task_rng, id);
                    agent.queue.push_back(Task {
                        sample,
                        arrival: t,
                        bits_done: 0.0,
                        attempts: 1,
                        airtime: 0.0,
                    });
                }
            }
        }

        // observation and action at decision epochs
        if t % period == 0 {
            let feats: Vec<Vec<f64>> = self
                .agents
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let intents = if cfg.control.negotiation { self.intents[i] } else { [0.0; INTENT_DIM] };
                    Observation::new(a.last_sinr_db, a.queue.len(), a.last_distortion, intents).features()
                })
                .collect();
            let shared = self.policy.shared_critic();
            let learns = cfg.paradigm.learns_policy();
            for i in 0..n {
                let summary = joint_summary(&feats[i], &feats, shared);
                let agent = &mut self.agents[i];
                if learns {
                    let (idx, lp) = self.policy.actors[i].select(&feats[i], &mut agent.action_rng, SelectMode::Sample);
                    agent.action_idx = idx;
                    agent.logprob = lp;
                    agent.action = ActionTuple::from_index(idx, self.semantic);
                } else {
                    let obs = Observation::new(agent.last_sinr_db, agent.queue.len(), agent.last_distortion, [0.0; INTENT_DIM]);
                    agent.action = heuristic_policy(&obs, self.semantic);
                    agent.action_idx = agent.action.index();
                    agent.logprob = 0.0;
                }
                agent.features = feats[i].clone();
                agent.summary = summary;
            }
            if cfg.control.negotiation {
                let planned: Vec<[f64; INTENT_DIM]> = self.agents.iter().map(|a| broadcast_intent(&a.action)).collect();
                self.intents = neighbor_intents(&planned);
            }
        }

        // allocation and interference
        let requests: Vec<u32> = self.agents.iter().map(|a| a.action.bw_request).collect();
        let alloc = allocate_bandwidth(&requests, cfg.bandwidth_units);
        let total_req: f64 = requests.iter().map(|&r| r as f64).sum();
        let rho = ((total_req - cfg.bandwidth_units as f64) / total_req).max(0.0);
        let powers: Vec<f64> = self
            .agents
            .iter()
            .zip(&alloc.grants)
            .map(|(a, &g)| if g > 0 { self.power_of(&a.action).min(cfg.phy.power_cap_w) } else { 0.0 })
            .collect();
        let total_power: f64 = powers.iter().sum();
        let n0 = noise_floor_w(cfg.snr_db, &cfg.phy);

        let mut slot_energy = 0.0;
        let mut served_pairs: Vec<TrainingPair> = Vec::new();
        for i in 0..n {
            let g = alloc.grants[i];
            if g == 0 {
                continue;
            }
            let p = powers[i];
            let others = rho * cfg.phy.cross_gain * (total_power - p);
            let fade = self.agents[i].channel.fade_db(t);
            let sinr_db = effective_sinr(p, g, others, n0, cfg.phy.coupling) + fade;
            self.agents[i].last_sinr_db = sinr_db;
            if cfg.control.negotiation {
                let side = energy_of(p, INTENT_SYMBOLS as f64 / (g as f64 * cfg.phy.symbols_per_unit_slot), 0, &cfg.phy);
                slot_energy += side;
            }
            let (mut out, energy) = if self.semantic {
                self.serve_semantic(i, t, g, p, sinr_db, &mut served_pairs)?
            } else {
                self.serve_digital(i, t, g, p, sinr_db)
            };
            slot_energy += energy;
            resolved[i].append(&mut out);
        }

        // rewards
        let mut row = SlotRow {
            t,
            actions: self.agents.iter().map(|a| a.action_idx).collect(),
            rewards: vec![0.0; n],
            grants: alloc.grants.clone(),
            util: 0.0,
            dist: 0.0,
            epen: 0.0,
            lpen: 0.0,
            j: 0.0,
            tasks: 0,
            successes: 0,
            latency_sum: 0.0,
            lat_hist: vec![0; LAT_HIST_BINS],
            energy: slot_energy,
            d_sem: None,
            tsr_window: None,
            gradnorm: None,
            codec_version: self.codec.params.version,
            k: self.slow.k_eff,
            c: self.slow.c_eff,
            overflow: alloc.overflow,
        };
        let mut d_sum = 0.0;
        for i in 0..n {
            if resolved[i].is_empty() {
                continue;
            }
            let mut r_sum = 0.0;
            let mut d_agent = 0.0;
            for res in &resolved[i] {
                let report = crate::channel::TransmissionReport {
                    payload: 0,
                    airtime_slots: 0.0,
                    energy_joules: res.energy,
                    delivered: res.success,
                    attempts: 1,
                    latency_slots: res.latency,
                    power_clamped: false,
                };
                let rec = assemble_reward(res.success, res.d_sem, &report, &self.weights);
                r_sum += rec.r;
                row.util += self.weights.alpha * rec.task_utility;
                row.dist += self.weights.beta * rec.distortion_term;
                row.epen += self.weights.lambda_e * rec.energy_penalty;
                row.lpen += self.weights.lambda_l * rec.latency_penalty;
                row.tasks += 1;
                row.successes += res.success as u64;
                row.latency_sum += res.latency;
                row.lat_hist[lat_bin(res.latency, deadline)] += 1;
                d_agent += res.d_sem;
                self.agents[i].window.push(res.success);
            }
            let k = resolved[i].len() as f64;
            row.rewards[i] = r_sum / k;
            self.agents[i].last_distortion = d_agent / k;
            self.agents[i].period_tasks += resolved[i].len() as u64;
            self.agents[i].period_successes += resolved[i].iter().filter(|r| r.success).count() as u64;
            d_sum += d_agent;
        }
        row.j = row.util - row.dist - row.epen - row.lpen;
        if row.tasks > 0 {
            row.d_sem = Some(d_sum / row.tasks as f64);
        }
        self.update_tsr_window(row.tasks, row.successes);
        row.tsr_window = (self.tsr_counts.0 > 0).then(|| self.tsr_counts.1 as f64 / self.tsr_counts.0 as f64);
        if let Some(v) = row.tsr_window {
            self.tsr_history.push_back(v);
            while self.tsr_history.len() > self.cfg.stop.tsr_window {
                self.tsr_history.pop_front();
            }
        }

        // fast loop
        if cfg.paradigm.learns_policy() {
            for i in 0..n {
                let a = &mut self.agents[i];
                let tr = Transition {
                    features: a.features.clone(),
                    action: a.action_idx,
                    logprob: a.logprob,
                    reward: row.rewards[i],
                    summary: a.summary.clone(),
                };
                a.recent.push_back(tr.clone());
                while a.recent.len() > cfg.probe_batch {
                    a.recent.pop_front();
                }
                a.traj.push(tr);
            }
            if (t + 1) % period == 0 {
                let trajs: Vec<Vec<Transition>> = self.agents.iter_mut().map(|a| std::mem::take(&mut a.traj)).collect();
                let (eta, _) = step_sizes(&cfg.schedule, t);
                match fast_update(&self.policy, &trajs, eta, &cfg.control) {
                    Ok(p) => self.policy = p,
                    Err(ControlError::NonFiniteGradient) => {
                        tracing::warn!(t, "fast update rejected");
                    }
                    Err(e) => tracing::debug!(t, error = %e, "fast update skipped"),
                }
            }
        }

        // slow loop
        if self.semantic {
            self.slow.buffer.extend(served_pairs);
            while self.slow.buffer.len() > cfg.codec.slow_batch_max {
                self.slow.buffer.pop_front();
            }
            self.slow_loop(t)?;
        }

        // telemetry at P1
        if (t + 1) % cfg.p1_period == 0 {
            self.emit_telemetry(t, hooks);
        }

        // gradient-norm probe
        if (t + 1) % cfg.gradnorm_every == 0 {
            let g = self.estimate_gradnorm()?;
            if let Some(g) = g {
                self.gradnorms.push_back(g);
                while self.gradnorms.len() > GRADNORM_WINDOW {
                    self.gradnorms.pop_front();
                }
            }
            self.last_gradnorm = g;
            row.gradnorm = g;
        }

        // monitors at P1
        if let Some(m) = self.monitor.as_mut() {
            m.record_rewards(t, &row.rewards);
        }
        if self.monitor.is_some() && (t + 1) % cfg.p1_period == 0 {
            self.run_monitors(t, hooks)?;
        }
        Ok(row)
    }

    fn failed(task: &Task, cfg: &ScenarioConfig, _sinr: f64) -> Resolved {
        let _ = task;
        Resolved {
            success: false,
            d_sem: MAX_DISTORTION,
            latency: cfg.latency_budget_slots as f64 + cfg.phy.undelivered_penalty_slots,
            energy: 0.0,
        }
    }

    fn serve_semantic(
        &mut self,
        i: usize,
        t: u64,
        g: u32,
        p: f64,
        sinr_db: f64,
        pairs: &mut Vec<TrainingPair>,
    ) -> Result<(Vec<Resolved>, f64), EngineError> {
        let cfg = self.cfg;
        let d = self.codec.params.embed_dim;
        let token = self.agents[i].action.token_dim().unwrap_or(TOKEN_DIMS[1]);
        let plan = TokenPlan::for_budget(token, d);
        let analog_snr_db = sinr_db + linear_to_db(g as f64);
        let airtime = plan.symbols() as f64 / (g as f64 * cfg.phy.symbols_per_unit_slot);
        let shift = cfg
            .injection
            .shift_t0
            .filter(|t0| t >= *t0 && cfg.injection.shift_sigma != 0.0)
            .map(|_| {
                let s = cfg.injection.shift_sigma * self.world.drift_sigma;
                self.world.drift_direction.iter().map(|v| s * v).collect::<Vec<f64>>()
            });
        let mut served = Vec::new();
        let mut cursor = 0.0;
        while cursor + airtime <= 1.0 + 1e-12 {
            let Some(task) = self.agents[i].queue.pop_front() else {
                break;
            };
            cursor += airtime;
            let z = self.codec.params.encode(&task.sample.x)?;
            let agent = &mut self.agents[i];
            let (zr, report) = analog_transmit(&z, analog_snr_db, p, g, plan, 0, &cfg.phy, &mut agent.noise_rng);
            let e_x = self.world.reference.embed(&task.sample.x);
            let e_hat = self.codec.embed_decoded(&zr.z);
            let dist = cosine_distortion(&e_x, &e_hat).value;
            let predicted = nearest_class(&e_hat, self.world.reference.class_means_embedded());
            let latency = (t - task.arrival) as f64 + cursor;
            served.push(Resolved {
                success: predicted == task.sample.label,
                d_sem: dist,
                latency,
                energy: report.energy_joules,
            });
            agent.last_task_id = task.sample.task_id;
            let pair = match &shift {
                None => TrainingPair {
                    x: task.sample.x,
                    z_received: zr.z,
                    active_dims: plan.sent_dims,
                },
                Some(delta) => {
                    let xs: Vec<f64> = task.sample.x.iter().zip(delta).map(|(a, b)| a + b).collect();
                    let zs = self.codec.params.encode(&xs)?;
                    let zr_s = (0..d)
                        .map(|k| {
                            if k < plan.sent_dims {
                                zs.z[k] + (zr.z[k] - z.z[k])
                            } else {
                                zr.z[k]
                            }
                        })
                        .collect();
                    TrainingPair {
                        x: task.sample.x,
                        z_received: zr_s,
                        active_dims: plan.sent_dims,
                    }
                }
            };
            pairs.push(pair);
        }
        let mut energy: f64 = served.iter().map(|r| r.energy).sum();
        if !served.is_empty() {
            let compute = CODEC_OPS_PER_SLOT as f64 * cfg.phy.joules_per_op;
            let share = compute / served.len() as f64;
            for r in served.iter_mut() {
                r.energy += share;
            }
            energy += compute;
        }
        Ok((served, energy))
    }

    fn serve_digital(&mut self, i: usize, t: u64, g: u32, p: f64, sinr_db: f64) -> (Vec<Resolved>, f64) {
        let cfg = self.cfg;
        let payload = (cfg.codec.input_dim as u64 * cfg.phy.bits_per_dim as u64) as f64;
        let rate = shannon_bits_per_slot(g, db_to_linear(sinr_db), &cfg.phy);
        let mut served = Vec::new();
        let mut cursor = 0.0;
        let mut airtime_total = 0.0;
        let agent = &mut self.agents[i];
        while cursor < 1.0 {
            let Some(head) = agent.queue.front_mut() else {
                break;
            };
            let need = (payload - head.bits_done) / rate;
            if cursor + need <= 1.0 {
                cursor += need;
                head.airtime += need;
                airtime_total += need;
                let task = agent.queue.pop_front().expect("front exists");
                let xq = quantize(&task.sample.x, cfg.phy.bits_per_dim, cfg.phy.quant_range);
                let e_x = self.world.reference.embed(&task.sample.x);
                let e_hat = self.world.reference.embed(&xq);
                let dist = cosine_distortion(&e_x, &e_hat).value;
                let predicted = nearest_class(&e_hat, self.world.reference.class_means_embedded());
                served.push(Resolved {
                    success: predicted == task.sample.label,
                    d_sem: dist,
                    latency: (t - task.arrival) as f64 + cursor,
                    energy: energy_of(p, task.airtime, 0, &cfg.phy),
                });
                agent.last_task_id = task.sample.task_id;
            } else {
                let used = 1.0 - cursor;
                head.bits_done += used * rate;
                head.airtime += used;
                airtime_total += used;
                cursor = 1.0;
            }
        }
        (served, energy_of(p, airtime_total, 0, &cfg.phy))
    }

    fn update_tsr_window(&mut self, tasks: u64, successes: u64) {
        self.tsr_slots.push_back((tasks, successes));
        self.tsr_counts.0 += tasks;
        self.tsr_counts.1 += successes;
        while self.tsr_slots.len() > self.cfg.stop.tsr_window {
            let (a, b) = self.tsr_slots.pop_front().expect("non-empty");
            self.tsr_counts.0 -= a;
            self.tsr_counts.1 -= b;
        }
    }

    fn slow_loop(&mut self, t: u64) -> Result<(), EngineError> {
        let cfg = self.cfg;
        let host = if self.registry.is_some() { cfg.oran.slow_loop_host } else { SlowLoopHost::Engine };
        match host {
            SlowLoopHost::Engine => {
                if t + 1 < self.slow.last_slow + self.slow.k_eff {
                    return Ok(());
                }
                self.slow.last_slow = t + 1;
                if self.slow.buffer.is_empty() {
                    return Ok(());
                }
                let (eta, _) = step_sizes(&cfg.schedule, t);
                let gamma = self.slow.c_eff * eta * cfg.codec.codec_loss_weight;
                let batch: Vec<TrainingPair> = self.slow.buffer.drain(..).collect();
                let base = self.pending_codec.as_ref().unwrap_or(&self.codec.params).clone();
                let next = match slow_train_step(&base, &batch, gamma, &self.world.reference, Some(cfg.codec.max_norm), cfg.codec.grad_clip) {
                    Ok(p) => p,
                    Err(CodecError::NonFiniteGradient) => {
                        self.slow_events.push((t, "rejected: non-finite gradient".into()));
                        return Ok(());
                    }
                    Err(e) => return Err(e.into()),
                };
                if next.version == base.version {
                    return Ok(());
                }
                match self.registry.as_mut() {
                    None => self.pending_codec = Some(next),
                    Some(reg) => {
                        let v = validation_tsr(&next, &self.world.validation, &self.world.reference)?;
                        let out = reg.propose(&next, Some(v), cfg.oran.validation_margin, t);
                        if out.accepted {
                            self.pending_codec = Some(reg.active_params());
                        } else {
                            self.slow_events.push((t, format!("candidate {} rejected by validation", out.version)));
                        }
                    }
                }
            }
            SlowLoopHost::RApp => {
                if (t + 1) % cfg.p2_period != 0 || self.slow.buffer.is_empty() {
                    return Ok(());
                }
                let (eta, _) = step_sizes(&cfg.schedule, t);
                let gamma = self.slow.c_eff * eta * cfg.codec.codec_loss_weight;
                let batch: Vec<TrainingPair> = self.slow.buffer.drain(..).collect();
                let reg = self.registry.as_mut().expect("rApp host requires the registry");
                let settings = RappSettings {
                    gamma,
                    batches: (cfg.p2_period / self.slow.k_eff).max(1) as usize,
                    margin: cfg.oran.validation_margin,
                    max_norm: Some(cfg.codec.max_norm),
                    grad_clip: cfg.codec.grad_clip,
                    slot: t,
                };
                let out = rapp_cycle(reg, &batch, Some(&self.world.validation), &self.world.reference, settings)?;
                if out.accepted {
                    self.pending_codec = Some(reg.active_params());
                } else {
                    self.slow_events.push((t, format!("candidate {} rejected by validation", out.version)));
                }
            }
        }
        Ok(())
    }

    fn emit_telemetry(&mut self, t: u64, hooks: &mut dyn Hooks) {
        let p1 = self.cfg.p1_period as f64;
        for (i, a) in self.agents.iter_mut().enumerate() {
            let token = a.action.token_dim().unwrap_or(self.cfg.codec.input_dim);
            let rate = if a.period_tasks > 0 {
                a.period_successes as f64 / a.period_tasks as f64
            } else {
                0.0
            };
            let kpis = RadioKpis {
                sinr_db: a.last_sinr_db,
                delivered_rate: rate,
                queue_len: a.queue.len(),
                throughput_proxy: a.period_tasks as f64 / p1,
            };
            let rec = package_telemetry(i, t, a.last_task_id, token, a.last_confidence, &a.window, kpis);
            hooks.on_telemetry(&rec);
            self.telemetry_records += 1;
            a.period_tasks = 0;
            a.period_successes = 0;
        }
    }

    /// `Σ_i ‖∇ actor_i‖²` on each agent's recent transitions plus, for
    /// semantic paradigms, the squared codec gradient norm on fresh samples.
    fn estimate_gradnorm(&mut self) -> Result<Option<f64>, EngineError> {
        let cfg = self.cfg;
        if !cfg.paradigm.learns_policy() {
            return Ok(None);
        }
        let mut total = 0.0;
        for (i, a) in self.agents.iter().enumerate() {
            if a.recent.is_empty() {
                continue;
            }
            let batch: Vec<Transition> = a.recent.iter().cloned().collect();
            let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
            let g = discounted_returns(&rewards, 0.0);
            let critic = self.policy.critic_for(i);
            let adv: Vec<f64> = batch.iter().zip(&g).map(|(t, gk)| gk - critic.value(&t.summary)).collect();
            let grad = actor_gradient(&self.policy.actors[i], &batch, &adv, 0.0, cfg.control.ppo_clip);
            total += grad.iter().map(|v| v * v).sum::<f64>();
        }
        if self.semantic {
            let std = (1.0 / db_to_linear(cfg.snr_db)).sqrt();
            let d = self.codec.params.embed_dim;
            let items: Vec<SlowItem> = (0..cfg.probe_batch)
                .map(|k| {
                    let s = self.world.task.sample(&mut self.gradnorm_rng, k as u64);
                    let noise = (0..d).map(|_| std * self.gradnorm_rng.normal()).collect();
                    SlowItem {
                        x: s.x,
                        noise,
                        active_dims: d,
                    }
                })
                .collect();
            let (_, grad) = loss_and_gradient(&self.codec.params, &items, &self.world.reference)?;
            total += grad.norm_sq();
        }
        Ok(Some(total))
    }

    fn run_monitors(&mut self, t: u64, hooks: &mut dyn Hooks) -> Result<(), EngineError> {
        let probes = if self.semantic {
            let mut out = Vec::with_capacity(self.world.probes.len());
            for x in &self.world.probes {
                out.push(self.codec.params.encode(x)?.z);
            }
            Some(out)
        } else {
            None
        };
        let actor = self.policy.actor_vector();
        let warm = t + 1 >= self.cfg.monitor.warmup_slots;
        let m = self.monitor.as_mut().expect("monitor enabled");
        let values: MonitorValues = m.evaluate(t, probes, actor);
        let action = if warm { m.decide(t, &values) } else { ActionTaken::None };
        match action {
            ActionTaken::ThrottleK => {
                self.slow.k_eff = self.slow.k_eff.saturating_mul(2);
            }
            ActionTaken::ReduceC => {
                self.slow.c_eff *= 0.5;
            }
            ActionTaken::Rollback => {
                self.rollbacks.push(t);
                if let Some(reg) = self.registry.as_mut() {
                    if let Some(target) = reg.last_known_good() {
                        let params = reg.rollback(target, t)?;
                        self.pending_codec = Some(params);
                        self.slow.buffer.clear();
                        self.slow.last_slow = t + 1;
                    }
                }
                self.monitor.as_mut().expect("monitor enabled").reset();
            }
            ActionTaken::None | ActionTaken::Logged => {}
        }
        let row = MonitorRow {
            t,
            drift: values.drift,
            ns: values.ns,
            osc: values.osc,
            action,
        };
        hooks.on_monitor(&row);
        self.monitor_rows.push(row);
        Ok(())
    }
}

/// Confidence of the decoded reconstruction of `x` under `params`; used
/// by telemetry consumers that hold a codec snapshot.
pub fn reconstruction_confidence(params: &CodecParams, x: &[f64], reference: &ReferenceEmbedder) -> Result<f64, CodecError> {
    let z = params.encode(x)?;
    let x_hat = params.decode(&z.z)?;
    Ok(semantic_confidence(&x_hat, reference))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Paradigm;

    fn small(paradigm: Paradigm) -> ScenarioConfig {
        let mut c = ScenarioConfig::defaults_for(paradigm);
        c.horizon_slots = 300;
        c.codec.pretrain_steps = 50;
        c.n_agents = 3;
        c.n_devices_per_agent = 4;
        c
    }

    #[test]
    fn quantizer_is_midpoint_and_clamped() {
        let q = quantize(&[0.0, 10.0, -10.0], 8, 4.0);
        assert!((q[0] - 0.015625).abs() < 1e-15);
        assert!(q[1] < 4.0 && q[1] > 3.9);
        assert!(q[2] > -4.0 && q[2] < -3.9);
    }

    #[test]
    fn latency_bins() {
        assert_eq!(lat_bin(0.0, 5.0), 0);
        assert_eq!(lat_bin(0.49, 5.0), 0);
        assert_eq!(lat_bin(0.5, 5.0), 1);
        assert_eq!(lat_bin(4.99, 5.0), 9);
        assert_eq!(lat_bin(10.0, 5.0), 10);
    }

    #[test]
    fn stopping_rule_examples() {
        assert!(stopping_check(&[0.9; 500], &[0.0], 0.01, 0.05));
        let osc: Vec<f64> = (0..500).map(|i| 0.9 + if i % 2 == 0 { 0.05 } else { -0.05 }).collect();
        assert!(!stopping_check(&osc, &[0.0], 0.01, 0.05));
        assert!(!stopping_check(&[], &[0.0], 0.01, 0.05));
    }

    #[test]
    fn trran_never_changes_codec() {
        let cfg = small(Paradigm::TrRan);
        let world = World::build(&cfg).unwrap();
        let out = run(&cfg, &world, &mut NoHooks).unwrap();
        assert!(out.rows.iter().all(|r| r.codec_version == world.pretrained.version));
        assert_eq!(out.final_codec, world.pretrained);
    }

    #[test]
    fn j_identity_and_grant_budget_hold_every_slot() {
        for p in Paradigm::ALL {
            let cfg = small(p);
            let world = World::build(&cfg).unwrap();
            let out = run(&cfg, &world, &mut NoHooks).unwrap();
            for r in &out.rows {
                assert_eq!(r.j, r.util - r.dist - r.epen - r.lpen);
                assert!(r.granted_units() <= cfg.bandwidth_units as u64);
                assert!(r.rewards.iter().all(|v| v.abs() <= 5.0));
                assert_eq!(r.lat_hist.iter().sum::<u64>(), r.tasks);
            }
        }
    }

    #[test]
    fn slow_updates_are_k_periodic() {
        let mut cfg = small(Paradigm::TwoTimescale);
        cfg.schedule.k_period = 25;
        cfg.codec.codec_loss_weight = 10.0;
        let world = World::build(&cfg).unwrap();
        let out = run(&cfg, &world, &mut NoHooks).unwrap();
        let changes: Vec<u64> = out
            .rows
            .windows(2)
            .filter(|w| w[1].codec_version != w[0].codec_version)
            .map(|w| w[1].t)
            .collect();
        assert!(!changes.is_empty());
        for w in changes.windows(2) {
            assert_eq!(w[1] - w[0], 25);
        }
    }

    #[test]
    fn identical_configs_give_identical_traces() {
        let cfg = small(Paradigm::TwoTimescale);
        let world = World::build(&cfg).unwrap();
        let mut a = TraceWriter::new(Vec::new());
        let mut b = TraceWriter::new(Vec::new());
        run(&cfg, &world, &mut a).unwrap();
        run(&cfg, &world, &mut b).unwrap();
        assert_eq!(a.finish().unwrap(), b.finish().unwrap());
    }

    #[test]
    fn log_only_monitors_do_not_perturb_the_run() {
        let cfg = small(Paradigm::TwoTimescale);
        let world = World::build(&cfg).unwrap();
        let mut with = cfg.clone();
        with.monitor.enabled = true;
        with.monitor.window_delta = 20;
        with.monitor.warmup_slots = 0;
        let a = run(&cfg, &world, &mut NoHooks).unwrap();
        let b = run(&with, &world, &mut NoHooks).unwrap();
        assert_eq!(a.rows, b.rows);
        assert!(!b.monitor_rows.is_empty());
    }

    #[test]
    fn trace_rows_round_trip() {
        let cfg = small(Paradigm::SemComOnly);
        let world = World::build(&cfg).unwrap();
        let mut w = TraceWriter::new(Vec::new());
        let out = run(&cfg, &world, &mut w).unwrap();
        let text = String::from_utf8(w.finish().unwrap()).unwrap();
        let parsed: Vec<TraceRow> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let slots: Vec<SlotRow> = parsed
            .into_iter()
            .filter_map(|r| match r {
                TraceRow::Slot(s) => Some(s),
                TraceRow::Monitor(_) => None,
            })
            .collect();
        assert_eq!(slots, out.rows);
    }
}
