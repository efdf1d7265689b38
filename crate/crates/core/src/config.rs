//! Scenario configuration, loop schedules and the slot clock.
//!
//! Configs are flat UTF-8 `key = value` files with `#` comments. Every key
//! has a default (some depend on the paradigm), unknown keys are rejected,
//! and the fully resolved config is rendered back into the same format for
//! output headers. The key table is in the repository README.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation failed: {0}")]
    Validation(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Validation(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Paradigm {
    TrRan,
    AiORan,
    SemComOnly,
    TwoTimescale,
}

impl Paradigm {
    pub const ALL: [Paradigm; 4] = [
        Paradigm::TrRan,
        Paradigm::AiORan,
        Paradigm::SemComOnly,
        Paradigm::TwoTimescale,
    ];

    /// Analog semantic transport with a learned codec.
    pub fn is_semantic(self) -> bool {
        matches!(self, Paradigm::SemComOnly | Paradigm::TwoTimescale)
    }

    pub fn learns_policy(self) -> bool {
        !matches!(self, Paradigm::TrRan)
    }

    /// Shared centralized critic (CTDE) rather than independent learners.
    pub fn shares_critic(self) -> bool {
        matches!(self, Paradigm::AiORan | Paradigm::TwoTimescale)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::TrRan => "TrRan",
            Paradigm::AiORan => "AiORan",
            Paradigm::SemComOnly => "SemComOnly",
            Paradigm::TwoTimescale => "TwoTimescale",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn normalize_token(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

impl FromStr for Paradigm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match normalize_token(s).as_str() {
            "trran" => Ok(Paradigm::TrRan),
            "aioran" => Ok(Paradigm::AiORan),
            "semcomonly" => Ok(Paradigm::SemComOnly),
            "twotimescale" => Ok(Paradigm::TwoTimescale),
            _ => Err(format!("unknown paradigm '{s}'")),
        }
    }
}

/// Semantic abstraction level of the transported representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SemanticLevel {
    L0,
    L1,
    L2,
    L3,
}

impl FromStr for SemanticLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match normalize_token(s).as_str() {
            "l0" => Ok(SemanticLevel::L0),
            "l1" => Ok(SemanticLevel::L1),
            "l2" => Ok(SemanticLevel::L2),
            "l3" => Ok(SemanticLevel::L3),
            _ => Err(format!("unknown semantic level '{s}'")),
        }
    }
}

impl fmt::Display for SemanticLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Where the fast-loop controller runs; selects its decision period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    /// At the base station / UE, every slot.
    P0,
    /// Near-RT RIC, every `p1_period` slots.
    P1,
    /// Non-RT RIC, every `p2_period` slots.
    P2,
}

impl FromStr for Placement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match normalize_token(s).as_str() {
            "p0" => Ok(Placement::P0),
            "p1" => Ok(Placement::P1),
            "p2" => Ok(Placement::P2),
            _ => Err(format!("unknown placement '{s}'")),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Fast-loop base step size.
    pub eta0: f64,
    /// Decay exponent, in (0.5, 1].
    pub decay_p: f64,
    /// Slow/fast step ratio `c`.
    pub c_ratio: f64,
    /// Semantic update period `K` in slots.
    pub k_period: u64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(invalid("eta0 must be > 0"));
        }
        if !(self.decay_p > 0.5 && self.decay_p <= 1.0) {
            return Err(invalid("decay_p must lie in (0.5, 1]"));
        }
        if !(self.c_ratio > 0.0 && self.c_ratio <= 1.0) {
            return Err(invalid("c_ratio must lie in (0, 1]"));
        }
        if self.k_period == 0 {
            return Err(invalid("k_period must be >= 1"));
        }
        Ok(())
    }
}

/// Fast and slow step sizes at slot `t`: `eta_t = eta0 / (1 + t)^p`,
/// `gamma_t = c * eta_t`.
pub fn step_sizes(schedule: &ScheduleConfig, t: u64) -> (f64, f64) {
    let eta = schedule.eta0 / (1.0 + t as f64).powf(schedule.decay_p);
    (eta, schedule.c_ratio * eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MonitorAction {
    LogOnly,
    ThrottleK,
    ReduceC,
    Rollback,
}

impl FromStr for MonitorAction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match normalize_token(s).as_str() {
            "logonly" => Ok(MonitorAction::LogOnly),
            "throttlek" => Ok(MonitorAction::ThrottleK),
            "reducec" => Ok(MonitorAction::ReduceC),
            "rollback" => Ok(MonitorAction::Rollback),
            _ => Err(format!("unknown monitor action '{s}'")),
        }
    }
}

impl fmt::Display for MonitorAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub enabled: bool,
    /// Comparison window in slots.
    pub window_delta: u64,
    /// Drift threshold.
    pub eps1: f64,
    /// Reward non-stationarity threshold, nats.
    pub eps2: f64,
    /// Policy oscillation threshold.
    pub eps3: f64,
    pub histogram_bins: usize,
    pub laplace_alpha: f64,
    /// Strongest mitigation the controller may apply.
    pub action: MonitorAction,
    /// Consecutive breaches required before a rollback.
    pub persistence: u32,
    /// Checks are skipped before this slot.
    pub warmup_slots: u64,
    pub probe_count: usize,
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.window_delta == 0 {
            return Err(invalid("window_delta must be >= 1"));
        }
        if !(self.eps1 > 0.0 && self.eps2 > 0.0 && self.eps3 > 0.0) {
            return Err(invalid("monitor thresholds eps1, eps2, eps3 must be > 0"));
        }
        if self.histogram_bins < 2 {
            return Err(invalid("histogram_bins must be >= 2"));
        }
        if self.laplace_alpha < 0.0 {
            return Err(invalid("laplace_alpha must be >= 0"));
        }
        if self.persistence == 0 {
            return Err(invalid("monitor_persistence must be >= 1"));
        }
        if self.probe_count == 0 {
            return Err(invalid("probe_count must be >= 1"));
        }
        Ok(())
    }
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            window_delta: 200,
            eps1: 0.05,
            eps2: 0.1,
            eps3: 0.2,
            histogram_bins: 16,
            laplace_alpha: 0.5,
            action: MonitorAction::LogOnly,
            persistence: 3,
            warmup_slots: 2_000,
            probe_count: 32,
        }
    }
}

/// Radio and energy constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhyConfig {
    pub slot_seconds: f64,
    pub unit_bw_hz: f64,
    /// Analog channel uses per bandwidth unit per slot.
    pub symbols_per_unit_slot: f64,
    pub fading_std_db: f64,
    pub block_length_slots: u64,
    pub max_attempts: u32,
    pub joules_per_op: f64,
    pub power_cap_w: f64,
    /// Scalar interference coupling between agents.
    pub coupling: f64,
    /// Fraction of another agent's power that leaks into a link when
    /// requests overflow the bandwidth budget.
    pub cross_gain: f64,
    /// Raw-sample quantization for the bit-centric payload.
    pub bits_per_dim: u32,
    pub quant_range: f64,
    /// Extra latency charged to undelivered or expired tasks.
    pub undelivered_penalty_slots: f64,
}

impl Default for PhyConfig {
    fn default() -> Self {
        Self {
            slot_seconds: 1e-3,
            unit_bw_hz: 5e5,
            symbols_per_unit_slot: 500.0,
            fading_std_db: 4.0,
            block_length_slots: 10,
            max_attempts: 8,
            joules_per_op: 1e-5,
            power_cap_w: 0.2,
            coupling: 0.05,
            cross_gain: 0.01,
            bits_per_dim: 8,
            quant_range: 4.0,
            undelivered_penalty_slots: 5.0,
        }
    }
}

impl PhyConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("slot_seconds", self.slot_seconds),
            ("unit_bw_hz", self.unit_bw_hz),
            ("symbols_per_unit_slot", self.symbols_per_unit_slot),
            ("power_cap_w", self.power_cap_w),
            ("quant_range", self.quant_range),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be > 0")));
            }
        }
        if self.fading_std_db < 0.0 {
            return Err(invalid("fading_std_db must be >= 0"));
        }
        if self.block_length_slots == 0 || self.max_attempts == 0 || self.bits_per_dim == 0 {
            return Err(invalid(
                "block_length_slots, max_attempts and bits_per_dim must be >= 1",
            ));
        }
        if self.joules_per_op < 0.0
            || self.coupling < 0.0
            || self.cross_gain < 0.0
            || self.undelivered_penalty_slots < 0.0
        {
            return Err(invalid(
                "joules_per_op, coupling, cross_gain and undelivered_penalty_slots must be >= 0",
            ));
        }
        Ok(())
    }
}

/// Synthetic task and codec geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub reference_dim: usize,
    pub n_classes: usize,
    pub sample_sigma: f64,
    /// Norm of every embedded class mean.
    pub class_radius: f64,
    /// Spread of class means outside the reference subspace.
    pub nuisance_std: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_snr_db: f64,
    /// Frobenius-norm cap applied to each codec matrix after every update.
    pub max_norm: f64,
    /// Weight on the online codec loss; the slow step is
    /// `gamma_t · codec_loss_weight · grad`.
    pub codec_loss_weight: f64,
    /// Most recent training pairs kept for one slow step.
    pub slow_batch_max: usize,
    /// Euclidean cap on each online codec gradient; `None` disables it.
    pub grad_clip: Option<f64>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            embed_dim: 8,
            reference_dim: 8,
            n_classes: 8,
            sample_sigma: 0.5,
            class_radius: 2.5,
            nuisance_std: 1.0,
            pretrain_steps: 1_500,
            pretrain_batch: 32,
            pretrain_lr: 0.5,
            pretrain_snr_db: 10.0,
            max_norm: 8.0,
            codec_loss_weight: 1.0,
            slow_batch_max: 1_024,
            grad_clip: None,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.input_dim == 0 || self.reference_dim == 0 || self.n_classes < 2 {
            return Err(invalid(
                "input_dim and reference_dim must be >= 1, n_classes >= 2",
            ));
        }
        if ![4, 8, 16].contains(&self.embed_dim) {
            return Err(invalid("embed_dim must be one of 4, 8, 16"));
        }
        if self.reference_dim > self.input_dim {
            return Err(invalid("reference_dim must not exceed input_dim"));
        }
        if !(self.sample_sigma > 0.0 && self.class_radius > 0.0 && self.max_norm > 0.0) {
            return Err(invalid("sample_sigma, class_radius, max_norm must be > 0"));
        }
        if self.nuisance_std < 0.0 || self.pretrain_lr < 0.0 {
            return Err(invalid("nuisance_std and pretrain_lr must be >= 0"));
        }
        if !(self.codec_loss_weight >= 0.0 && self.codec_loss_weight.is_finite()) {
            return Err(invalid("codec_loss_weight must be a nonnegative real"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(invalid("grad_clip must be > 0"));
            }
        }
        if self.pretrain_batch == 0 || self.slow_batch_max == 0 {
            return Err(invalid("pretrain_batch and slow_batch_max must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub entropy_weight: f64,
    pub ppo_clip: f64,
    pub discount: f64,
    pub ppo_epochs: u32,
    /// Minimum probability of any action; 0 disables the floor.
    pub explore_floor: f64,
    pub negotiation: bool,
    /// Energy normalizer for the reward penalty, joules.
    pub energy_ref_j: f64,
    pub reward_clip: f64,
    /// Critic step multiplier relative to `eta_t`.
    pub critic_scale: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            entropy_weight: 1e-2,
            ppo_clip: 0.2,
            discount: 0.99,
            ppo_epochs: 1,
            explore_floor: 1e-4,
            negotiation: false,
            energy_ref_j: 1e-5,
            reward_clip: 5.0,
            critic_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlowLoopHost {
    /// Slow steps applied in-engine every `K` slots.
    Engine,
    /// Slow steps batched into validated rApp cycles every `p2_period` slots.
    RApp,
}

impl FromStr for SlowLoopHost {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match normalize_token(s).as_str() {
            "engine" => Ok(SlowLoopHost::Engine),
            "rapp" => Ok(SlowLoopHost::RApp),
            _ => Err(format!("unknown slow loop host '{s}'")),
        }
    }
}

impl fmt::Display for SlowLoopHost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OranConfig {
    pub enabled: bool,
    pub slow_loop_host: SlowLoopHost,
    pub validation_size: usize,
    pub validation_margin: f64,
    pub telemetry_window: usize,
}

impl Default for OranConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            slow_loop_host: SlowLoopHost::Engine,
            validation_size: 512,
            validation_margin: 0.01,
            telemetry_window: 100,
        }
    }
}

/// Distribution shift applied to the slow-loop training stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub shift_t0: Option<u64>,
    /// Shift magnitude in units of `sample_sigma`.
    pub shift_sigma: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            shift_t0: None,
            shift_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopConfig {
    pub enabled: bool,
    pub tsr_window: usize,
    pub tsr_tol: f64,
    pub grad_tol: f64,
}

impl Default for StopConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            tsr_window: 500,
            tsr_tol: 0.01,
            grad_tol: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub paradigm: Paradigm,
    pub semantic_level: SemanticLevel,
    pub placement: Placement,
    pub p1_period: u64,
    pub p2_period: u64,
    pub n_agents: usize,
    pub n_devices_per_agent: usize,
    /// Per-device task arrival probability per slot.
    pub task_arrival_prob: f64,
    pub snr_db: f64,
    pub bandwidth_units: u32,
    pub energy_budget_j: f64,
    /// Per-task deadline `L`, slots.
    pub latency_budget_slots: u32,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_e: f64,
    pub lambda_l: f64,
    pub horizon_slots: u64,
    pub seed: u64,
    /// Fixed transmit power replacing the actor's choice (operating-point sweeps).
    pub power_level_w: Option<f64>,
    /// Allows `c_ratio > 0.5` for the two-timescale paradigm (ablation arms).
    pub ablation: bool,
    pub gradnorm_every: u64,
    pub probe_batch: usize,
    pub schedule: ScheduleConfig,
    pub monitor: MonitorConfig,
    pub phy: PhyConfig,
    pub codec: CodecConfig,
    pub control: ControlConfig,
    pub oran: OranConfig,
    pub injection: InjectionConfig,
    pub stop: StopConfig,
}

impl ScenarioConfig {
    /// Defaults for `paradigm`, before any file overrides.
    pub fn defaults_for(paradigm: Paradigm) -> Self {
        let (c_ratio, k_period) = match paradigm {
            Paradigm::SemComOnly => (1.0, 1),
            _ => (0.1, 50),
        };
        let semantic_level = match paradigm {
            Paradigm::TrRan | Paradigm::AiORan => SemanticLevel::L0,
            Paradigm::SemComOnly | Paradigm::TwoTimescale => SemanticLevel::L2,
        };
        let beta = match paradigm {
            Paradigm::AiORan => 0.0,
            _ => 1.0,
        };
        Self {
            paradigm,
            semantic_level,
            placement: Placement::P0,
            p1_period: 10,
            p2_period: 500,
            n_agents: 5,
            n_devices_per_agent: 15,
            task_arrival_prob: 1.0,
            snr_db: 10.0,
            bandwidth_units: 10,
            energy_budget_j: 10.0,
            latency_budget_slots: 5,
            alpha: 1.0,
            beta,
            lambda_e: 0.1,
            lambda_l: 0.1,
            horizon_slots: 20_000,
            seed: 1,
            power_level_w: None,
            ablation: false,
            gradnorm_every: 100,
            probe_batch: 64,
            schedule: ScheduleConfig {
                eta0: 0.5,
                decay_p: 0.6,
                c_ratio,
                k_period,
            },
            monitor: MonitorConfig::default(),
            phy: PhyConfig::default(),
            codec: CodecConfig::default(),
            control: ControlConfig {
                negotiation: paradigm == Paradigm::TwoTimescale,
                ..ControlConfig::default()
            },
            oran: OranConfig::default(),
            injection: InjectionConfig::default(),
            stop: StopConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_agents == 0 {
            return Err(invalid("n_agents must be >= 1"));
        }
        if self.n_devices_per_agent == 0 {
            return Err(invalid("n_devices_per_agent must be >= 1"));
        }
        if self.bandwidth_units == 0 {
            return Err(invalid("bandwidth_units must be >= 1"));
        }
        if self.horizon_slots == 0 {
            return Err(invalid("horizon_slots must be >= 1"));
        }
        if self.latency_budget_slots == 0 {
            return Err(invalid("latency_budget_slots must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.task_arrival_prob) {
            return Err(invalid("task_arrival_prob must lie in [0, 1]"));
        }
        if !self.snr_db.is_finite() {
            return Err(invalid("snr_db must be finite"));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_e", self.lambda_e),
            ("lambda_l", self.lambda_l),
            ("energy_budget_j", self.energy_budget_j),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be a nonnegative real")));
            }
        }
        if !(1 <= self.p1_period && self.p1_period <= self.p2_period) {
            return Err(invalid(
                "placement periods must satisfy P0=1 <= p1_period <= p2_period",
            ));
        }
        match self.paradigm {
            Paradigm::TrRan if self.semantic_level != SemanticLevel::L0 => {
                return Err(invalid("paradigm TrRan requires semantic_level L0"));
            }
            Paradigm::SemComOnly | Paradigm::TwoTimescale
                if self.semantic_level < SemanticLevel::L1 =>
            {
                return Err(invalid(format!(
                    "paradigm {} requires semantic_level >= L1",
                    self.paradigm
                )));
            }
            _ => {}
        }
        self.schedule.validate()?;
        if self.paradigm == Paradigm::TwoTimescale && self.schedule.c_ratio > 0.5 && !self.ablation
        {
            return Err(invalid(
                "paradigm TwoTimescale requires c_ratio <= 0.5 (set ablation = true for coupled arms)",
            ));
        }
        if let Some(p) = self.power_level_w {
            if !(p > 0.0) {
                return Err(invalid("power_level_w must be > 0"));
            }
        }
        if self.gradnorm_every == 0 || self.probe_batch == 0 {
            return Err(invalid("gradnorm_every and probe_batch must be >= 1"));
        }
        if self.control.negotiation && self.semantic_level < SemanticLevel::L2 {
            return Err(invalid(
                "negotiation exchanges L2 intents and requires semantic_level >= L2",
            ));
        }
        if self.oran.validation_size == 0 || self.oran.telemetry_window == 0 {
            return Err(invalid("validation_size and telemetry_window must be >= 1"));
        }
        if self.stop.tsr_window == 0 {
            return Err(invalid("stop_tsr_window must be >= 1"));
        }
        self.monitor.validate()?;
        self.phy.validate()?;
        self.codec.validate()?;
        Ok(())
    }

    /// Fast-loop decision period for the configured placement.
    pub fn decision_period(&self) -> u64 {
        match self.placement {
            Placement::P0 => 1,
            Placement::P1 => self.p1_period,
            Placement::P2 => self.p2_period,
        }
    }

    /// Parse config text. `paradigm` is resolved first so that
    /// paradigm-dependent defaults apply before the remaining keys.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: idx + 1,
                    message: format!("expected 'key = value', got '{line}'"),
                });
            };
            pairs.push((idx + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut paradigm = Paradigm::TwoTimescale;
        for (line, k, v) in &pairs {
            if k == "paradigm" {
                paradigm = v.parse().map_err(|message| ConfigError::Parse {
                    line: *line,
                    message,
                })?;
            }
        }
        let mut cfg = Self::defaults_for(paradigm);
        let mut seen = std::collections::HashSet::new();
        for (line, k, v) in &pairs {
            if !seen.insert(k.clone()) {
                return Err(ConfigError::Parse {
                    line: *line,
                    message: format!("duplicate key '{k}'"),
                });
            }
            cfg.set(k, v).map_err(|message| ConfigError::Parse {
                line: *line,
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse::<T>()
                .map_err(|_| format!("invalid value '{v}' for key '{key}'"))
        }
        fn b(key: &str, v: &str) -> Result<bool, String> {
            match v.to_ascii_lowercase().as_str() {
                "true" | "on" | "yes" | "1" => Ok(true),
                "false" | "off" | "no" | "0" => Ok(false),
                _ => Err(format!("invalid boolean '{v}' for key '{key}'")),
            }
        }
        fn opt_f64(key: &str, v: &str) -> Result<Option<f64>, String> {
            if v.eq_ignore_ascii_case("none") {
                Ok(None)
            } else {
                p(key, v).map(Some)
            }
        }
        fn opt_u64(key: &str, v: &str) -> Result<Option<u64>, String> {
            if v.eq_ignore_ascii_case("none") {
                Ok(None)
            } else {
                p(key, v).map(Some)
            }
        }
        match key {
            "paradigm" => self.paradigm = v_enum(key, value)?,
            "semantic_level" => self.semantic_level = v_enum(key, value)?,
            "placement" => self.placement = v_enum(key, value)?,
            "p1_period" => self.p1_period = p(key, value)?,
            "p2_period" => self.p2_period = p(key, value)?,
            "n_agents" => self.n_agents = p(key, value)?,
            "n_devices_per_agent" => self.n_devices_per_agent = p(key, value)?,
            "task_arrival_prob" => self.task_arrival_prob = p(key, value)?,
            "snr_db" => self.snr_db = p(key, value)?,
            "bandwidth_units" => self.bandwidth_units = p(key, value)?,
            "energy_budget_j" => self.energy_budget_j = p(key, value)?,
            "latency_budget_slots" => self.latency_budget_slots = p(key, value)?,
            "alpha" => self.alpha = p(key, value)?,
            "beta" => self.beta = p(key, value)?,
            "lambda_e" => self.lambda_e = p(key, value)?,
            "lambda_l" => self.lambda_l = p(key, value)?,
            "horizon_slots" => self.horizon_slots = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "power_level_w" => self.power_level_w = opt_f64(key, value)?,
            "ablation" => self.ablation = b(key, value)?,
            "gradnorm_every" => self.gradnorm_every = p(key, value)?,
            "probe_batch" => self.probe_batch = p(key, value)?,
            "eta0" => self.schedule.eta0 = p(key, value)?,
            "decay_p" => self.schedule.decay_p = p(key, value)?,
            "c_ratio" => self.schedule.c_ratio = p(key, value)?,
            "k_period" => self.schedule.k_period = p(key, value)?,
            "monitors" => self.monitor.enabled = b(key, value)?,
            "window_delta" => self.monitor.window_delta = p(key, value)?,
            "eps1" => self.monitor.eps1 = p(key, value)?,
            "eps2" => self.monitor.eps2 = p(key, value)?,
            "eps3" => self.monitor.eps3 = p(key, value)?,
            "histogram_bins" => self.monitor.histogram_bins = p(key, value)?,
            "laplace_alpha" => self.monitor.laplace_alpha = p(key, value)?,
            "monitor_action" => self.monitor.action = v_enum(key, value)?,
            "monitor_persistence" => self.monitor.persistence = p(key, value)?,
            "monitor_warmup_slots" => self.monitor.warmup_slots = p(key, value)?,
            "probe_count" => self.monitor.probe_count = p(key, value)?,
            "slot_seconds" => self.phy.slot_seconds = p(key, value)?,
            "unit_bw_hz" => self.phy.unit_bw_hz = p(key, value)?,
            "symbols_per_unit_slot" => self.phy.symbols_per_unit_slot = p(key, value)?,
            "fading_std_db" => self.phy.fading_std_db = p(key, value)?,
            "block_length_slots" => self.phy.block_length_slots = p(key, value)?,
            "max_attempts" => self.phy.max_attempts = p(key, value)?,
            "joules_per_op" => self.phy.joules_per_op = p(key, value)?,
            "power_cap_w" => self.phy.power_cap_w = p(key, value)?,
            "coupling" => self.phy.coupling = p(key, value)?,
            "cross_gain" => self.phy.cross_gain = p(key, value)?,
            "bits_per_dim" => self.phy.bits_per_dim = p(key, value)?,
            "quant_range" => self.phy.quant_range = p(key, value)?,
            "undelivered_penalty_slots" => self.phy.undelivered_penalty_slots = p(key, value)?,
            "input_dim" => self.codec.input_dim = p(key, value)?,
            "embed_dim" => self.codec.embed_dim = p(key, value)?,
            "reference_dim" => self.codec.reference_dim = p(key, value)?,
            "n_classes" => self.codec.n_classes = p(key, value)?,
            "sample_sigma" => self.codec.sample_sigma = p(key, value)?,
            "class_radius" => self.codec.class_radius = p(key, value)?,
            "nuisance_std" => self.codec.nuisance_std = p(key, value)?,
            "pretrain_steps" => self.codec.pretrain_steps = p(key, value)?,
            "pretrain_batch" => self.codec.pretrain_batch = p(key, value)?,
            "pretrain_lr" => self.codec.pretrain_lr = p(key, value)?,
            "pretrain_snr_db" => self.codec.pretrain_snr_db = p(key, value)?,
            "max_norm" => self.codec.max_norm = p(key, value)?,
            "codec_loss_weight" => self.codec.codec_loss_weight = p(key, value)?,
            "slow_batch_max" => self.codec.slow_batch_max = p(key, value)?,
            "grad_clip" => self.codec.grad_clip = opt_f64(key, value)?,
            "entropy_weight" => self.control.entropy_weight = p(key, value)?,
            "ppo_clip" => self.control.ppo_clip = p(key, value)?,
            "discount" => self.control.discount = p(key, value)?,
            "ppo_epochs" => self.control.ppo_epochs = p(key, value)?,
            "explore_floor" => self.control.explore_floor = p(key, value)?,
            "negotiation" => self.control.negotiation = b(key, value)?,
            "energy_ref_j" => self.control.energy_ref_j = p(key, value)?,
            "reward_clip" => self.control.reward_clip = p(key, value)?,
            "critic_scale" => self.control.critic_scale = p(key, value)?,
            "oran" => self.oran.enabled = b(key, value)?,
            "slow_loop_host" => self.oran.slow_loop_host = v_enum(key, value)?,
            "validation_size" => self.oran.validation_size = p(key, value)?,
            "validation_margin" => self.oran.validation_margin = p(key, value)?,
            "telemetry_window" => self.oran.telemetry_window = p(key, value)?,
            "shift_t0" => self.injection.shift_t0 = opt_u64(key, value)?,
            "shift_sigma" => self.injection.shift_sigma = p(key, value)?,
            "stop" => self.stop.enabled = b(key, value)?,
            "stop_tsr_window" => self.stop.tsr_window = p(key, value)?,
            "stop_tsr_tol" => self.stop.tsr_tol = p(key, value)?,
            "stop_grad_tol" => self.stop.grad_tol = p(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// All resolved keys in canonical order, as `(key, value)` text pairs.
    /// `ScenarioConfig::parse` of the rendered text reproduces `self`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        fn o<T: ToString>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_else(|| "none".into())
        }
        vec![
            ("paradigm", self.paradigm.to_string()),
            ("semantic_level", self.semantic_level.to_string()),
            ("placement", self.placement.to_string()),
            ("p1_period", self.p1_period.to_string()),
            ("p2_period", self.p2_period.to_string()),
            ("n_agents", self.n_agents.to_string()),
            ("n_devices_per_agent", self.n_devices_per_agent.to_string()),
            ("task_arrival_prob", fmt_f(self.task_arrival_prob)),
            ("snr_db", fmt_f(self.snr_db)),
            ("bandwidth_units", self.bandwidth_units.to_string()),
            ("energy_budget_j", fmt_f(self.energy_budget_j)),
            ("latency_budget_slots", self.latency_budget_slots.to_string()),
            ("alpha", fmt_f(self.alpha)),
            ("beta", fmt_f(self.beta)),
            ("lambda_e", fmt_f(self.lambda_e)),
            ("lambda_l", fmt_f(self.lambda_l)),
            ("horizon_slots", self.horizon_slots.to_string()),
            ("seed", self.seed.to_string()),
            ("power_level_w", o(self.power_level_w.map(fmt_f))),
            ("ablation", self.ablation.to_string()),
            ("gradnorm_every", self.gradnorm_every.to_string()),
            ("probe_batch", self.probe_batch.to_string()),
            ("eta0", fmt_f(self.schedule.eta0)),
            ("decay_p", fmt_f(self.schedule.decay_p)),
            ("c_ratio", fmt_f(self.schedule.c_ratio)),
            ("k_period", self.schedule.k_period.to_string()),
            ("monitors", self.monitor.enabled.to_string()),
            ("window_delta", self.monitor.window_delta.to_string()),
            ("eps1", fmt_f(self.monitor.eps1)),
            ("eps2", fmt_f(self.monitor.eps2)),
            ("eps3", fmt_f(self.monitor.eps3)),
            ("histogram_bins", self.monitor.histogram_bins.to_string()),
            ("laplace_alpha", fmt_f(self.monitor.laplace_alpha)),
            ("monitor_action", self.monitor.action.to_string()),
            ("monitor_persistence", self.monitor.persistence.to_string()),
            ("monitor_warmup_slots", self.monitor.warmup_slots.to_string()),
            ("probe_count", self.monitor.probe_count.to_string()),
            ("slot_seconds", fmt_f(self.phy.slot_seconds)),
            ("unit_bw_hz", fmt_f(self.phy.unit_bw_hz)),
            ("symbols_per_unit_slot", fmt_f(self.phy.symbols_per_unit_slot)),
            ("fading_std_db", fmt_f(self.phy.fading_std_db)),
            ("block_length_slots", self.phy.block_length_slots.to_string()),
            ("max_attempts", self.phy.max_attempts.to_string()),
            ("joules_per_op", fmt_f(self.phy.joules_per_op)),
            ("power_cap_w", fmt_f(self.phy.power_cap_w)),
            ("coupling", fmt_f(self.phy.coupling)),
            ("cross_gain", fmt_f(self.phy.cross_gain)),
            ("bits_per_dim", self.phy.bits_per_dim.to_string()),
            ("quant_range", fmt_f(self.phy.quant_range)),
            (
                "undelivered_penalty_slots",
                fmt_f(self.phy.undelivered_penalty_slots),
            ),
            ("input_dim", self.codec.input_dim.to_string()),
            ("embed_dim", self.codec.embed_dim.to_string()),
            ("reference_dim", self.codec.reference_dim.to_string()),
            ("n_classes", self.codec.n_classes.to_string()),
            ("sample_sigma", fmt_f(self.codec.sample_sigma)),
            ("class_radius", fmt_f(self.codec.class_radius)),
            ("nuisance_std", fmt_f(self.codec.nuisance_std)),
            ("pretrain_steps", self.codec.pretrain_steps.to_string()),
            ("pretrain_batch", self.codec.pretrain_batch.to_string()),
            ("pretrain_lr", fmt_f(self.codec.pretrain_lr)),
            ("pretrain_snr_db", fmt_f(self.codec.pretrain_snr_db)),
            ("max_norm", fmt_f(self.codec.max_norm)),
            ("codec_loss_weight", fmt_f(self.codec.codec_loss_weight)),
            ("slow_batch_max", self.codec.slow_batch_max.to_string()),
            ("grad_clip", o(self.codec.grad_clip.map(fmt_f))),
            ("entropy_weight", fmt_f(self.control.entropy_weight)),
            ("ppo_clip", fmt_f(self.control.ppo_clip)),
            ("discount", fmt_f(self.control.discount)),
            ("ppo_epochs", self.control.ppo_epochs.to_string()),
            ("explore_floor", fmt_f(self.control.explore_floor)),
            ("negotiation", self.control.negotiation.to_string()),
            ("energy_ref_j", fmt_f(self.control.energy_ref_j)),
            ("reward_clip", fmt_f(self.control.reward_clip)),
            ("critic_scale", fmt_f(self.control.critic_scale)),
            ("oran", self.oran.enabled.to_string()),
            ("slow_loop_host", self.oran.slow_loop_host.to_string()),
            ("validation_size", self.oran.validation_size.to_string()),
            ("validation_margin", fmt_f(self.oran.validation_margin)),
            ("telemetry_window", self.oran.telemetry_window.to_string()),
            ("shift_t0", o(self.injection.shift_t0)),
            ("shift_sigma", fmt_f(self.injection.shift_sigma)),
            ("stop", self.stop.enabled.to_string()),
            ("stop_tsr_window", self.stop.tsr_window.to_string()),
            ("stop_tsr_tol", fmt_f(self.stop.tsr_tol)),
            ("stop_grad_tol", fmt_f(self.stop.grad_tol)),
        ]
    }

    /// Resolved config in file format.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Resolved config as `# `-prefixed header lines.
    pub fn header_block(&self) -> String {
        self.render()
            .lines()
            .map(|l| format!("# {l}\n"))
            .collect()
    }

    /// SHA-256 of the rendered config, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }
}

fn v_enum<T: FromStr<Err = String>>(_key: &str, v: &str) -> Result<T, String> {
    v.parse()
}

/// Shortest round-trip decimal form.
fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = ScenarioConfig::parse(
            "paradigm = TwoTimescale\nn_agents = 5\nbandwidth_units = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.paradigm, Paradigm::TwoTimescale);
        assert_eq!(cfg.n_agents, 5);
        assert_eq!(cfg.bandwidth_units, 10);
        assert_eq!(cfg.schedule.k_period, 50);
        assert_eq!(cfg.schedule.c_ratio, 0.1);
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.beta, 1.0);
        assert_eq!(cfg.lambda_e, 0.1);
        assert_eq!(cfg.lambda_l, 0.1);
        assert_eq!(cfg.semantic_level, SemanticLevel::L2);
    }

    #[test]
    fn c_ratio_is_read() {
        let cfg = ScenarioConfig::parse("paradigm = TwoTimescale\nc_ratio = 0.1\n").unwrap();
        assert_eq!(cfg.schedule.c_ratio, 0.1);
    }

    #[test]
    fn trran_requires_l0() {
        let err = ScenarioConfig::parse("paradigm = TrRan\nsemantic_level = L2\n").unwrap_err();
        match err {
            ConfigError::Validation(msg) => assert!(msg.contains("L0"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semantic_paradigms_require_l1() {
        let err =
            ScenarioConfig::parse("paradigm = SemComOnly\nsemantic_level = L0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Validation(_)));
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ScenarioConfig::parse("paradigm = TrRan\nfoo = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }));
    }

    #[test]
    fn malformed_line_rejected() {
        let err = ScenarioConfig::parse("paradigm TrRan\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }));
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg =
            ScenarioConfig::parse("# header\n\nparadigm = AiORan # trailing\nseed = 7\n").unwrap();
        assert_eq!(cfg.paradigm, Paradigm::AiORan);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.beta, 0.0);
    }

    #[test]
    fn placement_ordering_enforced() {
        let err = ScenarioConfig::parse("p1_period = 600\np2_period = 500\n").unwrap_err();
        assert!(matches!(err, ConfigError::Validation(_)));
    }

    #[test]
    fn separation_enforced_unless_ablation() {
        assert!(ScenarioConfig::parse("paradigm = TwoTimescale\nc_ratio = 1\n").is_err());
        let cfg =
            ScenarioConfig::parse("paradigm = TwoTimescale\nc_ratio = 1\nablation = true\n")
                .unwrap();
        assert_eq!(cfg.schedule.c_ratio, 1.0);
    }

    #[test]
    fn single_timescale_defaults() {
        let cfg = ScenarioConfig::parse("paradigm = SemComOnly\n").unwrap();
        assert_eq!(cfg.schedule.c_ratio, 1.0);
        assert_eq!(cfg.schedule.k_period, 1);
        assert!(!cfg.control.negotiation);
    }

    #[test]
    fn render_round_trips() {
        for p in Paradigm::ALL {
            let mut cfg = ScenarioConfig::defaults_for(p);
            cfg.snr_db = -2.5;
            cfg.power_level_w = Some(0.15);
            cfg.injection.shift_t0 = Some(1234);
            let again = ScenarioConfig::parse(&cfg.render()).unwrap();
            assert_eq!(cfg, again);
            assert_eq!(cfg.hash(), again.hash());
        }
    }

    #[test]
    fn step_sizes_at_zero_and_nine() {
        let s = ScheduleConfig {
            eta0: 0.1,
            decay_p: 1.0,
            c_ratio: 0.1,
            k_period: 1,
        };
        let (eta, gamma) = step_sizes(&s, 0);
        assert!((eta - 0.1).abs() < 1e-15 && (gamma - 0.01).abs() < 1e-15);
        let (eta, gamma) = step_sizes(&s, 9);
        assert!((eta - 0.01).abs() < 1e-15 && (gamma - 0.001).abs() < 1e-15);
    }

    #[test]
    fn ratio_is_constant() {
        let s = ScheduleConfig {
            eta0: 0.37,
            decay_p: 0.7,
            c_ratio: 0.03,
            k_period: 5,
        };
        for t in [0u64, 1, 17, 1000, 123_456] {
            let (eta, gamma) = step_sizes(&s, t);
            assert_eq!(gamma, s.c_ratio * eta);
        }
    }

    #[test]
    fn robbins_monro_partial_sums() {
        // p = 1: sum eta grows like eta0 * ln T, sum eta^2 converges.
        let s = ScheduleConfig {
            eta0: 0.1,
            decay_p: 1.0,
            c_ratio: 0.1,
            k_period: 1,
        };
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut checkpoints = Vec::new();
        for t in 0..=1_000_000u64 {
            let (eta, _) = step_sizes(&s, t);
            sum += eta;
            sum_sq += eta * eta;
            if [1_000u64, 10_000, 100_000, 1_000_000].contains(&t) {
                checkpoints.push((t, sum, sum_sq));
            }
        }
        for w in checkpoints.windows(2) {
            let (t0, s0, q0) = w[0];
            let (t1, s1, q1) = w[1];
            // each decade adds ~eta0 * ln 10 to the first sum
            let inc = s1 - s0;
            let expected = 0.1 * ((t1 as f64 + 1.0) / (t0 as f64 + 1.0)).ln();
            assert!((inc - expected).abs() < 1e-3, "{inc} vs {expected}");
            // the squared sum barely moves and stays below eta0^2 * pi^2 / 6
            assert!(q1 - q0 < 1e-5);
            assert!(q1 < 0.01 * std::f64::consts::PI.powi(2) / 6.0);
        }
    }
}
