//! In-process O-RAN closed loop.
//!
//! Semantic telemetry packaged at the near-RT cadence, the versioned codec
//! registry with validation-gated promotion and bit-exact rollback, A1-style
//! policy records, and the non-RT rApp retrain/validate cycle.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    slow_train_step, task_outcome, CodecError, CodecParams, ReferenceEmbedder, SemanticSample,
    TrainingPair,
};

/// Version of the telemetry JSON-lines schema.
pub const TELEMETRY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum OranError {
    #[error("unknown codec version {0}")]
    UnknownVersion(u64),
    #[error("validation set missing")]
    ValidationSetMissing,
    #[error("empty trace buffer")]
    EmptyBuffer,
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Radio KPIs carried next to the semantic fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioKpis {
    pub sinr_db: f64,
    /// Fraction of tasks resolved in the last period that succeeded.
    pub delivered_rate: f64,
    pub queue_len: usize,
    /// Tasks served per slot over the last period.
    pub throughput_proxy: f64,
}

/// E2-style semantic information element plus radio KPIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub schema_version: u32,
    pub slot: u64,
    pub agent_id: usize,
    pub task_id: u64,
    pub semantic_token_size: usize,
    pub semantic_confidence: f64,
    /// Success rate over the last window of tasks; `None` before any task
    /// completes.
    pub tsr_proxy: Option<f64>,
    pub radio_kpis: RadioKpis,
}

impl TelemetryRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("telemetry serializes")
    }

    pub fn from_json(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Sliding window of task outcomes.
#[derive(Debug, Clone)]
pub struct TsrWindow {
    capacity: usize,
    outcomes: VecDeque<bool>,
    successes: usize,
}

impl TsrWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "window capacity must be >= 1");
        Self {
            capacity,
            outcomes: VecDeque::with_capacity(capacity),
            successes: 0,
        }
    }

    pub fn push(&mut self, success: bool) {
        if self.outcomes.len() == self.capacity {
            if self.outcomes.pop_front() == Some(true) {
                self.successes -= 1;
            }
        }
        self.outcomes.push_back(success);
        if success {
            self.successes += 1;
        }
    }

    pub fn value(&self) -> Option<f64> {
        (!self.outcomes.is_empty()).then(|| self.successes as f64 / self.outcomes.len() as f64)
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }
}

/// Build one telemetry record.
pub fn package_telemetry(
    agent_id: usize,
    slot: u64,
    task_id: u64,
    token_size: usize,
    confidence: f64,
    window: &TsrWindow,
    radio_kpis: RadioKpis,
) -> TelemetryRecord {
    TelemetryRecord {
        schema_version: TELEMETRY_SCHEMA_VERSION,
        slot,
        agent_id,
        task_id,
        semantic_token_size: token_size,
        semantic_confidence: confidence,
        tsr_proxy: window.value(),
        radio_kpis,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryStatus {
    Candidate,
    Active,
    RolledBack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistryEntry {
    pub version: u64,
    pub parent_version: u64,
    /// Serialized codec checkpoint.
    pub codec_bytes: Vec<u8>,
    /// SHA-256 of `codec_bytes`, hex.
    pub hash: String,
    pub validation_tsr: Option<f64>,
    pub status: EntryStatus,
    pub created_slot: u64,
}

/// Policy pushed to the near-RT side when a codec version becomes active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct A1Policy {
    pub target_codec_version: u64,
    /// `(alpha, beta, lambda_e, lambda_l)`.
    pub reward_weights: [f64; 4],
    pub issued_slot: u64,
    pub effective_from_slot: u64,
}

/// One append-only audit log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub slot: u64,
    pub event: String,
    pub version: u64,
    pub hash: String,
}

/// Result of submitting a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalOutcome {
    pub version: u64,
    pub accepted: bool,
}

/// Versioned codec store with exactly one active entry.
#[derive(Debug, Clone)]
pub struct ModelRegistry {
    entries: BTreeMap<u64, ModelRegistryEntry>,
    active: u64,
    reward_weights: [f64; 4],
    audit: Vec<AuditEvent>,
    policies: Vec<A1Policy>,
}

fn bytes_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

impl ModelRegistry {
    /// Registry whose only entry, `initial`, is active.
    pub fn new(initial: &CodecParams, validation_tsr: Option<f64>, reward_weights: [f64; 4], slot: u64) -> Self {
        let bytes = initial.to_bytes();
        let hash = bytes_hash(&bytes);
        let entry = ModelRegistryEntry {
            version: initial.version,
            parent_version: initial.parent_version,
            codec_bytes: bytes,
            hash: hash.clone(),
            validation_tsr,
            status: EntryStatus::Active,
            created_slot: slot,
        };
        let mut entries = BTreeMap::new();
        entries.insert(initial.version, entry);
        Self {
            entries,
            active: initial.version,
            reward_weights,
            audit: vec![AuditEvent {
                slot,
                event: "register_active".into(),
                version: initial.version,
                hash,
            }],
            policies: Vec::new(),
        }
    }

    pub fn active_version(&self) -> u64 {
        self.active
    }

    pub fn active_entry(&self) -> &ModelRegistryEntry {
        &self.entries[&self.active]
    }

    pub fn active_params(&self) -> CodecParams {
        CodecParams::from_bytes(&self.active_entry().codec_bytes).expect("registry holds valid checkpoints")
    }

    pub fn entry(&self, version: u64) -> Option<&ModelRegistryEntry> {
        self.entries.get(&version)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ModelRegistryEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_active(&self) -> usize {
        self.entries.values().filter(|e| e.status == EntryStatus::Active).count()
    }

    pub fn audit(&self) -> &[AuditEvent] {
        &self.audit
    }

    pub fn a1_policies(&self) -> &[A1Policy] {
        &self.policies
    }

    /// Latest A1 policy in force at `slot`.
    pub fn policy_in_force(&self, slot: u64) -> Option<&A1Policy> {
        self.policies.iter().rev().find(|p| p.effective_from_slot <= slot)
    }

    fn log(&mut self, slot: u64, event: &str, version: u64) {
        let hash = self.entries.get(&version).map(|e| e.hash.clone()).unwrap_or_default();
        self.audit.push(AuditEvent {
            slot,
            event: event.into(),
            version,
            hash,
        });
    }

    fn activate(&mut self, version: u64, demoted: EntryStatus, slot: u64) {
        let old = self.active;
        if let Some(e) = self.entries.get_mut(&old) {
            e.status = demoted;
        }
        self.entries.get_mut(&version).expect("version exists").status = EntryStatus::Active;
        self.active = version;
        self.policies.push(A1Policy {
            target_codec_version: version,
            reward_weights: self.reward_weights,
            issued_slot: slot,
            effective_from_slot: slot + 1,
        });
    }

    /// Register `candidate` under the next free version with the active
    /// entry as parent. It becomes active when its validation TSR is at
    /// least the active one's minus `margin` (or either is unavailable);
    /// otherwise it is stored as a candidate.
    pub fn propose(&mut self, candidate: &CodecParams, validation_tsr: Option<f64>, margin: f64, slot: u64) -> ProposalOutcome {
        let version = self.entries.keys().next_back().copied().unwrap_or(0) + 1;
        let mut c = candidate.clone();
        c.version = version;
        c.parent_version = self.active;
        let bytes = c.to_bytes();
        let hash = bytes_hash(&bytes);
        let accepted = match (validation_tsr, self.active_entry().validation_tsr) {
            (Some(v), Some(a)) => v >= a - margin,
            _ => true,
        };
        self.entries.insert(
            version,
            ModelRegistryEntry {
                version,
                parent_version: self.active,
                codec_bytes: bytes,
                hash,
                validation_tsr,
                status: EntryStatus::Candidate,
                created_slot: slot,
            },
        );
        self.log(slot, "propose", version);
        if accepted {
            self.activate(version, EntryStatus::Candidate, slot);
            self.log(slot, "accept", version);
        } else {
            self.log(slot, "reject", version);
        }
        ProposalOutcome { version, accepted }
    }

    /// Make `to_version` active and mark the previously active entry
    /// rolled back. Returns the restored parameters, bit-identical to the
    /// stored checkpoint.
    pub fn rollback(&mut self, to_version: u64, slot: u64) -> Result<CodecParams, OranError> {
        if !self.entries.contains_key(&to_version) {
            return Err(OranError::UnknownVersion(to_version));
        }
        if to_version == self.active {
            self.log(slot, "rollback_noop", to_version);
        } else {
            self.activate(to_version, EntryStatus::RolledBack, slot);
            self.log(slot, "rollback", to_version);
        }
        Ok(self.active_params())
    }

    /// Best inactive, non-rolled-back version by validation TSR, newest on
    /// ties.
    pub fn last_known_good(&self) -> Option<u64> {
        let mut best: Option<(f64, u64)> = None;
        for e in self.entries.values() {
            if e.status != EntryStatus::Candidate {
                continue;
            }
            let v = e.validation_tsr.unwrap_or(f64::NEG_INFINITY);
            if best.is_none_or(|(bv, _)| v >= bv) {
                best = Some((v, e.version));
            }
        }
        best.map(|(_, v)| v)
    }
}

/// Success rate of `params` on `validation` through a noiseless channel.
pub fn validation_tsr(params: &CodecParams, validation: &[SemanticSample], reference: &ReferenceEmbedder) -> Result<f64, CodecError> {
    if validation.is_empty() {
        return Ok(0.0);
    }
    let mut ok = 0usize;
    for s in validation {
        let z = params.encode(&s.x)?;
        let x_hat = params.decode(&z.z)?;
        if task_outcome(&x_hat, reference, s.label).success {
            ok += 1;
        }
    }
    Ok(ok as f64 / validation.len() as f64)
}

/// Inputs of one rApp cycle.
#[derive(Debug, Clone, Copy)]
pub struct RappSettings {
    pub gamma: f64,
    /// Number of slow steps; the buffer is split into this many batches.
    pub batches: usize,
    pub margin: f64,
    pub max_norm: Option<f64>,
    pub grad_clip: Option<f64>,
    pub slot: u64,
}

/// Retrain a clone of the active codec on the trace buffer, validate it,
/// and submit it to the registry.
pub fn rapp_cycle(
    registry: &mut ModelRegistry,
    buffer: &[TrainingPair],
    validation: Option<&[SemanticSample]>,
    reference: &ReferenceEmbedder,
    settings: RappSettings,
) -> Result<ProposalOutcome, OranError> {
    let validation = validation.filter(|v| !v.is_empty()).ok_or(OranError::ValidationSetMissing)?;
    if buffer.is_empty() {
        return Err(OranError::EmptyBuffer);
    }
    let mut params = registry.active_params();
    let n = settings.batches.clamp(1, buffer.len());
    let size = buffer.len().div_ceil(n);
    for batch in buffer.chunks(size) {
        params = slow_train_step(&params, batch, settings.gamma, reference, settings.max_norm, settings.grad_clip)?;
    }
    let v = validation_tsr(&params, validation, reference)?;
    Ok(registry.propose(&params, Some(v), settings.margin, settings.slot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;

    fn codec(seed: u64) -> CodecParams {
        let mut rng = SimRng::new(seed, 3);
        let mut p = CodecParams::init(8, 4, &mut rng);
        p.version = 1;
        p
    }

    fn registry() -> ModelRegistry {
        ModelRegistry::new(&codec(1), Some(0.9), [1.0, 1.0, 0.1, 0.1], 0)
    }

    #[test]
    fn better_candidate_is_promoted() {
        let mut r = registry();
        let out = r.propose(&codec(2), Some(0.95), 0.01, 10);
        assert!(out.accepted);
        assert_eq!(out.version, 2);
        assert_eq!(r.active_version(), 2);
        assert_eq!(r.active_params().parent_version, 1);
        assert_eq!(r.count_active(), 1);
    }

    #[test]
    fn worse_candidate_stays_candidate() {
        let mut r = registry();
        let out = r.propose(&codec(2), Some(0.85), 0.01, 10);
        assert!(!out.accepted);
        assert_eq!(r.active_version(), 1);
        assert_eq!(r.entry(2).unwrap().status, EntryStatus::Candidate);
    }

    #[test]
    fn rollback_restores_recorded_bytes() {
        let mut r = registry();
        let h1 = r.entry(1).unwrap().hash.clone();
        for s in 2..5 {
            r.propose(&codec(s), Some(0.95), 0.01, s * 10);
        }
        assert_eq!(r.active_version(), 4);
        let p = r.rollback(1, 100).unwrap();
        assert_eq!(r.active_version(), 1);
        assert_eq!(bytes_hash(&p.to_bytes()), h1);
        assert_eq!(p, codec(1));
        assert_eq!(r.entry(4).unwrap().status, EntryStatus::RolledBack);
    }

    #[test]
    fn rollback_to_active_is_noop() {
        let mut r = registry();
        let before = r.entry(1).unwrap().clone();
        r.rollback(1, 5).unwrap();
        assert_eq!(r.entry(1).unwrap(), &before);
        assert_eq!(r.audit().last().unwrap().event, "rollback_noop");
        assert_eq!(r.rollback(9, 5), Err(OranError::UnknownVersion(9)));
    }

    #[test]
    fn a1_policy_takes_effect_next_slot() {
        let mut r = registry();
        r.propose(&codec(2), Some(0.95), 0.01, 10);
        assert!(r.policy_in_force(10).is_none());
        assert_eq!(r.policy_in_force(11).unwrap().target_codec_version, 2);
    }

    #[test]
    fn last_known_good_prefers_best_validation() {
        let mut r = registry();
        r.propose(&codec(2), Some(0.92), 0.01, 10);
        r.propose(&codec(3), Some(0.915), 0.01, 20);
        assert_eq!(r.active_version(), 3);
        assert_eq!(r.last_known_good(), Some(2));
    }

    #[test]
    fn telemetry_fields_and_cold_start() {
        let mut w = TsrWindow::new(100);
        let kpis = RadioKpis {
            sinr_db: 7.5,
            delivered_rate: 0.9,
            queue_len: 3,
            throughput_proxy: 12.0,
        };
        let cold = package_telemetry(0, 10, 1, 8, 0.93, &w, kpis);
        assert_eq!(cold.tsr_proxy, None);
        for i in 0..100 {
            w.push(i < 88);
        }
        let rec = package_telemetry(2, 20, 7, 8, 0.93, &w, kpis);
        assert_eq!((rec.semantic_token_size, rec.semantic_confidence), (8, 0.93));
        assert!((rec.tsr_proxy.unwrap() - 0.88).abs() < 1e-15);
        assert_eq!(TelemetryRecord::from_json(&rec.to_json()).unwrap(), rec);
    }

    #[test]
    fn tsr_window_slides() {
        let mut w = TsrWindow::new(3);
        for s in [true, true, false, false] {
            w.push(s);
        }
        assert_eq!(w.len(), 3);
        assert!((w.value().unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rapp_requires_validation_set() {
        let mut r = registry();
        let mut rng = SimRng::new(1, 2);
        let reference = ReferenceEmbedder::new(
            ReferenceEmbedder::random_projection(4, 8, &mut rng),
            4,
            8,
            vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]],
        )
        .unwrap();
        let pair = TrainingPair {
            x: vec![0.5; 8],
            z_received: vec![0.1; 4],
            active_dims: 4,
        };
        let settings = RappSettings {
            gamma: 0.1,
            batches: 1,
            margin: 0.01,
            max_norm: None,
            grad_clip: None,
            slot: 500,
        };
        assert_eq!(
            rapp_cycle(&mut r, &[pair], None, &reference, settings),
            Err(OranError::ValidationSetMissing)
        );
    }
}
