//! Block-fading radio channel.
//!
//! Carries analog semantic tokens and digital bit payloads, and accounts
//! airtime, latency and energy. Realized SNR is the nominal value plus a
//! log-normal fade (Gaussian in dB) that is redrawn every block.

use serde::{Deserialize, Serialize};

use crate::codec::Embedding;
use crate::config::PhyConfig;
use crate::rng::SimRng;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

/// Per-link channel with lazily drawn block fades.
///
/// Fades are drawn in block order from the link's own stream, so the
/// realized-SNR sequence depends only on the seed, never on which
/// operations query it.
#[derive(Debug, Clone)]
pub struct ChannelState {
    pub snr_db_nominal: f64,
    pub fading_std_db: f64,
    pub block_length_slots: u64,
    rng: SimRng,
    fades: Vec<f64>,
}

impl ChannelState {
    pub fn new(snr_db_nominal: f64, fading_std_db: f64, block_length_slots: u64, rng: SimRng) -> Self {
        assert!(fading_std_db >= 0.0, "fading_std_db must be >= 0");
        assert!(block_length_slots >= 1, "block_length_slots must be >= 1");
        Self {
            snr_db_nominal,
            fading_std_db,
            block_length_slots,
            rng,
            fades: Vec::new(),
        }
    }

    pub fn from_config(snr_db: f64, phy: &PhyConfig, rng: SimRng) -> Self {
        Self::new(snr_db, phy.fading_std_db, phy.block_length_slots, rng)
    }

    pub fn block_of(&self, slot: u64) -> u64 {
        slot / self.block_length_slots
    }

    /// Fade of block `block`, dB.
    pub fn block_fade_db(&mut self, block: u64) -> f64 {
        let idx = block as usize;
        while self.fades.len() <= idx {
            let f = self.fading_std_db * self.rng.normal();
            self.fades.push(f);
        }
        self.fades[idx]
    }

    pub fn fade_db(&mut self, slot: u64) -> f64 {
        let b = self.block_of(slot);
        self.block_fade_db(b)
    }

    pub fn realized_snr_db(&mut self, slot: u64) -> f64 {
        self.snr_db_nominal + self.fade_db(slot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransmissionReport {
    /// Analog symbols or digital bits.
    pub payload: u64,
    pub airtime_slots: f64,
    pub energy_joules: f64,
    pub delivered: bool,
    pub attempts: u32,
    pub latency_slots: f64,
    pub power_clamped: bool,
}

/// `power · airtime · slot_seconds + ops · joules_per_op`.
pub fn energy_of(power_w: f64, airtime_slots: f64, compute_ops: u64, phy: &PhyConfig) -> f64 {
    power_w * airtime_slots * phy.slot_seconds + compute_ops as f64 * phy.joules_per_op
}

/// Clamp a requested transmit power to the UE cap.
pub fn clamp_power(power_w: f64, phy: &PhyConfig) -> (f64, bool) {
    if power_w > phy.power_cap_w {
        tracing::debug!(requested = power_w, cap = phy.power_cap_w, "transmit power clamped");
        (phy.power_cap_w, true)
    } else {
        (power_w, false)
    }
}

/// How a `d`-dimensional token is mapped onto channel symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPlan {
    /// Leading components sent; the rest are zero-filled at the receiver.
    pub sent_dims: usize,
    /// Repetitions per sent component, combined at the receiver.
    pub repetition: u32,
}

impl TokenPlan {
    /// Plan for a token budget of `token_dim` symbols over a `d`-dim codec.
    pub fn for_budget(token_dim: usize, d: usize) -> Self {
        if token_dim < d {
            Self {
                sent_dims: token_dim,
                repetition: 1,
            }
        } else {
            Self {
                sent_dims: d,
                repetition: (token_dim / d).max(1) as u32,
            }
        }
    }

    pub fn full(d: usize) -> Self {
        Self {
            sent_dims: d,
            repetition: 1,
        }
    }

    pub fn symbols(&self) -> u64 {
        self.sent_dims as u64 * self.repetition as u64
    }
}

/// Analog transmission of a token over an AWGN realization at
/// `realized_snr_db`. After receiver rescaling the per-component noise
/// variance is `1 / (snr · repetition)`. Never drops. `compute_ops`
/// encode/decode calls are charged to the report's energy.
#[allow(clippy::too_many_arguments)]
pub fn analog_transmit(
    z: &Embedding,
    realized_snr_db: f64,
    power_w: f64,
    bw_units: u32,
    plan: TokenPlan,
    compute_ops: u64,
    phy: &PhyConfig,
    noise_rng: &mut SimRng,
) -> (Embedding, TransmissionReport) {
    assert!(bw_units >= 1, "bw_units must be >= 1");
    let (power, clamped) = clamp_power(power_w, phy);
    let snr = db_to_linear(realized_snr_db);
    let std = (1.0 / (snr * plan.repetition as f64)).sqrt();
    let sent = plan.sent_dims.min(z.z.len());
    let mut received = vec![0.0; z.z.len()];
    for (k, r) in received.iter_mut().enumerate().take(sent) {
        *r = z.z[k] + std * noise_rng.normal();
    }
    let symbols = plan.symbols();
    let airtime = symbols as f64 / (bw_units as f64 * phy.symbols_per_unit_slot);
    let report = TransmissionReport {
        payload: symbols,
        airtime_slots: airtime,
        energy_joules: energy_of(power, airtime, compute_ops, phy),
        delivered: true,
        attempts: 1,
        latency_slots: airtime,
        power_clamped: clamped,
    };
    (
        Embedding {
            z: received,
            normalized: false,
        },
        report,
    )
}

/// Achievable bits per slot: `bw · unit_bw · log2(1 + snr) · slot_seconds`.
pub fn shannon_bits_per_slot(bw_units: u32, linear_snr: f64, phy: &PhyConfig) -> f64 {
    bw_units as f64 * phy.unit_bw_hz * (1.0 + linear_snr).log2() * phy.slot_seconds
}

/// Digital transmission of `payload_bits` starting at slot time `start`.
///
/// An attempt accumulates achievable bits from `start` to the end of the
/// current fading block and succeeds once the payload is covered; a failed
/// attempt retries from the start of the next block, up to `max_attempts`.
/// The link's nominal SNR is held fixed for the whole transmission.
pub fn digital_transmit(
    payload_bits: u64,
    ch: &mut ChannelState,
    start: f64,
    power_w: f64,
    bw_units: u32,
    max_attempts: u32,
    phy: &PhyConfig,
) -> TransmissionReport {
    assert!(payload_bits > 0, "payload must be positive");
    assert!(bw_units >= 1, "bw_units must be >= 1");
    let (power, clamped) = clamp_power(power_w, phy);
    let mut t = start;
    let mut airtime = 0.0;
    let bl = ch.block_length_slots as f64;
    for attempt in 1..=max_attempts.max(1) {
        let block = (t / bl).floor() as u64;
        let block_end = (block + 1) as f64 * bl;
        let rate = shannon_bits_per_slot(bw_units, db_to_linear(ch.realized_snr_db(block * ch.block_length_slots)), phy);
        let needed = payload_bits as f64 / rate;
        if t + needed <= block_end {
            airtime += needed;
            let done = t + needed;
            return TransmissionReport {
                payload: payload_bits,
                airtime_slots: airtime,
                energy_joules: energy_of(power, airtime, 0, phy),
                delivered: true,
                attempts: attempt,
                latency_slots: done - start,
                power_clamped: clamped,
            };
        }
        airtime += block_end - t;
        t = block_end;
    }
    TransmissionReport {
        payload: payload_bits,
        airtime_slots: airtime,
        energy_joules: energy_of(power, airtime, 0, phy),
        delivered: false,
        attempts: max_attempts.max(1),
        latency_slots: t - start,
        power_clamped: clamped,
    }
}
