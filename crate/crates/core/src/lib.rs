//! Two-timescale semantic-agentic RAN simulator.
//!
//! A fast multi-agent policy loop controls power, bandwidth and token
//! budgets every slot while a slow loop adapts the semantic codec. The
//! crate also provides the O-RAN style deployment loop, stability
//! monitors, KPI extraction and the experiment presets.

pub mod channel;
pub mod codec;
pub mod config;
pub mod control;
pub mod engine;
pub mod experiments;
pub mod kpi;
pub mod linalg;
pub mod monitors;
pub mod oracle;
pub mod oran;
pub mod rng;
pub mod testbed;

/// `git describe` of the build, or the crate version outside a checkout.
pub const BUILD_TAG: &str = env!("SEMRAN_BUILD_TAG");
