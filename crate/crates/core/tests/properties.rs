//! Property tests over the public API.

use proptest::prelude::*;
use semran::codec::{cosine_distortion, CodecParams};
use semran::config::{Paradigm, ScenarioConfig};
use semran::kpi::{pareto_brute_force, pareto_frontier, stability_stats, weakly_dominates};
use semran::monitors::{kl_divergence, osc, smoothed_distribution};
use semran::oran::{package_telemetry, EntryStatus, ModelRegistry, RadioKpis, TelemetryRecord, TsrWindow};
use semran::rng::SimRng;

#[derive(Debug, Clone)]
enum Op {
    Propose { tsr: f64, margin: f64 },
    Rollback { pick: usize },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0.0..1.0f64, prop_oneof![Just(0.0), Just(0.05), Just(1.0)]).prop_map(|(tsr, margin)| Op::Propose { tsr, margin }),
        (0usize..64).prop_map(|pick| Op::Rollback { pick }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn registry_keeps_one_active_and_restores_bytes(seed in 0u64..1_000, ops in prop::collection::vec(op(), 20)) {
        let mut rng = SimRng::new(seed, 1);
        let base = CodecParams::init(5, 3, &mut rng);
        let mut reg = ModelRegistry::new(&base, Some(0.5), [1.0, 1.0, 0.1, 0.1], 0);
        for (step, o) in ops.into_iter().enumerate() {
            match o {
                Op::Propose { tsr, margin } => {
                    let cand = CodecParams::init(5, 3, &mut rng);
                    let out = reg.propose(&cand, Some(tsr), margin, step as u64);
                    let e = reg.entry(out.version).unwrap();
                    prop_assert_eq!(e.status == EntryStatus::Active, out.accepted);
                    prop_assert_eq!(&e.codec_bytes[..], &{ let mut c = cand.clone(); c.version = out.version; c.parent_version = e.parent_version; c.to_bytes() }[..]);
                }
                Op::Rollback { pick } => {
                    let versions: Vec<u64> = reg.entries().map(|e| e.version).collect();
                    let v = versions[pick % versions.len()];
                    let before = reg.entry(v).unwrap().codec_bytes.clone();
                    let restored = reg.rollback(v, step as u64).unwrap();
                    prop_assert_eq!(restored.to_bytes(), before);
                    prop_assert_eq!(reg.active_version(), v);
                }
            }
            prop_assert_eq!(reg.count_active(), 1);
        }
    }

    #[test]
    fn rollback_to_unknown_version_is_an_error(extra in 2u64..100) {
        let mut rng = SimRng::new(extra, 1);
        let mut reg = ModelRegistry::new(&CodecParams::init(4, 2, &mut rng), None, [1.0; 4], 0);
        prop_assert!(reg.rollback(extra, 1).is_err());
        prop_assert_eq!(reg.count_active(), 1);
    }

    #[test]
    fn frontier_matches_brute_force(points in prop::collection::vec((0u8..20, 0u8..20), 0..60)) {
        let pts: Vec<(f64, f64)> = points.iter().map(|&(a, b)| (a as f64, b as f64)).collect();
        let fast = pareto_frontier(&pts);
        prop_assert_eq!(&fast, &pareto_brute_force(&pts));
        prop_assert!(weakly_dominates(&fast, &pts));
    }

    #[test]
    fn distortion_is_bounded_and_symmetric(a in prop::collection::vec(-10.0..10.0f64, 1..12), s in 0.01..100.0f64) {
        let b: Vec<f64> = a.iter().rev().cloned().collect();
        let d = cosine_distortion(&a, &b).value;
        prop_assert!((0.0..=2.0).contains(&d));
        prop_assert!((d - cosine_distortion(&b, &a).value).abs() < 1e-15);
        prop_assert_eq!(cosine_distortion(&a, &a).value, 0.0);
        let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
        if !cosine_distortion(&a, &scaled).degenerate {
            prop_assert!(cosine_distortion(&a, &scaled).value < 1e-12);
        }
    }

    #[test]
    fn osc_is_invariant_to_power_of_two_scaling(a in prop::collection::vec(-5.0..5.0f64, 2..10), k in -20i32..20) {
        let b: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
        let s = 2f64.powi(k);
        let sa: Vec<f64> = a.iter().map(|v| v * s).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * s).collect();
        prop_assert_eq!(osc(&a, &b).ok(), osc(&sa, &sb).ok());
    }

    #[test]
    fn smoothed_kl_is_nonnegative(p in prop::collection::vec(0u32..50, 2..12), q in prop::collection::vec(0u32..50, 2..12)) {
        let n = p.len().min(q.len());
        let pc: Vec<f64> = p[..n].iter().map(|&v| v as f64).collect();
        let qc: Vec<f64> = q[..n].iter().map(|&v| v as f64).collect();
        let (ps, qs) = (smoothed_distribution(&pc, 1.0), smoothed_distribution(&qc, 1.0));
        prop_assert!((ps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(kl_divergence(&ps, &qs) >= -1e-12);
        prop_assert!(kl_divergence(&ps, &ps).abs() < 1e-15);
    }

    #[test]
    fn telemetry_round_trips(slot in 0u64..1_000_000, agent in 0usize..8, conf in 0.0..1.0f64, sinr in -20.0..40.0f64, outcomes in prop::collection::vec(any::<bool>(), 0..30)) {
        let mut w = TsrWindow::new(16);
        for o in &outcomes {
            w.push(*o);
        }
        let kpis = RadioKpis { sinr_db: sinr, delivered_rate: conf, queue_len: outcomes.len(), throughput_proxy: conf * 3.0 };
        let rec = package_telemetry(agent, slot, slot * 7, 16, conf, &w, kpis);
        prop_assert_eq!(rec.tsr_proxy.is_none(), outcomes.is_empty());
        prop_assert_eq!(TelemetryRecord::from_json(&rec.to_json()).unwrap(), rec);
    }

    #[test]
    fn codec_checkpoint_round_trips(seed in 0u64..10_000, input in 1usize..10, embed in 1usize..6) {
        let p = CodecParams::init(input, embed, &mut SimRng::new(seed, 3));
        let bytes = p.to_bytes();
        let back = CodecParams::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_checkpoints_are_rejected(seed in 0u64..1_000, cut in 1usize..40) {
        let bytes = CodecParams::init(4, 2, &mut SimRng::new(seed, 3)).to_bytes();
        prop_assert!(CodecParams::from_bytes(&bytes[..bytes.len().saturating_sub(cut)]).is_err());
    }

    #[test]
    fn stability_stats_shift_invariant(trace in prop::collection::vec(-1.0..1.0f64, 10..300), shift in -3.0..3.0f64) {
        let a = stability_stats(&trace);
        let moved: Vec<f64> = trace.iter().map(|v| v + shift).collect();
        let b = stability_stats(&moved);
        prop_assert!((a.variance_final_third - b.variance_final_third).abs() < 1e-9);
        prop_assert!((a.lsq_slope - b.lsq_slope).abs() < 1e-9);
    }
}

#[test]
fn config_entries_round_trip_through_text() {
    for p in [Paradigm::TrRan, Paradigm::AiORan, Paradigm::SemComOnly, Paradigm::TwoTimescale] {
        let cfg = ScenarioConfig::defaults_for(p);
        let text: String = cfg.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let back = ScenarioConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
}

#[test]
fn config_rejects_unknown_and_duplicate_keys() {
    assert!(ScenarioConfig::parse("no_such_key = 1\n").is_err());
    assert!(ScenarioConfig::parse("snr_db = 1\nsnr_db = 2\n").is_err());
    assert!(ScenarioConfig::parse("snr_db\n").is_err());
}
