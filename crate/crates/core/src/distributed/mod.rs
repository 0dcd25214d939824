//! Fully distributed estimation on a PMU communication graph.

mod dekf;
pub mod network;
mod topology;
mod weights;

use serde::{Deserialize, Serialize};

pub use dekf::{
    dekf_run, dekf_run_with, dekfr_run, dekfr_run_with, reduce_states, reduced_config, DistributedOutput, RunOptions,
};
pub use topology::{Topology, TopologySpec};
pub use weights::{DiffusionWeights, ReducedDiffusionWeights};

use crate::cekf::EstimateTrace;
use crate::error::{validation, Result};
use crate::signal_model::Mode;

/// Relative disagreement between node estimates, worst mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSpread {
    pub freq_spread_rel: f64,
    pub sigma_spread_rel: f64,
}

/// `(max − min) / |mean|` of the final per-node estimates, maximized over modes.
pub fn consensus_spread(traces: &[EstimateTrace]) -> Result<ConsensusSpread> {
    if traces.len() < 2 {
        return Err(validation("consensus spread needs at least two nodes"));
    }
    let modes = traces[0].modes.len();
    if traces.iter().any(|t| t.modes.len() != modes) {
        return Err(validation("nodes disagree on the number of modes"));
    }
    let spread = |values: Vec<f64>| {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        if range == 0.0 {
            return 0.0;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        range / mean.abs()
    };
    let mut out = ConsensusSpread {
        freq_spread_rel: 0.0,
        sigma_spread_rel: 0.0,
    };
    for l in 0..modes {
        out.freq_spread_rel = out
            .freq_spread_rel
            .max(spread(traces.iter().map(|t| t.modes[l].omega).collect()));
        out.sigma_spread_rel = out
            .sigma_spread_rel
            .max(spread(traces.iter().map(|t| t.modes[l].sigma).collect()));
    }
    Ok(out)
}

/// Across-node average of the final mode estimates.
pub fn mean_modes(traces: &[EstimateTrace]) -> Vec<Mode> {
    let n = traces.len() as f64;
    let modes = traces.first().map_or(0, |t| t.modes.len());
    (0..modes)
        .map(|l| {
            let (w, s) = traces
                .iter()
                .fold((0.0, 0.0), |(w, s), t| (w + t.modes[l].omega, s + t.modes[l].sigma));
            Mode::new(w / n, s / n)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use nalgebra::DMatrix;

    use super::*;
    use crate::cekf::{cekf_run, Tuning};
    use crate::signal_model::{
        observe, reduced_observation_matrix, synthesize_window, ChannelSpec, ModeSet, NoiseSpec, StateLayout,
        Synthesis,
    };

    fn scenario(m: usize, noise: NoiseSpec, seed: u64) -> Synthesis {
        let modes = ModeSet::single(4.0 * PI, 0.0126).unwrap();
        let specs: Vec<_> = (0..m)
            .map(|c| ChannelSpec::with_phases(0.7 + 0.3 * c as f64, &[-1.2 + 0.5 * c as f64]))
            .collect();
        synthesize_window(&modes, &specs, 30.0, 300, noise, seed).unwrap()
    }

    fn perturbed(s: &crate::signal_model::SystemState) -> crate::signal_model::SystemState {
        let mut out = s.clone();
        out.modes[0].omega *= 1.03;
        out.modes[0].sigma *= 1.5;
        for (c, ch) in out.amplitudes.iter_mut().enumerate() {
            ch.0[0].xc *= 0.8 + 0.05 * c as f64;
        }
        out
    }

    fn trace_with_modes(modes: Vec<Mode>) -> EstimateTrace {
        EstimateTrace {
            layout: StateLayout::new(1, modes.len()),
            states: vec![nalgebra::DVector::zeros(4)],
            final_p: DMatrix::zeros(4, 4),
            modes,
            innovation_norms: vec![0.0],
        }
    }

    #[test]
    fn spread_examples() {
        let a = trace_with_modes(vec![Mode::new(10.0, 0.5)]);
        let s = consensus_spread(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(s, ConsensusSpread { freq_spread_rel: 0.0, sigma_spread_rel: 0.0 });
        let b = trace_with_modes(vec![Mode::new(12.0, 0.5)]);
        let s = consensus_spread(&[a.clone(), b]).unwrap();
        assert!((s.freq_spread_rel - 2.0 / 11.0).abs() < 1e-15);
        assert!(consensus_spread(&[a]).is_err());
    }

    #[test]
    fn complete_graph_matches_centralized() {
        let syn = scenario(5, NoiseSpec::SnrDb(40.0), 3);
        let topo = Topology::complete(5).unwrap();
        let init = perturbed(&syn.truth);
        let cfg = Tuning::default().config(5, 1);
        let central = cekf_run(&syn.window, &init, &cfg).unwrap();

        let inits = vec![init.clone(); 5];
        let cfgs = vec![cfg.clone(); 5];
        let dekf = dekf_run(&syn.window, &topo, &DiffusionWeights::uniform(&topo), &inits, &cfgs).unwrap();
        let reduced = reduce_states(&topo, &inits).unwrap();
        let dekfr = dekfr_run(
            &syn.window,
            &topo,
            &DiffusionWeights::uniform(&topo),
            &ReducedDiffusionWeights::uniform(&topo),
            &reduced,
            &cfgs,
        )
        .unwrap();
        for node in dekf.iter().chain(&dekfr) {
            assert_eq!(node.layout, central.layout);
            for (a, b) in node.states.iter().zip(&central.states) {
                assert!((a - b).amax() < 1e-8);
            }
        }
        assert!(consensus_spread(&dekf).unwrap().freq_spread_rel < 1e-8);
    }

    #[test]
    fn single_node_is_centralized() {
        let syn = scenario(1, NoiseSpec::SnrDb(30.0), 5);
        let topo = Topology::from_edges(1, &[]).unwrap();
        let init = perturbed(&syn.truth);
        let cfg = Tuning::default().config(1, 1);
        let central = cekf_run(&syn.window, &init, &cfg).unwrap();
        let w = DiffusionWeights::uniform(&topo);
        let dekf = dekf_run(&syn.window, &topo, &w, &[init.clone()], &[cfg.clone()]).unwrap();
        for (a, b) in dekf[0].states.iter().zip(&central.states) {
            assert!((a - b).amax() < 1e-12);
        }
        let reduced = reduce_states(&topo, &[init]).unwrap();
        let dekfr =
            dekfr_run(&syn.window, &topo, &w, &ReducedDiffusionWeights::uniform(&topo), &reduced, &[cfg]).unwrap();
        for (a, b) in dekfr[0].states.iter().zip(&central.states) {
            assert!((a - b).amax() < 1e-12);
        }
    }

    #[test]
    fn noiseless_ring_keeps_truth() {
        let syn = scenario(5, NoiseSpec::Off, 0);
        let topo = Topology::ring(5).unwrap();
        let cfg = Tuning {
            r: 1e-4,
            q_mode: 1e-8,
            ..Tuning::default()
        }
        .config(5, 1);
        let inits = vec![syn.truth.clone(); 5];
        let reduced = reduce_states(&topo, &inits).unwrap();
        let traces = dekfr_run(
            &syn.window,
            &topo,
            &DiffusionWeights::uniform(&topo),
            &ReducedDiffusionWeights::uniform(&topo),
            &reduced,
            &vec![cfg.clone(); 5],
        )
        .unwrap();
        let full_traces =
            dekf_run(&syn.window, &topo, &DiffusionWeights::uniform(&topo), &inits, &vec![cfg; 5]).unwrap();
        let layout = syn.truth.layout();
        for (m, (tr, full)) in traces.iter().zip(&full_traces).enumerate() {
            let mut x = syn.truth.to_vector();
            for (k, (post, post_full)) in tr.states.iter().zip(&full.states).enumerate() {
                let want = cut_reduced(&x, &topo, m);
                assert!((post - &want).amax() < 1e-8, "node {m} step {k}");
                assert!((post_full - &x).amax() < 1e-8, "node {m} step {k}");
                x = crate::signal_model::propagate(layout, &x, 30.0);
            }
        }
    }

    /// Neighbor blocks of a single-mode full state, plus the modes.
    fn cut_reduced(full: &nalgebra::DVector<f64>, topo: &Topology, m: usize) -> nalgebra::DVector<f64> {
        let layout = StateLayout::new(topo.node_count(), 1);
        let mut idx: Vec<usize> = topo
            .neighbors(m)
            .iter()
            .flat_map(|&j| [layout.amp_index(j, 0), layout.amp_index(j, 0) + 1])
            .collect();
        idx.extend(layout.mode_offset()..layout.dim());
        crate::linalg::select_vec(full, &idx)
    }

    #[test]
    fn processing_order_does_not_matter() {
        let syn = scenario(5, NoiseSpec::SnrDb(30.0), 11);
        let topo = Topology::ring(5).unwrap();
        let cfg = Tuning::default().config(5, 1);
        let inits: Vec<_> = (0..5).map(|_| perturbed(&syn.truth)).collect();
        let reduced = reduce_states(&topo, &inits).unwrap();
        let c = DiffusionWeights::uniform(&topo);
        let d = ReducedDiffusionWeights::uniform(&topo);
        let cfgs = vec![cfg; 5];
        let run = |order: Option<Vec<usize>>| {
            let opts = RunOptions {
                processing_order: order,
                record_access: false,
            };
            (
                dekf_run_with(&syn.window, &topo, &c, &inits, &cfgs, &opts).unwrap().traces,
                dekfr_run_with(&syn.window, &topo, &c, &d, &reduced, &cfgs, &opts).unwrap().traces,
            )
        };
        let (a1, b1) = run(None);
        let (a2, b2) = run(Some(vec![3, 0, 4, 2, 1]));
        for (x, y) in a1.iter().chain(&b1).zip(a2.iter().chain(&b2)) {
            for (s, t) in x.states.iter().zip(&y.states) {
                assert!((s - t).amax() < 1e-12);
            }
        }
        let bad = RunOptions {
            processing_order: Some(vec![0, 0, 1, 2, 3]),
            record_access: false,
        };
        assert!(dekf_run_with(&syn.window, &topo, &c, &inits, &cfgs, &bad).is_err());
    }

    #[test]
    fn only_neighbors_are_read() {
        // a path graph is the most restrictive connected spy topology
        let syn = scenario(4, NoiseSpec::SnrDb(40.0), 2);
        let topo = Topology::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let inits = vec![syn.truth.clone(); 4];
        let cfgs = vec![Tuning::default().config(4, 1); 4];
        let opts = RunOptions {
            processing_order: None,
            record_access: true,
        };
        let c = DiffusionWeights::uniform(&topo);
        let out = dekf_run_with(&syn.window, &topo, &c, &inits, &cfgs, &opts).unwrap();
        assert!(!out.access_log.is_empty());
        assert!(out.access_log.iter().all(|a| topo.is_neighbor(a.reader, a.sender)));
        let reduced = reduce_states(&topo, &inits).unwrap();
        let out = dekfr_run_with(
            &syn.window,
            &topo,
            &c,
            &ReducedDiffusionWeights::uniform(&topo),
            &reduced,
            &cfgs,
            &opts,
        )
        .unwrap();
        assert!(out.access_log.iter().all(|a| topo.is_neighbor(a.reader, a.sender)));
        // node 0 and node 3 never talk directly
        assert!(!out.access_log.iter().any(|a| (a.reader, a.sender) == (0, 3)));
    }

    #[test]
    fn reduced_rows_pick_neighbor_blocks() {
        let topo = Topology::ring(5).unwrap();
        let syn = scenario(5, NoiseSpec::Off, 0);
        let layout = syn.truth.layout();
        let full = syn.truth.to_vector();
        for m in 0..5 {
            let r = crate::signal_model::ReducedState::from_full(&syn.truth, m, topo.neighbors(m)).unwrap();
            let h = reduced_observation_matrix(topo.neighbors(m), 1);
            let y = observe(&r.to_vector(), &h).unwrap();
            for (pos, &j) in topo.neighbors(m).iter().enumerate() {
                let i = layout.amp_index(j, 0);
                assert_eq!(y[pos], full[i] + full[i + 1]);
            }
        }
    }

    #[test]
    fn reduced_config_restricts_p0() {
        let topo = Topology::ring(5).unwrap();
        let mut cfg = Tuning::default().config(5, 1);
        for (i, v) in cfg.p0_diag.iter_mut().enumerate() {
            *v = i as f64;
        }
        let r = reduced_config(&cfg, &topo, 0);
        // N_0 = {0, 1, 4}
        assert_eq!(r.p0_diag, vec![0.0, 1.0, 2.0, 3.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let syn = scenario(5, NoiseSpec::Off, 0);
        let topo = Topology::ring(4).unwrap();
        let w = DiffusionWeights::uniform(&topo);
        let cfg = Tuning::default().config(5, 1);
        assert!(dekf_run(&syn.window, &topo, &w, &vec![syn.truth.clone(); 4], &vec![cfg; 4]).is_err());

        let topo = Topology::ring(5).unwrap();
        let reduced = reduce_states(&Topology::complete(5).unwrap(), &vec![syn.truth.clone(); 5]).unwrap();
        let cfgs = vec![Tuning::default().config(5, 1); 5];
        let out = dekfr_run(
            &syn.window,
            &topo,
            &DiffusionWeights::uniform(&topo),
            &ReducedDiffusionWeights::uniform(&topo),
            &reduced,
            &cfgs,
        );
        assert!(out.is_err());
    }

    #[test]
    fn mean_modes_averages_nodes() {
        let a = trace_with_modes(vec![Mode::new(10.0, 0.5)]);
        let b = trace_with_modes(vec![Mode::new(12.0, 0.1)]);
        let m = mean_modes(&[a, b]);
        assert_eq!(m, vec![Mode::new(11.0, 0.3)]);
    }
}
