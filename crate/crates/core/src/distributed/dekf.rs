//! Diffusion extended Kalman filters.
//!
//! Every round has two phases separated by a barrier:
//!
//! 1. incremental update: each node assimilates the current measurements of
//!    its neighbors, one scalar update per neighbor in ascending id order,
//!    producing a pre-estimate;
//! 2. diffusion update: each node replaces its estimate by a weighted
//!    average of its neighbors' pre-estimates and predicts one step ahead.
//!
//! The diffusion step does not touch the error covariances.

use nalgebra::{DMatrix, DVector};

use super::network::{Access, Mailbox};
use super::{DiffusionWeights, ReducedDiffusionWeights, Topology};
use crate::cekf::{check_finite, predict, EstimateTrace, FilterConfig};
use crate::error::{validation, Error, Result};
use crate::linalg::{measurement_update, select};
use crate::signal_model::{observation_matrix, MeasurementWindow, ReducedState, StateLayout, SystemState};

/// Knobs for instrumenting a distributed run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Order in which nodes are processed inside each phase. Defaults to ascending ids.
    pub processing_order: Option<Vec<usize>>,
    /// Record every mailbox read.
    pub record_access: bool,
}

#[derive(Debug, Clone)]
pub struct DistributedOutput {
    pub traces: Vec<EstimateTrace>,
    /// Mailbox reads of all rounds, when requested.
    pub access_log: Vec<Access>,
}

struct Node {
    layout: StateLayout,
    x: DVector<f64>,
    p: DMatrix<f64>,
    /// `(channel j, observation row, R_j)` in ascending `j`.
    rows: Vec<(usize, DMatrix<f64>, f64)>,
    config: FilterConfig,
}

struct PreEstimate {
    state: DVector<f64>,
    p: DMatrix<f64>,
    innovation_norm: f64,
}

impl Node {
    fn incremental(&self, m: usize, measurements: &Mailbox<'_, f64>, step: usize) -> Result<PreEstimate> {
        let mut state = self.x.clone();
        let mut p = self.p.clone();
        let mut sq = 0.0;
        for (j, row, r) in &self.rows {
            let y = DVector::from_element(1, *measurements.read(m, *j)?);
            let upd = measurement_update(&state, &p, row, &y, std::slice::from_ref(r)).map_err(|reason| {
                Error::Divergence {
                    step,
                    node: Some(m),
                    reason: format!("update with channel {j}: {reason}"),
                }
            })?;
            sq += upd.innovation[0] * upd.innovation[0];
            state = upd.x;
            p = upd.p;
        }
        Ok(PreEstimate {
            state,
            p,
            innovation_norm: sq.sqrt(),
        })
    }
}

fn processing_order(n: usize, options: &RunOptions) -> Result<Vec<usize>> {
    match &options.processing_order {
        None => Ok((0..n).collect()),
        Some(order) => {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..n).collect::<Vec<_>>() {
                return Err(validation("processing order must be a permutation of the nodes"));
            }
            Ok(order.clone())
        }
    }
}

fn run_rounds<D>(
    window: &MeasurementWindow,
    topology: &Topology,
    mut nodes: Vec<Node>,
    options: &RunOptions,
    diffuse: D,
) -> Result<DistributedOutput>
where
    D: Fn(usize, &Mailbox<'_, DVector<f64>>) -> Result<DVector<f64>>,
{
    let n = topology.node_count();
    let order = processing_order(n, options)?;
    fn new_mailbox<'t, T>(topology: &'t Topology, log: bool) -> Mailbox<'t, T> {
        if log {
            Mailbox::with_log(topology)
        } else {
            Mailbox::new(topology)
        }
    }
    let mut states: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(window.len()); n];
    let mut innovations: Vec<Vec<f64>> = vec![Vec::with_capacity(window.len()); n];
    let mut final_p: Vec<DMatrix<f64>> = nodes.iter().map(|node| node.p.clone()).collect();
    let mut access_log = Vec::new();

    for k in 0..window.len() {
        let mut measurements = new_mailbox(topology, options.record_access);
        for m in 0..n {
            measurements.post(m, window.samples[(m, k)]);
        }

        let mut pre: Vec<Option<PreEstimate>> = (0..n).map(|_| None).collect();
        for &m in &order {
            pre[m] = Some(nodes[m].incremental(m, &measurements, k)?);
        }
        access_log.extend(measurements.take_log());

        // barrier: every pre-estimate of round k exists before any diffusion
        let mut exchange = new_mailbox(topology, options.record_access);
        let mut pre_p = Vec::with_capacity(n);
        for (m, slot) in pre.into_iter().enumerate() {
            let pe = slot.ok_or_else(|| Error::Internal(format!("node {m} skipped in round {k}")))?;
            exchange.post(m, pe.state);
            pre_p.push(pe.p);
            innovations[m].push(pe.innovation_norm);
        }

        for &m in &order {
            let x_post = diffuse(m, &exchange)?;
            check_finite(&x_post, k, Some(m))?;
            let node = &mut nodes[m];
            let p_post = pre_p[m].clone();
            let (x_next, p_next) = predict(&x_post, &p_post, &node.config, node.layout, window.fs);
            node.x = x_next;
            node.p = p_next;
            final_p[m] = p_post;
            states[m].push(x_post);
        }
        access_log.extend(exchange.take_log());
    }

    let traces = nodes
        .iter()
        .zip(states)
        .zip(innovations)
        .zip(final_p)
        .map(|(((node, states), innovation_norms), final_p)| EstimateTrace {
            layout: node.layout,
            modes: node.layout.modes_of(states.last().expect("window is non-empty")),
            states,
            final_p,
            innovation_norms,
        })
        .collect();
    Ok(DistributedOutput { traces, access_log })
}

fn check_network(window: &MeasurementWindow, topology: &Topology, inits: usize, configs: usize) -> Result<()> {
    let n = topology.node_count();
    if window.channels() != n {
        return Err(validation(format!(
            "window has {} channels, topology has {n} nodes",
            window.channels()
        )));
    }
    if inits != n || configs != n {
        return Err(validation("one initial state and one config per node required"));
    }
    Ok(())
}

/// Diffusion EKF: every node estimates the full state.
pub fn dekf_run(
    window: &MeasurementWindow,
    topology: &Topology,
    weights: &DiffusionWeights,
    inits: &[SystemState],
    configs: &[FilterConfig],
) -> Result<Vec<EstimateTrace>> {
    dekf_run_with(window, topology, weights, inits, configs, &RunOptions::default()).map(|o| o.traces)
}

pub fn dekf_run_with(
    window: &MeasurementWindow,
    topology: &Topology,
    weights: &DiffusionWeights,
    inits: &[SystemState],
    configs: &[FilterConfig],
    options: &RunOptions,
) -> Result<DistributedOutput> {
    check_network(window, topology, inits.len(), configs.len())?;
    weights.validate(topology)?;
    let n = topology.node_count();
    let modes = inits[0].modes.len();
    let layout = StateLayout::new(n, modes);
    let h = observation_matrix(n, modes);

    let mut nodes = Vec::with_capacity(n);
    for (m, (init, config)) in inits.iter().zip(configs).enumerate() {
        if init.layout() != layout {
            return Err(validation(format!("node {m}: initial state must have {n} channels and {modes} modes")));
        }
        config.validate(layout)?;
        nodes.push(Node {
            layout,
            x: init.to_vector(),
            p: config.p0_matrix(),
            rows: topology
                .neighbors(m)
                .iter()
                .map(|&j| (j, h.rows(j, 1).into_owned(), config.r_diag[j]))
                .collect(),
            config: config.clone(),
        });
    }

    run_rounds(window, topology, nodes, options, |m, exchange| {
        let mut acc = DVector::zeros(layout.dim());
        for ((_, phi), &c) in exchange.gather(m)?.into_iter().zip(weights.row(m)) {
            acc.axpy(c, phi, 1.0);
        }
        Ok(acc)
    })
}

/// Diffusion EKF with reduced states: node `m` tracks only the amplitudes of
/// `N_m` plus the shared modes.
pub fn dekfr_run(
    window: &MeasurementWindow,
    topology: &Topology,
    weights: &DiffusionWeights,
    reduced_weights: &ReducedDiffusionWeights,
    inits: &[ReducedState],
    configs: &[FilterConfig],
) -> Result<Vec<EstimateTrace>> {
    dekfr_run_with(
        window,
        topology,
        weights,
        reduced_weights,
        inits,
        configs,
        &RunOptions::default(),
    )
    .map(|o| o.traces)
}

/// Location of neighbor `j`'s amplitude block inside contributor `i`'s state.
#[derive(Debug, Clone, Copy)]
struct BlockSource {
    contributor: usize,
    offset: usize,
}

/// Reduced P0 for node `m`: the full diagonal restricted to `N_m`'s blocks and the modes.
pub fn reduced_config(config: &FilterConfig, topology: &Topology, m: usize) -> FilterConfig {
    let modes = config.q_mode_diag.len() / 2;
    let full = StateLayout::new(topology.node_count(), modes);
    let mut idx: Vec<usize> = topology
        .neighbors(m)
        .iter()
        .flat_map(|&j| {
            let start = full.block_offset(j);
            start..start + 2 * modes
        })
        .collect();
    idx.extend(full.mode_offset()..full.dim());
    let p0 = select(&config.p0_matrix(), &idx, &idx);
    FilterConfig {
        r_diag: config.r_diag.clone(),
        q_mode_diag: config.q_mode_diag.clone(),
        p0_diag: p0.diagonal().iter().copied().collect(),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dekfr_run_with(
    window: &MeasurementWindow,
    topology: &Topology,
    weights: &DiffusionWeights,
    reduced_weights: &ReducedDiffusionWeights,
    inits: &[ReducedState],
    configs: &[FilterConfig],
    options: &RunOptions,
) -> Result<DistributedOutput> {
    check_network(window, topology, inits.len(), configs.len())?;
    weights.validate(topology)?;
    reduced_weights.validate(topology)?;
    let n = topology.node_count();
    let modes = inits[0].state.modes.len();
    let full_layout = StateLayout::new(n, modes);

    let mut nodes = Vec::with_capacity(n);
    for (m, (init, config)) in inits.iter().zip(configs).enumerate() {
        if init.owner != m || init.neighbor_ids != topology.neighbors(m) {
            return Err(validation(format!("node {m}: reduced state does not match its neighbor set")));
        }
        if init.state.modes.len() != modes {
            return Err(validation(format!("node {m}: expected {modes} modes")));
        }
        config.validate(full_layout)?;
        let layout = init.layout();
        let local = reduced_config(config, topology, m);
        let h = observation_matrix(layout.blocks, modes);
        nodes.push(Node {
            layout,
            x: init.to_vector(),
            p: local.p0_matrix(),
            rows: topology
                .neighbors(m)
                .iter()
                .enumerate()
                .map(|(pos, &j)| (j, h.rows(pos, 1).into_owned(), config.r_diag[j]))
                .collect(),
            config: local,
        });
    }

    // sources[m][j_pos] lists, for every i ∈ N_m ∩ N_j, where i keeps j's block
    let mut sources: Vec<Vec<Vec<BlockSource>>> = Vec::with_capacity(n);
    for m in 0..n {
        let mut per_j = Vec::with_capacity(topology.degree(m));
        for &j in topology.neighbors(m) {
            let mut list = Vec::new();
            for i in topology.common_neighbors(m, j) {
                let pos = topology.neighbors(i).binary_search(&j).map_err(|_| {
                    Error::Internal(format!("node {i} has no block for {j} while diffusing at {m}"))
                })?;
                list.push(BlockSource {
                    contributor: i,
                    offset: nodes[i].layout.block_offset(pos),
                });
            }
            per_j.push(list);
        }
        sources.push(per_j);
    }

    let block_len = 2 * modes;
    let mode_len = 2 * modes;
    let layouts: Vec<StateLayout> = nodes.iter().map(|node| node.layout).collect();
    run_rounds(window, topology, nodes, options, |m, exchange| {
        let layout = layouts[m];
        let mut x = DVector::zeros(layout.dim());
        for (j_pos, list) in sources[m].iter().enumerate() {
            let dst = layout.block_offset(j_pos);
            for (src, &d) in list.iter().zip(reduced_weights.row(m, j_pos)) {
                let phi = exchange.read(m, src.contributor)?;
                for t in 0..block_len {
                    x[dst + t] += d * phi[src.offset + t];
                }
            }
        }
        let dst = layout.mode_offset();
        for ((j, phi), &c) in exchange.gather(m)?.into_iter().zip(weights.row(m)) {
            let src = layouts[j].mode_offset();
            for t in 0..mode_len {
                x[dst + t] += c * phi[src + t];
            }
        }
        Ok(x)
    })
}

/// Reduced initial states cut from one full state per node.
pub fn reduce_states(topology: &Topology, full: &[SystemState]) -> Result<Vec<ReducedState>> {
    full.iter()
        .enumerate()
        .map(|(m, s)| ReducedState::from_full(s, m, topology.neighbors(m)))
        .collect()
}
