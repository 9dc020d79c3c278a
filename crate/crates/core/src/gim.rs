//! Graph interaction between the infrared and visible branches.
//!
//! Every loop builds one graph per modality. Nodes come from pyramid pooling
//! of the loop's source feature (grid `s`, 1×1 conv, bilinear upsampling back
//! to full size). Edges join every pair of nodes within a modality and the
//! same-grid nodes across modalities; each undirected pair yields
//! `e_jk = conv(g_j − g_k)` and `e_kj = conv(−(g_j − g_k))` with one shared
//! convolution. Messages `m_jk = σ(e_jk) · g_j` are summed onto the target,
//! all computed from the same pre-update node state, and the sum is passed
//! through conv + ReLU. A 1×1 conv over the concatenated nodes forms the
//! loop's leader, whose `σ(GAP(·))` gates convolved copies of the nodes that
//! are injected into the next loop's fresh nodes. The leaders of all loops
//! are concatenated and reduced to the branch output.

use std::collections::BTreeMap;

use crate::backbone::BranchFeatures;
use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::params::{Modality, ParamVars, SpecList};
use crate::tensor::{Scalar, Tape, Var};

const EDGE_KERNEL: usize = 3;

/// Pyramid grid of node `o` (0-based): `2^o`, capped at the feature size.
pub fn node_grid(o: usize, height: usize, width: usize) -> usize {
    let cap = height.min(width).max(1);
    1usize.checked_shl(o as u32).unwrap_or(usize::MAX).min(cap)
}

/// Which backbone level (1..=3) feeds loop `i` (1-based) of `loops`. With
/// three loops this is the identity; otherwise levels are spread evenly and
/// the last loop always sees the salient feature.
pub fn source_level(i: usize, loops: usize) -> usize {
    (i * 3).div_ceil(loops).clamp(1, 3)
}

/// Node counts and edge lists of one loop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphTopology {
    pub nodes: usize,
    pub loops: usize,
}

impl GraphTopology {
    pub fn new(nodes: usize, loops: usize) -> Result<Self> {
        if nodes == 0 || loops == 0 {
            return Err(Error::Config(format!(
                "graph needs at least one node and one loop (got N={nodes}, L={loops})"
            )));
        }
        Ok(Self { nodes, loops })
    }

    /// Unordered node pairs `(j, k)`, `j < k`, inside one modality.
    pub fn intra_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.nodes)
            .flat_map(|j| (j + 1..self.nodes).map(move |k| (j, k)))
            .collect()
    }

    /// Same-grid node indices joined across modalities.
    pub fn inter_pairs(&self) -> Vec<usize> {
        (0..self.nodes).collect()
    }

    /// Directed intra edges across both modalities of one loop.
    pub fn intra_directed(&self) -> usize {
        2 * 2 * self.intra_pairs().len()
    }

    pub fn inter_directed(&self) -> usize {
        2 * self.inter_pairs().len()
    }

    pub fn directed_per_loop(&self) -> usize {
        self.intra_directed() + self.inter_directed()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub modality: Modality,
    pub index: usize,
}

impl NodeId {
    pub fn new(modality: Modality, index: usize) -> Self {
        Self { modality, index }
    }
}

/// Directed edge tensors keyed by `(source, target)`.
#[derive(Clone, Debug, Default)]
pub struct EdgeSet {
    edges: BTreeMap<(NodeId, NodeId), Var>,
}

impl EdgeSet {
    pub fn insert_pair(&mut self, j: NodeId, k: NodeId, e_jk: Var, e_kj: Var) {
        self.edges.insert((j, k), e_jk);
        self.edges.insert((k, j), e_kj);
    }

    pub fn get(&self, from: NodeId, to: NodeId) -> Option<Var> {
        self.edges.get(&(from, to)).copied()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, NodeId, Var)> + '_ {
        self.edges.iter().map(|(&(a, b), &v)| (a, b, v))
    }

    /// Edges whose endpoints share a modality.
    pub fn intra_count(&self) -> usize {
        self.iter().filter(|(a, b, _)| a.modality == b.modality).count()
    }

    pub fn inter_count(&self) -> usize {
        self.len() - self.intra_count()
    }

    /// Sources with an edge into `to`, in key order.
    pub fn incoming(&self, to: NodeId) -> impl Iterator<Item = (NodeId, Var)> + '_ {
        self.iter().filter(move |(_, b, _)| *b == to).map(|(a, _, v)| (a, v))
    }
}

/// The graph of one modality in one loop.
#[derive(Clone, Debug)]
pub struct ModalityGraph {
    pub loop_index: usize,
    pub modality: Modality,
    /// Node states after message passing.
    pub nodes: Vec<Var>,
    pub leader: Var,
}

/// Everything one loop produced, kept for inspection.
#[derive(Clone, Debug)]
pub struct LoopTrace {
    pub loop_index: usize,
    /// Nodes as generated (plus any delivery), before message passing.
    pub initial: [Vec<Var>; 2],
    pub edges: EdgeSet,
    pub graphs: [ModalityGraph; 2],
}

#[derive(Clone, Debug)]
pub struct GimOutput {
    pub g_ir: Var,
    pub g_vis: Var,
    pub loops: Vec<LoopTrace>,
}

fn loop_prefix(i: usize) -> String {
    format!("gim.loop{i}")
}

fn intra_prefix(config: &FusionConfig, i: usize, m: Modality) -> String {
    if config.share_edge_params {
        format!("gim.shared.{}.intra", m.prefix())
    } else {
        format!("{}.{}.intra", loop_prefix(i), m.prefix())
    }
}

fn inter_prefix(config: &FusionConfig, i: usize) -> String {
    if config.share_edge_params {
        "gim.shared.inter".to_string()
    } else {
        format!("{}.inter", loop_prefix(i))
    }
}

pub(crate) fn push_specs(config: &FusionConfig, specs: &mut SpecList) {
    let (c, cn, n, l) = (config.channels, config.node_channels, config.nodes, config.loops);
    let has_intra = n > 1;
    if config.share_edge_params {
        for m in Modality::BOTH {
            if has_intra {
                specs.conv(&intra_prefix(config, 1, m), cn, cn, EDGE_KERNEL);
            }
        }
        specs.conv(&inter_prefix(config, 1), cn, cn, EDGE_KERNEL);
    }
    for i in 1..=l {
        let lp = loop_prefix(i);
        for m in Modality::BOTH {
            let mp = format!("{lp}.{}", m.prefix());
            for o in 0..n {
                specs.conv(&format!("{mp}.node{o}"), cn, c, 1);
            }
            if has_intra && !config.share_edge_params {
                specs.conv(&intra_prefix(config, i, m), cn, cn, EDGE_KERNEL);
            }
            specs.conv(&format!("{mp}.update"), cn, cn, EDGE_KERNEL);
            specs.conv(&format!("{mp}.leader"), cn, n * cn, 1);
            if config.modules.leader && i > 1 {
                for o in 0..n {
                    specs.conv(&format!("{mp}.deliver{o}"), cn, cn, EDGE_KERNEL);
                }
            }
        }
        if !config.share_edge_params {
            specs.conv(&inter_prefix(config, i), cn, cn, EDGE_KERNEL);
        }
    }
    for m in Modality::BOTH {
        specs.conv(&format!("gim.{}.mix", m.prefix()), c, l * cn, 1);
    }
}

/// Pyramid-pooled nodes of `f`: for node `o`, pool to `grids[o]²`, apply the
/// 1×1 conv `{prefix}.node{o}` and upsample back to the size of `f`.
pub fn generate_nodes<T: Scalar>(tape: &mut Tape<T>, f: Var, params: &ParamVars, prefix: &str, grids: &[usize]) -> Result<Vec<Var>> {
    let (_, _, h, w) = tape.value(f).dims4("generate_nodes")?;
    let mut nodes = Vec::with_capacity(grids.len());
    for (o, &s) in grids.iter().enumerate() {
        if s > h || s > w {
            return Err(Error::invalid(
                "generate_nodes",
                format!("grid {s}x{s} larger than feature {h}x{w}"),
            ));
        }
        let pooled = tape.adaptive_avgpool2d(f, s, s)?;
        let projected = params.conv(tape, &format!("{prefix}.node{o}"), pooled, 0)?;
        nodes.push(tape.upsample_bilinear(projected, h, w)?);
    }
    Ok(nodes)
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        let axis = sa.iter().zip(sb).position(|(x, y)| x != y).unwrap_or(0);
        return Err(Error::shape(
            op,
            format!("axis {axis}"),
            sa.get(axis).copied().unwrap_or(0),
            sb.get(axis).copied().unwrap_or(0),
        ));
    }
    Ok(())
}

/// Both directions of the edge between `g_j` and `g_k`, sharing the
/// convolution `{prefix}`.
pub fn generate_edges<T: Scalar>(tape: &mut Tape<T>, g_j: Var, g_k: Var, params: &ParamVars, prefix: &str) -> Result<(Var, Var)> {
    same_shape(tape, "generate_edges", g_j, g_k)?;
    let diff = tape.sub(g_j, g_k)?;
    let e_jk = params.conv3(tape, prefix, diff)?;
    let negated = tape.neg(diff);
    let e_kj = params.conv3(tape, prefix, negated)?;
    Ok((e_jk, e_kj))
}

/// `σ(e_jk) · g_j`.
pub fn pass_message<T: Scalar>(tape: &mut Tape<T>, e_jk: Var, g_j: Var) -> Result<Var> {
    same_shape(tape, "pass_message", e_jk, g_j)?;
    let gate = tape.sigmoid(e_jk);
    tape.mul(gate, g_j)
}

/// `relu(conv(g_k + Σ m_jk))` for one node given its incoming messages.
pub fn update_node<T: Scalar>(tape: &mut Tape<T>, node: Var, messages: &[Var], params: &ParamVars, prefix: &str) -> Result<Var> {
    let mut acc = node;
    for &m in messages {
        acc = tape.add(acc, m)?;
    }
    let out = params.conv3(tape, prefix, acc)?;
    Ok(tape.relu(out))
}

/// Updates every node of both modalities from a shared pre-update state.
/// `nodes[m]` holds the nodes of `Modality::BOTH[m]`.
pub fn update_nodes<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: &[Vec<Var>; 2],
    edges: &EdgeSet,
    params: &ParamVars,
    prefixes: [&str; 2],
) -> Result<[Vec<Var>; 2]> {
    // same-modality senders first, then cross-modality, so both branches sum
    // in the same order
    let mut messages: BTreeMap<NodeId, Vec<((bool, usize), Var)>> = BTreeMap::new();
    for (from, to, e) in edges.iter() {
        let source = nodes[modality_slot(from.modality)][from.index];
        let m = pass_message(tape, e, source)?;
        let order = (from.modality != to.modality, from.index);
        messages.entry(to).or_default().push((order, m));
    }
    let mut out: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
    for (slot, m) in Modality::BOTH.into_iter().enumerate() {
        for (k, &node) in nodes[slot].iter().enumerate() {
            let mut incoming = messages.remove(&NodeId::new(m, k)).unwrap_or_default();
            incoming.sort_by_key(|(order, _)| *order);
            let incoming: Vec<Var> = incoming.into_iter().map(|(_, v)| v).collect();
            out[slot].push(update_node(tape, node, &incoming, params, prefixes[slot])?);
        }
    }
    Ok(out)
}

fn modality_slot(m: Modality) -> usize {
    match m {
        Modality::Infrared => 0,
        Modality::Visible => 1,
    }
}

/// `conv1x1(concat(nodes))`.
pub fn form_leader<T: Scalar>(tape: &mut Tape<T>, nodes: &[Var], params: &ParamVars, prefix: &str) -> Result<Var> {
    let stacked = tape.concat_channels(nodes)?;
    params.conv(tape, prefix, stacked, 0)
}

/// Injections for the next loop: `conv3(node_o) · σ(GAP(leader))` per node,
/// with conv `{prefix}{o}`.
pub fn deliver<T: Scalar>(tape: &mut Tape<T>, leader: Var, prev_nodes: &[Var], params: &ParamVars, prefix: &str) -> Result<Vec<Var>> {
    let pooled = tape.global_avgpool(leader)?;
    let weight = tape.sigmoid(pooled);
    prev_nodes
        .iter()
        .enumerate()
        .map(|(o, &node)| {
            let conv = params.conv3(tape, &format!("{prefix}{o}"), node)?;
            tape.mul(conv, weight)
        })
        .collect()
}

/// The full module over both branches.
pub fn run_gim<T: Scalar>(
    tape: &mut Tape<T>,
    ir: &BranchFeatures,
    vis: &BranchFeatures,
    params: &ParamVars,
    config: &FusionConfig,
) -> Result<GimOutput> {
    let topology = GraphTopology::new(config.nodes, config.loops)?;
    let (_, c, h, w) = tape.value(ir.f1).dims4("run_gim")?;
    for f in [ir.f2, ir.f3, vis.f1, vis.f2, vis.f3] {
        same_shape(tape, "run_gim", ir.f1, f)?;
    }
    if c != config.channels {
        return Err(Error::shape("run_gim", "feature channels", config.channels, c));
    }
    let grids: Vec<usize> = (0..topology.nodes).map(|o| node_grid(o, h, w)).collect();
    let branches = [ir, vis];

    let mut traces: Vec<LoopTrace> = Vec::with_capacity(topology.loops);
    for i in 1..=topology.loops {
        let lp = loop_prefix(i);
        let level = source_level(i, topology.loops);

        let mut initial: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
        for (slot, m) in Modality::BOTH.into_iter().enumerate() {
            let mp = format!("{lp}.{}", m.prefix());
            let mut nodes = generate_nodes(tape, branches[slot].level(level), params, &mp, &grids)?;
            if let (true, Some(prev)) = (config.modules.leader, traces.last()) {
                let graph = &prev.graphs[slot];
                let injected = deliver(tape, graph.leader, &graph.nodes, params, &format!("{mp}.deliver"))?;
                for (node, inj) in nodes.iter_mut().zip(injected) {
                    *node = tape.add(*node, inj)?;
                }
            }
            initial[slot] = nodes;
        }

        let mut edges = EdgeSet::default();
        for (slot, m) in Modality::BOTH.into_iter().enumerate() {
            let prefix = intra_prefix(config, i, m);
            for (j, k) in topology.intra_pairs() {
                let (e_jk, e_kj) = generate_edges(tape, initial[slot][j], initial[slot][k], params, &prefix)?;
                edges.insert_pair(NodeId::new(m, j), NodeId::new(m, k), e_jk, e_kj);
            }
        }
        let prefix = inter_prefix(config, i);
        for o in topology.inter_pairs() {
            let (e_iv, e_vi) = generate_edges(tape, initial[0][o], initial[1][o], params, &prefix)?;
            edges.insert_pair(
                NodeId::new(Modality::Infrared, o),
                NodeId::new(Modality::Visible, o),
                e_iv,
                e_vi,
            );
        }

        let update = [format!("{lp}.ir.update"), format!("{lp}.vis.update")];
        let updated = update_nodes(tape, &initial, &edges, params, [&update[0], &update[1]])?;

        let mut graphs = Vec::with_capacity(2);
        for (slot, m) in Modality::BOTH.into_iter().enumerate() {
            let leader = form_leader(tape, &updated[slot], params, &format!("{lp}.{}.leader", m.prefix()))?;
            graphs.push(ModalityGraph {
                loop_index: i,
                modality: m,
                nodes: updated[slot].clone(),
                leader,
            });
        }
        let graphs: [ModalityGraph; 2] = graphs.try_into().expect("two modalities");
        traces.push(LoopTrace {
            loop_index: i,
            initial,
            edges,
            graphs,
        });
    }

    let mut mixed = [None, None];
    for (slot, m) in Modality::BOTH.into_iter().enumerate() {
        let leaders: Vec<Var> = traces.iter().map(|t| t.graphs[slot].leader).collect();
        let stacked = tape.concat_channels(&leaders)?;
        mixed[slot] = Some(params.conv(tape, &format!("gim.{}.mix", m.prefix()), stacked, 0)?);
    }
    Ok(GimOutput {
        g_ir: mixed[0].expect("set above"),
        g_vis: mixed[1].expect("set above"),
        loops: traces,
    })
}
