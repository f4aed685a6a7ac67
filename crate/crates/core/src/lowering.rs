//! Lowering of a process's op list to an IR with explicit communication.
//!
//! Each process builds a bipartite graph: compute nodes (one per op) on one
//! side, tile data nodes on the other. Every compute node has three edges,
//! to its A, B and C tiles. Edges to tiles the caller owns start satisfied.
//! A remote A or B tile must be fetched in some step before any compute that
//! reads it; one fetch satisfies every edge to that tile. A remote C tile is
//! written through a per-op accumulate scheduled in the same step as its
//! compute or later.
//!
//! An [`IrProgram`] is an ordered list of steps, each holding up to
//! `max_compute` compute ops and up to `max_comm` communication ops that are
//! meant to run overlapped.

use std::collections::HashMap;
use std::fmt;

use crate::costmodel::{comm_op_cost, op_compute_cost, program_cost, Cost, MachineModel};
use crate::error::{Error, Result};
use crate::fabric::{Rank, ELEM_BYTES};
use crate::opgen::{LocalMatMulOp, MatMulOperands, Operand};
use crate::tiling::TileIdx;

pub const DEFAULT_EXHAUSTIVE_BOUND: usize = 6;

/// Where a tile referenced by an op lives, from the caller's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileLocation {
    pub replica: usize,
    pub owner: Rank,
    pub elems: usize,
}

/// Locality oracle used when building the graph.
pub trait TileLocator {
    fn locate(&self, operand: Operand, tile: TileIdx, caller: Rank) -> Result<TileLocation>;
}

impl TileLocator for MatMulOperands<'_> {
    fn locate(&self, operand: Operand, tile: TileIdx, caller: Rank) -> Result<TileLocation> {
        let m = self.get(operand);
        let replica = m.replica_of(caller);
        Ok(TileLocation {
            replica,
            owner: m.owner(tile, replica)?,
            elems: m.tile_bounds(tile)?.area(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataNode {
    pub operand: Operand,
    pub tile: TileIdx,
    pub replica: usize,
    pub owner: Rank,
    pub elems: usize,
}

impl DataNode {
    pub fn bytes(&self) -> u64 {
        self.elems as u64 * ELEM_BYTES
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub data: usize,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComputeNode {
    pub op: usize,
    /// A, B and C edges in that order.
    pub edges: [Edge; 3],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompGraph {
    pub caller: Rank,
    pub ops: Vec<LocalMatMulOp>,
    pub data: Vec<DataNode>,
    pub compute: Vec<ComputeNode>,
}

impl CompGraph {
    fn input_edges(&self, op: usize) -> impl Iterator<Item = &Edge> {
        self.compute[op].edges[..2].iter()
    }

    fn c_edge(&self, op: usize) -> &Edge {
        &self.compute[op].edges[2]
    }

    fn needs_accumulate(&self, op: usize) -> bool {
        !self.c_edge(op).satisfied
    }

    fn accumulate_bytes(&self, op: usize) -> u64 {
        self.ops[op].c_local.area() as u64 * ELEM_BYTES
    }

    fn fetch(&self, data: usize) -> CommOp {
        let d = &self.data[data];
        CommOp::Fetch {
            data,
            operand: d.operand,
            tile: d.tile,
            replica: d.replica,
            owner: d.owner,
            bytes: d.bytes(),
        }
    }

    fn accumulate(&self, op: usize) -> CommOp {
        let d = &self.data[self.c_edge(op).data];
        CommOp::Accumulate {
            op,
            tile: d.tile,
            replica: d.replica,
            owner: d.owner,
            bytes: self.accumulate_bytes(op),
        }
    }
}

pub fn build_graph(ops: &[LocalMatMulOp], locator: &impl TileLocator, caller: Rank) -> Result<CompGraph> {
    let mut data: Vec<DataNode> = Vec::new();
    let mut index: HashMap<(Operand, TileIdx, usize), usize> = HashMap::new();
    let mut compute = Vec::with_capacity(ops.len());
    for (i, op) in ops.iter().enumerate() {
        let mut edge = |operand: Operand| -> Result<Edge> {
            let tile = op.tile(operand);
            let loc = locator.locate(operand, tile, caller)?;
            let id = *index.entry((operand, tile, loc.replica)).or_insert_with(|| {
                data.push(DataNode {
                    operand,
                    tile,
                    replica: loc.replica,
                    owner: loc.owner,
                    elems: loc.elems,
                });
                data.len() - 1
            });
            Ok(Edge {
                data: id,
                satisfied: loc.owner == caller,
            })
        };
        let edges = [edge(Operand::A)?, edge(Operand::B)?, edge(Operand::C)?];
        compute.push(ComputeNode { op: i, edges });
    }
    Ok(CompGraph {
        caller,
        ops: ops.to_vec(),
        data,
        compute,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_compute: usize,
    pub max_comm: usize,
}

impl Limits {
    pub const fn new(max_compute: usize, max_comm: usize) -> Self {
        Limits { max_compute, max_comm }
    }

    pub const UNBOUNDED: Limits = Limits::new(usize::MAX, usize::MAX);

    fn check(&self) -> Result<()> {
        if self.max_compute == 0 || self.max_comm == 0 {
            return Err(Error::Config("IR step limits must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommOp {
    /// Fetch a remote input tile (data node `data`).
    Fetch {
        data: usize,
        operand: Operand,
        tile: TileIdx,
        replica: usize,
        owner: Rank,
        bytes: u64,
    },
    /// Accumulate op `op`'s partial product into its remote C tile.
    Accumulate {
        op: usize,
        tile: TileIdx,
        replica: usize,
        owner: Rank,
        bytes: u64,
    },
}

impl fmt::Display for CommOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CommOp::Fetch { operand, tile, owner, .. } => write!(f, "fetch {operand}{tile}@{owner}"),
            CommOp::Accumulate { tile, owner, .. } => write!(f, "acc C{tile}@{owner}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IrStep {
    /// Indices into the program's op list.
    pub compute: Vec<usize>,
    pub comm: Vec<CommOp>,
}

impl IrStep {
    pub fn is_empty(&self) -> bool {
        self.compute.is_empty() && self.comm.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrProgram {
    pub caller: Rank,
    pub limits: Limits,
    pub ops: Vec<LocalMatMulOp>,
    pub steps: Vec<IrStep>,
}

impl fmt::Display for IrProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, step) in self.steps.iter().enumerate() {
            let compute: Vec<String> = step.compute.iter().map(|o| format!("op#{o}")).collect();
            let comm: Vec<String> = step.comm.iter().map(ToString::to_string).collect();
            writeln!(f, "step {k}: compute=[{}] comm=[{}]", compute.join(" "), comm.join(" "))?;
        }
        Ok(())
    }
}

/// Progress through a graph while a schedule is being built.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Progress {
    computed: Vec<bool>,
    fetched: Vec<bool>,
    accumulated: Vec<bool>,
}

impl Progress {
    fn new(g: &CompGraph) -> Self {
        Progress {
            computed: vec![false; g.ops.len()],
            fetched: vec![false; g.data.len()],
            accumulated: vec![false; g.ops.len()],
        }
    }

    fn done(&self, g: &CompGraph) -> bool {
        (0..g.ops.len()).all(|o| self.computed[o] && (self.accumulated[o] || !g.needs_accumulate(o)))
    }

    fn eligible(&self, g: &CompGraph) -> Vec<usize> {
        (0..g.ops.len())
            .filter(|&o| !self.computed[o])
            .filter(|&o| g.input_edges(o).all(|e| e.satisfied || self.fetched[e.data]))
            .collect()
    }

    /// Comm candidates in op-list order, assuming `extra` ops are computed in
    /// the current step.
    fn comm_candidates(&self, g: &CompGraph, extra: &[usize]) -> Vec<CommOp> {
        let mut out = Vec::new();
        let mut queued = vec![false; g.data.len()];
        for o in 0..g.ops.len() {
            for e in g.input_edges(o) {
                if !e.satisfied && !self.fetched[e.data] && !queued[e.data] {
                    queued[e.data] = true;
                    out.push(g.fetch(e.data));
                }
            }
            let computed = self.computed[o] || extra.contains(&o);
            if g.needs_accumulate(o) && computed && !self.accumulated[o] {
                out.push(g.accumulate(o));
            }
        }
        out
    }

    fn apply(&mut self, step: &IrStep) {
        for &o in &step.compute {
            self.computed[o] = true;
        }
        for c in &step.comm {
            match *c {
                CommOp::Fetch { data, .. } => self.fetched[data] = true,
                CommOp::Accumulate { op, .. } => self.accumulated[op] = true,
            }
        }
    }
}

fn lower_with(
    g: &CompGraph,
    limits: Limits,
    mut pick: impl FnMut(&Progress, &[usize], Limits) -> IrStep,
) -> Result<IrProgram> {
    limits.check()?;
    let mut progress = Progress::new(g);
    let mut steps = Vec::new();
    let bound = g.ops.len() + 3 * g.ops.len() + 1;
    while !progress.done(g) {
        let eligible = progress.eligible(g);
        let step = pick(&progress, &eligible, limits);
        if step.is_empty() {
            return Err(Error::Internal(format!(
                "no schedulable work for rank {} with {} ops left",
                g.caller,
                progress.computed.iter().filter(|c| !**c).count()
            )));
        }
        progress.apply(&step);
        steps.push(step);
        if steps.len() > bound {
            return Err(Error::Internal("lowering did not terminate".into()));
        }
    }
    Ok(IrProgram {
        caller: g.caller,
        limits,
        ops: g.ops.clone(),
        steps,
    })
}

/// Fill each step with eligible compute in op order, then with pending
/// communication in op order.
pub fn lower_greedy(g: &CompGraph, limits: Limits) -> Result<IrProgram> {
    lower_with(g, limits, |progress, eligible, limits| {
        let compute: Vec<usize> = eligible.iter().copied().take(limits.max_compute).collect();
        let comm = progress
            .comm_candidates(g, &compute)
            .into_iter()
            .take(limits.max_comm)
            .collect();
        IrStep { compute, comm }
    })
}

/// Pick `limit` items one at a time, each time taking the candidate whose
/// addition gives the smallest step cost (first in order on ties).
fn pick_cheapest<T: Copy>(
    candidates: &[T],
    limit: usize,
    cost_of: impl Fn(&T) -> Cost,
    step_with: impl Fn(Cost) -> Cost,
) -> (Vec<T>, Cost) {
    let mut chosen = Vec::new();
    let mut used = vec![false; candidates.len()];
    let mut total = Cost::ZERO;
    while chosen.len() < limit {
        let mut best: Option<(usize, Cost)> = None;
        for (i, c) in candidates.iter().enumerate() {
            if used[i] {
                continue;
            }
            let trial = step_with(total + cost_of(c));
            if best.is_none_or(|(_, b)| trial < b) {
                best = Some((i, trial));
            }
        }
        let Some((i, _)) = best else { break };
        used[i] = true;
        total = total + cost_of(&candidates[i]);
        chosen.push(candidates[i]);
    }
    (chosen, total)
}

/// Like [`lower_greedy`], but within each step the compute ops and then the
/// communication ops are chosen by smallest marginal step cost.
pub fn lower_cost_greedy(g: &CompGraph, limits: Limits, machine: &MachineModel) -> Result<IrProgram> {
    let caller = g.caller;
    lower_with(g, limits, |progress, eligible, limits| {
        let (compute, compute_cost) = pick_cheapest(
            eligible,
            limits.max_compute,
            |&o| op_compute_cost(&g.ops[o], machine),
            |c| c,
        );
        let candidates = progress.comm_candidates(g, &compute);
        let (comm, _) = pick_cheapest(
            &candidates,
            limits.max_comm,
            |c| comm_op_cost(c, caller, machine),
            |c| c.max(compute_cost),
        );
        IrStep { compute, comm }
    })
}

/// One action per step: fetch, compute or accumulate, in op order. This is
/// the fully serialized reference schedule.
pub fn lower_serialized(g: &CompGraph) -> Result<IrProgram> {
    let mut steps = Vec::new();
    let mut fetched = vec![false; g.data.len()];
    for o in 0..g.ops.len() {
        for e in g.input_edges(o) {
            if !e.satisfied && !fetched[e.data] {
                fetched[e.data] = true;
                steps.push(IrStep {
                    compute: vec![],
                    comm: vec![g.fetch(e.data)],
                });
            }
        }
        steps.push(IrStep {
            compute: vec![o],
            comm: vec![],
        });
        if g.needs_accumulate(o) {
            steps.push(IrStep {
                compute: vec![],
                comm: vec![g.accumulate(o)],
            });
        }
    }
    Ok(IrProgram {
        caller: g.caller,
        limits: Limits::new(1, 1),
        ops: g.ops.clone(),
        steps,
    })
}

/// Subsets of `items` with at most `max` elements, in lexicographic order of
/// their index lists (the empty set first).
fn bounded_subsets<T: Copy>(items: &[T], max: usize) -> Vec<Vec<T>> {
    fn rec<T: Copy>(items: &[T], start: usize, max: usize, cur: &mut Vec<T>, out: &mut Vec<Vec<T>>) {
        out.push(cur.clone());
        if cur.len() == max {
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            rec(items, i + 1, max, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(items, 0, max, &mut Vec::new(), &mut out);
    out
}

/// Minimum-cost schedule over every valid sequence of nonempty steps.
/// Ties go to the lexicographically first schedule in enumeration order.
pub fn lower_exhaustive(g: &CompGraph, limits: Limits, machine: &MachineModel, bound: usize) -> Result<IrProgram> {
    limits.check()?;
    if g.ops.len() > bound {
        return Err(Error::SearchTooLarge {
            ops: g.ops.len(),
            bound,
        });
    }

    struct Search<'g> {
        g: &'g CompGraph,
        limits: Limits,
        machine: &'g MachineModel,
        memo: HashMap<Progress, (Cost, Option<IrStep>)>,
    }

    impl Search<'_> {
        fn best(&mut self, state: &Progress) -> (Cost, Option<IrStep>) {
            if let Some(hit) = self.memo.get(state) {
                return hit.clone();
            }
            let result = if state.done(self.g) {
                (Cost::ZERO, None)
            } else {
                let mut best: Option<(Cost, IrStep)> = None;
                let eligible = state.eligible(self.g);
                for compute in bounded_subsets(&eligible, self.limits.max_compute) {
                    let candidates = state.comm_candidates(self.g, &compute);
                    let compute_cost: Cost =
                        compute.iter().map(|&o| op_compute_cost(&self.g.ops[o], self.machine)).sum();
                    for comm in bounded_subsets(&candidates, self.limits.max_comm) {
                        if compute.is_empty() && comm.is_empty() {
                            continue;
                        }
                        let comm_cost: Cost =
                            comm.iter().map(|c| comm_op_cost(c, self.g.caller, self.machine)).sum();
                        let step = IrStep {
                            compute: compute.clone(),
                            comm,
                        };
                        let mut next = state.clone();
                        next.apply(&step);
                        let (rest, _) = self.best(&next);
                        let total = compute_cost.max(comm_cost) + rest;
                        if best.as_ref().is_none_or(|(b, _)| total < *b) {
                            best = Some((total, step));
                        }
                    }
                }
                let (cost, step) = best.expect("an unfinished state always has a move");
                (cost, Some(step))
            };
            self.memo.insert(state.clone(), result.clone());
            result
        }
    }

    let mut search = Search {
        g,
        limits,
        machine,
        memo: HashMap::new(),
    };
    let mut state = Progress::new(g);
    let mut steps = Vec::new();
    while let (_, Some(step)) = search.best(&state) {
        state.apply(&step);
        steps.push(step);
    }
    let prog = IrProgram {
        caller: g.caller,
        limits,
        ops: g.ops.clone(),
        steps,
    };
    debug_assert!(program_cost(&prog, machine).seconds().is_finite());
    Ok(prog)
}

/// First invariant broken by a program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    LimitExceeded { step: usize },
    /// Compute scheduled before one of its remote inputs was fetched.
    Dependency { step: usize, op: usize, data: usize },
    AccumulateBeforeCompute { step: usize, op: usize },
    DuplicateFetch { step: usize, data: usize },
    DuplicateCompute { step: usize, op: usize },
    DuplicateAccumulate { step: usize, op: usize },
    /// A descriptor that names no remote data node or op of the graph.
    UnknownComm { step: usize },
    UnknownOp { step: usize, op: usize },
    /// An op never computed, or a remote C update never accumulated.
    Incomplete { op: usize },
}

impl Violation {
    pub fn class(&self) -> &'static str {
        match self {
            Violation::LimitExceeded { .. } => "limits",
            Violation::Dependency { .. } | Violation::AccumulateBeforeCompute { .. } => "dependency",
            Violation::DuplicateFetch { .. }
            | Violation::DuplicateCompute { .. }
            | Violation::DuplicateAccumulate { .. } => "duplicate",
            Violation::UnknownComm { .. } | Violation::UnknownOp { .. } => "unknown",
            Violation::Incomplete { .. } => "completeness",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} violation: {:?}", self.class(), self)
    }
}

pub fn validate(prog: &IrProgram, g: &CompGraph) -> std::result::Result<(), Violation> {
    let n = g.ops.len();
    let mut computed = vec![false; n];
    let mut accumulated = vec![false; n];
    let mut fetched = vec![false; g.data.len()];
    for (s, step) in prog.steps.iter().enumerate() {
        if step.compute.len() > prog.limits.max_compute || step.comm.len() > prog.limits.max_comm {
            return Err(Violation::LimitExceeded { step: s });
        }
        for &o in &step.compute {
            if o >= n || prog.ops.get(o) != Some(&g.ops[o]) {
                return Err(Violation::UnknownOp { step: s, op: o });
            }
            if computed[o] {
                return Err(Violation::DuplicateCompute { step: s, op: o });
            }
            if let Some(e) = g.input_edges(o).find(|e| !e.satisfied && !fetched[e.data]) {
                return Err(Violation::Dependency { step: s, op: o, data: e.data });
            }
        }
        for &o in &step.compute {
            computed[o] = true;
        }
        for c in &step.comm {
            match *c {
                CommOp::Fetch { data, .. } => {
                    let known = data < g.data.len() && g.data[data].owner != g.caller && *c == g.fetch(data);
                    if !known {
                        return Err(Violation::UnknownComm { step: s });
                    }
                    if fetched[data] {
                        return Err(Violation::DuplicateFetch { step: s, data });
                    }
                }
                CommOp::Accumulate { op, .. } => {
                    if op >= n || !g.needs_accumulate(op) || *c != g.accumulate(op) {
                        return Err(Violation::UnknownComm { step: s });
                    }
                    if !computed[op] {
                        return Err(Violation::AccumulateBeforeCompute { step: s, op });
                    }
                    if accumulated[op] {
                        return Err(Violation::DuplicateAccumulate { step: s, op });
                    }
                }
            }
        }
        // fetches land at the end of the step
        for c in &step.comm {
            match *c {
                CommOp::Fetch { data, .. } => fetched[data] = true,
                CommOp::Accumulate { op, .. } => accumulated[op] = true,
            }
        }
    }
    for o in 0..n {
        if !computed[o] || (g.needs_accumulate(o) && !accumulated[o]) {
            return Err(Violation::Incomplete { op: o });
        }
    }
    Ok(())
}
