//! Roofline compute cost and bandwidth communication cost.
//!
//! A step runs its compute ops back to back on one compute queue and its
//! communication back to back on one copy queue, with the two queues fully
//! overlapped: `step = max(sum(compute), sum(comm))`. A program costs the
//! sum of its steps; a set of per-process programs costs the slowest one.
//! There is no latency term.

use std::fmt;
use std::iter::Sum;
use std::ops::Add;

use crate::error::{Error, Result};
use crate::fabric::{LinkTable, Rank, ELEM_BYTES};
use crate::lowering::{CommOp, IrProgram, IrStep};
use crate::opgen::LocalMatMulOp;

/// Modeled runtime in seconds.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Cost(f64);

impl Cost {
    pub const ZERO: Cost = Cost(0.0);

    pub fn from_seconds(seconds: f64) -> Self {
        debug_assert!(seconds >= 0.0);
        Cost(seconds)
    }

    pub fn seconds(self) -> f64 {
        self.0
    }

    pub fn max(self, other: Cost) -> Cost {
        Cost(self.0.max(other.0))
    }
}

impl Add for Cost {
    type Output = Cost;

    fn add(self, rhs: Cost) -> Cost {
        Cost(self.0 + rhs.0)
    }
}

impl Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::ZERO, Add::add)
    }
}

impl fmt::Display for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6e}s", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineModel {
    /// flops per second
    pub arith_peak: f64,
    /// local memory bandwidth, bytes per second
    pub mem_bw: f64,
    pub links: LinkTable,
}

impl MachineModel {
    pub fn new(arith_peak: f64, mem_bw: f64, links: LinkTable) -> Result<Self> {
        let ok = |x: f64| x > 0.0 && x.is_finite();
        if !ok(arith_peak) || !ok(mem_bw) {
            return Err(Error::Config(format!(
                "machine peaks must be positive (arith {arith_peak}, memory {mem_bw})"
            )));
        }
        Ok(MachineModel {
            arith_peak,
            mem_bw,
            links,
        })
    }
}

pub fn compute_cost(m_len: usize, k_len: usize, n_len: usize, machine: &MachineModel) -> Cost {
    let flops = 2.0 * (m_len * k_len * n_len) as f64;
    let bytes = ELEM_BYTES as f64 * (m_len * k_len + k_len * n_len + m_len * n_len) as f64;
    Cost(f64::max(flops / machine.arith_peak, bytes / machine.mem_bw))
}

pub fn comm_cost(bytes: u64, src: Rank, dst: Rank, machine: &MachineModel) -> Cost {
    Cost(bytes as f64 / machine.links.bandwidth(src, dst))
}

pub fn op_compute_cost(op: &LocalMatMulOp, machine: &MachineModel) -> Cost {
    compute_cost(op.m.len(), op.k.len(), op.n.len(), machine)
}

pub fn comm_op_cost(comm: &CommOp, caller: Rank, machine: &MachineModel) -> Cost {
    match *comm {
        CommOp::Fetch { owner, bytes, .. } => comm_cost(bytes, owner, caller, machine),
        CommOp::Accumulate { owner, bytes, .. } => comm_cost(bytes, caller, owner, machine),
    }
}

/// `(sum of compute, sum of comm)` for one step.
pub fn step_components(step: &IrStep, ops: &[LocalMatMulOp], caller: Rank, machine: &MachineModel) -> (Cost, Cost) {
    let compute = step.compute.iter().map(|&o| op_compute_cost(&ops[o], machine)).sum();
    let comm = step.comm.iter().map(|c| comm_op_cost(c, caller, machine)).sum();
    (compute, comm)
}

pub fn step_cost(step: &IrStep, ops: &[LocalMatMulOp], caller: Rank, machine: &MachineModel) -> Cost {
    let (compute, comm) = step_components(step, ops, caller, machine);
    compute.max(comm)
}

pub fn program_cost(prog: &IrProgram, machine: &MachineModel) -> Cost {
    prog.steps
        .iter()
        .map(|s| step_cost(s, &prog.ops, prog.caller, machine))
        .sum()
}

/// Cost of an SPMD set of programs: the slowest process.
pub fn max_program_cost<'a>(progs: impl IntoIterator<Item = &'a IrProgram>, machine: &MachineModel) -> Cost {
    progs
        .into_iter()
        .map(|p| program_cost(p, machine))
        .fold(Cost::ZERO, Cost::max)
}
