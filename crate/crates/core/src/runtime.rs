//! Execution of op lists and IR programs over the fabric.
//!
//! Every logical process is a small state machine that advances one action
//! at a time. In [`ExecMode::Lockstep`] the driver steps all processes
//! round-robin on the calling thread, which makes runs fully deterministic.
//! In [`ExecMode::Threaded`] each process runs on its own thread.
//!
//! Direct execution follows the op list (rotated by the iteration offset):
//! remote A/B tiles of the next `prefetch_depth` ops are fetched
//! asynchronously, caller-owned tiles are read in place, and ops whose C tile
//! is remote multiply into a pooled scratch buffer that is then accumulated
//! remotely. At most `max_inflight_gemms` GEMMs and `max_inflight_accums`
//! accumulates are outstanding per process.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::thread;

use crate::dense::{MatAccum, MatRead, Matrix};
use crate::distmatrix::{PendingTile, TileCopy, TileView};
use crate::error::{Error, Result};
use crate::fabric::{AccumulateMode, Rank};
use crate::lowering::{build_graph, validate, CommOp, IrProgram};
use crate::opgen::{self, LocalMatMulOp, MatMulOperands, Operand, Stationarity};
use crate::tiling::{Bounds2D, Shape2D, TileIdx};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecConfig {
    pub stationarity: Stationarity,
    pub prefetch_depth: usize,
    pub max_inflight_gemms: usize,
    pub max_inflight_accums: usize,
    pub accumulate_mode: AccumulateMode,
    pub pool_capacity: usize,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            stationarity: Stationarity::StationaryC,
            prefetch_depth: 2,
            max_inflight_gemms: 2,
            max_inflight_accums: 2,
            accumulate_mode: AccumulateMode::PeerAtomic,
            pool_capacity: 4,
        }
    }
}

impl ExecConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("prefetch_depth", self.prefetch_depth),
            ("max_inflight_gemms", self.max_inflight_gemms),
            ("max_inflight_accums", self.max_inflight_accums),
            ("pool_capacity", self.pool_capacity),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Lockstep,
    Threaded,
}

/// Handle to a buffer taken from a [`BufferPool`].
#[derive(Debug, PartialEq, Eq)]
pub struct PoolBuf {
    index: usize,
    shape: Shape2D,
}

impl PoolBuf {
    pub fn shape(&self) -> Shape2D {
        self.shape
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PoolStats {
    pub capacity: usize,
    pub acquired: u64,
    pub released: u64,
    pub peak_in_use: usize,
}

/// Fixed arena of scratch buffers, each large enough for the biggest tile
/// slice it will ever hold. Nothing is allocated after construction.
#[derive(Debug)]
pub struct BufferPool {
    buffers: Vec<Vec<f64>>,
    free: Vec<usize>,
    stats: PoolStats,
}

impl BufferPool {
    pub fn new(capacity: usize, elems: usize) -> Self {
        BufferPool {
            buffers: (0..capacity).map(|_| vec![0.0; elems]).collect(),
            free: (0..capacity).rev().collect(),
            stats: PoolStats {
                capacity,
                ..PoolStats::default()
            },
        }
    }

    pub fn available(&self) -> usize {
        self.free.len()
    }

    pub fn in_use(&self) -> usize {
        self.buffers.len() - self.free.len()
    }

    /// A zeroed buffer of the given shape, or `None` when every buffer is
    /// taken. Panics if the shape exceeds the buffer size.
    pub fn try_acquire(&mut self, shape: Shape2D) -> Option<PoolBuf> {
        let index = self.free.pop()?;
        let buf = &mut self.buffers[index];
        assert!(shape.area() <= buf.len(), "{shape} does not fit a pool buffer");
        buf[..shape.area()].fill(0.0);
        self.stats.acquired += 1;
        self.stats.peak_in_use = self.stats.peak_in_use.max(self.in_use());
        Some(PoolBuf { index, shape })
    }

    pub fn data(&self, buf: &PoolBuf) -> &[f64] {
        &self.buffers[buf.index][..buf.shape.area()]
    }

    pub fn view_mut(&mut self, buf: &PoolBuf) -> SliceMut<'_> {
        SliceMut {
            shape: buf.shape,
            data: &mut self.buffers[buf.index][..buf.shape.area()],
        }
    }

    pub fn release(&mut self, buf: PoolBuf) {
        debug_assert!(!self.free.contains(&buf.index));
        self.free.push(buf.index);
        self.stats.released += 1;
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }
}

/// Row-major mutable matrix over a borrowed buffer.
pub struct SliceMut<'a> {
    shape: Shape2D,
    data: &'a mut [f64],
}

impl MatRead for SliceMut<'_> {
    fn shape(&self) -> Shape2D {
        self.shape
    }

    fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape.cols + col]
    }
}

impl MatAccum for SliceMut<'_> {
    fn add_at(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.shape.cols + col] += value;
    }
}

/// Start index into an op list: the sum of the stationary tile's indices.
pub fn iteration_offset(stationary_tile: TileIdx, nops: usize) -> usize {
    assert!(nops >= 1, "iteration offset of an empty op list");
    (stationary_tile.i + stationary_tile.j) % nops
}

/// Rotates each run of ops sharing a stationary tile by that tile's
/// iteration offset. With one stationary tile per process this is a rotation
/// of the whole list.
pub fn apply_iteration_offset(ops: &[LocalMatMulOp], stationarity: Stationarity) -> Vec<LocalMatMulOp> {
    let mut out = Vec::with_capacity(ops.len());
    let mut start = 0;
    while start < ops.len() {
        let tile = ops[start].stationary_tile(stationarity);
        let end = start + ops[start..].iter().take_while(|o| o.stationary_tile(stationarity) == tile).count();
        let group = &ops[start..end];
        let offset = iteration_offset(tile, group.len());
        out.extend(group[offset..].iter().chain(&group[..offset]).copied());
        start = end;
    }
    out
}

/// `c[c_slice] += a[a_slice] * b[b_slice]`, all slices in local coordinates.
/// Returns the flop count `2 * m * k * n`.
pub fn local_gemm(
    a: &impl MatRead,
    a_slice: Bounds2D,
    b: &impl MatRead,
    b_slice: Bounds2D,
    c: &mut impl MatAccum,
    c_slice: Bounds2D,
) -> Result<u64> {
    let (m, k, n) = (a_slice.rows.len(), a_slice.cols.len(), b_slice.cols.len());
    if b_slice.rows.len() != k || c_slice.rows.len() != m || c_slice.cols.len() != n {
        return Err(Error::Contract(format!(
            "gemm slices do not conform: A {} B {} C {}",
            a_slice.shape(),
            b_slice.shape(),
            c_slice.shape()
        )));
    }
    for (name, slice, shape) in [("A", a_slice, a.shape()), ("B", b_slice, b.shape()), ("C", c_slice, c.shape())] {
        if !Bounds2D::full(shape).covers(&slice) {
            return Err(Error::Contract(format!("{name} slice {slice} is outside a {shape} block")));
        }
    }
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a.at(a_slice.rows.lo + i, a_slice.cols.lo + l) * b.at(b_slice.rows.lo + l, b_slice.cols.lo + j);
            }
            if k > 0 {
                c.add_at(c_slice.rows.lo + i, c_slice.cols.lo + j, acc);
            }
        }
    }
    Ok(2 * (m * k * n) as u64)
}

/// An input tile, read in place or from a private copy.
enum Input<'a> {
    Local(TileView<'a>),
    Fetched(Arc<TileCopy>),
}

impl MatRead for Input<'_> {
    fn shape(&self) -> Shape2D {
        match self {
            Input::Local(v) => v.shape(),
            Input::Fetched(c) => c.shape(),
        }
    }

    fn at(&self, row: usize, col: usize) -> f64 {
        match self {
            Input::Local(v) => v.at(row, col),
            Input::Fetched(c) => c.at(row, col),
        }
    }
}

/// Something a process did, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Fetch { operand: Operand, tile: TileIdx },
    GemmLaunch { op: usize },
    GemmDone { op: usize },
    AccumIssue { op: usize },
    AccumDone { op: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProcReport {
    pub caller: Rank,
    /// Ops in the order they were launched.
    pub order: Vec<LocalMatMulOp>,
    pub events: Vec<Event>,
    pub peak_inflight_gemms: usize,
    pub peak_inflight_accums: usize,
    pub pool: PoolStats,
    pub actions: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunReport {
    pub procs: Vec<ProcReport>,
}

impl RunReport {
    pub fn ops(&self) -> usize {
        self.procs.iter().map(|p| p.order.len()).sum()
    }
}

trait Process: Send {
    /// Performs one action. Returns `false` once there is nothing left.
    fn advance(&mut self) -> Result<bool>;
    fn finish(self) -> Result<ProcReport>;
}

fn drive<P: Process>(procs: Vec<P>, mode: ExecMode) -> Result<Vec<ProcReport>> {
    match mode {
        ExecMode::Lockstep => {
            let mut procs: Vec<(P, bool)> = procs.into_iter().map(|p| (p, true)).collect();
            while procs.iter().any(|(_, live)| *live) {
                for (p, live) in procs.iter_mut().filter(|(_, live)| *live) {
                    *live = p.advance()?;
                }
            }
            procs.into_iter().map(|(p, _)| p.finish()).collect()
        }
        ExecMode::Threaded => thread::scope(|s| {
            let handles: Vec<_> = procs
                .into_iter()
                .map(|mut p| {
                    s.spawn(move || {
                        while p.advance()? {}
                        p.finish()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                .collect()
        }),
    }
}

enum Slot {
    Pending(PendingTile),
    Ready(Arc<TileCopy>),
}

struct Gemm<'a> {
    op: usize,
    a: Input<'a>,
    b: Input<'a>,
    scratch: Option<PoolBuf>,
}

struct DirectProc<'a> {
    caller: Rank,
    ops: Vec<LocalMatMulOp>,
    operands: MatMulOperands<'a>,
    cfg: ExecConfig,
    next_launch: usize,
    next_prefetch: usize,
    cache: HashMap<(Operand, TileIdx), Slot>,
    gemms: VecDeque<Gemm<'a>>,
    accums: VecDeque<(usize, PoolBuf)>,
    pool: BufferPool,
    report: ProcReport,
}

impl<'a> DirectProc<'a> {
    fn new(operands: MatMulOperands<'a>, cfg: ExecConfig, caller: Rank, ops: Vec<LocalMatMulOp>) -> Self {
        let elems = ops.iter().map(|o| o.c_local.area()).max().unwrap_or(0);
        DirectProc {
            caller,
            operands,
            cfg,
            next_launch: 0,
            next_prefetch: 0,
            cache: HashMap::new(),
            gemms: VecDeque::new(),
            accums: VecDeque::new(),
            pool: BufferPool::new(cfg.pool_capacity, elems),
            report: ProcReport {
                caller,
                ..ProcReport::default()
            },
            ops,
        }
    }

    /// Whether op `o` writes C through a scratch buffer and an accumulate.
    /// Under LockGetPut, local C updates also go through the segment lock so
    /// they cannot interleave with a remote get-put.
    fn needs_scratch(&self, o: usize) -> bool {
        self.cfg.accumulate_mode == AccumulateMode::LockGetPut || !self.operands.c.is_local(self.ops[o].c_tile, self.caller)
    }

    fn issue_prefetches(&mut self) -> Result<()> {
        let horizon = (self.next_launch + self.cfg.prefetch_depth + 1).min(self.ops.len());
        while self.next_prefetch < horizon {
            let op = self.ops[self.next_prefetch];
            for operand in [Operand::A, Operand::B] {
                let m = self.operands.get(operand);
                let tile = op.tile(operand);
                if m.is_local(tile, self.caller) || self.cache.contains_key(&(operand, tile)) {
                    continue;
                }
                let pending = m.get_tile_async(tile, None, self.caller)?;
                self.report.events.push(Event::Fetch { operand, tile });
                self.cache.insert((operand, tile), Slot::Pending(pending));
            }
            self.next_prefetch += 1;
        }
        Ok(())
    }

    fn input(&mut self, operand: Operand, tile: TileIdx) -> Result<Input<'a>> {
        let m = self.operands.get(operand);
        if m.is_local(tile, self.caller) {
            return Ok(Input::Local(m.tile(tile, None, self.caller)?));
        }
        let slot = self
            .cache
            .get_mut(&(operand, tile))
            .ok_or_else(|| Error::Internal(format!("{operand}{tile} was not prefetched")))?;
        if let Slot::Pending(p) = slot {
            *slot = Slot::Ready(Arc::new(p.wait()?));
        }
        match slot {
            Slot::Ready(copy) => Ok(Input::Fetched(Arc::clone(copy))),
            Slot::Pending(_) => unreachable!(),
        }
    }

    /// Drops cached copies no op in the prefetch window still needs.
    fn evict(&mut self) {
        let window = &self.ops[self.next_launch..self.next_prefetch];
        self.cache.retain(|&(operand, tile), slot| {
            matches!(slot, Slot::Pending(_)) || window.iter().any(|o| o.tile(operand) == tile)
        });
    }

    fn launch(&mut self) -> Result<()> {
        self.issue_prefetches()?;
        let o = self.next_launch;
        let op = self.ops[o];
        let scratch = if self.needs_scratch(o) {
            let shape = op.c_local.shape();
            Some(self.pool.try_acquire(shape).expect("launch is only chosen when a buffer is free"))
        } else {
            None
        };
        let a = self.input(Operand::A, op.a_tile)?;
        let b = self.input(Operand::B, op.b_tile)?;
        self.gemms.push_back(Gemm { op: o, a, b, scratch });
        self.next_launch += 1;
        self.evict();
        self.report.order.push(op);
        self.report.events.push(Event::GemmLaunch { op: o });
        self.report.peak_inflight_gemms = self.report.peak_inflight_gemms.max(self.gemms.len());
        Ok(())
    }

    fn complete_gemm(&mut self) -> Result<()> {
        let g = self.gemms.pop_front().expect("a GEMM is in flight");
        let op = self.ops[g.op];
        let flops = match &g.scratch {
            Some(buf) => {
                let full = Bounds2D::full(buf.shape());
                local_gemm(&g.a, op.a_local, &g.b, op.b_local, &mut self.pool.view_mut(buf), full)?
            }
            None => {
                let mut c = self.operands.c.tile(op.c_tile, None, self.caller)?;
                local_gemm(&g.a, op.a_local, &g.b, op.b_local, &mut c, op.c_local)?
            }
        };
        self.operands.a.fabric().record_flops(self.caller, flops);
        self.report.events.push(Event::GemmDone { op: g.op });
        if let Some(buf) = g.scratch {
            self.accums.push_back((g.op, buf));
            self.report.events.push(Event::AccumIssue { op: g.op });
            self.report.peak_inflight_accums = self.report.peak_inflight_accums.max(self.accums.len());
        }
        Ok(())
    }

    fn complete_accum(&mut self) -> Result<()> {
        let (o, buf) = self.accums.pop_front().expect("an accumulate is in flight");
        let op = self.ops[o];
        self.operands.c.accumulate_tile_slice(
            None,
            op.c_tile,
            self.pool.data(&buf),
            op.c_local,
            self.caller,
            self.cfg.accumulate_mode,
        )?;
        self.pool.release(buf);
        self.report.events.push(Event::AccumDone { op: o });
        Ok(())
    }
}

impl Process for DirectProc<'_> {
    fn advance(&mut self) -> Result<bool> {
        let can_launch = self.next_launch < self.ops.len()
            && self.gemms.len() < self.cfg.max_inflight_gemms
            && (!self.needs_scratch(self.next_launch) || self.pool.available() > 0);
        let front_blocked = self
            .gemms
            .front()
            .is_some_and(|g| g.scratch.is_some() && self.accums.len() >= self.cfg.max_inflight_accums);
        if can_launch {
            self.launch()?;
        } else if !self.gemms.is_empty() && !front_blocked {
            self.complete_gemm()?;
        } else if !self.accums.is_empty() {
            self.complete_accum()?;
        } else {
            debug_assert!(self.next_launch == self.ops.len() && self.gemms.is_empty());
            return Ok(false);
        }
        self.report.actions += 1;
        Ok(true)
    }

    fn finish(mut self) -> Result<ProcReport> {
        for (_, slot) in self.cache.drain() {
            if let Slot::Pending(mut p) = slot {
                p.wait()?;
            }
        }
        self.report.pool = self.pool.stats();
        Ok(self.report)
    }
}

/// Op list of one process for direct execution: opgen output rotated by the
/// iteration offset.
pub fn process_ops(operands: &MatMulOperands<'_>, stationarity: Stationarity, caller: Rank) -> Result<Vec<LocalMatMulOp>> {
    let ops = opgen::generate(stationarity, operands, caller)?;
    Ok(apply_iteration_offset(&ops, stationarity))
}

/// Runs every process's op list directly. Does not reduce replicas.
pub fn run_direct(operands: &MatMulOperands<'_>, cfg: &ExecConfig, mode: ExecMode) -> Result<RunReport> {
    cfg.validate()?;
    let procs = (0..operands.nprocs())
        .map(|r| {
            let caller = Rank(r);
            let ops = process_ops(operands, cfg.stationarity, caller)?;
            Ok(DirectProc::new(*operands, *cfg, caller, ops))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport {
        procs: drive(procs, mode)?,
    })
}

struct IrProc<'a> {
    prog: &'a IrProgram,
    operands: MatMulOperands<'a>,
    mode: AccumulateMode,
    step: usize,
    fetched: HashMap<usize, Arc<TileCopy>>,
    scratch: HashMap<usize, Matrix>,
    /// data node of each op's A and B input
    inputs: Vec<[usize; 2]>,
    report: ProcReport,
}

impl<'a> IrProc<'a> {
    fn new(prog: &'a IrProgram, operands: MatMulOperands<'a>, mode: AccumulateMode) -> Result<Self> {
        let g = build_graph(&prog.ops, &operands, prog.caller)?;
        validate(prog, &g).map_err(|v| Error::InvalidProgram(format!("rank {}: {v}", prog.caller)))?;
        let inputs = g.compute.iter().map(|c| [c.edges[0].data, c.edges[1].data]).collect();
        Ok(IrProc {
            prog,
            operands,
            mode,
            step: 0,
            fetched: HashMap::new(),
            scratch: HashMap::new(),
            inputs,
            report: ProcReport {
                caller: prog.caller,
                ..ProcReport::default()
            },
        })
    }

    fn input(&self, o: usize, operand: Operand) -> Result<Input<'a>> {
        let caller = self.prog.caller;
        let m = self.operands.get(operand);
        let tile = self.prog.ops[o].tile(operand);
        if m.is_local(tile, caller) {
            return Ok(Input::Local(m.tile(tile, None, caller)?));
        }
        let data = self.inputs[o][if operand == Operand::A { 0 } else { 1 }];
        self.fetched
            .get(&data)
            .map(|c| Input::Fetched(Arc::clone(c)))
            .ok_or_else(|| Error::Internal(format!("op {o} ran before {operand}{tile} arrived")))
    }

    fn compute(&mut self, o: usize) -> Result<()> {
        let caller = self.prog.caller;
        let op = self.prog.ops[o];
        let a = self.input(o, Operand::A)?;
        let b = self.input(o, Operand::B)?;
        self.report.order.push(op);
        self.report.events.push(Event::GemmLaunch { op: o });
        let c_local = self.operands.c.is_local(op.c_tile, caller);
        let flops = if c_local && self.mode == AccumulateMode::PeerAtomic {
            let mut c = self.operands.c.tile(op.c_tile, None, caller)?;
            local_gemm(&a, op.a_local, &b, op.b_local, &mut c, op.c_local)?
        } else {
            let shape = op.c_local.shape();
            let mut buf = Matrix::zeros(shape.rows, shape.cols);
            let flops = local_gemm(&a, op.a_local, &b, op.b_local, &mut buf, Bounds2D::full(shape))?;
            if c_local {
                self.operands
                    .c
                    .accumulate_tile(None, op.c_tile, &buf, op.c_local, caller, self.mode)?;
            } else {
                self.scratch.insert(o, buf);
            }
            flops
        };
        self.operands.a.fabric().record_flops(caller, flops);
        self.report.events.push(Event::GemmDone { op: o });
        Ok(())
    }
}

impl Process for IrProc<'_> {
    fn advance(&mut self) -> Result<bool> {
        let Some(step) = self.prog.steps.get(self.step) else {
            return Ok(false);
        };
        let caller = self.prog.caller;
        let mut pending = Vec::new();
        for c in &step.comm {
            if let CommOp::Fetch {
                data,
                operand,
                tile,
                replica,
                ..
            } = *c
            {
                let p = self.operands.get(operand).get_tile_async(tile, Some(replica), caller)?;
                self.report.events.push(Event::Fetch { operand, tile });
                pending.push((data, p));
            }
        }
        for &o in &step.compute {
            self.compute(o)?;
        }
        for c in &step.comm {
            if let CommOp::Accumulate { op, tile, replica, .. } = *c {
                let buf = self
                    .scratch
                    .remove(&op)
                    .ok_or_else(|| Error::Internal(format!("accumulate for op {op} before its compute")))?;
                self.report.events.push(Event::AccumIssue { op });
                let slice = self.prog.ops[op].c_local;
                self.operands
                    .c
                    .accumulate_tile(Some(replica), tile, &buf, slice, caller, self.mode)?;
                self.report.events.push(Event::AccumDone { op });
            }
        }
        for (data, mut p) in pending {
            self.fetched.insert(data, Arc::new(p.wait()?));
        }
        self.step += 1;
        self.report.actions += 1;
        Ok(true)
    }

    fn finish(self) -> Result<ProcReport> {
        Ok(self.report)
    }
}

/// Runs one IR program per process. Each program is validated against the
/// graph rebuilt from its own op list before anything runs.
pub fn run_ir(
    operands: &MatMulOperands<'_>,
    programs: &[IrProgram],
    mode: AccumulateMode,
    exec: ExecMode,
) -> Result<RunReport> {
    let p = operands.nprocs();
    if programs.len() != p || programs.iter().enumerate().any(|(r, prog)| prog.caller != Rank(r)) {
        return Err(Error::InvalidProgram(format!(
            "expected one program per rank 0..{p}, in rank order"
        )));
    }
    let procs = programs
        .iter()
        .map(|prog| IrProc::new(prog, *operands, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport {
        procs: drive(procs, exec)?,
    })
}

/// Sums replicated C into replica 0 after a run. A no-op when C is not
/// replicated.
pub fn finalize(operands: &MatMulOperands<'_>) -> Result<()> {
    if operands.c.replication() > 1 {
        operands.c.reduce_replicas(0)?;
    }
    Ok(())
}

/// Direct multiply followed by the replica reduction.
pub fn multiply(operands: &MatMulOperands<'_>, cfg: &ExecConfig, mode: ExecMode) -> Result<RunReport> {
    let report = run_direct(operands, cfg, mode)?;
    finalize(operands)?;
    Ok(report)
}

/// IR multiply followed by the replica reduction.
pub fn multiply_ir(
    operands: &MatMulOperands<'_>,
    programs: &[IrProgram],
    mode: AccumulateMode,
    exec: ExecMode,
) -> Result<RunReport> {
    let report = run_ir(operands, programs, mode, exec)?;
    finalize(operands)?;
    Ok(report)
}
