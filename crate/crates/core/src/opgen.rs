//! Generation of each process's local matrix-multiply ops by slicing.
//!
//! The caller walks the tiles it owns of the stationary matrix, asks the
//! other two matrices which of their tiles overlap, and intersects the three
//! tiles' bounds to get the exact `m`, `k` and `n` slices to multiply. Tiles
//! of the three operands need not line up.
//!
//! When the stationary matrix is replicated `c` times, replica `r` only
//! handles chunk `r` of the dimension the stationary tile leaves free:
//! `k` for Stationary C, `n` for Stationary A and `m` for Stationary B.
//! Chunks are a floor split with the remainder in the last chunk.

use std::fmt;

use crate::distmatrix::DistributedMatrix;
use crate::error::{Error, Result};
use crate::fabric::Rank;
use crate::tiling::{intersect, Bounds2D, Range, TileIdx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stationarity {
    StationaryA,
    StationaryB,
    StationaryC,
}

impl Stationarity {
    pub const ALL: [Stationarity; 3] = [
        Stationarity::StationaryA,
        Stationarity::StationaryB,
        Stationarity::StationaryC,
    ];

    pub fn operand(self) -> Operand {
        match self {
            Stationarity::StationaryA => Operand::A,
            Stationarity::StationaryB => Operand::B,
            Stationarity::StationaryC => Operand::C,
        }
    }
}

impl fmt::Display for Stationarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stationarity::StationaryA => "stationary-a",
            Stationarity::StationaryB => "stationary-b",
            Stationarity::StationaryC => "stationary-c",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operand {
    A,
    B,
    C,
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operand::A => "A",
            Operand::B => "B",
            Operand::C => "C",
        })
    }
}

/// One component multiply `C[m, n] += A[m, k] * B[k, n]` over slices of three
/// tiles. `m`, `k`, `n` are global; the `*_local` bounds are the same slices
/// relative to each tile's origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LocalMatMulOp {
    pub a_tile: TileIdx,
    pub b_tile: TileIdx,
    pub c_tile: TileIdx,
    pub m: Range,
    pub k: Range,
    pub n: Range,
    pub a_local: Bounds2D,
    pub b_local: Bounds2D,
    pub c_local: Bounds2D,
}

impl LocalMatMulOp {
    pub fn flops(&self) -> u64 {
        2 * (self.m.len() * self.k.len() * self.n.len()) as u64
    }

    pub fn tile(&self, operand: Operand) -> TileIdx {
        match operand {
            Operand::A => self.a_tile,
            Operand::B => self.b_tile,
            Operand::C => self.c_tile,
        }
    }

    /// The tile of the stationary operand.
    pub fn stationary_tile(&self, stationarity: Stationarity) -> TileIdx {
        self.tile(stationarity.operand())
    }
}

impl fmt::Display for LocalMatMulOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "a={} b={} c={} m={} k={} n={}",
            self.a_tile, self.b_tile, self.c_tile, self.m, self.k, self.n
        )
    }
}

/// The three operands of `C += A * B`.
#[derive(Debug, Clone, Copy)]
pub struct MatMulOperands<'a> {
    pub a: &'a DistributedMatrix,
    pub b: &'a DistributedMatrix,
    pub c: &'a DistributedMatrix,
}

impl<'a> MatMulOperands<'a> {
    pub fn new(a: &'a DistributedMatrix, b: &'a DistributedMatrix, c: &'a DistributedMatrix) -> Result<Self> {
        let (ga, gb, gc) = (a.global(), b.global(), c.global());
        if ga.cols != gb.rows || ga.rows != gc.rows || gb.cols != gc.cols {
            return Err(Error::Config(format!(
                "shapes do not conform: A is {ga}, B is {gb}, C is {gc}"
            )));
        }
        let p = a.fabric().nprocs();
        if b.fabric().nprocs() != p || c.fabric().nprocs() != p {
            return Err(Error::Config("operands live on fabrics of different sizes".into()));
        }
        Ok(MatMulOperands { a, b, c })
    }

    pub fn get(&self, operand: Operand) -> &'a DistributedMatrix {
        match operand {
            Operand::A => self.a,
            Operand::B => self.b,
            Operand::C => self.c,
        }
    }

    pub fn m(&self) -> usize {
        self.a.global().rows
    }

    pub fn k(&self) -> usize {
        self.a.global().cols
    }

    pub fn n(&self) -> usize {
        self.b.global().cols
    }

    pub fn nprocs(&self) -> usize {
        self.a.fabric().nprocs()
    }
}

/// Chunk `replica` of `full` when it is split `c` ways.
pub fn restrict_for_replication(full: Range, c: usize, replica: usize) -> Range {
    assert!(c >= 1 && replica < c, "replica {replica} out of range for factor {c}");
    let chunk = full.len() / c;
    let lo = full.lo + replica * chunk;
    let hi = if replica + 1 == c { full.hi } else { lo + chunk };
    Range::new(lo, hi)
}

/// Converts global bounds to coordinates relative to a containing tile.
pub fn global_to_local(global: Bounds2D, tile: Bounds2D) -> Result<Bounds2D> {
    if !tile.covers(&global) {
        return Err(Error::Contract(format!("bounds {global} are not inside tile {tile}")));
    }
    let shift = |r: Range, origin: usize| Range::new(r.lo - origin, r.hi - origin);
    Ok(Bounds2D::new(
        shift(global.rows, tile.rows.lo),
        shift(global.cols, tile.cols.lo),
    ))
}

struct Placed {
    idx: TileIdx,
    bounds: Bounds2D,
}

fn make_op(a: &Placed, b: &Placed, c: &Placed, m: Range, k: Range, n: Range) -> Result<Option<LocalMatMulOp>> {
    if m.is_empty() || k.is_empty() || n.is_empty() {
        return Ok(None);
    }
    Ok(Some(LocalMatMulOp {
        a_tile: a.idx,
        b_tile: b.idx,
        c_tile: c.idx,
        m,
        k,
        n,
        a_local: global_to_local(Bounds2D::new(m, k), a.bounds)?,
        b_local: global_to_local(Bounds2D::new(k, n), b.bounds)?,
        c_local: global_to_local(Bounds2D::new(m, n), c.bounds)?,
    }))
}

fn place(matrix: &DistributedMatrix, idx: TileIdx) -> Result<Placed> {
    Ok(Placed {
        idx,
        bounds: matrix.tile_bounds(idx)?,
    })
}

pub fn generate(stationarity: Stationarity, ops: &MatMulOperands<'_>, caller: Rank) -> Result<Vec<LocalMatMulOp>> {
    match stationarity {
        Stationarity::StationaryA => generate_stationary_a(ops, caller),
        Stationarity::StationaryB => generate_stationary_b(ops, caller),
        Stationarity::StationaryC => generate_stationary_c(ops, caller),
    }
}

pub fn generate_stationary_c(ops: &MatMulOperands<'_>, caller: Rank) -> Result<Vec<LocalMatMulOp>> {
    let (a, b, c) = (ops.a, ops.b, ops.c);
    let inner = restrict_for_replication(Range::new(0, ops.k()), c.replication(), c.replica_of(caller));
    let mut out = Vec::new();
    for c_idx in c.local_tiles(caller) {
        let ct = place(c, c_idx)?;
        for a_idx in a.overlapping_tiles(Bounds2D::new(ct.bounds.rows, inner)) {
            let at = place(a, a_idx)?;
            let k_rows = intersect(at.bounds.cols, inner);
            for b_idx in b.overlapping_tiles(Bounds2D::new(k_rows, ct.bounds.cols)) {
                let bt = place(b, b_idx)?;
                let m = intersect(ct.bounds.rows, at.bounds.rows);
                let k = intersect(k_rows, bt.bounds.rows);
                let n = intersect(bt.bounds.cols, ct.bounds.cols);
                out.extend(make_op(&at, &bt, &ct, m, k, n)?);
            }
        }
    }
    Ok(out)
}

pub fn generate_stationary_b(ops: &MatMulOperands<'_>, caller: Rank) -> Result<Vec<LocalMatMulOp>> {
    let (a, b, c) = (ops.a, ops.b, ops.c);
    let rows = restrict_for_replication(Range::new(0, ops.m()), b.replication(), b.replica_of(caller));
    let mut out = Vec::new();
    for b_idx in b.local_tiles(caller) {
        let bt = place(b, b_idx)?;
        for a_idx in a.overlapping_tiles(Bounds2D::new(rows, bt.bounds.rows)) {
            let at = place(a, a_idx)?;
            let m_rows = intersect(at.bounds.rows, rows);
            for c_idx in c.overlapping_tiles(Bounds2D::new(m_rows, bt.bounds.cols)) {
                let ct = place(c, c_idx)?;
                let m = intersect(ct.bounds.rows, m_rows);
                let k = intersect(at.bounds.cols, bt.bounds.rows);
                let n = intersect(bt.bounds.cols, ct.bounds.cols);
                out.extend(make_op(&at, &bt, &ct, m, k, n)?);
            }
        }
    }
    Ok(out)
}

pub fn generate_stationary_a(ops: &MatMulOperands<'_>, caller: Rank) -> Result<Vec<LocalMatMulOp>> {
    let (a, b, c) = (ops.a, ops.b, ops.c);
    let cols = restrict_for_replication(Range::new(0, ops.n()), a.replication(), a.replica_of(caller));
    let mut out = Vec::new();
    for a_idx in a.local_tiles(caller) {
        let at = place(a, a_idx)?;
        for b_idx in b.overlapping_tiles(Bounds2D::new(at.bounds.cols, cols)) {
            let bt = place(b, b_idx)?;
            let n_cols = intersect(bt.bounds.cols, cols);
            for c_idx in c.overlapping_tiles(Bounds2D::new(at.bounds.rows, n_cols)) {
                let ct = place(c, c_idx)?;
                let m = intersect(ct.bounds.rows, at.bounds.rows);
                let k = intersect(at.bounds.cols, bt.bounds.rows);
                let n = intersect(n_cols, ct.bounds.cols);
                out.extend(make_op(&at, &bt, &ct, m, k, n)?);
            }
        }
    }
    Ok(out)
}

/// Dimension split across replicas of the stationary operand, as
/// `(split extent, product of the other two dimensions)`.
pub fn replicated_split(stationarity: Stationarity, m: usize, n: usize, k: usize) -> (usize, usize) {
    match stationarity {
        Stationarity::StationaryC => (k, m * n),
        Stationarity::StationaryA => (n, m * k),
        Stationarity::StationaryB => (m, k * n),
    }
}
