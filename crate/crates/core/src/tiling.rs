//! Index arithmetic for tiled matrices.
//!
//! Everything here is a pure function of shapes and partition descriptors:
//! tile grids, tile bounds, overlap queries and tile-to-process placement.
//! Indices are global, zero-based and row-major. Edge tiles are clipped to
//! the global shape rather than padded, so a grid may contain ragged tiles
//! along its last row and column.

use std::fmt;

use crate::error::{Error, Result};
use crate::fabric::Rank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape2D {
    pub rows: usize,
    pub cols: usize,
}

impl Shape2D {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Shape2D { rows, cols }
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols
    }
}

impl fmt::Display for Shape2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Half-open index range `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Range {
    pub lo: usize,
    pub hi: usize,
}

impl Range {
    /// Panics if `lo > hi`.
    pub fn new(lo: usize, hi: usize) -> Self {
        assert!(lo <= hi, "range [{lo},{hi}) has lo > hi");
        Range { lo, hi }
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.lo == self.hi
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.lo <= idx && idx < self.hi
    }

    /// True when `other` lies entirely inside `self`. Empty ranges are
    /// contained anywhere within `[lo, hi]`.
    pub fn covers(&self, other: &Range) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn intersect(&self, other: &Range) -> Range {
        intersect(*self, *other)
    }
}

impl fmt::Display for Range {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.lo, self.hi)
    }
}

/// Intersection of two ranges. Disjoint or touching ranges produce the
/// canonical empty range `[max(lo), max(lo))`.
pub fn intersect(a: Range, b: Range) -> Range {
    let lo = a.lo.max(b.lo);
    let hi = a.hi.min(b.hi);
    if lo >= hi {
        Range { lo, hi: lo }
    } else {
        Range { lo, hi }
    }
}

/// A rectangular slice of a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Bounds2D {
    pub rows: Range,
    pub cols: Range,
}

impl Bounds2D {
    pub fn new(rows: Range, cols: Range) -> Self {
        Bounds2D { rows, cols }
    }

    /// The full `[0, rows) x [0, cols)` slice of a shape.
    pub fn full(shape: Shape2D) -> Self {
        Bounds2D::new(Range::new(0, shape.rows), Range::new(0, shape.cols))
    }

    pub fn shape(&self) -> Shape2D {
        Shape2D::new(self.rows.len(), self.cols.len())
    }

    pub fn area(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() || self.cols.is_empty()
    }

    pub fn intersect(&self, other: &Bounds2D) -> Bounds2D {
        Bounds2D::new(self.rows.intersect(&other.rows), self.cols.intersect(&other.cols))
    }

    pub fn covers(&self, other: &Bounds2D) -> bool {
        self.rows.covers(&other.rows) && self.cols.covers(&other.cols)
    }
}

impl fmt::Display for Bounds2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Position of a tile in a tile grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct TileIdx {
    pub i: usize,
    pub j: usize,
}

impl TileIdx {
    pub const fn new(i: usize, j: usize) -> Self {
        TileIdx { i, j }
    }
}

impl fmt::Display for TileIdx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.i, self.j)
    }
}

/// Number of tiles along each dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, t: TileIdx) -> bool {
        t.i < self.rows && t.j < self.cols
    }

    /// All tiles in row-major order.
    pub fn tiles(&self) -> impl Iterator<Item = TileIdx> + '_ {
        let cols = self.cols;
        (0..self.rows).flat_map(move |i| (0..cols).map(move |j| TileIdx::new(i, j)))
    }

    pub fn linear(&self, t: TileIdx) -> usize {
        t.i * self.cols + t.j
    }
}

/// How tiles are placed on the process grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mapping {
    /// Contiguous blocks of tiles per process.
    Block,
    /// Tiles dealt round-robin over the process grid in both dimensions.
    BlockCyclic,
}

/// ScaLAPACK-style partition of one matrix replica: a tile shape, a process
/// grid, and a placement rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PartitionSpec {
    pub tile_shape: Shape2D,
    pub proc_grid: Shape2D,
    pub mapping: Mapping,
}

impl PartitionSpec {
    pub fn new(tile_shape: Shape2D, proc_grid: Shape2D, mapping: Mapping) -> Result<Self> {
        if tile_shape.rows == 0 || tile_shape.cols == 0 {
            return Err(Error::Config(format!("tile shape {tile_shape} has a zero dimension")));
        }
        if proc_grid.rows == 0 || proc_grid.cols == 0 {
            return Err(Error::Config(format!("process grid {proc_grid} has a zero dimension")));
        }
        Ok(PartitionSpec {
            tile_shape,
            proc_grid,
            mapping,
        })
    }

    /// Row blocks: one tile of `ceil(m/p)` rows per process.
    pub fn row_block(global: Shape2D, nprocs: usize) -> Result<Self> {
        check_descriptor_inputs(global, nprocs)?;
        PartitionSpec::new(
            Shape2D::new(global.rows.div_ceil(nprocs), global.cols),
            Shape2D::new(nprocs, 1),
            Mapping::Block,
        )
    }

    /// Column blocks: one tile of `ceil(n/p)` columns per process.
    pub fn col_block(global: Shape2D, nprocs: usize) -> Result<Self> {
        check_descriptor_inputs(global, nprocs)?;
        PartitionSpec::new(
            Shape2D::new(global.rows, global.cols.div_ceil(nprocs)),
            Shape2D::new(1, nprocs),
            Mapping::Block,
        )
    }

    /// 2D blocks over the most-square process grid (see [`square_grid`]).
    pub fn block_2d(global: Shape2D, nprocs: usize) -> Result<Self> {
        check_descriptor_inputs(global, nprocs)?;
        let grid = square_grid(nprocs);
        PartitionSpec::new(
            Shape2D::new(global.rows.div_ceil(grid.rows), global.cols.div_ceil(grid.cols)),
            grid,
            Mapping::Block,
        )
    }

    pub fn nprocs(&self) -> usize {
        self.proc_grid.area()
    }

    /// Checks that this partition can place every tile of a `global` matrix
    /// on `nprocs` ranks.
    pub fn validate(&self, global: Shape2D, nprocs: usize) -> Result<()> {
        if global.rows == 0 || global.cols == 0 {
            return Err(Error::Config(format!("global shape {global} has a zero dimension")));
        }
        if self.proc_grid.area() != nprocs {
            return Err(Error::Config(format!(
                "process grid {} has {} ranks but the replica spans {} ranks",
                self.proc_grid,
                self.proc_grid.area(),
                nprocs
            )));
        }
        if self.mapping == Mapping::Block {
            let grid = grid_shape(self, global);
            if grid.rows > self.proc_grid.rows || grid.cols > self.proc_grid.cols {
                return Err(Error::Config(format!(
                    "block mapping needs the {}x{} tile grid to fit the {} process grid",
                    grid.rows, grid.cols, self.proc_grid
                )));
            }
        }
        Ok(())
    }
}

fn check_descriptor_inputs(global: Shape2D, nprocs: usize) -> Result<()> {
    if nprocs == 0 {
        return Err(Error::Config("process count must be at least 1".into()));
    }
    if global.rows == 0 || global.cols == 0 {
        return Err(Error::Config(format!("global shape {global} has a zero dimension")));
    }
    Ok(())
}

/// Most-square factorization `g_r x g_c = p` with `g_r <= g_c`.
pub fn square_grid(nprocs: usize) -> Shape2D {
    let mut rows = 1;
    let mut r = 1;
    while r * r <= nprocs {
        if nprocs.is_multiple_of(r) {
            rows = r;
        }
        r += 1;
    }
    Shape2D::new(rows, nprocs / rows)
}

pub fn grid_shape(part: &PartitionSpec, global: Shape2D) -> GridShape {
    GridShape {
        rows: global.rows.div_ceil(part.tile_shape.rows),
        cols: global.cols.div_ceil(part.tile_shape.cols),
    }
}

pub fn tile_bounds(part: &PartitionSpec, global: Shape2D, t: TileIdx) -> Result<Bounds2D> {
    let grid = grid_shape(part, global);
    if !grid.contains(t) {
        return Err(Error::TileOutOfGrid {
            tile: t,
            rows: grid.rows,
            cols: grid.cols,
        });
    }
    let (tr, tc) = (part.tile_shape.rows, part.tile_shape.cols);
    Ok(Bounds2D::new(
        Range::new(t.i * tr, ((t.i + 1) * tr).min(global.rows)),
        Range::new(t.j * tc, ((t.j + 1) * tc).min(global.cols)),
    ))
}

/// Tiles whose bounds intersect `slice` with nonzero area, row-major.
pub fn overlapping_tiles(part: &PartitionSpec, global: Shape2D, slice: Bounds2D) -> Vec<TileIdx> {
    let slice = slice.intersect(&Bounds2D::full(global));
    if slice.is_empty() {
        return Vec::new();
    }
    let (tr, tc) = (part.tile_shape.rows, part.tile_shape.cols);
    let rows = slice.rows.lo / tr..slice.rows.hi.div_ceil(tr);
    let cols = slice.cols.lo / tc..slice.cols.hi.div_ceil(tc);
    rows.flat_map(|i| cols.clone().map(move |j| TileIdx::new(i, j)))
        .collect()
}

/// Rank (within one replica) that owns tile `t`.
pub fn owner_of(part: &PartitionSpec, grid: GridShape, t: TileIdx, nprocs_in_replica: usize) -> Result<Rank> {
    if part.proc_grid.area() != nprocs_in_replica {
        return Err(Error::Config(format!(
            "process grid {} does not match {} ranks per replica",
            part.proc_grid, nprocs_in_replica
        )));
    }
    if !grid.contains(t) {
        return Err(Error::TileOutOfGrid {
            tile: t,
            rows: grid.rows,
            cols: grid.cols,
        });
    }
    let pg = part.proc_grid;
    let (pi, pj) = match part.mapping {
        Mapping::Block => {
            if grid.rows > pg.rows || grid.cols > pg.cols {
                return Err(Error::Config(format!(
                    "block mapping needs the {}x{} tile grid to fit the {} process grid",
                    grid.rows, grid.cols, pg
                )));
            }
            let per_row = grid.rows.div_ceil(pg.rows);
            let per_col = grid.cols.div_ceil(pg.cols);
            (t.i / per_row, t.j / per_col)
        }
        Mapping::BlockCyclic => (t.i % pg.rows, t.j % pg.cols),
    };
    Ok(Rank(pi * pg.cols + pj))
}
