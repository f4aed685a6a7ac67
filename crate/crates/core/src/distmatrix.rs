//! Distributed matrices with replication.
//!
//! A matrix is stored as `c` replicas. Each replica is split into tiles by
//! one [`PartitionSpec`] and spread over `p / c` consecutive ranks: replica
//! `r` lives on ranks `[r * p/c, (r+1) * p/c)`. Each tile is one row-major
//! fabric segment owned by a single rank.
//!
//! Calls that take an optional replica index default to the caller's own
//! replica, so code written for the unreplicated case works unchanged when
//! any operand is replicated.

use std::fmt;
use std::sync::Arc;

use crate::dense::{MatAccum, MatRead, Matrix};
use crate::error::{Error, Result};
use crate::fabric::{AccumulateMode, Fabric, PendingCopy, Rank, Region, SymSegment};
use crate::tiling::{self, Bounds2D, GridShape, PartitionSpec, Range, Shape2D, TileIdx};

pub struct DistributedMatrix {
    name: String,
    global: Shape2D,
    part: PartitionSpec,
    replicas: usize,
    grid: GridShape,
    fabric: Arc<Fabric>,
    // replica-major, then row-major over the tile grid
    segments: Vec<SymSegment>,
}

impl fmt::Debug for DistributedMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DistributedMatrix")
            .field("name", &self.name)
            .field("global", &self.global)
            .field("part", &self.part)
            .field("replicas", &self.replicas)
            .finish()
    }
}

impl DistributedMatrix {
    /// Allocates all replicas and fills each one from `init(row, col)`.
    pub fn create(
        fabric: &Arc<Fabric>,
        name: impl Into<String>,
        global: Shape2D,
        part: PartitionSpec,
        replicas: usize,
        init: impl Fn(usize, usize) -> f64,
    ) -> Result<Self> {
        let nprocs = fabric.nprocs();
        if replicas == 0 || !nprocs.is_multiple_of(replicas) {
            return Err(Error::Config(format!(
                "replication factor {replicas} must divide the process count {nprocs}"
            )));
        }
        let per_replica = nprocs / replicas;
        part.validate(global, per_replica)?;
        let grid = tiling::grid_shape(&part, global);

        let mut segments = Vec::with_capacity(replicas * grid.len());
        for replica in 0..replicas {
            for t in grid.tiles() {
                let local = tiling::owner_of(&part, grid, t, per_replica)?;
                let owner = Rank(local.0 + replica * per_replica);
                let bounds = tiling::tile_bounds(&part, global, t)?;
                let seg = fabric.alloc(owner, bounds.area())?;
                for (idx, (r, c)) in cells(&bounds).enumerate() {
                    seg.store(idx, init(r, c));
                }
                segments.push(seg);
            }
        }
        Ok(DistributedMatrix {
            name: name.into(),
            global,
            part,
            replicas,
            grid,
            fabric: Arc::clone(fabric),
            segments,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn global(&self) -> Shape2D {
        self.global
    }

    pub fn partition(&self) -> &PartitionSpec {
        &self.part
    }

    pub fn replication(&self) -> usize {
        self.replicas
    }

    pub fn grid_shape(&self) -> GridShape {
        self.grid
    }

    pub fn fabric(&self) -> &Arc<Fabric> {
        &self.fabric
    }

    pub fn ranks_per_replica(&self) -> usize {
        self.fabric.nprocs() / self.replicas
    }

    pub fn replica_of(&self, rank: Rank) -> usize {
        rank.0 / self.ranks_per_replica()
    }

    pub fn tile_bounds(&self, t: TileIdx) -> Result<Bounds2D> {
        tiling::tile_bounds(&self.part, self.global, t)
    }

    pub fn overlapping_tiles(&self, slice: Bounds2D) -> Vec<TileIdx> {
        tiling::overlapping_tiles(&self.part, self.global, slice)
    }

    fn check_replica(&self, replica: usize) -> Result<()> {
        if replica >= self.replicas {
            Err(Error::ReplicaOutOfRange {
                replica,
                factor: self.replicas,
            })
        } else {
            Ok(())
        }
    }

    fn check_tile(&self, t: TileIdx) -> Result<()> {
        if self.grid.contains(t) {
            Ok(())
        } else {
            Err(Error::TileOutOfGrid {
                tile: t,
                rows: self.grid.rows,
                cols: self.grid.cols,
            })
        }
    }

    fn resolve_replica(&self, replica: Option<usize>, caller: Rank) -> Result<usize> {
        let r = replica.unwrap_or_else(|| self.replica_of(caller));
        self.check_replica(r)?;
        Ok(r)
    }

    fn segment(&self, t: TileIdx, replica: usize) -> &SymSegment {
        &self.segments[replica * self.grid.len() + self.grid.linear(t)]
    }

    pub fn owner(&self, t: TileIdx, replica: usize) -> Result<Rank> {
        self.check_tile(t)?;
        self.check_replica(replica)?;
        Ok(self.segment(t, replica).owner())
    }

    /// Whether `rank` owns tile `t` in its own replica.
    pub fn is_local(&self, t: TileIdx, rank: Rank) -> bool {
        self.grid.contains(t) && self.segment(t, self.replica_of(rank)).owner() == rank
    }

    /// Tiles owned by `rank` in its own replica, row-major.
    pub fn local_tiles(&self, rank: Rank) -> Vec<TileIdx> {
        let replica = self.replica_of(rank);
        self.grid
            .tiles()
            .filter(|&t| self.segment(t, replica).owner() == rank)
            .collect()
    }

    /// Zero-copy view of a tile the caller owns.
    pub fn tile(&self, t: TileIdx, replica: Option<usize>, caller: Rank) -> Result<TileView<'_>> {
        self.check_tile(t)?;
        let replica = self.resolve_replica(replica, caller)?;
        let seg = self.segment(t, replica);
        if seg.owner() != caller {
            return Err(Error::NotOwner {
                caller: caller.0,
                tile: t,
                replica,
            });
        }
        Ok(TileView {
            tile: t,
            replica,
            bounds: self.tile_bounds(t)?,
            seg,
        })
    }

    pub fn get_tile(&self, t: TileIdx, replica: Option<usize>, caller: Rank) -> Result<TileCopy> {
        self.check_tile(t)?;
        let replica = self.resolve_replica(replica, caller)?;
        let seg = self.segment(t, replica);
        let bounds = self.tile_bounds(t)?;
        let data = self.fabric.get(caller, seg, Range::new(0, seg.len()))?;
        Ok(TileCopy {
            tile: t,
            replica,
            bounds,
            data: Matrix::from_vec(bounds.rows.len(), bounds.cols.len(), data),
        })
    }

    pub fn get_tile_async(&self, t: TileIdx, replica: Option<usize>, caller: Rank) -> Result<PendingTile> {
        self.check_tile(t)?;
        let replica = self.resolve_replica(replica, caller)?;
        let seg = self.segment(t, replica);
        let pending = self.fabric.get_async(caller, seg, Range::new(0, seg.len()))?;
        Ok(PendingTile {
            tile: t,
            replica,
            bounds: self.tile_bounds(t)?,
            pending,
        })
    }

    /// Adds `values` into `slice` (tile-local coordinates) of tile `t`.
    pub fn accumulate_tile(
        &self,
        replica: Option<usize>,
        t: TileIdx,
        values: &Matrix,
        slice: Bounds2D,
        caller: Rank,
        mode: AccumulateMode,
    ) -> Result<()> {
        self.check_tile(t)?;
        let replica = self.resolve_replica(replica, caller)?;
        let shape = self.tile_bounds(t)?.shape();
        if !Bounds2D::full(shape).covers(&slice) {
            return Err(Error::Contract(format!(
                "slice {slice} is not inside a {shape} tile"
            )));
        }
        if values.shape() != slice.shape() {
            return Err(Error::Contract(format!(
                "{} values for a {} slice",
                values.shape(),
                slice.shape()
            )));
        }
        self.accumulate_tile_slice(Some(replica), t, values.as_slice(), slice, caller, mode)
    }

    /// Like [`accumulate_tile`](Self::accumulate_tile) with `values` given as
    /// a row-major buffer of exactly `slice.area()` elements.
    pub fn accumulate_tile_slice(
        &self,
        replica: Option<usize>,
        t: TileIdx,
        values: &[f64],
        slice: Bounds2D,
        caller: Rank,
        mode: AccumulateMode,
    ) -> Result<()> {
        self.check_tile(t)?;
        let replica = self.resolve_replica(replica, caller)?;
        let shape = self.tile_bounds(t)?.shape();
        if !Bounds2D::full(shape).covers(&slice) {
            return Err(Error::Contract(format!(
                "slice {slice} is not inside a {shape} tile"
            )));
        }
        let region = Region {
            offset: slice.rows.lo * shape.cols + slice.cols.lo,
            rows: slice.rows.len(),
            cols: slice.cols.len(),
            stride: shape.cols,
        };
        self.fabric
            .accumulate_region(caller, self.segment(t, replica), region, values, mode)
    }

    /// The share of [`reduce_replicas`](Self::reduce_replicas) performed by
    /// `caller`: for each tile it owns in `origin`, pull the same tile from
    /// every other replica and add it in.
    pub fn reduce_replicas_for(&self, origin: usize, caller: Rank) -> Result<()> {
        self.check_replica(origin)?;
        if self.replica_of(caller) != origin {
            return Ok(());
        }
        for t in self.local_tiles(caller) {
            let mut view = self.tile(t, Some(origin), caller)?;
            for r in (0..self.replicas).filter(|&r| r != origin) {
                let copy = self.get_tile(t, Some(r), caller)?;
                view.add_from(&copy.data);
            }
        }
        Ok(())
    }

    /// Sums every replica into replica `origin`. Requires quiescence.
    pub fn reduce_replicas(&self, origin: usize) -> Result<()> {
        self.check_replica(origin)?;
        for rank in 0..self.fabric.nprocs() {
            self.reduce_replicas_for(origin, Rank(rank))?;
        }
        Ok(())
    }

    /// The share of [`broadcast_replica`](Self::broadcast_replica) performed
    /// by `caller`: overwrite its tiles with the origin replica's copies.
    pub fn broadcast_replica_for(&self, origin: usize, caller: Rank) -> Result<()> {
        self.check_replica(origin)?;
        if self.replica_of(caller) == origin {
            return Ok(());
        }
        for t in self.local_tiles(caller) {
            let copy = self.get_tile(t, Some(origin), caller)?;
            let view = self.tile(t, None, caller)?;
            view.overwrite(&copy.data);
        }
        Ok(())
    }

    /// Copies replica `origin` over every other replica. Requires quiescence.
    pub fn broadcast_replica(&self, origin: usize) -> Result<()> {
        self.check_replica(origin)?;
        for rank in 0..self.fabric.nprocs() {
            self.broadcast_replica_for(origin, Rank(rank))?;
        }
        Ok(())
    }

    /// Overwrites one replica from `f(row, col)`. Not counted as traffic.
    pub fn fill_replica(&self, replica: usize, f: impl Fn(usize, usize) -> f64) -> Result<()> {
        self.check_replica(replica)?;
        for t in self.grid.tiles() {
            let bounds = self.tile_bounds(t)?;
            let seg = self.segment(t, replica);
            for (idx, (r, c)) in cells(&bounds).enumerate() {
                seg.store(idx, f(r, c));
            }
        }
        Ok(())
    }

    /// Dense copy of replica 0.
    pub fn gather(&self) -> Matrix {
        self.gather_replica(0).expect("replica 0 always exists")
    }

    /// Dense copy of one replica, read directly from storage. Requires
    /// quiescence; not counted as traffic.
    pub fn gather_replica(&self, replica: usize) -> Result<Matrix> {
        self.check_replica(replica)?;
        let mut out = Matrix::zeros(self.global.rows, self.global.cols);
        for t in self.grid.tiles() {
            let bounds = self.tile_bounds(t)?;
            let seg = self.segment(t, replica);
            for (idx, (r, c)) in cells(&bounds).enumerate() {
                out.set(r, c, seg.load(idx));
            }
        }
        Ok(out)
    }
}

fn cells(bounds: &Bounds2D) -> impl Iterator<Item = (usize, usize)> {
    let cols = bounds.cols;
    (bounds.rows.lo..bounds.rows.hi).flat_map(move |r| (cols.lo..cols.hi).map(move |c| (r, c)))
}

/// Mutable view of a tile owned by the calling rank. Writes go straight to
/// the owning segment with element-wise atomic adds, so remote accumulates
/// landing concurrently are never lost.
pub struct TileView<'a> {
    tile: TileIdx,
    replica: usize,
    bounds: Bounds2D,
    seg: &'a SymSegment,
}

impl TileView<'_> {
    pub fn tile(&self) -> TileIdx {
        self.tile
    }

    pub fn replica(&self) -> usize {
        self.replica
    }

    /// Global bounds of the tile.
    pub fn bounds(&self) -> Bounds2D {
        self.bounds
    }

    pub fn to_matrix(&self) -> Matrix {
        let s = self.bounds.shape();
        Matrix::from_fn(s.rows, s.cols, |r, c| self.at(r, c))
    }

    fn add_from(&mut self, values: &Matrix) {
        for (idx, &v) in values.as_slice().iter().enumerate() {
            self.seg.add(idx, v);
        }
    }

    fn overwrite(&self, values: &Matrix) {
        for (idx, &v) in values.as_slice().iter().enumerate() {
            self.seg.store(idx, v);
        }
    }
}

impl MatRead for TileView<'_> {
    fn shape(&self) -> Shape2D {
        self.bounds.shape()
    }

    fn at(&self, row: usize, col: usize) -> f64 {
        self.seg.load(row * self.bounds.cols.len() + col)
    }
}

impl MatAccum for TileView<'_> {
    fn add_at(&mut self, row: usize, col: usize, value: f64) {
        self.seg.add(row * self.bounds.cols.len() + col, value);
    }
}

/// Private copy of a tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileCopy {
    pub tile: TileIdx,
    pub replica: usize,
    pub bounds: Bounds2D,
    pub data: Matrix,
}

impl MatRead for TileCopy {
    fn shape(&self) -> Shape2D {
        self.data.shape()
    }

    fn at(&self, row: usize, col: usize) -> f64 {
        self.data.get(row, col)
    }
}

/// Future for [`DistributedMatrix::get_tile_async`].
#[derive(Debug)]
pub struct PendingTile {
    tile: TileIdx,
    replica: usize,
    bounds: Bounds2D,
    pending: PendingCopy,
}

impl PendingTile {
    pub fn tile(&self) -> TileIdx {
        self.tile
    }

    pub fn wait(&mut self) -> Result<TileCopy> {
        let data = self.pending.wait()?;
        Ok(TileCopy {
            tile: self.tile,
            replica: self.replica,
            bounds: self.bounds,
            data: Matrix::from_vec(self.bounds.rows.len(), self.bounds.cols.len(), data),
        })
    }
}
