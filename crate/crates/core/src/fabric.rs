//! Simulated one-sided communication fabric.
//!
//! Every logical process can allocate symmetric segments of `f64` storage.
//! Any process may then read a remote segment (`get`, `get_async`) or add
//! into it (`accumulate`) without the owner taking part. All traffic is
//! recorded in per-link byte and message counters; the fabric does not model
//! time.
//!
//! Elements are stored as `AtomicU64` bit patterns, so reads are never torn
//! and peer-atomic accumulation is linearizable per element.

use std::fmt;
use std::io::{self, Write};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::tiling::Range;

pub const ELEM_BYTES: u64 = std::mem::size_of::<f64>() as u64;

/// Logical process id in `[0, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Rank(pub usize);

impl Rank {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// How a remote accumulate is carried out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AccumulateMode {
    /// Element-wise atomic add through peer access.
    #[default]
    PeerAtomic,
    /// Lock the destination segment, get the range, add locally, put it back.
    LockGetPut,
}

impl AccumulateMode {
    fn traffic_multiplier(self) -> u64 {
        match self {
            AccumulateMode::PeerAtomic => 1,
            AccumulateMode::LockGetPut => 2,
        }
    }
}

struct SegmentStorage {
    data: Box<[AtomicU64]>,
    // one coarse lock per segment for LockGetPut
    lock: Mutex<()>,
}

/// Handle to a symmetric memory segment owned by one rank.
#[derive(Clone)]
pub struct SymSegment {
    id: usize,
    owner: Rank,
    storage: Arc<SegmentStorage>,
}

impl fmt::Debug for SymSegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymSegment")
            .field("id", &self.id)
            .field("owner", &self.owner)
            .field("len", &self.len())
            .finish()
    }
}

impl SymSegment {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn owner(&self) -> Rank {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.storage.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    // Direct access used by the owner through tile views. Not counted.

    pub(crate) fn load(&self, idx: usize) -> f64 {
        f64::from_bits(self.storage.data[idx].load(Ordering::Acquire))
    }

    pub(crate) fn store(&self, idx: usize, value: f64) {
        self.storage.data[idx].store(value.to_bits(), Ordering::Release);
    }

    pub(crate) fn add(&self, idx: usize, value: f64) {
        atomic_add(&self.storage.data[idx], value);
    }
}

fn atomic_add(cell: &AtomicU64, value: f64) {
    let mut cur = cell.load(Ordering::Relaxed);
    loop {
        let next = (f64::from_bits(cur) + value).to_bits();
        match cell.compare_exchange_weak(cur, next, Ordering::AcqRel, Ordering::Relaxed) {
            Ok(_) => return,
            Err(seen) => cur = seen,
        }
    }
}

/// A strided 2D block of a segment: `rows` runs of `cols` elements, each run
/// starting `stride` elements after the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
}

impl Region {
    pub fn contiguous(range: Range) -> Self {
        Region {
            offset: range.lo,
            rows: 1,
            cols: range.len(),
            stride: range.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.rows).flat_map(move |r| {
            let start = self.offset + r * self.stride;
            start..start + self.cols
        })
    }

    fn check(&self, seg_len: usize) -> Result<()> {
        if self.is_empty() {
            return if self.offset <= seg_len {
                Ok(())
            } else {
                Err(Error::OutOfSegment {
                    lo: self.offset,
                    hi: self.offset,
                    len: seg_len,
                })
            };
        }
        let end = self.offset + (self.rows - 1) * self.stride + self.cols;
        if (self.rows > 1 && self.cols > self.stride) || end > seg_len {
            return Err(Error::OutOfSegment {
                lo: self.offset,
                hi: end,
                len: seg_len,
            });
        }
        Ok(())
    }
}

/// Future for an asynchronous get. The contents become available through
/// [`PendingCopy::wait`], which may be called once.
#[derive(Debug)]
pub struct PendingCopy {
    data: Option<Vec<f64>>,
    outstanding: Arc<AtomicUsize>,
}

impl PendingCopy {
    pub fn is_complete(&self) -> bool {
        self.data.is_none()
    }

    pub fn wait(&mut self) -> Result<Vec<f64>> {
        match self.data.take() {
            Some(buf) => {
                self.outstanding.fetch_sub(1, Ordering::AcqRel);
                Ok(buf)
            }
            None => Err(Error::Usage("pending copy was already waited on".into())),
        }
    }
}

/// Point-to-point bandwidths in bytes per second.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkTable {
    nprocs: usize,
    bandwidth: Vec<f64>,
}

impl LinkTable {
    pub fn uniform(nprocs: usize, bytes_per_sec: f64) -> Result<Self> {
        Self::two_level(nprocs, nprocs.max(1), bytes_per_sec, bytes_per_sec)
    }

    /// Ranks are grouped into consecutive blocks of `group_size` ("nodes").
    /// Links inside a group run at `intra`, links between groups at `inter`.
    pub fn two_level(nprocs: usize, group_size: usize, intra: f64, inter: f64) -> Result<Self> {
        if nprocs == 0 || group_size == 0 {
            return Err(Error::Config("link table needs at least one rank per group".into()));
        }
        if !(intra > 0.0 && inter > 0.0 && intra.is_finite() && inter.is_finite()) {
            return Err(Error::Config(format!(
                "link bandwidths must be positive and finite (got {intra}, {inter})"
            )));
        }
        let mut bandwidth = Vec::with_capacity(nprocs * nprocs);
        for src in 0..nprocs {
            for dst in 0..nprocs {
                let same = src / group_size == dst / group_size;
                bandwidth.push(if same { intra } else { inter });
            }
        }
        Ok(LinkTable { nprocs, bandwidth })
    }

    pub fn from_matrix(nprocs: usize, bandwidth: Vec<f64>) -> Result<Self> {
        if bandwidth.len() != nprocs * nprocs {
            return Err(Error::Config(format!(
                "link table needs {} entries, got {}",
                nprocs * nprocs,
                bandwidth.len()
            )));
        }
        if bandwidth.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(Error::Config("link bandwidths must be positive and finite".into()));
        }
        Ok(LinkTable { nprocs, bandwidth })
    }

    pub fn nprocs(&self) -> usize {
        self.nprocs
    }

    pub fn bandwidth(&self, src: Rank, dst: Rank) -> f64 {
        self.bandwidth[src.0 * self.nprocs + dst.0]
    }
}

/// The shared fabric for `p` logical processes.
pub struct Fabric {
    nprocs: usize,
    bytes: Vec<AtomicU64>,
    msgs: Vec<AtomicU64>,
    flops: Vec<AtomicU64>,
    next_segment: AtomicUsize,
    outstanding: Arc<AtomicUsize>,
}

impl fmt::Debug for Fabric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fabric")
            .field("nprocs", &self.nprocs)
            .field("segments", &self.next_segment.load(Ordering::Relaxed))
            .finish()
    }
}

impl Fabric {
    pub fn new(nprocs: usize) -> Result<Self> {
        if nprocs == 0 {
            return Err(Error::Config("the fabric needs at least one process".into()));
        }
        let zeros = |n: usize| (0..n).map(|_| AtomicU64::new(0)).collect::<Vec<_>>();
        Ok(Fabric {
            nprocs,
            bytes: zeros(nprocs * nprocs),
            msgs: zeros(nprocs * nprocs),
            flops: zeros(nprocs),
            next_segment: AtomicUsize::new(0),
            outstanding: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn nprocs(&self) -> usize {
        self.nprocs
    }

    fn check_rank(&self, rank: Rank) -> Result<()> {
        if rank.0 >= self.nprocs {
            Err(Error::RankOutOfRange {
                rank: rank.0,
                nprocs: self.nprocs,
            })
        } else {
            Ok(())
        }
    }

    /// Allocates a zero-filled segment owned by `owner`.
    pub fn alloc(&self, owner: Rank, len: usize) -> Result<SymSegment> {
        self.check_rank(owner)?;
        let data = (0..len).map(|_| AtomicU64::new(0f64.to_bits())).collect();
        Ok(SymSegment {
            id: self.next_segment.fetch_add(1, Ordering::Relaxed),
            owner,
            storage: Arc::new(SegmentStorage {
                data,
                lock: Mutex::new(()),
            }),
        })
    }

    fn record(&self, initiator: Rank, target: Rank, bytes: u64, msgs: u64) {
        let link = initiator.0 * self.nprocs + target.0;
        self.bytes[link].fetch_add(bytes, Ordering::Relaxed);
        self.msgs[link].fetch_add(msgs, Ordering::Relaxed);
    }

    pub fn get(&self, caller: Rank, seg: &SymSegment, range: Range) -> Result<Vec<f64>> {
        self.get_region(caller, seg, Region::contiguous(range))
    }

    pub fn get_region(&self, caller: Rank, seg: &SymSegment, region: Region) -> Result<Vec<f64>> {
        self.check_rank(caller)?;
        region.check(seg.len())?;
        if region.is_empty() {
            return Ok(Vec::new());
        }
        let buf = region.indices().map(|idx| seg.load(idx)).collect();
        self.record(caller, seg.owner, region.len() as u64 * ELEM_BYTES, 1);
        Ok(buf)
    }

    /// Issues a get whose result is retrieved with [`PendingCopy::wait`].
    /// Traffic is counted at issue time.
    pub fn get_async(&self, caller: Rank, seg: &SymSegment, range: Range) -> Result<PendingCopy> {
        self.get_region_async(caller, seg, Region::contiguous(range))
    }

    pub fn get_region_async(&self, caller: Rank, seg: &SymSegment, region: Region) -> Result<PendingCopy> {
        let data = self.get_region(caller, seg, region)?;
        self.outstanding.fetch_add(1, Ordering::AcqRel);
        Ok(PendingCopy {
            data: Some(data),
            outstanding: Arc::clone(&self.outstanding),
        })
    }

    /// Number of async copies issued but not yet waited on.
    pub fn outstanding_async(&self) -> usize {
        self.outstanding.load(Ordering::Acquire)
    }

    pub fn accumulate(
        &self,
        caller: Rank,
        seg: &SymSegment,
        range: Range,
        values: &[f64],
        mode: AccumulateMode,
    ) -> Result<()> {
        self.accumulate_region(caller, seg, Region::contiguous(range), values, mode)
    }

    /// Element-wise `seg[region] += values`, with `values` laid out row-major
    /// over the region.
    pub fn accumulate_region(
        &self,
        caller: Rank,
        seg: &SymSegment,
        region: Region,
        values: &[f64],
        mode: AccumulateMode,
    ) -> Result<()> {
        self.check_rank(caller)?;
        if values.len() != region.len() {
            return Err(Error::Contract(format!(
                "accumulate of {} values into a region of {} elements",
                values.len(),
                region.len()
            )));
        }
        region.check(seg.len())?;
        if region.is_empty() {
            return Ok(());
        }
        match mode {
            AccumulateMode::PeerAtomic => {
                for (idx, &v) in region.indices().zip(values) {
                    seg.add(idx, v);
                }
            }
            AccumulateMode::LockGetPut => {
                let _guard = seg.storage.lock.lock().unwrap_or_else(|e| e.into_inner());
                let fetched: Vec<f64> = region.indices().map(|idx| seg.load(idx)).collect();
                for ((idx, old), v) in region.indices().zip(fetched).zip(values) {
                    seg.store(idx, old + v);
                }
            }
        }
        let mult = mode.traffic_multiplier();
        self.record(caller, seg.owner, mult * region.len() as u64 * ELEM_BYTES, mult);
        Ok(())
    }

    pub fn record_flops(&self, rank: Rank, flops: u64) {
        self.flops[rank.0].fetch_add(flops, Ordering::Relaxed);
    }

    pub fn counters(&self) -> CounterSnapshot {
        let load = |v: &[AtomicU64]| v.iter().map(|a| a.load(Ordering::Relaxed)).collect();
        CounterSnapshot {
            nprocs: self.nprocs,
            bytes: load(&self.bytes),
            msgs: load(&self.msgs),
            flops: load(&self.flops),
        }
    }

    /// Off-process bytes moved so far.
    pub fn comm_bytes(&self) -> u64 {
        self.counters().comm_bytes()
    }
}

/// Point-in-time copy of the fabric counters. Link counters are indexed by
/// (initiating rank, target rank).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub nprocs: usize,
    pub bytes: Vec<u64>,
    pub msgs: Vec<u64>,
    pub flops: Vec<u64>,
}

impl CounterSnapshot {
    pub fn bytes(&self, src: Rank, dst: Rank) -> u64 {
        self.bytes[src.0 * self.nprocs + dst.0]
    }

    pub fn msgs(&self, src: Rank, dst: Rank) -> u64 {
        self.msgs[src.0 * self.nprocs + dst.0]
    }

    pub fn flops(&self, rank: Rank) -> u64 {
        self.flops[rank.0]
    }

    fn links(&self) -> impl Iterator<Item = (usize, usize, u64, u64)> + '_ {
        (0..self.nprocs).flat_map(move |s| {
            (0..self.nprocs).map(move |d| {
                let link = s * self.nprocs + d;
                (s, d, self.bytes[link], self.msgs[link])
            })
        })
    }

    /// Bytes between distinct ranks.
    pub fn comm_bytes(&self) -> u64 {
        self.links().filter(|l| l.0 != l.1).map(|l| l.2).sum()
    }

    /// Bytes a rank moved within its own memory through fabric calls.
    pub fn local_bytes(&self) -> u64 {
        self.links().filter(|l| l.0 == l.1).map(|l| l.2).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.flops.iter().sum()
    }

    /// Counter growth since `earlier`.
    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        let diff = |a: &[u64], b: &[u64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        CounterSnapshot {
            nprocs: self.nprocs,
            bytes: diff(&self.bytes, &earlier.bytes),
            msgs: diff(&self.msgs, &earlier.msgs),
            flops: diff(&self.flops, &earlier.flops),
        }
    }

    /// `src,dst,bytes,msgs`, one row per ordered pair with nonzero traffic.
    pub fn write_links_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "src,dst,bytes,msgs")?;
        for (s, d, bytes, msgs) in self.links() {
            if bytes > 0 || msgs > 0 {
                writeln!(w, "{s},{d},{bytes},{msgs}")?;
            }
        }
        Ok(())
    }

    /// `rank,flops`, one row per rank.
    pub fn write_flops_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "rank,flops")?;
        for (rank, flops) in self.flops.iter().enumerate() {
            writeln!(w, "{rank},{flops}")?;
        }
        Ok(())
    }
}
