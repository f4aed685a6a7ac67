//! Run configuration and its `key = value` text format.

use std::fmt;
use std::str::FromStr;

use unimul_core::costmodel::MachineModel;
use unimul_core::fabric::{AccumulateMode, LinkTable};
use unimul_core::lowering::{Limits, DEFAULT_EXHAUSTIVE_BOUND};
use unimul_core::opgen::Stationarity;
use unimul_core::runtime::{ExecConfig, ExecMode};
use unimul_core::tiling::{square_grid, Mapping, PartitionSpec, Shape2D};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type ConfigResult<T> = std::result::Result<T, ConfigError>;

/// How one operand is split into tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartDesc {
    Row,
    Col,
    TwoD,
    /// Explicit tile shape. The process grid defaults to the most-square
    /// grid of the replica's ranks; the mapping defaults to block-cyclic.
    Custom {
        tile: Shape2D,
        grid: Option<Shape2D>,
        mapping: Mapping,
    },
}

impl PartDesc {
    pub fn spec(&self, global: Shape2D, nprocs: usize) -> unimul_core::Result<PartitionSpec> {
        match *self {
            PartDesc::Row => PartitionSpec::row_block(global, nprocs),
            PartDesc::Col => PartitionSpec::col_block(global, nprocs),
            PartDesc::TwoD => PartitionSpec::block_2d(global, nprocs),
            PartDesc::Custom { tile, grid, mapping } => {
                PartitionSpec::new(tile, grid.unwrap_or_else(|| square_grid(nprocs)), mapping)
            }
        }
    }
}

fn parse_shape(s: &str) -> Option<Shape2D> {
    let (r, c) = s.split_once('x')?;
    Some(Shape2D::new(r.trim().parse().ok()?, c.trim().parse().ok()?))
}

impl FromStr for PartDesc {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "row" => return Ok(PartDesc::Row),
            "col" => return Ok(PartDesc::Col),
            "2d" => return Ok(PartDesc::TwoD),
            _ => {}
        }
        let bad = || format!("unknown partition '{s}' (expected row, col, 2d or custom:RxC[:PRxPC][:block|cyclic])");
        let mut parts = s.split(':');
        if parts.next() != Some("custom") {
            return Err(bad());
        }
        let tile = parts.next().and_then(parse_shape).ok_or_else(bad)?;
        let mut grid = None;
        let mut mapping = Mapping::BlockCyclic;
        for extra in parts {
            match extra {
                "block" => mapping = Mapping::Block,
                "cyclic" => mapping = Mapping::BlockCyclic,
                g => grid = Some(parse_shape(g).ok_or_else(bad)?),
            }
        }
        Ok(PartDesc::Custom { tile, grid, mapping })
    }
}

impl fmt::Display for PartDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartDesc::Row => f.write_str("row"),
            PartDesc::Col => f.write_str("col"),
            PartDesc::TwoD => f.write_str("2d"),
            PartDesc::Custom { tile, grid, mapping } => {
                write!(f, "custom:{tile}")?;
                if let Some(g) = grid {
                    write!(f, ":{g}")?;
                }
                f.write_str(match mapping {
                    Mapping::Block => ":block",
                    Mapping::BlockCyclic => "",
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StationarityChoice {
    Fixed(Stationarity),
    /// Lowest modeled cost, ties to Stationary C.
    Auto,
}

impl FromStr for StationarityChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "a" => Ok(StationarityChoice::Fixed(Stationarity::StationaryA)),
            "b" => Ok(StationarityChoice::Fixed(Stationarity::StationaryB)),
            "c" => Ok(StationarityChoice::Fixed(Stationarity::StationaryC)),
            "auto" => Ok(StationarityChoice::Auto),
            _ => Err(format!("unknown stationarity '{s}' (expected a, b, c or auto)")),
        }
    }
}

impl fmt::Display for StationarityChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StationarityChoice::Fixed(st) => f.write_str(short_stationarity(*st)),
            StationarityChoice::Auto => f.write_str("auto"),
        }
    }
}

pub fn short_stationarity(st: Stationarity) -> &'static str {
    match st {
        Stationarity::StationaryA => "a",
        Stationarity::StationaryB => "b",
        Stationarity::StationaryC => "c",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lowerer {
    Greedy,
    CostGreedy,
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Direct,
    Ir(Lowerer),
}

impl FromStr for Execution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct" => Ok(Execution::Direct),
            "ir:greedy" => Ok(Execution::Ir(Lowerer::Greedy)),
            "ir:cost" => Ok(Execution::Ir(Lowerer::CostGreedy)),
            "ir:exhaustive" => Ok(Execution::Ir(Lowerer::Exhaustive)),
            _ => Err(format!(
                "unknown execution '{s}' (expected direct, ir:greedy, ir:cost or ir:exhaustive)"
            )),
        }
    }
}

impl fmt::Display for Execution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Execution::Direct => "direct",
            Execution::Ir(Lowerer::Greedy) => "ir:greedy",
            Execution::Ir(Lowerer::CostGreedy) => "ir:cost",
            Execution::Ir(Lowerer::Exhaustive) => "ir:exhaustive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Topology {
    Uniform,
    /// Groups of `group` consecutive ranks share `link_bw`; traffic between
    /// groups gets `inter_bw`.
    TwoLevel { group: usize, inter_bw: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub p: usize,
    /// Partitions of A, B and C.
    pub parts: [PartDesc; 3],
    /// Replication factors of A, B and C.
    pub reps: [usize; 3],
    pub stationarity: StationarityChoice,
    pub execution: Execution,
    pub mode: ExecMode,
    pub limits: Limits,
    pub exhaustive_bound: usize,
    pub prefetch_depth: usize,
    pub max_inflight_gemms: usize,
    pub max_inflight_accums: usize,
    pub accumulate_mode: AccumulateMode,
    pub pool_capacity: usize,
    pub arith_peak: f64,
    pub mem_bw: f64,
    pub link_bw: f64,
    pub topology: Topology,
    pub seed: u64,
    /// Continuous inputs instead of small integers.
    pub real: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let exec = ExecConfig::default();
        RunConfig {
            m: 12,
            n: 12,
            k: 12,
            p: 4,
            parts: [PartDesc::TwoD; 3],
            reps: [1, 1, 1],
            stationarity: StationarityChoice::Fixed(Stationarity::StationaryC),
            execution: Execution::Direct,
            mode: ExecMode::Lockstep,
            limits: Limits::new(1, 1),
            exhaustive_bound: DEFAULT_EXHAUSTIVE_BOUND,
            prefetch_depth: exec.prefetch_depth,
            max_inflight_gemms: exec.max_inflight_gemms,
            max_inflight_accums: exec.max_inflight_accums,
            accumulate_mode: exec.accumulate_mode,
            pool_capacity: exec.pool_capacity,
            arith_peak: 1e12,
            mem_bw: 1e11,
            link_bw: 1e10,
            topology: Topology::Uniform,
            seed: 0,
            real: false,
        }
    }
}

const OPERANDS: [&str; 3] = ["a", "b", "c"];

impl RunConfig {
    /// Checks every cross-field constraint. Partitions are checked again
    /// when the matrices are built.
    pub fn validate(&self) -> ConfigResult<()> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.p == 0 {
            return invalid("p must be at least 1".into());
        }
        if self.m == 0 || self.n == 0 || self.k == 0 {
            return invalid(format!("matrix dimensions must be positive (m={} n={} k={})", self.m, self.n, self.k));
        }
        for (name, c) in OPERANDS.iter().zip(self.reps) {
            if c == 0 || !self.p.is_multiple_of(c) {
                return invalid(format!("c_{name} = {c}: replication must divide process count {}", self.p));
            }
        }
        for (name, v) in [
            ("max_compute", self.limits.max_compute),
            ("max_comm", self.limits.max_comm),
            ("prefetch", self.prefetch_depth),
            ("max_gemms", self.max_inflight_gemms),
            ("max_accums", self.max_inflight_accums),
            ("pool", self.pool_capacity),
        ] {
            if v == 0 {
                return invalid(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [("arith_peak", self.arith_peak), ("mem_bw", self.mem_bw), ("link_bw", self.link_bw)] {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be positive"));
            }
        }
        if let Topology::TwoLevel { group, inter_bw } = self.topology {
            if group == 0 || !(inter_bw > 0.0 && inter_bw.is_finite()) {
                return invalid("two-level topology needs a positive group size and bandwidth".into());
            }
        }
        Ok(())
    }

    pub fn shapes(&self) -> [Shape2D; 3] {
        [
            Shape2D::new(self.m, self.k),
            Shape2D::new(self.k, self.n),
            Shape2D::new(self.m, self.n),
        ]
    }

    pub fn exec_config(&self, stationarity: Stationarity) -> ExecConfig {
        ExecConfig {
            stationarity,
            prefetch_depth: self.prefetch_depth,
            max_inflight_gemms: self.max_inflight_gemms,
            max_inflight_accums: self.max_inflight_accums,
            accumulate_mode: self.accumulate_mode,
            pool_capacity: self.pool_capacity,
        }
    }

    pub fn machine(&self) -> unimul_core::Result<MachineModel> {
        let links = match self.topology {
            Topology::Uniform => LinkTable::uniform(self.p, self.link_bw)?,
            Topology::TwoLevel { group, inter_bw } => LinkTable::two_level(self.p, group, self.link_bw, inter_bw)?,
        };
        MachineModel::new(self.arith_peak, self.mem_bw, links)
    }

    /// Compact one-line description used as the CSV `config` column.
    pub fn id(&self) -> String {
        format!(
            "m={} n={} k={} p={} a={} b={} c={} c_a={} c_b={} c_c={} stationarity={} exec={}",
            self.m,
            self.n,
            self.k,
            self.p,
            self.parts[0],
            self.parts[1],
            self.parts[2],
            self.reps[0],
            self.reps[1],
            self.reps[2],
            self.stationarity,
            self.execution
        )
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse '{v}'"))
        }
        match key {
            "m" => self.m = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "p" => self.p = num(key, value)?,
            "a" => self.parts[0] = value.parse()?,
            "b" => self.parts[1] = value.parse()?,
            "c" => self.parts[2] = value.parse()?,
            "c_a" => self.reps[0] = num(key, value)?,
            "c_b" => self.reps[1] = num(key, value)?,
            "c_c" => self.reps[2] = num(key, value)?,
            "stationarity" => self.stationarity = value.parse()?,
            "exec" => self.execution = value.parse()?,
            "mode" => {
                self.mode = match value {
                    "lockstep" => ExecMode::Lockstep,
                    "threaded" => ExecMode::Threaded,
                    _ => return Err(format!("unknown mode '{value}' (expected lockstep or threaded)")),
                }
            }
            "limits" => {
                let s = parse_shape(value).ok_or_else(|| format!("limits: expected CxM, got '{value}'"))?;
                self.limits = Limits::new(s.rows, s.cols);
            }
            "exhaustive_bound" => self.exhaustive_bound = num(key, value)?,
            "prefetch" => self.prefetch_depth = num(key, value)?,
            "max_gemms" => self.max_inflight_gemms = num(key, value)?,
            "max_accums" => self.max_inflight_accums = num(key, value)?,
            "pool" => self.pool_capacity = num(key, value)?,
            "accumulate" => {
                self.accumulate_mode = match value {
                    "atomic" => AccumulateMode::PeerAtomic,
                    "lock" => AccumulateMode::LockGetPut,
                    _ => return Err(format!("unknown accumulate mode '{value}' (expected atomic or lock)")),
                }
            }
            "arith_peak" => self.arith_peak = num(key, value)?,
            "mem_bw" => self.mem_bw = num(key, value)?,
            "link_bw" => self.link_bw = num(key, value)?,
            "topology" => {
                self.topology = if value == "uniform" {
                    Topology::Uniform
                } else {
                    let rest = value
                        .strip_prefix("two-level:")
                        .ok_or_else(|| format!("unknown topology '{value}' (expected uniform or two-level:G:BW)"))?;
                    let (g, bw) = rest
                        .split_once(':')
                        .ok_or_else(|| format!("topology: expected two-level:G:BW, got '{value}'"))?;
                    Topology::TwoLevel {
                        group: num(key, g)?,
                        inter_bw: num(key, bw)?,
                    }
                }
            }
            "seed" => self.seed = num(key, value)?,
            "real" => self.real = num(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }
}

/// One `key = value` entry with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits text into entries. `#` starts a comment; blank lines are skipped.
/// A key may appear only once.
pub fn entries(text: &str) -> ConfigResult<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Parse {
            line,
            msg: format!("expected 'key = value', got '{body}'"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Parse {
                line,
                msg: "empty key or value".into(),
            });
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(ConfigError::Parse {
                line,
                msg: format!("'{key}' already set on line {}", prev.line),
            });
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

pub fn parse_config(text: &str) -> ConfigResult<RunConfig> {
    let mut cfg = RunConfig::default();
    for e in entries(text)? {
        cfg.set(&e.key, &e.value)
            .map_err(|msg| ConfigError::Parse { line: e.line, msg })?;
    }
    Ok(cfg)
}

/// Parses a sweep: the same grammar, where each value may be a
/// comma-separated list. Yields the cross product in file order with the
/// last key varying fastest. A file without entries is an empty sweep.
pub fn parse_sweep(text: &str) -> ConfigResult<Vec<RunConfig>> {
    let entries = entries(text)?;
    if entries.is_empty() {
        return Ok(Vec::new());
    }
    let axes: Vec<(Entry, Vec<String>)> = entries
        .into_iter()
        .map(|e| {
            let values: Vec<String> = e.value.split(',').map(|v| v.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                return Err(ConfigError::Parse {
                    line: e.line,
                    msg: "empty item in list".into(),
                });
            }
            // catch syntax errors up front, before any run starts
            let mut probe = RunConfig::default();
            for v in &values {
                probe
                    .set(&e.key, v)
                    .map_err(|msg| ConfigError::Parse { line: e.line, msg })?;
            }
            Ok((e, values))
        })
        .collect::<ConfigResult<_>>()?;

    let mut configs = vec![RunConfig::default()];
    for (e, values) in &axes {
        let mut next = Vec::with_capacity(configs.len() * values.len());
        for base in &configs {
            for v in values {
                let mut cfg = base.clone();
                cfg.set(&e.key, v).expect("checked above");
                next.push(cfg);
            }
        }
        configs = next;
    }
    Ok(configs)
}
