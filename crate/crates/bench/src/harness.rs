//! Builds a problem from a [`RunConfig`], runs it, and checks the result
//! against a serial product.

use std::io::Write;
use std::sync::Arc;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unimul_core::costmodel::{max_program_cost, Cost, MachineModel};
use unimul_core::dense::{reference_gemm, Matrix};
use unimul_core::distmatrix::DistributedMatrix;
use unimul_core::fabric::{CounterSnapshot, Fabric, Rank};
use unimul_core::lowering::{
    build_graph, lower_cost_greedy, lower_exhaustive, lower_greedy, validate, CompGraph, IrProgram, Limits,
};
use unimul_core::opgen::{LocalMatMulOp, MatMulOperands, Stationarity};
use unimul_core::runtime;

use crate::config::{short_stationarity, ConfigError, Execution, Lowerer, RunConfig, StationarityChoice};

/// Relative Frobenius error allowed with continuous inputs.
pub const REAL_TOLERANCE: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] unimul_core::Error),
}

pub type RunResultOf<T> = std::result::Result<T, RunError>;

/// Matrices of one run plus the dense inputs for the oracle.
pub struct Problem {
    pub fabric: Arc<Fabric>,
    pub a: DistributedMatrix,
    pub b: DistributedMatrix,
    pub c: DistributedMatrix,
    pub a_dense: Matrix,
    pub b_dense: Matrix,
}

impl Problem {
    pub fn build(cfg: &RunConfig) -> RunResultOf<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sample = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| {
                if cfg.real {
                    rng.gen_range(-8.0..8.0)
                } else {
                    rng.gen_range(-8i32..=8) as f64
                }
            })
        };
        let [sa, sb, sc] = cfg.shapes();
        let a_dense = sample(sa.rows, sa.cols);
        let b_dense = sample(sb.rows, sb.cols);
        let fabric = Arc::new(Fabric::new(cfg.p)?);
        let part = |i: usize, shape| cfg.parts[i].spec(shape, cfg.p / cfg.reps[i]);
        let a = DistributedMatrix::create(&fabric, "A", sa, part(0, sa)?, cfg.reps[0], |r, c| a_dense.get(r, c))?;
        let b = DistributedMatrix::create(&fabric, "B", sb, part(1, sb)?, cfg.reps[1], |r, c| b_dense.get(r, c))?;
        let c = DistributedMatrix::create(&fabric, "C", sc, part(2, sc)?, cfg.reps[2], |_, _| 0.0)?;
        Ok(Problem {
            fabric,
            a,
            b,
            c,
            a_dense,
            b_dense,
        })
    }

    pub fn operands(&self) -> MatMulOperands<'_> {
        MatMulOperands::new(&self.a, &self.b, &self.c).expect("shapes come from one config")
    }

    pub fn expected(&self) -> Matrix {
        reference_gemm(&self.a_dense, &self.b_dense)
    }

    /// Execution-order op list of every rank.
    pub fn op_lists(&self, st: Stationarity) -> RunResultOf<Vec<Vec<LocalMatMulOp>>> {
        let ops = self.operands();
        (0..self.fabric.nprocs())
            .map(|r| Ok(runtime::process_ops(&ops, st, Rank(r))?))
            .collect()
    }

    /// Graph and lowered program of every rank.
    pub fn lower(
        &self,
        st: Stationarity,
        lowerer: Lowerer,
        limits: Limits,
        machine: &MachineModel,
        bound: usize,
    ) -> RunResultOf<Vec<(CompGraph, IrProgram)>> {
        let ops = self.operands();
        self.op_lists(st)?
            .into_iter()
            .enumerate()
            .map(|(r, list)| {
                let g = build_graph(&list, &ops, Rank(r))?;
                let prog = match lowerer {
                    Lowerer::Greedy => lower_greedy(&g, limits)?,
                    Lowerer::CostGreedy => lower_cost_greedy(&g, limits, machine)?,
                    Lowerer::Exhaustive => lower_exhaustive(&g, limits, machine, bound)?,
                };
                Ok((g, prog))
            })
            .collect()
    }

    /// Modeled cost of a stationarity: greedy lowering, slowest rank.
    pub fn model_cost(&self, st: Stationarity, cfg: &RunConfig, machine: &MachineModel) -> RunResultOf<Cost> {
        let lowered = self.lower(st, Lowerer::Greedy, cfg.limits, machine, cfg.exhaustive_bound)?;
        Ok(max_program_cost(lowered.iter().map(|(_, p)| p), machine))
    }
}

/// Resolves `auto` to the stationarity with the lowest modeled cost.
/// Candidates are tried C, A, B and only a strictly lower cost wins.
pub fn choose_stationarity(problem: &Problem, cfg: &RunConfig, machine: &MachineModel) -> RunResultOf<Stationarity> {
    match cfg.stationarity {
        StationarityChoice::Fixed(st) => Ok(st),
        StationarityChoice::Auto => {
            let mut best: Option<(Stationarity, Cost)> = None;
            for st in [Stationarity::StationaryC, Stationarity::StationaryA, Stationarity::StationaryB] {
                let cost = problem.model_cost(st, cfg, machine)?;
                debug!("auto: {st} models {cost}");
                if best.is_none_or(|(_, b)| cost < b) {
                    best = Some((st, cost));
                }
            }
            Ok(best.expect("three candidates").0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub config: String,
    pub stationarity: Stationarity,
    pub pass: bool,
    pub max_rel_err: f64,
    /// Off-process bytes.
    pub comm_bytes: u64,
    pub flops: Vec<u64>,
    pub model_cost: Cost,
    pub ops: usize,
    pub counters: CounterSnapshot,
    /// Programs that ran, empty for direct execution.
    pub programs: Vec<IrProgram>,
}

impl RunResult {
    pub fn flops_max_rank(&self) -> u64 {
        self.flops.iter().copied().max().unwrap_or(0)
    }
}

/// Builds, runs and verifies one configuration.
pub fn run_one(cfg: &RunConfig) -> RunResultOf<RunResult> {
    let problem = Problem::build(cfg)?;
    let machine = cfg.machine()?;
    let st = choose_stationarity(&problem, cfg, &machine)?;
    let ops = problem.operands();
    let exec = cfg.exec_config(st);
    info!("run {} as {st}", cfg.id());

    let (report, programs, model_cost) = match cfg.execution {
        Execution::Direct => {
            let cost = problem.model_cost(st, cfg, &machine)?;
            (runtime::multiply(&ops, &exec, cfg.mode)?, Vec::new(), cost)
        }
        Execution::Ir(lowerer) => {
            let lowered = problem.lower(st, lowerer, cfg.limits, &machine, cfg.exhaustive_bound)?;
            for (g, prog) in &lowered {
                validate(prog, g).map_err(|v| unimul_core::Error::InvalidProgram(format!("rank {}: {v}", prog.caller)))?;
            }
            let programs: Vec<IrProgram> = lowered.into_iter().map(|(_, p)| p).collect();
            let cost = max_program_cost(&programs, &machine);
            let report = runtime::multiply_ir(&ops, &programs, cfg.accumulate_mode, cfg.mode)?;
            (report, programs, cost)
        }
    };

    let got = problem.c.gather();
    let expected = problem.expected();
    let max_rel_err = got.rel_frobenius_error(&expected);
    let pass = if cfg.real {
        max_rel_err <= REAL_TOLERANCE
    } else {
        got == expected
    };
    if !pass {
        warn!("{}: relative error {max_rel_err:e}", cfg.id());
    }
    let counters = problem.fabric.counters();
    Ok(RunResult {
        config: cfg.id(),
        stationarity: st,
        pass,
        max_rel_err,
        comm_bytes: counters.comm_bytes(),
        flops: (0..cfg.p).map(|r| counters.flops(Rank(r))).collect(),
        model_cost,
        ops: report.ops(),
        counters,
        programs,
    })
}

pub const CSV_HEADER: [&str; 8] = [
    "config",
    "stationarity",
    "pass",
    "max_rel_err",
    "comm_bytes",
    "flops_max_rank",
    "model_cost_s",
    "ops",
];

/// One CSV row per config. Configs that fail to build or run are written
/// with `pass = invalid` and empty metrics; the other rows are unaffected.
/// Returns whether every row passed.
pub fn run_sweep<W: Write>(configs: &[RunConfig], out: W) -> csv::Result<bool> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    let mut all_pass = true;
    for cfg in configs {
        match run_one(cfg) {
            Ok(r) => {
                all_pass &= r.pass;
                w.write_record([
                    r.config.clone(),
                    short_stationarity(r.stationarity).to_string(),
                    r.pass.to_string(),
                    format!("{:e}", r.max_rel_err),
                    r.comm_bytes.to_string(),
                    r.flops_max_rank().to_string(),
                    format!("{:e}", r.model_cost.seconds()),
                    r.ops.to_string(),
                ])?;
            }
            Err(e) => {
                all_pass = false;
                warn!("{}: {e}", cfg.id());
                w.write_record([cfg.id().as_str(), "", "invalid", "", "", "", "", ""])?;
            }
        }
    }
    w.flush()?;
    Ok(all_pass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_config, parse_sweep};

    #[test]
    fn aligned_direct_is_exact() {
        let r = run_one(&parse_config("p = 4\nm = 4\nn = 4\nk = 4\n").unwrap()).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_rel_err, 0.0);
        assert_eq!(r.ops, 8);
        assert_eq!(r.flops.iter().sum::<u64>(), 2 * 64);
    }

    #[test]
    fn bad_replication_is_reported() {
        let err = run_one(&parse_config("p = 12\nc_a = 5\n").unwrap()).unwrap_err();
        assert!(err.to_string().contains("replication must divide process count"));
    }

    #[test]
    fn real_inputs_within_tolerance() {
        let r = run_one(&parse_config("p = 6\nm = 7\nn = 9\nk = 5\nreal = true\na = custom:3x4\n").unwrap()).unwrap();
        assert!(r.pass && r.max_rel_err <= REAL_TOLERANCE);
    }

    #[test]
    fn empty_sweep_writes_header_only() {
        let mut out = Vec::new();
        assert!(run_sweep(&[], &mut out).unwrap());
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "config,stationarity,pass,max_rel_err,comm_bytes,flops_max_rank,model_cost_s,ops\n"
        );
    }

    #[test]
    fn invalid_rows_are_isolated() {
        let configs = parse_sweep("p = 4\nc_a = 1, 3, 2\n").unwrap();
        let mut out = Vec::new();
        assert!(!run_sweep(&configs, &mut out).unwrap());
        let text = String::from_utf8(out).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].contains(",true,"));
        assert!(rows[1].contains(",invalid,"));
        assert!(rows[2].contains(",true,"));
    }
}
