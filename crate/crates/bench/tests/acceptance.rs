//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unimul_bench::config::{Execution, Lowerer, PartDesc, StationarityChoice};
use unimul_bench::harness::{Problem, REAL_TOLERANCE};
use unimul_bench::{run_one, RunConfig};
use unimul_core::costmodel::{program_cost, Cost, MachineModel};
use unimul_core::fabric::{AccumulateMode, Fabric, LinkTable, Rank, Region};
use unimul_core::lowering::{
    build_graph, lower_cost_greedy, lower_exhaustive, lower_serialized, validate, CommOp, CompGraph,
    IrProgram, IrStep, Limits, TileLocation, TileLocator,
};
use unimul_core::opgen::{self, replicated_split, restrict_for_replication, LocalMatMulOp, Operand, Stationarity};
use unimul_core::runtime::{self, ExecConfig, ExecMode};
use unimul_core::tiling::{Bounds2D, Range, TileIdx};
use unimul_core::Result as CoreResult;

const SHAPES: [(usize, usize, usize); 3] = [(12, 12, 12), (7, 9, 5), (16, 8, 24)];
const CRITERION1_BUDGET: Duration = Duration::from_secs(300);

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn parts() -> [PartDesc; 4] {
    [
        PartDesc::Row,
        PartDesc::Col,
        PartDesc::TwoD,
        "custom:3x4".parse().expect("valid descriptor"),
    ]
}

fn divisors(p: usize) -> Vec<usize> {
    (1..=p).filter(|d| p.is_multiple_of(*d)).collect()
}

fn all_rep_triples(p: usize) -> Vec<[usize; 3]> {
    let d = divisors(p);
    let mut out = Vec::new();
    for &a in &d {
        for &b in &d {
            for &c in &d {
                out.push([a, b, c]);
            }
        }
    }
    out
}

/// Sweep configurations of criterion 1. Every replication triple of each
/// process count is used; they are dealt round-robin over the rest of the
/// cross product.
fn criterion1_configs() -> Vec<RunConfig> {
    let mut configs = Vec::new();
    for p in [4, 12] {
        let triples = all_rep_triples(p);
        let mut next = 0;
        for (m, n, k) in SHAPES {
            for st in Stationarity::ALL {
                for execution in [
                    Execution::Direct,
                    Execution::Ir(Lowerer::Greedy),
                    Execution::Ir(Lowerer::CostGreedy),
                ] {
                    for pa in parts() {
                        for pb in parts() {
                            for pc in parts() {
                                let i = configs.len();
                                configs.push(RunConfig {
                                    m,
                                    n,
                                    k,
                                    p,
                                    parts: [pa, pb, pc],
                                    reps: triples[next % triples.len()],
                                    stationarity: StationarityChoice::Fixed(st),
                                    execution,
                                    mode: if i % 4 == 3 { ExecMode::Threaded } else { ExecMode::Lockstep },
                                    limits: Limits::new(1 + i % 2, 1 + i % 3),
                                    accumulate_mode: if i % 5 == 4 {
                                        AccumulateMode::LockGetPut
                                    } else {
                                        AccumulateMode::PeerAtomic
                                    },
                                    seed: i as u64,
                                    ..RunConfig::default()
                                });
                                next += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    configs
}

/// Re-validates every program a run produced against graphs rebuilt from
/// a fresh copy of the same problem.
fn revalidate(cfg: &RunConfig, programs: &[IrProgram]) -> Result<usize, String> {
    let problem = Problem::build(cfg).map_err(|e| e.to_string())?;
    let ops = problem.operands();
    for prog in programs {
        let g = build_graph(&prog.ops, &ops, prog.caller).map_err(|e| e.to_string())?;
        validate(prog, &g).map_err(|v| format!("{}: rank {}: {v}", cfg.id(), prog.caller))?;
    }
    Ok(programs.len())
}

fn criterion1(validated: &mut usize) -> Check {
    let start = Instant::now();
    let configs = criterion1_configs();
    let mut covered: BTreeSet<(usize, [usize; 3])> = BTreeSet::new();
    let mut real_runs = 0;
    for (i, cfg) in configs.iter().enumerate() {
        let r = run_one(cfg).map_err(|e| format!("{}: {e}", cfg.id()))?;
        ensure(r.pass && r.max_rel_err == 0.0, || {
            format!("{}: not bit-exact (error {:e})", cfg.id(), r.max_rel_err)
        })?;
        *validated += revalidate(cfg, &r.programs)?;
        covered.insert((cfg.p, cfg.reps));
        if i % 8 == 0 {
            let real = RunConfig {
                real: true,
                ..cfg.clone()
            };
            let r = run_one(&real).map_err(|e| format!("{} real: {e}", cfg.id()))?;
            ensure(r.pass && r.max_rel_err <= REAL_TOLERANCE, || {
                format!("{} real: error {:e}", cfg.id(), r.max_rel_err)
            })?;
            real_runs += 1;
        }
    }
    let expected_triples = all_rep_triples(4).len() + all_rep_triples(12).len();
    ensure(configs.len() >= 500, || format!("only {} configurations", configs.len()))?;
    ensure(covered.len() == expected_triples, || {
        format!("{} of {expected_triples} replication triples exercised", covered.len())
    })?;
    let elapsed = start.elapsed();
    ensure(elapsed < CRITERION1_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} configs bit-exact, {real_runs} real-valued within {REAL_TOLERANCE:e}, {} replication triples, {:.1?}",
        configs.len(),
        covered.len(),
        elapsed
    ))
}

fn random_config(rng: &mut ChaCha8Rng, max_dim: usize) -> RunConfig {
    let p = [1, 2, 3, 4, 6, 8, 12][rng.gen_range(0..7)];
    let d = divisors(p);
    let all = parts();
    RunConfig {
        m: rng.gen_range(1..=max_dim),
        n: rng.gen_range(1..=max_dim),
        k: rng.gen_range(1..=max_dim),
        p,
        parts: [0, 1, 2].map(|_| all[rng.gen_range(0..all.len())]),
        reps: [0, 1, 2].map(|_| d[rng.gen_range(0..d.len())]),
        stationarity: StationarityChoice::Fixed(Stationarity::ALL[rng.gen_range(0..3)]),
        seed: rng.gen(),
        ..RunConfig::default()
    }
}

fn fixed(cfg: &RunConfig) -> Stationarity {
    match cfg.stationarity {
        StationarityChoice::Fixed(st) => st,
        StationarityChoice::Auto => unreachable!("acceptance configs fix the stationarity"),
    }
}

fn criterion2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut total_ops = 0;
    for _ in 0..100 {
        let cfg = random_config(&mut rng, 16);
        let problem = Problem::build(&cfg).map_err(|e| e.to_string())?;
        let lists = problem.op_lists(fixed(&cfg)).map_err(|e| e.to_string())?;
        let (m, n, k) = (cfg.m, cfg.n, cfg.k);
        let mut hits = vec![0u32; m * k * n];
        for op in lists.iter().flatten() {
            total_ops += 1;
            for i in op.m.lo..op.m.hi {
                for l in op.k.lo..op.k.hi {
                    for j in op.n.lo..op.n.hi {
                        hits[(i * k + l) * n + j] += 1;
                    }
                }
            }
        }
        let missing = hits.iter().filter(|h| **h == 0).count();
        let duplicated = hits.iter().filter(|h| **h > 1).count();
        ensure(missing == 0 && duplicated == 0, || {
            format!("{}: {missing} missing, {duplicated} duplicated triples", cfg.id())
        })?;
    }
    Ok(format!("100 configs, {total_ops} ops, every (i,l,j) covered exactly once"))
}

fn stationary_index(st: Stationarity) -> usize {
    match st {
        Stationarity::StationaryA => 0,
        Stationarity::StationaryB => 1,
        Stationarity::StationaryC => 2,
    }
}

fn criterion3() -> Check {
    let mut checked = 0;
    for (m, n, k) in [(12, 12, 12), (7, 9, 5), (16, 8, 24), (13, 11, 17)] {
        for st in Stationarity::ALL {
            for c in divisors(12) {
                let mut reps = [1, 1, 1];
                reps[stationary_index(st)] = c;
                let cfg = RunConfig {
                    m,
                    n,
                    k,
                    p: 12,
                    parts: [PartDesc::TwoD, PartDesc::Row, "custom:3x4".parse().unwrap()],
                    reps,
                    stationarity: StationarityChoice::Fixed(st),
                    seed: checked,
                    ..RunConfig::default()
                };
                let r = run_one(&cfg).map_err(|e| e.to_string())?;
                ensure(r.pass, || format!("{}: wrong product", cfg.id()))?;
                let (extent, other) = replicated_split(st, m, n, k);
                let per_replica = 12 / c;
                for rep in 0..c {
                    let flops: u64 = r.flops[rep * per_replica..(rep + 1) * per_replica].iter().sum();
                    let chunk = restrict_for_replication(Range::new(0, extent), c, rep).len();
                    ensure(flops == 2 * (other * chunk) as u64, || {
                        format!("{}: replica {rep} did {flops} flops", cfg.id())
                    })?;
                    // |c * flops - 2mnk| <= c * 2 * other * (extent mod c)
                    let deviation = (c as i128 * flops as i128 - 2 * (m * n * k) as i128).abs();
                    let slack = c as i128 * 2 * (other * (extent % c)) as i128;
                    ensure(deviation <= slack, || {
                        format!("{}: replica {rep} off by {deviation}/{c}", cfg.id())
                    })?;
                    if extent % c == 0 {
                        ensure(flops as usize * c == 2 * m * n * k, || "even split not exact".into())?;
                    }
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} replicated runs, per-replica flops = 2mnk/c up to the ragged-split slack"))
}

fn criterion4() -> Check {
    let run = |text: &str| -> Result<u64, String> {
        let cfg = unimul_bench::parse_config(text).map_err(|e| e.to_string())?;
        let r = run_one(&cfg).map_err(|e| e.to_string())?;
        ensure(r.pass, || format!("{}: wrong product", r.config))?;
        Ok(r.comm_bytes)
    };
    let mlp1 = "m = 64\nn = 384\nk = 96\np = 12\nstationarity = c\n";
    let column = run(&format!("{mlp1}a = row\nb = col\nc = col\nc_a = 12\n"))?;
    let all_2d = run(&format!("{mlp1}a = 2d\nb = 2d\nc = 2d\n"))?;
    ensure(column < all_2d, || format!("MLP-1: column family {column} B vs 2D {all_2d} B"))?;

    let mlp2 = "m = 64\nn = 96\nk = 384\np = 12\n";
    let outer = run(&format!("{mlp2}a = col\nb = row\nc = 2d\nstationarity = a\n"))?;
    let move_b = run(&format!("{mlp2}a = row\nb = col\nc = row\nstationarity = c\n"))?;
    ensure(outer < move_b, || format!("MLP-2: outer product {outer} B vs moving B {move_b} B"))?;
    Ok(format!(
        "MLP-1 column/2D = {column}/{all_2d} B, MLP-2 outer-product/move-B = {outer}/{move_b} B"
    ))
}

/// Locality oracle backed by a table; unlisted tiles are local 2x2 tiles.
struct Table(Vec<((Operand, TileIdx), (usize, usize))>);

impl TileLocator for Table {
    fn locate(&self, operand: Operand, tile: TileIdx, _caller: Rank) -> CoreResult<TileLocation> {
        let (owner, elems) = self
            .0
            .iter()
            .find(|(key, _)| *key == (operand, tile))
            .map(|(_, v)| *v)
            .unwrap_or((0, 4));
        Ok(TileLocation {
            replica: 0,
            owner: Rank(owner),
            elems,
        })
    }
}

fn op(a: TileIdx, b: TileIdx, c: TileIdx, (m, k, n): (usize, usize, usize)) -> LocalMatMulOp {
    let r = |len| Range::new(0, len);
    LocalMatMulOp {
        a_tile: a,
        b_tile: b,
        c_tile: c,
        m: r(m),
        k: r(k),
        n: r(n),
        a_local: Bounds2D::new(r(m), r(k)),
        b_local: Bounds2D::new(r(k), r(n)),
        c_local: Bounds2D::new(r(m), r(n)),
    }
}

/// One local op costing 9 s, one waiting on a 10 s fetch and one waiting on
/// a 1 s fetch, every op after the first costing 1 s.
fn constructed_instance() -> (CompGraph, MachineModel) {
    let t = TileIdx::new;
    // compute = 2mkn / 2 = mkn seconds; a fetch of e elements = 8e / 8 = e seconds
    let machine = MachineModel::new(2.0, 1e300, LinkTable::uniform(3, 8.0).unwrap()).unwrap();
    let table = Table(vec![((Operand::B, t(0, 1)), (1, 10)), ((Operand::B, t(0, 2)), (2, 1))]);
    let ops = vec![
        op(t(0, 0), t(0, 0), t(0, 0), (9, 1, 1)),
        op(t(0, 0), t(0, 1), t(0, 0), (1, 1, 1)),
        op(t(0, 0), t(0, 2), t(0, 0), (1, 1, 1)),
    ];
    (build_graph(&ops, &table, Rank(0)).unwrap(), machine)
}

/// Minimum program cost over every schedule of the graph, by plain
/// recursion over steps. Independent of the library's search.
fn brute_force_min(g: &CompGraph, limits: Limits, machine: &MachineModel) -> Cost {
    #[derive(Clone)]
    struct State {
        computed: Vec<bool>,
        fetched: Vec<bool>,
        accumulated: Vec<bool>,
    }
    fn subsets<T: Copy>(items: &[T], max: usize) -> Vec<Vec<T>> {
        let mut out = vec![vec![]];
        for &x in items {
            let grown: Vec<Vec<T>> = out.iter().filter(|s| s.len() < max).map(|s| [s.clone(), vec![x]].concat()).collect();
            out.extend(grown);
        }
        out
    }
    fn rec(g: &CompGraph, limits: Limits, machine: &MachineModel, s: &State, acc: f64, best: &mut f64) {
        if acc >= *best {
            return;
        }
        let remote_c = |o: usize| !g.compute[o].edges[2].satisfied;
        let done = (0..g.ops.len()).all(|o| s.computed[o] && (!remote_c(o) || s.accumulated[o]));
        if done {
            *best = acc;
            return;
        }
        let ready: Vec<usize> = (0..g.ops.len())
            .filter(|&o| !s.computed[o] && g.compute[o].edges[..2].iter().all(|e| e.satisfied || s.fetched[e.data]))
            .collect();
        let fetches: Vec<usize> = (0..g.data.len())
            .filter(|&d| {
                !s.fetched[d]
                    && g.compute.iter().any(|c| c.edges[..2].iter().any(|e| e.data == d && !e.satisfied))
            })
            .collect();
        for compute in subsets(&ready, limits.max_compute) {
            let accs: Vec<usize> = (0..g.ops.len())
                .filter(|&o| remote_c(o) && !s.accumulated[o] && (s.computed[o] || compute.contains(&o)))
                .collect();
            let comm: Vec<(bool, usize)> =
                fetches.iter().map(|&d| (true, d)).chain(accs.iter().map(|&o| (false, o))).collect();
            for chosen in subsets(&comm, limits.max_comm) {
                if compute.is_empty() && chosen.is_empty() {
                    continue;
                }
                let compute_s: f64 = compute
                    .iter()
                    .map(|&o| {
                        let op = &g.ops[o];
                        let flops = 2.0 * (op.m.len() * op.k.len() * op.n.len()) as f64;
                        let bytes = 8.0 * (op.m.len() * op.k.len() + op.k.len() * op.n.len() + op.m.len() * op.n.len()) as f64;
                        f64::max(flops / machine.arith_peak, bytes / machine.mem_bw)
                    })
                    .sum();
                let comm_s: f64 = chosen
                    .iter()
                    .map(|&(is_fetch, i)| {
                        if is_fetch {
                            let d = &g.data[i];
                            8.0 * d.elems as f64 / machine.links.bandwidth(d.owner, g.caller)
                        } else {
                            let d = &g.data[g.compute[i].edges[2].data];
                            8.0 * g.ops[i].c_local.area() as f64 / machine.links.bandwidth(g.caller, d.owner)
                        }
                    })
                    .sum();
                let mut next = s.clone();
                for &o in &compute {
                    next.computed[o] = true;
                }
                for &(is_fetch, i) in &chosen {
                    if is_fetch {
                        next.fetched[i] = true;
                    } else {
                        next.accumulated[i] = true;
                    }
                }
                rec(g, limits, machine, &next, acc + compute_s.max(comm_s), best);
            }
        }
    }
    let start = State {
        computed: vec![false; g.ops.len()],
        fetched: vec![false; g.data.len()],
        accumulated: vec![false; g.ops.len()],
    };
    let mut best = f64::INFINITY;
    rec(g, limits, machine, &start, 0.0, &mut best);
    Cost::from_seconds(best)
}

fn criterion5(programs: &mut Vec<(CompGraph, IrProgram)>) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut instances = 0;
    let mut strict_random = 0;
    while instances < 50 {
        let cfg = random_config(&mut rng, 10);
        let problem = Problem::build(&cfg).map_err(|e| e.to_string())?;
        let ops = problem.operands();
        let caller = Rank(rng.gen_range(0..cfg.p));
        let mut list = opgen::generate(fixed(&cfg), &ops, caller).map_err(|e| e.to_string())?;
        list.truncate(rng.gen_range(1..=6));
        if list.is_empty() {
            continue;
        }
        // powers of two keep every cost exactly representable
        let links = LinkTable::two_level(cfg.p, 2, 2f64.powi(rng.gen_range(3..8)), 2f64.powi(rng.gen_range(1..4)))
            .map_err(|e| e.to_string())?;
        let machine = MachineModel::new(2f64.powi(rng.gen_range(4..10)), 2f64.powi(rng.gen_range(6..12)), links)
            .map_err(|e| e.to_string())?;
        let limits = Limits::new(rng.gen_range(1..=2), rng.gen_range(1..=2));
        let g = build_graph(&list, &ops, caller).map_err(|e| e.to_string())?;
        let best = lower_exhaustive(&g, limits, &machine, 6).map_err(|e| e.to_string())?;
        let cost = lower_cost_greedy(&g, limits, &machine).map_err(|e| e.to_string())?;
        let naive = lower_serialized(&g).map_err(|e| e.to_string())?;
        let (e, c, s) = (
            program_cost(&best, &machine),
            program_cost(&cost, &machine),
            program_cost(&naive, &machine),
        );
        ensure(e <= c && c <= s, || format!("{}: {e} / {c} / {s}", cfg.id()))?;
        ensure(e == brute_force_min(&g, limits, &machine), || {
            format!("{}: search result {e} is not the brute-force minimum", cfg.id())
        })?;
        strict_random += usize::from(e < c);
        programs.extend([(g.clone(), best), (g.clone(), cost), (g, naive)]);
        instances += 1;
    }

    let (g, machine) = constructed_instance();
    let limits = Limits::new(1, 1);
    let best = lower_exhaustive(&g, limits, &machine, 6).map_err(|e| e.to_string())?;
    let cost = lower_cost_greedy(&g, limits, &machine).map_err(|e| e.to_string())?;
    let naive = lower_serialized(&g).map_err(|e| e.to_string())?;
    let (e, c, s) = (
        program_cost(&best, &machine).seconds(),
        program_cost(&cost, &machine).seconds(),
        program_cost(&naive, &machine).seconds(),
    );
    // cost-greedy: [op0 | small fetch] 9 + [op2 | big fetch] 10 + [op1] 1 = 20
    // optimal:     [op0 | big fetch] 10 + [op1 | small fetch] 1 + [op2] 1 = 12
    // serialized:  9 + 10 + 1 + 1 + 1 = 22
    ensure((e, c, s) == (12.0, 20.0, 22.0), || format!("constructed instance costs {e}/{c}/{s}"))?;
    ensure(Cost::from_seconds(e) == brute_force_min(&g, limits, &machine), || "constructed optimum".into())?;
    programs.extend([(g.clone(), best), (g.clone(), cost), (g, naive)]);
    Ok(format!(
        "50 random instances hold exhaustive <= cost-greedy <= naive ({strict_random} strict), constructed instance {e} < {c} <= {s}"
    ))
}

fn criterion6(validated_c1: usize, programs_c5: &[(CompGraph, IrProgram)]) -> Check {
    for (g, prog) in programs_c5 {
        validate(prog, g).map_err(|v| format!("criterion 5 program rejected: {v}"))?;
    }
    // op0 fetches A(0,0) from rank 1; op1 is all local
    let t = TileIdx::new;
    let table = Table(vec![((Operand::A, t(0, 0)), (1, 4))]);
    let ops = vec![op(t(0, 0), t(0, 0), t(0, 0), (2, 2, 2)), op(t(1, 0), t(0, 0), t(1, 0), (2, 2, 2))];
    let g = build_graph(&ops, &table, Rank(0)).unwrap();
    let fetch = CommOp::Fetch {
        data: g.compute[0].edges[0].data,
        operand: Operand::A,
        tile: t(0, 0),
        replica: 0,
        owner: Rank(1),
        bytes: 32,
    };
    let program = |steps: Vec<IrStep>| IrProgram {
        caller: Rank(0),
        limits: Limits::new(1, 1),
        ops: ops.clone(),
        steps,
    };
    let good = program(vec![
        IrStep { compute: vec![1], comm: vec![fetch] },
        IrStep { compute: vec![0], comm: vec![] },
    ]);
    validate(&good, &g).map_err(|v| format!("valid program rejected: {v}"))?;

    let early = program(vec![
        IrStep { compute: vec![0], comm: vec![fetch] },
        IrStep { compute: vec![1], comm: vec![] },
    ]);
    let missing = program(vec![IrStep { compute: vec![1], comm: vec![fetch] }]);
    let classes = [
        validate(&early, &g).err().map(|v| v.class()),
        validate(&missing, &g).err().map(|v| v.class()),
    ];
    ensure(classes == [Some("dependency"), Some("completeness")], || {
        format!("invalid programs classified as {classes:?}")
    })?;
    ensure(validated_c1 > 0, || "criterion 1 produced no programs".into())?;
    Ok(format!(
        "{validated_c1} criterion-1 and {} criterion-5 programs valid; compute-before-fetch -> dependency, missing op -> completeness",
        programs_c5.len()
    ))
}

fn criterion7() -> Check {
    let cfg = RunConfig {
        m: 9,
        n: 9,
        k: 9,
        p: 9,
        parts: [PartDesc::TwoD; 3],
        stationarity: StationarityChoice::Fixed(Stationarity::StationaryC),
        mode: ExecMode::Lockstep,
        ..RunConfig::default()
    };
    let problem = Problem::build(&cfg).map_err(|e| e.to_string())?;
    let ops = problem.operands();
    let report = runtime::multiply(&ops, &ExecConfig::default(), ExecMode::Lockstep).map_err(|e| e.to_string())?;
    ensure(problem.c.gather() == problem.expected(), || "wrong product".into())?;
    let mut positions = 0;
    for row in 0..3 {
        let procs: Vec<_> = report.procs.iter().filter(|p| p.order[0].c_tile.i == row).collect();
        ensure(procs.len() == 3, || format!("process row {row} has {} ranks", procs.len()))?;
        let len = procs[0].order.len();
        ensure(len == 3 && procs.iter().all(|p| p.order.len() == len), || "uneven op lists".into())?;
        for s in 0..len {
            let cols: BTreeSet<usize> = procs.iter().map(|p| p.order[s].a_tile.j).collect();
            ensure(cols.len() == procs.len(), || {
                format!("row {row} position {s}: A columns {cols:?} collide")
            })?;
            positions += 1;
        }
    }
    Ok(format!("{positions} (row, position) pairs with pairwise-distinct A columns"))
}

fn criterion8() -> Check {
    const THREADS: usize = 12;
    const ROUNDS: usize = 1000;
    const ELEMS: usize = 16;
    let mut bytes = Vec::new();
    for mode in [AccumulateMode::PeerAtomic, AccumulateMode::LockGetPut] {
        let fabric = Arc::new(Fabric::new(THREADS).unwrap());
        let seg = fabric.alloc(Rank(0), ELEMS).unwrap();
        // a 2x4 block inside a 4x4 tile
        let region = Region {
            offset: 4,
            rows: 2,
            cols: 4,
            stride: 4,
        };
        thread::scope(|s| {
            for r in 0..THREADS {
                let (fabric, seg) = (&fabric, &seg);
                s.spawn(move || {
                    let ones = [1.0; 8];
                    for _ in 0..ROUNDS {
                        fabric.accumulate_region(Rank(r), seg, region, &ones, mode).unwrap();
                    }
                });
            }
        });
        let counters = fabric.counters();
        let values = fabric.get(Rank(0), &seg, Range::new(0, ELEMS)).unwrap();
        for (i, v) in values.iter().enumerate() {
            let inside = (4..12).contains(&i);
            let want = if inside { (THREADS * ROUNDS) as f64 } else { 0.0 };
            ensure(*v == want, || format!("{mode:?}: element {i} is {v}, expected {want}"))?;
        }
        let accumulated: Vec<u64> = (0..THREADS).map(|r| counters.bytes(Rank(r), Rank(0))).collect();
        bytes.push(accumulated);
    }
    let doubled = bytes[0].iter().zip(&bytes[1]).all(|(a, l)| *l == 2 * *a && *a == (ROUNDS * 8 * 8) as u64);
    ensure(doubled, || format!("per-link bytes {:?} vs {:?}", bytes[0], bytes[1]))?;
    Ok(format!(
        "{THREADS}x{ROUNDS} accumulates end at {}.0 in both modes; lock-get-put moves {} B per link vs {} B",
        THREADS * ROUNDS,
        bytes[1][1],
        bytes[0][1]
    ))
}

fn report(n: usize, name: &str, check: impl FnOnce() -> Check) -> bool {
    let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match outcome {
        Ok(detail) => {
            println!("PASS criterion {n} {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL criterion {n} {name}: {detail}");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut validated_c1 = 0;
    let mut programs_c5 = Vec::new();
    let results = [
        report(1, "universal correctness sweep", || criterion1(&mut validated_c1)),
        report(2, "coverage oracle", criterion2),
        report(3, "replication flop sharing", criterion3),
        report(4, "volume ordering", criterion4),
        report(5, "scheduler dominance", || criterion5(&mut programs_c5)),
        report(6, "schedule validity", || criterion6(validated_c1, &programs_c5)),
        report(7, "iteration-offset balance", criterion7),
        report(8, "fabric contract", criterion8),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
