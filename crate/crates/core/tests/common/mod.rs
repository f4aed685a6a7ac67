#![allow(dead_code)]

use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use unimul_core::dense::{reference_gemm, Matrix};
use unimul_core::distmatrix::DistributedMatrix;
use unimul_core::fabric::Fabric;
use unimul_core::opgen::MatMulOperands;
use unimul_core::tiling::{square_grid, Mapping, PartitionSpec, Shape2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartKind {
    Row,
    Col,
    TwoD,
    /// 3x4 tiles dealt block-cyclically.
    Custom,
}

pub const PART_KINDS: [PartKind; 4] = [PartKind::Row, PartKind::Col, PartKind::TwoD, PartKind::Custom];

pub fn partition(kind: PartKind, global: Shape2D, nprocs: usize) -> PartitionSpec {
    match kind {
        PartKind::Row => PartitionSpec::row_block(global, nprocs),
        PartKind::Col => PartitionSpec::col_block(global, nprocs),
        PartKind::TwoD => PartitionSpec::block_2d(global, nprocs),
        PartKind::Custom => PartitionSpec::new(Shape2D::new(3, 4), square_grid(nprocs), Mapping::BlockCyclic),
    }
    .unwrap()
}

pub fn divisors(p: usize) -> Vec<usize> {
    (1..=p).filter(|d| p.is_multiple_of(*d)).collect()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut StdRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-8i32..=8) as f64)
}

pub struct Setup {
    pub fabric: Arc<Fabric>,
    pub a: DistributedMatrix,
    pub b: DistributedMatrix,
    pub c: DistributedMatrix,
    pub expected: Matrix,
}

impl Setup {
    pub fn operands(&self) -> MatMulOperands<'_> {
        MatMulOperands::new(&self.a, &self.b, &self.c).unwrap()
    }
}

pub fn build(p: usize, (m, k, n): (usize, usize, usize), kinds: [PartKind; 3], reps: [usize; 3], seed: u64) -> Setup {
    let mut rng = StdRng::seed_from_u64(seed);
    let a_val = random_matrix(m, k, &mut rng);
    let b_val = random_matrix(k, n, &mut rng);
    let fabric = Arc::new(Fabric::new(p).unwrap());
    let shapes = [Shape2D::new(m, k), Shape2D::new(k, n), Shape2D::new(m, n)];
    let part = |i: usize| partition(kinds[i], shapes[i], p / reps[i]);
    let a = DistributedMatrix::create(&fabric, "A", shapes[0], part(0), reps[0], |r, c| a_val.get(r, c)).unwrap();
    let b = DistributedMatrix::create(&fabric, "B", shapes[1], part(1), reps[1], |r, c| b_val.get(r, c)).unwrap();
    let c = DistributedMatrix::create(&fabric, "C", shapes[2], part(2), reps[2], |_, _| 0.0).unwrap();
    Setup {
        expected: reference_gemm(&a_val, &b_val),
        fabric,
        a,
        b,
        c,
    }
}
