//! Random embedding batches and the tape and oracle values of the three
//! contrastive objectives on them.

use acdg::engine::{Tape, Tensor, STD_EPS};
use acdg::losses::{self, BatchLayout, DomainTag, EmbeddingBatch};
use rand::Rng;

use super::oracle::{self, Rows};
use super::rng;

pub const TAU: f64 = 0.2;

pub struct LossCase {
    pub rows: Vec<Vec<f64>>,
    pub source_labels: Vec<usize>,
    pub k: usize,
}

impl LossCase {
    pub fn layout(&self) -> BatchLayout {
        BatchLayout::omega(&self.source_labels, self.k)
    }

    pub fn domains(&self) -> Vec<usize> {
        self.layout()
            .domains
            .iter()
            .map(|d| match d {
                DomainTag::Source => 0,
                DomainTag::Extended(k) => k + 1,
            })
            .collect()
    }

    pub fn flat(&self) -> Tensor<f64> {
        let d = self.rows[0].len();
        let v: Vec<f64> = self.rows.iter().flatten().copied().collect();
        Tensor::from_f64(&[self.rows.len(), d], &v).unwrap()
    }
}

/// n ≤ 12 rows, K ≤ 3, C ≤ 4.
pub fn random_case(seed: u64) -> LossCase {
    let mut r = rng(seed);
    let k = r.random_range(0..=3);
    let max_s = 12 / (k + 1);
    let s = r.random_range(2..=max_s.min(6));
    let c = r.random_range(2..=4);
    let source_labels = (0..s).map(|_| r.random_range(0..c)).collect();
    let d = r.random_range(2..=6);
    let rows = (0..s * (k + 1))
        .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    LossCase { rows, source_labels, k }
}

/// Expansion, diversity and invariance on the tape.
pub fn tape_values(case: &LossCase) -> [f64; 3] {
    let mut t = Tape::new();
    let x = t.constant(case.flat());
    let z = t.l2_normalize(x, STD_EPS).unwrap();
    let b = EmbeddingBatch {
        z,
        layout: case.layout(),
    };
    let e = losses::expansion_loss(&mut t, &b, TAU).unwrap();
    let d = losses::diversity_loss(&mut t, &b, TAU).unwrap();
    let i = losses::invariance_loss(&mut t, &b, TAU).unwrap();
    [e, d, i].map(|v| t.value(v).item().unwrap())
}

pub fn oracle_values(case: &LossCase) -> [f64; 3] {
    let layout = case.layout();
    let domain = case.domains();
    let r = Rows {
        z: &case.rows,
        labels: &layout.labels,
        domain: &domain,
    };
    [oracle::expansion(&r, TAU), oracle::diversity(&r, TAU), oracle::invariance(&r, TAU)]
}

/// Largest tape-vs-oracle gap over `seeds`.
pub fn worst_oracle_gap(seeds: std::ops::Range<u64>) -> f64 {
    seeds
        .map(|s| {
            let case = random_case(s);
            let got = tape_values(&case);
            let want = oracle_values(&case);
            got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}
