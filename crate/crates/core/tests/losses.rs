mod common;

use acdg::engine::{Tape, Tensor, Var};
use acdg::losses::{self, EmbeddingBatch};
use common::grad::assert_certified;
use common::losscase::{random_case, tape_values, worst_oracle_gap, LossCase as Case, TAU};
use common::oracle;
use common::rng;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn contrastive_losses_match_double_loop_oracle() {
    let gap = worst_oracle_gap(0..100);
    assert!(gap < 1e-10, "{gap:e}");
}

#[test]
fn cross_entropy_terms_match_direct_formula() {
    let mut r = rng(42);
    for _ in 0..20 {
        let (n, c) = (r.random_range(1..=8), r.random_range(2..=9));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let blocks: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| (0..n).map(|_| (0..c).map(|_| r.random_range(-3.0..3.0)).collect()).collect())
            .collect();
        let mut t = Tape::<f64>::new();
        let vars: Vec<Var> = blocks
            .iter()
            .map(|b| t.constant(Tensor::from_f64(&[n, c], &b.concat()).unwrap()))
            .collect();
        let sem = losses::semantics_loss(&mut t, &vars, &labels).unwrap();
        let want: f64 = blocks.iter().map(|b| oracle::cross_entropy(b, &labels)).sum();
        assert!((t.value(sem).item().unwrap() - want).abs() < 1e-10);

        let omega = t.concat(&vars).unwrap();
        let all_labels: Vec<usize> = labels.iter().cycle().take(3 * n).copied().collect();
        let task = losses::task_loss(&mut t, omega, &all_labels).unwrap();
        let want = oracle::cross_entropy(&blocks.concat(), &all_labels);
        assert!((t.value(task).item().unwrap() - want).abs() < 1e-10);
    }
}

#[test]
fn generation_on_four_sample_batch() {
    let case = Case {
        rows: vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]],
        source_labels: vec![0, 0],
        k: 1,
    };
    let mut t = Tape::new();
    let z = t.constant(case.flat());
    let b = EmbeddingBatch {
        z,
        layout: case.layout(),
    };
    let g = losses::generation_loss(&mut t, &b, TAU).unwrap();
    let e = losses::expansion_loss(&mut t, &b, TAU).unwrap();
    let d = losses::diversity_loss(&mut t, &b, TAU).unwrap();
    let g = t.value(g).item().unwrap();
    // Expansion anchors see one positive at cosine 1 and two extended
    // rows at cosine 0; diversity anchors see only their positive.
    let want = (1.0 + 2.0 * (-5.0f64).exp()).ln();
    assert!((g - want).abs() < 1e-12, "{g} vs {want}");
    assert_eq!(g, t.value(e).item().unwrap() + t.value(d).item().unwrap());
}

#[test]
fn pushing_extended_sample_away_lowers_expansion() {
    let eval = |e0: Vec<f64>| {
        let case = Case {
            rows: vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], e0, vec![0.0, 1.0, 0.0]],
            source_labels: vec![0, 0],
            k: 1,
        };
        tape_values(&case)[0]
    };
    assert!(eval(vec![0.2, 0.0, 1.0]) < eval(vec![0.9, 0.0, 0.3]));
}

#[test]
fn pulling_cross_domain_pair_together_lowers_invariance() {
    let eval = |e0: Vec<f64>| {
        let case = Case {
            rows: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], e0, vec![0.0, 1.0, 0.0]],
            source_labels: vec![0, 1],
            k: 1,
        };
        tape_values(&case)[2]
    };
    assert!(eval(vec![0.7, 0.0, 0.7]) < eval(vec![0.0, 0.0, 1.0]));
}

#[test]
fn single_extended_domain_diversity_is_plain_supcon() {
    for seed in 0..20 {
        let mut case = random_case(500 + seed);
        case.k = 1;
        let s = case.source_labels.len();
        case.rows.truncate(2 * s);
        while case.rows.len() < 2 * s {
            case.rows.push(vec![0.3; case.rows[0].len()]);
        }
        // Supervised contrastive loss restricted to the extended block.
        let ext = Case {
            rows: case.rows[s..].to_vec(),
            source_labels: case.source_labels.clone(),
            k: 0,
        };
        let got = tape_values(&case)[1];
        let want = tape_values(&ext)[0];
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn contrastive_loss_gradients() {
    for name in ["expansion", "diversity", "generation", "invariance"] {
        assert_certified(name);
    }
}

#[test]
fn composite_loss_gradients() {
    assert_certified("composite");
}

fn orthogonal(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-3 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_orthogonally_invariant_and_nonnegative(seed in 0u64..10_000, qseed in 0u64..10_000) {
        let case = random_case(seed);
        let d = case.rows[0].len();
        let q = orthogonal(d, qseed);
        let rotated = Case {
            rows: case
                .rows
                .iter()
                .map(|x| q.iter().map(|qr| qr.iter().zip(x).map(|(a, b)| a * b).sum()).collect())
                .collect(),
            source_labels: case.source_labels.clone(),
            k: case.k,
        };
        let a = tape_values(&case);
        let b = tape_values(&rotated);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(*x >= 0.0);
            prop_assert!((x - y).abs() < 1e-9, "{:?} vs {:?}", a, b);
        }
    }
}
