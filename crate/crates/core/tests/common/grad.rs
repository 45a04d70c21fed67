//! Random finite-difference instances for every differentiable op and
//! every loss. Shapes stay within [2, 3, 8].

use acdg::engine::{AnchorSet, BnMode, RunningStats, Tape, Tensor, Var, STD_EPS};
use acdg::losses::{self, EmbeddingBatch};
use rand::Rng;

use super::losscase::{random_case, TAU};
use super::{fd_check, random_tensor, rng, weighted_sum, FD_REL_TOL};

pub const TRIALS: u64 = 20;

pub type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>);

pub struct Suite {
    pub name: &'static str,
    pub make: fn(u64) -> Case,
}

/// Worst relative error over all trials, or the first failing trial.
pub fn certify(s: &Suite) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let (inputs, f) = (s.make)(trial);
        let err = fd_check(&inputs, |t, v| f(t, v));
        if !(err < FD_REL_TOL) {
            return Err(format!("{} trial {trial}: rel err {err:e}", s.name));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn assert_certified(name: &str) {
    let s = op_suites()
        .into_iter()
        .chain(loss_suites())
        .find(|s| s.name == name)
        .unwrap_or_else(|| panic!("no suite {name}"));
    certify(&s).unwrap();
}

fn conv1d(trial: u64) -> Case {
    let mut r = rng(100 + trial);
    let (b, ci, co) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
    let len = r.random_range(4..=8);
    let k = r.random_range(1..=3);
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..=1);
    let ins = vec![
        random_tensor(&mut r, &[b, ci, len]),
        random_tensor(&mut r, &[co, ci, k]),
        random_tensor(&mut r, &[co]),
    ];
    (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.conv1d(v[0], v[1], v[2], stride, pad).unwrap();
        weighted_sum(t, y, trial)
    }))
}

fn transpose_conv1d(trial: u64) -> Case {
    let mut r = rng(200 + trial);
    let (b, ci, co) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
    let len = r.random_range(2..=4);
    let k = r.random_range(2..=3);
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..=1);
    let op = if stride == 2 { trial as usize % 2 } else { 0 };
    let ins = vec![
        random_tensor(&mut r, &[b, ci, len]),
        random_tensor(&mut r, &[ci, co, k]),
        random_tensor(&mut r, &[co]),
    ];
    (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.transpose_conv1d_padded(v[0], v[1], v[2], stride, pad, op).unwrap();
        weighted_sum(t, y, trial)
    }))
}

fn batch_norm(trial: u64, mode: BnMode) -> Case {
    let mut r = rng(300 + trial);
    let (b, c, l) = (2, r.random_range(1..=3), r.random_range(3..=8));
    let ins = vec![
        random_tensor(&mut r, &[b, c, l]),
        random_tensor(&mut r, &[c]),
        random_tensor(&mut r, &[c]),
    ];
    (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
        let mut stats = RunningStats::new(t.shape(v[0])[1]);
        stats.mean.iter_mut().for_each(|m| *m = 0.1);
        stats.var.iter_mut().for_each(|s| *s = 0.7);
        let y = t.batch_norm1d(v[0], v[1], v[2], &mut stats, mode, STD_EPS).unwrap();
        weighted_sum(t, y, trial)
    }))
}

fn batch_norm_mean(trial: u64) -> Case {
    let mut r = rng(350 + trial);
    let ins = vec![random_tensor(&mut r, &[2, 3, 8]), random_tensor(&mut r, &[3]), random_tensor(&mut r, &[3])];
    (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
        let mut stats = RunningStats::new(3);
        let y = t.batch_norm1d(v[0], v[1], v[2], &mut stats, BnMode::Train, STD_EPS).unwrap();
        let y = t.relu(y);
        t.mean(y)
    }))
}

fn channel_stats(trial: u64) -> Case {
    let mut r = rng(400 + trial);
    let len = r.random_range(2..=8);
    let ins = vec![random_tensor(&mut r, &[2, 3, len])];
    (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
        let (mu, sigma) = t.channel_stats(v[0], STD_EPS).unwrap();
        let a = weighted_sum(t, mu, trial);
        let b = weighted_sum(t, sigma, trial + 1000);
        t.add(a, b).unwrap()
    }))
}

fn standardize(trial: u64) -> Case {
    let mut r = rng(450 + trial);
    let mut sigma = random_tensor(&mut r, &[2, 3]);
    sigma.data_mut().iter_mut().for_each(|s| *s = s.abs() + 0.5);
    let ins = vec![random_tensor(&mut r, &[2, 3, 5]), random_tensor(&mut r, &[2, 3]), sigma];
    (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.standardize(v[0], v[1], v[2]).unwrap();
        weighted_sum(t, y, trial)
    }))
}

fn channel_affine(trial: u64) -> Case {
    let mut r = rng(500 + trial);
    let ins = vec![random_tensor(&mut r, &[2, 3, 6]), random_tensor(&mut r, &[3]), random_tensor(&mut r, &[3])];
    (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.channel_affine(v[0], v[1], v[2]).unwrap();
        weighted_sum(t, y, trial)
    }))
}

fn softplus(trial: u64) -> Case {
    let mut r = rng(550 + trial);
    let mut x = random_tensor(&mut r, &[2, 3, 4]);
    x.data_mut().iter_mut().for_each(|v| *v *= 4.0);
    (vec![x], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.softplus(v[0]);
        weighted_sum(t, y, trial)
    }))
}

fn linear(trial: u64) -> Case {
    let mut r = rng(600 + trial);
    let (b, di, d) = (r.random_range(1..=3), r.random_range(1..=8), r.random_range(1..=8));
    let ins = vec![random_tensor(&mut r, &[b, di]), random_tensor(&mut r, &[d, di]), random_tensor(&mut r, &[d])];
    (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.linear(v[0], v[1], v[2]).unwrap();
        weighted_sum(t, y, trial)
    }))
}

fn elementwise(trial: u64) -> Case {
    let mut r = rng(650 + trial);
    let ins = vec![random_tensor(&mut r, &[2, 3, 8]), random_tensor(&mut r, &[2, 3, 8])];
    (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
        let a = t.relu(v[0]);
        let s = t.add(a, v[1]).unwrap();
        let m = t.mul(s, v[0]).unwrap();
        let y = t.scale(m, -0.37);
        weighted_sum(t, y, trial)
    }))
}

fn shape_ops(trial: u64) -> Case {
    let mut r = rng(700 + trial);
    let ins = vec![random_tensor(&mut r, &[1, 3, 8]), random_tensor(&mut r, &[2, 3, 8])];
    (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
        let c = t.concat(&[v[0], v[1]]).unwrap();
        let s = t.slice_rows(c, 1, 3).unwrap();
        let p = t.global_avg_pool(s).unwrap();
        let q = weighted_sum(t, p, trial);
        let m = t.mean(c);
        t.add(q, m).unwrap()
    }))
}

fn l2_normalize(trial: u64) -> Case {
    let mut r = rng(800 + trial);
    let ins = vec![random_tensor(&mut r, &[3, 8])];
    (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.l2_normalize(v[0], STD_EPS).unwrap();
        weighted_sum(t, y, trial)
    }))
}

fn cosine_similarity(trial: u64) -> Case {
    let mut r = rng(850 + trial);
    let ins = vec![random_tensor(&mut r, &[8]), random_tensor(&mut r, &[8])];
    (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.cosine_similarity(v[0], v[1], STD_EPS).unwrap()))
}

fn softmax_cross_entropy(trial: u64) -> Case {
    let mut r = rng(900 + trial);
    let (b, c) = (r.random_range(1..=3), r.random_range(2..=8));
    let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
    let ins = vec![random_tensor(&mut r, &[b, c])];
    (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.softmax_cross_entropy(v[0], &labels).unwrap()))
}

fn supcon(trial: u64) -> Case {
    let mut r = rng(950 + trial);
    let n = 6;
    let sets: Vec<AnchorSet> = (0..n)
        .map(|i| AnchorSet {
            anchor: i,
            positives: vec![(i + 1) % n, (i + 3) % n],
            denominator: (0..n).filter(|&j| j != i).collect(),
        })
        .collect();
    let ins = vec![random_tensor(&mut r, &[n, 5])];
    (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
        let z = t.l2_normalize(v[0], STD_EPS).unwrap();
        t.supcon(z, sets.clone(), 0.2).unwrap()
    }))
}

pub fn op_suites() -> Vec<Suite> {
    vec![
        Suite { name: "conv1d", make: conv1d },
        Suite { name: "transpose_conv1d", make: transpose_conv1d },
        Suite { name: "batch_norm1d train", make: |t| batch_norm(t, BnMode::Train) },
        Suite { name: "batch_norm1d train_frozen", make: |t| batch_norm(t, BnMode::TrainFrozen) },
        Suite { name: "batch_norm1d eval", make: |t| batch_norm(t, BnMode::Eval) },
        Suite { name: "batch_norm1d mean", make: batch_norm_mean },
        Suite { name: "channel_stats", make: channel_stats },
        Suite { name: "standardize", make: standardize },
        Suite { name: "channel_affine", make: channel_affine },
        Suite { name: "softplus", make: softplus },
        Suite { name: "linear", make: linear },
        Suite { name: "relu/add/mul/scale", make: elementwise },
        Suite { name: "concat/slice/pool", make: shape_ops },
        Suite { name: "l2_normalize", make: l2_normalize },
        Suite { name: "cosine_similarity", make: cosine_similarity },
        Suite { name: "softmax_cross_entropy", make: softmax_cross_entropy },
        Suite { name: "supcon", make: supcon },
    ]
}

fn contrastive(trial: u64, which: fn(&mut Tape<f64>, &EmbeddingBatch) -> Var) -> Case {
    let case = random_case(1000 + trial);
    let layout = case.layout();
    (vec![case.flat()], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
        let z = t.l2_normalize(v[0], STD_EPS).unwrap();
        let b = EmbeddingBatch {
            z,
            layout: layout.clone(),
        };
        which(t, &b)
    }))
}

/// `L_DT + L_DG` through task, invariance, generation and semantics terms.
fn composite(trial: u64) -> Case {
    let case = random_case(2000 + trial);
    let layout = case.layout();
    let n = layout.len();
    let mut r = rng(3000 + trial);
    let c = layout.labels.iter().max().unwrap() + 1;
    let logits = random_tensor(&mut r, &[n, c]);
    let s = case.source_labels.len();
    let source_labels = case.source_labels.clone();
    (vec![case.flat(), logits], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
        let z = t.l2_normalize(v[0], STD_EPS).unwrap();
        let b = EmbeddingBatch {
            z,
            layout: layout.clone(),
        };
        let task = losses::task_loss(t, v[1], &layout.labels).unwrap();
        let inv = losses::invariance_loss(t, &b, TAU).unwrap();
        let dt = losses::dt_loss(t, task, inv, 0.1).unwrap();
        let gen = losses::generation_loss(t, &b, TAU).unwrap();
        let blocks: Vec<Var> = (1..n / s).map(|k| t.slice_rows(v[1], k * s, (k + 1) * s).unwrap()).collect();
        let dg = if blocks.is_empty() {
            gen
        } else {
            let sem = losses::semantics_loss(t, &blocks, &source_labels).unwrap();
            losses::dg_loss(t, gen, sem, 0.01).unwrap()
        };
        t.add(dt, dg).unwrap()
    }))
}

pub fn loss_suites() -> Vec<Suite> {
    vec![
        Suite {
            name: "expansion",
            make: |t| contrastive(t, |tp, b| losses::expansion_loss(tp, b, TAU).unwrap()),
        },
        Suite {
            name: "diversity",
            make: |t| contrastive(t, |tp, b| losses::diversity_loss(tp, b, TAU).unwrap()),
        },
        Suite {
            name: "generation",
            make: |t| contrastive(t, |tp, b| losses::generation_loss(tp, b, TAU).unwrap()),
        },
        Suite {
            name: "invariance",
            make: |t| contrastive(t, |tp, b| losses::invariance_loss(tp, b, TAU).unwrap()),
        },
        Suite { name: "composite", make: composite },
    ]
}
