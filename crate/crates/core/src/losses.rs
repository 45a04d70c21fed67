//! Objective terms of both alternating steps.
//!
//! Every contrastive term is the same supervised-contrastive kernel with
//! different anchor, positive and denominator sets; the set builders are
//! plain functions so they can be checked independently of the tape.

use serde::{Deserialize, Serialize};

use crate::engine::{AnchorSet, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which domain of Ω a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainTag {
    Source,
    /// Output of generator `k` (0-based).
    Extended(usize),
}

/// Labels and domain tags of the rows of an embedding matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchLayout {
    pub labels: Vec<usize>,
    pub domains: Vec<DomainTag>,
}

impl BatchLayout {
    /// `[x_S; x_E(0); …; x_E(K−1)]`, each block holding the source labels.
    pub fn omega(source_labels: &[usize], k: usize) -> Self {
        let n = source_labels.len();
        let mut labels = Vec::with_capacity(n * (k + 1));
        let mut domains = Vec::with_capacity(n * (k + 1));
        for d in std::iter::once(DomainTag::Source).chain((0..k).map(DomainTag::Extended)) {
            labels.extend_from_slice(source_labels);
            domains.extend(std::iter::repeat_n(d, n));
        }
        Self { labels, domains }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn extended_domains(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self
            .domains
            .iter()
            .filter_map(|d| match d {
                DomainTag::Extended(k) => Some(*k),
                DomainTag::Source => None,
            })
            .collect();
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

/// Unit-norm embeddings `[n, d_z]` on a tape plus their layout.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    pub z: Var,
    pub layout: BatchLayout,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tau: 0.2,
            alpha: 0.01,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Anchor sets plus the number of would-be anchors skipped for lack of a positive.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnchorPlan {
    pub sets: Vec<AnchorSet>,
    pub skipped: usize,
}

fn plan(
    n: usize,
    is_anchor: impl Fn(usize) -> bool,
    is_positive: impl Fn(usize, usize) -> bool,
    in_denominator: impl Fn(usize, usize) -> bool,
) -> AnchorPlan {
    let mut out = AnchorPlan::default();
    for i in (0..n).filter(|&i| is_anchor(i)) {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && is_positive(i, p)).collect();
        if positives.is_empty() {
            out.skipped += 1;
            continue;
        }
        let denominator = (0..n).filter(|&a| a != i && in_denominator(i, a)).collect();
        out.sets.push(AnchorSet {
            anchor: i,
            positives,
            denominator,
        });
    }
    out
}

/// Anchors: source samples. Positives: other same-class source samples.
/// Denominator: all of Ω except the anchor.
pub fn expansion_plan(l: &BatchLayout) -> AnchorPlan {
    let src = |i: usize| l.domains[i] == DomainTag::Source;
    plan(l.len(), src, |i, p| src(p) && l.labels[p] == l.labels[i], |_, _| true)
}

/// Anchors: samples of extended domain `k`. Positives: same-class samples
/// of the same domain. Denominator: every extended sample except the anchor.
pub fn diversity_plan(l: &BatchLayout, k: usize) -> AnchorPlan {
    let ext = |i: usize| matches!(l.domains[i], DomainTag::Extended(_));
    let in_k = |i: usize| l.domains[i] == DomainTag::Extended(k);
    plan(l.len(), in_k, |i, p| in_k(p) && l.labels[p] == l.labels[i], |_, a| ext(a))
}

/// Anchors: all of Ω. Positives: same class in any domain.
/// Denominator: everything except the anchor.
pub fn invariance_plan(l: &BatchLayout) -> AnchorPlan {
    plan(l.len(), |_| true, |i, p| l.labels[p] == l.labels[i], |_, _| true)
}

fn zero<T: Real>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

/// Supervised contrastive kernel. With no anchors the loss is a constant 0.
pub fn supcon<T: Real>(tape: &mut Tape<T>, z: Var, plan: &AnchorPlan, tau: f64) -> Result<Var> {
    if plan.sets.is_empty() {
        return Ok(zero(tape));
    }
    tape.supcon(z, plan.sets.clone(), T::lit(tau))
}

pub fn expansion_loss<T: Real>(tape: &mut Tape<T>, b: &EmbeddingBatch, tau: f64) -> Result<Var> {
    supcon(tape, b.z, &expansion_plan(&b.layout), tau)
}

/// Sum over extended domains of the per-domain diversity terms.
pub fn diversity_loss<T: Real>(tape: &mut Tape<T>, b: &EmbeddingBatch, tau: f64) -> Result<Var> {
    let mut total = zero(tape);
    for k in b.layout.extended_domains() {
        let term = supcon(tape, b.z, &diversity_plan(&b.layout, k), tau)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

pub fn generation_loss<T: Real>(tape: &mut Tape<T>, b: &EmbeddingBatch, tau: f64) -> Result<Var> {
    let e = expansion_loss(tape, b, tau)?;
    let d = diversity_loss(tape, b, tau)?;
    tape.add(e, d)
}

/// Sum over extended domains of the mean cross-entropy against source labels.
pub fn semantics_loss<T: Real>(tape: &mut Tape<T>, logits_e: &[Var], labels: &[usize]) -> Result<Var> {
    if logits_e.is_empty() {
        return Err(Error::Usage("semantic consistency needs at least one extended domain".into()));
    }
    let mut total = zero(tape);
    for &l in logits_e {
        let ce = tape.softmax_cross_entropy(l, labels)?;
        total = tape.add(total, ce)?;
    }
    Ok(total)
}

/// Mean cross-entropy over all of Ω.
pub fn task_loss<T: Real>(tape: &mut Tape<T>, logits_omega: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits_omega, labels)
}

pub fn invariance_loss<T: Real>(tape: &mut Tape<T>, b: &EmbeddingBatch, tau: f64) -> Result<Var> {
    supcon(tape, b.z, &invariance_plan(&b.layout), tau)
}

/// `β·L_task + L_invariance`.
pub fn dt_loss<T: Real>(tape: &mut Tape<T>, task: Var, invariance: Var, beta: f64) -> Result<Var> {
    let t = tape.scale(task, T::lit(beta));
    tape.add(t, invariance)
}

/// `α·L_generation + L_semantics`.
pub fn dg_loss<T: Real>(tape: &mut Tape<T>, generation: Var, semantics: Var, alpha: f64) -> Result<Var> {
    let g = tape.scale(generation, T::lit(alpha));
    tape.add(g, semantics)
}
