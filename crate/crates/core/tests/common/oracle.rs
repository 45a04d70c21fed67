//! Naive double-loop transcriptions of the contrastive objectives,
//! written directly from the set definitions on plain row vectors.

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Domain index per row: 0 = source, k + 1 = extended domain k.
pub struct Rows<'a> {
    pub z: &'a [Vec<f64>],
    pub labels: &'a [usize],
    pub domain: &'a [usize],
}

fn anchor_term(r: &Rows, i: usize, pos: &[usize], den: &[usize], tau: f64) -> f64 {
    let mut denom = 0.0;
    for &a in den {
        denom += (cosine(&r.z[i], &r.z[a]) / tau).exp();
    }
    let mut s = 0.0;
    for &p in pos {
        let num = (cosine(&r.z[i], &r.z[p]) / tau).exp();
        s += -(num / denom).ln();
    }
    s / pos.len() as f64
}

fn average(terms: Vec<f64>) -> f64 {
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

pub fn expansion(r: &Rows, tau: f64) -> f64 {
    let n = r.z.len();
    let mut terms = Vec::new();
    for i in 0..n {
        if r.domain[i] != 0 {
            continue;
        }
        let mut pos = Vec::new();
        let mut den = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            den.push(j);
            if r.domain[j] == 0 && r.labels[j] == r.labels[i] {
                pos.push(j);
            }
        }
        if !pos.is_empty() {
            terms.push(anchor_term(r, i, &pos, &den, tau));
        }
    }
    average(terms)
}

pub fn diversity(r: &Rows, tau: f64) -> f64 {
    let n = r.z.len();
    let kmax = r.domain.iter().copied().max().unwrap_or(0);
    let mut total = 0.0;
    for k in 1..=kmax {
        let mut terms = Vec::new();
        for i in 0..n {
            if r.domain[i] != k {
                continue;
            }
            let mut pos = Vec::new();
            let mut den = Vec::new();
            for j in 0..n {
                if j == i || r.domain[j] == 0 {
                    continue;
                }
                den.push(j);
                if r.domain[j] == k && r.labels[j] == r.labels[i] {
                    pos.push(j);
                }
            }
            if !pos.is_empty() {
                terms.push(anchor_term(r, i, &pos, &den, tau));
            }
        }
        total += average(terms);
    }
    total
}

pub fn invariance(r: &Rows, tau: f64) -> f64 {
    let n = r.z.len();
    let mut terms = Vec::new();
    for i in 0..n {
        let mut pos = Vec::new();
        let mut den = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            den.push(j);
            if r.labels[j] == r.labels[i] {
                pos.push(j);
            }
        }
        if !pos.is_empty() {
            terms.push(anchor_term(r, i, &pos, &den, tau));
        }
    }
    average(terms)
}

pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut s = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        s += lse - row[y];
    }
    s / labels.len() as f64
}
