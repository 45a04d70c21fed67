//! Classical unsupervised denoisers and the cross-entropy-only classifier.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{AdamW, BnMode, Tape};
use crate::error::{Error, Result};
use crate::model::{argmax, classify, ModelBundle};
use crate::spectra::Spectrum;
use crate::training::{check_train_set, epoch_batches, sampler_rng, Batch, EpochLog, Phase, RngState, TaskStepLog, TrainConfig, TrainObserver, TrainOutcome};

/// Symmetric (edge-repeating) reflection of an out-of-range index.
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

fn check_window(x: &[f64], window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!("window must be odd and positive, got {window}")));
    }
    if window > x.len() {
        return Err(Error::Config(format!("window {window} exceeds sequence length {}", x.len())));
    }
    Ok(())
}

fn correlate(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let n = x.len();
    (0..n as isize)
        .map(|i| kernel.iter().enumerate().map(|(j, &c)| c * x[mirror(i + j as isize - half, n)]).sum())
        .collect()
}

/// Central-point weights of a least-squares polynomial fit over the window.
pub fn savitzky_golay_coefficients(window: usize, order: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 || order >= window {
        return Err(Error::Config(format!(
            "Savitzky-Golay needs an odd window above the order (window {window}, order {order})"
        )));
    }
    let half = (window / 2) as f64;
    let a = DMatrix::from_fn(window, order + 1, |r, c| (r as f64 - half).powi(c as i32));
    let ata = a.transpose() * &a;
    let inv = ata
        .try_inverse()
        .ok_or_else(|| Error::Config("singular Savitzky-Golay design".into()))?;
    // Row 0 of (AᵀA)⁻¹Aᵀ evaluates the fitted polynomial at the centre.
    let h = inv * a.transpose();
    Ok(h.row(0).iter().copied().collect())
}

pub fn savitzky_golay(x: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    let k = savitzky_golay_coefficients(window, order)?;
    check_window(x, window)?;
    Ok(correlate(x, &k))
}

pub fn moving_average(x: &[f64], window: usize) -> Result<Vec<f64>> {
    check_window(x, window)?;
    Ok(correlate(x, &vec![1.0 / window as f64; window]))
}

/// Local-mean / local-variance adaptive filter. The noise power is the mean
/// of the local variances.
pub fn wiener(x: &[f64], window: usize) -> Result<Vec<f64>> {
    check_window(x, window)?;
    let mu = moving_average(x, window)?;
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    let mu2 = moving_average(&sq, window)?;
    let var: Vec<f64> = mu.iter().zip(&mu2).map(|(m, m2)| (m2 - m * m).max(0.0)).collect();
    let noise = var.iter().sum::<f64>() / var.len() as f64;
    Ok(x.iter()
        .zip(mu.iter().zip(&var))
        .map(|(&xi, (&m, &v))| if v <= noise { m } else { m + (v - noise) / v * (xi - m) })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// σ̂·√(2 ln L), σ̂ = MAD(finest details) / 0.6745.
    Universal,
    Fixed(f64),
}

/// Orthonormal Haar analysis: returns `[approx | d_levels | ... | d_1]`.
pub fn haar_forward(x: &[f64], levels: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if !n.is_power_of_two() || levels > n.trailing_zeros() as usize {
        return Err(Error::Config(format!("{levels} Haar levels need a power-of-two length, got {n}")));
    }
    let mut out = x.to_vec();
    let mut len = n;
    let mut tmp = vec![0.0; n];
    for _ in 0..levels {
        let h = len / 2;
        for i in 0..h {
            tmp[i] = (out[2 * i] + out[2 * i + 1]) * std::f64::consts::FRAC_1_SQRT_2;
            tmp[h + i] = (out[2 * i] - out[2 * i + 1]) * std::f64::consts::FRAC_1_SQRT_2;
        }
        out[..len].copy_from_slice(&tmp[..len]);
        len = h;
    }
    Ok(out)
}

pub fn haar_inverse(c: &[f64], levels: usize) -> Result<Vec<f64>> {
    let n = c.len();
    if !n.is_power_of_two() || levels > n.trailing_zeros() as usize {
        return Err(Error::Config(format!("{levels} Haar levels need a power-of-two length, got {n}")));
    }
    let mut out = c.to_vec();
    let mut tmp = vec![0.0; n];
    let mut len = n >> levels;
    for _ in 0..levels {
        for i in 0..len {
            let (a, d) = (out[i], out[len + i]);
            tmp[2 * i] = (a + d) * std::f64::consts::FRAC_1_SQRT_2;
            tmp[2 * i + 1] = (a - d) * std::f64::consts::FRAC_1_SQRT_2;
        }
        len *= 2;
        out[..len].copy_from_slice(&tmp[..len]);
    }
    Ok(out)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Haar DWT, soft-thresholded details, inverse DWT. The input is mirror
/// padded to the next power of two and cropped back.
pub fn haar_wavelet_denoise(x: &[f64], levels: usize, rule: ThresholdRule) -> Result<Vec<f64>> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Config("empty sequence".into()));
    }
    let padded_len = n.next_power_of_two();
    if levels == 0 || levels > padded_len.trailing_zeros() as usize {
        return Err(Error::Config(format!(
            "Haar levels must be in 1..={} for length {n}",
            padded_len.trailing_zeros()
        )));
    }
    let padded: Vec<f64> = (0..padded_len).map(|i| x[mirror(i as isize, n)]).collect();
    let mut c = haar_forward(&padded, levels)?;
    let thr = match rule {
        ThresholdRule::Fixed(t) if t >= 0.0 => t,
        ThresholdRule::Fixed(t) => return Err(Error::Config(format!("negative threshold {t}"))),
        ThresholdRule::Universal => {
            let mut finest: Vec<f64> = c[padded_len / 2..].iter().map(|v| v.abs()).collect();
            median(&mut finest) / 0.6745 * (2.0 * (n as f64).ln()).sqrt()
        }
    };
    let approx = padded_len >> levels;
    for v in &mut c[approx..] {
        *v = v.signum() * (v.abs() - thr).max(0.0);
    }
    let mut out = haar_inverse(&c, levels)?;
    out.truncate(n);
    Ok(out)
}

/// Mean and orthonormal principal directions fitted on a sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// k × L, rows orthonormal.
    pub components: DMatrix<f64>,
}

const EIGEN_REL_FLOOR: f64 = 1e-12;

impl PcaModel {
    pub fn fit(x: &[Vec<f64>], k: usize) -> Result<Self> {
        let n = x.len();
        let l = x.first().map_or(0, Vec::len);
        if n < 2 {
            return Err(Error::Config("PCA needs at least two samples".into()));
        }
        if x.iter().any(|r| r.len() != l) {
            return Err(Error::Dimension("PCA rows differ in length".into()));
        }
        if k == 0 || k > n.min(l) {
            return Err(Error::Config(format!("PCA k must be in 1..={}, got {k}", n.min(l))));
        }
        let mean: Vec<f64> = (0..l).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let xc = DMatrix::from_fn(n, l, |i, j| x[i][j] - mean[j]);
        // Eigen-decompose the smaller of the Gram and covariance matrices.
        let dirs: Vec<_> = if n <= l {
            let eig = SymmetricEigen::new(&xc * xc.transpose());
            let top = top_indices(&eig.eigenvalues, k);
            let floor = eig.eigenvalues.max().max(0.0) * EIGEN_REL_FLOOR;
            let mut rows = Vec::new();
            for &i in top.iter().filter(|&&i| eig.eigenvalues[i] > floor) {
                let u = eig.eigenvectors.column(i);
                let v = xc.transpose() * u / eig.eigenvalues[i].sqrt();
                rows.push(v.transpose());
            }
            rows
        } else {
            let eig = SymmetricEigen::new(xc.transpose() * &xc);
            let top = top_indices(&eig.eigenvalues, k);
            top.iter().map(|&i| eig.eigenvectors.column(i).transpose()).collect()
        };
        let components = if dirs.is_empty() {
            DMatrix::zeros(0, l)
        } else {
            DMatrix::from_rows(&dirs)
        };
        Ok(Self { mean, components })
    }

    pub fn reconstruct(&self, row: &[f64]) -> Vec<f64> {
        let c = DVector::from_iterator(row.len(), row.iter().zip(&self.mean).map(|(v, m)| v - m));
        let coef = &self.components * c;
        let rec = self.components.transpose() * coef;
        rec.iter().zip(&self.mean).map(|(r, m)| r + m).collect()
    }
}

fn top_indices(vals: &DVector<f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    idx.truncate(k);
    idx
}

pub fn pca_denoise(x: &[Vec<f64>], k: usize) -> Result<Vec<Vec<f64>>> {
    let model = PcaModel::fit(x, k)?;
    Ok(x.par_iter().map(|r| model.reconstruct(r)).collect())
}

/// A configured classical denoiser, written `kind:key=val,...` on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSpec {
    SavitzkyGolay { window: usize, order: usize },
    Wiener { window: usize },
    MovingAverage { window: usize },
    HaarWavelet { levels: usize, threshold: ThresholdRule },
    Pca { k: usize },
}

impl DenoiserSpec {
    pub fn defaults() -> Vec<Self> {
        vec![
            Self::SavitzkyGolay { window: 11, order: 3 },
            Self::Wiener { window: 11 },
            Self::MovingAverage { window: 9 },
            Self::HaarWavelet {
                levels: 4,
                threshold: ThresholdRule::Universal,
            },
            Self::Pca { k: 10 },
        ]
    }

    /// The display form with `;` between parameters, safe inside a CSV field.
    pub fn label(&self) -> String {
        self.to_string().replace(',', ";")
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::SavitzkyGolay { .. } => "savitzky_golay",
            Self::Wiener { .. } => "wiener",
            Self::MovingAverage { .. } => "moving_average",
            Self::HaarWavelet { .. } => "haar_wavelet",
            Self::Pca { .. } => "pca",
        }
    }

    pub fn validate(&self, length: usize) -> Result<()> {
        let odd = |w: usize| {
            if w == 0 || w % 2 == 0 || w > length {
                Err(Error::Config(format!("{}: window must be odd and in 1..={length}, got {w}", self.kind())))
            } else {
                Ok(())
            }
        };
        match *self {
            Self::SavitzkyGolay { window, order } => {
                odd(window)?;
                if order >= window {
                    return Err(Error::Config(format!("savitzky_golay: order {order} must be below window {window}")));
                }
            }
            Self::Wiener { window } | Self::MovingAverage { window } => odd(window)?,
            Self::HaarWavelet { levels, threshold } => {
                let max = length.next_power_of_two().trailing_zeros() as usize;
                if levels == 0 || levels > max {
                    return Err(Error::Config(format!("haar_wavelet: levels must be in 1..={max}, got {levels}")));
                }
                if let ThresholdRule::Fixed(t) = threshold {
                    if !(t >= 0.0) {
                        return Err(Error::Config(format!("haar_wavelet: threshold must be nonnegative, got {t}")));
                    }
                }
            }
            Self::Pca { k } => {
                if k == 0 || k > length {
                    return Err(Error::Config(format!("pca: k must be in 1..={length}, got {k}")));
                }
            }
        }
        Ok(())
    }

    /// Denoises a set of rows. PCA fits once on the whole set.
    pub fn apply(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match *self {
            Self::Pca { k } => pca_denoise(rows, k.min(rows.len())),
            spec => rows.par_iter().map(|r| spec.apply_one(r)).collect(),
        }
    }

    fn apply_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        match *self {
            Self::SavitzkyGolay { window, order } => savitzky_golay(x, window, order),
            Self::Wiener { window } => wiener(x, window),
            Self::MovingAverage { window } => moving_average(x, window),
            Self::HaarWavelet { levels, threshold } => haar_wavelet_denoise(x, levels, threshold),
            Self::Pca { .. } => Err(Error::Usage("PCA denoises sets, not single rows".into())),
        }
    }
}

impl fmt::Display for DenoiserSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SavitzkyGolay { window, order } => write!(f, "savitzky_golay:window={window},order={order}"),
            Self::Wiener { window } => write!(f, "wiener:window={window}"),
            Self::MovingAverage { window } => write!(f, "moving_average:window={window}"),
            Self::HaarWavelet { levels, threshold } => match threshold {
                ThresholdRule::Universal => write!(f, "haar_wavelet:levels={levels},threshold=universal"),
                ThresholdRule::Fixed(t) => write!(f, "haar_wavelet:levels={levels},threshold={t}"),
            },
            Self::Pca { k } => write!(f, "pca:k={k}"),
        }
    }
}

impl FromStr for DenoiserSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut kv = Vec::new();
        for part in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("denoiser parameter `{part}` is not key=value")))?;
            kv.push((k.trim(), v.trim()));
        }
        let defaults = Self::defaults();
        let base = *defaults
            .iter()
            .find(|d| d.kind() == kind.trim())
            .ok_or_else(|| Error::Config(format!("unknown denoiser kind `{kind}`")))?;
        let int = |key: &str, v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{kind}: `{key}` expects an integer, got `{v}`")))
        };
        let mut spec = base;
        for (key, v) in kv {
            match (&mut spec, key) {
                (Self::SavitzkyGolay { window, .. }, "window")
                | (Self::Wiener { window }, "window")
                | (Self::MovingAverage { window }, "window") => *window = int(key, v)?,
                (Self::SavitzkyGolay { order, .. }, "order") => *order = int(key, v)?,
                (Self::HaarWavelet { levels, .. }, "levels") => *levels = int(key, v)?,
                (Self::HaarWavelet { threshold, .. }, "threshold") => {
                    *threshold = if v == "universal" {
                        ThresholdRule::Universal
                    } else {
                        ThresholdRule::Fixed(v.parse().map_err(|_| {
                            Error::Config(format!("{kind}: threshold must be `universal` or a number, got `{v}`"))
                        })?)
                    }
                }
                (Self::Pca { k }, "k") => *k = int(key, v)?,
                _ => return Err(Error::Config(format!("{kind}: unknown parameter `{key}`"))),
            }
        }
        Ok(spec)
    }
}

/// The ACDG extractor and classifier trained with cross-entropy on the
/// source batches only: same sampler, optimizer and seed.
pub fn train_erm_baseline(train_set: &[Spectrum], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_erm_observed(train_set, cfg, &mut ())
}

pub fn train_erm_observed(train_set: &[Spectrum], cfg: &TrainConfig, obs: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_train_set(train_set, cfg.model.classes)?;
    let mut bundle = ModelBundle::<f32>::classifier_only(cfg.model.clone(), cfg.seed)?;
    let labels: Vec<usize> = train_set.iter().map(|s| s.strain_label).collect();
    let mut rng = sampler_rng(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut logs = Vec::with_capacity(cfg.epochs);
    obs.before_training(&bundle);
    for epoch in 0..cfg.epochs {
        let mut steps = Vec::new();
        for idx in epoch_batches(&labels, cfg, &mut rng)? {
            let spectra: Vec<&Spectrum> = idx.iter().map(|&i| &train_set[i]).collect();
            steps.push(erm_step(&mut bundle, &Batch::from_spectra(&spectra), &mut opt)?);
            obs.after_step(Phase::Task, &bundle);
        }
        let log = EpochLog::from_steps(epoch, &steps, &[]);
        if !log.is_finite() {
            return Err(Error::Usage(format!("non-finite loss in epoch {epoch}")));
        }
        obs.after_epoch(&log);
        logs.push(log);
    }
    Ok(TrainOutcome {
        bundle,
        logs,
        rng: RngState::capture(cfg.seed, &rng),
    })
}

fn erm_step(bundle: &mut ModelBundle<f32>, batch: &Batch, opt: &mut AdamW<f32>) -> Result<TaskStepLog> {
    bundle.zero_grad();
    let ext = bundle.extractor.clone();
    let cls = bundle.classifier;
    let mut tape = Tape::new();
    let log = {
        let mut ctx = bundle.ctx(&mut tape);
        let x = ctx.tape.constant(batch.tensor()?);
        let feat = ext.extract(&mut ctx, x, BnMode::Train)?;
        let logits = classify(&mut ctx, &cls, feat)?;
        let t = &mut *ctx.tape;
        let ce = t.softmax_cross_entropy(logits, &batch.labels)?;
        let lv = t.value(logits).data();
        let c = lv.len() / batch.len();
        let correct = (0..batch.len())
            .filter(|&i| {
                let row: Vec<f64> = lv[i * c..(i + 1) * c].iter().map(|&v| v as f64).collect();
                argmax(&row) == batch.labels[i]
            })
            .count();
        t.backward(ce)?;
        let l = t.value(ce).data()[0] as f64;
        TaskStepLog {
            l_dt: l,
            l_task: l,
            l_invariance: 0.0,
            correct,
            seen: batch.len(),
        }
    };
    bundle.collect_grads(&tape);
    opt.step(bundle.params.iter_mut());
    bundle.zero_grad();
    Ok(log)
}
