//! Synthetic multi-condition spectra, SNR measurement and dataset I/O.
//!
//! Strain profiles are sums of Lorentzian peaks over a smooth baseline.
//! Acquisition at time `t` draws shot and read noise in count space and
//! rescales back to unit intensity, so noise shrinks as `t` grows.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Noise band used by the SNR metric, in cm⁻¹.
pub const NOISE_BAND: (f64, f64) = (1800.0, 1900.0);

/// Acquisition times of the reference protocol, in seconds.
pub const DEFAULT_CONDITIONS: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 15.0];

/// Floor on the noise-band power in [`compute_snr`].
pub const SNR_EPS: f64 = 1e-12;

const FIRST_CM: f64 = 280.0;
const LAST_CM: f64 = 2186.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WavenumberAxis {
    pub start: f64,
    pub step: f64,
    pub length: usize,
}

impl Default for WavenumberAxis {
    /// 280 to 2186 cm⁻¹ at 2 cm⁻¹.
    fn default() -> Self {
        Self {
            start: FIRST_CM,
            step: 2.0,
            length: 954,
        }
    }
}

impl WavenumberAxis {
    pub fn new(start: f64, step: f64, length: usize) -> Result<Self> {
        if !(step > 0.0) || length == 0 || !start.is_finite() {
            return Err(Error::Config(format!(
                "axis needs step > 0 and length >= 1 (start {start}, step {step}, length {length})"
            )));
        }
        Ok(Self { start, step, length })
    }

    /// Same wavenumber range as the default axis, sampled at `length` points.
    pub fn spanning(length: usize) -> Result<Self> {
        if length < 2 {
            return Err(Error::Config("axis length must be at least 2".into()));
        }
        Self::new(FIRST_CM, (LAST_CM - FIRST_CM) / (length - 1) as f64, length)
    }

    /// The short axis used by fast tests and the desk-scale fixture.
    pub fn short() -> Self {
        Self::spanning(256).expect("valid")
    }

    pub fn end(&self) -> f64 {
        self.at(self.length - 1)
    }

    pub fn at(&self, i: usize) -> f64 {
        self.start + self.step * i as f64
    }

    pub fn nearest_index(&self, cm: f64) -> usize {
        let i = ((cm - self.start) / self.step).round();
        i.clamp(0.0, (self.length - 1) as f64) as usize
    }

    /// Axis indices whose wavenumber lies in `[lo, hi]`.
    pub fn band_indices(&self, (lo, hi): (f64, f64)) -> Vec<usize> {
        (0..self.length)
            .filter(|&i| {
                let w = self.at(i);
                w >= lo && w <= hi
            })
            .collect()
    }

    pub fn write_json(&self, path: &Path, signal_bands: Option<&[(f64, f64)]>) -> Result<()> {
        let sidecar = AxisSidecar {
            start: self.start,
            step: self.step,
            length: self.length,
            signal_bands: signal_bands.map(<[_]>::to_vec),
        };
        let text = serde_json::to_string_pretty(&sidecar).expect("plain struct");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Reads an axis sidecar, returning the axis and any stored signal bands.
    pub fn read_json(path: &Path) -> Result<(Self, Option<Vec<(f64, f64)>>)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: AxisSidecar = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let axis = Self::new(s.start, s.step, s.length).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok((axis, s.signal_bands))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AxisSidecar {
    start: f64,
    step: f64,
    length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    signal_bands: Option<Vec<(f64, f64)>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub center: f64,
    /// Lorentzian half width at half maximum.
    pub width: f64,
    pub amplitude: f64,
}

impl Peak {
    fn eval(&self, w: f64) -> f64 {
        let d = (w - self.center) / self.width;
        self.amplitude / (1.0 + d * d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrainProfile {
    pub strain_id: usize,
    pub peaks: Vec<Peak>,
    /// Polynomial in `u = (w - start) / (end - start)`, lowest order first.
    pub baseline: Vec<f64>,
}

impl StrainProfile {
    /// Wavenumber intervals where this profile's peaks carry signal.
    pub fn support(&self) -> Vec<(f64, f64)> {
        self.peaks
            .iter()
            .filter(|p| p.amplitude > 0.0)
            .map(|p| (p.center - 2.0 * p.width, p.center + 2.0 * p.width))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub intensities: Vec<f64>,
    pub strain_label: usize,
    /// Acquisition time in seconds; 0 for noise-free references.
    pub condition: f64,
    pub sample_id: usize,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }

    pub fn with_intensities(&self, intensities: Vec<f64>) -> Self {
        Self {
            intensities,
            ..self.clone()
        }
    }
}

/// Signal and noise band sets for the SNR metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrBands {
    pub signal: Vec<(f64, f64)>,
    pub noise: Vec<(f64, f64)>,
}

impl SnrBands {
    /// Signal band = union of all profiles' peak support; noise band fixed.
    pub fn from_profiles(profiles: &[StrainProfile]) -> Self {
        Self {
            signal: merge_intervals(profiles.iter().flat_map(StrainProfile::support).collect()),
            noise: vec![NOISE_BAND],
        }
    }

    /// Fallback when no profiles are known: everything outside the noise band.
    pub fn complement_of_noise(axis: &WavenumberAxis) -> Self {
        let (lo, hi) = NOISE_BAND;
        Self {
            signal: vec![(axis.start, lo - axis.step), (hi + axis.step, axis.end())],
            noise: vec![NOISE_BAND],
        }
    }

    pub fn with_signal(signal: Vec<(f64, f64)>) -> Self {
        Self {
            signal,
            noise: vec![NOISE_BAND],
        }
    }

    /// Index sets on `axis`, with the signal set excluding noise indices.
    pub fn indices(&self, axis: &WavenumberAxis) -> Result<(Vec<usize>, Vec<usize>)> {
        let collect = |bands: &[(f64, f64)]| {
            let mut idx: Vec<usize> = bands.iter().flat_map(|&b| axis.band_indices(b)).collect();
            idx.sort_unstable();
            idx.dedup();
            idx
        };
        let noise = collect(&self.noise);
        let signal: Vec<usize> = collect(&self.signal)
            .into_iter()
            .filter(|i| noise.binary_search(i).is_err())
            .collect();
        if signal.is_empty() || noise.is_empty() {
            return Err(Error::Config("SNR band maps to no axis index".into()));
        }
        Ok((signal, noise))
    }
}

fn merge_intervals(mut v: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (lo, hi) in v {
        match out.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
            _ => out.push((lo, hi)),
        }
    }
    out
}

/// Shape of the synthetic strain library.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    /// Peaks present in every strain (with strain-specific amplitudes).
    pub shared_peaks: usize,
    pub specific_peaks: usize,
    /// Lorentzian HWHM range in axis steps, so peaks stay resolved on any grid.
    pub width_range: (f64, f64),
    /// Multiplicative spread of shared-peak amplitudes between strains.
    pub shared_amplitude_spread: f64,
    pub specific_amplitude_range: (f64, f64),
    /// Scale of the decaying baseline term.
    pub baseline_scale: f64,
    /// Constant background level, also the shot-noise source in the noise band.
    pub background: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            shared_peaks: 8,
            specific_peaks: 3,
            width_range: (2.0, 5.0),
            shared_amplitude_spread: 0.3,
            specific_amplitude_range: (0.5, 0.9),
            baseline_scale: 0.15,
            background: 0.008,
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
/// Minimum distance, in axis steps, between a specific peak and any other peak.
pub const PEAK_GAP_STEPS: f64 = 3.0;

/// Draws peak centers away from the noise band.
fn draw_center(rng: &mut impl Rng, axis: &WavenumberAxis, margin: f64) -> f64 {
    let (nlo, nhi) = NOISE_BAND;
    let lo = axis.start + 4.0 * axis.step;
    let hi = axis.end() - 4.0 * axis.step;
    loop {
        let c = rng.random_range(lo..hi);
        if c < nlo - margin || c > nhi + margin {
            return c;
        }
    }
}

pub fn make_profiles(seed: u64, n_strains: usize, axis: &WavenumberAxis) -> Result<Vec<StrainProfile>> {
    make_profiles_with(seed, n_strains, axis, &ProfileConfig::default())
}

pub fn make_profiles_with(
    seed: u64,
    n_strains: usize,
    axis: &WavenumberAxis,
    cfg: &ProfileConfig,
) -> Result<Vec<StrainProfile>> {
    if n_strains < 2 {
        return Err(Error::Config("n_strains must be at least 2".into()));
    }
    if cfg.specific_peaks == 0 || cfg.shared_peaks + cfg.specific_peaks < 3 {
        return Err(Error::Config("profiles need >= 1 specific and >= 3 total peaks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wlo, whi) = (cfg.width_range.0 * axis.step, cfg.width_range.1 * axis.step);
    if !(wlo > 0.0 && wlo <= whi) {
        return Err(Error::Config(format!("invalid width range {:?}", cfg.width_range)));
    }
    let margin = 8.0 * whi;
    let shared: Vec<(f64, f64)> = (0..cfg.shared_peaks)
        .map(|_| (draw_center(&mut rng, axis, margin), rng.random_range(wlo..=whi)))
        .collect();
    let min_gap = PEAK_GAP_STEPS * axis.step;

    let mut profiles: Vec<StrainProfile> = Vec::with_capacity(n_strains);
    for strain_id in 0..n_strains {
        let mut peaks: Vec<Peak> = shared
            .iter()
            .map(|&(center, width)| Peak {
                center,
                width,
                amplitude: (1.0 + cfg.shared_amplitude_spread * rng.random_range(-1.0..1.0)).clamp(0.05, 1.0),
            })
            .collect();
        // Each specific peak must sit clear of every shared peak and of
        // every peak already claimed, including this strain's own.
        let mut specific: Vec<Peak> = Vec::with_capacity(cfg.specific_peaks);
        for _ in 0..cfg.specific_peaks {
            let mut placed = None;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let center = draw_center(&mut rng, axis, margin);
                let clear = shared.iter().all(|s| (s.0 - center).abs() > min_gap)
                    && profiles
                        .iter()
                        .flat_map(|q| q.peaks.iter())
                        .chain(specific.iter())
                        .all(|q| (q.center - center).abs() > min_gap);
                if clear {
                    placed = Some(center);
                    break;
                }
            }
            let center = placed.ok_or_else(|| {
                Error::Config(format!(
                    "axis of length {} cannot hold {} separated peaks for {n_strains} strains",
                    axis.length,
                    cfg.shared_peaks + n_strains * cfg.specific_peaks
                ))
            })?;
            specific.push(Peak {
                center,
                width: rng.random_range(wlo..=whi),
                amplitude: rng.random_range(cfg.specific_amplitude_range.0..=cfg.specific_amplitude_range.1),
            });
        }
        peaks.extend(specific);
        let tilt = rng.random_range(0.5..1.0) * cfg.baseline_scale;
        // background + tilt·(1 - u)²
        let baseline = vec![cfg.background + tilt, -2.0 * tilt, tilt];
        profiles.push(StrainProfile {
            strain_id,
            peaks,
            baseline,
        });
    }
    Ok(profiles)
}

fn render(profile: &StrainProfile, axis: &WavenumberAxis) -> Vec<f64> {
    let span = (axis.end() - axis.start).max(axis.step);
    (0..axis.length)
        .map(|i| {
            let w = axis.at(i);
            let u = (w - axis.start) / span;
            let base = profile.baseline.iter().rev().fold(0.0, |acc, &c| acc * u + c);
            base + profile.peaks.iter().map(|p| p.eval(w)).sum::<f64>()
        })
        .collect()
}

/// Noise-free spectrum scaled to unit maximum; negatives clipped to 0.
pub fn synthesize_clean(profile: &StrainProfile, axis: &WavenumberAxis) -> Spectrum {
    let mut v: Vec<f64> = render(profile, axis).into_iter().map(|x| x.max(0.0)).collect();
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter_mut().for_each(|x| *x /= max);
    }
    Spectrum {
        intensities: v,
        strain_label: profile.strain_id,
        condition: 0.0,
        sample_id: 0,
    }
}

/// Count-space noise model: `m = t·c + sqrt(t·c + κ)·ε₁ + σ_read·ε₂`, with
/// `c = rate · gain · clean`, reported as `m / (t · rate · gain)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub rate: f64,
    pub kappa: f64,
    pub read_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            rate: 300.0,
            kappa: 0.5,
            read_sigma: 0.5,
        }
    }
}

pub fn apply_acquisition(clean: &Spectrum, t: f64, noise: &NoiseModel, rng: &mut impl Rng) -> Result<Spectrum> {
    apply_acquisition_with_gain(clean, t, 1.0, noise, rng)
}

pub fn apply_acquisition_with_gain(
    clean: &Spectrum,
    t: f64,
    gain: f64,
    noise: &NoiseModel,
    rng: &mut impl Rng,
) -> Result<Spectrum> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Config(format!("acquisition time must be positive, got {t}")));
    }
    if !(gain > 0.0) || !(noise.rate > 0.0) || noise.kappa < 0.0 || noise.read_sigma < 0.0 {
        return Err(Error::Config("noise model needs rate, gain > 0 and kappa, read_sigma >= 0".into()));
    }
    let scale = t * noise.rate * gain;
    let out = clean
        .intensities
        .iter()
        .map(|&x| {
            let tc = scale * x.max(0.0);
            let e1: f64 = StandardNormal.sample(rng);
            let e2: f64 = StandardNormal.sample(rng);
            let m = tc + (tc + noise.kappa).sqrt() * e1 + noise.read_sigma * e2;
            m / scale
        })
        .collect();
    Ok(Spectrum {
        intensities: out,
        condition: t,
        ..clean.clone()
    })
}

/// `10·log10(mean(signal²) / mean(noise²))` over explicit band sets.
pub fn compute_snr_bands(s: &[f64], axis: &WavenumberAxis, bands: &SnrBands) -> Result<f64> {
    if s.len() != axis.length {
        return Err(Error::Dimension(format!(
            "spectrum length {} does not match axis length {}",
            s.len(),
            axis.length
        )));
    }
    let (sig, noi) = bands.indices(axis)?;
    Ok(snr_at(s, &sig, &noi))
}

/// Single signal band and single noise band form.
pub fn compute_snr(s: &Spectrum, axis: &WavenumberAxis, signal_band: (f64, f64), noise_band: (f64, f64)) -> Result<f64> {
    let overlap = signal_band.0 <= noise_band.1 && noise_band.0 <= signal_band.1;
    if overlap {
        return Err(Error::Config("signal and noise bands overlap".into()));
    }
    let bands = SnrBands {
        signal: vec![signal_band],
        noise: vec![noise_band],
    };
    compute_snr_bands(&s.intensities, axis, &bands)
}

/// SNR over precomputed index sets (hot path for evaluation).
pub fn snr_at(s: &[f64], signal: &[usize], noise: &[usize]) -> f64 {
    let ms = |idx: &[usize]| idx.iter().map(|&i| s[i] * s[i]).sum::<f64>() / idx.len() as f64;
    10.0 * (ms(signal) / ms(noise).max(SNR_EPS)).log10()
}

/// Min-max scaling to `[0, 1]`; constant input maps to zeros.
pub fn normalize(x: &[f64]) -> Vec<f64> {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; x.len()];
    }
    x.iter().map(|&v| (v - lo) / range).collect()
}

pub fn normalize_spectrum(s: &Spectrum) -> Spectrum {
    s.with_intensities(normalize(&s.intensities))
}

/// Per-sample variability around a strain's profile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Heterogeneity {
    /// Relative amplitude jitter per peak (std of a multiplicative normal).
    pub amplitude_jitter: f64,
    /// Peak center jitter, cm⁻¹.
    pub center_jitter: f64,
    /// Log-normal sigma of the per-sample photon gain.
    pub gain_sigma: f64,
}

impl Default for Heterogeneity {
    fn default() -> Self {
        Self {
            amplitude_jitter: 0.1,
            center_jitter: 1.0,
            gain_sigma: 0.25,
        }
    }
}

fn jitter_profile(p: &StrainProfile, h: &Heterogeneity, rng: &mut impl Rng) -> StrainProfile {
    let amp = Normal::new(1.0, h.amplitude_jitter).expect("finite");
    let shift = Normal::new(0.0, h.center_jitter.max(0.0)).expect("finite");
    StrainProfile {
        peaks: p
            .peaks
            .iter()
            .map(|q| Peak {
                center: q.center + shift.sample(rng),
                width: q.width,
                amplitude: (q.amplitude * amp.sample(rng)).max(0.0),
            })
            .collect(),
        ..p.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub axis: WavenumberAxis,
    pub spectra: Vec<Spectrum>,
    pub conditions: Vec<f64>,
    pub class_count: usize,
    pub bands: SnrBands,
}

impl DomainDataset {
    pub fn validate(&self) -> Result<()> {
        for s in &self.spectra {
            if s.intensities.len() != self.axis.length {
                return Err(Error::Dimension(format!("sample {} has length {}", s.sample_id, s.len())));
            }
            if s.strain_label >= self.class_count {
                return Err(Error::Config(format!("sample {} label out of range", s.sample_id)));
            }
            if !self.conditions.iter().any(|&c| same_condition(c, s.condition)) {
                return Err(Error::Config(format!("sample {} has unlisted condition {}", s.sample_id, s.condition)));
            }
            if !s.intensities.iter().all(|v| v.is_finite()) {
                return Err(Error::Config(format!("sample {} has non-finite values", s.sample_id)));
            }
        }
        Ok(())
    }

    pub fn with_condition(&self, t: f64) -> impl Iterator<Item = &Spectrum> {
        self.spectra.iter().filter(move |s| same_condition(s.condition, t))
    }
}

pub fn same_condition(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub strains: usize,
    pub conditions: Vec<f64>,
    pub per_cell: usize,
    pub axis_length: usize,
    pub profiles: ProfileConfig,
    pub noise: NoiseModel,
    pub heterogeneity: Heterogeneity,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            strains: 9,
            conditions: DEFAULT_CONDITIONS.to_vec(),
            per_cell: 40,
            axis_length: 954,
            profiles: ProfileConfig::default(),
            noise: NoiseModel::default(),
            heterogeneity: Heterogeneity::default(),
        }
    }
}

impl DatasetConfig {
    /// The 1800-spectrum fixture on the short axis.
    pub fn desk() -> Self {
        Self {
            axis_length: WavenumberAxis::short().length,
            ..Self::default()
        }
    }

    pub fn axis(&self) -> Result<WavenumberAxis> {
        WavenumberAxis::spanning(self.axis_length)
    }

    /// Generates profiles and the full dataset from one seed.
    pub fn generate(&self, seed: u64) -> Result<DomainDataset> {
        let axis = self.axis()?;
        let profiles = make_profiles_with(seed, self.strains, &axis, &self.profiles)?;
        build_dataset_with(&profiles, &axis, &self.conditions, self.per_cell, seed, &self.noise, &self.heterogeneity)
    }
}

pub fn build_dataset(
    profiles: &[StrainProfile],
    axis: &WavenumberAxis,
    conditions: &[f64],
    per_cell: usize,
    seed: u64,
) -> Result<DomainDataset> {
    build_dataset_with(
        profiles,
        axis,
        conditions,
        per_cell,
        seed,
        &NoiseModel::default(),
        &Heterogeneity::default(),
    )
}

/// Sample ids run strain-major, then condition, then replicate. Each sample
/// draws from its own stream of a generator keyed by `seed`.
pub fn build_dataset_with(
    profiles: &[StrainProfile],
    axis: &WavenumberAxis,
    conditions: &[f64],
    per_cell: usize,
    seed: u64,
    noise: &NoiseModel,
    het: &Heterogeneity,
) -> Result<DomainDataset> {
    if per_cell == 0 {
        return Err(Error::Config("per_cell must be at least 1".into()));
    }
    if conditions.is_empty() {
        return Err(Error::Config("at least one condition is required".into()));
    }
    if let Some(&t) = conditions.iter().find(|&&t| !(t > 0.0)) {
        return Err(Error::Config(format!("acquisition time must be positive, got {t}")));
    }
    let class_count = profiles.len();
    let n_cond = conditions.len();
    let total = class_count * n_cond * per_cell;
    let gain = LogNormal::new(0.0, het.gain_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let spectra: Result<Vec<Spectrum>> = (0..total)
        .into_par_iter()
        .map(|id| {
            let strain = id / (n_cond * per_cell);
            let cond = (id / per_cell) % n_cond;
            let mut rng = sample_rng(seed, id as u64);
            let profile = jitter_profile(&profiles[strain], het, &mut rng);
            let mut clean = synthesize_clean(&profile, axis);
            clean.sample_id = id;
            let g = gain.sample(&mut rng);
            apply_acquisition_with_gain(&clean, conditions[cond], g, noise, &mut rng)
        })
        .collect();
    Ok(DomainDataset {
        axis: *axis,
        spectra: spectra?,
        conditions: conditions.to_vec(),
        class_count,
        bands: SnrBands::from_profiles(profiles),
    })
}

/// Independent stream per sample so generation order never matters.
pub fn sample_rng(seed: u64, sample_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_id.wrapping_add(1));
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplit {
    pub source_condition: f64,
    pub train: Vec<Spectrum>,
    pub intra_test: Vec<Spectrum>,
    /// Keyed by position in the dataset's condition list (floats are not `Ord`).
    pub inter_test: BTreeMap<usize, (f64, Vec<Spectrum>)>,
    pub train_fraction: f64,
}

impl TaskSplit {
    pub fn inter_len(&self) -> usize {
        self.inter_test.values().map(|(_, v)| v.len()).sum()
    }
}

/// Stratified split of the source condition; all other conditions go to
/// inter-domain test sets.
///
/// The train total is `round(fraction · n)`; each class first takes
/// `floor(fraction · n_c)` and the remainder goes to the classes with the
/// largest fractional parts, so per-class counts differ by at most one
/// when classes are balanced.
pub fn split_task(ds: &DomainDataset, source_condition: f64, train_fraction: f64, seed: u64) -> Result<TaskSplit> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train fraction must lie in [0, 1], got {train_fraction}")));
    }
    if !ds.conditions.iter().any(|&c| same_condition(c, source_condition)) {
        return Err(Error::Config(format!("source condition {source_condition} s is not in the dataset")));
    }
    let mut by_class: Vec<Vec<&Spectrum>> = vec![Vec::new(); ds.class_count];
    for s in ds.with_condition(source_condition) {
        by_class[s.strain_label].push(s);
    }
    let n: usize = by_class.iter().map(Vec::len).sum();
    let target = (train_fraction * n as f64).round() as usize;
    let exact: Vec<f64> = by_class.iter().map(|c| train_fraction * c.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ds.class_count).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut remaining = target.saturating_sub(quota.iter().sum());
    for &c in order.iter().cycle().take(ds.class_count * 2) {
        if remaining == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            remaining -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut intra_test = Vec::new();
    for (c, members) in by_class.into_iter().enumerate() {
        let mut members: Vec<Spectrum> = members.into_iter().cloned().collect();
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
        let rest = members.split_off(quota[c]);
        train.extend(members);
        intra_test.extend(rest);
    }
    train.sort_by_key(|s| s.sample_id);
    intra_test.sort_by_key(|s| s.sample_id);

    let inter_test = ds
        .conditions
        .iter()
        .enumerate()
        .filter(|(_, &c)| !same_condition(c, source_condition))
        .map(|(k, &c)| (k, (c, ds.with_condition(c).cloned().collect())))
        .collect();
    Ok(TaskSplit {
        source_condition,
        train,
        intra_test,
        inter_test,
        train_fraction,
    })
}

/// Writes `sample_id,strain_label,condition_s,i0,...` with shortest
/// round-trip float formatting.
pub fn write_csv(path: &Path, spectra: &[Spectrum], extra: &[(&str, Vec<f64>)]) -> Result<()> {
    let len = spectra.first().map_or(0, Spectrum::len);
    let mut out = String::with_capacity(spectra.len() * len * 10);
    out.push_str("sample_id,strain_label,condition_s");
    for i in 0..len {
        out.push_str(&format!(",i{i}"));
    }
    for (name, _) in extra {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (row, s) in spectra.iter().enumerate() {
        out.push_str(&format!("{},{},{}", s.sample_id, s.strain_label, s.condition));
        for v in &s.intensities {
            out.push(',');
            out.push_str(&v.to_string());
        }
        for (_, col) in extra {
            out.push(',');
            out.push_str(&col[row].to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a dataset CSV. Columns after the intensity block are ignored.
pub fn read_csv(path: &Path) -> Result<Vec<Spectrum>> {
    let schema = |reason: String| Error::Schema {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => schema(format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| schema(e.to_string()))?.clone();
    let fixed = ["sample_id", "strain_label", "condition_s"];
    if header.len() < 4 || header.iter().take(3).ne(fixed.iter().copied()) {
        return Err(schema("header must start with sample_id,strain_label,condition_s".into()));
    }
    let n_int = header
        .iter()
        .skip(3)
        .enumerate()
        .take_while(|(i, h)| *h == format!("i{i}"))
        .count();
    if n_int == 0 {
        return Err(schema("no intensity columns i0..".into()));
    }
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| schema(e.to_string()))?;
        let field = |k: usize| rec.get(k).ok_or_else(|| schema(format!("row {} is short", line + 1)));
        let bad = |k: usize| schema(format!("row {} column {} is not numeric", line + 1, header.get(k).unwrap_or("?")));
        let sample_id = field(0)?.parse::<usize>().map_err(|_| bad(0))?;
        let strain_label = field(1)?.parse::<usize>().map_err(|_| bad(1))?;
        let condition = field(2)?.parse::<f64>().map_err(|_| bad(2))?;
        let intensities = (0..n_int)
            .map(|i| field(3 + i)?.parse::<f64>().map_err(|_| bad(3 + i)))
            .collect::<Result<Vec<f64>>>()?;
        out.push(Spectrum {
            intensities,
            strain_label,
            condition,
            sample_id,
        });
    }
    Ok(out)
}

/// Rebuilds a dataset from spectra read back from disk.
pub fn dataset_from_spectra(axis: WavenumberAxis, spectra: Vec<Spectrum>, bands: Option<Vec<(f64, f64)>>) -> Result<DomainDataset> {
    let mut conditions: Vec<f64> = Vec::new();
    for s in &spectra {
        if !conditions.iter().any(|&c| same_condition(c, s.condition)) {
            conditions.push(s.condition);
        }
    }
    conditions.sort_by(f64::total_cmp);
    let class_count = spectra.iter().map(|s| s.strain_label + 1).max().unwrap_or(0);
    let ds = DomainDataset {
        axis,
        spectra,
        conditions,
        class_count,
        bands: bands.map_or_else(|| SnrBands::complement_of_noise(&axis), SnrBands::with_signal),
    };
    ds.validate()?;
    Ok(ds)
}
