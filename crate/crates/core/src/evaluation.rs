//! Metrics, the intra/inter-domain task protocol and SNR tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{train_erm_baseline, DenoiserSpec};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::spectra::{normalize, same_condition, snr_at, split_task, DomainDataset, Spectrum, TaskSplit};
use crate::training::{train, TrainConfig};

/// Rows scored per worker task.
const EVAL_CHUNK: usize = 64;

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::Dimension(format!(
                "cannot add a {0}x{0} confusion matrix to a {1}x{1} one",
                other.classes(),
                self.classes()
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= classes || t >= classes {
            return Err(Error::Usage(format!("class index out of range 0..{classes}: true {t}, predicted {p}")));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// One-vs-rest ratios of a single class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    /// Ratios among the four that were 0/0 and reported as 0.
    pub undefined: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub undefined: usize,
    pub samples: u64,
}

impl Metrics {
    /// `(name, value)` pairs in a fixed order; `undefined` is a count.
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("specificity", self.specificity),
            ("f1", self.f1),
            ("undefined", self.undefined as f64),
        ]
    }
}

fn ratio(num: f64, den: f64, undefined: &mut usize) -> f64 {
    if den == 0.0 {
        *undefined += 1;
        0.0
    } else {
        num / den
    }
}

pub fn per_class(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    let total = cm.total() as f64;
    (0..cm.classes())
        .map(|c| {
            let tp = cm.counts[c][c] as f64;
            let fn_ = cm.counts[c].iter().sum::<u64>() as f64 - tp;
            let fp = cm.counts.iter().map(|r| r[c]).sum::<u64>() as f64 - tp;
            let tn = total - tp - fn_ - fp;
            let mut undefined = 0;
            let precision = ratio(tp, tp + fp, &mut undefined);
            let recall = ratio(tp, tp + fn_, &mut undefined);
            let specificity = ratio(tn, tn + fp, &mut undefined);
            let f1 = ratio(2.0 * precision * recall, precision + recall, &mut undefined);
            ClassMetrics {
                precision,
                recall,
                specificity,
                f1,
                undefined,
            }
        })
        .collect()
}

/// Accuracy plus unweighted class means of the one-vs-rest ratios.
pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    let classes = per_class(cm);
    let mut undefined: usize = classes.iter().map(|m| m.undefined).sum();
    let correct: u64 = (0..cm.classes()).map(|c| cm.counts[c][c]).sum();
    let accuracy = ratio(correct as f64, cm.total() as f64, &mut undefined);
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(f).sum::<f64>() / classes.len() as f64
        }
    };
    Metrics {
        accuracy,
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        specificity: mean(|m| m.specificity),
        f1: mean(|m| m.f1),
        undefined,
        samples: cm.total(),
    }
}

/// Predictions on normalized rows, plus the spectra actually classified
/// when the method denoises first.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub predictions: Vec<usize>,
    pub denoised: Option<Vec<Vec<f64>>>,
}

pub trait Classifier: Sync {
    fn method(&self) -> &str;
    fn input_length(&self) -> usize;
    fn classes(&self) -> usize;
    /// Rows are min-max normalized; each row is scored independently.
    fn score(&self, rows: &[Vec<f64>]) -> Result<Scored>;
}

/// Classifies the average of the generators' outputs.
pub struct Acdg<'a>(pub &'a ModelBundle<f32>);

/// Classifies the raw input.
pub struct Erm<'a>(pub &'a ModelBundle<f32>);

impl Classifier for Acdg<'_> {
    fn method(&self) -> &str {
        "acdg"
    }

    fn input_length(&self) -> usize {
        self.0.config.length
    }

    fn classes(&self) -> usize {
        self.0.config.classes
    }

    fn score(&self, rows: &[Vec<f64>]) -> Result<Scored> {
        let denoised = self.0.denoise_rows(rows)?;
        Ok(Scored {
            predictions: self.0.predict_rows(&denoised)?,
            denoised: Some(denoised),
        })
    }
}

impl Classifier for Erm<'_> {
    fn method(&self) -> &str {
        "erm"
    }

    fn input_length(&self) -> usize {
        self.0.config.length
    }

    fn classes(&self) -> usize {
        self.0.config.classes
    }

    fn score(&self, rows: &[Vec<f64>]) -> Result<Scored> {
        Ok(Scored {
            predictions: self.0.predict_rows(rows)?,
            denoised: None,
        })
    }
}

/// Scores in parallel chunks and stitches the results in order.
pub fn score_rows(clf: &dyn Classifier, rows: &[Vec<f64>]) -> Result<Scored> {
    let parts: Vec<Scored> = rows.par_chunks(EVAL_CHUNK).map(|c| clf.score(c)).collect::<Result<_>>()?;
    let mut out = Scored {
        predictions: Vec::with_capacity(rows.len()),
        denoised: None,
    };
    for p in parts {
        out.predictions.extend(p.predictions);
        if let Some(d) = p.denoised {
            out.denoised.get_or_insert_with(Vec::new).extend(d);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition_s: f64,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrEntry {
    pub condition_s: f64,
    pub method: String,
    pub mean_snr_db: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: String,
    pub method: String,
    pub source_condition: f64,
    pub train_fraction: f64,
    pub intra: ConditionReport,
    pub inter: Vec<ConditionReport>,
    /// Metrics of the concatenated inter-domain predictions.
    pub inter_pooled: Metrics,
    pub inter_pooled_confusion: ConfusionMatrix,
    /// Unweighted mean of the per-condition inter-domain metrics.
    pub inter_mean: Metrics,
    pub snr: Vec<SnrEntry>,
}

/// `T1`, `T2`, ... by the source condition's position in the dataset.
pub fn task_id(ds: &DomainDataset, source_condition: f64) -> String {
    match ds.conditions.iter().position(|&c| same_condition(c, source_condition)) {
        Some(i) => format!("T{}", i + 1),
        None => format!("T{source_condition}s"),
    }
}

fn mean_snr(rows: &[Vec<f64>], signal: &[usize], noise: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|r| snr_at(&normalize(r), signal, noise)).sum::<f64>() / rows.len() as f64
}

fn mean_metrics(ms: &[Metrics]) -> Metrics {
    let n = ms.len().max(1) as f64;
    let avg = |f: fn(&Metrics) -> f64| ms.iter().map(f).sum::<f64>() / n;
    Metrics {
        accuracy: avg(|m| m.accuracy),
        precision: avg(|m| m.precision),
        recall: avg(|m| m.recall),
        specificity: avg(|m| m.specificity),
        f1: avg(|m| m.f1),
        undefined: ms.iter().map(|m| m.undefined).sum(),
        samples: ms.iter().map(|m| m.samples).sum(),
    }
}

/// Classifies the intra and every inter test set and tabulates mean SNR
/// per condition for the raw input, the classifier's own denoiser (if
/// any) and each classical denoiser.
pub fn evaluate_task(
    clf: &dyn Classifier,
    ds: &DomainDataset,
    split: &TaskSplit,
    denoisers: &[DenoiserSpec],
) -> Result<TaskReport> {
    if clf.input_length() != ds.axis.length {
        return Err(Error::Dimension(format!(
            "model expects spectra of length {}, dataset axis has {}",
            clf.input_length(),
            ds.axis.length
        )));
    }
    if clf.classes() < ds.class_count {
        return Err(Error::Dimension(format!(
            "model has {} classes, dataset has {}",
            clf.classes(),
            ds.class_count
        )));
    }
    for d in denoisers {
        d.validate(ds.axis.length)?;
    }
    let (signal, noise) = ds.bands.indices(&ds.axis)?;
    let classes = clf.classes();

    let mut snr = Vec::new();
    let mut run = |condition_s: f64, set: &[Spectrum]| -> Result<ConditionReport> {
        if let Some(bad) = set.iter().find(|s| s.len() != ds.axis.length) {
            return Err(Error::Dimension(format!(
                "sample {} has length {}, axis has {}",
                bad.sample_id,
                bad.len(),
                ds.axis.length
            )));
        }
        let rows: Vec<Vec<f64>> = set.iter().map(|s| normalize(&s.intensities)).collect();
        let labels: Vec<usize> = set.iter().map(|s| s.strain_label).collect();
        let scored = score_rows(clf, &rows)?;
        let entry = |method: &str, out: &[Vec<f64>]| SnrEntry {
            condition_s,
            method: method.to_string(),
            mean_snr_db: mean_snr(out, &signal, &noise),
            samples: out.len(),
        };
        snr.push(entry("raw", &rows));
        if let Some(d) = &scored.denoised {
            snr.push(entry(clf.method(), d));
        }
        for d in denoisers {
            let out = if rows.is_empty() { Vec::new() } else { d.apply(&rows)? };
            snr.push(entry(&d.label(), &out));
        }
        let cm = confusion(&scored.predictions, &labels, classes)?;
        Ok(ConditionReport {
            condition_s,
            metrics: metrics(&cm),
            confusion: cm,
        })
    };

    let intra = run(split.source_condition, &split.intra_test)?;
    let mut inter = Vec::with_capacity(split.inter_test.len());
    for (c, set) in split.inter_test.values() {
        inter.push(run(*c, set)?);
    }
    let mut pooled = ConfusionMatrix::zeros(classes);
    for r in &inter {
        pooled.add(&r.confusion)?;
    }
    let per: Vec<Metrics> = inter.iter().map(|r| r.metrics).collect();
    Ok(TaskReport {
        task_id: task_id(ds, split.source_condition),
        method: clf.method().to_string(),
        source_condition: split.source_condition,
        train_fraction: split.train_fraction,
        intra,
        inter_pooled: metrics(&pooled),
        inter_pooled_confusion: pooled,
        inter_mean: mean_metrics(&per),
        inter,
        snr,
    })
}

pub const CSV_HEADER: &str = "task,source_s,eval_s,method,metric,value";

impl TaskReport {
    /// Long-format rows under [`CSV_HEADER`]. Inter-domain aggregates use
    /// `eval_s` = `pooled` and `mean`; SNR rows use metric `snr_db`.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        let mut row = |eval: &str, method: &str, metric: &str, value: f64| {
            let _ = writeln!(
                out,
                "{},{},{eval},{method},{metric},{value}",
                self.task_id, self.source_condition
            );
        };
        let cond = |r: &ConditionReport| r.condition_s.to_string();
        for (k, v) in self.intra.metrics.named() {
            row(&cond(&self.intra), &self.method, k, v);
        }
        for r in &self.inter {
            for (k, v) in r.metrics.named() {
                row(&cond(r), &self.method, k, v);
            }
        }
        for (k, v) in self.inter_pooled.named() {
            row("pooled", &self.method, k, v);
        }
        for (k, v) in self.inter_mean.named() {
            row("mean", &self.method, k, v);
        }
        for e in &self.snr {
            row(&e.condition_s.to_string(), &e.method, "snr_db", e.mean_snr_db);
        }
        out
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_reports_csv(path: &Path, reports: &[TaskReport]) -> Result<()> {
    let mut text = format!("{CSV_HEADER}\n");
    reports.iter().for_each(|r| text.push_str(&r.csv_rows()));
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Tasks, train fractions and seeds to run; empty `source_conditions`
/// means every condition of the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub train: TrainConfig,
    pub source_conditions: Vec<f64>,
    pub train_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub denoisers: Vec<DenoiserSpec>,
}

impl ProtocolConfig {
    pub fn new(train: TrainConfig, seeds: Vec<u64>) -> Self {
        Self {
            train,
            source_conditions: Vec::new(),
            train_fractions: vec![0.2],
            seeds,
            denoisers: DenoiserSpec::defaults(),
        }
    }

    /// The train-fraction sweep of the protocol.
    pub fn with_fraction_sweep(mut self) -> Self {
        self.train_fractions = vec![0.2, 0.4, 0.6, 0.8];
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub report: TaskReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// Task id, or `all` when averaged over tasks.
    pub task: String,
    pub source_s: Option<f64>,
    pub train_fraction: f64,
    pub method: String,
    /// `intra_<metric>`, `inter_pooled_<metric>` or `snr_db@<t>s`.
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub runs: Vec<RunRecord>,
    /// Per task, fraction and method.
    pub summary: Vec<SummaryRow>,
    /// Per fraction and method, averaged over tasks and seeds.
    pub by_fraction: Vec<SummaryRow>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_values(r: &TaskReport) -> Vec<(String, f64)> {
    let mut v = Vec::new();
    for (k, x) in r.intra.metrics.named().into_iter().take(5) {
        v.push((format!("intra_{k}"), x));
    }
    for (k, x) in r.inter_pooled.named().into_iter().take(5) {
        v.push((format!("inter_pooled_{k}"), x));
    }
    for e in r.snr.iter().filter(|e| e.method == r.method) {
        v.push((format!("snr_db@{}s", e.condition_s), e.mean_snr_db));
    }
    v
}

fn summarize<'a>(
    task: &str,
    source_s: Option<f64>,
    fraction: f64,
    method: &str,
    reports: impl Iterator<Item = &'a TaskReport>,
) -> Vec<SummaryRow> {
    let mut names: Vec<String> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for r in reports {
        for (k, x) in run_values(r) {
            match names.iter().position(|n| *n == k) {
                Some(i) => values[i].push(x),
                None => {
                    names.push(k);
                    values.push(vec![x]);
                }
            }
        }
    }
    names
        .into_iter()
        .zip(values)
        .map(|(metric, xs)| {
            let (mean, std) = mean_std(&xs);
            SummaryRow {
                task: task.to_string(),
                source_s,
                train_fraction: fraction,
                method: method.to_string(),
                metric,
                mean,
                std,
                runs: xs.len(),
            }
        })
        .collect()
}

/// Trains ACDG and ERM for every (source condition, train fraction, seed)
/// and evaluates both on the same split.
pub fn run_protocol(ds: &DomainDataset, cfg: &ProtocolConfig) -> Result<ProtocolReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("the protocol needs at least one seed".into()));
    }
    if cfg.train_fractions.is_empty() {
        return Err(Error::Config("the protocol needs at least one train fraction".into()));
    }
    let sources = if cfg.source_conditions.is_empty() {
        ds.conditions.clone()
    } else {
        cfg.source_conditions.clone()
    };
    let mut runs = Vec::new();
    for &source in &sources {
        for &fraction in &cfg.train_fractions {
            for &seed in &cfg.seeds {
                let split = split_task(ds, source, fraction, seed)?;
                let mut tc = cfg.train.clone();
                tc.seed = seed;
                let acdg = train(&split.train, &tc)?;
                let erm = train_erm_baseline(&split.train, &tc)?;
                for report in [
                    evaluate_task(&Acdg(&acdg.bundle), ds, &split, &cfg.denoisers)?,
                    evaluate_task(&Erm(&erm.bundle), ds, &split, &cfg.denoisers)?,
                ] {
                    runs.push(RunRecord { seed, report });
                }
            }
        }
    }
    let methods = ["acdg", "erm"];
    let mut summary = Vec::new();
    for &source in &sources {
        for &fraction in &cfg.train_fractions {
            for m in methods {
                let sel = runs.iter().map(|r| &r.report).filter(|r| {
                    r.method == m && same_condition(r.source_condition, source) && r.train_fraction == fraction
                });
                summary.extend(summarize(&task_id(ds, source), Some(source), fraction, m, sel));
            }
        }
    }
    let mut by_fraction = Vec::new();
    for &fraction in &cfg.train_fractions {
        for m in methods {
            let sel = runs
                .iter()
                .map(|r| &r.report)
                .filter(|r| r.method == m && r.train_fraction == fraction);
            by_fraction.extend(
                summarize("all", None, fraction, m, sel)
                    .into_iter()
                    .filter(|row| !row.metric.starts_with("snr_db")),
            );
        }
    }
    Ok(ProtocolReport {
        runs,
        summary,
        by_fraction,
    })
}

pub const SUMMARY_CSV_HEADER: &str = "task,source_s,train_fraction,method,metric,mean,std,runs";

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut text = format!("{SUMMARY_CSV_HEADER}\n");
    for r in rows {
        let source = r.source_s.map_or_else(|| "all".to_string(), |s| s.to_string());
        let _ = writeln!(
            text,
            "{},{source},{},{},{},{},{},{}",
            r.task, r.train_fraction, r.method, r.metric, r.mean, r.std, r.runs
        );
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
