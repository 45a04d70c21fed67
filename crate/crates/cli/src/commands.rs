use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use acdg::baselines::train_erm_observed;
use acdg::evaluation::{
    evaluate_task, mean_std, run_protocol, task_id, write_reports_csv, write_summary_csv, Acdg, Classifier, Erm,
    ProtocolConfig, ProtocolReport, TaskReport,
};
use acdg::model::ModelBundle;
use acdg::spectra::{
    dataset_from_spectra, normalize, read_csv, same_condition, snr_at, split_task, write_csv, DomainDataset,
    Spectrum, WavenumberAxis,
};
use acdg::training::{
    self, sampler_rng, train_observed, EpochLog, ModelKind, RngState, TrainObserver, TrainOutcome,
};
use acdg::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::plot::{self, Figure, Point, Series};
use crate::{Failure, Method, Overrides};

pub const DATASET_FILE: &str = "dataset.csv";
pub const AXIS_FILE: &str = "axis.json";
pub const CONFIG_FILE: &str = "config.json";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const DENOISED_FILE: &str = "denoised.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const PROTOCOL_JSON: &str = "protocol.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const BY_FRACTION_CSV: &str = "by_fraction.csv";

static STARTED: OnceLock<(Instant, u128)> = OnceLock::new();

pub fn start_clock() {
    STARTED.get_or_init(|| {
        let ms = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
        (Instant::now(), ms)
    });
}

/// A command's output directory and the files written to it so far.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), Failure> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| io(&p, e))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        self.text(name, &(serde_json::to_string_pretty(value).expect("plain data") + "\n"))
    }

    /// Writes `config.json` and, last, `run.json`. Wall-clock time lives
    /// only under `run.json`'s `wall_clock` key.
    fn finish(mut self, command: &str, cfg: Option<&RunConfig>) -> Result<(), Failure> {
        if let Some(c) = cfg {
            self.json(CONFIG_FILE, c)?;
        }
        start_clock();
        let (started, started_ms) = *STARTED.get().expect("set above");
        let run = json!({
            "command": command,
            "config_hash": cfg.map(RunConfig::hash),
            "outputs": self.written,
            "wall_clock": {
                "started_unix_ms": started_ms as u64,
                "elapsed_ms": started.elapsed().as_millis() as u64,
            },
        });
        let p = self.dir.join(RUN_FILE);
        fs::write(&p, serde_json::to_string_pretty(&run).expect("plain data") + "\n").map_err(|e| io(&p, e))
    }
}

fn io(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 1,
        msg: format!("i/o error on {}: {e}", path.display()),
    }
}

fn data_files(p: &Path) -> (PathBuf, PathBuf) {
    if p.is_dir() {
        (p.join(DATASET_FILE), p.join(AXIS_FILE))
    } else {
        (p.to_path_buf(), p.with_file_name(AXIS_FILE))
    }
}

/// The run configuration recorded next to an artifact, if any.
fn upstream_config(path: &Path) -> Result<Option<RunConfig>, Failure> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| {
        Error::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
        .into()
    })
}

fn read_spectra(data: &Path) -> Result<(WavenumberAxis, Option<Vec<(f64, f64)>>, Vec<Spectrum>), Failure> {
    if !data.exists() {
        return Err(Failure {
            code: 1,
            msg: format!("--data {}: no such file or directory", data.display()),
        });
    }
    let (csv, axis) = data_files(data);
    let (axis, bands) = WavenumberAxis::read_json(&axis)?;
    let spectra = read_csv(&csv)?;
    if let Some(s) = spectra.iter().find(|s| s.len() != axis.length) {
        return Err(Error::Dimension(format!(
            "{} has {} intensity columns but the axis has {} points",
            csv.display(),
            s.len(),
            axis.length
        ))
        .into());
    }
    Ok((axis, bands, spectra))
}

fn load_dataset(data: &Path) -> Result<DomainDataset, Failure> {
    let (axis, bands, spectra) = read_spectra(data)?;
    Ok(dataset_from_spectra(axis, spectra, bands)?)
}

/// Aligns the model shape with the dataset actually loaded.
fn fit_to_dataset(cfg: &mut RunConfig, ds: &DomainDataset) -> Result<(), Failure> {
    if cfg.data.axis_length != ds.axis.length {
        return Err(Error::Dimension(format!(
            "dataset axis has {} points but the configuration expects {}",
            ds.axis.length, cfg.data.axis_length
        ))
        .into());
    }
    cfg.data.strains = ds.class_count;
    cfg.train.model.length = ds.axis.length;
    cfg.train.model.classes = ds.class_count;
    Ok(())
}

fn mean_snr_by_condition(ds: &DomainDataset, rows: &[&Spectrum]) -> Result<Vec<(f64, f64, usize)>, Failure> {
    let (signal, noise) = ds.bands.indices(&ds.axis)?;
    Ok(ds
        .conditions
        .iter()
        .map(|&t| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|s| same_condition(s.condition, t))
                .map(|s| snr_at(&normalize(&s.intensities), &signal, &noise))
                .collect();
            (t, v.iter().sum::<f64>() / v.len().max(1) as f64, v.len())
        })
        .collect())
}

pub fn gen_data(o: &Overrides, out: &Path) -> Result<(), Failure> {
    let cfg = o.resolve(RunConfig::default())?;
    let ds = cfg.data.generate(cfg.seed)?;
    let mut w = Outputs::create(out)?;
    let p = w.path(DATASET_FILE);
    write_csv(&p, &ds.spectra, &[])?;
    let p = w.path(AXIS_FILE);
    ds.axis.write_json(&p, Some(&ds.bands.signal))?;
    println!("{} spectra, {} classes, {} conditions, axis length {}", ds.spectra.len(), ds.class_count, ds.conditions.len(), ds.axis.length);
    println!("condition_s  mean_snr_db  samples");
    for (t, snr, n) in mean_snr_by_condition(&ds, &ds.spectra.iter().collect::<Vec<_>>())? {
        println!("{t:>11}  {snr:>11.3}  {n:>7}");
    }
    w.finish("gen-data", Some(&cfg))
}

/// Streams one JSON line per epoch and a progress line to stderr.
struct EpochStream {
    out: BufWriter<File>,
    path: PathBuf,
    epochs: usize,
    error: Option<std::io::Error>,
}

impl TrainObserver for EpochStream {
    fn after_epoch(&mut self, log: &EpochLog) {
        if self.error.is_none() {
            let line = serde_json::to_string(log).expect("plain struct");
            if let Err(e) = writeln!(self.out, "{line}").and_then(|_| self.out.flush()) {
                self.error = Some(e);
            }
        }
        eprintln!(
            "epoch {}/{}  l_dt {:.4}  l_dg {:.4}  train_acc {:.3}",
            log.epoch + 1,
            self.epochs,
            log.l_dt,
            log.l_dg,
            log.train_accuracy
        );
    }
}

fn checkpoint_config(cfg: &RunConfig) -> Value {
    json!({ "config_hash": cfg.hash(), "run": cfg })
}

pub fn train(o: &Overrides, data: &Path, out: &Path, method: Method) -> Result<(), Failure> {
    let (_, axis_path) = data_files(data);
    let base = upstream_config(&axis_path.with_file_name(CONFIG_FILE))?.unwrap_or_default();
    let mut cfg = o.resolve(base)?;
    let ds = load_dataset(data)?;
    fit_to_dataset(&mut cfg, &ds)?;
    let split = split_task(&ds, cfg.source_condition()?, cfg.train_fraction()?, cfg.seed)?;
    let mut w = Outputs::create(out)?;
    let epochs_path = w.path(EPOCHS_FILE);
    let file = File::create(&epochs_path).map_err(|e| io(&epochs_path, e))?;
    let mut stream = EpochStream {
        out: BufWriter::new(file),
        path: epochs_path,
        epochs: cfg.train.epochs,
        error: None,
    };
    let kind = match method {
        Method::Acdg => ModelKind::Acdg,
        Method::Erm => ModelKind::Erm,
    };
    let outcome = if cfg.train.epochs == 0 {
        let bundle = match kind {
            ModelKind::Acdg => ModelBundle::<f32>::new(cfg.train.model.clone(), cfg.seed)?,
            ModelKind::Erm => ModelBundle::<f32>::classifier_only(cfg.train.model.clone(), cfg.seed)?,
        };
        TrainOutcome {
            bundle,
            logs: Vec::new(),
            rng: RngState::capture(cfg.seed, &sampler_rng(cfg.seed)),
        }
    } else {
        match kind {
            ModelKind::Acdg => train_observed(&split.train, &cfg.train, &mut stream)?,
            ModelKind::Erm => train_erm_observed(&split.train, &cfg.train, &mut stream)?,
        }
    };
    if let Some(e) = stream.error.take() {
        return Err(io(&stream.path, e));
    }
    drop(stream);
    let ck = w.path(CHECKPOINT_DIR);
    training::save(&outcome.bundle, &ck, kind, outcome.logs.len(), outcome.rng, checkpoint_config(&cfg))?;
    println!(
        "trained {} on {} ({} spectra at {} s) for {} epochs",
        method_name(kind),
        task_id(&ds, split.source_condition),
        split.train.len(),
        split.source_condition,
        outcome.logs.len()
    );
    if let Some(last) = outcome.logs.last() {
        println!("final train accuracy {:.4}", last.train_accuracy);
    }
    w.finish("train", Some(&cfg))
}

fn method_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Acdg => "acdg",
        ModelKind::Erm => "erm",
    }
}

/// Loads a checkpoint and the configuration it was trained under.
fn load_checkpoint(ck: &Path, o: &Overrides) -> Result<(training::Checkpoint, RunConfig), Failure> {
    let checkpoint = training::load(ck)?;
    let base = match checkpoint.manifest.config.get("run") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::from(acdg::CheckpointError::CorruptManifest(format!("run config: {e}"))))?,
        None => RunConfig::default(),
    };
    let mut cfg = o.resolve(base)?;
    cfg.train.model = checkpoint.manifest.model.clone();
    Ok((checkpoint, cfg))
}

pub fn denoise(o: &Overrides, data: &Path, ck: &Path, out: &Path) -> Result<(), Failure> {
    let (checkpoint, cfg) = load_checkpoint(ck, o)?;
    if checkpoint.manifest.kind != ModelKind::Acdg {
        return Err(Failure::usage(format!(
            "--checkpoint {} holds an erm classifier, which has no generators to denoise with",
            ck.display()
        )));
    }
    let (axis, bands, spectra) = read_spectra(data)?;
    let model_len = checkpoint.bundle.config.length;
    if axis.length != model_len {
        return Err(Error::Dimension(format!("data axis has {} points, model expects {model_len}", axis.length)).into());
    }
    let ds = dataset_from_spectra(axis, spectra, bands)?;
    let (signal, noise) = ds.bands.indices(&ds.axis)?;
    let rows: Vec<Vec<f64>> = ds.spectra.iter().map(|s| normalize(&s.intensities)).collect();
    let bundle = &checkpoint.bundle;
    let parts: Vec<Vec<Vec<f64>>> = rows.par_chunks(64).map(|c| bundle.denoise_rows(c)).collect::<Result<_, Error>>()?;
    let denoised: Vec<Vec<f64>> = parts.into_iter().flatten().collect();
    let before: Vec<f64> = rows.iter().map(|r| snr_at(r, &signal, &noise)).collect();
    let after: Vec<f64> = denoised.iter().map(|r| snr_at(&normalize(r), &signal, &noise)).collect();
    let out_spectra: Vec<Spectrum> = ds.spectra.iter().zip(denoised).map(|(s, d)| s.with_intensities(d)).collect();
    let mut w = Outputs::create(out)?;
    let p = w.path(DENOISED_FILE);
    write_csv(&p, &out_spectra, &[("snr_before", before.clone()), ("snr_after", after.clone())])?;
    println!("denoised {} spectra", out_spectra.len());
    println!("condition_s  snr_before_db  snr_after_db  samples");
    for &t in &ds.conditions {
        let idx: Vec<usize> = (0..ds.spectra.len()).filter(|&i| same_condition(ds.spectra[i].condition, t)).collect();
        let m = |v: &[f64]| idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len().max(1) as f64;
        println!("{t:>11}  {:>13.3}  {:>12.3}  {:>7}", m(&before), m(&after), idx.len());
    }
    w.finish("denoise", Some(&cfg))
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    config_hash: String,
    report: TaskReport,
}

#[derive(Serialize, Deserialize)]
struct ProtocolFile {
    config_hash: String,
    protocol: ProtocolReport,
}

fn print_report(r: &TaskReport) {
    println!(
        "{} {} source {} s: intra accuracy {:.4}, inter pooled accuracy {:.4}, inter mean accuracy {:.4}",
        r.task_id, r.method, r.source_condition, r.intra.metrics.accuracy, r.inter_pooled.accuracy, r.inter_mean.accuracy
    );
    for c in &r.inter {
        println!("  {:>6} s  accuracy {:.4}  macro f1 {:.4}", c.condition_s, c.metrics.accuracy, c.metrics.f1);
    }
}

pub fn eval_checkpoint(o: &Overrides, data: &Path, ck: &Path, out: &Path) -> Result<(), Failure> {
    let (checkpoint, mut cfg) = load_checkpoint(ck, o)?;
    let ds = load_dataset(data)?;
    if ds.axis.length != checkpoint.bundle.config.length {
        return Err(Error::Dimension(format!(
            "data axis has {} points, model expects {}",
            ds.axis.length, checkpoint.bundle.config.length
        ))
        .into());
    }
    cfg.data.axis_length = ds.axis.length;
    for d in &cfg.denoisers {
        d.validate(ds.axis.length).map_err(|e| Failure::usage(format!("--denoiser {d}: {e}")))?;
    }
    let split = split_task(&ds, cfg.source_condition()?, cfg.train_fraction()?, cfg.seed)?;
    let clf: Box<dyn Classifier> = match checkpoint.manifest.kind {
        ModelKind::Acdg => Box::new(Acdg(&checkpoint.bundle)),
        ModelKind::Erm => Box::new(Erm(&checkpoint.bundle)),
    };
    let report = evaluate_task(clf.as_ref(), &ds, &split, &cfg.denoisers)?;
    let mut w = Outputs::create(out)?;
    w.json(
        REPORT_JSON,
        &ReportFile {
            config_hash: cfg.hash(),
            report: report.clone(),
        },
    )?;
    let p = w.path(REPORT_CSV);
    write_reports_csv(&p, std::slice::from_ref(&report))?;
    print_report(&report);
    w.finish("eval", Some(&cfg))
}

pub fn eval_protocol(o: &Overrides, data: &Path, out: &Path) -> Result<(), Failure> {
    let (_, axis_path) = data_files(data);
    let base = upstream_config(&axis_path.with_file_name(CONFIG_FILE))?.unwrap_or_default();
    let mut cfg = o.resolve(base)?;
    let ds = load_dataset(data)?;
    fit_to_dataset(&mut cfg, &ds)?;
    let pc = ProtocolConfig {
        train: cfg.train.clone(),
        source_conditions: cfg.protocol.source_conditions.clone(),
        train_fractions: cfg.protocol.train_fractions.clone(),
        seeds: cfg.protocol.seeds.clone(),
        denoisers: cfg.denoisers.clone(),
    };
    let report = run_protocol(&ds, &pc)?;
    let mut w = Outputs::create(out)?;
    let reports: Vec<TaskReport> = report.runs.iter().map(|r| r.report.clone()).collect();
    let p = w.path(REPORT_CSV);
    write_reports_csv(&p, &reports)?;
    let p = w.path(SUMMARY_CSV);
    write_summary_csv(&p, &report.summary)?;
    let p = w.path(BY_FRACTION_CSV);
    write_summary_csv(&p, &report.by_fraction)?;
    for row in report.summary.iter().filter(|r| r.metric == "intra_accuracy" || r.metric == "inter_pooled_accuracy") {
        println!(
            "{} f={} {:<5} {:<22} {:.4} ± {:.4} ({} runs)",
            row.task, row.train_fraction, row.method, row.metric, row.mean, row.std, row.runs
        );
    }
    w.json(
        PROTOCOL_JSON,
        &ProtocolFile {
            config_hash: cfg.hash(),
            protocol: report,
        },
    )?;
    w.finish("eval", Some(&cfg))
}

/// Groups `(series, x) -> values` in first-seen series order.
#[derive(Default)]
struct Acc(Vec<(String, Vec<(f64, Vec<f64>)>)>);

impl Acc {
    fn push(&mut self, name: &str, x: f64, y: f64) {
        let i = match self.0.iter().position(|(n, _)| n == name) {
            Some(i) => i,
            None => {
                self.0.push((name.to_string(), Vec::new()));
                self.0.len() - 1
            }
        };
        let pts = &mut self.0[i].1;
        match pts.iter_mut().find(|(px, _)| same_condition(*px, x)) {
            Some((_, v)) => v.push(y),
            None => pts.push((x, vec![y])),
        }
    }

    fn series(self) -> Vec<Series> {
        self.0
            .into_iter()
            .map(|(name, mut pts)| {
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    name,
                    points: pts
                        .into_iter()
                        .map(|(x, v)| {
                            let (mean, std) = mean_std(&v);
                            Point { x, mean, std, runs: v.len() }
                        })
                        .collect(),
                }
            })
            .collect()
    }
}

fn read_reports(dirs: &[PathBuf]) -> Result<Vec<TaskReport>, Failure> {
    let mut out = Vec::new();
    for d in dirs {
        let single = d.join(REPORT_JSON);
        let protocol = d.join(PROTOCOL_JSON);
        let schema = |p: &Path, e: serde_json::Error| -> Failure {
            Error::Schema {
                path: p.to_path_buf(),
                reason: e.to_string(),
            }
            .into()
        };
        if protocol.is_file() {
            let text = fs::read_to_string(&protocol).map_err(|e| io(&protocol, e))?;
            let f: ProtocolFile = serde_json::from_str(&text).map_err(|e| schema(&protocol, e))?;
            out.extend(f.protocol.runs.into_iter().map(|r| r.report));
        } else if single.is_file() {
            let text = fs::read_to_string(&single).map_err(|e| io(&single, e))?;
            let f: ReportFile = serde_json::from_str(&text).map_err(|e| schema(&single, e))?;
            out.push(f.report);
        } else {
            return Err(Failure {
                code: 1,
                msg: format!("--data {}: no {REPORT_JSON} or {PROTOCOL_JSON} found", d.display()),
            });
        }
    }
    Ok(out)
}

fn emit(w: &mut Outputs, stem: &str, fig: Figure) -> Result<(), Failure> {
    w.text(&format!("{stem}.svg"), &plot::svg(&fig))?;
    w.text(&format!("{stem}.csv"), &plot::csv(fig.series))
}

pub fn report(dirs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let reports = read_reports(dirs)?;
    let mut w = Outputs::create(out)?;

    let mut snr = Acc::default();
    let mut acc = Acc::default();
    let mut by_source = Acc::default();
    let mut by_fraction = Acc::default();
    let mut fractions: Vec<f64> = Vec::new();
    for r in &reports {
        if !fractions.iter().any(|&f| same_condition(f, r.train_fraction)) {
            fractions.push(r.train_fraction);
        }
    }
    let multi_fraction = fractions.len() > 1;
    for r in &reports {
        for e in &r.snr {
            snr.push(&e.method, e.condition_s, e.mean_snr_db);
        }
        let name = if multi_fraction {
            format!("{} {} f={}", r.method, r.task_id, r.train_fraction)
        } else {
            format!("{} {}", r.method, r.task_id)
        };
        acc.push(&name, r.source_condition, r.intra.metrics.accuracy);
        for c in &r.inter {
            acc.push(&name, c.condition_s, c.metrics.accuracy);
        }
        let sname = if multi_fraction { format!("{} f={}", r.method, r.train_fraction) } else { r.method.clone() };
        by_source.push(&sname, r.source_condition, r.inter_pooled.accuracy);
        by_fraction.push(&r.method, r.train_fraction, r.inter_pooled.accuracy);
    }

    let snr = snr.series();
    emit(
        &mut w,
        "snr_vs_condition",
        Figure {
            title: "Mean SNR of test spectra",
            x_label: "acquisition time (s)",
            y_label: "SNR (dB)",
            log_x: true,
            series: &snr,
        },
    )?;
    let acc = acc.series();
    emit(
        &mut w,
        "accuracy_vs_condition",
        Figure {
            title: "Accuracy per evaluation condition",
            x_label: "acquisition time (s)",
            y_label: "accuracy",
            log_x: true,
            series: &acc,
        },
    )?;
    let by_source = by_source.series();
    emit(
        &mut w,
        "accuracy_vs_source",
        Figure {
            title: "Pooled inter-domain accuracy by source condition",
            x_label: "source acquisition time (s)",
            y_label: "accuracy",
            log_x: true,
            series: &by_source,
        },
    )?;
    if multi_fraction {
        let by_fraction = by_fraction.series();
        emit(
            &mut w,
            "accuracy_vs_fraction",
            Figure {
                title: "Pooled inter-domain accuracy by training fraction",
                x_label: "training fraction",
                y_label: "accuracy",
                log_x: false,
                series: &by_fraction,
            },
        )?;
    }
    println!("{} reports plotted into {}", reports.len(), out.display());
    w.finish("report", None)
}
