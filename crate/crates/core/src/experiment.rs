//! Experiment grid: one teacher per needed domain, the zero-shot matrix, and
//! every (source, target, method, replicate) adaptation run, persisted to an
//! output directory.
//!
//! Layout of the output directory:
//!
//! ```text
//! config.toml                      effective configuration
//! teachers/<domain>.ckpt           cached teacher checkpoints
//! teachers/<domain>.trace.jsonl
//! runs/<src>-to-<tgt>/<method>/seed-<n>/{student.ckpt, trace.jsonl, report.json}
//! runs.json                        every run record (no timings)
//! summary.csv, summary.txt         per (pair, method) mean F1 over replicates
//! zero_shot.{json,csv,txt}
//! plots/<src>-to-<tgt>.svg         validation F1 and loss per epoch
//! manifest.json                    timings and teacher cache hits
//! ```
//!
//! Everything except `manifest.json`, the traces and the plots is a
//! deterministic function of the configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{adapt_student, train_teacher, AdaptationConfig, Method, Teacher, TeacherConfig, TrainingTrace};
use crate::backbone::checkpoint::{Checkpoint, TrainingMetadata};
use crate::datagen::ingest::{ingest_frames_expecting, MANIFEST_NAME};
use crate::datagen::{generate_domain_with, DomainDataset, DomainSpec, GeneratorConfig, Split, FRAMES_PER_GROUP};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, zero_shot_matrix, AdaptationReport, ZeroShotMatrix};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pair {
    pub source: String,
    pub target: String,
}

impl Pair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self { source: source.into(), target: target.into() }
    }

    pub fn slug(&self) -> String {
        format!("{}-to-{}", self.source, self.target)
    }
}

/// A domain given either as a preset name or as a full specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainEntry {
    Preset(String),
    Spec(DomainSpec),
}

impl DomainEntry {
    /// Resolves presets; `quality` fills in specs that set none.
    pub fn resolve(&self, quality: Option<u8>) -> Result<DomainSpec> {
        let mut spec = match self {
            DomainEntry::Preset(name) => DomainSpec::preset(name)?,
            DomainEntry::Spec(spec) => spec.clone(),
        };
        if spec.quality.is_none() {
            spec.quality = quality;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Frames on disk instead of generated domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSource {
    pub root: PathBuf,
    /// Defaults to `<root>/manifest.csv`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_frames_per_group")]
    pub frames_per_group: usize,
}

fn default_frames_per_group() -> usize {
    FRAMES_PER_GROUP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed of data generation.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// JPEG quality applied to domains that do not set their own.
    pub quality: Option<u8>,
    pub domains: Vec<DomainEntry>,
    pub generator: GeneratorConfig,
    pub ingest: Option<IngestSource>,
    /// Domains of the zero-shot matrix; all domains when omitted, none when
    /// empty.
    pub zero_shot: Option<Vec<String>>,
    pub pairs: Vec<Pair>,
    pub methods: Vec<Method>,
    /// Runs per (pair, method), seeded `adaptation.seed + r`.
    pub replicates: usize,
    pub teacher: TeacherConfig,
    pub adaptation: AdaptationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            quality: None,
            domains: Vec::new(),
            generator: GeneratorConfig::default(),
            ingest: None,
            zero_shot: None,
            pairs: Vec::new(),
            methods: Method::ALL.to_vec(),
            replicates: 1,
            teacher: TeacherConfig::default(),
            adaptation: AdaptationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn domain_specs(&self) -> Result<Vec<DomainSpec>> {
        self.domains.iter().map(|d| d.resolve(self.quality)).collect()
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        match (&self.ingest, self.domains.is_empty()) {
            (Some(_), false) => return Err(Error::Config("`domains` and `ingest` are mutually exclusive".into())),
            (None, true) => return Err(Error::Config("no domains configured".into())),
            _ => {}
        }
        let specs = self.domain_specs()?;
        let mut names = BTreeSet::new();
        for s in &specs {
            if !names.insert(s.name.as_str()) {
                return Err(Error::Config(format!("domain '{}' is listed twice", s.name)));
            }
        }
        if let Some(ing) = &self.ingest {
            if ing.frames_per_group == 0 {
                return Err(Error::Config("ingest.frames_per_group must be positive".into()));
            }
        } else if self.generator.adapt_groups != self.adaptation.adapt_groups {
            return Err(Error::Config(format!(
                "generator reserves {} adaptation groups but adaptation expects {}",
                self.generator.adapt_groups, self.adaptation.adapt_groups
            )));
        }
        if self.methods.is_empty() || self.replicates == 0 {
            return Err(Error::Config("need at least one method and one replicate".into()));
        }
        if self.methods.iter().collect::<BTreeSet<_>>().len() != self.methods.len() {
            return Err(Error::Config("methods must be distinct".into()));
        }
        for p in &self.pairs {
            if p.source == p.target {
                return Err(Error::Protocol(format!(
                    "pair {} -> {} would adapt on the teacher's own source domain",
                    p.source, p.target
                )));
            }
        }
        self.teacher.validate()?;
        self.adaptation.validate()?;
        if self.ingest.is_none() {
            self.check_names(&names)?;
        }
        Ok(())
    }

    fn check_names(&self, names: &BTreeSet<&str>) -> Result<()> {
        let listed = self.pairs.iter().flat_map(|p| [&p.source, &p.target]).chain(self.zero_shot.iter().flatten());
        for n in listed {
            if !names.contains(n.as_str()) {
                return Err(Error::Config(format!("unknown domain '{n}' in pairs or zero_shot")));
            }
        }
        Ok(())
    }

    /// Generates or ingests every configured domain.
    pub fn load_datasets(&self) -> Result<Vec<DomainDataset>> {
        let datasets = match &self.ingest {
            Some(ing) => {
                let manifest = ing.manifest.clone().unwrap_or_else(|| ing.root.join(MANIFEST_NAME));
                ingest_frames_expecting(&ing.root, &manifest, ing.frames_per_group)?.datasets
            }
            None => self
                .domain_specs()?
                .iter()
                .map(|spec| generate_domain_with(spec, &self.generator, self.seed))
                .collect::<Result<Vec<_>>>()?,
        };
        let names: BTreeSet<&str> = datasets.iter().map(|d| d.domain.as_str()).collect();
        self.check_names(&names)?;
        Ok(datasets)
    }

    fn zero_shot_domains<'a>(&'a self, datasets: &'a [DomainDataset]) -> Vec<&'a str> {
        match &self.zero_shot {
            Some(list) => list.iter().map(String::as_str).collect(),
            None => datasets.iter().map(|d| d.domain.as_str()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    Error { message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub domain: String,
    pub status: RunStatus,
    pub cached: bool,
    pub best_val_f1: Option<f64>,
    pub model_hash: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub source: String,
    pub target: String,
    pub method: Method,
    pub seed: u64,
    pub status: RunStatus,
    pub report: Option<AdaptationReport>,
    pub best_epoch: Option<usize>,
    pub epochs: Option<usize>,
    pub stop_reason: Option<String>,
    pub source_samples_read: usize,
    #[serde(skip)]
    pub trace: Option<TrainingTrace>,
}

/// Mean F1 of one (pair, method) cell over its successful replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub source: String,
    pub target: String,
    pub method: Method,
    pub runs: usize,
    pub failed: usize,
    pub source_f1: f64,
    pub target_f1: f64,
    pub avg_f1: f64,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
}

/// Groups runs by (pair, method) in order of first appearance.
pub fn summarize(runs: &[RunRecord]) -> Vec<SummaryRow> {
    let mut rows: Vec<(SummaryRow, [f64; 5])> = Vec::new();
    for r in runs {
        let pos = rows.iter().position(|(row, _)| row.source == r.source && row.target == r.target && row.method == r.method);
        let (row, sums) = match pos {
            Some(i) => &mut rows[i],
            None => {
                let row = SummaryRow {
                    source: r.source.clone(),
                    target: r.target.clone(),
                    method: r.method,
                    runs: 0,
                    failed: 0,
                    source_f1: f64::NAN,
                    target_f1: f64::NAN,
                    avg_f1: f64::NAN,
                    source_accuracy: f64::NAN,
                    target_accuracy: f64::NAN,
                };
                rows.push((row, [0.0; 5]));
                rows.last_mut().expect("just pushed")
            }
        };
        match &r.report {
            Some(rep) if r.status == RunStatus::Ok => {
                row.runs += 1;
                for (s, v) in sums.iter_mut().zip([rep.source_f1, rep.target_f1, rep.avg_f1, rep.source.accuracy, rep.target.accuracy]) {
                    *s += v;
                }
            }
            _ => row.failed += 1,
        }
    }
    rows.into_iter()
        .map(|(mut row, sums)| {
            if row.runs > 0 {
                let n = row.runs as f64;
                row.source_f1 = sums[0] / n;
                row.target_f1 = sums[1] / n;
                row.avg_f1 = sums[2] / n;
                row.source_accuracy = sums[3] / n;
                row.target_accuracy = sums[4] / n;
            }
            row
        })
        .collect()
}

fn fmt_metric(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".into()
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("source,target,method,runs,failed,source_f1,target_f1,avg_f1,source_accuracy,target_accuracy\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.source,
            r.target,
            r.method,
            r.runs,
            r.failed,
            fmt_metric(r.source_f1),
            fmt_metric(r.target_f1),
            fmt_metric(r.avg_f1),
            fmt_metric(r.source_accuracy),
            fmt_metric(r.target_accuracy)
        );
    }
    out
}

/// One block per pair: methods as rows, Source / Target / Avg. F1 as
/// columns.
pub fn summary_text(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let mut current: Option<(&str, &str)> = None;
    for r in rows {
        if current != Some((&r.source, &r.target)) {
            if current.is_some() {
                out.push('\n');
            }
            current = Some((&r.source, &r.target));
            let _ = writeln!(out, "{} -> {}", r.source, r.target);
            let _ = writeln!(out, "{:<8} {:>8} {:>8} {:>8} {:>5}", "method", "source", "target", "avg", "runs");
        }
        let failed = if r.failed > 0 { format!(" ({} failed)", r.failed) } else { String::new() };
        let _ = writeln!(
            out,
            "{:<8} {:>8.4} {:>8.4} {:>8.4} {:>5}{failed}",
            r.method.as_str(),
            r.source_f1,
            r.target_f1,
            r.avg_f1,
            r.runs
        );
    }
    out
}

pub fn zero_shot_csv(m: &ZeroShotMatrix) -> String {
    let mut out = String::from("teacher");
    for d in &m.domains {
        out.push(',');
        out.push_str(d);
    }
    out.push('\n');
    for (src, row) in m.sources.iter().zip(&m.reports) {
        out.push_str(src);
        for e in row {
            out.push(',');
            out.push_str(&fmt_metric(e.f1));
        }
        out.push('\n');
    }
    out
}

/// Thresholds applied by [`check_outcome`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckThresholds {
    /// Required Avg. F1 margin of the full method over fine-tuning.
    pub fretal_margin: f64,
    pub min_diagonal: f64,
    pub min_gap: f64,
}

impl Default for CheckThresholds {
    fn default() -> Self {
        Self { fretal_margin: 0.03, min_diagonal: 0.95, min_gap: 0.20 }
    }
}

/// Human-readable descriptions of every failed threshold.
pub fn check_outcome(rows: &[SummaryRow], zero_shot: Option<&ZeroShotMatrix>, th: &CheckThresholds) -> Vec<String> {
    let mut failures = Vec::new();
    let find = |src: &str, tgt: &str, m: Method| rows.iter().find(|r| r.source == src && r.target == tgt && r.method == m && r.runs > 0);
    for r in rows.iter().filter(|r| r.method == Method::Fretal) {
        if r.failed > 0 {
            failures.push(format!("{} -> {}: {} fretal runs failed", r.source, r.target, r.failed));
        }
        if let Some(ft) = find(&r.source, &r.target, Method::Ft) {
            if !(r.avg_f1 >= ft.avg_f1 + th.fretal_margin) {
                failures.push(format!(
                    "{} -> {}: fretal avg {:.4} < ft avg {:.4} + {}",
                    r.source, r.target, r.avg_f1, ft.avg_f1, th.fretal_margin
                ));
            }
            if !(r.source_f1 >= ft.source_f1) {
                failures.push(format!("{} -> {}: fretal source {:.4} < ft source {:.4}", r.source, r.target, r.source_f1, ft.source_f1));
            }
        }
        if let Some(kd) = find(&r.source, &r.target, Method::Kd) {
            if !(r.avg_f1 >= kd.avg_f1) {
                failures.push(format!("{} -> {}: fretal avg {:.4} < kd avg {:.4}", r.source, r.target, r.avg_f1, kd.avg_f1));
            }
        }
    }
    if let Some(m) = zero_shot {
        for (i, src) in m.sources.iter().enumerate() {
            let Some(d) = m.diagonal_col(i) else { continue };
            let diag = m.f1(i, d);
            if !(diag >= th.min_diagonal) {
                failures.push(format!("zero-shot {src}: diagonal {diag:.4} < {}", th.min_diagonal));
            }
            for (j, dom) in m.domains.iter().enumerate().filter(|&(j, _)| j != d) {
                if !(m.f1(i, j) <= diag - th.min_gap) {
                    failures.push(format!("zero-shot {src} on {dom}: {:.4} within {} of diagonal {diag:.4}", m.f1(i, j), th.min_gap));
                }
            }
        }
    }
    failures
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub teachers: Vec<TeacherRecord>,
    pub zero_shot: Option<ZeroShotMatrix>,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    teachers: &'a [TeacherRecord],
    seconds: f64,
}

fn cache_key(ds: &DomainDataset, cfg: &TeacherConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(ds.content_hash().as_bytes());
    h.update(serde_json::to_vec(cfg)?);
    Ok(hex::encode(h.finalize()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ObtainedTeacher {
    pub teacher: Teacher,
    pub cached: bool,
    pub best_val_f1: Option<f64>,
}

/// Loads the cached teacher for `ds` if its key matches, else trains and
/// caches one.
pub fn obtain_teacher(ds: &DomainDataset, cfg: &TeacherConfig, dir: &Path) -> Result<ObtainedTeacher> {
    let key = cache_key(ds, cfg)?;
    let path = dir.join(format!("{}.ckpt", ds.domain));
    if path.exists() {
        match Checkpoint::load(&path) {
            Ok(ck) if ck.metadata.extra.get("cache_key").and_then(|v| v.as_str()) == Some(key.as_str()) => {
                let best_val_f1 = ck.metadata.extra.get("best_val_f1").and_then(|v| v.as_f64());
                return Ok(ObtainedTeacher { teacher: Teacher::from_checkpoint(ck)?, cached: true, best_val_f1 });
            }
            Ok(_) => log::info!("teacher cache for {} is stale; retraining", ds.domain),
            Err(e) => log::warn!("ignoring unreadable teacher cache {}: {e}", path.display()),
        }
    }
    let teacher = train_teacher(ds, cfg)?;
    let mut ck = teacher.checkpoint(cfg.seed);
    ck.metadata.extra.insert("cache_key".into(), key.into());
    if let Some(t) = &teacher.trace {
        ck.metadata.extra.insert("best_val_f1".into(), t.best_val_f1.into());
        t.write_jsonl(&dir.join(format!("{}.trace.jsonl", ds.domain)))?;
    }
    ck.save(&path)?;
    let best_val_f1 = teacher.trace.as_ref().map(|t| t.best_val_f1);
    Ok(ObtainedTeacher { teacher, cached: false, best_val_f1 })
}

fn error_status(e: &Error) -> RunStatus {
    RunStatus::Error { message: e.to_string() }
}

/// Runs the whole grid, writing artifacts below `out`. Protocol violations
/// abort; any other per-teacher or per-run failure is recorded and the
/// remaining cells still run.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let datasets = cfg.load_datasets()?;
    let dataset = |name: &str| datasets.iter().find(|d| d.domain == name).expect("names checked");
    let zs_domains = cfg.zero_shot_domains(&datasets);

    let mut needed: Vec<&str> = Vec::new();
    for d in &datasets {
        let name = d.domain.as_str();
        if cfg.pairs.iter().any(|p| p.source == name) || zs_domains.contains(&name) {
            needed.push(name);
        }
    }

    let teacher_dir = out.join("teachers");
    let mut teachers: Vec<(String, Teacher)> = Vec::new();
    let mut teacher_records = Vec::new();
    for name in needed {
        let t0 = Instant::now();
        let record = match obtain_teacher(dataset(name), &cfg.teacher, &teacher_dir) {
            Ok(ObtainedTeacher { teacher, cached, best_val_f1 }) => {
                let rec = TeacherRecord {
                    domain: name.into(),
                    status: RunStatus::Ok,
                    cached,
                    best_val_f1,
                    model_hash: Some(teacher.model.parameter_hash()),
                    seconds: t0.elapsed().as_secs_f64(),
                };
                teachers.push((name.into(), teacher));
                rec
            }
            Err(e @ Error::Protocol(_)) => return Err(e),
            Err(e) => {
                log::error!("teacher for {name} failed: {e}");
                TeacherRecord {
                    domain: name.into(),
                    status: error_status(&e),
                    cached: false,
                    best_val_f1: None,
                    model_hash: None,
                    seconds: t0.elapsed().as_secs_f64(),
                }
            }
        };
        teacher_records.push(record);
    }
    let teacher_for = |name: &str| teachers.iter().find(|(n, _)| n == name).map(|(_, t)| t);

    let zero_shot = if zs_domains.is_empty() {
        None
    } else {
        let rows: Vec<(&str, &crate::backbone::ModelHandle)> =
            zs_domains.iter().filter_map(|&d| teacher_for(d).map(|t| (d, &t.model))).collect();
        let cols: Vec<&DomainDataset> = zs_domains.iter().map(|&d| dataset(d)).collect();
        let m = zero_shot_matrix(&rows, &cols)?;
        write_json(&out.join("zero_shot.json"), &m)?;
        fs::write(out.join("zero_shot.csv"), zero_shot_csv(&m))?;
        fs::write(out.join("zero_shot.txt"), m.to_table())?;
        Some(m)
    };

    let mut runs = Vec::new();
    for pair in &cfg.pairs {
        let (src, tgt) = (dataset(&pair.source), dataset(&pair.target));
        for &method in &cfg.methods {
            for r in 0..cfg.replicates {
                let seed = cfg.adaptation.seed + r as u64;
                let dir = out.join("runs").join(pair.slug()).join(method.as_str()).join(format!("seed-{seed}"));
                let mut record = RunRecord {
                    source: pair.source.clone(),
                    target: pair.target.clone(),
                    method,
                    seed,
                    status: RunStatus::Ok,
                    report: None,
                    best_epoch: None,
                    epochs: None,
                    stop_reason: None,
                    source_samples_read: 0,
                    trace: None,
                };
                let Some(teacher) = teacher_for(&pair.source) else {
                    record.status = RunStatus::Error { message: format!("no teacher for {}", pair.source) };
                    runs.push(record);
                    continue;
                };
                let acfg = AdaptationConfig { method, seed, ..cfg.adaptation.clone() };
                match run_one(teacher, src, tgt, &acfg, &dir) {
                    Ok((report, trace)) => {
                        record.best_epoch = Some(trace.best_epoch);
                        record.epochs = Some(trace.records.len() - 1);
                        record.stop_reason = Some(trace.stop_reason.to_string());
                        record.source_samples_read = trace.source_samples_read;
                        record.report = Some(report);
                        record.trace = Some(trace);
                    }
                    Err(e @ Error::Protocol(_)) => return Err(e),
                    Err(e) => {
                        log::error!("{method} {} failed (seed {seed}): {e}", pair.slug());
                        record.status = error_status(&e);
                    }
                }
                runs.push(record);
            }
        }
        plot_pair(&out.join("plots").join(format!("{}.svg", pair.slug())), pair, &runs)?;
    }

    let summary = summarize(&runs);
    write_json(&out.join("runs.json"), &runs)?;
    fs::write(out.join("summary.csv"), summary_csv(&summary))?;
    fs::write(out.join("summary.txt"), summary_text(&summary))?;
    write_json(&out.join("manifest.json"), &Manifest { teachers: &teacher_records, seconds: started.elapsed().as_secs_f64() })?;
    Ok(ExperimentOutcome { teachers: teacher_records, zero_shot, runs, summary })
}

/// One adaptation run with its evaluation and artifacts.
pub fn run_one(
    teacher: &Teacher,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &AdaptationConfig,
    dir: &Path,
) -> Result<(AdaptationReport, TrainingTrace)> {
    let adapted = adapt_student(teacher, target, cfg)?;
    if adapted.trace.source_samples_read != 0 {
        return Err(Error::Protocol(format!("{} source-domain samples were read", adapted.trace.source_samples_read)));
    }
    let report = AdaptationReport::new(
        cfg.method.as_str(),
        cfg.seed,
        evaluate_model(&adapted.student, source, Split::Test)?,
        evaluate_model(&adapted.student, target, Split::Test)?,
    );
    let mut metadata = TrainingMetadata {
        source_domain: Some(teacher.source_domain.clone()),
        epoch: Some(adapted.trace.best_epoch),
        seed: cfg.seed,
        ..TrainingMetadata::default()
    };
    metadata.extra.insert("target_domain".into(), target.domain.clone().into());
    metadata.extra.insert("method".into(), cfg.method.as_str().into());
    Checkpoint::new(adapted.student, metadata).save(&dir.join("student.ckpt"))?;
    adapted.trace.write_jsonl(&dir.join("trace.jsonl"))?;
    write_json(&dir.join("report.json"), &report)?;
    Ok((report, adapted.trace))
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::other(format!("plot: {e}")))
}

/// Validation F1 (left) and training loss (right) per epoch, one line per
/// method, using each method's first successful replicate.
fn plot_pair(path: &Path, pair: &Pair, runs: &[RunRecord]) -> Result<()> {
    use plotters::prelude::*;

    let mut series: Vec<(Method, &TrainingTrace)> = Vec::new();
    for r in runs.iter().filter(|r| r.source == pair.source && r.target == pair.target) {
        if let (Some(t), false) = (&r.trace, series.iter().any(|(m, _)| *m == r.method)) {
            series.push((r.method, t));
        }
    }
    if series.is_empty() {
        return Ok(());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let max_epoch = series.iter().map(|(_, t)| t.records.len()).max().unwrap_or(1).max(2) as f64 - 1.0;
    let totals = series.iter().flat_map(|(_, t)| t.records.iter().map(|r| r.total)).filter(|v| v.is_finite());
    let loss_max = totals.fold(0.0f64, f64::max).max(1e-6) * 1.05;

    let root = SVGBackend::new(path, (960, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (left, right) = root.split_horizontally(480);
    type Extract = fn(&crate::adapt::EpochRecord) -> f64;
    let panels: [(_, String, f64, Extract); 2] = [
        (left, format!("{} -> {}: validation F1", pair.source, pair.target), 1.0, |r| r.val_f1),
        (right, "training loss".to_string(), loss_max, |r| r.total),
    ];
    for (area, title, y_max, extract) in panels {
        let mut chart = ChartBuilder::on(&area)
            .caption(title, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(45)
            .build_cartesian_2d(0.0..max_epoch, 0.0..y_max)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("epoch").draw().map_err(plot_err)?;
        for (i, (method, trace)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let points = trace.records.iter().map(|r| (r.epoch as f64, extract(r))).filter(|(_, v)| v.is_finite());
            chart
                .draw_series(LineSeries::new(points, color.stroke_width(2)))
                .map_err(plot_err)?
                .label(method.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}
