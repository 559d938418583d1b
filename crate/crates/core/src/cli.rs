//! Command-line interface.
//!
//! Every subcommand accepts `--config` (an experiment TOML file whose
//! sections supply defaults), `--seed` and `--out`; explicit flags override
//! file values. `FRETAL_OUT` sets the default output root.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adapt::{adapt_student, train_teacher, AdaptationConfig, Method, Teacher};
use crate::backbone::checkpoint::Checkpoint;
use crate::datagen::ingest::{ingest_frames_expecting, MANIFEST_NAME};
use crate::datagen::{generate_domain_with, write_dataset, DomainDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, evaluate_with, zero_shot_matrix, EvalOptions, ZeroShotMatrix};
use crate::experiment::{
    check_outcome, run_experiment, run_one, summarize, summary_text, zero_shot_csv, CheckThresholds, DomainEntry,
    ExperimentConfig, Pair, RunRecord,
};

const DEFAULT_OUT: &str = "fretal-out";

#[derive(Debug, Parser)]
#[command(name = "fretal", version, about = "Source-free domain adaptation of real/fake image classifiers")]
pub struct Cli {
    /// Experiment TOML file supplying defaults for every section.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of the subcommand's main random process.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root (file or directory, depending on the subcommand).
    #[arg(long, global = true, env = "FRETAL_OUT")]
    pub out: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic domains and write them as PNG frames plus a manifest.
    GenerateData(GenerateArgs),
    /// Load frames listed in a manifest and print per-split statistics.
    Ingest(IngestArgs),
    /// Train and freeze a teacher on one domain.
    TrainTeacher(TrainTeacherArgs),
    /// Adapt a frozen teacher to a target domain.
    Adapt(AdaptArgs),
    /// Evaluate a checkpoint on one split of one domain.
    Evaluate(EvaluateArgs),
    /// Evaluate teachers on every domain's test split.
    ZeroShot(ZeroShotArgs),
    /// Run a full experiment grid from a config file.
    RunExperiment(RunExperimentArgs),
    /// Print (and optionally check) the results of an experiment.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root containing manifest.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Expected frames per group (groups that differ are reported).
    #[arg(long)]
    pub frames_per_group: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Domain preset name; repeatable. Defaults to the config's domains.
    #[arg(long = "domain")]
    pub domains: Vec<String>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub frames_per_group: Option<usize>,
    /// JPEG quality for domains that set none.
    #[arg(long)]
    pub quality: Option<u8>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub root: PathBuf,
    /// Defaults to <root>/manifest.csv.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub frames_per_group: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainTeacherArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub domain: String,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub min_source_f1: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Frozen teacher checkpoint.
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub fsl_weight: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub domain: String,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Score one majority vote per group instead of per frame.
    #[arg(long)]
    pub group_vote: bool,
}

#[derive(Debug, Args)]
pub struct ZeroShotArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Teacher checkpoint; repeatable.
    #[arg(long = "teacher", required = true)]
    pub teachers: Vec<PathBuf>,
    /// Domains to evaluate on; defaults to all in the manifest.
    #[arg(long = "domain")]
    pub domains: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunExperimentArgs {
    /// Comma-separated methods (ft, kd, fretal).
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<Method>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub frames_per_group: Option<usize>,
    #[arg(long)]
    pub fsl_weight: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Experiment output directory; defaults to the output root.
    #[arg(long)]
    pub dir: Option<PathBuf>,
    /// Exit with code 4 when a threshold fails.
    #[arg(long)]
    pub check: bool,
    #[arg(long, default_value_t = CheckThresholds::default().fretal_margin)]
    pub margin: f64,
    #[arg(long, default_value_t = CheckThresholds::default().min_diagonal)]
    pub min_diagonal: f64,
    #[arg(long, default_value_t = CheckThresholds::default().min_gap)]
    pub min_gap: f64,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let out = cli.out.clone().or_else(|| base.output_dir.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let ctx = Context { base, out, seed: cli.seed };
    match cli.command {
        Command::GenerateData(a) => ctx.generate(a),
        Command::Ingest(a) => ctx.ingest(a),
        Command::TrainTeacher(a) => ctx.train_teacher(a),
        Command::Adapt(a) => ctx.adapt(a),
        Command::Evaluate(a) => ctx.evaluate(a),
        Command::ZeroShot(a) => ctx.zero_shot(a),
        Command::RunExperiment(a) => ctx.run_experiment(a),
        Command::Report(a) => ctx.report(a),
    }
}

struct Context {
    base: ExperimentConfig,
    out: PathBuf,
    seed: Option<u64>,
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn split_counts(ds: &DomainDataset) -> serde_json::Value {
    let mut m = serde_json::Map::new();
    for s in Split::ALL {
        let (real, fake) = ds.label_balance(s);
        m.insert(s.as_str().into(), serde_json::json!({ "real": real, "fake": fake }));
    }
    serde_json::json!({ "domain": ds.domain, "frames": ds.len(), "groups": m, "content_hash": ds.content_hash() })
}

fn find<'a>(datasets: &'a [DomainDataset], name: &str) -> Result<&'a DomainDataset> {
    datasets.iter().find(|d| d.domain == name).ok_or_else(|| {
        let known: Vec<&str> = datasets.iter().map(|d| d.domain.as_str()).collect();
        Error::MissingSplit(format!("domain '{name}' not found (available: {})", known.join(", ")))
    })
}

impl Context {
    fn frames_per_group(&self, flag: Option<usize>) -> usize {
        flag.or_else(|| self.base.ingest.as_ref().map(|i| i.frames_per_group))
            .unwrap_or(self.base.generator.frames_per_group)
    }

    fn load_data(&self, args: &DataArgs) -> Result<Vec<DomainDataset>> {
        let manifest = args.data.join(MANIFEST_NAME);
        let report = ingest_frames_expecting(&args.data, &manifest, self.frames_per_group(args.frames_per_group))?;
        if !report.irregular_groups.is_empty() {
            log::warn!("{} groups have an unexpected frame count", report.irregular_groups.len());
        }
        Ok(report.datasets)
    }

    fn generate(&self, a: GenerateArgs) -> Result<()> {
        let mut cfg = self.base.clone();
        if !a.domains.is_empty() {
            cfg.domains = a.domains.into_iter().map(DomainEntry::Preset).collect();
        }
        if cfg.domains.is_empty() {
            return Err(Error::Config("no domains given (use --domain or a config file)".into()));
        }
        cfg.quality = a.quality.or(cfg.quality);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        if let Some(n) = a.groups {
            cfg.generator.n_groups = n;
        }
        if let Some(f) = a.frames_per_group {
            cfg.generator.frames_per_group = f;
        }
        let mut summaries = Vec::new();
        for spec in cfg.domain_specs()? {
            let ds = generate_domain_with(&spec, &cfg.generator, cfg.seed)?;
            write_dataset(&ds, &self.out)?;
            summaries.push(split_counts(&ds));
        }
        print_json(&summaries)
    }

    fn ingest(&self, a: IngestArgs) -> Result<()> {
        let manifest = a.manifest.unwrap_or_else(|| a.root.join(MANIFEST_NAME));
        let report = ingest_frames_expecting(&a.root, &manifest, self.frames_per_group(a.frames_per_group))?;
        let irregular: Vec<_> = report
            .irregular_groups
            .iter()
            .map(|(d, g, n)| serde_json::json!({ "domain": d, "group": g, "frames": n }))
            .collect();
        print_json(&serde_json::json!({
            "domains": report.datasets.iter().map(split_counts).collect::<Vec<_>>(),
            "irregular_groups": irregular,
        }))
    }

    fn train_teacher(&self, a: TrainTeacherArgs) -> Result<()> {
        let mut cfg = self.base.teacher.clone();
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.max_epochs = a.max_epochs.unwrap_or(cfg.max_epochs);
        cfg.min_source_f1 = a.min_source_f1.unwrap_or(cfg.min_source_f1);
        let datasets = self.load_data(&a.data)?;
        let ds = find(&datasets, &a.domain)?;
        let teacher = train_teacher(ds, &cfg)?;
        let path = if self.out.extension().is_some_and(|e| e == "ckpt") {
            self.out.clone()
        } else {
            self.out.join("teachers").join(format!("{}.ckpt", a.domain))
        };
        teacher.checkpoint(cfg.seed).save(&path)?;
        if let Some(t) = &teacher.trace {
            t.write_jsonl(&path.with_extension("trace.jsonl"))?;
        }
        print_json(&serde_json::json!({
            "checkpoint": path,
            "source_domain": teacher.source_domain,
            "best_val_f1": teacher.trace.as_ref().map(|t| t.best_val_f1),
            "model_hash": teacher.model.parameter_hash(),
        }))
    }

    fn adapt(&self, a: AdaptArgs) -> Result<()> {
        let mut cfg: AdaptationConfig = self.base.adaptation.clone();
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.method = a.method.unwrap_or(cfg.method);
        cfg.max_epochs = a.max_epochs.unwrap_or(cfg.max_epochs);
        if let Some(w) = a.fsl_weight {
            cfg.loss.fsl_weight = w;
        }
        let teacher = Teacher::from_checkpoint(Checkpoint::load(&a.teacher)?)?;
        let datasets = self.load_data(&a.data)?;
        let target = find(&datasets, &a.target)?;
        let pair = Pair::new(&teacher.source_domain, &a.target);
        let dir = self.out.join("runs").join(pair.slug()).join(cfg.method.as_str()).join(format!("seed-{}", cfg.seed));
        match datasets.iter().find(|d| d.domain == teacher.source_domain) {
            Some(source) => {
                let (report, trace) = run_one(&teacher, source, target, &cfg, &dir)?;
                print_json(&serde_json::json!({
                    "dir": dir,
                    "report": report,
                    "best_epoch": trace.best_epoch,
                    "stop_reason": trace.stop_reason,
                    "source_samples_read": trace.source_samples_read,
                }))
            }
            None => {
                // no source data on disk: report the target side only
                let adapted = adapt_student(&teacher, target, &cfg)?;
                let report = evaluate_model(&adapted.student, target, Split::Test)?;
                let mut ck = teacher.checkpoint(cfg.seed);
                ck.model = adapted.student;
                ck.metadata.epoch = Some(adapted.trace.best_epoch);
                ck.metadata.extra.insert("target_domain".into(), a.target.clone().into());
                ck.metadata.extra.insert("method".into(), cfg.method.as_str().into());
                ck.save(&dir.join("student.ckpt"))?;
                adapted.trace.write_jsonl(&dir.join("trace.jsonl"))?;
                print_json(&serde_json::json!({
                    "dir": dir,
                    "target": report,
                    "best_epoch": adapted.trace.best_epoch,
                    "stop_reason": adapted.trace.stop_reason,
                    "source_samples_read": adapted.trace.source_samples_read,
                }))
            }
        }
    }

    fn evaluate(&self, a: EvaluateArgs) -> Result<()> {
        let model = Checkpoint::load(&a.model)?.model;
        let datasets = self.load_data(&a.data)?;
        let ds = find(&datasets, &a.domain)?;
        print_json(&evaluate_with(&model, ds, a.split, EvalOptions { group_vote: a.group_vote })?)
    }

    fn zero_shot(&self, a: ZeroShotArgs) -> Result<()> {
        let teachers = a
            .teachers
            .iter()
            .map(|p| Teacher::from_checkpoint(Checkpoint::load(p)?))
            .collect::<Result<Vec<_>>>()?;
        let datasets = self.load_data(&a.data)?;
        let cols: Vec<&DomainDataset> = if a.domains.is_empty() {
            datasets.iter().collect()
        } else {
            a.domains.iter().map(|d| find(&datasets, d)).collect::<Result<_>>()?
        };
        let rows: Vec<(&str, &crate::backbone::ModelHandle)> =
            teachers.iter().map(|t| (t.source_domain.as_str(), &t.model)).collect();
        let m = zero_shot_matrix(&rows, &cols)?;
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join("zero_shot.csv"), zero_shot_csv(&m))?;
        print!("{}", m.to_table());
        Ok(())
    }

    fn run_experiment(&self, a: RunExperimentArgs) -> Result<()> {
        if self.base.domains.is_empty() && self.base.ingest.is_none() {
            return Err(Error::Config("run-experiment needs --config with domains or ingest".into()));
        }
        let mut cfg = self.base.clone();
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        if !a.methods.is_empty() {
            cfg.methods = a.methods;
        }
        cfg.replicates = a.replicates.unwrap_or(cfg.replicates);
        if let Some(f) = a.frames_per_group {
            cfg.generator.frames_per_group = f;
        }
        if let Some(w) = a.fsl_weight {
            cfg.adaptation.loss.fsl_weight = w;
        }
        cfg.adaptation.max_epochs = a.max_epochs.unwrap_or(cfg.adaptation.max_epochs);
        let outcome = run_experiment(&cfg, &self.out)?;
        if let Some(m) = &outcome.zero_shot {
            println!("{}", m.to_table());
        }
        print!("{}", summary_text(&outcome.summary));
        Ok(())
    }

    fn report(&self, a: ReportArgs) -> Result<()> {
        let dir = a.dir.unwrap_or_else(|| self.out.clone());
        let runs: Vec<RunRecord> = read_json(&dir.join("runs.json"))?;
        let zs_path = dir.join("zero_shot.json");
        let zero_shot: Option<ZeroShotMatrix> = if zs_path.exists() { Some(read_json(&zs_path)?) } else { None };
        let rows = summarize(&runs);
        if let Some(m) = &zero_shot {
            println!("{}", m.to_table());
        }
        print!("{}", summary_text(&rows));
        if a.check {
            let th = CheckThresholds { fretal_margin: a.margin, min_diagonal: a.min_diagonal, min_gap: a.min_gap };
            let failures = check_outcome(&rows, zero_shot.as_ref(), &th);
            if !failures.is_empty() {
                return Err(Error::AcceptanceCheck(failures.join("; ")));
            }
            println!("all checks passed");
        }
        Ok(())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Ingestion { paths: vec![path.to_path_buf()], reason: e.to_string() })?;
    Ok(serde_json::from_str(&text)?)
}
