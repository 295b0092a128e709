//! `mmdg`: generate synthetic data, preprocess it, train, evaluate, run
//! ablations and sweeps, and render reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mmdg_core::config::RunConfig;
use mmdg_core::container::{self, DatasetKind, Manifest};
use mmdg_core::harness::{self, Audit, DataStore, EvalReport, RunRecord, SweepRecord, TaskSpec, TrainConfig, Variant};
use mmdg_core::preprocess::Preprocessor;
use mmdg_core::{report, synthgen, Execution};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "mmdg", version, about = "Multi-modal domain-generalisation fault diagnosis")]
struct Cli {
    /// Run everything on the calling thread
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a raw synthetic dataset directory
    Gen(GenArgs),
    /// Turn a raw dataset into network inputs
    Preprocess(PreprocessArgs),
    /// Train on a task's source conditions and write a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on its task's target condition
    Eval(EvalArgs),
    /// Train and evaluate a matrix of variants, tasks and seeds
    Ablate(AblateArgs),
    /// Accuracy over a grid of trade-off coefficients
    Sweep(SweepArgs),
    /// Render confusion matrices and sweep surfaces as PNG images
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// TOML run configuration; missing keys take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display())),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated condition ids
    #[arg(long, value_delimiter = ',', default_value = "C1,C2,C3,C4,C5,C6,C7,C8,C9")]
    conditions: Vec<String>,
    /// Samples per class and condition (overrides `data.samples_per_class`)
    #[arg(long)]
    per_class: Option<usize>,
    /// Generator seed (overrides `data.seed`)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Raw dataset directory
    #[arg(long)]
    input: PathBuf,
    /// Output directory for prepared data
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Prepared dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Override `train.epochs`
    #[arg(long)]
    epochs: Option<usize>,
    /// Override `encoder.preset` with the narrow single-core network
    #[arg(long)]
    desk: bool,
}

impl RunArgs {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut rc = self.config.load()?;
        if self.desk {
            rc.encoder.preset = "desk".into();
        }
        let mut cfg = rc.train_config()?;
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Task id (T1..T9)
    #[arg(long)]
    task: String,
    /// Override `train.variant`
    #[arg(long)]
    variant: Option<Variant>,
    /// Override `train.seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint directory
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Write the report as JSON here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "T1,T2,T3,T4")]
    tasks: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "full,baseline")]
    variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Output directory for `runs.jsonl` and `accuracy.csv`
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    task: String,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.25,0.5")]
    lambda_m: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2")]
    lambda_d: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Output directory for `sweep.jsonl` and `sweep.csv`
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory holding `runs.jsonl`, `sweep.jsonl` or `eval.json`
    #[arg(long)]
    input: PathBuf,
    /// Directory for the images (defaults to the input directory)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn task(id: &str) -> Result<TaskSpec> {
    harness::standard_task(id).with_context(|| format!("unknown task {id:?} (expected T1..T9)"))
}

fn jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

fn gen(args: &GenArgs, exec: Execution) -> Result<()> {
    let rc = args.config.load()?;
    let per_class = args.per_class.unwrap_or(rc.data.samples_per_class);
    let seed = args.seed.unwrap_or(rc.data.seed);
    let conditions = args
        .conditions
        .iter()
        .map(|c| synthgen::standard_condition(c).with_context(|| format!("unknown condition {c:?}")))
        .collect::<Result<Vec<_>>>()?;
    let classes = synthgen::fault_classes();
    std::fs::create_dir_all(&args.out)?;
    let mut manifest = Manifest::new(DatasetKind::Raw, seed, conditions.clone(), &classes);
    // One condition at a time keeps memory to a single condition's blocks.
    for cond in &conditions {
        let blocks = synthgen::generate_corpus(exec, std::slice::from_ref(cond), &classes, per_class, seed, &rc.data.noise)?;
        for (_, _, samples) in &blocks {
            container::write_raw_block(&args.out, &mut manifest, samples)?;
        }
        eprintln!("generated {} ({} samples)", cond.id, per_class * classes.len());
    }
    manifest.save(&args.out)?;
    Ok(())
}

fn preprocess(args: &PreprocessArgs, exec: Execution) -> Result<()> {
    let raw = Manifest::load(&args.input)?;
    if raw.kind != DatasetKind::Raw {
        bail!("{} does not hold raw data", args.input.display());
    }
    std::fs::create_dir_all(&args.out)?;
    let classes = raw.recipes.clone().unwrap_or_else(synthgen::fault_classes);
    let mut out = Manifest::new(DatasetKind::Prepared, raw.seed, raw.conditions.clone(), &classes);
    let pre = Preprocessor::new();
    for (cond, labels) in &raw.counts {
        for &label in labels.keys() {
            let samples = container::read_raw_block(&args.input, &raw, cond, label)?;
            let prepared = pre.prepare_all(exec, &samples)?;
            container::write_prepared_block(&args.out, &mut out, &prepared)?;
        }
        eprintln!("prepared {cond}");
    }
    out.save(&args.out)?;
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Metric<'a> {
    Epoch { task: &'a str, variant: Variant, seed: u64, record: &'a harness::EpochRecord },
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.run.train_config()?;
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let task = task(&args.task)?;
    let data = DataStore::open(&args.run.data)?;
    std::fs::create_dir_all(&args.out)?;
    let mut metrics = BufWriter::new(File::create(args.out.join("metrics.jsonl"))?);
    let audit = Audit::default();
    let mut io_err = None;
    let mut hook = |r: &harness::EpochRecord| {
        eprintln!(
            "epoch {:>3}  total {:.4}  cls {:.4}  modality {:.4}  domain {:.4}  val {:.2}%",
            r.epoch, r.loss.total, r.loss.cls, r.loss.modality, r.loss.domain, r.val_accuracy
        );
        let line = Metric::Epoch { task: &task.id, variant: cfg.variant, seed: cfg.seed, record: r };
        if let Err(e) = serde_json::to_writer(&mut metrics, &line).map_err(anyhow::Error::from).and_then(|_| Ok(metrics.write_all(b"\n")?)) {
            io_err.get_or_insert(e);
        }
    };
    let trained = harness::train(&task, &cfg, &data, None, &audit, Some(&mut hook))?;
    if let Some(e) = io_err {
        return Err(e);
    }
    metrics.flush()?;
    harness::save_checkpoint(&trained, &args.out)?;
    eprintln!("best epoch {}; checkpoint in {}", trained.curve.best_epoch, args.out.display());
    Ok(())
}

fn eval(args: &EvalArgs, exec: Execution) -> Result<()> {
    let trained = harness::load_checkpoint(&args.checkpoint)?;
    let data = DataStore::open(&args.data)?;
    let audit = Audit::default();
    let rep = harness::evaluate(&trained, &data, &audit, exec)?;
    println!("{} {} seed {}: {:.2}% on {} ({} samples)", rep.task, rep.variant, rep.seed, rep.accuracy, trained.task.target, rep.samples);
    for row in &rep.confusion {
        println!("  {}", row.iter().map(|c| format!("{c:>4}")).collect::<String>());
    }
    if let Some(p) = &args.out {
        std::fs::write(p, serde_json::to_string_pretty(&rep)?)?;
    }
    Ok(())
}

fn ablate(args: &AblateArgs, exec: Execution) -> Result<()> {
    let cfg = args.run.train_config()?;
    let data = DataStore::open(&args.run.data)?;
    let mut jobs = Vec::new();
    for t in &args.tasks {
        let task = task(t)?;
        for &v in &args.variants {
            for &seed in &args.seeds {
                jobs.push((v, task.clone(), TrainConfig { seed, variant: v, ..cfg.clone() }));
            }
        }
    }
    eprintln!("{} runs", jobs.len());
    let records: Vec<RunRecord> = harness::run_many(exec, &jobs, &data).into_iter().collect::<mmdg_core::Result<_>>()?;
    std::fs::create_dir_all(&args.out)?;
    jsonl(&args.out.join("runs.jsonl"), &records)?;

    let mut csv = String::from("task,variant,seed,lambda_m,lambda_d,accuracy\n");
    let mut means: BTreeMap<(String, Variant), Vec<f64>> = BTreeMap::new();
    for r in &records {
        let e = &r.report;
        csv.push_str(&format!("{},{},{},{},{},{:.4}\n", e.task, e.variant, e.seed, r.lambda_m, r.lambda_d, e.accuracy));
        means.entry((e.task.clone(), e.variant)).or_default().push(e.accuracy);
    }
    std::fs::write(args.out.join("accuracy.csv"), csv)?;
    for ((t, v), a) in &means {
        println!("{t} {v:<16} {:6.2}%  ({} seeds)", a.iter().sum::<f64>() / a.len() as f64, a.len());
    }
    Ok(())
}

fn sweep(args: &SweepArgs, exec: Execution) -> Result<()> {
    let cfg = args.run.train_config()?;
    let data = DataStore::open(&args.run.data)?;
    let task = task(&args.task)?;
    let mut records: Vec<SweepRecord> = Vec::new();
    for &seed in &args.seeds {
        let c = TrainConfig { seed, ..cfg.clone() };
        records.extend(harness::sweep(exec, &task, &args.lambda_m, &args.lambda_d, &c, &data)?);
    }
    std::fs::create_dir_all(&args.out)?;
    jsonl(&args.out.join("sweep.jsonl"), &records)?;
    let mut csv = String::from("task,seed,lambda_m,lambda_d,accuracy\n");
    for r in &records {
        csv.push_str(&format!("{},{},{},{},{:.4}\n", r.task, r.seed, r.lambda_m, r.lambda_d, r.accuracy));
    }
    std::fs::write(args.out.join("sweep.csv"), csv)?;
    let (lm, ld, grid) = report::sweep_grid(&records);
    print!("lambda_m \\ lambda_d");
    for d in &ld {
        print!(" {d:>7}");
    }
    println!();
    for (m, row) in lm.iter().zip(&grid) {
        print!("{m:>19}");
        for a in row {
            print!(" {a:>7.2}");
        }
        println!();
    }
    Ok(())
}

fn render(args: &ReportArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| args.input.clone());
    std::fs::create_dir_all(&out)?;
    let mut written = 0;
    let mut confusion = |rep: &EvalReport| -> Result<()> {
        let p = out.join(format!("confusion_{}_{}_seed{}.png", rep.task, rep.variant, rep.seed));
        report::write_confusion_png(&rep.confusion, &p)?;
        println!("{}", p.display());
        written += 1;
        Ok(())
    };
    let runs = args.input.join("runs.jsonl");
    if runs.exists() {
        for r in read_jsonl::<RunRecord>(&runs)? {
            confusion(&r.report)?;
        }
    }
    let single = args.input.join("eval.json");
    if single.exists() {
        confusion(&serde_json::from_str(&std::fs::read_to_string(&single)?)?)?;
    }
    let sweep = args.input.join("sweep.jsonl");
    if sweep.exists() {
        let records: Vec<SweepRecord> = read_jsonl(&sweep)?;
        let mut by_task: BTreeMap<String, Vec<SweepRecord>> = BTreeMap::new();
        for r in records {
            by_task.entry(r.task.clone()).or_default().push(r);
        }
        for (t, recs) in by_task {
            let p = out.join(format!("sweep_{t}.png"));
            report::write_sweep_png(&recs, &p)?;
            println!("{}", p.display());
            written += 1;
        }
    }
    if written == 0 {
        bail!("nothing to render in {} (expected runs.jsonl, sweep.jsonl or eval.json)", args.input.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    match &cli.command {
        Command::Gen(a) => gen(a, exec),
        Command::Preprocess(a) => preprocess(a, exec),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a, exec),
        Command::Ablate(a) => ablate(a, exec),
        Command::Sweep(a) => sweep(a, exec),
        Command::Report(a) => render(a),
    }
}
