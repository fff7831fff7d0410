mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use metacl::cohort::{ingest_manifest, Cohort};
use metacl::digest::{bytes_digest, config_digest};
use metacl::evaluation::{
    grow_report, probe, read_results, split_patients, subset_sizes, task_targets, write_grow_report, write_results, ProbeData,
    ResultRow, DEFAULT_EPSILON, NULL_METRIC,
};
use metacl::imaging::GrayImage;
use metacl::nn::{Mlp, Network};
use metacl::relations::{build_pair_index, pair_stats, MaxGap, RelationConfig};
use metacl::seeding::{derive_seed, rng_for, str_key};
use metacl::synth::{generate_cohort, write_synth};
use metacl::trainer::{write_trace, Method, TraceRow, TrainState, Trainer};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "metacl", version, about = "Metadata-enhanced contrastive pretraining on longitudinal cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Named preset the configuration starts from.
    #[arg(long, default_value = "desk", global = true)]
    preset: String,
    /// TOML document overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the document (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort: manifest.csv plus one PNG per scan.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        patients: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build the positive-pair index of a manifest and report its statistics.
    Pairs {
        #[arg(long)]
        manifest: PathBuf,
        /// Minimum gap in years.
        #[arg(long)]
        min_gap: Option<f64>,
        /// Maximum gap in years, or `inf`.
        #[arg(long)]
        max_gap: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain one variant on the training partition of a manifest.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        /// simclr, byol, or either with `-me-<years>` / `-me-inf`.
        #[arg(long)]
        variant: Method,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `checkpoint-latest.bin` in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        steps: Option<usize>,
        /// Stop once this step is reached, leaving `checkpoint-latest.bin` for a later `--resume`.
        #[arg(long)]
        halt_at: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finetune on labelled subsets and write a results table.
    Probe {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, conflicts_with = "random_init", required_unless_present = "random_init")]
        checkpoint: Option<PathBuf>,
        /// Use randomly initialized encoders as the baseline.
        #[arg(long)]
        random_init: bool,
        /// Label task; repeatable.
        #[arg(long = "task", required = true)]
        tasks: Vec<String>,
        /// Variant name written to the table; defaults to the checkpoint's method or `random-init`.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compute %GROW of pretrained results against a baseline table.
    Grow {
        /// Pretrained results table; repeatable.
        #[arg(long, required = true)]
        pretrained: Vec<PathBuf>,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A mistake in how the command was invoked.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn error_code(err: &anyhow::Error) -> &'static str {
    use metacl::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return "usage";
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::DuplicateScanId(_) | E::ManifestRow { .. } | E::MissingColumn(_) | E::UnknownScan(_) => "manifest",
                E::InvalidConfig(_) | E::OddBatchSize(_) => "config",
                E::Checkpoint(_) => "checkpoint",
                E::Io(_) | E::Image { .. } => "io",
                E::Diverged { .. } | E::NonFiniteGradient(_) | E::InsufficientPairs { .. } => "train",
                _ => "data",
            };
        }
        if cause.is::<toml::de::Error>() {
            return "config";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<csv::Error>() {
            return "data";
        }
    }
    "internal"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let line = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", line.trim_start_matches("error: ").trim());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = error_code(&e);
            let msg: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error[{code}]: {}", msg.join(": ").replace('\n', " "));
            ExitCode::from(if code == "usage" { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, patients, cfg } => {
            let mut extra = Vec::new();
            if let Some(p) = patients {
                extra.push(format!("synth.patients={p}"));
            }
            cmd_synth(&resolve(&cfg, &extra)?, &out)
        }
        Command::Pairs { manifest, min_gap, max_gap, out, cfg } => {
            let mut extra = Vec::new();
            if let Some(g) = min_gap {
                extra.push(format!("relation.min_gap_years={g:?}"));
            }
            if let Some(g) = &max_gap {
                let parsed: MaxGap = g.parse().map_err(|e: String| usage(format!("--max-gap: {e}")))?;
                extra.push(match parsed {
                    MaxGap::Years(y) => format!("relation.max_gap={y:?}"),
                    MaxGap::Unbounded => "relation.max_gap=\"inf\"".into(),
                });
            }
            if let (Some(lo), Some(MaxGap::Years(hi))) = (min_gap, max_gap.as_deref().map(|g| g.parse::<MaxGap>().unwrap())) {
                if lo >= hi {
                    return Err(usage(format!("--min-gap ({lo}) must be smaller than --max-gap ({hi})")));
                }
            }
            cmd_pairs(&resolve(&cfg, &extra)?, &manifest, out.as_deref())
        }
        Command::Pretrain { manifest, variant, out, resume, steps, halt_at, cfg } => {
            let mut extra = Vec::new();
            if let Some(s) = steps {
                extra.push(format!("train.total_steps={s}"));
                extra.push(format!("train.warmup_steps={}", metacl::schedule::scaled_warmup(s)));
            }
            cmd_pretrain(&resolve(&cfg, &extra)?, &manifest, variant, &out, resume, halt_at)
        }
        Command::Probe { manifest, checkpoint, random_init, tasks, variant, out, cfg } => {
            let source = match (checkpoint, random_init) {
                (Some(path), false) => EncoderSource::Checkpoint(path),
                (None, true) => EncoderSource::RandomInit,
                _ => return Err(usage("pass exactly one of --checkpoint and --random-init")),
            };
            cmd_probe(&resolve(&cfg, &[])?, &manifest, &source, &tasks, variant, &out)
        }
        Command::Grow { pretrained, baseline, task, epsilon, out } => cmd_grow(&pretrained, &baseline, task.as_deref(), epsilon, &out),
    }
}

fn resolve(args: &ConfigArgs, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    overrides.extend_from_slice(extra);
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    // Only fall back to the flag's preset when the document does not name one.
    RunConfig::load(&args.preset, args.config.as_deref(), &overrides)
}

#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    command: &'a str,
    config_digest: String,
    config: &'a RunConfig,
    #[serde(flatten)]
    details: T,
}

fn write_run_record<T: Serialize>(dir: &Path, command: &str, cfg: &RunConfig, details: T) -> Result<()> {
    let record = RunRecord { command, config_digest: cfg.digest(), config: cfg, details };
    let text = serde_json::to_string_pretty(&record)?;
    fs::write(dir.join("run.json"), text + "\n").with_context(|| format!("writing {}", dir.join("run.json").display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let synth = generate_cohort(&cfg.synth, cfg.seed)?;
    create_dir(out)?;
    write_synth(&synth, out)?;
    let manifest_digest = bytes_digest(&fs::read(out.join("manifest.csv"))?);
    #[derive(Serialize)]
    struct Details {
        scans: usize,
        manifest_digest: String,
    }
    write_run_record(out, "synth", cfg, Details { scans: synth.cohort.len(), manifest_digest: manifest_digest.clone() })?;
    println!("scans\t{}", synth.cohort.len());
    println!("config_digest\t{}", cfg.digest());
    println!("manifest_digest\t{manifest_digest}");
    Ok(())
}

fn load_manifest(path: &Path) -> Result<Cohort> {
    let file = fs::File::open(path).with_context(|| format!("opening manifest {}", path.display()))?;
    Ok(ingest_manifest(std::io::BufReader::new(file))?)
}

/// Loads every scan image, resolving `image_ref` relative to the manifest's directory.
fn load_images(manifest: &Path, cohort: &Cohort) -> Result<Vec<GrayImage>> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    cohort.records().iter().map(|r| Ok(GrayImage::load(&root.join(&r.image_ref))?)).collect()
}

fn cmd_pairs(cfg: &RunConfig, manifest: &Path, out: Option<&Path>) -> Result<()> {
    let cohort = load_manifest(manifest)?;
    let relation: RelationConfig = cfg.relation;
    let index = build_pair_index(&cohort, &relation);
    let stats = pair_stats(&index, &cohort);
    let mut report = Vec::new();
    writeln!(report, "config_digest\t{}", cfg.digest())?;
    stats.write_report(&relation, &mut report)?;
    std::io::stdout().write_all(&report)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        fs::write(dir.join("stats.tsv"), &report)?;
        let file = fs::File::create(dir.join("pairs.tsv"))?;
        let mut sink = BufWriter::new(file);
        index.write_table(&cohort, &mut sink)?;
        sink.flush()?;
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))
}

fn trace_bytes(trace: &[TraceRow], method: Method) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_trace(trace, method, &mut buf)?;
    Ok(buf)
}

fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).context("short trace row");
        rows.push(TraceRow { step: field(0)?.parse()?, lr: field(1)?.parse()?, loss: field(2)?.parse()? });
    }
    Ok(rows)
}

const LATEST: &str = "checkpoint-latest.bin";

fn cmd_pretrain(cfg: &RunConfig, manifest: &Path, method: Method, out: &Path, resume: bool, halt_at: Option<usize>) -> Result<()> {
    let cohort = load_manifest(manifest)?;
    let images = load_images(manifest, &cohort)?;
    let splits = split_patients(&cohort, cfg.split.val_fraction, cfg.split.test_fraction, cfg.split.seed)?;
    let train = cohort.select(&splits.train)?;
    let train_images: Vec<GrayImage> = splits.train.iter().map(|&i| images[i].clone()).collect();
    create_dir(out)?;

    let (mut trainer, mut trace) = if resume {
        let path = out.join(LATEST);
        let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let state = TrainState::read_checkpoint(std::io::BufReader::new(file))?;
        if state.method != method {
            return Err(usage(format!("checkpoint is for `{}`, not `{method}`", state.method)));
        }
        let step = state.step;
        let trainer = Trainer::resume(&train, &train_images, state, &cfg.train, &cfg.augment)?;
        let mut trace = read_trace(&out.join("trace.csv"))?;
        trace.retain(|r| r.step < step);
        if trace.len() != step {
            return Err(usage(format!("trace.csv has {} rows but the checkpoint is at step {step}", trace.len())));
        }
        log::info!("resuming {method} at step {step}");
        (trainer, trace)
    } else {
        (Trainer::new(&train, &train_images, method, &cfg.train, &cfg.augment)?, Vec::new())
    };

    let total = cfg.train.total_steps;
    let stop = halt_at.unwrap_or(total).min(total);
    let mut pending: Vec<TraceRow> = Vec::new();
    while trainer.state.step < stop {
        let row = trainer.step()?;
        pending.push(row);
        let step = trainer.state.step;
        if step == stop || cfg.train.cadence.should_validate(step) {
            trace.append(&mut pending);
            let mut ckpt = Vec::new();
            trainer.state.write_checkpoint(&mut ckpt)?;
            write_atomic(&out.join("trace.csv"), &trace_bytes(&trace, method)?)?;
            write_atomic(&out.join(LATEST), &ckpt)?;
            log::info!("{method} step {step} loss {:.5}", trace.last().map_or(f64::NAN, |r| r.loss));
        }
    }
    trace.append(&mut pending);
    if trainer.state.step < total {
        println!("halted_at\t{}", trainer.state.step);
        return Ok(());
    }

    let mut ckpt = Vec::new();
    trainer.state.write_checkpoint(&mut ckpt)?;
    write_atomic(&out.join("checkpoint.bin"), &ckpt)?;
    write_atomic(&out.join(LATEST), &ckpt)?;
    write_atomic(&out.join("trace.csv"), &trace_bytes(&trace, method)?)?;

    #[derive(Serialize)]
    struct Details {
        variant: String,
        run_digest: String,
        steps: usize,
        training_scans: usize,
        final_loss: Option<f64>,
        checkpoint_digest: String,
    }
    let details = Details {
        variant: method.to_string(),
        run_digest: trainer.state.config_digest.clone(),
        steps: trainer.state.step,
        training_scans: train.len(),
        final_loss: trace.last().map(|r| r.loss),
        checkpoint_digest: bytes_digest(&ckpt),
    };
    println!("variant\t{}", details.variant);
    println!("config_digest\t{}", cfg.digest());
    println!("checkpoint_digest\t{}", details.checkpoint_digest);
    write_run_record(out, "pretrain", cfg, details)
}

enum EncoderSource {
    Checkpoint(PathBuf),
    RandomInit,
}

fn cmd_probe(cfg: &RunConfig, manifest: &Path, source: &EncoderSource, tasks: &[String], variant: Option<String>, out: &Path) -> Result<()> {
    let cohort = load_manifest(manifest)?;
    let images = load_images(manifest, &cohort)?;
    let splits = split_patients(&cohort, cfg.split.val_fraction, cfg.split.test_fraction, cfg.split.seed)?;
    let seeds = &cfg.subsets.seeds;

    let checkpoint = match source {
        EncoderSource::Checkpoint(path) => {
            let file = fs::File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
            let state = TrainState::read_checkpoint(std::io::BufReader::new(file))?;
            let input = state.online.encoder.input_dim();
            if input != cfg.augment.output_len() {
                return Err(usage(format!(
                    "checkpoint encoder takes {input} inputs but the evaluation views have {}",
                    cfg.augment.output_len()
                )));
            }
            Some(state)
        }
        EncoderSource::RandomInit => None,
    };
    let variant = variant.unwrap_or_else(|| match &checkpoint {
        Some(state) => state.method.to_string(),
        None => "random-init".into(),
    });
    // One encoder per seed for the random baseline; the pretrained encoder is shared.
    let encoders: Vec<(Vec<u64>, Mlp)> = match &checkpoint {
        Some(state) => vec![(seeds.clone(), state.online.encoder.clone())],
        None => seeds
            .iter()
            .map(|&s| {
                let mut rng = rng_for(derive_seed(cfg.seed, &[str_key("random-init"), s]), &[]);
                (vec![s], Network::init(&cfg.train.encoder, false, &mut rng).encoder)
            })
            .collect(),
    };

    let mut rows: Vec<ResultRow> = Vec::new();
    for task in tasks {
        let (kind, targets) = task_targets(&cohort, task)?;
        let data = ProbeData::build(kind, &images, &targets, &splits, &cfg.augment)?;
        let sizes = subset_sizes(data.train_targets.len(), cfg.subsets.count)?;
        for (k, (run_seeds, encoder)) in encoders.iter().enumerate() {
            let mut part = probe(encoder, &variant, task, &data, &sizes, run_seeds, &cfg.augment, &cfg.finetune)?;
            if k > 0 {
                part.retain(|r| r.metric != NULL_METRIC);
            }
            rows.extend(part);
        }
    }
    rows.sort_by(|a, b| {
        (a.task.as_str(), a.metric == NULL_METRIC, a.subset_size, a.seed).cmp(&(b.task.as_str(), b.metric == NULL_METRIC, b.subset_size, b.seed))
    });

    create_dir(out)?;
    let mut table = Vec::new();
    write_results(&rows, &mut table)?;
    fs::write(out.join("results.csv"), &table)?;
    #[derive(Serialize)]
    struct Details {
        variant: String,
        tasks: Vec<String>,
        encoder: String,
        results_digest: String,
    }
    let encoder = match (source, &checkpoint) {
        (EncoderSource::Checkpoint(path), Some(state)) => format!("{} ({})", path.display(), state.config_digest),
        _ => "random-init".into(),
    };
    let details = Details { variant, tasks: tasks.to_vec(), encoder, results_digest: bytes_digest(&table) };
    println!("config_digest\t{}", cfg.digest());
    println!("results_digest\t{}", details.results_digest);
    write_run_record(out, "probe", cfg, details)
}

fn read_table(path: &Path, task: Option<&str>) -> Result<Vec<ResultRow>> {
    let file = fs::File::open(path).with_context(|| format!("opening results table {}", path.display()))?;
    let mut rows = read_results(std::io::BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    if let Some(t) = task {
        rows.retain(|r| r.task == t);
    }
    Ok(rows)
}

fn cmd_grow(pretrained: &[PathBuf], baseline: &Path, task: Option<&str>, epsilon: f64, out: &Path) -> Result<()> {
    if !(epsilon > 0.0) {
        return Err(usage("--epsilon must be positive"));
    }
    let mut pre = Vec::new();
    for p in pretrained {
        pre.extend(read_table(p, task)?);
    }
    let base = read_table(baseline, task)?;
    if pre.is_empty() {
        let what = task.map_or("no rows".to_string(), |t| format!("no rows for task `{t}`"));
        return Err(metacl::Error::EmptyInput(format!("pretrained tables: {what}")).into());
    }
    let report = grow_report(&pre, &base, epsilon)?;
    let mut table = Vec::new();
    write_grow_report(&report, &mut table)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    let digest = config_digest(&(&pre, &base, epsilon));
    println!("input_digest\t{digest}");
    for row in &report {
        let clamped = if row.clamped.is_empty() { String::new() } else { format!("  (clamped at {})", row.clamped) };
        println!("{}\t{}\t{:.2} ± {:.2}{clamped}", row.variant, row.task, row.grow, row.grow_std);
    }
    Ok(())
}
