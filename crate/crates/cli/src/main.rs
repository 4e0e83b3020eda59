use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edgequery_core::defenses::DefenseSpec;
use edgequery_core::edge_seed::SeedConfig;
use edgequery_core::harness::{self, records, DatasetRef, ExperimentConfig, IouModel};
use edgequery_core::interpreters::Method;
use edgequery_core::model::{weights, Family, SignConvention, TrainConfig};
use edgequery_core::Error;

#[derive(Parser, Debug)]
#[command(name = "edgequery", version, about = "Edge-seeded black-box attacks on interpretable micro-CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a reference micro model and write its weight file.
    Train(TrainArgs),
    /// Seed on the source, attack the target, write one JSONL record per sample.
    Attack(AttackArgs),
    /// Replay successful adversarial inputs on another model.
    Transfer(TransferArgs),
    /// Summarize a JSONL result file.
    Report(ReportArgs),
    /// Write benign and adversarial saliency maps side by side as PGM.
    ExportMaps(ExportArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct DataArgs {
    /// CIFAR-10 binary batch instead of the synthetic set.
    #[arg(long)]
    cifar: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
}

impl DataArgs {
    fn resolve(&self, base: Option<DatasetRef>, default_per_class: usize, default_seed: u64) -> DatasetRef {
        if let Some(path) = &self.cifar {
            return DatasetRef::Cifar10 { path: path.clone() };
        }
        let (mut classes, mut per_class, mut size, mut seed) = (4, default_per_class, 16, default_seed);
        match base {
            Some(DatasetRef::Cifar10 { path }) if self.is_empty() => return DatasetRef::Cifar10 { path },
            Some(DatasetRef::Synthetic {
                classes: c,
                per_class: p,
                size: s,
                seed: d,
            }) => (classes, per_class, size, seed) = (c, p, s, d),
            _ => {}
        }
        DatasetRef::Synthetic {
            classes: self.classes.unwrap_or(classes),
            per_class: self.per_class.unwrap_or(per_class),
            size: self.size.unwrap_or(size),
            seed: self.data_seed.unwrap_or(seed),
        }
    }

    fn is_empty(&self) -> bool {
        self.classes.is_none() && self.per_class.is_none() && self.size.is_none() && self.data_seed.is_none()
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = parse_family)]
    family: Family,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DefenseName {
    ResizePad,
    BitDepth,
    Median,
    Jpeg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Convention {
    Intent,
    Literal,
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    interpreter: Option<Method>,
    /// Default-parameter defense on the target.
    #[arg(long, value_enum)]
    defense: Option<DefenseName>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    tau_d: Option<f64>,
    #[arg(long)]
    tau_m: Option<f64>,
    #[arg(long, value_enum)]
    convention: Option<Convention>,
    #[arg(long)]
    crossover_rate: Option<f64>,
    #[arg(long)]
    mutation_rate: Option<f64>,
    #[arg(long)]
    max_queries: Option<u64>,
    #[arg(long)]
    requery_parents: bool,
    /// Compute the adversarial map for IoU on the target instead of the source.
    #[arg(long)]
    iou_on_target: bool,
    #[arg(long)]
    record_timing: bool,
    /// Print the summary as JSON.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Config that produced the records (for the dataset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also report IoU under this model's interpreter.
    #[arg(long, value_parser = parse_method)]
    interpreter: Option<Method>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    records: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    records: PathBuf,
    /// Model whose interpreter draws the maps (normally the source).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    interpreter: Option<Method>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[command(flatten)]
    data: DataArgs,
}

fn parse_family(s: &str) -> Result<Family, String> {
    Family::parse(s).map_err(|e| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

/// Failure with the exit code it maps to.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Usage(_) | Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<Option<ExperimentConfig>, Failure> {
    path.map(|p| ExperimentConfig::load(p).map_err(Failure::from)).transpose()
}

fn train(a: TrainArgs) -> CliResult {
    let data = a.data.resolve(None, 250, 7).load()?;
    let base = harness::standard_training(a.seed);
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(base.epochs),
        lr: a.lr.unwrap_or(base.lr),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        ..base
    };
    let handle = harness::train_family(a.family, &data, &cfg)?;
    let model = handle.white()?;
    weights::save_model(model, &a.out)?;
    if let Some(r) = model.report() {
        println!(
            "{:?}: train accuracy {:.4}, validation accuracy {:.4} -> {}",
            a.family,
            r.train_accuracy,
            r.validation_accuracy,
            a.out.display()
        );
    }
    Ok(())
}

fn attack_config(a: &AttackArgs) -> Result<ExperimentConfig, Failure> {
    let base = load_config(a.config.as_deref())?;
    let mut cfg = match base {
        Some(c) => c,
        None => {
            let (Some(s), Some(t), Some(m)) = (&a.source, &a.target, a.interpreter) else {
                return Err(Failure::Usage(
                    "without --config, --source, --target and --interpreter are required".into(),
                ));
            };
            ExperimentConfig::new(DatasetRef::synthetic(100, 1001), s, t, m)
        }
    };
    cfg.dataset = a.data.resolve(Some(cfg.dataset.clone()), 100, 1001);
    if let Some(s) = &a.source {
        cfg.source_model = s.clone();
    }
    if let Some(t) = &a.target {
        cfg.target_model = t.clone();
    }
    if let Some(m) = a.interpreter {
        cfg.interpreter = m;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        cfg.mga_cfg.rng_seed = seed;
    }
    if let Some(d) = a.defense {
        cfg.defense = Some(match d {
            DefenseName::ResizePad => DefenseSpec::resize_pad(cfg.seed),
            DefenseName::BitDepth => DefenseSpec::bit_depth(),
            DefenseName::Median => DefenseSpec::median(),
            DefenseName::Jpeg => DefenseSpec::jpeg(),
        });
    }
    if let Some(n) = a.samples {
        cfg.sample_count = n;
    }
    if let Some(c) = a.confidence {
        cfg.selection_confidence = c;
    }
    let mut s: SeedConfig = cfg.seed_config();
    let touched = [a.epsilon, a.alpha, a.lambda, a.tau_d, a.tau_m].iter().any(Option::is_some)
        || a.iterations.is_some()
        || a.population.is_some()
        || a.convention.is_some();
    if touched {
        s.epsilon = a.epsilon.unwrap_or(s.epsilon);
        s.alpha = a.alpha.unwrap_or(s.alpha);
        s.iterations = a.iterations.unwrap_or(s.iterations);
        s.lambda = a.lambda.unwrap_or(s.lambda);
        s.population = a.population.unwrap_or(s.population);
        s.tau_d = a.tau_d.unwrap_or(s.tau_d);
        s.tau_m = a.tau_m.unwrap_or(s.tau_m);
        if let Some(c) = a.convention {
            s.convention = match c {
                Convention::Intent => SignConvention::Intent,
                Convention::Literal => SignConvention::Literal,
            };
        }
        cfg.mga_cfg.population = s.population;
        cfg.seed_cfg = Some(s);
    }
    let m = &mut cfg.mga_cfg;
    m.crossover_rate = a.crossover_rate.unwrap_or(m.crossover_rate);
    m.mutation_rate = a.mutation_rate.unwrap_or(m.mutation_rate);
    m.max_queries = a.max_queries.unwrap_or(m.max_queries);
    m.requery_parents |= a.requery_parents;
    if a.iou_on_target {
        cfg.iou_model = IouModel::Target;
    }
    cfg.record_timing |= a.record_timing;
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(recs: &[records::ResultRecord], json: bool) -> CliResult {
    let summary = harness::summarize_records(recs)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
    } else {
        print!("{}", harness::format_summary(&summary));
    }
    Ok(())
}

fn attack(a: AttackArgs) -> CliResult {
    let cfg = attack_config(&a)?;
    let recs = harness::run_experiment(&cfg)?;
    if a.out.exists() {
        std::fs::remove_file(&a.out).map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    }
    records::append_jsonl(&a.out, &recs)?;
    eprintln!("{} records -> {} (config {})", recs.len(), a.out.display(), cfg.hash());
    if recs.is_empty() {
        eprintln!("no eligible samples; nothing to summarize");
        return Ok(());
    }
    print_summary(&recs, a.json)
}

fn dataset_for(config: Option<&Path>, data: &DataArgs) -> Result<edgequery_core::dataset::Dataset, Failure> {
    let base = load_config(config)?.map(|c| c.dataset);
    Ok(data.resolve(base, 100, 1001).load()?)
}

fn transfer(a: TransferArgs) -> CliResult {
    let recs = records::read_jsonl(&a.records)?;
    let data = dataset_for(a.config.as_deref(), &a.data)?;
    let model = harness::load_handle(&a.model)?;
    let summary = harness::evaluate_transfer(&recs, &data, &model, a.interpreter)?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    let recs = records::read_jsonl(&a.records)?;
    print_summary(&recs, a.json)
}

fn export_maps(a: ExportArgs) -> CliResult {
    let recs = records::read_jsonl(&a.records)?;
    let data = dataset_for(a.config.as_deref(), &a.data)?;
    let model = harness::load_handle(&a.model)?;
    let method = match a.interpreter.or_else(|| recs.first().map(|r| r.interpreter)) {
        Some(m) => m,
        None => return Err(Failure::Usage("no records and no --interpreter".into())),
    };
    let written = harness::export_maps(&recs, &data, &model, method, a.count, &a.out)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Transfer(a) => transfer(a),
        Command::Report(a) => report(a),
        Command::ExportMaps(a) => export_maps(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
