//! Command implementations behind the `fedcache` binary: partition data into
//! client shards, run one experiment, sweep a config axis, and merge runs
//! into a comparison report.
//!
//! Exit-code contract: 0 success, 1 runtime failure, 2 usage/config error.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use fedcache_core::data::{mean_client_tv, write_shard_manifest, LabeledDataset, Sample};
use fedcache_core::federation::{
    build_shards, DataSource, Direction, ExperimentConfig, Federation, MessageKind,
};
use fedcache_core::metrics::{write_comparison_table, CommCost, MetricsReport};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, malformed config, failed validation: exit 2.
    Usage(String),
    /// The run itself failed: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message())
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser, Debug)]
#[command(
    name = "fedcache",
    about = "Knowledge-cache-driven personalized federated learning simulator",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Partition a dataset into per-client shards and write manifests.
    Partition(PartitionArgs),
    /// Run one experiment and write its metrics CSV and summary.
    Run(RunArgs),
    /// Run one experiment per value of a config key and merge the results.
    Sweep(SweepArgs),
    /// Build a comparison table from completed run directories.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct PartitionArgs {
    /// Output directory for manifests and the partition record.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub clients: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Defaults to $FEDCACHE_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 10)]
    pub synth_classes: usize,
    #[arg(long, default_value_t = 100)]
    pub synth_per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub synth_dim: usize,
    #[arg(long, default_value_t = 3.0)]
    pub synth_sep: f64,
    /// IDX image file; switches the source from synthetic to file data.
    #[arg(long, requires = "idx_labels")]
    pub idx_images: Option<PathBuf>,
    #[arg(long, requires = "idx_images")]
    pub idx_labels: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// Config file (flat key=value lines). Flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to runs/<run-id>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra key=value overrides, applied last in the given order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub algorithm: Option<String>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Average-accuracy targets reported as bytes-to-reach in the summary.
    #[arg(long = "acc-target", value_name = "FRACTION")]
    pub acc_targets: Vec<f64>,
    /// Also write final per-client model checkpoints.
    #[arg(long, default_value_t = false)]
    pub save_models: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config key to vary (e.g. r, alpha, local_fraction).
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values for the axis.
    #[arg(long)]
    pub values: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Completed run directories (each holding a metrics.csv).
    #[arg(long = "run", value_name = "DIR", required = true)]
    pub runs: Vec<PathBuf>,
    /// Target average accuracy for the bytes-to-reach column.
    #[arg(long, default_value_t = 0.5)]
    pub target: f64,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Seed precedence floor: the FEDCACHE_SEED environment variable, then 0.
fn env_seed() -> u64 {
    std::env::var("FEDCACHE_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

/// 12-hex-digit id derived from the canonical config serialization.
pub fn run_id(config: &ExperimentConfig) -> String {
    let digest = Sha256::digest(config.canonical_string().as_bytes());
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

/// Assemble the effective config: defaults, then the environment seed, then
/// the config file, then flag overrides, then --set pairs.
fn resolve_config(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig {
        seed: env_seed(),
        ..ExperimentConfig::default()
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {}: expected key=value", line_no + 1)))?;
            config.set(key.trim(), value.trim()).map_err(usage)?;
        }
    }
    if let Some(v) = &args.algorithm {
        config.set("algorithm", v).map_err(usage)?;
    }
    if let Some(v) = args.r {
        config.set("r", &v.to_string()).map_err(usage)?;
    }
    if let Some(v) = args.beta {
        config.set("beta", &v.to_string()).map_err(usage)?;
    }
    if let Some(v) = args.rounds {
        config.set("rounds", &v.to_string()).map_err(usage)?;
    }
    if let Some(v) = args.clients {
        config.set("clients", &v.to_string()).map_err(usage)?;
    }
    if let Some(v) = args.alpha {
        config.set("alpha", &v.to_string()).map_err(usage)?;
    }
    if let Some(v) = args.seed {
        config.set("seed", &v.to_string()).map_err(usage)?;
    }
    for pair in &args.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("--set {pair}: expected KEY=VALUE")))?;
        config.set(key.trim(), value.trim()).map_err(usage)?;
    }
    config.validate().map_err(usage)?;
    Ok(config)
}

/// Everything a completed run leaves behind, for sweeps and tests.
pub struct RunOutcome {
    pub report: MetricsReport,
    pub out_dir: PathBuf,
    pub run_id: String,
    pub maua: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Mean per-client label TV distance from the pooled distribution.
    pub mean_label_tv: f64,
}

fn execute_run(
    config: &ExperimentConfig,
    out_dir: &Path,
    acc_targets: &[f64],
    save_models: bool,
) -> Result<RunOutcome, CliError> {
    std::fs::create_dir_all(out_dir).map_err(runtime)?;
    let mut federation = Federation::initialize(config).map_err(runtime)?;
    let report = federation.run_to_completion().map_err(runtime)?;
    let maua = report.maua().map_err(runtime)?;

    // Label-skew statistic over the realized shards.
    let mut pooled: Vec<Sample> = Vec::new();
    let mut per_client: Vec<LabeledDataset> = Vec::new();
    for state in federation.clients() {
        let mut samples = state.shard.train.samples().to_vec();
        samples.extend_from_slice(state.shard.test.samples());
        pooled.extend_from_slice(&samples);
        per_client.push(
            LabeledDataset::new(samples, federation.num_classes()).map_err(runtime)?,
        );
    }
    let pooled = LabeledDataset::new(pooled, federation.num_classes()).map_err(runtime)?;
    let mean_label_tv = mean_client_tv(&pooled, &per_client);

    let csv_path = out_dir.join("metrics.csv");
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(runtime)?;
    std::fs::write(&csv_path, &csv).map_err(runtime)?;

    let id = run_id(config);
    std::fs::write(out_dir.join("config.resolved"), config.canonical_string())
        .map_err(runtime)?;

    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = format!(
        "run_id={id}\nalgorithm={}\nseed={}\nout_dir={}\ncreated_at_unix={created}\n",
        config.algorithm.as_str(),
        config.seed,
        out_dir.display()
    );
    std::fs::write(out_dir.join("manifest.txt"), manifest).map_err(runtime)?;

    let ledger = federation.ledger();
    let mut summary = String::new();
    let _ = writeln!(summary, "algorithm={}", config.algorithm.as_str());
    let _ = writeln!(summary, "run_id={id}");
    let _ = writeln!(summary, "rounds={}", report.records.len());
    let _ = writeln!(summary, "maua={maua}");
    if let Some(last) = report.records.last() {
        let _ = writeln!(summary, "final_avg_ua={}", last.avg_ua);
    }
    let _ = writeln!(summary, "bytes_up={}", ledger.total_up());
    let _ = writeln!(summary, "bytes_down={}", ledger.total_down());
    let _ = writeln!(summary, "bytes_total={}", ledger.total());
    for kind in [
        MessageKind::HashUpload,
        MessageKind::KnowledgeUpload,
        MessageKind::FdClassUpload,
    ] {
        let t = ledger.kind_totals(Direction::Up, kind);
        if t.messages > 0 {
            let _ = writeln!(summary, "bytes_up.{}={}", kind.as_str(), t.bytes);
        }
    }
    for kind in [MessageKind::EnsembleDown, MessageKind::FdClassDown] {
        let t = ledger.kind_totals(Direction::Down, kind);
        if t.messages > 0 {
            let _ = writeln!(summary, "bytes_down.{}={}", kind.as_str(), t.bytes);
        }
    }
    let _ = writeln!(summary, "mean_label_tv={mean_label_tv}");
    for (target, cost) in report.acc_at(acc_targets) {
        let _ = writeln!(summary, "acc@{target}={cost}");
    }
    for warning in &report.warnings {
        let _ = writeln!(summary, "warning={warning}");
    }
    std::fs::write(out_dir.join("summary.txt"), &summary).map_err(runtime)?;

    if save_models {
        for state in federation.clients() {
            let path = out_dir.join(format!("model_{:03}.ckpt", state.shard.client_id));
            state.model.save_checkpoint(&path).map_err(runtime)?;
        }
    }

    Ok(RunOutcome {
        maua,
        bytes_up: ledger.total_up(),
        bytes_down: ledger.total_down(),
        mean_label_tv,
        report,
        out_dir: out_dir.to_path_buf(),
        run_id: id,
    })
}

pub fn cmd_run(args: &RunArgs) -> Result<RunOutcome, CliError> {
    let config = resolve_config(args)?;
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(run_id(&config)));
    let targets: Vec<f64> = if args.acc_targets.is_empty() {
        vec![0.3, 0.5, 0.7, 0.9]
    } else {
        args.acc_targets.clone()
    };
    let outcome = execute_run(&config, &out_dir, &targets, args.save_models)?;
    println!(
        "run {} ({}): maua={:.4} bytes_up={} bytes_down={} -> {}",
        outcome.run_id,
        config.algorithm.as_str(),
        outcome.maua,
        outcome.bytes_up,
        outcome.bytes_down,
        outcome.out_dir.display()
    );
    Ok(outcome)
}

pub fn cmd_partition(args: &PartitionArgs) -> Result<(), CliError> {
    let config = ExperimentConfig {
        seed: args.seed.unwrap_or_else(env_seed),
        clients: args.clients,
        alpha: args.alpha,
        test_fraction: args.test_fraction,
        data: match (&args.idx_images, &args.idx_labels) {
            (Some(images), Some(labels)) => DataSource::Idx {
                images: images.clone(),
                labels: labels.clone(),
            },
            _ => DataSource::Synth {
                classes: args.synth_classes,
                per_class: args.synth_per_class,
                dim: args.synth_dim,
                class_sep: args.synth_sep,
            },
        },
        ..ExperimentConfig::default()
    };
    config.validate().map_err(usage)?;

    let shards = build_shards(&config).map_err(|e| match e {
        fedcache_core::Error::InvalidArgument(_) => usage(e),
        other => runtime(other),
    })?;
    std::fs::create_dir_all(&args.out).map_err(runtime)?;
    for shard in &shards {
        let mut buf = Vec::new();
        write_shard_manifest(std::slice::from_ref(shard), &mut buf).map_err(runtime)?;
        let path = args.out.join(format!("shard_{:03}.txt", shard.client_id));
        std::fs::write(path, buf).map_err(runtime)?;
    }
    let mut record = String::new();
    let _ = writeln!(record, "clients={}", config.clients);
    let _ = writeln!(record, "alpha={}", config.alpha);
    let _ = writeln!(record, "seed={}", config.seed);
    let _ = writeln!(record, "test_fraction={}", config.test_fraction);
    match &config.data {
        DataSource::Synth {
            classes,
            per_class,
            dim,
            class_sep,
        } => {
            let _ = writeln!(
                record,
                "data=synth classes={classes} per_class={per_class} dim={dim} sep={class_sep}"
            );
        }
        DataSource::Idx { images, labels } => {
            let _ = writeln!(
                record,
                "data=idx images={} labels={}",
                images.display(),
                labels.display()
            );
        }
    }
    let mut manifest_all = Vec::new();
    write_shard_manifest(&shards, &mut manifest_all).map_err(runtime)?;
    record.push_str(&String::from_utf8_lossy(&manifest_all));
    std::fs::write(args.out.join("partition.txt"), record).map_err(runtime)?;
    println!(
        "wrote {} shard manifests to {}",
        shards.len(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let values: Vec<String> = args
        .values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let base_args = RunArgs {
        config: args.config.clone(),
        set: args.set.clone(),
        seed: args.seed,
        ..Default::default()
    };
    let base = resolve_config(&base_args)?;
    let out_root = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("sweeps").join(format!("{}-{}", args.axis, run_id(&base))));
    std::fs::create_dir_all(&out_root).map_err(runtime)?;

    let mut rows: Vec<(String, RunOutcome)> = Vec::new();
    let mut failure: Option<CliError> = None;
    for value in &values {
        let mut config = base.clone();
        if let Err(e) = config.set(&args.axis, value).and_then(|_| config.validate()) {
            failure = Some(usage(format!("arm {}={value}: {e}", args.axis)));
            break;
        }
        let arm_dir = out_root.join(format!("{}_{value}", args.axis));
        match execute_run(&config, &arm_dir, &[0.3, 0.5, 0.7, 0.9], false) {
            Ok(outcome) => rows.push((value.clone(), outcome)),
            Err(e) => {
                failure = Some(CliError::Runtime(format!(
                    "arm {}={value} failed: {}",
                    args.axis,
                    e.message()
                )));
                break;
            }
        }
    }

    // Sort numerically where possible so the table follows the axis.
    rows.sort_by(|a, b| match (a.0.parse::<f64>(), b.0.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.0.cmp(&b.0),
    });
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<16} {:>10} {:>14} {:>14} {:>14}",
        args.axis, "maua", "bytes_up", "bytes_down", "mean_label_tv"
    );
    for (value, outcome) in &rows {
        let _ = writeln!(
            table,
            "{value:<16} {:>10.4} {:>14} {:>14} {:>14.4}",
            outcome.maua, outcome.bytes_up, outcome.bytes_down, outcome.mean_label_tv
        );
    }
    std::fs::write(out_root.join("sweep.txt"), &table).map_err(runtime)?;
    print!("{table}");

    match failure {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

pub fn cmd_report(args: &ReportArgs) -> Result<String, CliError> {
    if !(args.target > 0.0 && args.target < 1.0) {
        return Err(CliError::Usage("target must be in (0, 1)".into()));
    }
    let mut rows: Vec<(String, f64, CommCost)> = Vec::new();
    for dir in &args.runs {
        let csv_path = dir.join("metrics.csv");
        let file = std::fs::File::open(&csv_path)
            .map_err(|e| usage(format!("cannot open {}: {e}", csv_path.display())))?;
        let report = MetricsReport::parse_csv(std::io::BufReader::new(file)).map_err(usage)?;
        let label = if report.algorithm.is_empty() {
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| dir.display().to_string())
        } else {
            report.algorithm.clone()
        };
        let maua = report.maua().map_err(usage)?;
        rows.push((label, maua, report.comm_to_reach(args.target)));
    }
    let mut buf = Vec::new();
    write_comparison_table(&rows, &mut buf).map_err(runtime)?;
    let table = String::from_utf8_lossy(&buf).into_owned();
    if let Some(path) = &args.out {
        let mut file = std::fs::File::create(path).map_err(runtime)?;
        file.write_all(table.as_bytes()).map_err(runtime)?;
    }
    print!("{table}");
    Ok(table)
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Partition(args) => cmd_partition(&args),
        Command::Run(args) => cmd_run(&args).map(|_| ()),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Report(args) => cmd_report(&args).map(|_| ()),
    }
}
