//! `mtsl` — train, inspect, and feed the structural multi-task learner.
//!
//! Subcommands: `gen` writes a synthetic multi-task dataset, `train` runs
//! the full alternating-phase training and emits the run artifacts,
//! `inspect` prints a trained architecture as a per-depth grouping table,
//! DOT text, or CKA between exported feature CSVs.
//!
//! Exit codes are stable: 0 success, 2 configuration/usage errors,
//! 3 numeric failures (a NaN abort leaves a diagnostic snapshot).
//! Logging is controlled by the MTSL_LOG environment variable
//! (error, info, debug).

mod report;

use clap::{Args, Parser, Subcommand};
use mtsl_core::archgraph::{deserialize, export_dot, serialize, ArchGraph};
use mtsl_core::data::{generate, save_dataset, DatasetMeta, SplitSizes, SyntheticTaskSpec};
use mtsl_core::error::Error;
use mtsl_core::losses::CkaVariant;
use mtsl_core::metrics::TaskMetric;
use mtsl_core::similarity::{cka_biased, cka_unbiased, FeatureMatrix};
use mtsl_core::trainer::{evaluate, PhaseSchedule, RunConfig, Trainer};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mtsl",
    version,
    about = "structural multi-task learning engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a synthetic multi-task dataset (train/val CSVs + sidecar).
    Gen(GenArgs),
    /// Train a multi-task network, learning its architecture on the way.
    Train(TrainArgs),
    /// Inspect a trained graph, or score CKA between feature CSVs.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of tasks.
    #[arg(long, default_value_t = 3)]
    tasks: usize,
    /// 1-based task indices sharing one latent block, e.g. `1,2`.
    #[arg(long, value_delimiter = ',')]
    shared: Vec<usize>,
    /// Total samples (train + validation).
    #[arg(long)]
    samples: usize,
    /// RNG seed; all outputs are deterministic in it.
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Latents per block.
    #[arg(long, default_value_t = 4)]
    block_width: usize,
    /// Target noise σ.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run-config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory produced by `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the run artifacts.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Alignment weight λ.
    #[arg(long)]
    lambda: Option<f64>,
    /// Grouping threshold γ.
    #[arg(long)]
    gamma: Option<f64>,
    /// Training budget E (task + fine-tune epochs).
    #[arg(long)]
    epochs: Option<usize>,
    /// Minimum fine-tuning epochs f.
    #[arg(long)]
    fine_tune_min: Option<usize>,
    /// Per-phase task-learning epochs, e.g. `2,2,4`.
    #[arg(long, value_delimiter = ',')]
    tl_epochs: Option<Vec<usize>>,
    /// Per-phase amalgamation epochs, e.g. `1,1,2`.
    #[arg(long, value_delimiter = ',')]
    sl_epochs: Option<Vec<usize>>,
    /// Layer widths, e.g. `16,16,16`.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Keep only the first N structural phases (0 = joint training only).
    #[arg(long)]
    structural_phases: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    probe_size: Option<usize>,
    /// CKA estimator for the alignment loss: `unbiased` or `biased`.
    #[arg(long)]
    cka_variant: Option<String>,
    /// metrics.json of a separate single-task-networks run; enables the
    /// multi-task delta columns in report.txt.
    #[arg(long)]
    stn_baseline: Option<PathBuf>,
    /// Two comma-separated task names for the pair delta (defaults to the
    /// first two tasks).
    #[arg(long, value_delimiter = ',')]
    sd_pair: Option<Vec<String>>,
}

#[derive(Args)]
struct InspectArgs {
    /// Graph JSON file (omit when using --cka).
    graph: Option<PathBuf>,
    /// Emit DOT instead of the grouping table.
    #[arg(long)]
    dot: bool,
    /// Two feature CSVs to score with CKA.
    #[arg(long, num_args = 2)]
    cka: Option<Vec<PathBuf>>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("MTSL_LOG")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn cmd_gen(args: GenArgs) -> mtsl_core::Result<()> {
    let shared: Vec<usize> = args
        .shared
        .iter()
        .map(|&t| {
            if t == 0 || t > args.tasks {
                Err(Error::config(format!(
                    "--shared names task {t}; valid tasks are 1..={}",
                    args.tasks
                )))
            } else {
                Ok(t - 1)
            }
        })
        .collect::<mtsl_core::Result<_>>()?;
    let spec =
        SyntheticTaskSpec::with_shared_block(args.tasks, &shared, args.block_width, args.noise)?;
    let dataset = generate(&spec, args.samples, args.seed)?;
    let meta = DatasetMeta {
        seed: args.seed,
        spec,
        n_samples: args.samples,
        split: SplitSizes {
            train: dataset.train.len(),
            val: dataset.val.len(),
        },
    };
    save_dataset(&dataset, &meta, &args.out)?;
    log::info!(
        "wrote {} train rows and {} val rows under {}",
        dataset.train.len(),
        dataset.val.len(),
        args.out.display()
    );
    println!(
        "dataset: {} ({} tasks, {} train / {} val rows)",
        args.out.display(),
        dataset.task_names.len(),
        dataset.train.len(),
        dataset.val.len()
    );
    Ok(())
}

fn build_config(args: &TrainArgs) -> mtsl_core::Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| {
                Error::parse(
                    format!("{} line {}", path.display(), e.line()),
                    e.to_string(),
                )
            })?
        }
        None => {
            let seed = args.seed.ok_or_else(|| {
                Error::config("--seed is required (runs take no implicit entropy)")
            })?;
            RunConfig::defaults(seed, args.epochs.unwrap_or(80))
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.schedule = PhaseSchedule::for_budget(epochs);
    }
    if let Some(f) = args.fine_tune_min {
        config.schedule.min_fine_tune = f;
    }
    if let Some(tl) = &args.tl_epochs {
        config.schedule.task_epochs = tl.clone();
    }
    if let Some(sl) = &args.sl_epochs {
        config.schedule.structural_epochs = sl.clone();
    }
    if let Some(n) = args.structural_phases {
        config.schedule = config.schedule.truncated(n)?;
    }
    if let Some(widths) = &args.widths {
        config.widths = widths.clone();
    }
    if let Some(lambda) = args.lambda {
        config.lambda = lambda;
    }
    if let Some(gamma) = args.gamma {
        config.gamma = gamma;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    if let Some(p) = args.probe_size {
        config.probe_size = p;
    }
    if let Some(v) = &args.cka_variant {
        config.cka_variant = match v.as_str() {
            "unbiased" => CkaVariant::Unbiased,
            "biased" => CkaVariant::Biased,
            other => {
                return Err(Error::config(format!(
                    "unknown --cka-variant {other:?}; use unbiased or biased"
                )))
            }
        };
    }
    if let Some(data) = &args.data {
        config.dataset = Some(data.clone());
        config.synthetic = None;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> mtsl_core::Result<()> {
    let config = build_config(&args)?;
    let data = config.load_data()?;
    std::fs::create_dir_all(&args.out)?;

    let mut trainer = Trainer::new(config.clone(), data)?;
    let run_result = trainer.run();

    if let Err(e) = run_result {
        if matches!(e, Error::Numeric(_)) {
            let snapshot = args.out.join("abort_snapshot.json");
            std::fs::write(&snapshot, serialize(trainer.graph())?)?;
            std::fs::write(
                args.out.join("abort_runlog.jsonl"),
                trainer.log().to_jsonl()?,
            )?;
            return Err(Error::numeric(format!(
                "{e}; diagnostic snapshot at {}",
                snapshot.display()
            )));
        }
        return Err(e);
    }

    let metrics = collect_metrics(&trainer)?;
    let (graph, log) = trainer.into_parts();

    std::fs::write(args.out.join("final_graph.json"), serialize(&graph)?)?;
    std::fs::write(args.out.join("runlog.jsonl"), log.to_jsonl()?)?;
    std::fs::write(args.out.join("arch.dot"), export_dot(&graph))?;
    std::fs::write(
        args.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics).map_err(|e| Error::contract(e.to_string()))? + "\n",
    )?;

    let baseline = match &args.stn_baseline {
        Some(path) => Some(load_metrics(path)?),
        None => None,
    };
    let report = report::render(
        &graph,
        &metrics,
        baseline.as_deref(),
        args.sd_pair.as_deref(),
    )?;
    std::fs::write(args.out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn collect_metrics(trainer: &Trainer) -> mtsl_core::Result<Vec<TaskMetric>> {
    let data = trainer.config().load_data()?;
    let values = evaluate(trainer.graph(), &data.val, trainer.loss_spec())?;
    Ok(values
        .iter()
        .map(|(&t, &v)| TaskMetric {
            task: data.task_names[t].clone(),
            value: v,
            lower_is_better: mtsl_core::losses::lower_is_better(trainer.loss_spec().tasks[t].kind),
        })
        .collect())
}

fn load_metrics(path: &Path) -> mtsl_core::Result<Vec<TaskMetric>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::parse(
            format!("{} line {}", path.display(), e.line()),
            e.to_string(),
        )
    })
}

fn cmd_inspect(args: InspectArgs) -> mtsl_core::Result<()> {
    if let Some(csvs) = &args.cka {
        let load = |p: &PathBuf| -> mtsl_core::Result<FeatureMatrix> {
            let file = std::fs::File::open(p)
                .map_err(|e| Error::parse(p.display().to_string(), e.to_string()))?;
            FeatureMatrix::from_csv(std::io::BufReader::new(file))
        };
        let (a, b) = (load(&csvs[0])?, load(&csvs[1])?);
        println!("cka_unbiased {}", cka_unbiased(&a, &b)?);
        println!("cka_biased   {}", cka_biased(&a, &b)?);
        return Ok(());
    }
    let path = args
        .graph
        .as_ref()
        .ok_or_else(|| Error::config("inspect needs a graph file or --cka CSVs"))?;
    let bytes =
        std::fs::read(path).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let graph = deserialize(&bytes)?;
    if args.dot {
        print!("{}", export_dot(&graph));
    } else {
        print!("{}", grouping_table(&graph));
    }
    Ok(())
}

/// Per-depth grouping table, e.g. `2  [a,b],[c]`.
fn grouping_table(graph: &ArchGraph) -> String {
    let names = graph.task_names();
    let mut out = String::from("depth  groups\n");
    for (i, row) in graph.depth_partitions().iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .map(|cell| {
                let cell_names: Vec<&str> = cell.iter().map(|&t| names[t].as_str()).collect();
                format!("[{}]", cell_names.join(","))
            })
            .collect();
        out.push_str(&format!("{:<5}  {}\n", i + 1, cells.join(",")));
    }
    out
}
