use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use unilabel::budget::CrossIoUTable;
use unilabel::error::{Error, Result};
use unilabel::graph::GraphInputs;
use unilabel::io::{
    budget_from_table, evaluate_checkpoint, export_results, file_stem, load_matrix, load_pixels, load_taxonomies,
    read_json, save_taxonomies, solve_from_raw, train_from, unified_taxonomy, warmup_budget, write_json,
    write_step_log, Checkpoint, MappingFile, PixelFile, RunConfig, RunLock,
};
use unilabel::par::Exec;
use unilabel::solver::SolverConfig;
use unilabel::synth::{generate_world, sample_batch, WorldConfig};
use unilabel::taxonomy::validate_mapping;
use unilabel::trainer::{adapt_unseen_dataset, BudgetConfig};

#[derive(Parser)]
#[command(
    name = "unilabel",
    version,
    about = "Learn a unified label space across segmentation datasets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted world and write its taxonomies and pixel files.
    SynthGen {
        /// World configuration JSON; the canonical world when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Labeled pixels written per dataset.
        #[arg(long, default_value_t = 2000)]
        pixels: usize,
    },
    /// Run the full training pipeline and export its artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Solve label mappings from a raw `N × |L|` adjacency matrix.
    SolveMapping {
        #[arg(long)]
        adjacency: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        taxonomies: Vec<PathBuf>,
        /// Solver configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select the unified node budget from cross-head IoU.
    SelectBudget {
        /// Run configuration; the multi-head warm-up is trained first.
        #[arg(long, conflicts_with = "iou", required_unless_present = "iou")]
        config: Option<PathBuf>,
        /// A saved cross-head IoU table.
        #[arg(long)]
        iou: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print dataset mIoU and recovery metrics for a checkpoint as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset index or name; all datasets when omitted.
        #[arg(long)]
        dataset: Option<String>,
        /// Overrides the configuration stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Map a new dataset onto a trained unified label space.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Taxonomy file holding the new dataset.
        #[arg(long)]
        taxonomies: PathBuf,
        /// Dataset index within the taxonomy file.
        #[arg(long, default_value_t = 0)]
        dataset: usize,
        #[arg(long, num_args = 1.., required = true)]
        pixels: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the unified taxonomy of a checkpoint.
    ExportTaxonomy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthGen {
            config,
            out,
            seed,
            pixels,
        } => synth_gen(config.as_deref(), &out, seed, pixels),
        Command::Train {
            config,
            out,
            seed,
            checkpoint,
        } => train(&config, out, seed, checkpoint.as_deref()),
        Command::SolveMapping {
            adjacency,
            taxonomies,
            config,
            out,
        } => solve_mapping(&adjacency, &taxonomies, config.as_deref(), out.as_deref()),
        Command::SelectBudget {
            config,
            iou,
            lambda,
            seed,
            out,
        } => select(config.as_deref(), iou.as_deref(), lambda, seed, out.as_deref()),
        Command::Eval {
            checkpoint,
            dataset,
            config,
            seed,
        } => eval(&checkpoint, dataset.as_deref(), config.as_deref(), seed),
        Command::Adapt {
            checkpoint,
            taxonomies,
            dataset,
            pixels,
            out,
        } => adapt(&checkpoint, &taxonomies, dataset, &pixels, out.as_deref()),
        Command::ExportTaxonomy {
            checkpoint,
            config,
            out,
        } => export_taxonomy(&checkpoint, config.as_deref(), out.as_deref()),
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn synth_gen(config: Option<&Path>, out: &Path, seed: u64, pixels: usize) -> Result<()> {
    let world_config = match config {
        Some(p) => read_json::<WorldConfig>(p)?,
        None => WorldConfig::canonical(),
    };
    let world = generate_world(&world_config, seed)?;
    fs::create_dir_all(out.join("pixels"))?;
    fs::create_dir_all(out.join("truth"))?;
    write_json(&out.join("world.json"), &world)?;
    save_taxonomies(&out.join("taxonomies.json"), &world.taxonomies)?;
    for (d, t) in world.taxonomies.iter().enumerate() {
        let batch = sample_batch(&world, d, pixels, seed.wrapping_add(d as u64))?;
        write_json(
            &out.join("pixels").join(format!("{}.json", file_stem(t))),
            &PixelFile::from_batch(&batch),
        )?;
    }
    for (m, t) in world.planted_mappings()?.iter().zip(&world.taxonomies) {
        write_json(
            &out.join("truth").join(format!("{}.json", file_stem(t))),
            &MappingFile::new(m, t),
        )?;
    }
    eprintln!("wrote {} datasets to {}", world.taxonomies.len(), out.display());
    Ok(())
}

fn train(config: &Path, out: Option<PathBuf>, seed: Option<u64>, checkpoint: Option<&Path>) -> Result<()> {
    let config = load_config(config, seed)?;
    let out = out
        .or_else(|| config.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))?;
    fs::create_dir_all(&out)?;
    let _lock = RunLock::acquire(&out)?;
    let resume = checkpoint.map(Checkpoint::load).transpose()?.map(|c| c.state);
    let outcome = train_from(&config, resume)?;
    write_step_log(&out.join("log.jsonl"), &outcome.checkpoint.state.log)?;
    export_results(
        &outcome.checkpoint,
        &outcome.unified,
        outcome.data.taxonomies(),
        &outcome.report,
        &out,
    )?;
    let u = &outcome.report.unified;
    eprintln!("trained {} unified nodes; artifacts in {}", u.nodes, out.display());
    if let Some(f1) = u.recovery_f1 {
        eprintln!("recovery F1 {f1:.4}");
    }
    Ok(())
}

fn solve_mapping(adjacency: &Path, taxonomies: &[PathBuf], config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let taxonomies = load_taxonomies(taxonomies)?;
    let raw = load_matrix(adjacency)?;
    let solver = match config {
        Some(p) => read_json::<SolverConfig>(p)?,
        None => SolverConfig::default(),
    };
    let solved = solve_from_raw(&raw, &taxonomies, &solver, Exec::default())?;
    let mut datasets = Vec::new();
    for ((m, t), converged) in solved.mappings.iter().zip(&taxonomies).zip(&solved.converged) {
        let report = validate_mapping(m);
        datasets.push(json!({
            "dataset_id": t.id,
            "name": t.name,
            "valid": report.is_ok(),
            "validity": report,
            "converged": converged,
            "mapping": MappingFile::new(m, t),
        }));
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            write_json(&dir.join(format!("{}.json", file_stem(t))), &MappingFile::new(m, t))?;
        }
    }
    print_json(&json!({ "nodes": raw.rows(), "datasets": datasets }))
}

fn select(
    config: Option<&Path>,
    iou: Option<&Path>,
    lambda: Option<f64>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let (table, selection) = match (config, iou) {
        (Some(p), _) => {
            let mut config = load_config(p, seed)?;
            if let Some(l) = lambda {
                config.budget.lambda = l;
            }
            warmup_budget(&config)?
        }
        (None, Some(p)) => {
            let table: CrossIoUTable = read_json(p)?;
            let mut budget = BudgetConfig::default();
            if let Some(l) = lambda {
                budget.lambda = l;
            }
            let selection = budget_from_table(&table, &budget)?;
            (table, selection)
        }
        (None, None) => return Err(Error::Config("pass --config or --iou".into())),
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("cross_iou.json"), &table)?;
        write_json(&dir.join("budget.json"), &selection)?;
    }
    print_json(&json!({
        "nodes": selection.nodes(),
        "objective": selection.objective,
        "lambda": selection.lambda,
        "optimal": selection.optimal,
        "tuples": selection.tuples,
    }))
}

fn eval(checkpoint: &Path, dataset: Option<&str>, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let config = config.map(|p| load_config(p, seed)).transpose()?;
    let config = match (config, seed) {
        (None, Some(s)) => ck.config.clone().map(|mut c| {
            c.seed = s;
            c
        }),
        (c, _) => c,
    };
    let (_, report) = evaluate_checkpoint(&ck, config.as_ref())?;
    match dataset {
        None => print_json(&json!({ "datasets": report.datasets, "unified": report.unified })),
        Some(key) => {
            let metrics = report
                .datasets
                .iter()
                .find(|d| d.name == key || d.dataset_id.to_string() == key)
                .ok_or_else(|| Error::Config(format!("no dataset {key:?}")))?;
            print_json(&json!({ "dataset": metrics, "unified": report.unified }))
        }
    }
}

fn adapt(checkpoint: &Path, taxonomies: &Path, dataset: usize, pixels: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let trained = training_taxonomies(&ck, None)?;
    let unified = ck.state.unified_embedding(&GraphInputs::from_taxonomies(&trained)?)?;
    let new = load_taxonomies(&[taxonomies.to_path_buf()])?;
    let taxonomy = new.get(dataset).ok_or(Error::Index {
        index: dataset,
        len: new.len(),
        context: "dataset in taxonomy file",
    })?;
    let batches = pixels.iter().map(|p| load_pixels(p)).collect::<Result<Vec<_>>>()?;
    let solver = ck.config.as_ref().map(|c| c.solver).unwrap_or_default();
    let before = ck.state.checksum();
    let result = adapt_unseen_dataset(
        &ck.state.encoder,
        &unified,
        taxonomy,
        &batches,
        &solver,
        Exec::default(),
    )?;
    if ck.state.checksum() != before {
        return Err(Error::Integrity("parameters changed during adaptation".into()));
    }
    let file = MappingFile::new(&result.mapping, taxonomy);
    if let Some(p) = out {
        write_json(p, &file)?;
    }
    let unseen: Vec<&str> = result
        .unseen_classes
        .iter()
        .map(|&c| taxonomy.labels[c].name.as_str())
        .collect();
    print_json(&json!({
        "mapping": file,
        "valid": validate_mapping(&result.mapping).is_ok(),
        "unseen_classes": unseen,
        "checksum": format!("{before:016x}"),
    }))
}

fn training_taxonomies(ck: &Checkpoint, config: Option<&Path>) -> Result<Vec<unilabel::taxonomy::DatasetTaxonomy>> {
    let config = match config {
        Some(p) => RunConfig::load(p)?,
        None => ck
            .config
            .clone()
            .ok_or_else(|| Error::Config("checkpoint has no run configuration; pass --config".into()))?,
    };
    Ok(config.load_data()?.taxonomies().to_vec())
}

fn export_taxonomy(checkpoint: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let taxonomies = training_taxonomies(&ck, config)?;
    let unified = ck
        .state
        .unified_embedding(&GraphInputs::from_taxonomies(&taxonomies)?)?;
    let file = unified_taxonomy(&ck.state, &unified, &taxonomies);
    match out {
        Some(p) => write_json(p, &file),
        None => print_json(&serde_json::to_value(&file)?),
    }
}
