//! Command-line entry points: single runs, sweeps, and run comparison.
//!
//! Each run owns one output directory and leaves behind `report.json`,
//! `checkpoint.bin`, `config_resolved.toml`, and the analysis CSVs, so a
//! finished directory is self-describing. Sweeps fan out over one or more
//! axes into per-cell subdirectories and never stop on a failed cell.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::analysis;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::trainer::{RunReport, Trainer};

#[derive(Parser)]
#[command(name = "pst", about = "Sparse training with decomposed importance scores")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a config file.
    Train(TrainArgs),
    /// Run a grid of training runs over one or more config axes.
    Sweep(SweepArgs),
    /// Compare masks across finished run directories.
    Compare(CompareArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Continue from output_dir/checkpoint.bin instead of starting fresh.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Path to the TOML run configuration used as the grid base.
    #[arg(long)]
    config: PathBuf,
    /// Axis to vary: r1, r2, sparsity, or variant. Repeat for a grid.
    #[arg(long = "axis", required = true)]
    axes: Vec<String>,
    /// Comma-separated values, one --values per --axis.
    #[arg(long = "values", required = true)]
    values: Vec<String>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the base output directory; cells go in subdirectories.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Two or more finished run directories.
    dirs: Vec<PathBuf>,
    /// Directory receiving similarity.csv (default: current directory).
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

/// Process exit code for an error: config and usage problems are 2,
/// a numerical abort is 3, filesystem trouble is 1.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

fn load_config(path: &Path, seed: Option<u64>, output_dir: Option<&Path>) -> Result<RunConfig> {
    let mut config = RunConfig::from_path(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(dir) = output_dir {
        config.output_dir = dir.display().to_string();
    }
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = load_config(&args.config, args.seed, args.output_dir.as_deref())?;
    let report = execute_run(&config, args.resume, false)?;
    println!(
        "{} seed {}: final {} = {:.6e} ({} steps, {:.1}s) -> {}",
        report.criterion,
        report.seed,
        report.metric_name,
        report.final_metric,
        config.total_steps,
        report.wall_clock_secs,
        config.output_dir,
    );
    Ok(())
}

/// Run one configuration to completion and write every output file.
/// With `resume` set, picks up from the directory's checkpoint when one
/// exists; the checkpoint must come from an identical configuration.
pub fn execute_run(config: &RunConfig, resume: bool, quiet: bool) -> Result<RunReport> {
    config.validate()?;
    let dir = PathBuf::from(&config.output_dir);
    std::fs::create_dir_all(&dir)?;
    let ckpt_path = dir.join("checkpoint.bin");
    let task = config.build_task()?;
    let options = config.train_options();

    let mut trainer = if resume && ckpt_path.exists() {
        let (trainer, saved_text) = checkpoint::load(&ckpt_path, config.build_model()?, options)?;
        let saved = RunConfig::from_str(&saved_text)?;
        if !saved.same_run(config) {
            return Err(Error::config(format!(
                "{} belongs to a different configuration; refusing to resume",
                ckpt_path.display()
            )));
        }
        trainer
    } else {
        Trainer::new(config.build_model()?, options)?
    };

    let resolved = config.resolved_toml();
    std::fs::write(dir.join("config_resolved.toml"), &resolved)?;

    let progress_every = (config.total_steps / 10).max(1);
    while !trainer.is_done() {
        let loss = trainer.train_step(&task)?;
        let step = trainer.step_count();
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && !trainer.is_done()
        {
            checkpoint::save(&ckpt_path, &trainer, &resolved)?;
        }
        if !quiet && (step % progress_every == 0 || trainer.is_done()) {
            let sparsity = trainer.sparsities().last().copied().unwrap_or(0.0);
            eprintln!("step {step:>6}  loss {loss:.6e}  sparsity {sparsity:.4}");
        }
    }
    checkpoint::save(&ckpt_path, &trainer, &resolved)?;

    let report = trainer.report(&task)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::contract(format!("report serialization failed: {e}")))?;
    std::fs::write(dir.join("report.json"), json)?;

    let structuredness = analysis::structuredness_report(&report.masks)?;
    analysis::write_structuredness_csv(&dir, &structuredness)?;
    for layer in trainer.model().sparse_layers() {
        let points = analysis::weight_score_scatter(layer)?;
        analysis::write_scatter_csv(&dir, layer.name(), &points)?;
    }
    if config.log_structured_deltas {
        write_deltas_csv(&dir.join("structured_deltas.csv"), &trainer)?;
    }
    Ok(report)
}

/// Long-form dump of the per-step row/column score contributions.
fn write_deltas_csv(path: &Path, trainer: &Trainer) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,layer,axis,index,delta")?;
    for record in trainer.deltas() {
        for (i, d) in record.d_r.iter().enumerate() {
            writeln!(out, "{},{},row,{},{}", record.step, record.layer, i, d)?;
        }
        for (j, d) in record.d_c.iter().enumerate() {
            writeln!(out, "{},{},col,{},{}", record.step, record.layer, j, d)?;
        }
    }
    out.flush()?;
    Ok(())
}

const SWEEP_AXES: [&str; 4] = ["r1", "r2", "sparsity", "variant"];

fn apply_axis(config: &mut RunConfig, axis: &str, value: &str) -> Result<()> {
    match axis {
        "r1" => {
            config.r1 = value
                .parse()
                .map_err(|_| Error::config(format!("r1 value {value:?} is not an integer")))?;
        }
        "r2" => {
            config.r2 = value
                .parse()
                .map_err(|_| Error::config(format!("r2 value {value:?} is not an integer")))?;
        }
        "sparsity" => {
            config.target_p = value
                .parse()
                .map_err(|_| Error::config(format!("sparsity value {value:?} is not a number")))?;
        }
        "variant" => config.criterion = value.to_string(),
        other => {
            return Err(Error::config(format!(
                "unknown sweep axis {other:?}; expected one of {SWEEP_AXES:?}"
            )));
        }
    }
    Ok(())
}

/// Directory-safe form of an axis value ("pst:mag+rc" -> "pst-mag-rc").
fn sanitize(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '-' })
        .collect()
}

struct SweepCell {
    labels: Vec<(String, String)>,
    config: RunConfig,
    subdir: String,
}

fn build_cells(base: &RunConfig, axes: &[String], values: &[Vec<String>]) -> Result<Vec<SweepCell>> {
    let mut cells = vec![SweepCell {
        labels: Vec::new(),
        config: base.clone(),
        subdir: String::new(),
    }];
    for (axis, axis_values) in axes.iter().zip(values) {
        let mut next = Vec::with_capacity(cells.len() * axis_values.len());
        for cell in &cells {
            for value in axis_values {
                let mut config = cell.config.clone();
                apply_axis(&mut config, axis, value)?;
                let mut labels = cell.labels.clone();
                labels.push((axis.clone(), value.clone()));
                let piece = format!("{axis}_{}", sanitize(value));
                let subdir = if cell.subdir.is_empty() {
                    piece
                } else {
                    format!("{}_{piece}", cell.subdir)
                };
                next.push(SweepCell { labels, config, subdir });
            }
        }
        cells = next;
    }
    for cell in &mut cells {
        cell.config.output_dir = format!("{}/{}", base.output_dir, cell.subdir);
        cell.config.validate().map_err(|e| {
            Error::config(format!("sweep cell {}: {e}", cell.subdir))
        })?;
    }
    Ok(cells)
}

fn sweep_threads(cells: usize) -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = std::env::var("PST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(available);
    cap.min(cells).max(1)
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if args.axes.len() != args.values.len() {
        return Err(Error::config(format!(
            "{} --axis flags but {} --values flags; each axis needs one value list",
            args.axes.len(),
            args.values.len()
        )));
    }
    for axis in &args.axes {
        if !SWEEP_AXES.contains(&axis.as_str()) {
            return Err(Error::config(format!(
                "unknown sweep axis {axis:?}; expected one of {SWEEP_AXES:?}"
            )));
        }
    }
    let base = load_config(&args.config, args.seed, args.output_dir.as_deref())?;
    let value_lists: Vec<Vec<String>> = args
        .values
        .iter()
        .map(|list| list.split(',').map(|v| v.trim().to_string()).collect())
        .collect();
    if value_lists.iter().any(|list| list.is_empty() || list.iter().any(String::is_empty)) {
        return Err(Error::config("every --values list needs non-empty entries".to_string()));
    }
    let cells = build_cells(&base, &args.axes, &value_lists)?;

    let threads = sweep_threads(cells.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunReport>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let outcome = execute_run(&cells[i].config, false, true);
                results.lock().expect("sweep worker panicked")[i] = Some(outcome);
            });
        }
    });
    let results = results.into_inner().expect("sweep worker panicked");

    let base_dir = PathBuf::from(&base.output_dir);
    std::fs::create_dir_all(&base_dir)?;
    let mut summary = std::io::BufWriter::new(std::fs::File::create(
        base_dir.join("sweep_summary.csv"),
    )?);
    write!(summary, "{}", args.axes.join(","))?;
    writeln!(summary, ",metric,value,status")?;

    let mut header = args.axes.join("  ");
    header.push_str("  metric  value");
    println!("{header}");
    let mut failures = 0usize;
    let mut first_error: Option<Error> = None;
    for (cell, outcome) in cells.iter().zip(results) {
        let values: Vec<&str> = cell.labels.iter().map(|(_, v)| v.as_str()).collect();
        match outcome.expect("every sweep cell ran") {
            Ok(report) => {
                writeln!(
                    summary,
                    "{},{},{:.12e},ok",
                    values.join(","),
                    report.metric_name,
                    report.final_metric
                )?;
                println!(
                    "{}  {}  {:.6e}",
                    values.join("  "),
                    report.metric_name,
                    report.final_metric
                );
            }
            Err(err) => {
                failures += 1;
                let msg = err.to_string().replace([',', '\n'], ";");
                writeln!(summary, "{},,,failed: {msg}", values.join(","))?;
                println!("{}  failed: {err}", values.join("  "));
                if first_error.is_none() {
                    first_error = Some(err);
                }
            }
        }
    }
    summary.flush()?;
    if failures > 0 {
        eprintln!("{failures} of {} sweep cells failed", cells.len());
        return Err(first_error.expect("failure counted"));
    }
    Ok(())
}

fn read_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{} is not a run report: {e}", path.display())))
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    if args.dirs.len() < 2 {
        return Err(Error::config("compare needs at least two run directories".to_string()));
    }
    let reports: Vec<RunReport> =
        args.dirs.iter().map(|d| read_report(d)).collect::<Result<_>>()?;

    // Criterion names label the pairs; fall back to directory names when
    // two runs share a criterion.
    let criteria: Vec<&str> = reports.iter().map(|r| r.criterion.as_str()).collect();
    let labels: Vec<String> = args
        .dirs
        .iter()
        .zip(&criteria)
        .map(|(dir, &criterion)| {
            if criteria.iter().filter(|&&c| c == criterion).count() > 1 {
                let name = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().to_string())
                    .unwrap_or_else(|| dir.display().to_string());
                format!("{criterion}@{name}")
            } else {
                criterion.to_string()
            }
        })
        .collect();

    let mut rows = Vec::new();
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            rows.extend(analysis::criterion_similarity(
                &reports[i],
                &reports[j],
                &labels[i],
                &labels[j],
            )?);
        }
    }
    let out_dir = args.output_dir.unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    let path = out_dir.join("similarity.csv");
    analysis::write_similarity_csv(&path, &rows)?;
    println!("layer  role  depth  pair  similarity");
    for row in &rows {
        println!(
            "{}  {}  {}  {}  {:.4}",
            row.layer, row.role, row.depth, row.pair, row.similarity
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}
