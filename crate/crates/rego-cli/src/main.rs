//! Command-line front end: generate benchmark data, train a method over a
//! task sequence, evaluate checkpoints, and merge run reports.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use rego_core::config::RunConfig;
use rego_core::data::{generate_tasks, read_dataset, write_dataset, SyntheticTaskSpec};
use rego_core::metrics::SequenceReport;
use rego_core::mlp::read_checkpoint;
use rego_core::runner::{evaluate_all, run_sequence, MODEL_FILE, REPORT_FILE};
use rego_core::surgery::BlendConfig;

#[derive(Parser)]
#[command(
    name = "rego",
    about = "Continual-learning lab: region-based optimization and baselines over drifting tasks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic drifting-task benchmark as binary datasets.
    GenData {
        #[arg(long, default_value_t = 4)]
        tasks: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 2000)]
        train_n: usize,
        #[arg(long, default_value_t = 1000)]
        test_n: usize,
        #[arg(long, default_value_t = 1.0)]
        drift: f64,
        #[arg(long, default_value_t = 1.25)]
        real_drift: f64,
        #[arg(long, default_value_t = 0.9)]
        real_fraction: f64,
        #[arg(long, default_value_t = 3)]
        fake_clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one method over the configured task sequence.
    Train {
        /// Key/value configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured method by registry name.
        #[arg(long)]
        method: Option<String>,
        /// Override the run seed (drives data generation and training).
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory for checkpoints, archives, and the report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model on a directory of test sets.
    Eval {
        /// Run directory holding the final model, or a model file itself.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of *.test.rgfd files (one per task, in name order).
        #[arg(long)]
        data: PathBuf,
    },
    /// Merge the reports of several runs into one table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            tasks,
            dim,
            train_n,
            test_n,
            drift,
            real_drift,
            real_fraction,
            fake_clusters,
            seed,
            out_dir,
        } => {
            let spec = SyntheticTaskSpec {
                tasks,
                dim,
                train_n,
                test_n,
                drift,
                real_drift,
                real_fraction,
                fake_clusters,
                seed,
                ..SyntheticTaskSpec::default()
            };
            let generated = generate_tasks(&spec)?;
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            for (i, task) in generated.iter().enumerate() {
                let stem = format!("task{:02}", i + 1);
                write_dataset(&task.train, &out_dir.join(format!("{stem}.train.rgfd")))?;
                write_dataset(&task.test, &out_dir.join(format!("{stem}.test.rgfd")))?;
            }
            println!(
                "wrote {} tasks ({} train / {} test samples each) to {}",
                generated.len(),
                train_n,
                test_n,
                out_dir.display()
            );
        }
        Command::Train {
            config,
            method,
            seed,
            out,
        } => {
            let mut config = match config {
                Some(path) => RunConfig::parse_file(&path)
                    .with_context(|| format!("loading {}", path.display()))?,
                None => RunConfig::default(),
            };
            if let Some(name) = method {
                config.method =
                    rego_core::method::MethodSpec::new(&name, config.method.params.clone())?;
            }
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let tasks = generate_tasks(&config.task_spec())?;
            let report = run_sequence(config, tasks, Some(&out))?;
            print!("{}", report.to_table());
            println!("artifacts: {}", out.display());
        }
        Command::Eval { checkpoint, data } => {
            let model_path = if checkpoint.is_dir() {
                checkpoint.join(MODEL_FILE)
            } else {
                checkpoint.clone()
            };
            let model = read_checkpoint(&model_path)
                .with_context(|| format!("loading {}", model_path.display()))?;
            let tasks = load_test_sets(&data)?;
            let tests: Vec<_> = tasks.iter().collect();
            let eers = evaluate_all(
                &model,
                &tests,
                &BlendConfig::binary(),
                rego_core::metrics::EerMode::ThresholdSweep,
            )?;
            let report = SequenceReport::summarize(
                SequenceReport::experience_columns(eers.len()),
                vec![("model".to_string(), eers)],
            )?;
            print!("{}", report.to_table());
        }
        Command::Report { runs, format } => {
            let mut columns: Option<Vec<String>> = None;
            let mut rows = Vec::new();
            for dir in &runs {
                let path = dir.join(REPORT_FILE);
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let report = SequenceReport::from_csv(&text)?;
                match &columns {
                    None => columns = Some(report.columns.clone()),
                    Some(c) if *c == report.columns => {}
                    Some(_) => bail!(
                        "{} covers different experiences than the first run",
                        dir.display()
                    ),
                }
                rows.extend(report.rows);
            }
            let merged = SequenceReport {
                columns: columns.expect("at least one run is required"),
                rows,
                seed: None,
                config_hash: None,
            };
            match format {
                Format::Table => print!("{}", merged.to_table()),
                Format::Csv => print!("{}", merged.to_csv()),
            }
        }
    }
    Ok(())
}

fn load_test_sets(dir: &Path) -> Result<Vec<rego_core::data::LabeledFeatureSet>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".test.rgfd"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no *.test.rgfd files in {}", dir.display());
    }
    names
        .iter()
        .map(|n| Ok(read_dataset(&dir.join(n))?))
        .collect()
}
