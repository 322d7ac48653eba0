use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pointner_core::corpus::{self, Schema, Sentence};
use pointner_core::runner::{self, ExperimentConfig, SweepConfig};
use pointner_core::select::{self, ClusterOptions};
use pointner_core::{Embedder, Execution, HashedTrigramEncoder};

#[derive(Parser)]
#[command(name = "pointner", version, about = "Point-entity prompting experiments for LLM-based NER")]
struct Cli {
    /// Force single-threaded execution.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Bio,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a BIO/CoNLL file to sentence JSONL.
    Ingest {
        input: PathBuf,
        /// Comma separated entity types, in prompt order.
        #[arg(long, default_value = "PER,ORG,LOC,MISC")]
        schema: String,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Build per-type unique entity pools from a split.
    Pools {
        input: PathBuf,
        #[arg(long, default_value = "PER,ORG,LOC,MISC")]
        schema: String,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Select point entities for one type with the hashed-trigram encoder.
    Select {
        input: PathBuf,
        #[arg(long, default_value = "PER,ORG,LOC,MISC")]
        schema: String,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
        #[arg(long = "type")]
        etype: String,
        #[arg(short = 'a', long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 1)]
        tau: usize,
        /// cluster or random
        #[arg(long, default_value = "cluster")]
        method: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = HashedTrigramEncoder::DEFAULT_DIM)]
        dim: usize,
    },
    /// Run one experiment from a TOML config.
    Run {
        config: PathBuf,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a config grid from a TOML sweep file.
    Sweep {
        config: PathBuf,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Rebuild results.csv and summary.md from stored runs.
    Report {
        #[arg(default_value = "out")]
        out: PathBuf,
    },
    /// Sentence and unique-entity counts of a train/test pair.
    Stats {
        train: PathBuf,
        test: PathBuf,
        #[arg(long, default_value = "PER,ORG,LOC,MISC")]
        schema: String,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
    },
}

fn schema(list: &str) -> Result<Schema> {
    let names: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    Ok(Schema::from_names(&names)?)
}

fn read_split(path: &Path, schema: &Schema, format: Format, split: &str) -> Result<Vec<Sentence>> {
    let reader = BufReader::new(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
    Ok(match format {
        Format::Jsonl => corpus::read_jsonl(reader)?,
        Format::Bio => {
            let import = corpus::parse_bio(reader, schema, split)?;
            for w in &import.warnings {
                tracing::warn!("{}: {w}", path.display());
            }
            import.sentences
        }
    })
}

fn print_json<T: serde::Serialize>(value: &T, output: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match output {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };

    match cli.command {
        Command::Ingest { input, schema: s, split, output } => {
            let schema = schema(&s)?;
            let sentences = read_split(&input, &schema, Format::Bio, &split)?;
            let file = fs::File::create(&output).with_context(|| format!("creating {}", output.display()))?;
            let mut w = BufWriter::new(file);
            corpus::write_jsonl(&mut w, &sentences)?;
            w.flush()?;
            eprintln!("wrote {} sentences to {}", sentences.len(), output.display());
        }
        Command::Pools { input, schema: s, format, output } => {
            let schema = schema(&s)?;
            let sentences = read_split(&input, &schema, format, "train")?;
            print_json(&corpus::unique_entities(&sentences, &schema), output.as_deref())?;
        }
        Command::Select { input, schema: s, format, etype, points, tau, method, seed, dim } => {
            let schema = schema(&s)?;
            let sentences = read_split(&input, &schema, format, "train")?;
            let pools = corpus::unique_entities(&sentences, &schema);
            let Some(pool) = pools.get(&etype) else { bail!("type {etype:?} is not in the schema") };
            let sel = match method.as_str() {
                "random" => select::select_points_random(pool, points, seed)?,
                "cluster" => {
                    let embedder = Embedder::new(Arc::new(HashedTrigramEncoder::new(dim))).with_execution(exec);
                    let opts = ClusterOptions { exec, ..ClusterOptions::seeded(seed) };
                    if tau == 1 {
                        select::select_points(pool, &embedder, points, &opts)?
                    } else {
                        select::select_points_tau(pool, &embedder, points, tau, &opts)?
                    }
                }
                other => bail!("unknown selection method {other:?} (expected cluster or random)"),
            };
            print_json(&sel, None)?;
        }
        Command::Run { config, out } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = ExperimentConfig::from_toml(&text)?;
            let dataset = runner::load_dataset(&cfg.dataset)?;
            let client = runner::build_client(&cfg, &dataset)?;
            let embedder = runner::build_embedder(&cfg, exec)?;
            let ctx = runner::RunContext { dataset: &dataset, client: &client, embedder: &embedder, exec };
            let result = runner::run_with(&cfg, &ctx, &out)?;
            let rep = runner::write_report(&out, std::slice::from_ref(&result))?;
            print!("{}", rep.summary);
            eprintln!("artifacts in {}", out.join(&result.run_dir).display());
            if result.seeds.iter().all(|s| s.report.is_none()) {
                bail!("every seed failed");
            }
        }
        Command::Sweep { config, out } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let sweep = SweepConfig::from_toml(&text)?;
            let results = runner::sweep_with(&sweep, &out, exec)?;
            print!("{}", runner::summary_table(&results));
        }
        Command::Report { out } => {
            let results = runner::collect_results(&out)?;
            let rep = runner::write_report(&out, &results)?;
            print!("{}", rep.summary);
        }
        Command::Stats { train, test, schema: s, format } => {
            let schema = schema(&s)?;
            let train = read_split(&train, &schema, format, "train")?;
            let test = read_split(&test, &schema, format, "test")?;
            let ds = corpus::Dataset { schema, train, test };
            ds.validate()?;
            print_json(&corpus::stats(&ds), None)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use pointner_core::Method;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn schema_list() {
        assert_eq!(schema(" PER, LOC ,").unwrap().names().collect::<Vec<_>>(), ["PER", "LOC"]);
        assert!(schema("PER,PER").is_err());
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("picl_tau".parse::<Method>().unwrap(), Method::PiclTau);
    }
}
