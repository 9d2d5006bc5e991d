use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use chrono::NaiveDate;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use textseries::evaluation::{AblationPlan, MetricReport};
use textseries::pipeline::{Filter, Pipeline, PipelineError, ProviderKind, RunConfig};
use textseries::synthetic::{generate, SyntheticSpec};

const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "textseries", version, about = "News and filings paired with price series, plus forecasting ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and validate the corpus.
    Ingest(Common),
    /// Extract company profiles from filings.
    ParseFilings(Common),
    /// Label articles with level and sector.
    Classify(Common),
    /// Train the sector-contrastive embedding adapter.
    FinetuneEmbedding(Common),
    /// Retrieve the top-N articles per company and day.
    Retrieve(Common),
    /// Summarize retrieved news into the paired dataset.
    Summarize(Common),
    /// Run every stage up to the paired dataset.
    BuildDataset(Common),
    /// Fit each configured model on the full dataset.
    Train(Common),
    /// Test metrics, hit rates and the case study.
    Evaluate(Common),
    /// Run an ablation plan over arms, models and seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "multilevel", value_parser = ["multilevel", "retrieval", "pairing"])]
        plan: String,
    },
    /// Rebuild an ablation report from its per-cell files.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "multilevel", value_parser = ["multilevel", "retrieval", "pairing"])]
        plan: String,
    },
    /// Write a deterministic synthetic corpus with mock fixtures and a config.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        signal: f64,
        #[arg(long, default_value_t = 3)]
        companies: usize,
        #[arg(long, default_value_t = 2)]
        sectors: usize,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    provider: Option<Provider>,
    /// Restrict to these tickers (repeat or comma-separate).
    #[arg(long, value_delimiter = ',')]
    ticker: Vec<String>,
    #[arg(long)]
    from: Option<NaiveDate>,
    #[arg(long)]
    to: Option<NaiveDate>,
    /// Training seeds, replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Provider {
    Real,
    Mock,
}

impl Common {
    fn open(&self) -> Result<Pipeline, PipelineError> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(p) = self.provider {
            config.provider = match p {
                Provider::Real => ProviderKind::Real,
                Provider::Mock => ProviderKind::Mock,
            };
        }
        if !self.seed.is_empty() {
            config.seeds = self.seed.clone();
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        if let Some(cache) = &self.cache {
            config.cache_dir = cache.clone();
        }
        let filter = Filter {
            tickers: (!self.ticker.is_empty()).then(|| self.ticker.iter().cloned().collect::<BTreeSet<_>>()),
            from: self.from,
            to: self.to,
        };
        Pipeline::open(config, filter)
    }
}

fn print_report(report: &MetricReport) {
    println!("model\tarm\tmse_mean\tmse_std\tnorm_mse");
    for c in &report.cells {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!("{}\t{}\t{}\t{}\t{}", c.model, c.arm, f(c.mse_mean), f(c.mse_std), f(c.norm_mse));
    }
}

fn plan(name: &str) -> AblationPlan {
    AblationPlan::by_name(name).expect("plan names are checked by the parser")
}

fn run_stage(pipeline: &Pipeline, command: &Command) -> Result<(), PipelineError> {
    match command {
        Command::Ingest(_) => {
            let corpus = pipeline.ingest()?;
            println!("{} articles, {} trading days", corpus.articles.len(), corpus.calendar.days().len());
        }
        Command::ParseFilings(_) => println!("{} filings parsed", pipeline.run_parse_filings()?),
        Command::Classify(_) => println!("{} articles classified", pipeline.run_classify()?),
        Command::FinetuneEmbedding(_) => pipeline.run_finetune_embedding()?,
        Command::Retrieve(_) => pipeline.run_retrieve()?,
        Command::Summarize(_) | Command::BuildDataset(_) => {
            let manifest = match command {
                Command::Summarize(_) => pipeline.run_summarize()?,
                _ => pipeline.build_dataset()?,
            };
            for e in &manifest.tickers {
                println!("{}\t{}\t{}", e.ticker, e.days, e.sha256);
            }
        }
        Command::Train(_) => {
            for (model, val) in pipeline.train()? {
                println!("{model}\tval_mse {val:.6}");
            }
        }
        Command::Evaluate(_) => {
            for m in pipeline.evaluate()? {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
                println!("{}\t{}\t{}\tmse {}\tmae {}", m.model, m.arm, m.seed, f(m.mse), f(m.mae));
            }
        }
        Command::Ablate { plan: name, .. } => print_report(&pipeline.ablate(&plan(name))?),
        Command::Report { plan: name, .. } => print_report(&pipeline.report(name)?),
        Command::Generate { .. } => unreachable!(),
    }
    Ok(())
}

fn common(command: &Command) -> Option<&Common> {
    match command {
        Command::Ingest(c)
        | Command::ParseFilings(c)
        | Command::Classify(c)
        | Command::FinetuneEmbedding(c)
        | Command::Retrieve(c)
        | Command::Summarize(c)
        | Command::BuildDataset(c)
        | Command::Train(c)
        | Command::Evaluate(c) => Some(c),
        Command::Ablate { common, .. } | Command::Report { common, .. } => Some(common),
        Command::Generate { .. } => None,
    }
}

fn write_synthetic(out: &Path, spec: &SyntheticSpec) -> anyhow::Result<()> {
    let corpus = generate(spec)?;
    corpus.write(out).with_context(|| format!("writing {}", out.display()))?;
    let config = RunConfig::for_synthetic(Path::new("."), Path::new("run"), Path::new("cache"));
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&config)? + "\n")?;
    println!("{} articles, {} companies -> {}", corpus.articles.len(), corpus.prices.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    if let Command::Generate { out, seed, signal, companies, sectors } = &cli.command {
        let spec = SyntheticSpec {
            seed: *seed,
            signal_strength: *signal,
            n_companies: *companies,
            n_sectors: *sectors,
            ..Default::default()
        };
        return match write_synthetic(out, &spec) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        };
    }

    let common = common(&cli.command).expect("non-generate commands carry common flags");
    let pipeline = match common.open() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = run_stage(&pipeline, &cli.command);
    let s = pipeline.stats();
    eprintln!(
        "provider calls: llm {} (cache hits {}), embedding {}",
        s.llm_calls, s.llm_cache_hits, s.embedding_calls
    );
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
