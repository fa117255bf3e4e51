use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lca_core::cluster::Algorithm;
use lca_core::config::LayerSelection;
use lca_core::error::Error;
use lca_core::pipeline;
use lca_core::{CoverageDenominator, RunConfig};

/// Latent concept analysis over layer-wise embeddings.
#[derive(Debug, Parser)]
#[command(name = "lca", version, about)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Replace existing stage output.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Layers to process: "all" or a comma-separated list.
    #[arg(long, global = true)]
    layers: Option<LayerSelection>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pool frame-level layers into word-level layers.
    Aggregate {
        /// Word boundary TSV.
        #[arg(long)]
        boundaries: Option<PathBuf>,
    },
    /// Cluster word-level layers into encoded concepts.
    Cluster(ClusterArgs),
    /// Score encoded concepts against taxonomies.
    Align(AlignArgs),
    /// Label concepts through a chat completion endpoint.
    Label(LabelArgs),
    /// Write alignment tables, curves and the concept report.
    Report {
        /// Member words listed per concept.
        #[arg(long)]
        top_n: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[arg(long = "k", short = 'k')]
    k: Option<usize>,
    #[arg(long, value_parser = parse_algorithm)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    min_count: Option<usize>,
    /// Occurrences kept per surface form (0 = all).
    #[arg(long)]
    max_per_type: Option<usize>,
    /// Scale vectors to unit length before clustering.
    #[arg(long)]
    normalize: bool,
}

#[derive(Debug, Args)]
struct AlignArgs {
    #[arg(long)]
    theta: Option<f64>,
    /// Tag file as NAME=PATH; repeatable.
    #[arg(long = "taxonomy", value_parser = parse_taxonomy_arg)]
    taxonomies: Vec<(String, PathBuf)>,
    /// Sentence label TSV for the polarity taxonomy.
    #[arg(long)]
    polarity_labels: Option<PathBuf>,
    #[arg(long, value_parser = parse_denominator)]
    coverage_denominator: Option<CoverageDenominator>,
}

#[derive(Debug, Args)]
struct LabelArgs {
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    max_words: Option<usize>,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    match s {
        "kmeans" => Ok(Algorithm::Kmeans),
        "ward" => Ok(Algorithm::Ward),
        _ => Err(format!("expected kmeans or ward, got {s:?}")),
    }
}

fn parse_denominator(s: &str) -> Result<CoverageDenominator, String> {
    match s {
        "encoded" => Ok(CoverageDenominator::Encoded),
        "linguistic" => Ok(CoverageDenominator::Linguistic),
        _ => Err(format!("expected encoded or linguistic, got {s:?}")),
    }
}

fn parse_taxonomy_arg(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=PATH, got {s:?}")),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::from_toml(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.run_dir {
        cfg.run_dir = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(l) = &cli.layers {
        cfg.layers = l.clone();
    }
    match &cli.command {
        Command::Aggregate { boundaries } => {
            if let Some(b) = boundaries {
                cfg.boundaries = Some(b.clone());
            }
        }
        Command::Cluster(a) => {
            cfg.k = a.k.unwrap_or(cfg.k);
            cfg.algorithm = a.algorithm.unwrap_or(cfg.algorithm);
            cfg.min_count = a.min_count.unwrap_or(cfg.min_count);
            cfg.max_per_type = a.max_per_type.unwrap_or(cfg.max_per_type);
            cfg.normalize |= a.normalize;
        }
        Command::Align(a) => {
            cfg.theta = a.theta.unwrap_or(cfg.theta);
            cfg.taxonomies.extend(a.taxonomies.iter().cloned());
            if let Some(p) = &a.polarity_labels {
                cfg.polarity_labels = Some(p.clone());
            }
            cfg.coverage_denominator = a.coverage_denominator.unwrap_or(cfg.coverage_denominator);
        }
        Command::Label(a) => {
            if let Some(u) = &a.base_url {
                cfg.labeler.base_url = u.clone();
            }
            if let Some(m) = &a.model {
                cfg.labeler.model = m.clone();
            }
            cfg.labeler.max_in_flight = a.max_in_flight.unwrap_or(cfg.labeler.max_in_flight);
            cfg.labeler.max_words = a.max_words.unwrap_or(cfg.labeler.max_words);
        }
        Command::Report { top_n } => {
            cfg.top_n = top_n.unwrap_or(cfg.top_n);
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Aggregate { .. } => {
            let s = pipeline::cmd_aggregate(&cfg, cli.force)?;
            println!("aggregated {} words into {} layers", s.words, s.layers.len());
        }
        Command::Cluster(_) => {
            for m in pipeline::cmd_cluster(&cfg, cli.force)? {
                println!(
                    "layer {}: {} points, K={}, objective {:.6}, {} iterations",
                    m.layer, m.num_points, m.k, m.objective, m.iterations
                );
            }
        }
        Command::Align(_) => {
            let s = pipeline::cmd_align(&cfg, cli.force)?;
            for r in &s.records {
                println!("layer {} {}: lambda {:.2}", r.layer, r.taxonomy, r.lambda);
            }
            for g in &s.gaps {
                println!("gap: layer {}: {}", g.layer, g.reason);
            }
        }
        Command::Label(_) => {
            let s = pipeline::cmd_label(&cfg, cli.force, None)?;
            println!(
                "{} labels ({} cached, {} network calls), {} failed",
                s.results.len(),
                s.cache_hits,
                s.network_calls,
                s.failures.len()
            );
            if let Some(e) = pipeline::label_failures(&s) {
                return Err(e);
            }
        }
        Command::Report { .. } => {
            let s = pipeline::cmd_report(&cfg, cli.force)?;
            for p in &s.written {
                println!("wrote {}", p.display());
            }
            for g in &s.gaps {
                println!("gap: layer {}: {}", g.layer, g.reason);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
