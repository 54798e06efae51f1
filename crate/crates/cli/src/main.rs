use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use clusterwm_core::clustering::{ClusterMap, KMeans};
use clusterwm_core::reweight::ReweightConfig;
use clusterwm_core::TokenId;
use clusterwm_harness::config::ExperimentConfig;
use clusterwm_harness::experiments::{
    robustness_attacks, run_ablation_h, run_detectability, run_distortion_audit, run_robustness, AuditReport,
};
use clusterwm_harness::harness::{Detectors, Embeddings};
use clusterwm_harness::table::{write_json, write_table, ResultTable};
use clusterwm_harness::{HarnessError, World};

#[derive(Parser, Debug)]
#[command(name = "clusterwm", version, about = "Cluster-aligned distortion-free watermarking for token streams")]
struct Cli {
    /// Experiment config (JSON). Defaults apply to every omitted field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Format of the result printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Watermark key; overrides the config.
    #[arg(long, global = true)]
    key: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the token clustering and write `cluster_map.json`.
    Cluster {
        /// Cluster count; overrides the config.
        #[arg(long)]
        h: Option<usize>,
    },
    /// Generate one watermarked sequence to a token file.
    Generate {
        /// Method name from the config's method list (e.g. aligned_is, kgw).
        #[arg(long)]
        method: String,
        /// Cluster map to use instead of fitting one.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Prompt tokens (at least the n-gram length).
        #[arg(long, value_delimiter = ',')]
        prompt: Option<Vec<u32>>,
        /// Generated length; defaults to the config's seq_len.
        #[arg(long)]
        length: Option<usize>,
        /// Token file to write (newline-separated integers); defaults to `<out>/tokens.txt`.
        #[arg(long)]
        tokens_out: Option<PathBuf>,
    },
    /// Detect a watermark in a token file and print the report.
    Detect {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        fpr: f64,
    },
    /// Distortion-freeness audit of every configured method.
    AuditDistortion,
    /// TPR at guaranteed FPR for every configured method.
    RunDetectability,
    /// TPR under the attack grid.
    RunRobustness,
    /// Aligned-IS detectability across cluster counts.
    AblateH {
        /// Cluster counts; overrides the config.
        #[arg(long, value_delimiter = ',')]
        h_grid: Option<Vec<usize>>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    if let Some(key) = &cli.key {
        cfg.watermark.key = Some(key.clone());
    }
    Ok(cfg)
}

fn find_method(cfg: &ExperimentConfig, name: &str) -> Result<ReweightConfig> {
    cfg.methods().into_iter().find(|m| m.name() == name).ok_or_else(|| {
        let known: Vec<_> = cfg.methods().iter().map(|m| m.name()).collect();
        HarnessError::Usage(format!("method {name:?} not configured; configured: {}", known.join(", "))).into()
    })
}

fn read_tokens(path: &Path) -> Result<Vec<TokenId>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<u32>().map(TokenId).map_err(|e| {
                HarnessError::Config(format!("{} line {}: {e}", path.display(), i + 1)).into()
            })
        })
        .collect()
}

fn write_tokens(path: &Path, tokens: &[TokenId]) -> Result<()> {
    let mut text = String::with_capacity(tokens.len() * 4);
    for t in tokens {
        text.push_str(&t.0.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    Ok(())
}

fn load_map(path: Option<&PathBuf>, cfg: &ExperimentConfig, emb: &Embeddings) -> Result<ClusterMap> {
    Ok(match path {
        Some(p) => ClusterMap::load(p).map_err(HarnessError::from)?,
        None => emb.fit(&cfg.cluster, cfg.cluster.h)?,
    })
}

fn print_table(table: &ResultTable, format: Format) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match format {
        Format::Csv => out.write_all(table.to_csv_string().as_bytes())?,
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(table)?)?,
    }
    Ok(())
}

fn audit_csv(report: &AuditReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "params", "check", "value", "threshold", "passed", "expected"])
        .expect("in-memory csv");
    for r in &report.rows {
        w.write_record([
            r.method.clone(),
            r.params.clone(),
            r.check.clone(),
            clusterwm_harness::table::fmt_f64(r.value),
            clusterwm_harness::table::fmt_f64(r.threshold),
            r.passed.to_string(),
            r.expected.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = load_config(&cli)?;
    let out_dir = cfg.output.clone();
    match &cli.command {
        Command::Cluster { h } => {
            let h = h.unwrap_or(cfg.cluster.h);
            let emb = Embeddings::load(&cfg.model)?;
            let km = KMeans {
                max_iters: cfg.cluster.max_iters,
                tol: cfg.cluster.tol,
                ..KMeans::new(h, cfg.cluster.seed)
            };
            let fit = km.fit(&emb.matrix).map_err(HarnessError::from)?;
            let map = if cfg.cluster.relabel { fit.map.relabel_separated() } else { fit.map.clone() };
            ensure_dir(&out_dir)?;
            let path = out_dir.join("cluster_map.json");
            map.save(&path).map_err(HarnessError::from)?;
            println!("inertia {}", fit.inertia());
            println!("iterations {} converged {}", fit.iterations, fit.converged);
            let sizes: Vec<String> = map.cluster_sizes().iter().map(|s| s.to_string()).collect();
            println!("cluster_sizes {}", sizes.join(","));
            eprintln!("wrote {}", path.display());
        }
        Command::Generate {
            method,
            map,
            prompt,
            length,
            tokens_out,
        } => {
            let method = find_method(&cfg, method)?;
            let world = World::build(&cfg)?;
            let map = Arc::new(load_map(map.as_ref(), &cfg, &world.embeddings)?);
            let scheme = world.scheme(&method, &map)?;
            let n = world.ngram_n();
            let prompt: Vec<TokenId> = match prompt {
                Some(p) => p.iter().copied().map(TokenId).collect(),
                None => vec![TokenId(0); n],
            };
            if prompt.len() < n {
                return Err(HarnessError::Usage(format!("prompt needs at least {n} tokens")).into());
            }
            let mut session = clusterwm_core::generate::GenerationSession::new(world.key.clone(), n, scheme, cfg.seed)
                .map_err(HarnessError::from)?;
            let body = clusterwm_core::generate::generate(
                &world.model,
                &prompt,
                length.unwrap_or(cfg.seq_len),
                &mut session,
            )
            .map_err(HarnessError::from)?;
            let mut seq = prompt;
            seq.extend(body);
            let path = match tokens_out {
                Some(p) => p.clone(),
                None => {
                    ensure_dir(&out_dir)?;
                    out_dir.join("tokens.txt")
                }
            };
            write_tokens(&path, &seq)?;
            eprintln!("wrote {} tokens to {}", seq.len(), path.display());
        }
        Command::Detect {
            tokens,
            method,
            map,
            fpr,
        } => {
            let method = find_method(&cfg, method)?;
            let key = cfg.key()?;
            let seq = read_tokens(tokens)?;
            // Only embeddings or a stored map are read; the model is never built here.
            let (map, vocab) = match map {
                Some(p) => {
                    let m = ClusterMap::load(p).map_err(HarnessError::from)?;
                    let v = m.n_tokens();
                    (m, v)
                }
                None => {
                    let emb = Embeddings::load(&cfg.model)?;
                    (load_map(None, &cfg, &emb)?, emb.vocab_size())
                }
            };
            if !(*fpr > 0.0 && *fpr < 1.0) {
                return Err(HarnessError::Usage(format!("--fpr must lie in (0, 1), got {fpr}")).into());
            }
            let det = Detectors::new(&cfg, key, vocab).for_method(&method, &Arc::new(map));
            let report = det.score(&seq)?.report(*fpr);
            match cli.format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
                Format::Csv => {
                    println!("strategy,score,t,threshold,p_hoeffding,p_exact,verdict,fpr");
                    println!(
                        "{},{},{},{},{},{},{},{}",
                        report.strategy,
                        report.score,
                        report.t,
                        report.threshold,
                        report.p_hoeffding,
                        report.p_exact,
                        report.verdict,
                        report.fpr
                    );
                }
            }
        }
        Command::AuditDistortion => {
            let world = World::build(&cfg)?;
            let report = run_distortion_audit(&world)?;
            ensure_dir(&out_dir)?;
            write_json(&out_dir, "audit_distortion", &report)?;
            let csv_path = out_dir.join("audit_distortion.csv");
            std::fs::write(&csv_path, audit_csv(&report)).map_err(|e| HarnessError::io(&csv_path, e))?;
            match cli.format {
                Format::Csv => print!("{}", audit_csv(&report)),
                Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::RunDetectability => {
            let world = World::build(&cfg)?;
            let table = run_detectability(&world)?;
            write_table(&out_dir, "detectability", &table)?;
            print_table(&table, cli.format)?;
        }
        Command::RunRobustness => {
            let world = World::build(&cfg)?;
            let table = run_robustness(&world, &robustness_attacks(&world)?)?;
            write_table(&out_dir, "robustness", &table)?;
            print_table(&table, cli.format)?;
        }
        Command::AblateH { h_grid } => {
            let world = World::build(&cfg)?;
            let grid = h_grid.clone().unwrap_or_else(|| cfg.ablation.h_grid.clone());
            let table = run_ablation_h(&world, &grid)?;
            write_table(&out_dir, "ablation_h", &table)?;
            print_table(&table, cli.format)?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(h) = err.downcast_ref::<HarnessError>() {
        return h.exit_code() as u8;
    }
    if let Some(c) = err.downcast_ref::<clusterwm_core::Error>() {
        return if matches!(c, clusterwm_core::Error::Io(_)) { 3 } else { 2 };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    4
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
