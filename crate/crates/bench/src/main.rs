use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tdnn_bench::config::ExperimentConfig;
use tdnn_bench::error::{BenchError, Result};
use tdnn_bench::experiments::{evaluate_once, run_accuracy_vs_classes, run_rmse_vs_q, run_rmse_vs_snr};
use tdnn_bench::models::{multi_grid, single_grid, train_models, ModelSet, TrainPlan};
use tdnn_bench::results::{aggregate_classes, aggregate_trials, emit_results, fmt_list, write_classes, write_file, write_plot, TrialResult, XAxis};
use tdnn_core::{FlatDnn64, QTdnn64, TreeModel64};

#[derive(Parser)]
#[command(name = "tdnn-bench", version, about = "Train and benchmark tree DOA classifiers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; missing keys come from the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.train.epochs=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Write a training grid (DOAs and features) as CSV.
    GenData {
        /// Sources per row; 1 gives the single-source leaf grid.
        #[arg(long, default_value_t = 1)]
        q: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every model the configured sweeps need and save them.
    Train {
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Estimate the DOAs of one simulated covariance with every method.
    Eval {
        #[arg(long = "theta", required = true, allow_negative_numbers = true)]
        theta: Vec<f64>,
        #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
        snr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Run a Monte-Carlo sweep.
    Bench {
        #[command(subcommand)]
        kind: BenchKind,
    },
    /// Describe a checkpoint.
    Inspect {
        #[command(subcommand)]
        what: InspectKind,
    },
}

#[derive(Subcommand, Clone, Copy)]
enum BenchKind {
    /// RMSE against SNR, single source.
    Snr,
    /// RMSE against the number of sources.
    Q,
    /// Classifier accuracy against the number of output classes.
    Classes,
}

#[derive(Subcommand)]
enum InspectKind {
    /// Print the structure of a tree, Q-TDNN, flat model or model-set directory.
    Model { path: PathBuf },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::resolve(cli.common.config.as_deref(), &cli.common.overrides)?;
    let out = cfg.out_dir();
    match cli.verb {
        Verb::GenData { q, out: path } => gen_data(&cfg, q, &path.unwrap_or_else(|| out.join(format!("train_q{q}.csv")))),
        Verb::Train { models } => {
            let dir = models.unwrap_or_else(|| out.join("models"));
            let (set, summary) = train_models(&cfg, &TrainPlan::all(&cfg), |m| eprintln!("{m}"))?;
            set.save(&dir)?;
            write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
            let text = toml::to_string_pretty(&summary).map_err(|e| BenchError::Results(e.to_string()))?;
            write_file(&dir.join("summary.toml"), text.as_bytes())?;
            print!("{text}");
            Ok(())
        }
        Verb::Eval { theta, snr, seed, models } => {
            let set = obtain_models(&cfg, models.as_deref(), &out, &TrainPlan::all(&cfg))?;
            for (m, est) in evaluate_once(&cfg, &set, &theta, snr, seed)? {
                match est {
                    Ok(e) => println!("{:<12} {}", m.id(), fmt_list(&e)),
                    Err(err) => println!("{:<12} failed: {err}", m.id()),
                }
            }
            Ok(())
        }
        Verb::Bench { kind } => bench(&cfg, kind, &out),
        Verb::Inspect { what: InspectKind::Model { path } } => inspect(&path),
    }
}

/// Loads `dir` (or `<out>/models`) when present, trains whatever is missing
/// and saves the completed set back.
fn obtain_models(cfg: &ExperimentConfig, dir: Option<&Path>, out: &Path, plan: &TrainPlan) -> Result<ModelSet> {
    let dir = dir.map(Path::to_path_buf).unwrap_or_else(|| out.join("models"));
    let saved = dir.join("config.toml");
    if saved.is_file() {
        let text = std::fs::read_to_string(&saved)?;
        let prior: ExperimentConfig = toml::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", saved.display())))?;
        if prior.model != cfg.model {
            return Err(BenchError::Config(format!("models in {} were trained with a different model config", dir.display())));
        }
    }
    let mut set = if dir.is_dir() { ModelSet::load(&dir)? } else { ModelSet::default() };
    let missing = set.missing(plan);
    if !missing.is_empty() {
        eprintln!("training missing models");
        let (extra, _) = train_models(cfg, &missing, |m| eprintln!("{m}"))?;
        set.absorb(extra);
        set.save(&dir)?;
        write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    }
    Ok(set)
}

fn bench(cfg: &ExperimentConfig, kind: BenchKind, out: &Path) -> Result<()> {
    let config_text = cfg.to_toml();
    let (name, axis, rows): (&str, XAxis, Vec<TrialResult>) = match kind {
        BenchKind::Snr => {
            let set = obtain_models(cfg, None, out, &TrainPlan::snr(cfg))?;
            ("snr", XAxis::Snr, run_rmse_vs_snr(cfg, &set)?)
        }
        BenchKind::Q => {
            let set = obtain_models(cfg, None, out, &TrainPlan::q(cfg))?;
            ("q", XAxis::Q, run_rmse_vs_q(cfg, &set)?)
        }
        BenchKind::Classes => {
            let rows = run_accuracy_vs_classes(cfg, |m| eprintln!("{m}"))?;
            let mut buf = Vec::new();
            write_classes(&mut buf, &config_text, &rows)?;
            write_file(&out.join("classes.csv"), &buf)?;
            let agg = aggregate_classes(&rows);
            let mut buf = Vec::new();
            write_plot(&mut buf, "classes", &config_text, &agg)?;
            write_file(&out.join("classes_plot.csv"), &buf)?;
            for p in &agg {
                println!("{:<10} classes={:<4} accuracy={:.4} ±{:.4} (n={})", p.series, p.x, p.mean, p.mean_ci95, p.n);
            }
            return Ok(());
        }
    };
    emit_results(&out.join(format!("{name}.csv")), name, &config_text, &rows)?;
    let agg = aggregate_trials(&rows, axis);
    let mut buf = Vec::new();
    write_plot(&mut buf, name, &config_text, &agg)?;
    write_file(&out.join(format!("{name}_plot.csv")), &buf)?;
    for p in &agg {
        println!("{:<12} x={:<6} rmse={:.4} ±{:.4} (n={}, failed={})", p.series, p.x, p.rmse, p.rmse_ci95, p.n, p.failed);
    }
    Ok(())
}

fn gen_data(cfg: &ExperimentConfig, q: usize, path: &Path) -> Result<()> {
    let grid = if q == 1 { single_grid(cfg, &cfg.model.tree_spec()?)? } else { multi_grid(cfg, q)? };
    let mut buf = Vec::new();
    for line in cfg.to_toml().lines() {
        buf.extend_from_slice(format!("# config: {line}\n").as_bytes());
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header = vec!["doas".to_string()];
        header.extend((0..grid.feature_dim()).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for (doas, row) in grid.doas().iter().zip(grid.features().rows()) {
            let mut rec = vec![fmt_list(doas)];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    write_file(path, &buf)?;
    println!("{} rows x {} features -> {}", grid.len(), grid.feature_dim(), path.display());
    Ok(())
}

fn describe_tree(label: &str, t: &TreeModel64) -> Result<()> {
    let spec = t.spec();
    let r = spec.complexity_report(t.input_dim())?;
    println!("{label}: fanouts {:?}, domain {:?}, resolution {}°", spec.fanouts(), spec.domain(), spec.resolution());
    println!("  nodes per level {:?}, model classes {}, flat equivalent {}, MACs per estimate {}", spec.group_counts(), r.model_classes, r.flat_equivalent, r.mac_count);
    println!("  node widths {:?}, decoder {:?}", t.levels()[0][0].spec().sizes(), t.decoder());
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let manifest = std::fs::read_to_string(path.join("manifest.toml")).ok();
    let format = manifest
        .as_deref()
        .and_then(|m| m.parse::<toml::Table>().ok())
        .and_then(|t| t.get("format").and_then(|f| f.as_str().map(str::to_string)));
    match format.as_deref() {
        Some("tdnn-tree") => describe_tree(&path.display().to_string(), &TreeModel64::load(path)?),
        Some("flat-dnn") => {
            let f = FlatDnn64::load(path)?;
            println!("{}: flat classifier, {} classes, widths {:?}", path.display(), f.num_classes(), f.model().spec().sizes());
            Ok(())
        }
        _ if path.join("qtdnn.toml").is_file() => {
            let q = QTdnn64::load(path)?;
            println!("{}: Q-TDNN with {} branches", path.display(), q.num_sources());
            describe_tree("  branch", &q.branches()[0])
        }
        _ if path.is_dir() => {
            let set = ModelSet::load(path)?;
            if let Some(t) = &set.tdnn {
                describe_tree("tdnn", t)?;
            }
            if let Some(t) = &set.tdnn2 {
                describe_tree("tdnn2", t)?;
            }
            if let Some(f) = &set.flat {
                println!("flat_dnn: {} classes, widths {:?}", f.num_classes(), f.model().spec().sizes());
            }
            for (q, mm) in &set.multi {
                println!("Q={q}: q-tdnn {}, flat {}", mm.qtdnn.is_some(), mm.flat.is_some());
            }
            Ok(())
        }
        _ => Err(BenchError::Config(format!("{} is not a model checkpoint", path.display()))),
    }
}
