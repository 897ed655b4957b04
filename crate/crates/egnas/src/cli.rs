//! Command-line surface: data generation, search, retraining, evaluation,
//! ablations and reporting. Every command is a pure function of its config
//! and seed; re-running overwrites outputs identically.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{GeneratorConfig, RunConfig};
use crate::datagen::{derive_seed, gen_graphreg, gen_sbm, gen_tsp, GraphRegParams, SbmParams, TspParams};
use crate::error::{Error, Result};
use crate::genotype::{EdgeOpKind, EntityOpKind, Genotype};
use crate::graph::Graph;
use crate::harness::{ablate, export_dot, stats_csv, topology_stats, AblationKind};
use crate::jsonl::{load_jsonl, save_jsonl};
use crate::network::Model;
use crate::search::{evaluate, search, SearchOutcome};
use crate::train::{load_checkpoint, save_checkpoint, train_model, TrainOutcome};

#[derive(Parser)]
#[command(name = "egnas", version, about = "Edge-featured graph neural architecture search")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate train/val/test JSONL splits plus a provenance record
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search the supernet and derive a genotype
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain a derived genotype from scratch and report test metrics
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset file
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rewrite a genotype: replace-entity:<Op>, replace-edge:<Op>,
    /// sequentialize, or random:<seed>
    Ablate {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the dual DAGs of a genotype as DOT
    ExportDot {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-cell topology statistics as CSV
    Stats {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::GenData { config, seed, out } => {
            let cfg = load_config(&config, seed, out)?;
            let files = cmd_gen_data(&cfg)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Search { config, seed, out } => {
            let cfg = load_config(&config, seed, out)?;
            let outcome = cmd_search(&cfg)?;
            println!("{}", cfg.out_dir.join("genotype.json").display());
            let last = outcome.logs.last();
            if let Some(l) = last {
                println!("final: val_loss={} metric={}", l.val_loss, l.metric);
            }
            Ok(())
        }
        Command::Train { config, genotype, seed, out } => {
            let cfg = load_config(&config, seed, out)?;
            let report = cmd_train(&cfg, &genotype)?;
            println!(
                "best_epoch={} best_val_loss={} test_loss={} test_metric={}",
                report.best_epoch, report.best_val_loss, report.test_loss, report.test_metric
            );
            Ok(())
        }
        Command::Eval { checkpoint, data, out } => {
            let (loss, metric) = cmd_eval(&checkpoint, &data, out.as_deref())?;
            println!("loss={loss} metric={metric}");
            Ok(())
        }
        Command::Ablate { genotype, kind, out } => {
            let path = cmd_ablate(&genotype, &kind, &out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::ExportDot { genotype, out } => {
            let path = cmd_export_dot(&genotype, &out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Stats { genotype, out } => {
            let csv = cmd_stats(&genotype, out.as_deref())?;
            print!("{csv}");
            Ok(())
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn env_threads() -> usize {
    std::env::var("EGNAS_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

// ── gen-data ─────────────────────────────────────────────────────────────

fn generate_split(gen: &GeneratorConfig, count: usize, seed: u64) -> Result<Vec<Graph>> {
    match *gen {
        GeneratorConfig::Sbm {
            nodes_per_community,
            num_communities,
            p_intra,
            p_inter,
            feature_noise,
            ..
        } => gen_sbm(
            &SbmParams {
                num_graphs: count,
                nodes_per_community,
                num_communities,
                p_intra,
                p_inter,
                feature_noise,
            },
            seed,
        ),
        GeneratorConfig::Tsp { num_cities, knn_k, .. } => {
            gen_tsp(&TspParams { num_graphs: count, num_cities, knn_k }, seed)
        }
        GeneratorConfig::Graphreg { min_nodes, max_nodes, edge_prob, .. } => gen_graphreg(
            &GraphRegParams { num_graphs: count, min_nodes, max_nodes, edge_prob },
            seed,
        ),
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    seed: u64,
    generator_version: &'a str,
    params: &'a GeneratorConfig,
}

/// Write `<kind>.{train,val,test}.jsonl` and `<kind>.provenance.json` into
/// the output directory. Split generation is independent per file;
/// EGNAS_THREADS caps how many files are produced in parallel.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let gen = cfg
        .generator
        .as_ref()
        .ok_or_else(|| Error::config("gen-data requires a \"generator\" section"))?;
    let kind = gen.kind_name();
    let (n_train, n_val, n_test) = gen.split_sizes();
    std::fs::create_dir_all(&cfg.out_dir)?;

    let jobs: Vec<(String, usize, u64)> = vec![
        (format!("{kind}.train.jsonl"), n_train, derive_seed(cfg.seed, 0)),
        (format!("{kind}.val.jsonl"), n_val, derive_seed(cfg.seed, 1)),
        (format!("{kind}.test.jsonl"), n_test, derive_seed(cfg.seed, 2)),
    ];
    let threads = env_threads().min(jobs.len());
    let chunk_size = jobs.len().div_ceil(threads);
    let mut files: Vec<PathBuf> = std::thread::scope(|scope| -> Result<Vec<PathBuf>> {
        let mut handles = Vec::new();
        for chunk in jobs.chunks(chunk_size) {
            handles.push(scope.spawn(move || -> Result<Vec<PathBuf>> {
                let mut produced = Vec::new();
                for (name, count, seed) in chunk {
                    let graphs = generate_split(gen, *count, *seed)?;
                    let path = cfg.out_dir.join(name);
                    save_jsonl(&path, &graphs)?;
                    produced.push(path);
                }
                Ok(produced)
            }));
        }
        let mut all = Vec::new();
        for h in handles {
            all.extend(h.join().expect("generator thread panicked")?);
        }
        Ok(all)
    })?;

    let prov = Provenance { seed: cfg.seed, generator_version: env!("CARGO_PKG_VERSION"), params: gen };
    let prov_path = cfg.out_dir.join(format!("{kind}.provenance.json"));
    std::fs::write(&prov_path, serde_json::to_string_pretty(&prov).expect("provenance serializes"))?;
    files.push(prov_path);
    files.sort();
    Ok(files)
}

// ── search ───────────────────────────────────────────────────────────────

fn input_dims(graphs: &[Graph]) -> Result<(usize, usize)> {
    let first = graphs.first().ok_or_else(|| Error::data("dataset is empty"))?;
    Ok((first.node_features.cols, first.edge_features.cols))
}

/// Even/odd interleave of the training file: even indices optimize the
/// weights, odd indices optimize the alphas.
pub fn split_even_odd(graphs: &[Graph]) -> (Vec<Graph>, Vec<Graph>) {
    let even = graphs.iter().step_by(2).cloned().collect();
    let odd = graphs.iter().skip(1).step_by(2).cloned().collect();
    (even, odd)
}

pub fn cmd_search(cfg: &RunConfig) -> Result<SearchOutcome> {
    let data = cfg.data_checked()?;
    let train_all = load_jsonl(&data.train)?;
    let (s_train, s_val) = split_even_odd(&train_all);
    let (d_in_v, d_in_e) = input_dims(&train_all)?;
    let model = Model::supernet(cfg.task, cfg.network, d_in_v, d_in_e, cfg.seed)?;
    let outcome = search(&model, &s_train, &s_val, &cfg.search, cfg.seed)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = String::from("epoch,train_loss,val_loss,metric,lr\n");
    for l in &outcome.logs {
        csv.push_str(&format!("{},{},{},{},{}\n", l.epoch, l.train_loss, l.val_loss, l.metric, l.lr));
    }
    std::fs::write(cfg.out_dir.join("search_log.csv"), csv)?;
    for (k, snap) in outcome.snapshots.iter().enumerate() {
        std::fs::write(cfg.out_dir.join(format!("genotype_epoch_{k}.json")), snap.to_json())?;
    }
    std::fs::write(cfg.out_dir.join("genotype.json"), outcome.genotype.to_json())?;
    Ok(outcome)
}

// ── train / eval ─────────────────────────────────────────────────────────

pub struct TrainReport {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test_loss: f64,
    pub test_metric: f64,
    pub outcome: TrainOutcome,
}

pub fn cmd_train(cfg: &RunConfig, genotype_path: &Path) -> Result<TrainReport> {
    let data = cfg.data_checked()?;
    let genotype = Genotype::from_json(&std::fs::read_to_string(genotype_path).map_err(|e| {
        Error::config(format!("cannot read genotype {}: {e}", genotype_path.display()))
    })?)?;
    let train = load_jsonl(&data.train)?;
    let val = load_jsonl(&data.val)?;
    let test = load_jsonl(&data.test)?;
    let (d_in_v, d_in_e) = input_dims(&train)?;
    let model = Model::discrete(&genotype, cfg.task, cfg.train.dropout, d_in_v, d_in_e, cfg.seed)?;
    let outcome = train_model(&model, &train, &val, &cfg.train, cfg.seed)?;
    let (test_loss, test_metric) = evaluate(&model, &test)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = String::from("epoch,train_loss,val_loss,val_metric,lr\n");
    for l in &outcome.logs {
        csv.push_str(&format!("{},{},{},{},{}\n", l.epoch, l.train_loss, l.val_loss, l.val_metric, l.lr));
    }
    std::fs::write(cfg.out_dir.join("metrics.csv"), csv)?;
    save_checkpoint(&model, &genotype, &cfg.out_dir, "checkpoint")?;

    #[derive(Serialize)]
    struct Summary {
        best_epoch: usize,
        best_val_loss: f64,
        test_loss: f64,
        test_metric: f64,
        epochs_run: usize,
    }
    let summary = Summary {
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        test_loss,
        test_metric,
        epochs_run: outcome.logs.len(),
    };
    std::fs::write(
        cfg.out_dir.join("train_summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(TrainReport {
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        test_loss,
        test_metric,
        outcome,
    })
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<(f64, f64)> {
    let (model, _meta) = load_checkpoint(checkpoint)?;
    let graphs = load_jsonl(data)?;
    let (loss, metric) = evaluate(&model, &graphs)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        #[derive(Serialize)]
        struct EvalOut {
            loss: f64,
            metric: f64,
        }
        std::fs::write(
            dir.join("eval.json"),
            serde_json::to_string_pretty(&EvalOut { loss, metric }).expect("serializes"),
        )?;
    }
    Ok((loss, metric))
}

// ── genotype surgery and reports ─────────────────────────────────────────

fn parse_entity_op(s: &str) -> Result<EntityOpKind> {
    serde_json::from_str(&format!("\"{s}\""))
        .map_err(|_| Error::config(format!("unknown entity op {s:?} (Sum, Mean, Max, EntitySkip)")))
}

fn parse_edge_op(s: &str) -> Result<EdgeOpKind> {
    serde_json::from_str(&format!("\"{s}\""))
        .map_err(|_| Error::config(format!("unknown edge op {s:?} (Concat, GRU, FiLM, EdgeSkip)")))
}

pub fn parse_ablation(kind: &str) -> Result<AblationKind> {
    if kind == "sequentialize" {
        return Ok(AblationKind::Sequentialize);
    }
    if let Some(op) = kind.strip_prefix("replace-entity:") {
        return Ok(AblationKind::ReplaceEntity(parse_entity_op(op)?));
    }
    if let Some(op) = kind.strip_prefix("replace-edge:") {
        return Ok(AblationKind::ReplaceEdge(parse_edge_op(op)?));
    }
    if let Some(seed) = kind.strip_prefix("random:") {
        let seed = seed
            .parse::<u64>()
            .map_err(|_| Error::config(format!("random:<seed> needs an integer, got {seed:?}")))?;
        return Ok(AblationKind::RandomSample(seed));
    }
    Err(Error::config(format!(
        "unknown ablation {kind:?}; expected replace-entity:<Op>, replace-edge:<Op>, sequentialize or random:<seed>"
    )))
}

fn load_genotype(path: &Path) -> Result<Genotype> {
    Genotype::from_json(
        &std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read genotype {}: {e}", path.display())))?,
    )
}

pub fn cmd_ablate(genotype_path: &Path, kind: &str, out_dir: &Path) -> Result<PathBuf> {
    let genotype = load_genotype(genotype_path)?;
    let kind = parse_ablation(kind)?;
    let modified = ablate(&genotype, kind)?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("genotype_ablated.json");
    std::fs::write(&path, modified.to_json())?;
    Ok(path)
}

pub fn cmd_export_dot(genotype_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    let genotype = load_genotype(genotype_path)?;
    let dot = export_dot(&genotype)?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("genotype.dot");
    std::fs::write(&path, dot)?;
    Ok(path)
}

pub fn cmd_stats(genotype_path: &Path, out_dir: Option<&Path>) -> Result<String> {
    let genotype = load_genotype(genotype_path)?;
    let csv = stats_csv(&topology_stats(&genotype)?);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("stats.csv"), &csv)?;
    }
    Ok(csv)
}
