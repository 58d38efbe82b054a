//! `kvlp`: command line front end for the pretraining harness.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 numeric failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kvlp_core::harness::corpus::oracle_queries;
use kvlp_core::harness::eval::{eval_linkpred, eval_retrieval, eval_retrieval_oracle, random_baseline_mrr};
use kvlp_core::harness::io::read_tensor;
use kvlp_core::harness::train::{gradient_check, METRICS_HEADER};
use kvlp_core::harness::{generate_corpus, Checkpoint, Config, MetricsLog, SyntheticCorpus, Trainer};
use kvlp_core::kg::holdout_edges;
use kvlp_core::retriever::{build_memory, retrieve};
use kvlp_core::rng::{derive_seed, stream};
use kvlp_core::{EntityMemory, Error, KnowledgeGraph, Result};

#[derive(Parser, Debug)]
#[command(name = "kvlp", version, about = "Knowledge-retrieval vision-language pretraining at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file of `key = value` lines; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a graph directory (entities.tsv, relations.tsv, triplets.tsv)
    /// and write a normalised snapshot to `OUT/kg`.
    Ingest { kg: PathBuf },
    /// Write the synthetic corpus for the config to OUT.
    Synth,
    /// Embed every entity description of a graph into `OUT/memory.embv`.
    BuildMemory { kg: PathBuf },
    /// Top-k entities for an H x W x C image tensor file.
    Retrieve {
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Use this checkpoint's learned query projection instead of the
        /// raw-patch fold.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train on the synthetic corpus; writes `OUT/checkpoint.bin` and
    /// `OUT/metrics.tsv`.
    Pretrain {
        /// Continue from a checkpoint up to its config's step count.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the number of steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Finite-difference check of every loss at initialisation.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Exit with status 2 if any relative error exceeds this.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Filtered link-prediction ranking on held-out corpus triplets.
    EvalLinkpred {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Recall@k of ground-truth entities: learned, untrained and raw-patch
    /// queries.
    EvalRetrieval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Diverged { param_norms, .. } = &e {
                for (name, norm) in param_norms {
                    eprintln!("  {name}\t{norm}");
                }
            }
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}

fn load_config(common: &Common) -> Result<Config> {
    let mut c = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn load_checkpoint(path: &Path, common: &Common) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if common.config.is_some() || common.seed.is_some() {
        return Err(Error::Config("--config and --seed cannot be combined with a checkpoint".into()));
    }
    Ok(ckpt)
}

fn corpus_for(config: &Config) -> Result<SyntheticCorpus> {
    generate_corpus(config, config.seed)
}

/// The trained model if a checkpoint is given, else a fresh initialisation.
fn trainer_for(checkpoint: Option<&Path>, common: &Common) -> Result<(Trainer, SyntheticCorpus)> {
    match checkpoint {
        Some(p) => {
            let ckpt = load_checkpoint(p, common)?;
            let corpus = corpus_for(&ckpt.config)?;
            let t = ckpt.restore(&corpus)?;
            Ok((t, corpus))
        }
        None => {
            let config = load_config(common)?;
            let corpus = corpus_for(&config)?;
            let t = Trainer::new(&config, &corpus)?;
            Ok((t, corpus))
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let common = &cli.common;
    let out = &common.out;
    match cli.command {
        Command::Ingest { kg } => {
            let graph = KnowledgeGraph::load_dir(&kg)?;
            let dest = out.join("kg");
            graph.save_dir(&dest)?;
            println!(
                "{} entities, {} relations, {} triplets -> {}",
                graph.entities().len(),
                graph.relations().len(),
                graph.triplets().len(),
                dest.display()
            );
        }
        Command::Synth => {
            let config = load_config(common)?;
            let corpus = corpus_for(&config)?;
            corpus.write_dir(out)?;
            corpus.memory.save(out.join("memory.embv"))?;
            fs::write(out.join("config.txt"), config.to_text())?;
            println!("{} examples -> {}", corpus.examples.len(), out.display());
        }
        Command::BuildMemory { kg } => {
            let config = load_config(common)?;
            let graph = KnowledgeGraph::load_dir(&kg)?;
            let memory = build_memory(&graph, config.memory_width, config.seed)?;
            fs::create_dir_all(out)?;
            let dest = out.join("memory.embv");
            memory.save(&dest)?;
            println!("{} x {} -> {}", memory.len(), memory.dim(), dest.display());
        }
        Command::Retrieve {
            memory,
            image,
            checkpoint,
            k,
        } => {
            let memory = EntityMemory::load(&memory)?;
            let image = read_tensor(&image)?;
            let (config, queries) = match checkpoint {
                Some(p) => {
                    let ckpt = load_checkpoint(&p, common)?;
                    let corpus = corpus_for(&ckpt.config)?;
                    let t = ckpt.restore(&corpus)?;
                    let patches = kvlp_core::encoders::patchify(&image, ckpt.config.patch)?;
                    let q = t.model.queries(&patches)?;
                    (ckpt.config, q)
                }
                None => {
                    let config = load_config(common)?;
                    let patches = kvlp_core::encoders::patchify(&image, config.patch)?;
                    let q = oracle_queries(&patches, memory.dim())?;
                    (config, q)
                }
            };
            let k = k.unwrap_or(config.k_final);
            let set = retrieve(&queries, &memory, config.k_per_patch, k)?;
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "rank\tid\tscore\tpatch")?;
            for (i, e) in set.entries.iter().enumerate() {
                writeln!(stdout, "{}\t{}\t{}\t{}", i + 1, e.id, e.score, e.patch)?;
            }
        }
        Command::Pretrain { resume, steps } => {
            let (mut trainer, corpus, mut log_text) = match resume {
                Some(p) => {
                    let ckpt = load_checkpoint(&p, common)?;
                    let corpus = corpus_for(&ckpt.config)?;
                    let t = ckpt.restore(&corpus)?;
                    // Keep earlier rows so the log stays gap free.
                    let prior = fs::read_to_string(out.join("metrics.tsv")).unwrap_or_default();
                    let kept = prior_rows(&prior, t.step);
                    (t, corpus, kept)
                }
                None => {
                    let config = load_config(common)?;
                    let corpus = corpus_for(&config)?;
                    let t = Trainer::new(&config, &corpus)?;
                    (t, corpus, format!("{METRICS_HEADER}\n"))
                }
            };
            let target = steps.unwrap_or(trainer.model.config.steps) as u64;
            let remaining = target.saturating_sub(trainer.step) as usize;
            let mut log = MetricsLog::default();
            fs::create_dir_all(out)?;
            let result = trainer.run(&corpus, remaining, &mut log);
            let tsv = log.to_tsv();
            log_text.push_str(tsv.split_once('\n').map_or("", |(_, rows)| rows));
            fs::write(out.join("metrics.tsv"), &log_text)?;
            result?;
            Checkpoint::from_trainer(&trainer).save(out.join("checkpoint.bin"))?;
            match log.rows.last() {
                Some(r) => println!("step {}: total {}", r.step, r.bundle.total),
                None => println!("step {}: nothing to do", trainer.step),
            }
        }
        Command::Gradcheck {
            eps,
            samples,
            tolerance,
        } => {
            let config = load_config(common)?;
            let corpus = corpus_for(&config)?;
            let trainer = Trainer::new(&config, &corpus)?;
            let reports = gradient_check(&trainer.model, &corpus, eps, samples, config.seed)?;
            let mut worst = 0.0f64;
            for (name, r) in &reports {
                println!("{name}\t{:e}", r.max_rel_error);
                worst = worst.max(r.max_rel_error);
            }
            if !(worst <= tolerance) {
                eprintln!("error: relative error {worst:e} above tolerance {tolerance:e}");
                return Ok(ExitCode::from(2));
            }
        }
        Command::EvalLinkpred { checkpoint } => {
            let (t, corpus) = trainer_for(checkpoint.as_deref(), common)?;
            let c = &t.model.config;
            let h = holdout_edges(&corpus.kg, c.edge_drop, derive_seed(c.seed, stream::HOLDOUT, 0))?;
            let m = eval_linkpred(&t.model, &corpus, &h.held_out)?;
            let baseline = random_baseline_mrr(&corpus.kg, &h.held_out, c.width, 20)?;
            println!("held_out\t{}", h.held_out.len());
            println!("mrr\t{}", m.mrr);
            println!("hits@1\t{}", m.hits1);
            println!("hits@10\t{}", m.hits10);
            println!("random_mrr\t{baseline}");
        }
        Command::EvalRetrieval { checkpoint, k } => {
            let (t, corpus) = trainer_for(checkpoint.as_deref(), common)?;
            let c = &t.model.config;
            let k = k.unwrap_or(c.k_final);
            let learned = eval_retrieval(&t.model, &corpus, k)?;
            let untrained = eval_retrieval(&Trainer::new(c, &corpus)?.model, &corpus, k)?;
            let oracle = eval_retrieval_oracle(&corpus, c.patch, k)?;
            println!("k\t{k}");
            println!("recall\t{learned}");
            println!("untrained_recall\t{untrained}");
            println!("oracle_recall\t{oracle}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Header plus the rows of `text` with step <= `upto`.
fn prior_rows(text: &str, upto: u64) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for line in text.lines().skip(1) {
        let step = line.split('\t').next().and_then(|f| f.parse::<u64>().ok());
        if matches!(step, Some(n) if n <= upto) {
            s.push_str(line);
            s.push('\n');
        }
    }
    s
}
