use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use inn_core::analysis::{analyze, export_report};
use inn_core::data::{evaluate, generate, synthetic_text8, CorpusSplit, DEFAULT_SPLIT};
use inn_core::model::complexity_probe;
use inn_core::train::{load_model, run_ablation, run_sweep, sweep_csv, write_ablation, Checkpoint, RunConfig, Trainer};
use inn_core::{Error, InnModel, Result};

#[derive(Parser)]
#[command(name = "inn", version, about = "Train and inspect graph-of-neurons character language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.jsonl, summary.csv and checkpoints to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the checkpoint was built for a different model config.
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Train the four communication variants under one budget and print the table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Also write ablation.csv and ablation.md here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid search over peak learning rate and weight decay.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        max_lr: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        weight_decay: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print NLL, BPC and perplexity of a checkpoint on one split as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "valid")]
        split: Split,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        #[arg(long)]
        max_batches: Option<usize>,
    },
    /// Sample a continuation of --seed-text.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seed_text: String,
        #[arg(long, default_value_t = 200)]
        length: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export routing maps, per-neuron statistics and a summary.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "valid")]
        split: Split,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        #[arg(long)]
        max_batches: Option<usize>,
    },
    /// Count multiply-accumulates of one forward pass over a grid of lengths and neuron counts.
    Complexity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
        seq_lens: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        neurons: Vec<usize>,
    },
    /// Print the parameter count of a config.
    Params {
        #[arg(long)]
        config: PathBuf,
        /// Vocabulary size to assume when the config leaves it out.
        #[arg(long, default_value_t = 27)]
        vocab: usize,
    },
    /// Write deterministic Text8-format text (a-z and spaces).
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Reads a run config; a missing `model.vocab_size` is taken from `vocab`.
fn read_config(path: &Path, vocab: usize) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(model) = value.get_mut("model").and_then(|m| m.as_object_mut()) {
        model.entry("vocab_size").or_insert(vocab.into());
    }
    Ok(serde_json::from_value(value)?)
}

fn read_raw(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Tokenizes `data` with the checkpoint's vocabulary and picks one split.
fn checkpoint_split(ckpt: &Path, data: &Path, split: Split) -> Result<(InnModel, Vec<usize>)> {
    let (model, vocab) = load_model(ckpt)?;
    let ids = vocab.encode_raw(&read_raw(data)?)?;
    let corpus = CorpusSplit::from_ids(vocab, ids, DEFAULT_SPLIT)?;
    let ids = match split {
        Split::Train => corpus.train,
        Split::Valid => corpus.valid,
        Split::Test => corpus.test,
    };
    Ok((model, ids))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            resume,
            allow_config_mismatch,
        } => {
            let corpus = CorpusSplit::from_raw(&read_raw(&data)?, DEFAULT_SPLIT)?;
            let cfg = read_config(&config, corpus.vocab.len())?;
            let mut trainer = match resume {
                Some(path) => {
                    let ck = Checkpoint::read(&path)?;
                    ck.check_config(&cfg.model, allow_config_mismatch)?;
                    Trainer::resume(&path, &corpus, None, true)?
                }
                None => Trainer::new(cfg, &corpus)?,
            }
            .with_output(&out)?;
            eprintln!(
                "training {} parameters on {} ids from step {}",
                trainer.model.count_params(),
                corpus.train.len(),
                trainer.step
            );
            let summary = trainer.run()?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Ablate { config, data, seeds, out } => {
            let corpus = CorpusSplit::from_raw(&read_raw(&data)?, DEFAULT_SPLIT)?;
            let cfg = read_config(&config, corpus.vocab.len())?;
            let table = run_ablation(&corpus, &cfg, &seeds, |variant, seed, result| match result {
                Ok(s) => eprintln!(
                    "{} seed {seed}: valid BPC {:.4} in {:.0} s",
                    variant.name(),
                    s.final_valid_bpc.unwrap_or(f64::NAN),
                    s.seconds
                ),
                Err(e) => eprintln!("{} seed {seed}: {e}", variant.name()),
            })?;
            print!("{}", table.to_markdown());
            if let Some(dir) = out {
                write_ablation(&table, dir)?;
            }
        }
        Command::Sweep {
            config,
            data,
            max_lr,
            weight_decay,
            out,
        } => {
            let corpus = CorpusSplit::from_raw(&read_raw(&data)?, DEFAULT_SPLIT)?;
            let cfg = read_config(&config, corpus.vocab.len())?;
            let rows = run_sweep(&corpus, &cfg, &max_lr, &weight_decay, |r| {
                eprintln!("max_lr {} weight_decay {}: valid BPC {:.4}", r.max_lr, r.weight_decay, r.final_valid_bpc)
            })?;
            let csv = sweep_csv(&rows);
            print!("{csv}");
            if let Some(dir) = out {
                write_file(&dir.join("sweep.csv"), &csv)?;
            }
        }
        Command::Eval {
            ckpt,
            data,
            split,
            batch,
            seq_len,
            max_batches,
        } => {
            let (model, ids) = checkpoint_split(&ckpt, &data, split)?;
            let result = evaluate(&model, &ids, batch, seq_len, max_batches)?;
            println!("{}", serde_json::to_string(&result)?);
        }
        Command::Generate {
            ckpt,
            seed_text,
            length,
            temperature,
            seed,
        } => {
            let (model, vocab) = load_model(&ckpt)?;
            println!("{}", generate(&model, &vocab, &seed_text, length, temperature, seed)?);
        }
        Command::Analyze {
            ckpt,
            data,
            out,
            split,
            batch,
            seq_len,
            max_batches,
        } => {
            let (model, ids) = checkpoint_split(&ckpt, &data, split)?;
            let report = analyze(&model, &ids, batch, seq_len, max_batches)?;
            export_report(&report, &out)?;
            let c = &report.connectivity;
            eprintln!(
                "hubs {:?}, specialists {:?}, sparsity {:.3}; wrote {}",
                c.hubs,
                c.specialists,
                report.activation.sparsity,
                out.display()
            );
        }
        Command::Complexity {
            config,
            seq_lens,
            neurons,
        } => {
            let cfg = read_config(&config, 27)?;
            println!("seq_len,n_neurons,macs,dense_macs,attention_macs_per_layer,mix_macs");
            for r in complexity_probe(&cfg.model, &seq_lens, &neurons)? {
                println!(
                    "{},{},{},{},{},{}",
                    r.seq_len, r.n_neurons, r.macs, r.dense_macs, r.attention_macs_per_layer, r.mix_macs
                );
            }
        }
        Command::Params { config, vocab } => {
            let cfg = read_config(&config, vocab)?;
            cfg.model.validate()?;
            println!("{}", cfg.model.param_count());
        }
        Command::SynthCorpus { out, bytes, seed } => write_file(&out, &synthetic_text8(bytes, seed))?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
