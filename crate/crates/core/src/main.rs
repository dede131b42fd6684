use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lora_ttt::bench::{self, Dataset, PretrainConfig, SyntheticShiftSpec, TRAIN_SPLIT};
use lora_ttt::encoder::{read_checkpoint, write_checkpoint, ModelConfig, TextFeatureTable};
use lora_ttt::lora::AdapterSet;
use lora_ttt::rng::stream;
use lora_ttt::ttt::{self, lora_pretrain, LoraPretrainConfig, Mode, TttConfig};
use lora_ttt::{Error, Result};

#[derive(Parser)]
#[command(name = "lora-ttt", version, about = "Episodic LoRA test-time training on a synthetic shifted benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with shifted test splits.
    GenData {
        /// Dataset spec JSON; defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base dual encoder contrastively on the training split.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Model config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pretraining config JSON (batch size, lr, augmentation).
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute the class text table.
    EmbedText {
        #[arg(long)]
        ckpt: PathBuf,
        /// Class names; defaults to the dataset's classes when --data is given.
        #[arg(long, num_args = 1..)]
        classes: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Prompt templates with a `{class}` slot; several are ensembled.
        #[arg(long = "template")]
        templates: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-initialize LoRA adapters on the training pairs.
    LoraPretrain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one mode over one split, writing reports to --out.
    Run {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Pre-initialized adapters for the LoRA modes.
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge the report.json of several run directories into one CSV.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { spec, out } => {
            let spec = match spec {
                Some(p) => SyntheticShiftSpec::load(&p)?,
                None => SyntheticShiftSpec::default(),
            };
            let m = bench::generate(&spec, &out)?;
            println!("wrote {} items in {} splits to {}", m.items.len(), m.split_names().len(), out.display());
        }
        Command::Pretrain {
            data,
            config,
            train_config,
            epochs,
            seed,
            out,
        } => {
            let dataset = Dataset::open(&data)?;
            let model_config: ModelConfig = load_json(config.as_deref())?;
            let mut cfg: PretrainConfig = load_json(train_config.as_deref())?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let (model, log) = bench::pretrain(&dataset, &model_config, &cfg, &mut stream(seed, "pretrain"))?;
            write_checkpoint(&out, &model)?;
            if let Some(last) = log.epoch_losses.last() {
                println!("final epoch loss {last:.4}");
            }
            println!("wrote {}", out.display());
        }
        Command::EmbedText {
            ckpt,
            classes,
            data,
            templates,
            out,
        } => {
            let classes = match (classes.is_empty(), data) {
                (false, _) => classes,
                (true, Some(d)) => Dataset::open(&d)?.manifest.class_names,
                (true, None) => return Err(Error::invalid("give --classes or --data")),
            };
            let templates = if templates.is_empty() {
                bench::DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect()
            } else {
                templates
            };
            let table = bench::embed_text(&ckpt, &classes, &templates, &out)?;
            println!("wrote {} classes to {}", table.num_classes(), out.display());
        }
        Command::LoraPretrain {
            ckpt,
            data,
            config,
            epochs,
            seed,
            out,
        } => {
            let model = read_checkpoint::<f32>(&ckpt)?;
            let dataset = Dataset::open(&data)?;
            let mut cfg: LoraPretrainConfig = load_json(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let pairs = dataset.pairs::<f32>(TRAIN_SPLIT)?;
            let (set, log) = lora_pretrain(&model, &pairs, &cfg, &mut stream(seed, "lora-pretrain"))?;
            set.save(&out)?;
            println!("loss {:.4} -> {:.4}; wrote {}", log.initial_loss, log.final_loss, out.display());
        }
        Command::Run {
            ckpt,
            table,
            data,
            split,
            mode,
            config,
            seed,
            adapters,
            out,
        } => {
            let mode: Mode = mode.parse()?;
            let mut cfg = match config {
                Some(p) => TttConfig::load(&p)?,
                None => TttConfig::default(),
            };
            cfg = cfg.with_mode(mode);
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let model = read_checkpoint::<f32>(&ckpt)?;
            let table = TextFeatureTable::<f32>::load(&table)?;
            let dataset = Dataset::open(&data)?;
            if table.class_names() != dataset.manifest.class_names.as_slice() {
                return Err(Error::invalid("text table classes differ from the dataset classes"));
            }
            let adapters = match adapters {
                Some(p) if mode.uses_lora() => Some(AdapterSet::load(&model, &p)?),
                Some(_) => return Err(Error::invalid(format!("{mode} does not take adapters"))),
                None => None,
            };
            let instances = dataset.instances::<f32>(&split)?;
            let output = ttt::run_stream(&instances, &split, &model, &table, &cfg, adapters)?;
            ttt::write_run(&out, &cfg, &output)?;
            let r = &output.report;
            println!(
                "{} on {}: top1 {:.4}, ece {:.4}, {} trainable, {:.1} ms/episode",
                r.mode, r.dataset, r.top1, r.ece, r.trainable_params, r.median_episode_ms
            );
        }
        Command::Report { runs, out } => {
            let dirs: Vec<&Path> = runs.iter().map(|p| p.as_path()).collect();
            let csv = ttt::merge_reports(&dirs)?;
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
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
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
