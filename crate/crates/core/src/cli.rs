use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use iaml::ablation::run_ablation;
use iaml::checkpoint;
use iaml::config::{parse_override, RunConfig, DATA_ROOT_ENV};
use iaml::data::{discover_pairs, load_image, save_image, PairedDataset};
use iaml::metrics::{evaluate_dataset, LpipsLite, PerceptualModel};
use iaml::synthetic::write_synthetic_split;
use iaml::train::{init_state, train, RunDir};
use iaml::IamlError;

#[derive(Debug, Parser)]
#[command(
    name = "iaml",
    version,
    about = "Low-light image enhancement with an illumination-aware mirror loss"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set loss.lambda=0.5`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorthand for `--set output.run_dir=DIR`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<iaml::Result<Vec<_>>>()?;
        if let Some(seed) = self.seed {
            overrides.push(("train.seed".into(), seed.to_string()));
        }
        if let Some(dir) = &self.run_dir {
            overrides.push((
                "output.run_dir".into(),
                format!("{:?}", dir.display().to_string()),
            ));
        }
        Ok(RunConfig::load(self.config.as_deref(), &overrides)?)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EvalOn {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the student/teacher pair.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint, reusing its config snapshot.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Perceptual model JSON; LPIPS is omitted when absent or unloadable.
        #[arg(long)]
        lpips_model: Option<PathBuf>,
    },
    /// Enhance one image or every image in a directory.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train all five loss formulations under identical seeds and data order.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Optimizer steps per formulation.
        #[arg(long, default_value_t = 300)]
        steps: u64,
        /// Use only the first N training pairs (0 keeps all).
        #[arg(long, default_value_t = 0)]
        pairs: usize,
        #[arg(long, value_enum, default_value_t = EvalOn::Test)]
        eval_on: EvalOn,
        #[arg(long)]
        lpips_model: Option<PathBuf>,
    },
    /// Write a synthetic paired dataset in the canonical layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "our485")]
        split: String,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn data_root(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.data_root()
        .with_context(|| format!("no dataset root: set data.root in the config or {DATA_ROOT_ENV}"))
}

fn load_split(
    cfg: &RunConfig,
    split: &str,
    limit: usize,
    min_size: usize,
) -> Result<PairedDataset> {
    let root = data_root(cfg)?;
    let mut records = discover_pairs(&root, split)?;
    if limit > 0 {
        records.truncate(limit);
    }
    let set = PairedDataset::load(&records, min_size)?;
    if set.is_empty() {
        bail!(
            "no usable pairs in split `{split}` under {}",
            root.display()
        );
    }
    Ok(set)
}

fn lpips(path: Option<&Path>) -> Option<Box<dyn PerceptualModel>> {
    let path = path?;
    match LpipsLite::load(path) {
        Ok(m) => Some(Box::new(m)),
        Err(IamlError::ModelUnavailable(reason)) => {
            warn!("LPIPS disabled: {reason}");
            None
        }
        Err(e) => {
            warn!("LPIPS disabled: {e}");
            None
        }
    }
}

fn cmd_train(common: &Common, checkpoint_path: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let mut state = match checkpoint_path {
        Some(p) => {
            let s = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            info!("resuming at step {} (epoch {})", s.step, s.epoch);
            s
        }
        None => init_state(&cfg)?,
    };
    let c = state.config.clone();
    let train_set = load_split(&c, &c.data.train_split, 0, c.train.crop)?;
    let val_set = if c.data.val_split.is_empty() {
        None
    } else {
        Some(load_split(&c, &c.data.val_split, 0, 0)?)
    };
    let run_dir = RunDir::create(&cfg.output.run_dir)?;
    run_dir.write_config_echo(&state.config)?;
    info!("{} training pairs", train_set.len());
    let records = train(&mut state, &train_set, val_set.as_ref(), Some(&run_dir))?;
    if let Some(last) = records.last() {
        println!(
            "step {} epoch {} loss {:.6} (mse {:.6}, ssim {:.6}, mirror {:.6})",
            last.step,
            last.epoch,
            last.loss.total,
            last.loss.mse,
            last.loss.ssim_loss,
            last.loss.mirror
        );
    }
    println!("checkpoint: {}", run_dir.latest_checkpoint().display());
    Ok(())
}

fn cmd_evaluate(common: &Common, ckpt: &Path, lpips_model: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let state = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let root = data_root(&cfg)?;
    let records = discover_pairs(&root, &cfg.data.test_split)?;
    let model_path = lpips_model
        .map(Path::to_path_buf)
        .or_else(|| cfg.lpips_model());
    let model = lpips(model_path.as_deref());
    let id = checkpoint::checkpoint_id(ckpt)?;
    let report = evaluate_dataset(
        &state,
        &records,
        &cfg.data.dataset_name,
        &id,
        model.as_deref(),
    )?;
    let run_dir = RunDir::create(&cfg.output.run_dir)?;
    let stem = run_dir.reports().join(format!("eval_{id}"));
    report.save_json(&stem.with_extension("json"))?;
    std::fs::write(stem.with_extension("csv"), report.to_csv())?;
    std::fs::write(stem.with_extension("txt"), report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_enhance(ckpt: &Path, input: &Path, output: &Path) -> Result<()> {
    let state = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let files = image_files(input)?;
    let single = input.is_file();
    if !single {
        std::fs::create_dir_all(output)?;
    }
    for f in files {
        let out = state.enhance(&load_image(&f)?)?;
        let dest = if single {
            output.to_path_buf()
        } else {
            output.join(f.file_stem().unwrap()).with_extension("png")
        };
        save_image(&dest, &out)?;
        println!("{} -> {}", f.display(), dest.display());
    }
    Ok(())
}

fn cmd_ablate(
    common: &Common,
    steps: u64,
    pairs: usize,
    eval_on: EvalOn,
    lpips_model: Option<&Path>,
) -> Result<()> {
    let mut cfg = common.load()?;
    let train_set = load_split(&cfg, &cfg.data.train_split, pairs, cfg.train.crop)?;
    let batches_per_epoch = train_set.len().div_ceil(cfg.train.batch_size) as u64;
    cfg.train.max_steps = steps;
    cfg.train.epochs = steps.div_ceil(batches_per_epoch).max(1);
    cfg.train.checkpoint_every = 0;
    let eval_set = match eval_on {
        EvalOn::Train => train_set.clone(),
        EvalOn::Test => load_split(&cfg, &cfg.data.test_split, 0, 0)?,
    };
    let model_path = lpips_model
        .map(Path::to_path_buf)
        .or_else(|| cfg.lpips_model());
    let model = lpips(model_path.as_deref());
    let run_dir = RunDir::create(&cfg.output.run_dir)?;
    run_dir.write_config_echo(&cfg)?;
    let report = run_ablation(
        &cfg,
        &train_set,
        &eval_set,
        model.as_deref(),
        Some(&run_dir.root),
    )?;
    let reports = run_dir.reports();
    std::fs::write(
        reports.join("ablation.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(reports.join("ablation.csv"), report.to_csv())?;
    std::fs::write(reports.join("ablation.txt"), report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, checkpoint } => cmd_train(&common, checkpoint.as_deref()),
        Command::Evaluate {
            common,
            checkpoint,
            lpips_model,
        } => cmd_evaluate(&common, &checkpoint, lpips_model.as_deref()),
        Command::Enhance {
            checkpoint,
            input,
            output,
        } => cmd_enhance(&checkpoint, &input, &output),
        Command::Ablate {
            common,
            steps,
            pairs,
            eval_on,
            lpips_model,
        } => cmd_ablate(&common, steps, pairs, eval_on, lpips_model.as_deref()),
        Command::Synth {
            out,
            split,
            count,
            height,
            width,
            seed,
        } => {
            write_synthetic_split(&out, &split, count, height, width, seed)?;
            println!("wrote {count} pairs to {}", out.join(&split).display());
            Ok(())
        }
    }
}
