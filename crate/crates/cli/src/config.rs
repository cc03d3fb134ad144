use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use caspr_core::metrics::Task;
use caspr_core::pretrain::TrainConfig;
use caspr_core::synthgen::{Signal, SynthConfig};
use caspr_core::transformer::{DecoderInput, Memory, ModelConfig, Precision};
use caspr_core::{Error, Result};
use clap::Args;
use serde::Deserialize;

/// Everything a run needs. Loaded from `--config` and then overridden by
/// flags.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub fitted: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub relevance: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub task: Option<Task>,
    pub item_column: Option<String>,
    pub bench_workers: Vec<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, weight init, training and probes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<u64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Output directory, created if absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_with::<Precision>)]
    pub precision: Option<Precision>,
    /// Cross-attention memory: sequence, embedding or both.
    #[arg(long, global = true, value_parser = parse_with::<Memory>)]
    pub memory: Option<Memory>,
    /// Decoder input during pretraining: masked or positions.
    #[arg(long, global = true, value_parser = parse_with::<DecoderInput>)]
    pub decoder_input: Option<DecoderInput>,
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub schema: Option<PathBuf>,
    #[arg(long, global = true)]
    pub fitted: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub labels: Option<PathBuf>,
}

pub fn parse_with<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn parse_signal(s: &str) -> std::result::Result<Signal, String> {
    parse_with(s)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(existing(path)?)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Reads `--config` if given and applies the remaining flags on top.
    pub fn resolve(flags: &Common) -> Result<Self> {
        let mut cfg = match &flags.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(seed) = flags.seed {
            cfg.train.seed = seed;
            cfg.synth.seed = seed;
        }
        if let Some(e) = flags.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = flags.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(p) = flags.precision {
            cfg.model.precision = p;
        }
        if let Some(m) = flags.memory {
            cfg.model.memory = m;
        }
        if let Some(d) = flags.decoder_input {
            cfg.model.decoder_input = d;
        }
        let paths = [
            (&flags.out, &mut cfg.out),
            (&flags.data, &mut cfg.data),
            (&flags.schema, &mut cfg.schema),
            (&flags.fitted, &mut cfg.fitted),
            (&flags.checkpoint, &mut cfg.checkpoint),
            (&flags.labels, &mut cfg.labels),
        ];
        for (flag, slot) in paths {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        Ok(cfg)
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

/// The input path behind `name`, which must be set and exist.
pub fn input<'a>(path: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| Error::Config(format!("missing input `{name}` (flag --{name} or config key)")))?;
    existing(p)
}

pub fn existing(p: &Path) -> Result<&Path> {
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("{}: no such file or directory", p.display()),
        )))
    }
}
