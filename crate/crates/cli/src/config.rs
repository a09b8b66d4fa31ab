use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rvl::encoder::EncoderConfig;
use rvl::metrics::Threshold;
use rvl::trainer::{CaptionMode, TrainerConfig};
use serde::{Deserialize, Serialize};

use crate::{CaptionArg, Cli, Command};

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const REPORT: &str = "report.json";
pub const DEFAULT_N_PER_CLASS: usize = 512;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_per_class: Option<usize>,
}

/// Contents of a `--config` file; every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub encoder: Option<EncoderConfig>,
    pub trainer: Option<TrainerConfig>,
    pub data: DataConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Everything a run depends on, written before any work starts.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub command: Command,
    pub encoder: EncoderConfig,
    pub trainer: TrainerConfig,
    pub n_per_class: usize,
}

impl Resolved {
    /// Flags over config file over built-in defaults.
    pub fn from_cli(cli: &Cli) -> Result<Self> {
        if cli.threads == 0 {
            return Err(rvl::Error::Argument("--threads must be at least 1".into()).into());
        }
        let file = match &cli.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let seed = cli.seed.or(file.seed).unwrap_or(0);
        let encoder = file.encoder.clone().unwrap_or_default();
        encoder.validate()?;
        let mut trainer = file.trainer.clone().unwrap_or_default();
        trainer.seed = seed;
        let mut n_per_class = file.data.n_per_class.unwrap_or(DEFAULT_N_PER_CLASS);
        match &cli.command {
            Command::Train(a) => {
                let set = |slot: &mut f64, v: Option<f64>| {
                    if let Some(v) = v {
                        *slot = v;
                    }
                };
                set(&mut trainer.lambda, a.lambda);
                set(&mut trainer.gamma, a.gamma);
                set(&mut trainer.epsilon, a.epsilon);
                set(&mut trainer.delta, a.delta);
                set(&mut trainer.temperature, a.temperature);
                set(&mut trainer.learning_rate, a.learning_rate);
                if let Some(e) = a.epochs {
                    trainer.epochs = e;
                }
                if let Some(b) = a.batch_size {
                    trainer.batch_size = b;
                }
                if let Some(m) = a.caption_mode {
                    trainer.caption_mode = match m {
                        CaptionArg::Plain => CaptionMode::Plain,
                        CaptionArg::Rationale => CaptionMode::Rationale,
                    };
                }
                if let Some(t) = a.tau {
                    trainer.tau_mode = Threshold::Fixed(t);
                }
                if a.ablate_disen {
                    trainer.lambda = 0.0;
                }
                if a.ablate_recon {
                    trainer.gamma = 0.0;
                }
                trainer.validate()?;
            }
            Command::GenData(a) => {
                if let Some(n) = a.n_per_class {
                    n_per_class = n;
                }
            }
            _ => {}
        }
        Ok(Resolved { seed, threads: cli.threads, out: cli.out.clone(), command: cli.command.clone(), encoder, trainer, n_per_class })
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Create the output directory and write the snapshot into it.
    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(CONFIG_SNAPSHOT);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
