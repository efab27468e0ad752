//! Sectioned `key = value` run configuration.
//!
//! ```text
//! [network]
//! variant = slot
//! widths = 16,32,64,128
//! [train]
//! epochs = 70
//! [schedule]
//! target_rate = 0.5
//! [data]
//! manifest = data/manifest.txt
//! ```

use std::path::{Path, PathBuf};

use dyngate_core::net::NetworkConfig;
use dyngate_core::prompt::{self, PromptBank};
use dyngate_core::train::TrainConfig;
use dyngate_core::{Error, Result};

/// Where the datasets and prompt embeddings come from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Embedding file; hashed prompts when absent.
    pub embeddings: Option<PathBuf>,
    pub prompt_seed: u64,
    pub strict_prompts: bool,
}

impl DataConfig {
    pub fn prompt_bank(&self, net: &NetworkConfig) -> Result<PromptBank> {
        let mut bank = PromptBank::hashed(net.text_dim, net.text_tokens, self.prompt_seed);
        bank.strict = self.strict_prompts;
        if let Some(path) = &self.embeddings {
            bank.table = Some(prompt::load_embeddings(path, net.text_tokens)?);
        }
        Ok(bank)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// The seed was given explicitly rather than left at its default.
    pub seed_set: bool,
}

const TRAIN_KEYS: [&str; 11] = [
    "epochs",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "momentum",
    "seed",
    "source",
    "targets",
    "val_fraction",
    "initial_density",
    "clamp_gates_open",
];
const SCHEDULE_KEYS: [&str; 3] = ["target_rate", "anneal_rate", "loss_weight"];
const DATA_KEYS: [&str; 4] = ["manifest", "embeddings", "prompt_seed", "strict_prompts"];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Validation(format!("{key}: cannot parse '{value}'")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Validation(format!("{key}: expected true or false, got '{value}'"))),
    }
}

fn path_opt(value: &str, base: &Path) -> Option<PathBuf> {
    if value.is_empty() {
        return None;
    }
    let p = Path::new(value);
    Some(if p.is_absolute() { p.to_path_buf() } else { base.join(p) })
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl RunConfig {
    /// Sets `section.key`; relative paths resolve against `base`.
    pub fn set(&mut self, section: &str, key: &str, value: &str, base: &Path) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match section {
            "network" => self.network.set(key, value)?,
            "train" => match key {
                "epochs" => t.epochs = num(key, value)?,
                "batch_size" => t.batch_size = num(key, value)?,
                "learning_rate" => t.learning_rate = num(key, value)?,
                "weight_decay" => t.weight_decay = num(key, value)?,
                "momentum" => t.momentum = num(key, value)?,
                "seed" => {
                    t.seed = num(key, value)?;
                    self.seed_set = true;
                }
                "source" => t.source = value.to_string(),
                "targets" => t.targets = list(value),
                "val_fraction" => t.val_fraction = num(key, value)?,
                "initial_density" => {
                    t.initial_density = match value {
                        "" | "auto" => None,
                        v => Some(num(key, v)?),
                    }
                }
                "clamp_gates_open" => t.clamp_gates_open = flag(key, value)?,
                _ => return Err(unknown(section, key)),
            },
            "schedule" => match key {
                "target_rate" => t.schedule.target_rate = num(key, value)?,
                "anneal_rate" => t.schedule.anneal_rate = num(key, value)?,
                "loss_weight" => t.schedule.loss_weight = num(key, value)?,
                _ => return Err(unknown(section, key)),
            },
            "data" => match key {
                "manifest" => self.data.manifest = path_opt(value, base),
                "embeddings" => self.data.embeddings = path_opt(value, base),
                "prompt_seed" => self.data.prompt_seed = num(key, value)?,
                "strict_prompts" => self.data.strict_prompts = flag(key, value)?,
                _ => return Err(unknown(section, key)),
            },
            _ => {
                return Err(Error::Validation(format!(
                    "unknown section '{section}' (expected network, train, schedule or data)"
                )))
            }
        }
        Ok(())
    }

    /// Applies `section.key=value`.
    pub fn set_dotted(&mut self, assignment: &str, base: &Path) -> Result<()> {
        let (lhs, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("expected section.key=value, got '{assignment}'")))?;
        let (section, key) = lhs
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Validation(format!("expected section.key, got '{}'", lhs.trim())))?;
        self.set(section, key, value, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| Error::Parse {
                line: no + 1,
                msg: match e {
                    Error::Validation(m) => m,
                    other => other.to_string(),
                },
            };
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at(Error::Validation(format!("unterminated section header '{line}'"))))?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(Error::Validation(format!("expected key = value, got '{line}'"))))?;
            let key = key.trim();
            match (&section, key.split_once('.')) {
                (_, Some((s, k))) => cfg.set(s, k, value, base),
                (Some(s), None) => cfg.set(s, key, value, base),
                (None, None) => Err(Error::Validation(format!("key '{key}' outside any section"))),
            }
            .map_err(at)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn render(&self) -> String {
        let t = &self.train;
        let mut s = String::from("[network]\n");
        for (k, v) in self.network.to_entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str("\n[train]\n");
        let train_values = [
            t.epochs.to_string(),
            t.batch_size.to_string(),
            format!("{:?}", t.learning_rate),
            format!("{:?}", t.weight_decay),
            format!("{:?}", t.momentum),
            t.seed.to_string(),
            t.source.clone(),
            t.targets.join(","),
            format!("{:?}", t.val_fraction),
            t.initial_density.map_or("auto".into(), |d| format!("{d:?}")),
            t.clamp_gates_open.to_string(),
        ];
        for (k, v) in TRAIN_KEYS.iter().zip(train_values) {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str("\n[schedule]\n");
        let sch = &t.schedule;
        for (k, v) in SCHEDULE_KEYS.iter().zip([sch.target_rate, sch.anneal_rate, sch.loss_weight]) {
            s.push_str(&format!("{k} = {v:?}\n"));
        }
        s.push_str("\n[data]\n");
        let show = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let data_values = [
            show(&self.data.manifest),
            show(&self.data.embeddings),
            self.data.prompt_seed.to_string(),
            self.data.strict_prompts.to_string(),
        ];
        for (k, v) in DATA_KEYS.iter().zip(data_values) {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()
    }
}

fn unknown(section: &str, key: &str) -> Error {
    let keys: &[&str] = match section {
        "train" => &TRAIN_KEYS,
        "schedule" => &SCHEDULE_KEYS,
        _ => &DATA_KEYS,
    };
    Error::Validation(format!(
        "unknown {section} key '{key}' (expected one of {})",
        keys.join(", ")
    ))
}
