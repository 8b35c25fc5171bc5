//! Run configuration: one TOML file covering every module, layered over a
//! preset and under command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use storyviz::captioner::CaptionerTrainConfig;
use storyviz::config::{CaptionerConfig, ClassifierConfig, DamsmConfig, ModelConfig, Preset, TrainConfig};
use storyviz::data::{Split, SynthConfig};
use storyviz::eval::{ClassifierTrainConfig, DamsmTrainConfig};
use storyviz::par::Exec;

pub const OUT_DIR_ENV: &str = "STORYVIZ_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "storyviz-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub captioner: CaptionerTrainConfig,
    pub classifier: ClassifierTrainConfig,
    pub damsm: DamsmTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub seed: u64,
}

/// Everything a command needs. `vocab_size` and `num_chars` fields are
/// replaced by the dataset's values when data is loaded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub exec: Exec,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub captioner: CaptionerConfig,
    pub classifier: ClassifierConfig,
    pub damsm: DamsmConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(p: Preset, seed: u64, out_dir: PathBuf) -> Self {
        let data = match p {
            Preset::Desk => SynthConfig::default(),
            Preset::Paper => SynthConfig {
                image_size: 64,
                ..SynthConfig::default()
            },
        };
        let mut train = TrainConfig::preset(p);
        train.seed = seed;
        Self {
            preset: p,
            seed,
            out_dir,
            exec: Exec::Parallel,
            data,
            model: ModelConfig::preset(p, 0),
            captioner: CaptionerConfig::preset(p, 0),
            classifier: ClassifierConfig::preset(p),
            damsm: DamsmConfig::preset(p, 0),
            train,
            pretrain: PretrainConfig {
                captioner: CaptionerTrainConfig {
                    seed,
                    ..Default::default()
                },
                classifier: ClassifierTrainConfig {
                    seed,
                    ..Default::default()
                },
                damsm: DamsmTrainConfig {
                    seed,
                    ..Default::default()
                },
            },
            eval: EvalConfig { split: Split::Val, seed },
        }
    }

    /// Adopt the dataset's vocabulary size and character count.
    pub fn bind_dataset(&mut self, vocab_size: usize, num_chars: usize) {
        self.model.vocab_size = vocab_size;
        self.captioner.vocab_size = vocab_size;
        self.damsm.vocab_size = vocab_size;
        self.model.num_chars = num_chars;
        self.classifier.num_chars = num_chars;
    }

    /// Cross-module agreement on image size, story length and caption length.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let checks = [
            ("model.image_size", self.model.image_size, d.image_size as usize),
            ("captioner.image_size", self.captioner.image_size, d.image_size as usize),
            ("classifier.image_size", self.classifier.image_size, d.image_size as usize),
            ("damsm.image_size", self.damsm.image_size, d.image_size as usize),
            ("model.story_len", self.model.story_len, d.story_len),
            ("captioner.story_len", self.captioner.story_len, d.story_len),
            ("damsm.story_len", self.damsm.story_len, d.story_len),
            ("model.max_caption_len", self.model.max_caption_len, d.max_caption_len),
            ("captioner.max_caption_len", self.captioner.max_caption_len, d.max_caption_len),
            ("damsm.max_caption_len", self.damsm.max_caption_len, d.max_caption_len),
        ];
        for (key, got, want) in checks {
            if got != want {
                bail!("config key `{key}` is {got} but the dataset settings imply {want}");
            }
        }
        self.train.validate().context("config section `train`")?;
        Ok(())
    }
}

/// Values given on the command line, applied after the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// Dotted key paths with JSON values, e.g. `train.max_steps = 300`.
    pub keys: Vec<(String, Value)>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    let mut parts = path.split('.').peekable();
    while let Some(p) = parts.next() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().expect("object");
        if parts.peek().is_none() {
            obj.insert(p.to_string(), value);
            return;
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
}

fn parse_preset(v: &Value) -> Result<Preset> {
    Ok(serde_json::from_value(v.clone()).context("config key `preset`")?)
}

/// Preset defaults, then the file, then the overrides. Unknown keys fail with
/// the dotted path of the offending key.
pub fn load(file: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let file_value = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            let t: toml::Value = toml::from_str(&text).with_context(|| format!("invalid TOML in {}", p.display()))?;
            serde_json::to_value(t)?
        }
        None => Value::Object(Map::new()),
    };
    let preset = match (ov.preset, file_value.get("preset")) {
        (Some(p), _) => p,
        (None, Some(v)) => parse_preset(v)?,
        (None, None) => Preset::Desk,
    };
    let seed = match (ov.seed, file_value.get("seed")) {
        (Some(s), _) => s,
        (None, Some(v)) => v.as_u64().context("config key `seed` must be a non-negative integer")?,
        (None, None) => 0,
    };
    let out_dir = ov
        .out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));

    let mut value = serde_json::to_value(RunConfig::preset(preset, seed, out_dir))?;
    merge(&mut value, file_value);
    set_path(&mut value, "preset", serde_json::to_value(preset)?);
    set_path(&mut value, "seed", Value::from(seed));
    if let Some(o) = &ov.out_dir {
        set_path(&mut value, "out_dir", Value::from(o.display().to_string()));
    }
    for (k, v) in &ov.keys {
        set_path(&mut value, k, v.clone());
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("config error at `{path}`: {}", e.into_inner())
    })?;
    cfg.validate()?;
    Ok(cfg)
}
