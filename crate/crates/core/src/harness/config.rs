//! Experiment configuration: a flat `key = value` file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::align::{AlignConfig, DEFAULT_TOKEN_CAP};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::objective::LossWeights;
use crate::phantom::{Field, GridSpec};
use crate::textenc::{LmConfig, Vocabulary, PRETRAIN_SENTENCES, PRETRAIN_STEPS};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub grid: [usize; 3],
    pub spacing: [f32; 3],
    pub patch: [usize; 3],
    pub channels: Vec<usize>,
    pub prompts: usize,
    pub prompt_len: usize,
    pub lm_dim: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_steps: usize,
    pub lm_sentences: usize,
    pub lm_seed: u64,
    pub lm_checkpoint: Option<PathBuf>,
    pub align_blocks: usize,
    pub align_heads: usize,
    pub align_levels: Option<usize>,
    pub token_cap: usize,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the training cases.
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub train_cases: usize,
    pub test_cases: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub omit: Vec<Field>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Multimodal,
            grid: [64, 64, 32],
            spacing: [1.0, 1.0, 3.0],
            patch: [64, 64, 32],
            channels: vec![16, 32, 64, 128],
            prompts: 4,
            prompt_len: 8,
            lm_dim: 64,
            lm_layers: 2,
            lm_heads: 4,
            lm_steps: PRETRAIN_STEPS,
            lm_sentences: PRETRAIN_SENTENCES,
            lm_seed: 1,
            lm_checkpoint: None,
            align_blocks: 2,
            align_heads: 4,
            align_levels: None,
            token_cap: DEFAULT_TOKEN_CAP,
            ce_weight: 1.0,
            dice_weight: 1.0,
            lr: 1e-4,
            weight_decay: 1e-2,
            epochs: 30,
            steps_per_epoch: 0,
            batch_size: 2,
            train_fraction: 1.0,
            train_cases: 256,
            test_cases: 64,
            train_seed: 1,
            test_seed: 2,
            train_manifest: None,
            test_manifest: None,
            omit: Vec::new(),
            seed: 0,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("bad value for '{key}': '{value}'")))
}

fn parse_list<V: FromStr>(key: &str, value: &str, sep: char) -> Result<Vec<V>> {
    value.split(sep).map(|p| parse(key, p.trim())).collect()
}

fn parse_triple<V: FromStr + Copy>(key: &str, value: &str, sep: char) -> Result<[V; 3]> {
    let v: Vec<V> = parse_list(key, value, sep)?;
    v.try_into().map_err(|_| Error::Config(format!("'{key}' needs three values, got '{value}'")))
}

fn join<V: ToString>(v: &[V], sep: &str) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

impl ExperimentConfig {
    /// Defaults for a variant, with the prompt shape it implies.
    pub fn for_variant(variant: Variant) -> Self {
        let m = ModelConfig::new(variant, Vec::new());
        Self { variant, prompts: m.prompts, prompt_len: m.prompt_len, ..Self::default() }
    }

    /// Parses `key = value` lines over the defaults of the named variant.
    /// Blank lines and `#` comments are skipped; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let variant = match pairs.iter().rev().find(|(k, _)| k == "variant") {
            Some((_, v)) => v.parse()?,
            None => Variant::Multimodal,
        };
        let mut c = Self::for_variant(variant);
        for (k, v) in &pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "variant" => self.variant = v.parse()?,
            "grid" => self.grid = parse_triple(key, v, 'x')?,
            "spacing" => self.spacing = parse_triple(key, v, ',')?,
            "patch" => self.patch = parse_triple(key, v, 'x')?,
            "channels" => self.channels = parse_list(key, v, ',')?,
            "prompts" => self.prompts = parse(key, v)?,
            "prompt_len" => self.prompt_len = parse(key, v)?,
            "lm_dim" => self.lm_dim = parse(key, v)?,
            "lm_layers" => self.lm_layers = parse(key, v)?,
            "lm_heads" => self.lm_heads = parse(key, v)?,
            "lm_steps" => self.lm_steps = parse(key, v)?,
            "lm_sentences" => self.lm_sentences = parse(key, v)?,
            "lm_seed" => self.lm_seed = parse(key, v)?,
            "lm_checkpoint" => self.lm_checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "align_blocks" => self.align_blocks = parse(key, v)?,
            "align_heads" => self.align_heads = parse(key, v)?,
            "align_levels" => self.align_levels = if v == "all" { None } else { Some(parse(key, v)?) },
            "token_cap" => self.token_cap = parse(key, v)?,
            "ce_weight" => self.ce_weight = parse(key, v)?,
            "dice_weight" => self.dice_weight = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "train_cases" => self.train_cases = parse(key, v)?,
            "test_cases" => self.test_cases = parse(key, v)?,
            "train_seed" => self.train_seed = parse(key, v)?,
            "test_seed" => self.test_seed = parse(key, v)?,
            "train_manifest" => self.train_manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "test_manifest" => self.test_manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "omit" => self.omit = if v.is_empty() || v == "none" { Vec::new() } else { parse_list(key, v, ',')? },
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical text form; `parse(render())` returns an equal config.
    pub fn render(&self) -> String {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("variant", self.variant.to_string());
        kv("grid", join(&self.grid, "x"));
        kv("spacing", join(&self.spacing, ","));
        kv("patch", join(&self.patch, "x"));
        kv("channels", join(&self.channels, ","));
        kv("prompts", self.prompts.to_string());
        kv("prompt_len", self.prompt_len.to_string());
        kv("lm_dim", self.lm_dim.to_string());
        kv("lm_layers", self.lm_layers.to_string());
        kv("lm_heads", self.lm_heads.to_string());
        kv("lm_steps", self.lm_steps.to_string());
        kv("lm_sentences", self.lm_sentences.to_string());
        kv("lm_seed", self.lm_seed.to_string());
        kv("lm_checkpoint", opt_path(&self.lm_checkpoint));
        kv("align_blocks", self.align_blocks.to_string());
        kv("align_heads", self.align_heads.to_string());
        kv("align_levels", self.align_levels.map_or("all".into(), |k| k.to_string()));
        kv("token_cap", self.token_cap.to_string());
        kv("ce_weight", self.ce_weight.to_string());
        kv("dice_weight", self.dice_weight.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("epochs", self.epochs.to_string());
        kv("steps_per_epoch", self.steps_per_epoch.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("train_fraction", self.train_fraction.to_string());
        kv("train_cases", self.train_cases.to_string());
        kv("test_cases", self.test_cases.to_string());
        kv("train_seed", self.train_seed.to_string());
        kv("test_seed", self.test_seed.to_string());
        kv("train_manifest", opt_path(&self.train_manifest));
        kv("test_manifest", opt_path(&self.test_manifest));
        kv("omit", if self.omit.is_empty() { "none".into() } else { join(&self.omit, ",") });
        kv("seed", self.seed.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch.iter().zip(&self.grid).any(|(p, g)| p > g || *p == 0) {
            return bad(format!("patch {:?} must be positive and fit in grid {:?}", self.patch, self.grid));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("spacing {:?} must be positive", self.spacing));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction {} must lie in (0, 1]", self.train_fraction));
        }
        if self.training_count(self.train_cases) == 0 {
            return bad(format!("train_fraction {} of {} cases leaves no training case", self.train_fraction, self.train_cases));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad(format!("lr {} must be positive and weight_decay {} non-negative", self.lr, self.weight_decay));
        }
        self.loss_weights().validate()?;
        let f = 1usize << self.channels.len().saturating_sub(1);
        if self.patch.iter().any(|d| d % f != 0) {
            return bad(format!("patch {:?} is not divisible by {f} for {} levels", self.patch, self.channels.len()));
        }
        if let Some(k) = self.align_levels {
            if k == 0 || k > self.channels.len() {
                return bad(format!("align_levels {k} must lie in 1..={}", self.channels.len()));
            }
        }
        if self.align_heads == 0 || self.channels.iter().any(|c| c % self.align_heads != 0) {
            return bad(format!("every channel width {:?} must be divisible by align_heads {}", self.channels, self.align_heads));
        }
        self.model_config().validate()
    }

    /// Cases kept for training out of `available`.
    pub fn training_count(&self, available: usize) -> usize {
        ((available as f64 * self.train_fraction).round() as usize).min(available)
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec { dims: self.grid, spacing: self.spacing }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { ce: self.ce_weight, dice: self.dice_weight }
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig { layers: self.lm_layers, dim: self.lm_dim, heads: self.lm_heads, vocab: Vocabulary::clinical().len() }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            channels: self.channels.clone(),
            prompts: self.prompts,
            prompt_len: self.prompt_len,
            lm: self.lm_config(),
            align: AlignConfig { blocks: self.align_blocks, heads: self.align_heads, token_cap: self.token_cap },
            align_levels: self.align_levels,
        }
    }
}
