//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, WordConfig};
use crate::nn::NormMode;
use crate::padding::{PaddingMode, BYTE_VOCAB};
use crate::retrieval::{EmbedderKind, MatchStrategy};
use crate::train::TrainConfig;

use super::checkpoint::ModelKind;

/// Every setting a command can read. Unset paths are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub n_layers: usize,
    pub d: usize,
    pub k: usize,
    pub r: usize,
    pub norm: NormMode,
    pub padding: PaddingMode,
    pub hidden: usize,
    pub train: TrainConfig,
    /// Byte model: one text per line. Word model: `premise<TAB>hypothesis<TAB>label`.
    pub train_data: Option<PathBuf>,
    /// Tokenized length range of random training strings.
    pub min_len: usize,
    pub max_len: usize,
    pub calib_samples: usize,
    pub eval_samples: usize,
    pub eval_min_len: usize,
    pub eval_max_len: Option<usize>,
    pub glove: Option<PathBuf>,
    pub embedder: EmbedderKind,
    pub corpus: Option<PathBuf>,
    pub paired: bool,
    pub strategy: MatchStrategy,
    pub top_k: usize,
    pub ig_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        RunConfig {
            model: ModelKind::Byte,
            n_layers: m.n_layers,
            d: m.d,
            k: m.big_k,
            r: m.r,
            norm: m.norm,
            padding: m.padding,
            hidden: 512,
            train: TrainConfig::default(),
            train_data: None,
            min_len: 4,
            max_len: 32,
            calib_samples: 2000,
            eval_samples: 1000,
            eval_min_len: 2,
            eval_max_len: None,
            glove: None,
            embedder: EmbedderKind::Ensemble,
            corpus: None,
            paired: false,
            strategy: MatchStrategy::MatchResponse,
            top_k: 1,
            ig_steps: crate::attribution::DEFAULT_STEPS,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Applies one setting. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        match key {
            "model" => {
                self.model = match value {
                    "byte" => ModelKind::Byte,
                    "word" => ModelKind::Word,
                    _ => return Err(Error::Config(format!("model: expected byte or word, got {value:?}"))),
                }
            }
            "n_layers" => self.n_layers = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "r" => self.r = parse(key, value)?,
            "norm" => self.norm = value.parse()?,
            "padding" => self.padding = value.parse()?,
            "hidden" => self.hidden = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "momentum" => self.train.momentum = parse(key, value)?,
            "clip_norm" => self.train.clip_norm = if value == "none" { None } else { Some(parse(key, value)?) },
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "samples_per_epoch" => self.train.samples_per_epoch = parse(key, value)?,
            "lr_decay_factor" => self.train.lr_decay_factor = parse(key, value)?,
            "lr_decay_after_epoch" => self.train.lr_decay_after_epoch = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "train_data" => self.train_data = path(),
            "min_len" => self.min_len = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "calib_samples" => self.calib_samples = parse(key, value)?,
            "eval_samples" => self.eval_samples = parse(key, value)?,
            "eval_min_len" => self.eval_min_len = parse(key, value)?,
            "eval_max_len" => self.eval_max_len = Some(parse(key, value)?),
            "glove" => self.glove = path(),
            "embedder" => self.embedder = value.parse()?,
            "corpus" => self.corpus = path(),
            "paired" => self.paired = parse_bool(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            "top_k" => self.top_k = parse(key, value)?,
            "ig_steps" => self.ig_steps = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// `key = value` lines; `#` starts a comment, blank lines are ignored.
    pub fn parse_text(text: &str, source: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{source}:{}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {assignment:?}")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d: self.d,
            big_k: self.k,
            r: self.r,
            vocab_size: BYTE_VOCAB,
            norm: self.norm,
            padding: self.padding,
        }
    }

    /// `d_w` is taken from the word vectors when the model is built.
    pub fn word_config(&self) -> WordConfig {
        WordConfig { n_layers: self.n_layers, d_w: self.d, norm: self.norm, hidden: self.hidden }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model == ModelKind::Byte {
            self.model_config().validate()?;
        }
        self.train.validate(self.norm)?;
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::Config(format!("need 2 <= min_len <= max_len, got {}..{}", self.min_len, self.max_len)));
        }
        if self.top_k == 0 || self.ig_steps == 0 {
            return Err(Error::Config("top_k and ig_steps must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_overrides() {
        let cfg = RunConfig::parse_text("# desk\nd = 64\nk=6 # six\n\nclip_norm = none\npadding = right_nearest\n", "c").unwrap();
        assert_eq!((cfg.d, cfg.k, cfg.train.clip_norm), (64, 6, None));
        assert_eq!(cfg.padding, PaddingMode::RightNearest);
        let mut c = cfg.clone();
        c.apply_override("lr=0.25").unwrap();
        assert_eq!(c.train.lr, 0.25);
        assert!(c.apply_override("lr").is_err());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse_text("lerning_rate = 0.1\n", "run.cfg").unwrap_err().to_string();
        assert!(err.contains("lerning_rate") && err.contains("run.cfg:1"), "{err}");
        assert!(RunConfig::parse_text("just words\n", "c").is_err());
        assert!(RunConfig::parse_text("norm = layer\n", "c").is_err());
        assert!(RunConfig::parse_text("d = -3\n", "c").is_err());
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.r = c.k;
        assert!(c.validate().is_err());
        let mut c = RunConfig { min_len: 10, max_len: 4, ..RunConfig::default() };
        assert!(c.validate().is_err());
        c.max_len = 10;
        c.train.momentum = 1.0;
        assert!(c.validate().is_err());
    }
}
