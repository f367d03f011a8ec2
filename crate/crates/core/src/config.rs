//! Training configuration, read from and written to flat `key = value`
//! text.

use crate::contrastive::{LevelToggles, PoolScope, SimilarityConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::intent::VotingConfig;
use crate::model::ModelConfig;
use crate::slot::GatActivation;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

/// Auxiliary loss terms that can be switched off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub cucl: bool,
    pub fucl: bool,
    pub scl: bool,
    pub wcl: bool,
    pub skl: bool,
    pub ikl: bool,
}

impl LossToggles {
    pub const ALL: Self = Self {
        cucl: true,
        fucl: true,
        scl: true,
        wcl: true,
        skl: true,
        ikl: true,
    };
    pub const NONE: Self = Self {
        cucl: false,
        fucl: false,
        scl: false,
        wcl: false,
        skl: false,
        ikl: false,
    };

    pub fn levels(&self) -> LevelToggles {
        LevelToggles {
            coarse: self.cucl,
            fine: self.fucl,
            slot: self.scl,
            word: self.wcl,
        }
    }

    pub fn any_contrastive(&self) -> bool {
        self.cucl || self.fucl || self.scl || self.wcl
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cucl: f64,
    pub fucl: f64,
    pub scl: f64,
    pub wcl: f64,
    pub skl: f64,
    pub ikl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cucl: 1.0,
            fucl: 1.0,
            scl: 1.0,
            wcl: 1.0,
            skl: 1.0,
            ikl: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub decoder_hidden: usize,
    pub intent_head_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub gat_layers: usize,
    pub gat_activation: String,
    pub window: usize,
    pub vote_threshold: f64,
    pub tau: f64,
    pub margin_k: usize,
    pub negatives: usize,
    pub dedup_dictionary: bool,
    pub label_smoothing: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub toggles: LossToggles,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            embed_dim: 128,
            lstm_hidden: 256,
            decoder_hidden: 256,
            intent_head_dim: 256,
            heads: 4,
            dropout: 0.4,
            gat_layers: 2,
            gat_activation: "sigmoid".into(),
            window: 2,
            vote_threshold: 0.5,
            tau: 2.0,
            margin_k: 4,
            negatives: 8,
            dedup_dictionary: false,
            label_smoothing: 0.1,
            learning_rate: 1e-3,
            max_epochs: 100,
            patience: 3,
            seed: 1,
            toggles: LossToggles::ALL,
            weights: LossWeights::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    /// Small dimensions for quick experiments and tests.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 16,
            lstm_hidden: 16,
            decoder_hidden: 16,
            intent_head_dim: 16,
            heads: 2,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "batch_size" => self.batch_size = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "lstm_hidden" => self.lstm_hidden = parse(key, v)?,
            "decoder_hidden" => self.decoder_hidden = parse(key, v)?,
            "intent_head_dim" => self.intent_head_dim = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "gat_layers" => self.gat_layers = parse(key, v)?,
            "gat_activation" => {
                GatActivation::from_str(v)?;
                self.gat_activation = v.to_string();
            }
            "window" => self.window = parse(key, v)?,
            "vote_threshold" => self.vote_threshold = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "margin_k" => self.margin_k = parse(key, v)?,
            "negatives" => self.negatives = parse(key, v)?,
            "dedup_dictionary" => self.dedup_dictionary = parse(key, v)?,
            "label_smoothing" => self.label_smoothing = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "enable_cucl" => self.toggles.cucl = parse(key, v)?,
            "enable_fucl" => self.toggles.fucl = parse(key, v)?,
            "enable_scl" => self.toggles.scl = parse(key, v)?,
            "enable_wcl" => self.toggles.wcl = parse(key, v)?,
            "enable_skl" => self.toggles.skl = parse(key, v)?,
            "enable_ikl" => self.toggles.ikl = parse(key, v)?,
            "weight_cucl" => self.weights.cucl = parse(key, v)?,
            "weight_fucl" => self.weights.fucl = parse(key, v)?,
            "weight_scl" => self.weights.scl = parse(key, v)?,
            "weight_wcl" => self.weights.wcl = parse(key, v)?,
            "weight_skl" => self.weights.skl = parse(key, v)?,
            "weight_ikl" => self.weights.ikl = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Starts from the defaults and applies every `key = value` line.
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1))
            })?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let t = &self.toggles;
        let w = &self.weights;
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("batch_size", &self.batch_size);
        kv("embed_dim", &self.embed_dim);
        kv("lstm_hidden", &self.lstm_hidden);
        kv("decoder_hidden", &self.decoder_hidden);
        kv("intent_head_dim", &self.intent_head_dim);
        kv("heads", &self.heads);
        kv("dropout", &self.dropout);
        kv("gat_layers", &self.gat_layers);
        kv("gat_activation", &self.gat_activation);
        kv("window", &self.window);
        kv("vote_threshold", &self.vote_threshold);
        kv("tau", &self.tau);
        kv("margin_k", &self.margin_k);
        kv("negatives", &self.negatives);
        kv("dedup_dictionary", &self.dedup_dictionary);
        kv("label_smoothing", &self.label_smoothing);
        kv("learning_rate", &self.learning_rate);
        kv("max_epochs", &self.max_epochs);
        kv("patience", &self.patience);
        kv("seed", &self.seed);
        kv("enable_cucl", &t.cucl);
        kv("enable_fucl", &t.fucl);
        kv("enable_scl", &t.scl);
        kv("enable_wcl", &t.wcl);
        kv("enable_skl", &t.skl);
        kv("enable_ikl", &t.ikl);
        kv("weight_cucl", &w.cucl);
        kv("weight_fucl", &w.fucl);
        kv("weight_scl", &w.scl);
        kv("weight_wcl", &w.wcl);
        kv("weight_skl", &w.skl);
        kv("weight_ikl", &w.ikl);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("embed_dim", self.embed_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("intent_head_dim", self.intent_head_dim),
            ("heads", self.heads),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        let w = &self.weights;
        if [w.cucl, w.fucl, w.scl, w.wcl, w.skl, w.ikl].iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        self.model_config()?;
        self.similarity().validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let encoder = EncoderConfig::new(self.embed_dim, self.lstm_hidden, self.heads, self.dropout)?;
        encoder.validate()?;
        let voting = VotingConfig {
            threshold: self.vote_threshold,
        };
        voting.validate()?;
        Ok(ModelConfig {
            encoder,
            decoder_hidden: self.decoder_hidden,
            intent_head_dim: self.intent_head_dim,
            gat_layers: self.gat_layers,
            window: self.window,
            gat_activation: self.gat_activation.parse()?,
            voting,
        })
    }

    pub fn similarity(&self) -> SimilarityConfig {
        SimilarityConfig {
            k: self.margin_k,
            tau: self.tau,
            pool_scope: PoolScope::Batch,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::tiny();
        cfg.toggles.wcl = false;
        cfg.weights.skl = 0.25;
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn defaults_follow_published_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.embed_dim, c.lstm_hidden, c.heads), (16, 128, 256, 4));
        assert_eq!((c.gat_layers, c.tau, c.label_smoothing, c.patience), (2, 2.0, 0.1, 3));
        assert_eq!(c.toggles, LossToggles::ALL);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        assert!(matches!(TrainConfig::parse("enable_cucll = true"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("tau 2"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("patience = 0"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("heads = 3"), Err(Error::Config(_))));
        let c = TrainConfig::parse("# ablation\nenable_skl = false\n\n").unwrap();
        assert!(!c.toggles.skl);
    }
}
