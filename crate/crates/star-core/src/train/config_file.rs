//! UTF-8 `key = value` configuration files with `#` comments, a strict
//! key schema, and a reproducibility fingerprint.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::SyntheticConfig;
use crate::error::{Result, StarError};
use crate::model::{Method, ModelConfig};

use super::TrainConfig;

pub const KNOWN_KEYS: &[&str] = &[
    "data.vocab",
    "data.frame_dim",
    "data.frames_per_token",
    "data.silence_prob",
    "data.silence_len",
    "data.noise_std",
    "data.tokens_per_utterance",
    "data.train",
    "data.val",
    "data.test",
    "train.profile",
    "train.method",
    "train.rate",
    "train.gamma",
    "train.batch_size",
    "train.lr_stage1",
    "train.lr_later",
    "train.stage1_max_steps",
    "train.stage3_max_steps",
    "train.seg_steps",
    "train.stage4_steps",
    "train.wait_k",
    "train.stream_stride",
    "train.eval_every",
    "train.patience",
    "train.plateau_tol",
    "train.max_out_len",
];

/// Parsed key/value pairs, canonically ordered.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigMap {
    pairs: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<ConfigMap> {
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                StarError::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(StarError::Config(format!("line {}: unknown key `{key}`", lineno + 1)));
            }
            if pairs.insert(key.clone(), value).is_some() {
                return Err(StarError::Config(format!("duplicate key `{key}`")));
            }
        }
        Ok(ConfigMap { pairs })
    }

    pub fn load(path: &Path) -> Result<ConfigMap> {
        let text = std::fs::read_to_string(path)?;
        ConfigMap::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(|s| s.as_str())
    }

    fn parse_num<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.pairs.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| StarError::Config(format!("key `{key}`: cannot parse `{v}`"))),
        }
    }

    fn parse_range(&self, key: &str) -> Result<Option<(usize, usize)>> {
        match self.pairs.get(key) {
            None => Ok(None),
            Some(v) => {
                let (lo, hi) = v.split_once("..").ok_or_else(|| {
                    StarError::Config(format!("key `{key}`: expected `lo..hi`, got `{v}`"))
                })?;
                let lo = lo.trim().parse().map_err(|_| {
                    StarError::Config(format!("key `{key}`: bad lower bound `{lo}`"))
                })?;
                let hi = hi.trim().parse().map_err(|_| {
                    StarError::Config(format!("key `{key}`: bad upper bound `{hi}`"))
                })?;
                Ok(Some((lo, hi)))
            }
        }
    }

    /// Synthetic-corpus settings with file defaults applied.
    pub fn data_config(&self, seed: u64) -> Result<SyntheticConfig> {
        let mut cfg = SyntheticConfig { seed, ..Default::default() };
        if let Some(v) = self.parse_num::<usize>("data.vocab")? {
            cfg.content_vocab = v;
        }
        if let Some(v) = self.parse_num::<usize>("data.frame_dim")? {
            cfg.frame_dim = v;
        }
        if let Some(r) = self.parse_range("data.frames_per_token")? {
            cfg.frames_per_token = r;
        }
        if let Some(v) = self.parse_num::<f64>("data.silence_prob")? {
            cfg.silence_prob = v;
        }
        if let Some(r) = self.parse_range("data.silence_len")? {
            cfg.silence_len = r;
        }
        if let Some(v) = self.parse_num::<f64>("data.noise_std")? {
            cfg.noise_std = v;
        }
        if let Some(r) = self.parse_range("data.tokens_per_utterance")? {
            cfg.tokens_per_utterance = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Split sizes: (train, val, test).
    pub fn split_sizes(&self) -> Result<(usize, usize, usize)> {
        Ok((
            self.parse_num::<usize>("data.train")?.unwrap_or(20_000),
            self.parse_num::<usize>("data.val")?.unwrap_or(512),
            self.parse_num::<usize>("data.test")?.unwrap_or(2_000),
        ))
    }

    /// Training settings with file defaults applied. The vocabulary is
    /// sized to the data config.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let data = self.data_config(seed)?;
        let mut cfg = TrainConfig { seed, ..Default::default() };
        match self.get("train.profile").unwrap_or("desk") {
            "desk" => cfg.profile = ModelConfig::desk(),
            "paper" => cfg.profile = ModelConfig::paper(),
            other => {
                return Err(StarError::Config(format!("unknown profile `{other}`")));
            }
        }
        cfg.profile.vocab = data.vocab();
        cfg.profile.frame_dim = data.frame_dim;
        if let Some(m) = self.get("train.method") {
            cfg.method = Method::parse(m)?;
        }
        if let Some(v) = self.parse_num::<f64>("train.rate")? {
            cfg.rate = v;
        }
        if let Some(v) = self.parse_num::<f64>("train.gamma")? {
            cfg.gamma = v;
        }
        if let Some(v) = self.parse_num::<usize>("train.batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = self.parse_num::<f64>("train.lr_stage1")? {
            cfg.lr_stage1 = v;
        }
        if let Some(v) = self.parse_num::<f64>("train.lr_later")? {
            cfg.lr_later = v;
        }
        if let Some(v) = self.parse_num::<usize>("train.stage1_max_steps")? {
            cfg.stage1_max_steps = v;
        }
        if let Some(v) = self.parse_num::<usize>("train.stage3_max_steps")? {
            cfg.stage3_max_steps = v;
        }
        if let Some(v) = self.parse_num::<usize>("train.seg_steps")? {
            cfg.seg_steps = v;
        }
        if let Some(v) = self.parse_num::<usize>("train.stage4_steps")? {
            cfg.stage4_steps = v;
        }
        if let Some(v) = self.parse_num::<usize>("train.wait_k")? {
            cfg.wait_k_train = v;
        }
        if let Some(v) = self.parse_num::<usize>("train.stream_stride")? {
            cfg.stream_stride = v;
        }
        if let Some(v) = self.parse_num::<usize>("train.eval_every")? {
            cfg.eval_every = v;
        }
        if let Some(v) = self.parse_num::<usize>("train.patience")? {
            cfg.patience = v;
        }
        if let Some(v) = self.parse_num::<f64>("train.plateau_tol")? {
            cfg.plateau_tol = v;
        }
        if let Some(v) = self.parse_num::<usize>("train.max_out_len")? {
            cfg.max_out_len = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex digest over the canonical key order plus the seed; written
    /// into every report for reproducibility.
    pub fn fingerprint(&self, seed: u64) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in &self.pairs {
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        hasher.update(seed.to_le_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let cfg = ConfigMap::parse(
            "# corpus\n data.vocab = 32 \n data.frames_per_token = 3..9 # inline\n\n",
        )
        .unwrap();
        assert_eq!(cfg.get("data.vocab"), Some("32"));
        let data = cfg.data_config(1).unwrap();
        assert_eq!(data.content_vocab, 32);
        assert_eq!(data.frames_per_token, (3, 9));
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ConfigMap::parse("data.vocoder = 3").unwrap_err();
        assert!(err.to_string().contains("data.vocoder"));
    }

    #[test]
    fn bad_value_names_key() {
        let cfg = ConfigMap::parse("train.rate = fast").unwrap();
        let err = cfg.train_config(0).unwrap_err();
        assert!(err.to_string().contains("train.rate"));
    }

    #[test]
    fn fingerprint_depends_on_content_and_seed() {
        let a = ConfigMap::parse("data.vocab = 16").unwrap();
        let b = ConfigMap::parse("data.vocab = 17").unwrap();
        assert_ne!(a.fingerprint(0), b.fingerprint(0));
        assert_ne!(a.fingerprint(0), a.fingerprint(1));
        assert_eq!(a.fingerprint(0), a.fingerprint(0));
    }
}
