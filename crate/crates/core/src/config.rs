//! Flat `key = value` training configuration.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::gcn::GcnConfig;
use crate::losses::{LossWeights, NceConfig};
use crate::networks::NetConfig;
use crate::segmentation::NceNegatives;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_e: f64,
    pub lr_mapping: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_adv: f64,
    pub lambda_spatio: f64,
    pub lambda_info: f64,
    pub lambda_cycle: f64,
    pub lambda_style: f64,
    pub r1_gamma: f64,
    pub nce_eta: f64,
    pub nce_negatives: NceNegatives,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub resolution: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub style_dim: usize,
    pub z_dim: usize,
    pub mapping_hidden: usize,
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    pub gcn_out: usize,
    pub share_gcn_params: bool,
    pub feature_dim: usize,
    pub segmenter: String,
    pub extractor: String,
    pub extractor_steps: usize,
    pub flip_probability: f64,
    pub freeze_z: bool,
    /// Fraction of each batch styled through the mapping network instead of a
    /// reference image.
    pub latent_fraction: f64,
    /// Trailing fraction of each domain held out from training.
    pub held_out_fraction: f64,
    pub eval_every: u64,
    pub eval_samples: usize,
    pub ndb_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            iterations: 3000,
            batch_size: 8,
            lr_g: 1e-4,
            lr_d: 1e-4,
            lr_e: 1e-4,
            lr_mapping: 1e-6,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            lambda_adv: w.lambda_adv,
            lambda_spatio: w.lambda_spatio,
            lambda_info: w.lambda_info,
            lambda_cycle: w.lambda_cycle,
            lambda_style: w.lambda_style,
            r1_gamma: 1.0,
            nce_eta: NceConfig::default().eta,
            nce_negatives: NceNegatives::WithinPair,
            seed: 0,
            checkpoint_every: 500,
            resolution: 64,
            base_width: 32,
            max_width: 256,
            style_dim: 64,
            z_dim: 16,
            mapping_hidden: 128,
            gcn_layers: 2,
            gcn_hidden: 64,
            gcn_out: 32,
            share_gcn_params: false,
            feature_dim: 128,
            segmenter: "oracle".into(),
            extractor: "toy_contrastive".into(),
            extractor_steps: 300,
            flip_probability: 0.5,
            freeze_z: false,
            latent_fraction: 0.25,
            held_out_fraction: 0.2,
            eval_every: 0,
            eval_samples: 64,
            ndb_k: 50,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_adv: self.lambda_adv,
            lambda_spatio: self.lambda_spatio,
            lambda_info: self.lambda_info,
            lambda_cycle: self.lambda_cycle,
            lambda_style: self.lambda_style,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            resolution: self.resolution,
            base_width: self.base_width,
            max_width: self.max_width,
            style_dim: self.style_dim,
            z_dim: self.z_dim,
            mapping_hidden: self.mapping_hidden,
            ..NetConfig::default()
        }
    }

    pub fn gcn_config(&self, in_dim: usize) -> GcnConfig {
        GcnConfig {
            in_dim,
            layers: self.gcn_layers,
            hidden: self.gcn_hidden,
            out_dim: self.gcn_out,
            ..GcnConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        for (k, v) in [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("lr_e", self.lr_e),
            ("lr_mapping", self.lr_mapping),
            ("nce_eta", self.nce_eta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (k, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("flip_probability", self.flip_probability),
            ("latent_fraction", self.latent_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must be in [0, 1], got {v}")));
            }
        }
        if self.r1_gamma < 0.0 {
            return Err(Error::Config("r1_gamma must be >= 0".into()));
        }
        if self.ndb_k < 2 {
            return Err(Error::Config("ndb_k must be at least 2".into()));
        }
        self.net_config().validate()
    }

    pub fn keys() -> Vec<String> {
        match serde_json::to_value(TrainConfig::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        }
    }

    /// Applies `key=value` assignments on top of `self`.
    pub fn with_overrides<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self> {
        let mut map = match serde_json::to_value(self)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        for a in assignments {
            let a = a.as_ref();
            let (k, v) = a
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {a:?}")))?;
            set_key(&mut map, k.trim(), v.trim())?;
        }
        serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses the flat text format: one `key = value` per line, `#` comments,
    /// strings optionally quoted. Unlisted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<String> = text
            .lines()
            .map(|l| l.split_once('#').map_or(l, |(a, _)| a).trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        let cfg = TrainConfig::default().with_overrides(&lines)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let map = match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let mut out = String::new();
        for (k, v) in map {
            let v = match v {
                Value::String(s) => format!("\"{s}\""),
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn set_key(map: &mut Map<String, Value>, key: &str, raw: &str) -> Result<()> {
    let Some(slot) = map.get_mut(key) else {
        return Err(Error::Config(format!(
            "unknown config key {key:?}; valid keys: {}",
            TrainConfig::keys().join(", ")
        )));
    };
    let unquoted = raw
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(raw);
    *slot = match slot {
        Value::String(_) => Value::String(unquoted.to_string()),
        _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(unquoted.to_string())),
    };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = TrainConfig {
            lambda_info: 0.0,
            nce_negatives: NceNegatives::CrossBatch,
            ..Default::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = TrainConfig::parse("lambda_foo = 1\n").unwrap_err().to_string();
        assert!(err.contains("lambda_spatio"));
    }

    #[test]
    fn comments_and_quotes() {
        let cfg = TrainConfig::parse("# hi\nextractor = \"mean_rgb\"  # trailing\nseed=5\n").unwrap();
        assert_eq!(cfg.extractor, "mean_rgb");
        assert_eq!(cfg.seed, 5);
    }
}
