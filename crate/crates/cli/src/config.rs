use std::fs;
use std::path::Path;

use acdg::baselines::DenoiserSpec;
use acdg::spectra::DatasetConfig;
use acdg::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::Failure;

/// Everything that determines a run. The output directory is left out so
/// that the same run written to two places hashes the same.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset, initialisation, sampler and split seed.
    pub seed: u64,
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub denoisers: Vec<DenoiserSpec>,
    pub protocol: ProtocolOptions,
}

/// The first source condition and fraction are the single-task choice;
/// the full lists drive the protocol. An empty source list means every
/// condition in the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolOptions {
    pub source_conditions: Vec<f64>,
    pub train_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DatasetConfig::desk();
        let train = TrainConfig::desk(data.axis_length, data.strains);
        Self {
            seed: 0,
            data,
            train,
            denoisers: DenoiserSpec::defaults(),
            protocol: ProtocolOptions {
                source_conditions: vec![0.1],
                train_fractions: vec![0.2],
                seeds: vec![0],
            },
        }
    }
}

/// Recursively overlays `top` onto `base`. Objects merge key by key;
/// anything else replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
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

impl RunConfig {
    /// Overlays a JSON config file on `self`. Unknown keys are rejected.
    pub fn with_file(self, path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("--config {}: {e}", path.display())))?;
        let top: Value =
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("--config {}: {e}", path.display())))?;
        self.with_value(top).map_err(|e| Failure::usage(format!("--config {}: {}", path.display(), e.msg)))
    }

    pub fn with_value(self, top: Value) -> Result<Self, Failure> {
        let mut base = serde_json::to_value(&self).expect("plain struct");
        merge(&mut base, top);
        serde_json::from_value(base).map_err(|e| Failure::usage(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// Checks the parts every command relies on.
    pub fn validate(&self) -> Result<(), Failure> {
        let bad = |m: String| Err(Failure::usage(m));
        if self.data.per_cell == 0 {
            return bad("data.per_cell must be at least 1".into());
        }
        if self.data.strains < 2 {
            return bad("data.strains must be at least 2".into());
        }
        if self.data.conditions.is_empty() || self.data.conditions.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return bad("data.conditions must be a non-empty list of positive times".into());
        }
        if self.protocol.train_fractions.is_empty()
            || self.protocol.train_fractions.iter().any(|&f| !(f > 0.0 && f < 1.0))
        {
            return bad("protocol.train_fractions must lie in (0, 1)".into());
        }
        if self.protocol.seeds.is_empty() {
            return bad("protocol.seeds must not be empty".into());
        }
        if self.protocol.source_conditions.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return bad("protocol.source_conditions must be positive".into());
        }
        let mut train = self.train.clone();
        train.epochs = train.epochs.max(1);
        train.validate().map_err(Failure::from)?;
        for d in &self.denoisers {
            d.validate(self.data.axis_length)
                .map_err(|e| Failure::usage(format!("denoiser {d}: {e}")))?;
        }
        Ok(())
    }

    /// The single source condition of a one-task command.
    pub fn source_condition(&self) -> Result<f64, Failure> {
        match self.protocol.source_conditions.as_slice() {
            [t] => Ok(*t),
            _ => Err(Failure::usage("--source-condition: this command needs exactly one value".into())),
        }
    }

    pub fn train_fraction(&self) -> Result<f64, Failure> {
        match self.protocol.train_fractions.as_slice() {
            [f] => Ok(*f),
            _ => Err(Failure::usage("--train-fraction: this command needs exactly one value".into())),
        }
    }
}
