//! Self-describing JSON checkpoints: format tag, version, architecture dims, every parameter
//! group in declared order, and the training recipe that produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, NetError, TinyResNet, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "lungpatch-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub in_channels: usize,
    pub base_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub len: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub arch: Architecture,
    pub params: Vec<ParamGroup>,
    pub train_config: TrainConfig,
    pub class_weights: (f64, f64),
    #[serde(default)]
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn new(
        net: &TinyResNet,
        train_config: TrainConfig,
        class_weights: (f64, f64),
        history: Vec<EpochRecord>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch: Architecture {
                name: "tiny-resnet".into(),
                in_channels: net.in_channels,
                base_channels: net.base_channels,
            },
            params: net
                .params()
                .into_iter()
                .map(|(name, v)| ParamGroup {
                    name: name.into(),
                    len: v.len(),
                    values: v.to_vec(),
                })
                .collect(),
            train_config,
            class_weights,
            history,
        }
    }

    /// Rebuilds the network, checking format, version and every group's name and length.
    pub fn network(&self) -> Result<TinyResNet, NetError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(NetError::Checkpoint(format!(
                "unknown format {:?}",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(NetError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        if self.arch.name != "tiny-resnet" || self.arch.base_channels == 0 {
            return Err(NetError::Checkpoint(format!(
                "unsupported architecture {:?}",
                self.arch
            )));
        }
        let mut net = TinyResNet::zeros(self.arch.in_channels, self.arch.base_channels);
        let slots = net.params_mut();
        if slots.len() != self.params.len() {
            return Err(NetError::Checkpoint(format!(
                "expected {} parameter groups, found {}",
                slots.len(),
                self.params.len()
            )));
        }
        for ((name, slot), group) in slots.into_iter().zip(&self.params) {
            if group.name != name || group.values.len() != slot.len() || group.len != slot.len() {
                return Err(NetError::Checkpoint(format!(
                    "parameter group {:?} ({} values) does not match {name} ({} values)",
                    group.name,
                    group.values.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(&group.values);
        }
        if !net.all_finite() {
            return Err(NetError::Checkpoint("non-finite parameter".into()));
        }
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NetError> {
        serde_json::from_str(text).map_err(|e| NetError::Checkpoint(e.to_string()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), NetError> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_json()).map_err(|e| NetError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, NetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| NetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Checkpoint::from_json(&text)
}
