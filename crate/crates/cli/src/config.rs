//! Config file handling. The file holds up to three sections, each of which
//! overrides the preset's values key by key:
//!
//! ```json
//! { "network": { "seed": 3 }, "train": { "epochs": 2 }, "device": { "q": 2.0 } }
//! ```

use std::path::Path;

use rfcnn::device::DeviceParams;
use rfcnn::network::NetworkConfig;
use rfcnn::training::{Preset, TrainConfig};
use serde::Deserialize;
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    network: Map<String, Value>,
    #[serde(default)]
    train: Map<String, Value>,
    #[serde(default)]
    device: Map<String, Value>,
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

fn overlay<T>(base: &T, patch: &Map<String, Value>, section: &str) -> Result<T, CliError>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut v = serde_json::to_value(base).expect("config serializes");
    let obj = v.as_object_mut().expect("config is an object");
    for (k, val) in patch {
        obj.insert(k.clone(), val.clone());
    }
    serde_json::from_value(v).map_err(|e| CliError::Config(format!("[{section}] {e}")))
}

/// Read `path` (if any) and resolve it against the preset. A preset given on
/// the command line wins over one in the file.
pub fn resolve(path: Option<&Path>, preset: Option<Preset>, seed: Option<u64>) -> Result<Resolved, CliError> {
    let file = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<ConfigFile>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => ConfigFile::default(),
    };
    let file_preset = match file.train.get("preset") {
        Some(v) => Some(
            serde_json::from_value::<Preset>(v.clone()).map_err(|e| CliError::Config(format!("[train] preset: {e}")))?,
        ),
        None => None,
    };
    let preset = preset.or(file_preset).unwrap_or_default();
    let base_train = match preset {
        Preset::Full => TrainConfig::default(),
        Preset::Desk => TrainConfig::desk(),
    };
    let mut train: TrainConfig = overlay(&base_train, &file.train, "train")?;
    train.preset = preset;

    let mut network: NetworkConfig = overlay(&preset.network(), &file.network, "network")?;
    network.device = overlay::<DeviceParams>(&network.device, &file.device, "device")?;
    if let Some(s) = seed {
        train.seed = s;
        network.seed = s;
    }
    network.validate().map_err(|e| CliError::Config(e.to_string()))?;
    train.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Resolved { network, train })
}
