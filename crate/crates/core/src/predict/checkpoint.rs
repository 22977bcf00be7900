//! Versioned JSON checkpoint of predictor weights plus their config.

use super::network::AttentionWeights;
use super::{PredictError, PredictorConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorDump {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: PredictorConfig,
    tensors: BTreeMap<String, TensorDump>,
}

pub fn save_checkpoint(
    path: &Path,
    weights: &AttentionWeights,
    config: &PredictorConfig,
) -> Result<(), PredictError> {
    let tensors = weights
        .tensors()
        .into_iter()
        .map(|(name, t)| {
            (
                name.to_string(),
                TensorDump {
                    shape: [t.rows(), t.cols()],
                    data: t.data().to_vec(),
                },
            )
        })
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        tensors,
    };
    let json = serde_json::to_string(&file).map_err(|e| PredictError::Format(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(AttentionWeights, PredictorConfig), PredictError> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| PredictError::Format(e.to_string()))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(PredictError::Format(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    file.config.validate()?;
    let mut weights = AttentionWeights::zeros(&file.config);
    for (name, tensor) in weights.tensors_mut() {
        let dump = file
            .tensors
            .get(name)
            .ok_or_else(|| PredictError::Format(format!("missing tensor {name}")))?;
        if dump.shape != [tensor.rows(), tensor.cols()] {
            return Err(PredictError::Format(format!(
                "tensor {name}: shape {:?} does not match expected {:?}",
                dump.shape,
                [tensor.rows(), tensor.cols()]
            )));
        }
        tensor.data_mut().copy_from_slice(&dump.data);
    }
    Ok((weights, file.config))
}
