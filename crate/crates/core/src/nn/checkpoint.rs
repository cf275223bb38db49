//! Versioned parameter checkpoints: the architecture header plus
//! layer-ordered flat arrays, serialized as JSON (f64 round-trips exactly).

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Activation, Layer, MlpParams, MlpSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub version: u32,
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Row-major weight matrices, one per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpCheckpoint {
    pub fn from_params(params: &MlpParams) -> Self {
        let spec = params.spec();
        Self {
            version: CHECKPOINT_FORMAT_VERSION,
            layer_dims: spec.layer_dims,
            activations: spec.activations,
            weights: params
                .layers
                .iter()
                .map(|l| l.weights.iter().copied().collect())
                .collect(),
            biases: params
                .layers
                .iter()
                .map(|l| l.bias.iter().copied().collect())
                .collect(),
        }
    }

    pub fn into_params(self) -> Result<MlpParams> {
        if self.version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let spec = MlpSpec::new(self.layer_dims, self.activations)?;
        if self.weights.len() != spec.activations.len()
            || self.biases.len() != spec.activations.len()
        {
            return Err(Error::contract("checkpoint layer count mismatch"));
        }
        let layers = spec
            .layer_dims
            .windows(2)
            .zip(spec.activations.iter())
            .zip(self.weights.into_iter().zip(self.biases))
            .map(|((dims, &activation), (w, b))| {
                let (fan_in, fan_out) = (dims[0], dims[1]);
                if w.len() != fan_in * fan_out || b.len() != fan_out {
                    return Err(Error::contract("checkpoint array length mismatch"));
                }
                Ok(Layer {
                    weights: Array2::from_shape_vec((fan_in, fan_out), w)
                        .map_err(|e| Error::contract(e.to_string()))?,
                    bias: Array1::from_vec(b),
                    activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MlpParams { layers })
    }
}

pub fn save_mlp(params: &MlpParams, path: &Path) -> Result<()> {
    let json = serde_json::to_string(&MlpCheckpoint::from_params(params))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_mlp(path: &Path) -> Result<MlpParams> {
    let json = std::fs::read_to_string(path)?;
    let ckpt: MlpCheckpoint = serde_json::from_str(&json)?;
    ckpt.into_params()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let spec = MlpSpec::elu_stack(vec![6, 5, 2]).unwrap();
        let params = init_params(&spec, 123);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_mlp(&params, &path).unwrap();
        let back = load_mlp(&path).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn corrupt_shapes_are_rejected() {
        let spec = MlpSpec::elu_stack(vec![3, 2]).unwrap();
        let params = init_params(&spec, 1);
        let mut ckpt = MlpCheckpoint::from_params(&params);
        ckpt.weights[0].pop();
        assert!(ckpt.into_params().is_err());
    }
}
