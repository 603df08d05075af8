//! Checkpoint container: magic `AOSCKPT1`, `u32` format version, `u32` header
//! length, a JSON header, then every tensor in canonical order as an
//! embedded matrix blob (`AOSEMB1` layout, `f32`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::train::{EpochRecord, TrainerOptions};
use super::{AoSParameters, ModelConfig, ModelError};
use crate::embeddings::EmbeddingMatrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AOSCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub name: String,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// How instance losses combine into a batch loss.
    pub loss_reduction: String,
    pub max_epochs: usize,
    pub patience: Option<usize>,
}

impl From<&TrainerOptions> for OptimizerInfo {
    fn from(o: &TrainerOptions) -> Self {
        Self {
            name: "adam".into(),
            learning_rate: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
            batch_size: o.batch_size,
            loss_reduction: "sum".into(),
            max_epochs: o.epochs,
            patience: o.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub optimizer: Option<OptimizerInfo>,
    pub seed: u64,
    /// Epoch the stored parameters come from.
    pub epoch: usize,
    pub dev_metrics: Vec<EpochRecord>,
    /// Statute names in label order.
    pub statutes: Vec<String>,
    pub dtype: String,
    pub tensors: Vec<TensorMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: AoSParameters,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Wraps `params`; tensor metadata is filled in from the parameters.
    pub fn new(mut header: CheckpointHeader, params: AoSParameters) -> Self {
        header.dtype = "f32".into();
        header.tensors = params
            .tensors()
            .iter()
            .map(|t| TensorMeta {
                name: t.name.clone(),
                rows: t.shape.0,
                cols: t.shape.1,
            })
            .collect();
        Self { header, params }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let header = serde_json::to_vec(&self.header).map_err(|e| bad(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for t in self.params.tensors() {
            EmbeddingMatrix::new(
                t.shape.0,
                t.shape.1,
                t.values.iter().map(|&v| v as f32).collect(),
            )
            .write_to(&mut w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| bad(format!("header: {e}")))?;
        header.config.validate()?;

        let mut params = AoSParameters::zeros(&header.config);
        let expected: Vec<(String, (usize, usize))> = params
            .tensors()
            .iter()
            .map(|t| (t.name.clone(), t.shape))
            .collect();
        if expected.len() != header.tensors.len() {
            return Err(bad(format!(
                "header lists {} tensors, config implies {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for (slot, ((name, shape), meta)) in params
            .tensors_mut()
            .into_iter()
            .zip(expected.iter().zip(&header.tensors))
        {
            if &meta.name != name || (meta.rows, meta.cols) != *shape {
                return Err(bad(format!("unexpected tensor {} in header", meta.name)));
            }
            let m = EmbeddingMatrix::read_from(&mut r).map_err(|e| bad(format!("{name}: {e}")))?;
            if (m.rows(), m.cols()) != *shape {
                return Err(bad(format!(
                    "{name}: stored {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    shape.0,
                    shape.1
                )));
            }
            for (dst, &src) in slot.iter_mut().zip(m.as_slice()) {
                *dst = f64::from(src);
            }
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let file = File::open(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::read_from(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(config: &ModelConfig) -> CheckpointHeader {
        CheckpointHeader {
            config: config.clone(),
            optimizer: Some(OptimizerInfo::from(&TrainerOptions::default())),
            seed: 9,
            epoch: 0,
            dev_metrics: vec![],
            statutes: (0..config.num_statutes).map(|i| format!("S{i}")).collect(),
            dtype: String::new(),
            tensors: vec![],
            provenance: None,
        }
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let config = ModelConfig {
            input_dim: 5,
            attn_dim: 3,
            hidden_dim: 4,
            ..ModelConfig::new(2)
        };
        let params = AoSParameters::init(&config, 4);
        let ckpt = Checkpoint::new(header(&config), params.clone());
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back.header, ckpt.header);
        assert_eq!(back.header.tensors[0].name, "w_q.0.0");
        for (a, b) in back.params.tensors().iter().zip(params.tensors()) {
            for (x, y) in a.values.iter().zip(b.values) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_foreign_bytes() {
        assert!(Checkpoint::read_from(&b"AOSEMB1\0\0\0\0\0\0\0\0\0"[..]).is_err());
    }
}
