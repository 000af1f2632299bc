use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderError, EncoderModel};
use crate::autodiff::Tensor;
use crate::types::{ControlCode, Document};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_KIND: &str = "fmtembed-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Embedding of a fixed document stored alongside the weights; reloading must reproduce it bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEmbedding {
    pub doc: Document,
    pub code: ControlCode,
    pub embedding: Vec<f64>,
}

/// Self-describing JSON container: config (including the vocabulary hash seed)
/// and every parameter in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub version: u32,
    pub config: EncoderConfig,
    pub params: Vec<SavedParam>,
    pub reference: ReferenceEmbedding,
}

fn reference_doc() -> Document {
    Document::new("reference", "reference document title", "a short abstract used to verify reloaded weights")
}

impl Checkpoint {
    pub fn from_model(model: &EncoderModel) -> Result<Self, EncoderError> {
        let doc = reference_doc();
        let code = ControlCode::Prx;
        let embedding = model.embed(&doc, code, false)?;
        Ok(Self {
            kind: CHECKPOINT_KIND.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            params: model
                .params()
                .iter()
                .map(|p| SavedParam { name: p.name.clone(), shape: p.value.shape().to_vec(), data: p.value.data().to_vec() })
                .collect(),
            reference: ReferenceEmbedding { doc, code, embedding },
        })
    }

    pub fn into_model(self) -> Result<EncoderModel, EncoderError> {
        if self.kind != CHECKPOINT_KIND {
            return Err(EncoderError::Checkpoint(format!("not a checkpoint (kind `{}`)", self.kind)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(EncoderError::Checkpoint(format!("unsupported checkpoint version {}", self.version)));
        }
        let mut model = EncoderModel::new(self.config, 0)?;
        let values =
            self.params.into_iter().map(|p| Tensor::new(p.shape, p.data).map(|t| (p.name, t))).collect::<Result<Vec<_>, _>>()?;
        model.load_values(values)?;
        let r = &self.reference;
        let again = model.embed(&r.doc, r.code, false)?;
        let same = again.len() == r.embedding.len() && again.iter().zip(&r.embedding).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(EncoderError::Checkpoint("reference embedding does not reproduce".into()));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &EncoderModel, path: &Path) -> Result<(), EncoderError> {
    let ckpt = Checkpoint::from_model(model)?;
    let json = serde_json::to_vec(&ckpt).map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderModel, EncoderError> {
    let bytes = fs::read(path)?;
    let ckpt: Checkpoint =
        serde_json::from_slice(&bytes).map_err(|e| EncoderError::Checkpoint(format!("{}: {e}", path.display())))?;
    ckpt.into_model()
}
