//! Embedding matrices keyed by id, one per control code.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderError, EncoderModel};
use crate::types::{ControlCode, Document};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("missing embedding for `{id}` under {code}")]
    Missing { id: String, code: ControlCode },
    #[error("embedding sets differ: {0}")]
    Mismatch(String),
}

/// Rows of one format's embedding, ordered by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub code: ControlCode,
    pub dim: usize,
    /// Which model, lead token and route produced the rows.
    pub producer: String,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingMatrix {
    pub fn new(code: ControlCode, dim: usize, producer: impl Into<String>) -> Self {
        Self { code, dim, producer: producer.into(), rows: BTreeMap::new() }
    }

    pub fn get(&self, id: &str) -> Result<&[f64], EmbeddingError> {
        self.rows.get(id).map(Vec::as_slice).ok_or_else(|| EmbeddingError::Missing { id: id.to_string(), code: self.code })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// One matrix per control code.
pub type EmbeddingSet = BTreeMap<ControlCode, EmbeddingMatrix>;

/// Describes how `model` produces embeddings for `code`.
pub fn producer_tag(model: &EncoderModel, code: ControlCode) -> String {
    let lead = match model.lead_for(code) {
        crate::encoder::Lead::Cls => "[CLS]".to_string(),
        crate::encoder::Lead::Code(c) => format!("[{c}]"),
    };
    let route = if model.variant().routes_by_format() { format!("{}/{code}", model.variant()) } else { "none".into() };
    let hash = model.hash_params(|_| true);
    format!("{} params={} lead={lead} route={route}", model.variant(), &hash[..16])
}

/// Embeds every document under every control code.
pub fn embed_documents(model: &EncoderModel, docs: &[Document], with_metadata: bool) -> Result<EmbeddingSet, EncoderError> {
    let refs: Vec<&Document> = docs.iter().collect();
    let mut set = EmbeddingSet::new();
    for code in ControlCode::ALL {
        let vecs = model.embed_all(&refs, code, with_metadata)?;
        let mut m = EmbeddingMatrix::new(code, model.hidden(), producer_tag(model, code));
        for (d, v) in docs.iter().zip(vecs) {
            m.rows.insert(d.id.clone(), v);
        }
        set.insert(code, m);
    }
    Ok(set)
}

/// Elementwise mean of two embedding sets with identical keys and dimensions.
pub fn ensemble_embeddings(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<EmbeddingSet, EmbeddingError> {
    if a.keys().ne(b.keys()) {
        return Err(EmbeddingError::Mismatch("different control codes".into()));
    }
    let mut out = EmbeddingSet::new();
    for (code, ma) in a {
        let mb = &b[code];
        if ma.dim != mb.dim || ma.rows.len() != mb.rows.len() || ma.rows.keys().ne(mb.rows.keys()) {
            return Err(EmbeddingError::Mismatch(format!("{code}: ids or dimensions differ")));
        }
        let mut m = EmbeddingMatrix::new(*code, ma.dim, format!("mean({}; {})", ma.producer, mb.producer));
        for ((id, va), vb) in ma.rows.iter().zip(mb.rows.values()) {
            if va.len() != ma.dim || vb.len() != ma.dim {
                return Err(EmbeddingError::Mismatch(format!("{code}/{id}: row length differs from {}", ma.dim)));
            }
            m.rows.insert(id.clone(), va.iter().zip(vb).map(|(x, y)| (x + y) / 2.0).collect());
        }
        out.insert(*code, m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[(&str, Vec<f64>)]) -> EmbeddingSet {
        let mut m = EmbeddingMatrix::new(ControlCode::Clf, 2, "test");
        for (id, v) in rows {
            m.rows.insert(id.to_string(), v.clone());
        }
        [(ControlCode::Clf, m)].into()
    }

    #[test]
    fn ensemble_examples() {
        let a = set(&[("x", vec![1.0, -2.0]), ("y", vec![0.5, 0.25])]);
        let e = ensemble_embeddings(&a, &a).unwrap();
        assert_eq!(e[&ControlCode::Clf].rows, a[&ControlCode::Clf].rows);
        let neg = set(&[("x", vec![-1.0, 2.0]), ("y", vec![-0.5, -0.25])]);
        let z = ensemble_embeddings(&a, &neg).unwrap();
        assert!(z[&ControlCode::Clf].rows.values().flatten().all(|&v| v == 0.0));
        let other = set(&[("x", vec![1.0, 1.0])]);
        assert!(ensemble_embeddings(&a, &other).is_err());
    }
}
