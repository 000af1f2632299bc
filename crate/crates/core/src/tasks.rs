//! Task descriptions and training samples.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::objectives::HeadKind;
use crate::types::{Document, Format};

/// Documents by id.
pub type DocIndex = HashMap<String, Document>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Multiclass,
    Multilabel,
    Regression,
    Triplet,
}

impl Objective {
    pub fn fits(self, format: Format) -> bool {
        matches!(
            (format, self),
            (Format::Clf, Objective::Multiclass | Objective::Multilabel)
                | (Format::Rgn, Objective::Regression)
                | (Format::Prx | Format::Srch, Objective::Triplet)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub format: Format,
    pub objective: Objective,
    #[serde(default)]
    pub train_path: String,
    #[serde(default)]
    pub test_path: String,
    /// Largest number of training samples drawn from this task.
    pub cap: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !self.objective.fits(self.format) {
            return Err(format!("task `{}`: objective {:?} does not fit format {}", self.name, self.objective, self.format));
        }
        if self.cap == 0 {
            return Err(format!("task `{}`: cap must be at least 1", self.name));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Multi(Vec<bool>),
    Scalar(f64),
}

/// The query side of a triplet: a corpus document or free text.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryRef {
    Doc(String),
    Text(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sample {
    Labeled { doc: String, label: Label },
    Triplet { query: QueryRef, pos: String, neg: String },
}

/// A task ready for training: its spec, head shape and sample pool.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTask {
    pub spec: TaskSpec,
    /// `None` for triplet tasks, which need no head.
    pub head: Option<HeadKind>,
    pub samples: Vec<Sample>,
}

impl TrainingTask {
    /// Checks that samples agree with the objective and head.
    pub fn validate(&self) -> Result<(), String> {
        self.spec.validate()?;
        let name = &self.spec.name;
        for s in &self.samples {
            let ok = match (self.spec.objective, self.head, s) {
                (Objective::Multiclass, Some(HeadKind::Multiclass(k)), Sample::Labeled { label: Label::Class(c), .. }) => *c < k,
                (Objective::Multilabel, Some(HeadKind::Multilabel(k)), Sample::Labeled { label: Label::Multi(v), .. }) => {
                    v.len() == k
                }
                (Objective::Regression, Some(HeadKind::Regression), Sample::Labeled { label: Label::Scalar(y), .. }) => {
                    y.is_finite()
                }
                (Objective::Triplet, None, Sample::Triplet { pos, neg, .. }) => pos != neg,
                _ => false,
            };
            if !ok {
                return Err(format!("task `{name}`: sample {s:?} does not match its objective"));
            }
        }
        Ok(())
    }
}
