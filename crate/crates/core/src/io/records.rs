use serde::{Deserialize, Serialize};

use crate::synth::RankQuery;
use crate::tasks::{Label, Objective, QueryRef, Sample};

/// `{query_id | query_text, pos_id, neg_id}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
    pub pos_id: String,
    pub neg_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Class(usize),
    Multi(Vec<bool>),
    Scalar(f64),
}

/// `{id, label}` for classification and regression tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub id: String,
    pub label: LabelValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleRecord {
    Triplet(TripletRecord),
    Label(LabelRecord),
}

/// One graded (query, candidate) pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QrelRecord {
    pub query_id: String,
    pub doc_id: String,
    pub grade: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub id: String,
    pub text: String,
}

pub fn triplet_record(query: &QueryRef, pos: &str, neg: &str) -> TripletRecord {
    let (query_id, query_text) = match query {
        QueryRef::Doc(id) => (Some(id.clone()), None),
        QueryRef::Text(t) => (None, Some(t.clone())),
    };
    TripletRecord { query_id, query_text, pos_id: pos.to_string(), neg_id: neg.to_string() }
}

pub fn label_record(doc: &str, label: &Label) -> LabelRecord {
    let label = match label {
        Label::Class(c) => LabelValue::Class(*c),
        Label::Multi(v) => LabelValue::Multi(v.clone()),
        Label::Scalar(y) => LabelValue::Scalar(*y),
    };
    LabelRecord { id: doc.to_string(), label }
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        match s {
            Sample::Triplet { query, pos, neg } => SampleRecord::Triplet(triplet_record(query, pos, neg)),
            Sample::Labeled { doc, label } => SampleRecord::Label(label_record(doc, label)),
        }
    }
}

/// Interprets a record under `objective`; integral regression targets are accepted.
pub fn sample_from_record(r: SampleRecord, objective: Objective) -> Result<Sample, String> {
    match (r, objective) {
        (SampleRecord::Triplet(t), Objective::Triplet) => {
            let query = match (t.query_id, t.query_text) {
                (Some(id), None) => QueryRef::Doc(id),
                (None, Some(text)) => QueryRef::Text(text),
                _ => return Err("a triplet needs exactly one of query_id and query_text".into()),
            };
            Ok(Sample::Triplet { query, pos: t.pos_id, neg: t.neg_id })
        }
        (SampleRecord::Label(l), obj) => {
            let label = match (l.label, obj) {
                (LabelValue::Class(c), Objective::Multiclass) => Label::Class(c),
                (LabelValue::Multi(v), Objective::Multilabel) => Label::Multi(v),
                (LabelValue::Scalar(y), Objective::Regression) => Label::Scalar(y),
                (LabelValue::Class(c), Objective::Regression) => Label::Scalar(c as f64),
                (v, o) => return Err(format!("label {v:?} of `{}` does not fit objective {o:?}", l.id)),
            };
            Ok(Sample::Labeled { doc: l.id, label })
        }
        (SampleRecord::Triplet(_), o) => Err(format!("triplet record in a {o:?} task")),
    }
}

pub fn qrels_of(queries: &[RankQuery]) -> Vec<QrelRecord> {
    queries
        .iter()
        .flat_map(|q| q.candidates.iter().map(|(d, g)| QrelRecord { query_id: q.query.clone(), doc_id: d.clone(), grade: *g }))
        .collect()
}
