//! Shared domain vocabulary: documents, task formats and control codes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Unit of encoding: title plus abstract, with optional venue/year metadata.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub venue: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, abstract_text: impl Into<String>) -> Self {
        Self { id: id.into(), title: title.into(), abstract_text: abstract_text.into(), venue: None, year: None }
    }

    /// A search query: the raw query text sits in the title slot.
    pub fn query(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self::new(id, text, "")
    }
}

/// The four task formats an embedding can be specialized for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Format {
    Clf,
    Rgn,
    Prx,
    Srch,
}

impl Format {
    pub const ALL: [Format; 4] = [Format::Clf, Format::Rgn, Format::Prx, Format::Srch];

    /// Code used for the documents this format consumes.
    pub fn doc_code(self) -> ControlCode {
        match self {
            Format::Clf => ControlCode::Clf,
            Format::Rgn => ControlCode::Rgn,
            Format::Prx | Format::Srch => ControlCode::Prx,
        }
    }

    /// Code used for the query side (differs from `doc_code` only for search).
    pub fn query_code(self) -> ControlCode {
        match self {
            Format::Srch => ControlCode::Qry,
            other => other.doc_code(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Format::Clf => "CLF",
            Format::Rgn => "RGN",
            Format::Prx => "PRX",
            Format::Srch => "SRCH",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CLF" => Ok(Format::Clf),
            "RGN" => Ok(Format::Rgn),
            "PRX" => Ok(Format::Prx),
            "SRCH" => Ok(Format::Srch),
            other => Err(format!("unknown format `{other}`")),
        }
    }
}

/// Reserved input token marking which format an input is encoded for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ControlCode {
    Clf,
    Rgn,
    Prx,
    Qry,
}

impl ControlCode {
    pub const ALL: [ControlCode; 4] = [ControlCode::Clf, ControlCode::Rgn, ControlCode::Prx, ControlCode::Qry];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ControlCode::Clf => "CLF",
            ControlCode::Rgn => "RGN",
            ControlCode::Prx => "PRX",
            ControlCode::Qry => "QRY",
        }
    }
}

impl fmt::Display for ControlCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for ControlCode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CLF" => Ok(ControlCode::Clf),
            "RGN" => Ok(ControlCode::Rgn),
            "PRX" => Ok(ControlCode::Prx),
            "QRY" => Ok(ControlCode::Qry),
            other => Err(format!("unknown control code `{other}`")),
        }
    }
}
