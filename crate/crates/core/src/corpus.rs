//! Study records and the line-delimited corpus file format.
//!
//! One JSON object per line:
//! `{"id": "...", "title": "...", "summary": "...", "design": "...", "label": "positive"}`.
//! `label` is optional; a record without it is unlabeled.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Literal separator placed between record fields.
pub const SEP_TEXT: &str = "[SEP]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    /// Class index used by logits and probability pairs: positive first.
    pub fn index(self) -> usize {
        match self {
            Label::Positive => 0,
            Label::Negative => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub summary: String,
    #[serde(default)]
    pub design: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl StudyRecord {
    pub fn new(id: impl Into<String>, title: impl Into<String>, summary: impl Into<String>, design: impl Into<String>) -> Self {
        StudyRecord {
            id: id.into(),
            title: title.into(),
            summary: summary.into(),
            design: design.into(),
            label: None,
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Data("record with an empty id".into()));
        }
        if self.title.is_empty() && self.summary.is_empty() && self.design.is_empty() {
            return Err(Error::Data(format!("record `{}` has no text", self.id)));
        }
        Ok(())
    }
}

/// Joins title, summary and design with the `[SEP]` marker, skipping empty fields.
pub fn assemble_text(record: &StudyRecord) -> Result<String> {
    let parts: Vec<&str> = [&record.title, &record.summary, &record.design]
        .into_iter()
        .map(|s| s.as_str())
        .filter(|s| !s.is_empty())
        .collect();
    if parts.is_empty() {
        return Err(Error::Data(format!("record `{}` has no text", record.id)));
    }
    Ok(parts.join(&format!(" {SEP_TEXT} ")))
}

/// Parses line-delimited records, checking per-record validity and id uniqueness.
pub fn parse_corpus(text: &str) -> Result<Vec<StudyRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: StudyRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
        record.validate()?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::Data(format!("duplicate record id `{}`", record.id)));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<StudyRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Like [`read_corpus`] but requires a label on every record and at least one record.
pub fn read_labeled(path: impl AsRef<Path>) -> Result<Vec<StudyRecord>> {
    let path = path.as_ref();
    let records = read_corpus(path)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: corpus is empty", path.display())));
    }
    if let Some(r) = records.iter().find(|r| r.label.is_none()) {
        return Err(Error::Data(format!("{}: record `{}` has no label", path.display(), r.id)));
    }
    Ok(records)
}

pub fn corpus_to_string(records: &[StudyRecord]) -> String {
    let mut out = String::new();
    for r in records {
        // Serializing a plain struct of strings cannot fail.
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[StudyRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(corpus_to_string(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Labels of a fully labeled slice; panics are avoided by returning an error.
pub fn labels_of(records: &[StudyRecord]) -> Result<Vec<Label>> {
    records
        .iter()
        .map(|r| r.label.ok_or_else(|| Error::Data(format!("record `{}` has no label", r.id))))
        .collect()
}
