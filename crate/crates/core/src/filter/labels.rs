//! Human out-of-class annotations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Class,
    Partial,
    NotClass,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub annotator: String,
    pub choice: Choice,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    InClass,
    Partial,
    OutOfClass,
}

/// One `labels.jsonl` line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawLabel {
    pub image_id: String,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OocLabel {
    pub image_id: String,
    pub annotations: Vec<Annotation>,
    pub aggregate: Aggregate,
}

/// Any `not_class` vote makes the image out-of-class; otherwise any `class`
/// vote makes it in-class; otherwise it is partial.
pub fn aggregate_choices(choices: impl IntoIterator<Item = Choice>) -> Option<Aggregate> {
    let mut any = false;
    let mut saw_class = false;
    for c in choices {
        any = true;
        match c {
            Choice::NotClass => return Some(Aggregate::OutOfClass),
            Choice::Class => saw_class = true,
            Choice::Partial => {}
        }
    }
    match (any, saw_class) {
        (false, _) => None,
        (true, true) => Some(Aggregate::InClass),
        (true, false) => Some(Aggregate::Partial),
    }
}

pub type OocLabels = BTreeMap<String, OocLabel>;

pub fn aggregate_labels(raw: Vec<RawLabel>) -> Result<OocLabels> {
    let mut out = BTreeMap::new();
    for r in raw {
        let aggregate = aggregate_choices(r.annotations.iter().map(|a| a.choice))
            .ok_or_else(|| Error::EmptyChoices(r.image_id.clone()))?;
        out.insert(
            r.image_id.clone(),
            OocLabel {
                image_id: r.image_id,
                annotations: r.annotations,
                aggregate,
            },
        );
    }
    Ok(out)
}

pub fn labels_to_jsonl(labels: &[RawLabel]) -> String {
    let mut out = String::new();
    for l in labels {
        out.push_str(&serde_json::to_string(l).expect("label serializes"));
        out.push('\n');
    }
    out
}

/// Reads `labels.jsonl`; repeated image ids have their annotations merged.
pub fn load_labels(path: impl AsRef<Path>) -> Result<OocLabels> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let mut merged: BTreeMap<String, Vec<Annotation>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLabel = serde_json::from_str(line).map_err(|e| Error::parse(&ctx, i + 1, e))?;
        merged
            .entry(raw.image_id)
            .or_default()
            .extend(raw.annotations);
    }
    aggregate_labels(
        merged
            .into_iter()
            .map(|(image_id, annotations)| RawLabel {
                image_id,
                annotations,
            })
            .collect(),
    )
}
