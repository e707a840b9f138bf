//! Labeled document corpora as newline-delimited JSON `{id, text, label}`.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Reads documents; ids must be unique.
pub fn read_documents<R: BufRead>(input: R) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("corpus line {}: {e}", i + 1)))?;
        if !seen.insert(doc.id.clone()) {
            return Err(Error::Data(format!("corpus line {}: duplicate document id `{}`", i + 1, doc.id)));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_documents<W: Write>(docs: &[Document], mut out: W) -> Result<()> {
    for d in docs {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// `(text, label)` pairs for training; every document must be labeled.
pub fn labeled_pairs(docs: &[Document]) -> Result<Vec<(String, String)>> {
    docs.iter()
        .map(|d| match &d.label {
            Some(l) => Ok((d.text.clone(), l.clone())),
            None => Err(Error::Data(format!("document `{}` has no label", d.id))),
        })
        .collect()
}
