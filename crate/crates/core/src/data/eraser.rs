//! ERASER-style ingestion: a documents file plus JSON-lines annotations with
//! token-offset evidence spans.
//!
//! Documents file: JSON lines `{"docid": str, "text": str}`. Text is whitespace
//! tokenized; newlines separate sentences.
//!
//! Instance layout: `[CLS] document [SEP] query [SEP]`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use super::instance::InstanceRecord;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct EraserOptions {
    /// Label strings in class-id order.
    pub labels: Vec<String>,
    pub max_seq_len: usize,
}

impl Default for EraserOptions {
    fn default() -> Self {
        Self {
            labels: Vec::new(),
            max_seq_len: 128,
        }
    }
}

#[derive(Debug, Deserialize)]
struct DocumentLine {
    docid: String,
    text: String,
}

#[derive(Clone, Debug, Deserialize)]
struct Evidence {
    docid: String,
    start_token: usize,
    end_token: usize,
}

/// ERASER nests evidences as a list of evidence groups; flat lists are accepted too.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum EvidenceEntry {
    One(Evidence),
    Group(Vec<Evidence>),
}

#[derive(Debug, Deserialize)]
struct AnnotationLine {
    annotation_id: String,
    classification: String,
    #[serde(default)]
    query: String,
    #[serde(default)]
    evidences: Vec<EvidenceEntry>,
    #[serde(default)]
    docids: Option<Vec<String>>,
}

struct Document {
    tokens: Vec<String>,
    sentence_of: Vec<usize>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| l.map_err(|e| Error::io(path, e)))
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .collect()
}

fn load_documents(path: &Path) -> Result<HashMap<String, Document>> {
    let mut docs = HashMap::new();
    for line in read_lines(path)? {
        let d: DocumentLine = serde_json::from_str(&line)?;
        let mut tokens = Vec::new();
        let mut sentence_of = Vec::new();
        for (s, sent) in d.text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            for tok in sent.split_whitespace() {
                tokens.push(tok.to_string());
                sentence_of.push(s);
            }
        }
        docs.insert(
            d.docid,
            Document {
                tokens,
                sentence_of,
            },
        );
    }
    Ok(docs)
}

/// Reads annotations against documents and lays out one record per annotation.
///
/// The gold mask is 1 exactly on tokens covered by any evidence span
/// `[start_token, end_token)`, shifted by the leading `[CLS]`, and on the query.
/// Documents longer than `max_seq_len` allows are truncated from the end; the
/// query is never truncated.
pub fn ingest_eraser_jsonl(
    documents: &Path,
    annotations: &Path,
    opts: &EraserOptions,
) -> Result<Vec<InstanceRecord>> {
    let docs = load_documents(documents)?;
    let mut out = Vec::new();
    for line in read_lines(annotations)? {
        let ann: AnnotationLine = serde_json::from_str(&line)?;
        out.push(layout(&ann, &docs, opts)?);
    }
    Ok(out)
}

fn layout(
    ann: &AnnotationLine,
    docs: &HashMap<String, Document>,
    opts: &EraserOptions,
) -> Result<InstanceRecord> {
    let fail = |reason: String| Error::Annotation {
        annotation_id: ann.annotation_id.clone(),
        reason,
    };
    let label = opts
        .labels
        .iter()
        .position(|l| *l == ann.classification)
        .ok_or_else(|| fail(format!("unknown label {:?}", ann.classification)))?;

    let evidences: Vec<&Evidence> = ann
        .evidences
        .iter()
        .flat_map(|e| match e {
            EvidenceEntry::One(ev) => std::slice::from_ref(ev).iter(),
            EvidenceEntry::Group(g) => g.iter(),
        })
        .collect();
    let docid = ann
        .docids
        .as_ref()
        .and_then(|d| d.first().cloned())
        .or_else(|| evidences.first().map(|e| e.docid.clone()))
        .unwrap_or_else(|| ann.annotation_id.clone());
    let doc = docs
        .get(&docid)
        .ok_or_else(|| fail(format!("document {docid:?} not found")))?;

    let mut covered = BTreeSet::new();
    for ev in &evidences {
        if ev.docid != docid {
            return Err(fail(format!(
                "evidence refers to document {:?}, expected {docid:?}",
                ev.docid
            )));
        }
        if ev.start_token > ev.end_token || ev.end_token > doc.tokens.len() {
            return Err(fail(format!(
                "evidence span [{}, {}) out of bounds for document of {} tokens",
                ev.start_token,
                ev.end_token,
                doc.tokens.len()
            )));
        }
        covered.extend(ev.start_token..ev.end_token);
    }

    let query: Vec<&str> = ann.query.split_whitespace().collect();
    if query.len() + 3 > opts.max_seq_len {
        return Err(fail(format!(
            "query of {} tokens does not fit max_seq_len {}",
            query.len(),
            opts.max_seq_len
        )));
    }
    let doc_keep = doc.tokens.len().min(opts.max_seq_len - query.len() - 3);

    let mut tokens = vec!["[CLS]".to_string()];
    let mut rationale = vec![0u8];
    let mut sentence_ids = vec![0usize];
    for i in 0..doc_keep {
        tokens.push(doc.tokens[i].clone());
        rationale.push(u8::from(covered.contains(&i)));
        sentence_ids.push(doc.sentence_of[i] + 1);
    }
    let next = sentence_ids.last().copied().unwrap_or(0) + 1;
    tokens.push("[SEP]".into());
    rationale.push(0);
    sentence_ids.push(next);
    let q_start = tokens.len();
    for q in &query {
        tokens.push(q.to_string());
        rationale.push(1);
        sentence_ids.push(next + 1);
    }
    let q_end = tokens.len();
    tokens.push("[SEP]".into());
    rationale.push(0);
    sentence_ids.push(next + 2);

    let (query_start, query_end) = if query.is_empty() {
        (None, None)
    } else {
        (Some(q_start), Some(q_end))
    };
    Ok(InstanceRecord {
        tokens,
        rationale,
        label,
        sentence_ids,
        query_start,
        query_end,
    })
}
