use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, CLS, SEP};
use crate::error::{Error, Result};

/// One encoded example: token ids, gold rationale, label and sentence layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedInstance {
    pub tokens: Vec<usize>,
    pub rationale: Vec<u8>,
    pub label: usize,
    pub sentence_ids: Vec<usize>,
    /// Half-open query range; empty ranges are normalised to `0..0`.
    pub query_span: Range<usize>,
    /// Sorted positions of `[CLS]`/`[SEP]` tokens.
    pub special_positions: Vec<usize>,
}

impl TokenizedInstance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::Data("instance has no tokens".into()));
        }
        if self.rationale.len() != n || self.sentence_ids.len() != n {
            return Err(Error::Data(format!(
                "length mismatch: {} tokens, {} rationale values, {} sentence ids",
                n,
                self.rationale.len(),
                self.sentence_ids.len()
            )));
        }
        if self.rationale.iter().any(|&r| r > 1) {
            return Err(Error::Data("rationale values must be 0 or 1".into()));
        }
        if self.query_span.end > n || self.query_span.start > self.query_span.end {
            return Err(Error::Data(format!(
                "query span {:?} out of bounds",
                self.query_span
            )));
        }
        if self.query_span.clone().any(|i| self.rationale[i] != 1) {
            return Err(Error::Data(
                "query positions must be part of the rationale".into(),
            ));
        }
        if self.sentence_ids.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Data("sentence ids must be non-decreasing".into()));
        }
        if self.special_positions.iter().any(|&p| p >= n) {
            return Err(Error::Data("special position out of bounds".into()));
        }
        Ok(())
    }

    /// Positions that are never masked: specials and the query.
    pub fn forced(&self) -> Vec<bool> {
        let mut f = vec![false; self.len()];
        for &p in &self.special_positions {
            f[p] = true;
        }
        for i in self.query_span.clone() {
            f[i] = true;
        }
        f
    }

    /// Gold rationale as a keep-mask for redaction: rationale ∪ forced positions.
    pub fn human_keep_mask(&self) -> Vec<u8> {
        self.forced()
            .iter()
            .zip(&self.rationale)
            .map(|(&f, &r)| u8::from(f || r == 1))
            .collect()
    }

    /// Number of rationale tokens outside forced positions.
    pub fn rationale_size(&self) -> usize {
        self.forced()
            .iter()
            .zip(&self.rationale)
            .filter(|(f, r)| !**f && **r == 1)
            .count()
    }

    pub fn to_record(&self, vocab: &Vocabulary) -> InstanceRecord {
        let (query_start, query_end) = if self.query_span.is_empty() {
            (None, None)
        } else {
            (Some(self.query_span.start), Some(self.query_span.end))
        };
        InstanceRecord {
            tokens: self
                .tokens
                .iter()
                .map(|&t| vocab.token(t).to_string())
                .collect(),
            rationale: self.rationale.clone(),
            label: self.label,
            sentence_ids: self.sentence_ids.clone(),
            query_start,
            query_end,
        }
    }
}

/// Canonical JSON-lines form of an instance, with token strings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub tokens: Vec<String>,
    pub rationale: Vec<u8>,
    pub label: usize,
    pub sentence_ids: Vec<usize>,
    pub query_start: Option<usize>,
    pub query_end: Option<usize>,
}

impl InstanceRecord {
    /// Encodes against `vocab`; unknown tokens map to `[UNK]`.
    pub fn encode(&self, vocab: &Vocabulary) -> Result<TokenizedInstance> {
        let query_span = match (self.query_start, self.query_end) {
            (Some(s), Some(e)) if s < e => s..e,
            (Some(s), Some(e)) if s == e => 0..0,
            (None, None) => 0..0,
            other => {
                return Err(Error::Data(format!("invalid query bounds {other:?}")));
            }
        };
        let tokens: Vec<usize> = self.tokens.iter().map(|t| vocab.id(t)).collect();
        let special_positions = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == CLS || t == SEP)
            .map(|(i, _)| i)
            .collect();
        let inst = TokenizedInstance {
            tokens,
            rationale: self.rationale.clone(),
            label: self.label,
            sentence_ids: self.sentence_ids.clone(),
            query_span,
            special_positions,
        };
        inst.validate()?;
        Ok(inst)
    }
}

/// Instances sharing one vocabulary and label set.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub labels: Vec<String>,
    pub instances: Vec<TokenizedInstance>,
}

/// Train/validation/test splits sharing one vocabulary and label set.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub labels: Vec<String>,
    pub train: Vec<TokenizedInstance>,
    pub val: Vec<TokenizedInstance>,
    pub test: Vec<TokenizedInstance>,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    labels: Vec<String>,
    vocab: Vocabulary,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Whether any document has more than one sentence outside forced positions,
    /// i.e. whether sentence-level rationalization means anything here.
    pub fn has_sentences(&self) -> bool {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .any(|inst| {
                let forced = inst.forced();
                let mut ids = inst
                    .sentence_ids
                    .iter()
                    .zip(&forced)
                    .filter(|(_, f)| !**f)
                    .map(|(s, _)| *s);
                match ids.next() {
                    Some(first) => ids.any(|s| s != first),
                    None => false,
                }
            })
    }

    pub fn splits(&self) -> [(&'static str, &[TokenizedInstance]); 3] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ]
    }

    /// Writes `meta.json` and one canonical JSONL file per split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = DatasetMeta {
            labels: self.labels.clone(),
            vocab: self.vocab.clone(),
        };
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
            .map_err(|e| Error::io(&meta_path, e))?;
        for (name, split) in self.splits() {
            write_jsonl(&dir.join(format!("{name}.jsonl")), split, &self.vocab)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        let read = |name: &str| -> Result<Vec<TokenizedInstance>> {
            let records = read_jsonl(&dir.join(format!("{name}.jsonl")))?;
            records
                .iter()
                .map(|r| {
                    let inst = r.encode(&meta.vocab)?;
                    if inst.label >= meta.labels.len() {
                        return Err(Error::Data(format!("label {} out of range", inst.label)));
                    }
                    Ok(inst)
                })
                .collect()
        };
        Ok(Self {
            train: read("train")?,
            val: read("val")?,
            test: read("test")?,
            vocab: meta.vocab,
            labels: meta.labels,
        })
    }
}

pub fn write_jsonl(path: &Path, instances: &[TokenizedInstance], vocab: &Vocabulary) -> Result<()> {
    let mut out = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut out, &inst.to_record(vocab))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<InstanceRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
