//! Synthetic documents with a planted rationale sentence.
//!
//! Each document is a sequence of sentences. Exactly one sentence is the
//! rationale; it is written with "evidence" words and carries the signal tokens
//! that determine the label. The other sentences use filler words and may contain
//! stray signal tokens, which the label ignores. A per-class confounder token is
//! placed in a filler position; in the training split it agrees with the label
//! with probability `confounder_strength`, elsewhere it is uniformly random.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::instance::{Dataset, TokenizedInstance};
use super::vocab::{Vocabulary, CLS, SEP};
use crate::error::{Error, Result};

pub const SIGNAL_TOKEN: &str = "sig";
const QUERY_WORDS: usize = 4;

/// Deterministic label function of the signal-token count inside the rationale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelRule {
    /// Binary: label 1 iff the rationale holds at least `k` signal tokens.
    CountAtLeast { k: usize },
    /// `label = min(count, num_classes - 1)`.
    CountBucket,
}

impl LabelRule {
    pub fn apply(&self, signal_count: usize, num_classes: usize) -> usize {
        match *self {
            LabelRule::CountAtLeast { k } => usize::from(signal_count >= k),
            LabelRule::CountBucket => signal_count.min(num_classes - 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedSpec {
    /// Number of non-reserved token types.
    pub vocab_size: usize,
    /// Inclusive range of document lengths, in tokens.
    pub doc_len: (usize, usize),
    /// Inclusive range of rationale sentence lengths.
    pub rationale_len: (usize, usize),
    /// Inclusive range of filler sentence lengths.
    pub sentence_len: (usize, usize),
    /// Inclusive range of query lengths; `(0, 0)` produces no query.
    pub query_len: (usize, usize),
    pub num_classes: usize,
    pub rule: LabelRule,
    /// Probability that a filler token is replaced by a stray signal token.
    pub distractor_signal_rate: f64,
    pub confounder_strength: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            doc_len: (16, 24),
            rationale_len: (4, 7),
            sentence_len: (3, 6),
            query_len: (1, 1),
            num_classes: 2,
            rule: LabelRule::CountAtLeast { k: 1 },
            distractor_signal_rate: 0.03,
            confounder_strength: 0.9,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            max_seq_len: 128,
            seed: 0,
        }
    }
}

struct Layout {
    signal: usize,
    confounders: Vec<usize>,
    query: Vec<usize>,
    evidence: Vec<usize>,
    filler: Vec<usize>,
}

impl PlantedSpec {
    fn validate(&self) -> Result<()> {
        let ranges = [
            ("doc_len", self.doc_len),
            ("rationale_len", self.rationale_len),
            ("sentence_len", self.sentence_len),
        ];
        for (name, (lo, hi)) in ranges {
            if lo == 0 || lo > hi {
                return Err(Error::invalid(format!(
                    "{name} range ({lo}, {hi}) is empty"
                )));
            }
        }
        if self.query_len.0 > self.query_len.1 {
            return Err(Error::invalid("query_len range is empty"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        match self.rule {
            LabelRule::CountAtLeast { k } => {
                if self.num_classes != 2 {
                    return Err(Error::invalid("count_at_least is a binary rule"));
                }
                if k == 0 || k > self.rationale_len.0 {
                    return Err(Error::invalid(format!(
                        "rule needs {k} signal tokens but rationales may be as short as {}",
                        self.rationale_len.0
                    )));
                }
            }
            LabelRule::CountBucket => {
                if self.num_classes - 1 > self.rationale_len.0 {
                    return Err(Error::invalid(format!(
                        "rule needs up to {} signal tokens but rationales may be as short as {}",
                        self.num_classes - 1,
                        self.rationale_len.0
                    )));
                }
            }
        }
        if self.doc_len.0 <= self.rationale_len.1 {
            return Err(Error::invalid(
                "documents must be longer than the longest rationale to hold filler",
            ));
        }
        if self.doc_len.1 + self.query_len.1 + 3 > self.max_seq_len {
            return Err(Error::invalid("documents plus query exceed max_seq_len"));
        }
        let fixed = 1 + self.num_classes + QUERY_WORDS;
        if self.vocab_size < fixed + 4 {
            return Err(Error::invalid(format!(
                "vocab_size must be at least {}",
                fixed + 4
            )));
        }
        for (name, p) in [
            ("confounder_strength", self.confounder_strength),
            ("distractor_signal_rate", self.distractor_signal_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }

    fn vocabulary(&self) -> (Vocabulary, Layout) {
        let mut words = vec![SIGNAL_TOKEN.to_string()];
        words.extend((0..self.num_classes).map(|c| format!("conf{c}")));
        words.extend((0..QUERY_WORDS).map(|q| format!("q{q}")));
        let rest = self.vocab_size - words.len();
        let n_evidence = rest / 2;
        words.extend((0..n_evidence).map(|i| format!("r{i}")));
        words.extend((0..rest - n_evidence).map(|i| format!("f{i}")));
        let vocab = Vocabulary::from_tokens(words);
        let ids = |prefix: &str, n: usize| -> Vec<usize> {
            (0..n).map(|i| vocab.id(&format!("{prefix}{i}"))).collect()
        };
        let layout = Layout {
            signal: vocab.id(SIGNAL_TOKEN),
            confounders: ids("conf", self.num_classes),
            query: ids("q", QUERY_WORDS),
            evidence: ids("r", n_evidence),
            filler: ids("f", rest - n_evidence),
        };
        (vocab, layout)
    }

    fn signal_count<R: Rng>(&self, label: usize, len: usize, rng: &mut R) -> usize {
        let top = self.num_classes - 1;
        match self.rule {
            LabelRule::CountAtLeast { k } => {
                if label == 1 {
                    rng.gen_range(k..=(k + 1).min(len))
                } else {
                    rng.gen_range(0..k)
                }
            }
            LabelRule::CountBucket if label < top => label,
            LabelRule::CountBucket => rng.gen_range(top..=(top + 1).min(len)),
        }
    }

    fn instance<R: Rng>(
        &self,
        layout: &Layout,
        correlated: bool,
        rng: &mut R,
    ) -> TokenizedInstance {
        let label = rng.gen_range(0..self.num_classes);
        let doc_len = rng.gen_range(self.doc_len.0..=self.doc_len.1);
        let rat_len = rng.gen_range(self.rationale_len.0..=self.rationale_len.1);

        let mut evidence: Vec<usize> = (0..rat_len)
            .map(|_| *layout.evidence.choose(rng).expect("evidence words"))
            .collect();
        let count = self.signal_count(label, rat_len, rng);
        for pos in rand::seq::index::sample(rng, rat_len, count) {
            evidence[pos] = layout.signal;
        }

        let mut filler_sentences = Vec::new();
        let mut remaining = doc_len - rat_len;
        while remaining > 0 {
            let n = rng
                .gen_range(self.sentence_len.0..=self.sentence_len.1)
                .min(remaining);
            let sent: Vec<usize> = (0..n)
                .map(|_| {
                    if rng.gen_bool(self.distractor_signal_rate) {
                        layout.signal
                    } else {
                        *layout.filler.choose(rng).expect("filler words")
                    }
                })
                .collect();
            filler_sentences.push(sent);
            remaining -= n;
        }

        // Confounder replaces one filler token.
        let conf_class = if rng.gen_bool(if correlated {
            self.confounder_strength
        } else {
            0.0
        }) {
            label
        } else {
            rng.gen_range(0..self.num_classes)
        };
        let s = rng.gen_range(0..filler_sentences.len());
        let p = rng.gen_range(0..filler_sentences[s].len());
        filler_sentences[s][p] = layout.confounders[conf_class];

        let evidence_at = rng.gen_range(0..=filler_sentences.len());
        filler_sentences.insert(evidence_at, evidence);

        let q_len = rng.gen_range(self.query_len.0..=self.query_len.1);
        let query: Vec<usize> = (0..q_len)
            .map(|_| *layout.query.choose(rng).expect("query words"))
            .collect();

        let mut tokens = vec![CLS];
        let mut rationale = vec![0u8];
        let mut sentence_ids = vec![0usize];
        for (i, sent) in filler_sentences.iter().enumerate() {
            let is_rat = u8::from(i == evidence_at);
            tokens.extend_from_slice(sent);
            rationale.extend(std::iter::repeat(is_rat).take(sent.len()));
            sentence_ids.extend(std::iter::repeat(i + 1).take(sent.len()));
        }
        let n_sent = filler_sentences.len();
        let first_sep = tokens.len();
        tokens.push(SEP);
        rationale.push(0);
        sentence_ids.push(n_sent + 1);
        let q_start = tokens.len();
        tokens.extend_from_slice(&query);
        rationale.extend(std::iter::repeat(1).take(q_len));
        sentence_ids.extend(std::iter::repeat(n_sent + 2).take(q_len));
        let last_sep = tokens.len();
        tokens.push(SEP);
        rationale.push(0);
        sentence_ids.push(n_sent + 3);

        TokenizedInstance {
            tokens,
            rationale,
            label,
            sentence_ids,
            query_span: if q_len > 0 {
                q_start..q_start + q_len
            } else {
                0..0
            },
            special_positions: vec![0, first_sep, last_sep],
        }
    }
}

/// Generates train/val/test splits. Deterministic given `spec.seed`.
pub fn generate_planted(spec: &PlantedSpec) -> Result<Dataset> {
    spec.validate()?;
    let (vocab, layout) = spec.vocabulary();
    let split = |offset: u64, n: usize, correlated: bool| -> Vec<TokenizedInstance> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9).wrapping_add(offset));
        (0..n)
            .map(|_| spec.instance(&layout, correlated, &mut rng))
            .collect()
    };
    Ok(Dataset {
        labels: (0..spec.num_classes).map(|c| c.to_string()).collect(),
        train: split(1, spec.n_train, true),
        val: split(2, spec.n_val, false),
        test: split(3, spec.n_test, false),
        vocab,
    })
}

/// Signal tokens inside the gold rationale of `inst`.
pub fn rationale_signal_count(inst: &TokenizedInstance, vocab: &Vocabulary) -> usize {
    let sig = vocab.id(SIGNAL_TOKEN);
    inst.tokens
        .iter()
        .zip(&inst.rationale)
        .enumerate()
        .filter(|(i, (t, r))| **t == sig && **r == 1 && !inst.query_span.contains(i))
        .count()
}
