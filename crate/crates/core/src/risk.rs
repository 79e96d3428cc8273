//! Embedded risk corpus and max-cosine risk scoring.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::TextEncoder;
use crate::error::{Error, Result};
use crate::numerics::{cosine, EmbeddingVector};
use crate::prompt::{fold, Bucket, StructuredPrompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub phrase: String,
    pub embedding: EmbeddingVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

/// One line of a corpus file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    phrase: String,
    #[serde(default)]
    tag: Option<String>,
    #[serde(default)]
    embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskCorpus {
    entries: Vec<CorpusEntry>,
    encoder_id: String,
    dim: usize,
}

impl RiskCorpus {
    /// Builds a corpus from `(phrase, tag)` pairs, embedding every phrase.
    pub fn from_phrases<S: AsRef<str>>(phrases: &[(S, Option<String>)], encoder: &dyn TextEncoder) -> Result<Self> {
        let mut corpus = Self::empty(encoder);
        for (phrase, tag) in phrases {
            corpus.insert(phrase.as_ref(), tag.clone(), None, encoder)?;
        }
        Ok(corpus)
    }

    pub fn empty(encoder: &dyn TextEncoder) -> Self {
        Self {
            entries: Vec::new(),
            encoder_id: encoder.id().to_string(),
            dim: encoder.dim(),
        }
    }

    /// Parses line-delimited JSON records. Blank lines are ignored; line
    /// numbers in errors are 1-based.
    pub fn from_jsonl(text: &str, encoder: &dyn TextEncoder) -> Result<Self> {
        let mut corpus = Self::empty(encoder);
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: CorpusRecord = serde_json::from_str(line).map_err(|e| Error::Record {
                line: line_no,
                message: e.to_string(),
            })?;
            if record.phrase.trim().is_empty() {
                return Err(Error::Record {
                    line: line_no,
                    message: "empty phrase".into(),
                });
            }
            corpus
                .insert(&record.phrase, record.tag, record.embedding, encoder)
                .map_err(|e| match e {
                    Error::Consistency(m) => Error::Consistency(format!("line {line_no}: {m}")),
                    Error::ZeroNorm | Error::Contract(_) => Error::Record {
                        line: line_no,
                        message: e.to_string(),
                    },
                    other => other,
                })?;
        }
        Ok(corpus)
    }

    /// Returns `false` when the phrase was a duplicate and has been ignored.
    fn insert(
        &mut self,
        phrase: &str,
        tag: Option<String>,
        embedding: Option<Vec<f64>>,
        encoder: &dyn TextEncoder,
    ) -> Result<bool> {
        let phrase = phrase.trim();
        if self.contains_phrase(phrase) {
            return Ok(false);
        }
        let embedding = match embedding {
            Some(values) => {
                if values.len() != self.dim {
                    return Err(Error::Consistency(format!(
                        "embedding for '{phrase}' has dimension {}, corpus uses {}",
                        values.len(),
                        self.dim
                    )));
                }
                EmbeddingVector::unit(values)?
            }
            None => encoder.embed_one(&fold(phrase))?,
        };
        if embedding.dim() != self.dim {
            return Err(Error::Consistency(format!(
                "encoder returned dimension {} for '{phrase}', expected {}",
                embedding.dim(),
                self.dim
            )));
        }
        self.entries.push(CorpusEntry {
            phrase: phrase.to_string(),
            embedding,
            tag,
        });
        Ok(true)
    }

    /// Adds a phrase (embedded with `encoder`). Duplicates are ignored.
    pub fn add(&mut self, phrase: &str, tag: Option<String>, encoder: &dyn TextEncoder) -> Result<bool> {
        self.check_encoder(encoder)?;
        self.insert(phrase, tag, None, encoder)
    }

    /// Removes and returns the entry at `index`.
    pub fn remove(&mut self, index: usize) -> Option<CorpusEntry> {
        (index < self.entries.len()).then(|| self.entries.remove(index))
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains_phrase(&self, phrase: &str) -> bool {
        let key = fold(phrase);
        self.entries.iter().any(|e| fold(&e.phrase) == key)
    }

    pub fn folded_phrases(&self) -> HashSet<String> {
        self.entries.iter().map(|e| fold(&e.phrase)).collect()
    }

    pub fn check_encoder(&self, encoder: &dyn TextEncoder) -> Result<()> {
        if encoder.id() != self.encoder_id {
            return Err(Error::Consistency(format!(
                "corpus was built with encoder '{}' but scoring uses '{}'",
                self.encoder_id,
                encoder.id()
            )));
        }
        Ok(())
    }

    /// Exhaustive scan for the most similar entry. The first entry wins ties.
    pub fn nearest(&self, query: &EmbeddingVector) -> Result<(f64, &CorpusEntry)> {
        let mut best: Option<(f64, &CorpusEntry)> = None;
        for entry in &self.entries {
            let c = cosine(query, &entry.embedding)?;
            if best.is_none_or(|(b, _)| c > b) {
                best = Some((c, entry));
            }
        }
        best.ok_or_else(|| Error::contract("risk corpus is empty"))
    }
}

pub fn load_corpus(path: &Path, encoder: &dyn TextEncoder) -> Result<RiskCorpus> {
    RiskCorpus::from_jsonl(&std::fs::read_to_string(path)?, encoder)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseRisk {
    pub score: f64,
    pub nearest_corpus_phrase: String,
}

/// Score and nearest corpus entry of one phrase.
pub fn score_phrase(s: &str, corpus: &RiskCorpus, encoder: &dyn TextEncoder) -> Result<PhraseRisk> {
    if s.trim().is_empty() {
        return Err(Error::contract("cannot score an empty phrase"));
    }
    corpus.check_encoder(encoder)?;
    let query = encoder.embed_one(&fold(s))?;
    if query.dim() != corpus.dim() {
        return Err(Error::DimensionMismatch {
            expected: corpus.dim(),
            found: query.dim(),
        });
    }
    let (score, entry) = corpus.nearest(&query)?;
    Ok(PhraseRisk {
        score,
        nearest_corpus_phrase: entry.phrase.clone(),
    })
}

pub fn score_text(s: &str, corpus: &RiskCorpus, encoder: &dyn TextEncoder) -> Result<f64> {
    score_phrase(s, corpus, encoder).map(|r| r.score)
}

/// Slot risk: the maximum phrase score, or 0 for an empty slot.
pub fn score_slot<S: AsRef<str>>(phrases: &[S], corpus: &RiskCorpus, encoder: &dyn TextEncoder) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::contract("risk corpus is empty"));
    }
    let mut best: Option<f64> = None;
    for p in phrases {
        let s = score_text(p.as_ref(), corpus, encoder)?;
        best = Some(best.map_or(s, |b| b.max(s)));
    }
    Ok(best.unwrap_or(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRiskReport {
    pub per_phrase: BTreeMap<String, PhraseRisk>,
    pub per_slot: BTreeMap<Bucket, f64>,
    pub ranking: Vec<Bucket>,
}

impl SlotRiskReport {
    pub fn max_risk(&self) -> f64 {
        self.per_slot.values().copied().fold(0.0, f64::max)
    }
}

/// Orders buckets by risk, highest first; equal risks keep bucket order.
pub fn rank_buckets(per_slot: &BTreeMap<Bucket, f64>) -> Vec<Bucket> {
    let mut ranking: Vec<Bucket> = per_slot.keys().copied().collect();
    ranking.sort_by(|a, b| per_slot[b].total_cmp(&per_slot[a]).then(a.cmp(b)));
    ranking
}

pub fn rank_slots(sp: &StructuredPrompt, corpus: &RiskCorpus, encoder: &dyn TextEncoder) -> Result<SlotRiskReport> {
    sp.validate()?;
    let mut per_phrase = BTreeMap::new();
    let mut per_slot = BTreeMap::new();
    for bucket in sp.buckets() {
        let mut r: f64 = 0.0;
        for phrase in sp.bucket(bucket) {
            let risk = score_phrase(phrase, corpus, encoder)?;
            r = r.max(risk.score);
            per_phrase.insert(phrase.clone(), risk);
        }
        per_slot.insert(bucket, r);
    }
    let ranking = rank_buckets(&per_slot);
    Ok(SlotRiskReport {
        per_phrase,
        per_slot,
        ranking,
    })
}
