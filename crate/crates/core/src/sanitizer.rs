//! High-to-low risk phrase replacement with negative-prompt accumulation.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::backends::TextEncoder;
use crate::error::{Error, ProviderError, Result};
use crate::numerics::{cosine, quantile};
use crate::prompt::{fold, reconstruct_prompt, Bucket, StructuredPrompt};
use crate::risk::{rank_slots, score_slot, RiskCorpus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SanitizerConfig {
    pub lambda: f64,
    pub budget: usize,
    pub gamma: f64,
    pub window_m: usize,
    pub risk_quantile: f64,
    pub candidates_per_element: usize,
}

impl Default for SanitizerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            budget: 5,
            gamma: 0.02,
            window_m: 3,
            risk_quantile: 0.5,
            candidates_per_element: 4,
        }
    }
}

impl SanitizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if self.window_m == 0 {
            return Err(Error::Config("window_m must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.risk_quantile) {
            return Err(Error::Config(format!(
                "risk_quantile must lie in [0, 1], got {}",
                self.risk_quantile
            )));
        }
        if self.candidates_per_element == 0 {
            return Err(Error::Config("candidates_per_element must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub slot: Bucket,
    pub original: String,
    pub chosen: String,
    pub delta_r: f64,
    pub align: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Budget,
    MarginalImprovement,
    RiskQuantile,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanitizationResult {
    pub sanitized: StructuredPrompt,
    pub sanitized_flat: String,
    pub negative_prompts: Vec<String>,
    pub trace: Vec<TraceEntry>,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateEval {
    pub delta_r: f64,
    pub align: f64,
    pub score: f64,
}

/// Proposes replacement phrases for a risky phrase.
pub trait CandidateProvider {
    fn candidates(&self, phrase: &str, bucket: Bucket, k: usize) -> std::result::Result<Vec<String>, ProviderError>;
}

const BUILTIN_CANDIDATES: &str = include_str!("../data/candidates.toml");

/// Static per-kind replacement table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynonymTable {
    entries: BTreeMap<Bucket, BTreeMap<String, Vec<String>>>,
}

impl SynonymTable {
    pub fn builtin() -> &'static SynonymTable {
        static TABLE: OnceLock<SynonymTable> = OnceLock::new();
        TABLE.get_or_init(|| SynonymTable::from_toml_str(BUILTIN_CANDIDATES).expect("builtin candidates parse"))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, BTreeMap<String, Vec<String>>> =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for (section, table) in raw {
            let bucket = Bucket::try_from(section).map_err(Error::Config)?;
            let folded = table.into_iter().map(|(k, v)| (fold(&k), v)).collect();
            entries.insert(bucket, folded);
        }
        Ok(Self { entries })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn lookup(&self, phrase: &str, bucket: Bucket) -> &[String] {
        self.entries
            .get(&bucket)
            .and_then(|t| t.get(&fold(phrase)))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

impl CandidateProvider for SynonymTable {
    fn candidates(&self, phrase: &str, bucket: Bucket, _k: usize) -> std::result::Result<Vec<String>, ProviderError> {
        Ok(self.lookup(phrase, bucket).to_vec())
    }
}

/// Candidate sources for [`sanitize`]: an optional primary provider and the
/// fallback table used when it is absent or fails.
#[derive(Clone, Copy)]
pub struct Providers<'a> {
    pub candidates: Option<&'a dyn CandidateProvider>,
    pub fallback: &'a SynonymTable,
}

impl Providers<'static> {
    pub fn fallback_only() -> Self {
        Self {
            candidates: None,
            fallback: SynonymTable::builtin(),
        }
    }
}

/// Up to `k` distinct candidates, excluding any that match a corpus phrase.
pub fn generate_candidates(
    s: &str,
    bucket: Bucket,
    providers: &Providers<'_>,
    corpus: &RiskCorpus,
    k: usize,
) -> Vec<String> {
    let raw = match providers.candidates {
        Some(p) => p.candidates(s, bucket, k).unwrap_or_else(|e| {
            log::warn!("candidate provider failed for '{s}': {e}; using fallback table");
            providers.fallback.lookup(s, bucket).to_vec()
        }),
        None => providers.fallback.lookup(s, bucket).to_vec(),
    };
    let banned = corpus.folded_phrases();
    let mut seen = HashSet::new();
    raw.into_iter()
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty() && !banned.contains(&fold(c)) && seen.insert(fold(c)))
        .take(k)
        .collect()
}

fn evaluate_at(
    slot_phrases: &[String],
    index: usize,
    c_m: &str,
    corpus: &RiskCorpus,
    encoder: &dyn TextEncoder,
    lambda: f64,
) -> Result<CandidateEval> {
    if c_m.trim().is_empty() {
        return Err(Error::contract("candidate must be nonempty"));
    }
    let before = score_slot(slot_phrases, corpus, encoder)?;
    let mut after_phrases = slot_phrases.to_vec();
    after_phrases[index] = c_m.to_string();
    let after = score_slot(&after_phrases, corpus, encoder)?;
    let delta_r = before - after;
    let align = cosine(
        &encoder.embed_one(&fold(c_m))?,
        &encoder.embed_one(&fold(&slot_phrases[index]))?,
    )?;
    Ok(CandidateEval {
        delta_r,
        align,
        score: lambda * delta_r + (1.0 - lambda) * align,
    })
}

/// Scores replacing `s_i` (which must occur in `slot_phrases`) by `c_m`.
pub fn evaluate_candidate(
    s_i: &str,
    c_m: &str,
    slot_phrases: &[String],
    corpus: &RiskCorpus,
    encoder: &dyn TextEncoder,
    lambda: f64,
) -> Result<CandidateEval> {
    let key = fold(s_i);
    let index = slot_phrases
        .iter()
        .position(|p| fold(p) == key)
        .ok_or_else(|| Error::contract(format!("'{s_i}' is not among the slot phrases")))?;
    evaluate_at(slot_phrases, index, c_m, corpus, encoder, lambda)
}

/// Index of the best candidate with positive score and positive risk
/// reduction; the earliest candidate wins ties.
pub fn select_replacement(evals: &[CandidateEval]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in evals.iter().enumerate() {
        if e.score > 0.0 && e.delta_r > 0.0 && best.is_none_or(|b| e.score > evals[b].score) {
            best = Some(i);
        }
    }
    best
}

/// Runs the replacement loop. Each iteration re-ranks the buckets, takes the
/// riskiest unprocessed phrase of the riskiest bucket that still has one,
/// and replaces it by the best qualifying candidate (or skips it).
pub fn sanitize(
    sp: &StructuredPrompt,
    corpus: &RiskCorpus,
    encoder: &dyn TextEncoder,
    providers: &Providers<'_>,
    cfg: &SanitizerConfig,
) -> Result<SanitizationResult> {
    cfg.validate()?;
    sp.validate()?;
    let mut current = sp.clone();
    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut processed: HashSet<(Bucket, usize)> = HashSet::new();

    let abort = |e: Error, trace: &[TraceEntry]| Error::SanitizeAborted {
        trace: trace.to_vec(),
        source: Box::new(e),
    };

    let initial = rank_slots(&current, corpus, encoder)?;
    let initial_risks: Vec<f64> = initial.per_slot.values().copied().collect();
    let floor = if initial_risks.is_empty() {
        f64::NEG_INFINITY
    } else {
        quantile(&initial_risks, cfg.risk_quantile)?
    };

    let stop_reason = loop {
        if trace.len() >= cfg.budget {
            break StopReason::Budget;
        }
        if trace.len() >= cfg.window_m {
            let window = &trace[trace.len() - cfg.window_m..];
            let mean = window.iter().map(|t| t.delta_r).sum::<f64>() / cfg.window_m as f64;
            if mean < cfg.gamma {
                break StopReason::MarginalImprovement;
            }
        }
        let report = rank_slots(&current, corpus, encoder).map_err(|e| abort(e, &trace))?;
        let open: Vec<Bucket> = report
            .ranking
            .iter()
            .copied()
            .filter(|b| (0..current.bucket(*b).len()).any(|i| !processed.contains(&(*b, i))))
            .collect();
        let Some(&bucket) = open.first() else {
            break StopReason::Exhausted;
        };
        if open.iter().all(|b| report.per_slot[b] < floor) {
            break StopReason::RiskQuantile;
        }

        let phrases = current.bucket(bucket).to_vec();
        let index = (0..phrases.len())
            .filter(|i| !processed.contains(&(bucket, *i)))
            .max_by(|a, b| {
                let sa = report.per_phrase[&phrases[*a]].score;
                let sb = report.per_phrase[&phrases[*b]].score;
                sa.total_cmp(&sb).then(b.cmp(a))
            })
            .expect("open bucket has an unprocessed phrase");
        processed.insert((bucket, index));
        let original = phrases[index].clone();

        let candidates: Vec<String> =
            generate_candidates(&original, bucket, providers, corpus, cfg.candidates_per_element)
                .into_iter()
                .filter(|c| current.find(c).is_none())
                .collect();
        let mut evals = Vec::with_capacity(candidates.len());
        for c in &candidates {
            evals.push(
                evaluate_at(&phrases, index, c, corpus, encoder, cfg.lambda).map_err(|e| abort(e, &trace))?,
            );
        }
        match select_replacement(&evals) {
            Some(i) => {
                let e = evals[i];
                current.replace(bucket, index, candidates[i].clone())?;
                log::debug!("{bucket}: '{original}' -> '{}' (score {:.4})", candidates[i], e.score);
                trace.push(TraceEntry {
                    slot: bucket,
                    original,
                    chosen: candidates[i].clone(),
                    delta_r: e.delta_r,
                    align: e.align,
                    score: e.score,
                });
            }
            None => log::debug!("{bucket}: no qualifying replacement for '{original}'"),
        }
    };

    let sanitized_flat = reconstruct_prompt(&current)?;
    Ok(SanitizationResult {
        negative_prompts: trace.iter().map(|t| t.original.clone()).collect(),
        sanitized: current,
        sanitized_flat,
        trace,
        stop_reason,
    })
}
