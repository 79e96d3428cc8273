//! Threshold calibration from labeled similarity scores.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::canonical_f64;
use crate::error::{Error, Result};

/// A scored generated/reference pair with its ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledPair {
    pub score: f64,
    pub infringing: bool,
}

/// Which thresholds are acceptable.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum OperatingPoint {
    /// Maximize F1 over all thresholds.
    #[default]
    MaxF1,
    /// Maximize F1 among thresholds reaching at least this precision.
    MinPrecision(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Decision threshold for the rule `score > tau`.
    pub tau: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub pairs: usize,
    pub operating_point: OperatingPoint,
}

/// Reads line-delimited `{"score": .., "infringing": ..}` records.
pub fn load_pairs(path: &Path) -> Result<Vec<LabeledPair>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Record {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// (precision, recall, f1) of the rule `score > tau`. Precision with no
/// positive predictions is taken as 1, F1 with no true positives as 0.
pub fn confusion_scores(pairs: &[LabeledPair], tau: f64) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for p in pairs {
        match (p.score > tau, p.infringing) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    (precision, recall, f1)
}

/// Chooses τ maximizing F1 at the operating point.
///
/// Candidate thresholds sit just below each distinct score: the largest value
/// under s that a canonical report can carry, so a pair scoring exactly s is
/// still flagged after τ is written out and read back. Ties in F1 go to the
/// larger τ.
pub fn calibrate(pairs: &[LabeledPair], point: OperatingPoint) -> Result<Calibration> {
    if pairs.len() < 2 {
        return Err(Error::Calibration(format!("need at least 2 labeled pairs, got {}", pairs.len())));
    }
    if pairs.iter().any(|p| !p.score.is_finite()) {
        return Err(Error::Calibration("scores must be finite".into()));
    }
    let positives = pairs.iter().filter(|p| p.infringing).count();
    if positives == 0 || positives == pairs.len() {
        return Err(Error::Calibration("both classes must be present".into()));
    }
    if let OperatingPoint::MinPrecision(p) = point {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Calibration(format!("precision target must lie in [0, 1], got {p}")));
        }
    }

    let mut scores: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();

    let mut best: Option<Calibration> = None;
    for s in scores {
        let tau = threshold_below(s);
        let (precision, recall, f1) = confusion_scores(pairs, tau);
        if let OperatingPoint::MinPrecision(p) = point {
            if precision < p {
                continue;
            }
        }
        // Ascending τ, so `>=` keeps the larger τ on ties.
        if best.as_ref().is_none_or(|b| f1 >= b.f1) {
            best = Some(Calibration {
                tau,
                f1,
                precision,
                recall,
                pairs: pairs.len(),
                operating_point: point,
            });
        }
    }
    best.ok_or_else(|| Error::Calibration("no threshold reaches the requested precision".into()))
}

/// Largest canonical float strictly below `s`.
pub fn threshold_below(s: f64) -> f64 {
    let mut tau = canonical_f64(s.next_down());
    let mut step = s.abs().max(f64::MIN_POSITIVE) * 1e-9;
    while tau >= s {
        tau = canonical_f64(tau - step);
        step *= 2.0;
    }
    tau
}
