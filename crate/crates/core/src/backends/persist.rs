//! Canonical report serialization: sorted keys, two-space indentation, floats
//! rounded to 9 significant digits, trailing newline.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Number, Value};

use crate::error::{Error, Result};

const SIGNIFICANT_DIGITS: usize = 9;

/// Canonical JSON text of a report.
///
/// Report types omit absent optional fields, so a `null` can only come from
/// a non-finite float; any `null` is refused with a numeric error.
pub fn canonical_json<T: Serialize + ?Sized>(report: &T) -> Result<String> {
    let value = canonicalize(serde_json::to_value(report)?, "$")?;
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    Ok(text)
}

/// Canonical single-line form, for line-delimited output.
pub fn canonical_json_line<T: Serialize + ?Sized>(record: &T) -> Result<String> {
    let value = canonicalize(serde_json::to_value(record)?, "$")?;
    Ok(serde_json::to_string(&value)?)
}

/// `x` rounded to the precision canonical reports carry.
pub fn canonical_f64(x: f64) -> f64 {
    let rounded: f64 = format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .expect("formatted float parses");
    // -0.0 and 0.0 print differently; keep one spelling.
    if rounded == 0.0 {
        0.0
    } else {
        rounded
    }
}

fn canonicalize(value: Value, at: &str) -> Result<Value> {
    Ok(match value {
        Value::Null => return Err(Error::Numeric(format!("non-finite or missing value at {at}"))),
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64 number");
            let rounded = canonical_f64(x);
            Value::Number(Number::from_f64(rounded).ok_or_else(|| Error::Numeric(format!("non-finite value at {at}")))?)
        }
        Value::Array(items) => Value::Array(
            items
                .into_iter()
                .enumerate()
                .map(|(i, v)| canonicalize(v, &format!("{at}[{i}]")))
                .collect::<Result<_>>()?,
        ),
        // serde_json's default map is ordered by key.
        Value::Object(map) => Value::Object(
            map.into_iter()
                .map(|(k, v)| {
                    let child = canonicalize(v, &format!("{at}.{k}"))?;
                    Ok((k, child))
                })
                .collect::<Result<_>>()?,
        ),
        other => other,
    })
}

/// Writes the canonical form of `report` to `path`.
pub fn persist_report<T: Serialize + ?Sized>(report: &T, path: &Path) -> Result<()> {
    let text = canonical_json(report)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_report<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{AggregationRule, DetectionReport};
    use crate::mitigator::{loss_total, LossReport, MitigationConfig};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn detection(overall: f64) -> DetectionReport {
        DetectionReport {
            per_step: BTreeMap::from([(3, 0.25), (9, overall)]),
            overall,
            rule: AggregationRule::WeightedMean,
            pi: BTreeMap::from([(3, 0.5), (9, 0.5)]),
            beta: 20.0,
            tau: 0.9,
            infringed: false,
        }
    }

    #[test]
    fn keys_are_sorted_and_floats_rounded() {
        let text = canonical_json(&detection(0.123456789012345)).unwrap();
        let keys: Vec<&str> = text
            .lines()
            .filter(|l| l.starts_with("  \"") && l.contains(':'))
            .map(|l| l.trim().split('"').nth(1).unwrap())
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(text.contains("0.123456789,"), "{text}");
        assert!(text.ends_with("}\n"));
    }

    #[test]
    fn nan_is_refused() {
        assert!(matches!(canonical_json(&detection(f64::NAN)), Err(Error::Numeric(_))));
    }

    #[test]
    fn file_round_trip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let report: LossReport = loss_total(1.0, 0.5, -0.8, &MitigationConfig::default()).unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        persist_report(&report, &a).unwrap();
        persist_report(&report, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let back: LossReport = read_report(&a).unwrap();
        assert_eq!(back, report);
    }

    proptest! {
        #[test]
        fn canonical_form_is_a_fixed_point(x in -1e6f64..1e6, y in 0.0f64..1.0) {
            let r = detection(y);
            let mut r = r;
            r.beta = x.abs() + 1e-3;
            let text = canonical_json(&r).unwrap();
            let back: DetectionReport = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(canonical_json(&back).unwrap(), text.clone());
            let again: DetectionReport = serde_json::from_str(&canonical_json(&back).unwrap()).unwrap();
            prop_assert_eq!(again, back);
        }
    }
}
