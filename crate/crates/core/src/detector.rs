//! Mask-weighted patch pooling, partial similarity and the thresholded
//! infringement decision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::SoftMask;
use crate::error::{Error, Result};
use crate::numerics::{cosine, lse_pool, normalize_unit, EmbeddingVector, ScalarField};

pub const DEFAULT_BETA: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSource {
    Generated,
    Reference,
}

/// Unit patch embeddings on a `width × height` grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEmbeddings {
    pub width: usize,
    pub height: usize,
    pub patches: Vec<EmbeddingVector>,
    pub source: PatchSource,
}

impl PatchEmbeddings {
    pub fn new(width: usize, height: usize, patches: Vec<EmbeddingVector>, source: PatchSource) -> Result<Self> {
        let p = Self {
            width,
            height,
            patches,
            source,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches.is_empty() {
            return Err(Error::contract("patch set is empty"));
        }
        if self.patches.len() != self.width * self.height {
            return Err(Error::ShapeMismatch(format!(
                "{} patches do not fill a {}x{} grid",
                self.patches.len(),
                self.height,
                self.width
            )));
        }
        let d = self.dim();
        for (i, p) in self.patches.iter().enumerate() {
            if p.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: p.dim(),
                });
            }
            if !p.is_unit() {
                return Err(Error::Numeric(format!("patch {i} is not unit-norm")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.patches.first().map_or(0, EmbeddingVector::dim)
    }
}

/// Per-patch weights from a mask, resampled to the patch grid when needed.
/// An all-zero mask gives uniform weights.
pub fn mask_weights(mask: &SoftMask, width: usize, height: usize) -> Result<Vec<f64>> {
    let field: ScalarField = if (mask.field.width(), mask.field.height()) == (width, height) {
        mask.field.clone()
    } else {
        mask.field.resample_bilinear(width, height)?
    };
    let total: f64 = field.values().iter().sum();
    let n = width * height;
    if total > 0.0 {
        Ok(field.values().iter().map(|m| m / total).collect())
    } else {
        Ok(vec![1.0 / n as f64; n])
    }
}

/// Normalized weighted sum of patch embeddings.
pub fn pooled_embedding(patches: &PatchEmbeddings, weights: &[f64]) -> Result<EmbeddingVector> {
    if weights.len() != patches.len() {
        return Err(Error::DimensionMismatch {
            expected: patches.len(),
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || !(weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::contract("pooling weights must be nonnegative with a positive sum"));
    }
    let mut acc = vec![0.0; patches.dim()];
    for (p, w) in patches.patches.iter().zip(weights) {
        for (a, x) in acc.iter_mut().zip(p.as_slice()) {
            *a += w * x;
        }
    }
    if acc.iter().all(|v| *v == 0.0) {
        return Err(Error::DegeneratePool);
    }
    normalize_unit(&EmbeddingVector::new(acc)?)
}

/// Pools with the given weights, retrying with uniform weights when the
/// weighted sum cancels out.
pub fn pooled_embedding_or_uniform(patches: &PatchEmbeddings, weights: &[f64]) -> Result<EmbeddingVector> {
    match pooled_embedding(patches, weights) {
        Err(Error::DegeneratePool) => {
            log::warn!("weighted patch sum is zero; falling back to uniform pooling");
            pooled_embedding(patches, &vec![1.0; patches.len()])
        }
        other => other,
    }
}

/// Log-sum-exp of cosines between `g` and every reference patch.
pub fn partial_similarity(g: &EmbeddingVector, reference: &PatchEmbeddings, beta: f64) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("reference patch set is empty"));
    }
    let sims = reference
        .patches
        .iter()
        .map(|u| cosine(g, u))
        .collect::<Result<Vec<_>>>()?;
    lse_pool(&sims, beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    #[default]
    WeightedMean,
    MaxOverSteps,
}

impl std::str::FromStr for AggregationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted_mean" | "weighted-mean" | "mean" => Ok(AggregationRule::WeightedMean),
            "max_over_steps" | "max-over-steps" | "max" => Ok(AggregationRule::MaxOverSteps),
            _ => Err(Error::Config(format!("unknown aggregation rule '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub per_step: BTreeMap<usize, f64>,
    pub overall: f64,
    pub rule: AggregationRule,
    /// Step weights used by the weighted mean, keyed like `per_step`.
    pub pi: BTreeMap<usize, f64>,
    pub beta: f64,
    pub tau: f64,
    pub infringed: bool,
}

/// Generated-side inputs for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedStep {
    pub t: usize,
    pub patches: PatchEmbeddings,
    pub mask: SoftMask,
}

/// Reference-side inputs for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStep {
    pub t: usize,
    pub patches: PatchEmbeddings,
}

/// Uniform distribution over `n` steps.
pub fn uniform_pi(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub(crate) fn check_pi(pi: &[f64], n: usize) -> Result<()> {
    if pi.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: pi.len(),
        });
    }
    if pi.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::contract("step weights must be nonnegative"));
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("step weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// S_img at one timestep.
pub fn step_similarity(gen: &GeneratedStep, reference: &ReferenceStep, beta: f64) -> Result<f64> {
    if gen.patches.dim() != reference.patches.dim() {
        return Err(Error::DimensionMismatch {
            expected: reference.patches.dim(),
            found: gen.patches.dim(),
        });
    }
    let w = mask_weights(&gen.mask, gen.patches.width, gen.patches.height)?;
    let g = pooled_embedding_or_uniform(&gen.patches, &w)?;
    partial_similarity(&g, &reference.patches, beta)
}

/// Scores each aligned step, aggregates, and thresholds with `overall > tau`.
pub fn detect(
    gen: &[GeneratedStep],
    reference: &[ReferenceStep],
    pi: Option<&[f64]>,
    beta: f64,
    tau: f64,
    rule: AggregationRule,
) -> Result<DetectionReport> {
    if gen.is_empty() {
        return Err(Error::Alignment("no timesteps to evaluate".into()));
    }
    let gen_steps: Vec<usize> = gen.iter().map(|g| g.t).collect();
    let ref_steps: Vec<usize> = reference.iter().map(|r| r.t).collect();
    if gen_steps != ref_steps {
        return Err(Error::Alignment(format!(
            "generated steps {gen_steps:?} do not match reference steps {ref_steps:?}"
        )));
    }
    let mut sorted = gen_steps.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != gen_steps.len() {
        return Err(Error::Alignment(format!("duplicate timesteps in {gen_steps:?}")));
    }
    let uniform = uniform_pi(gen.len());
    let pi = pi.unwrap_or(&uniform);
    check_pi(pi, gen.len())?;

    let scores = gen
        .iter()
        .zip(reference)
        .map(|(g, r)| step_similarity(g, r, beta))
        .collect::<Result<Vec<_>>>()?;
    let overall = match rule {
        AggregationRule::WeightedMean => scores.iter().zip(pi).map(|(s, p)| s * p).sum(),
        AggregationRule::MaxOverSteps => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    if !overall.is_finite() {
        return Err(Error::Numeric("detection score is not finite".into()));
    }
    Ok(DetectionReport {
        per_step: gen_steps.iter().copied().zip(scores).collect(),
        pi: gen_steps.iter().copied().zip(pi.iter().copied()).collect(),
        overall,
        rule,
        beta,
        tau,
        infringed: overall > tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit(v: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector::unit(v).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> EmbeddingVector {
        unit((0..d).map(|_| rng.sample(StandardNormal)).collect())
    }

    fn patches(rng: &mut ChaCha8Rng, w: usize, h: usize, d: usize, source: PatchSource) -> PatchEmbeddings {
        PatchEmbeddings::new(w, h, (0..w * h).map(|_| random_unit(rng, d)).collect(), source).unwrap()
    }

    fn mask(w: usize, h: usize, values: Vec<f64>) -> SoftMask {
        SoftMask::new(ScalarField::new(w, h, values).unwrap(), 0).unwrap()
    }

    #[test]
    fn weights_from_masks() {
        assert_eq!(mask_weights(&mask(3, 1, vec![0.0, 1.0, 0.0]), 3, 1).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(mask_weights(&mask(2, 2, vec![0.0; 4]), 2, 2).unwrap(), vec![0.25; 4]);
        let w = mask_weights(&mask(2, 1, vec![0.2, 0.8]), 2, 1).unwrap();
        assert!((w[0] - 0.2).abs() < 1e-15 && (w[1] - 0.8).abs() < 1e-15);
        let w = mask_weights(&mask(1, 1, vec![1.0]), 2, 2).unwrap();
        assert_eq!(w, vec![0.25; 4]);
    }

    #[test]
    fn pooling_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = patches(&mut rng, 2, 2, 8, PatchSource::Generated);
        let g = pooled_embedding(&f, &[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(g.as_slice().iter().zip(f.patches[2].as_slice()).all(|(a, b)| (a - b).abs() < 1e-15));

        let p = f.patches[0].clone();
        let twins = PatchEmbeddings::new(2, 1, vec![p.clone(), p.clone()], PatchSource::Generated).unwrap();
        let g = pooled_embedding(&twins, &[0.3, 0.9]).unwrap();
        assert!(g.as_slice().iter().zip(p.as_slice()).all(|(a, b)| (a - b).abs() < 1e-15));

        let w: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
        let g = pooled_embedding(&f, &w).unwrap();
        let mut sum = vec![0.0; 8];
        for (p, wt) in f.patches.iter().zip(&w) {
            for (s, x) in sum.iter_mut().zip(p.as_slice()) {
                *s += wt * x;
            }
        }
        let n = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in g.as_slice().iter().zip(&sum) {
            assert!((a - b / n).abs() < 1e-14);
        }
    }

    #[test]
    fn antipodal_patches_are_degenerate() {
        let p = PatchEmbeddings::new(
            2,
            1,
            vec![unit(vec![1.0, 0.0]), unit(vec![-1.0, 0.0])],
            PatchSource::Generated,
        )
        .unwrap();
        assert!(matches!(pooled_embedding(&p, &[0.5, 0.5]), Err(Error::DegeneratePool)));
        let p3 = PatchEmbeddings::new(
            3,
            1,
            vec![unit(vec![1.0, 0.0]), unit(vec![-1.0, 0.0]), unit(vec![0.0, 1.0])],
            PatchSource::Generated,
        )
        .unwrap();
        let g = pooled_embedding_or_uniform(&p3, &[0.5, 0.5, 0.0]).unwrap();
        assert!((g.as_slice()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn similarity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_unit(&mut rng, 6);
        let own = PatchEmbeddings::new(1, 1, vec![g.clone()], PatchSource::Reference).unwrap();
        assert!((partial_similarity(&g, &own, 3.0).unwrap() - 1.0).abs() < 1e-12);

        let refs = patches(&mut rng, 3, 1, 6, PatchSource::Reference);
        let cos: Vec<f64> = refs.patches.iter().map(|u| cosine(&g, u).unwrap()).collect();
        let max = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((partial_similarity(&g, &refs, 1000.0).unwrap() - max).abs() < 1e-3);

        let beta: f64 = 5.0;
        let expected = cos.iter().map(|c| (beta * c).exp()).sum::<f64>().ln() / beta;
        assert!((partial_similarity(&g, &refs, beta).unwrap() - expected).abs() < 1e-12);
    }

    fn self_fixture(rng: &mut ChaCha8Rng) -> (Vec<GeneratedStep>, Vec<ReferenceStep>) {
        let p = patches(rng, 2, 2, 8, PatchSource::Generated);
        let mut r = p.clone();
        r.source = PatchSource::Reference;
        (
            vec![GeneratedStep {
                t: 5,
                patches: p,
                mask: mask(2, 2, vec![0.0, 1.0, 0.0, 0.0]),
            }],
            vec![ReferenceStep { t: 5, patches: r }],
        )
    }

    #[test]
    fn single_step_rules_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, r) = self_fixture(&mut rng);
        let a = detect(&g, &r, None, 20.0, 0.9, AggregationRule::WeightedMean).unwrap();
        let b = detect(&g, &r, None, 20.0, 0.9, AggregationRule::MaxOverSteps).unwrap();
        assert_eq!(a.overall, b.overall);
        assert_eq!(a.overall, a.per_step[&5]);
    }

    #[test]
    fn self_comparison_with_sharp_pooling() {
        // Orthonormal patches make the pooled self-match dominate.
        let d = 4;
        let basis: Vec<EmbeddingVector> = (0..d)
            .map(|i| unit((0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()))
            .collect();
        let gp = PatchEmbeddings::new(2, 2, basis.clone(), PatchSource::Generated).unwrap();
        let rp = PatchEmbeddings::new(2, 2, basis, PatchSource::Reference).unwrap();
        let g = vec![GeneratedStep {
            t: 1,
            patches: gp,
            mask: mask(2, 2, vec![1.0, 0.0, 0.0, 0.0]),
        }];
        let r = vec![ReferenceStep { t: 1, patches: rp }];
        let report = detect(&g, &r, None, 1000.0, 0.9, AggregationRule::WeightedMean).unwrap();
        assert!((report.overall - 1.0).abs() < 1e-6);
        assert!(report.infringed);
    }

    #[test]
    fn three_step_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Vec::new();
        let mut r = Vec::new();
        for t in [2, 5, 9] {
            g.push(GeneratedStep {
                t,
                patches: patches(&mut rng, 2, 2, 8, PatchSource::Generated),
                mask: mask(2, 2, (0..4).map(|_| rng.random()).collect()),
            });
            r.push(ReferenceStep {
                t,
                patches: patches(&mut rng, 2, 2, 8, PatchSource::Reference),
            });
        }
        let report = detect(&g, &r, None, 20.0, 0.5, AggregationRule::WeightedMean).unwrap();
        let mean = report.per_step.values().sum::<f64>() / 3.0;
        assert!((report.overall - mean).abs() < 1e-12);
        assert_eq!(report.per_step.keys().copied().collect::<Vec<_>>(), vec![2, 5, 9]);
    }

    #[test]
    fn boundary_is_not_infringing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (g, r) = self_fixture(&mut rng);
        let probe = detect(&g, &r, None, 20.0, 0.0, AggregationRule::WeightedMean).unwrap();
        let at = detect(&g, &r, None, 20.0, probe.overall, AggregationRule::WeightedMean).unwrap();
        assert!(!at.infringed);
    }

    #[test]
    fn misaligned_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (g, mut r) = self_fixture(&mut rng);
        r[0].t = 6;
        assert!(matches!(
            detect(&g, &r, None, 20.0, 0.5, AggregationRule::WeightedMean),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(
            detect(&[], &[], None, 20.0, 0.5, AggregationRule::WeightedMean),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn bad_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (g, r) = self_fixture(&mut rng);
        assert!(detect(&g, &r, Some(&[0.5]), 20.0, 0.5, AggregationRule::WeightedMean).is_err());
        assert!(detect(&g, &r, Some(&[1.0, 0.0]), 20.0, 0.5, AggregationRule::WeightedMean).is_err());
    }

    proptest! {
        #[test]
        fn adding_reference_patch_never_decreases(seed in any::<u64>(), beta in 0.5f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_unit(&mut rng, 6);
            let refs = patches(&mut rng, 3, 1, 6, PatchSource::Reference);
            let before = partial_similarity(&g, &refs, beta).unwrap();
            let mut more = refs.patches.clone();
            more.push(random_unit(&mut rng, 6));
            let grown = PatchEmbeddings::new(4, 1, more, PatchSource::Reference).unwrap();
            prop_assert!(partial_similarity(&g, &grown, beta).unwrap() >= before);
        }

        #[test]
        fn max_rule_dominates_mean(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Vec::new();
            let mut r = Vec::new();
            for t in 1..=3 {
                g.push(GeneratedStep {
                    t,
                    patches: patches(&mut rng, 2, 2, 5, PatchSource::Generated),
                    mask: mask(2, 2, (0..4).map(|_| rng.random()).collect()),
                });
                r.push(ReferenceStep { t, patches: patches(&mut rng, 2, 2, 5, PatchSource::Reference) });
            }
            let mean = detect(&g, &r, None, 20.0, 0.5, AggregationRule::WeightedMean).unwrap();
            let max = detect(&g, &r, None, 20.0, 0.5, AggregationRule::MaxOverSteps).unwrap();
            prop_assert!(max.overall >= mean.overall - 1e-15);
            prop_assert_eq!(mean.infringed, mean.overall > mean.tau);
        }

        #[test]
        fn more_weight_on_better_patch_helps(seed in any::<u64>(), shift in 0.01f64..0.5) {
            // At β = 1000 the similarity is the best reference cosine. Moving
            // weight onto the patch equal to that reference cannot lower it.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let refs = patches(&mut rng, 2, 1, 4, PatchSource::Reference);
            let good = refs.patches[0].clone();
            let bad = random_unit(&mut rng, 4);
            let gen = PatchEmbeddings::new(2, 1, vec![good, bad], PatchSource::Generated).unwrap();
            let score = |w: [f64; 2]| -> Option<f64> {
                pooled_embedding(&gen, &w).ok().map(|g| partial_similarity(&g, &refs, 1000.0).unwrap())
            };
            let best_ref = |w: [f64; 2]| -> Option<usize> {
                let g = pooled_embedding(&gen, &w).ok()?;
                let c: Vec<f64> = refs.patches.iter().map(|u| cosine(&g, u).unwrap()).collect();
                Some(if c[0] >= c[1] { 0 } else { 1 })
            };
            let base = [0.5, 0.5];
            let moved = [0.5 + shift, 0.5 - shift];
            if let (Some(a), Some(b), Some(0), Some(0)) = (score(base), score(moved), best_ref(base), best_ref(moved)) {
                prop_assert!(b >= a - 1e-3, "{} < {}", b, a);
            }
        }
    }
}
