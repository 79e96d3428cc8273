//! Cross-attention aggregation into soft region-of-interest masks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{normalize_range01, ScalarField};

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// One layer of cross-attention: per head, an `HW × L` row-major matrix from
/// spatial patches to text tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub width: usize,
    pub height: usize,
    pub tokens: usize,
    pub heads: Vec<Vec<f64>>,
}

impl AttentionLayer {
    pub fn new(width: usize, height: usize, tokens: usize, heads: Vec<Vec<f64>>) -> Result<Self> {
        let layer = Self {
            width,
            height,
            tokens,
            heads,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.tokens == 0 {
            return Err(Error::ShapeMismatch(format!(
                "attention layer {}x{} with {} tokens is empty",
                self.height, self.width, self.tokens
            )));
        }
        let expected = self.cells() * self.tokens;
        for (h, head) in self.heads.iter().enumerate() {
            if head.len() != expected {
                return Err(Error::ShapeMismatch(format!(
                    "head {h} has {} values, expected {expected}",
                    head.len()
                )));
            }
            for (row, values) in head.chunks(self.tokens).enumerate() {
                if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::Numeric(format!("head {h} row {row} has a negative or non-finite weight")));
                }
                let sum: f64 = values.iter().sum();
                if sum > 1.0 + ROW_SUM_TOLERANCE {
                    return Err(Error::Numeric(format!("head {h} row {row} sums to {sum} > 1")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStack {
    pub layers: Vec<AttentionLayer>,
    pub token_labels: Vec<String>,
    pub step: usize,
}

impl AttentionStack {
    pub fn new(layers: Vec<AttentionLayer>, token_labels: Vec<String>, step: usize) -> Result<Self> {
        let stack = Self {
            layers,
            token_labels,
            step,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn tokens(&self) -> usize {
        self.token_labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::contract("attention stack has no layers"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.tokens != self.tokens() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} has {} tokens, stack has {} labels",
                    layer.tokens,
                    self.tokens()
                )));
            }
            layer.validate()?;
        }
        Ok(())
    }
}

/// Head-averaged attention of one layer (`HW × L`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMap {
    pub width: usize,
    pub height: usize,
    pub tokens: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    pub field: ScalarField,
    pub step: usize,
}

impl SoftMask {
    pub fn new(field: ScalarField, step: usize) -> Result<Self> {
        if field.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numeric("soft mask values must lie in [0, 1]".into()));
        }
        Ok(Self { field, step })
    }

    pub fn is_all_zero(&self) -> bool {
        self.field.values().iter().all(|v| *v == 0.0)
    }
}

pub fn head_average(layer: &AttentionLayer) -> Result<TokenMap> {
    let n = layer.heads.len();
    if n == 0 {
        return Err(Error::contract("layer has no attention heads"));
    }
    let len = layer.cells() * layer.tokens;
    let mut values = vec![0.0; len];
    for head in &layer.heads {
        if head.len() != len {
            return Err(Error::ShapeMismatch(format!("head has {} values, expected {len}", head.len())));
        }
        for (acc, v) in values.iter_mut().zip(head) {
            *acc += v;
        }
    }
    for v in &mut values {
        *v /= n as f64;
    }
    Ok(TokenMap {
        width: layer.width,
        height: layer.height,
        tokens: layer.tokens,
        values,
    })
}

/// Per-patch maximum over tokens, optionally restricted to `subset`.
pub fn token_reduce_max(map: &TokenMap, subset: Option<&[usize]>) -> Result<ScalarField> {
    if map.tokens == 0 {
        return Err(Error::contract("token map has no tokens"));
    }
    let all: Vec<usize>;
    let tokens = match subset {
        Some([]) => return Err(Error::contract("empty token subset")),
        Some(s) => {
            if let Some(bad) = s.iter().find(|&&i| i >= map.tokens) {
                return Err(Error::contract(format!("token index {bad} out of range 0..{}", map.tokens)));
            }
            s
        }
        None => {
            all = (0..map.tokens).collect();
            &all
        }
    };
    let values = map
        .values
        .chunks(map.tokens)
        .map(|row| tokens.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    ScalarField::new(map.width, map.height, values)
}

/// Resamples every field to the finest grid (most cells, first on ties) and
/// takes the weighted mean; uniform weights when none are given.
pub fn layer_aggregate(fields: &[ScalarField], weights: Option<&[f64]>) -> Result<ScalarField> {
    let Some(target) = fields.iter().reduce(|best, f| if f.len() > best.len() { f } else { best }) else {
        return Err(Error::contract("no layers to aggregate"));
    };
    let (w, h) = (target.width(), target.height());
    let uniform = vec![1.0; fields.len()];
    let weights = match weights {
        Some(ws) => {
            if ws.len() != fields.len() {
                return Err(Error::DimensionMismatch {
                    expected: fields.len(),
                    found: ws.len(),
                });
            }
            if ws.iter().any(|x| !x.is_finite() || *x < 0.0) || ws.iter().all(|x| *x == 0.0) {
                return Err(Error::contract("layer weights must be nonnegative and not all zero"));
            }
            ws
        }
        None => &uniform,
    };
    let total: f64 = weights.iter().sum();
    let mut acc = vec![0.0; w * h];
    for (field, wt) in fields.iter().zip(weights) {
        let resampled = field.resample_bilinear(w, h)?;
        for (a, v) in acc.iter_mut().zip(resampled.values()) {
            *a += wt * v;
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    ScalarField::new(w, h, acc)
}

/// Heads → tokens → layers → [0, 1] normalization.
pub fn build_soft_mask(stack: &AttentionStack, weights: Option<&[f64]>, tokens: Option<&[usize]>) -> Result<SoftMask> {
    stack.validate()?;
    let per_layer = stack
        .layers
        .iter()
        .map(|layer| token_reduce_max(&head_average(layer)?, tokens))
        .collect::<Result<Vec<_>>>()?;
    let u = layer_aggregate(&per_layer, weights)?;
    SoftMask::new(normalize_range01(&u), stack.step)
}

/// 8-bit level of a mask value, rounding half up.
pub fn mask_pixel(m: f64) -> u8 {
    (255.0 * m.clamp(0.0, 1.0) + 0.5).floor() as u8
}

pub fn export_mask(mask: &SoftMask, path: &Path) -> Result<()> {
    let f = &mask.field;
    let pixels: Vec<u8> = f.values().iter().map(|&m| mask_pixel(m)).collect();
    let img = image::GrayImage::from_raw(f.width() as u32, f.height() as u32, pixels)
        .ok_or_else(|| Error::ShapeMismatch("mask does not fit an image buffer".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(w: usize, h: usize, l: usize, heads: Vec<Vec<f64>>) -> AttentionLayer {
        AttentionLayer::new(w, h, l, heads).unwrap()
    }

    fn random_head(rng: &mut ChaCha8Rng, cells: usize, tokens: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(cells * tokens);
        for _ in 0..cells {
            let row: Vec<f64> = (0..tokens).map(|_| rng.random::<f64>()).collect();
            let s: f64 = row.iter().sum::<f64>() * 1.01;
            out.extend(row.iter().map(|v| v / s));
        }
        out
    }

    #[test]
    fn validation() {
        assert!(AttentionLayer::new(1, 1, 2, vec![vec![0.7, 0.7]]).is_err());
        assert!(AttentionLayer::new(1, 1, 2, vec![vec![-0.1, 0.5]]).is_err());
        assert!(AttentionLayer::new(1, 1, 2, vec![vec![0.5]]).is_err());
        let l = layer(1, 1, 2, vec![vec![0.5, 0.5]]);
        assert!(AttentionStack::new(vec![l], vec!["a".into()], 0).is_err());
    }

    #[test]
    fn head_average_cases() {
        let a = vec![0.1, 0.2, 0.3, 0.4];
        let b = vec![0.3, 0.0, 0.1, 0.6];
        let single = head_average(&layer(2, 1, 2, vec![a.clone()])).unwrap();
        assert_eq!(single.values, a);
        let two = head_average(&layer(2, 1, 2, vec![a.clone(), b.clone()])).unwrap();
        for i in 0..4 {
            assert!((two.values[i] - (a[i] + b[i]) / 2.0).abs() < 1e-15);
        }
        let permuted = head_average(&layer(2, 1, 2, vec![b, a])).unwrap();
        assert_eq!(permuted.values, two.values);
        let empty = AttentionLayer {
            width: 1,
            height: 1,
            tokens: 1,
            heads: vec![],
        };
        assert!(head_average(&empty).is_err());
    }

    #[test]
    fn token_max_cases() {
        let single = TokenMap {
            width: 3,
            height: 1,
            tokens: 1,
            values: vec![0.1, 0.5, 0.2],
        };
        assert_eq!(token_reduce_max(&single, None).unwrap().values(), &[0.1, 0.5, 0.2]);

        let dominated = TokenMap {
            width: 2,
            height: 1,
            tokens: 3,
            values: vec![0.1, 0.8, 0.1, 0.0, 0.9, 0.05],
        };
        assert_eq!(token_reduce_max(&dominated, None).unwrap().values(), &[0.8, 0.9]);
        assert_eq!(token_reduce_max(&dominated, Some(&[0, 2])).unwrap().values(), &[0.1, 0.05]);
        assert!(token_reduce_max(&dominated, Some(&[])).is_err());
        assert!(token_reduce_max(&dominated, Some(&[3])).is_err());
    }

    #[test]
    fn token_max_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f64> = (0..16 * 3).map(|_| rng.random()).collect();
        let map = TokenMap {
            width: 4,
            height: 4,
            tokens: 3,
            values: values.clone(),
        };
        let got = token_reduce_max(&map, None).unwrap();
        for cell in 0..16 {
            let mut m = f64::NEG_INFINITY;
            for tok in 0..3 {
                if values[cell * 3 + tok] > m {
                    m = values[cell * 3 + tok];
                }
            }
            assert_eq!(got.values()[cell], m);
        }
    }

    #[test]
    fn aggregate_cases() {
        let f = ScalarField::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(layer_aggregate(std::slice::from_ref(&f), None).unwrap(), f);
        let mean = layer_aggregate(&[f.clone(), f.clone()], None).unwrap();
        for (a, b) in mean.values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(layer_aggregate(&[f.clone(), f.clone()], Some(&[1.0])).is_err());
        assert!(layer_aggregate(std::slice::from_ref(&f), Some(&[0.0])).is_err());
        assert!(layer_aggregate(&[], None).is_err());
    }

    #[test]
    fn aggregate_upsamples_coarse_layer() {
        // 2×2 [[0, 4], [8, 12]] upsampled to 4×4 with half-pixel centres:
        // per-axis source weights are [1,0], [.75,.25], [.25,.75], [0,1].
        let coarse = ScalarField::new(2, 2, vec![0.0, 4.0, 8.0, 12.0]).unwrap();
        let fine = ScalarField::new(4, 4, vec![1.0; 16]).unwrap();
        let axis = [(1.0, 0.0), (0.75, 0.25), (0.25, 0.75), (0.0, 1.0)];
        let got = layer_aggregate(&[coarse, fine], Some(&[3.0, 1.0])).unwrap();
        assert_eq!((got.width(), got.height()), (4, 4));
        for y in 0..4 {
            for x in 0..4 {
                let (wy0, wy1) = axis[y];
                let (wx0, wx1) = axis[x];
                let up = wy0 * (wx0 * 0.0 + wx1 * 4.0) + wy1 * (wx0 * 8.0 + wx1 * 12.0);
                let expected = (3.0 * up + 1.0) / 4.0;
                assert!((got.get(x, y) - expected).abs() < 1e-12, "({x},{y})");
            }
        }
    }

    #[test]
    fn uniform_attention_gives_zero_mask() {
        let l = layer(4, 4, 2, vec![vec![0.5; 32], vec![0.5; 32]]);
        let stack = AttentionStack::new(vec![l], vec!["a".into(), "b".into()], 3).unwrap();
        let m = build_soft_mask(&stack, None, None).unwrap();
        assert!(m.is_all_zero());
        assert_eq!(m.step, 3);
    }

    #[test]
    fn concentrated_attention_is_one_hot() {
        let mut head = vec![0.0; 9 * 2];
        head[4 * 2 + 1] = 0.9;
        let stack = AttentionStack::new(vec![layer(3, 3, 2, vec![head])], vec!["a".into(), "b".into()], 0).unwrap();
        let m = build_soft_mask(&stack, None, None).unwrap();
        for (i, v) in m.field.values().iter().enumerate() {
            assert_eq!(*v, if i == 4 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn pixel_rounding() {
        assert_eq!(mask_pixel(0.0), 0);
        assert_eq!(mask_pixel(1.0), 255);
        assert_eq!(mask_pixel(0.5), 128);
    }

    #[test]
    fn export_writes_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let field = ScalarField::new(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        export_mask(&SoftMask::new(field, 0).unwrap(), &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.as_raw(), &vec![0, 128, 255]);
        let first = std::fs::read(&path).unwrap();
        export_mask(&SoftMask::new(ScalarField::new(3, 1, vec![0.0, 0.5, 1.0]).unwrap(), 0).unwrap(), &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);

        let black = SoftMask::new(ScalarField::zeros(2, 2).unwrap(), 0).unwrap();
        export_mask(&black, &path).unwrap();
        assert!(image::open(&path).unwrap().to_luma8().as_raw().iter().all(|p| *p == 0));
        assert!(export_mask(&black, &dir.path().join("missing/dir/m.png")).is_err());
    }

    fn random_stack(seed: u64) -> AttentionStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = rng.random_range(1..5);
        let mut layers = Vec::new();
        for _ in 0..rng.random_range(1..4) {
            let side = rng.random_range(1..6);
            let heads = (0..rng.random_range(1..4))
                .map(|_| random_head(&mut rng, side * side, tokens))
                .collect();
            layers.push(layer(side, side, tokens, heads));
        }
        AttentionStack::new(layers, (0..tokens).map(|i| format!("t{i}")).collect(), 1).unwrap()
    }

    proptest! {
        #[test]
        fn mask_in_unit_range(seed in any::<u64>()) {
            let m = build_soft_mask(&random_stack(seed), None, None).unwrap();
            prop_assert!(m.field.values().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(m.is_all_zero() || m.field.values().contains(&1.0));
        }

        #[test]
        fn head_permutation_invariance(seed in any::<u64>()) {
            let stack = random_stack(seed);
            let mut permuted = stack.clone();
            for l in &mut permuted.layers {
                l.heads.reverse();
            }
            let a = build_soft_mask(&stack, None, None).unwrap();
            let b = build_soft_mask(&permuted, None, None).unwrap();
            for (x, y) in a.field.values().iter().zip(b.field.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn full_token_subset_is_no_restriction(seed in any::<u64>()) {
            let stack = random_stack(seed);
            let all: Vec<usize> = (0..stack.tokens()).collect();
            prop_assert_eq!(
                build_soft_mask(&stack, None, Some(&all)).unwrap(),
                build_soft_mask(&stack, None, None).unwrap()
            );
        }

        #[test]
        fn scale_invariance(seed in any::<u64>(), kappa in 0.05f64..1.0) {
            let stack = random_stack(seed);
            let mut scaled = stack.clone();
            for l in &mut scaled.layers {
                for h in &mut l.heads {
                    for v in h.iter_mut() {
                        *v *= kappa;
                    }
                }
            }
            // Nearly constant fields amplify rounding in the normalization.
            let per_layer: Vec<ScalarField> = stack
                .layers
                .iter()
                .map(|l| token_reduce_max(&head_average(l).unwrap(), None).unwrap())
                .collect();
            let u = layer_aggregate(&per_layer, None).unwrap();
            prop_assume!(u.max() - u.min() > 1e-6 || u.max() == u.min());
            let a = build_soft_mask(&stack, None, None).unwrap();
            let b = build_soft_mask(&scaled, None, None).unwrap();
            for (x, y) in a.field.values().iter().zip(b.field.values()) {
                prop_assert!((x - y).abs() < 1e-9, "{} vs {} span {}", x, y, u.max() - u.min());
            }
        }
    }
}
