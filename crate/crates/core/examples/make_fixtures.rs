//! Regenerates the shipped fixture bundles.
//!
//!     cargo run -p amcr-core --example make_fixtures -- fixtures

use std::fs;
use std::path::{Path, PathBuf};

use amcr_core::attention::{build_soft_mask, AttentionLayer, AttentionStack, SoftMask};
use amcr_core::backends::{
    write_attention, write_latents, write_masks, write_trajectory, BundleManifest, ImagePatchEncoder, TrajectoryStep,
    MANIFEST,
};
use amcr_core::detector::{PatchEmbeddings, PatchSource};
use amcr_core::mitigator::{synthetic_latents, FixtureSpec, MitigationFixture};
use amcr_core::numerics::{EmbeddingVector, ScalarField};
use amcr_core::Result;

const PROMPTS: &str = "\
A cheerful plumber fixing a sink, red cap, blue overalls, photo.
A minimal bitten apple logo with a single leaf at an angled corner, flat design.
";

const CORPUS: &[(&str, &str)] = &[
    ("mario", "character"),
    ("super mario", "character"),
    ("mustached plumber", "character"),
    ("red cap and blue overalls", "costume"),
    ("red cap with m emblem", "costume"),
    ("bitten apple logo", "trademark"),
    ("apple inc", "trademark"),
    ("apple logo with leaf", "trademark"),
    ("mickey mouse", "character"),
    ("swoosh logo", "trademark"),
    ("yellow electric mouse", "character"),
    ("purple and gold jersey", "costume"),
];

const TOKENS: [&str; 5] = ["a", "plumber", "red cap", "blue overalls", "sink"];

/// Mask tokens: the two costume phrases.
const MASK_TOKENS: [usize; 2] = [2, 3];

fn main() -> Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    fs::create_dir_all(&out)?;
    let mut corpus = String::new();
    for (phrase, tag) in CORPUS {
        corpus.push_str(&serde_json::to_string(&serde_json::json!({"phrase": phrase, "tag": tag}))?);
        corpus.push('\n');
    }
    fs::write(out.join("corpus.jsonl"), corpus)?;
    plumber(&out.join("plumber"))?;
    selfcheck(&out.join("selfcheck"))?;
    println!("wrote fixtures under {}", out.display());
    Ok(())
}

fn gaussian(x: f64, y: f64, cx: f64, cy: f64, s: f64) -> f64 {
    (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
}

/// Two layers of two heads over a `w × h` patch grid. Rows are a softmax
/// over token logits scaled to 0.95, leaving mass for padding tokens.
fn synthetic_stack(w: usize, h: usize, step: usize, total: usize) -> Result<AttentionStack> {
    let gain = 1.0 + step as f64 / total as f64;
    let layers = (0..2)
        .map(|l| {
            let heads = (0..2)
                .map(|hd| {
                    let s = 1.0 + 0.5 * hd as f64;
                    let shift = 0.25 * l as f64;
                    let mut values = Vec::with_capacity(w * h * TOKENS.len());
                    for cell in 0..w * h {
                        let (x, y) = ((cell % w) as f64, (cell / w) as f64);
                        let logits = [
                            0.5,
                            1.0 + 1.5 * gaussian(x, y, 1.0, 1.0, s),
                            gain * 2.5 * gaussian(x, y, 0.5 + shift, 0.5, s),
                            gain * 2.0 * gaussian(x, y, 1.5, 1.0 + shift, s),
                            1.5 * gaussian(x, y, 3.0, 3.0, s),
                        ];
                        let z: f64 = logits.iter().map(|v| v.exp()).sum();
                        values.extend(logits.iter().map(|v| 0.95 * v.exp() / z));
                    }
                    values
                })
                .collect();
            AttentionLayer::new(w, h, TOKENS.len(), heads)
        })
        .collect::<Result<Vec<_>>>()?;
    AttentionStack::new(layers, TOKENS.iter().map(|s| s.to_string()).collect(), step)
}

fn manifest(name: &str, description: &str, steps: Vec<usize>) -> BundleManifest {
    BundleManifest {
        name: name.into(),
        description: description.into(),
        steps,
        prompts: None,
        corpus: None,
        latents: None,
        attention: Vec::new(),
        generated: None,
        reference: None,
        masks: None,
        mitigation: None,
    }
}

fn write_manifest(dir: &Path, m: &BundleManifest) -> Result<()> {
    let text = toml::to_string_pretty(m).map_err(|e| amcr_core::Error::Config(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

fn plumber(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let spec = FixtureSpec::default();
    let (gw, gh) = (spec.width / spec.patch, spec.height / spec.patch);
    let (z_gen, z_ref) = synthetic_latents(&spec)?;
    write_latents(&dir.join("latents.bin"), &[z_gen.clone(), z_ref.clone()])?;
    fs::write(dir.join("prompts.txt"), PROMPTS)?;

    let mut m = manifest(
        "plumber",
        "Synthetic partial copy: the top-left quadrant of the generated latent repeats the reference.",
        spec.steps.clone(),
    );
    let mut masks = Vec::new();
    for &t in &spec.steps {
        let stack = synthetic_stack(gw, gh, t, spec.total_steps)?;
        let name = format!("attention_t{t}.bin");
        write_attention(&dir.join(&name), &stack)?;
        m.attention.push(name.into());
        masks.push(build_soft_mask(&stack, None, Some(&MASK_TOKENS))?);
    }
    write_masks(&dir.join("masks.bin"), &masks)?;

    let fixture = MitigationFixture::build(spec.clone(), z_gen, z_ref, masks, None)?;
    let generated = fixture
        .generated_trajectory(&fixture.base)?
        .iter()
        .zip(&spec.steps)
        .map(|(z, &t)| {
            let patches = fixture.encoder.embed_patches(z)?;
            Ok(TrajectoryStep {
                t,
                patches: PatchEmbeddings { source: PatchSource::Generated, ..patches },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reference: Vec<TrajectoryStep> = fixture
        .reference_patches
        .iter()
        .zip(&spec.steps)
        .map(|(p, &t)| TrajectoryStep { t, patches: p.clone() })
        .collect();
    write_trajectory(&dir.join("generated.bin"), &generated)?;
    write_trajectory(&dir.join("reference.bin"), &reference)?;

    m.prompts = Some("prompts.txt".into());
    m.corpus = Some("../corpus.jsonl".into());
    m.latents = Some("latents.bin".into());
    m.generated = Some("generated.bin".into());
    m.reference = Some("reference.bin".into());
    m.masks = Some("masks.bin".into());
    m.mitigation = Some(spec);
    write_manifest(dir, &m)
}

/// Generated and reference patches are the same orthonormal basis and the
/// mask selects one patch, so the pooled region matches exactly one
/// reference patch and is orthogonal to the rest.
fn selfcheck(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (w, h, dim) = (4usize, 4usize, 16usize);
    let steps = vec![3, 6, 9];
    let basis: Vec<EmbeddingVector> = (0..w * h)
        .map(|i| EmbeddingVector::new((0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect()))
        .collect::<Result<_>>()?;
    let side = |source| -> Result<Vec<TrajectoryStep>> {
        steps
            .iter()
            .map(|&t| Ok(TrajectoryStep { t, patches: PatchEmbeddings::new(w, h, basis.clone(), source)? }))
            .collect()
    };
    write_trajectory(&dir.join("generated.bin"), &side(PatchSource::Generated)?)?;
    write_trajectory(&dir.join("reference.bin"), &side(PatchSource::Reference)?)?;
    let masks = steps
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let values = (0..w * h).map(|i| if i == 5 + k { 1.0 } else { 0.0 }).collect();
            SoftMask::new(ScalarField::new(w, h, values)?, t)
        })
        .collect::<Result<Vec<_>>>()?;
    write_masks(&dir.join("masks.bin"), &masks)?;

    let mut m = manifest("selfcheck", "Generated trajectory identical to the reference; forced positive.", steps);
    m.generated = Some("generated.bin".into());
    m.reference = Some("reference.bin".into());
    m.masks = Some("masks.bin".into());
    write_manifest(dir, &m)
}
