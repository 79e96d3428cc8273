//! Fixture bundles: a directory with a `manifest.toml` naming prompt, corpus,
//! latent, attention, trajectory and mask files. See `docs/fixtures.md`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::{read_attention, read_latents, read_masks, read_trajectory, TrajectoryStep};
use super::TextEncoder;
use crate::attention::{build_soft_mask, AttentionStack, SoftMask};
use crate::detector::{GeneratedStep, PatchSource, ReferenceStep};
use crate::diffusion::LatentState;
use crate::error::{Error, Result};
use crate::mitigator::{FixtureSpec, MitigationFixture};
use crate::risk::{load_corpus, RiskCorpus};

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Denoising steps every per-step artifact must cover, ascending.
    pub steps: Vec<usize>,
    /// One prompt per line.
    pub prompts: Option<PathBuf>,
    /// Line-delimited corpus records.
    pub corpus: Option<PathBuf>,
    /// Latents container: generated latent first, reference latent second.
    pub latents: Option<PathBuf>,
    /// One attention container per step.
    #[serde(default)]
    pub attention: Vec<PathBuf>,
    /// Generated-side patch trajectory.
    pub generated: Option<PathBuf>,
    /// Reference-side patch trajectory.
    pub reference: Option<PathBuf>,
    /// Per-step masks; derived from `attention` when absent.
    pub masks: Option<PathBuf>,
    /// Parameters to rebuild the mitigation fixture from the latents and masks.
    pub mitigation: Option<FixtureSpec>,
}

/// A loaded and validated bundle.
#[derive(Debug, Clone)]
pub struct FixtureBundle {
    pub root: PathBuf,
    pub manifest: BundleManifest,
    pub prompts: Vec<String>,
    pub corpus: Option<RiskCorpus>,
    pub latents: Vec<LatentState>,
    pub attention: Vec<AttentionStack>,
    pub generated: Vec<TrajectoryStep>,
    pub reference: Vec<TrajectoryStep>,
    pub masks: Vec<SoftMask>,
}

/// Loads a bundle and checks every artifact against its type invariants and
/// against the manifest's step list. The corpus is embedded with `encoder`.
pub fn ingest_fixture_bundle(dir: &Path, encoder: &dyn TextEncoder) -> Result<FixtureBundle> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::validation(&manifest_path, e.to_string()))?;
    let manifest: BundleManifest =
        toml::from_str(&text).map_err(|e| Error::validation(&manifest_path, e.to_string()))?;
    let bad = |msg: String| Error::validation(&manifest_path, msg);
    if manifest.steps.is_empty() || manifest.steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(bad("steps must be nonempty and strictly ascending".into()));
    }
    let resolve = |p: &PathBuf| dir.join(p);

    let prompts = match &manifest.prompts {
        Some(p) => {
            let path = resolve(p);
            fs::read_to_string(&path)
                .map_err(|e| Error::validation(&path, e.to_string()))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect()
        }
        None => Vec::new(),
    };

    let corpus = match &manifest.corpus {
        Some(p) => {
            let path = resolve(p);
            Some(load_corpus(&path, encoder).map_err(|e| match e {
                Error::Io(io) => Error::validation(&path, io.to_string()),
                other => other,
            })?)
        }
        None => None,
    };

    let latents = match &manifest.latents {
        Some(p) => read_latents(&resolve(p))?,
        None => Vec::new(),
    };

    let attention = manifest
        .attention
        .iter()
        .map(|p| read_attention(&resolve(p)))
        .collect::<Result<Vec<_>>>()?;
    if !attention.is_empty() {
        let steps: Vec<usize> = attention.iter().map(|a| a.step).collect();
        if steps != manifest.steps {
            return Err(bad(format!("attention steps {steps:?} do not match {:?}", manifest.steps)));
        }
    }

    let load_traj = |p: &Option<PathBuf>, source: PatchSource| -> Result<Vec<TrajectoryStep>> {
        let Some(p) = p else { return Ok(Vec::new()) };
        let path = resolve(p);
        let traj = read_trajectory(&path)?;
        let steps: Vec<usize> = traj.iter().map(|s| s.t).collect();
        if steps != manifest.steps {
            return Err(Error::validation(&path, format!("steps {steps:?} do not match {:?}", manifest.steps)));
        }
        if traj.iter().any(|s| s.patches.source != source) {
            return Err(Error::validation(&path, format!("expected {source:?} patches")));
        }
        Ok(traj)
    };
    let generated = load_traj(&manifest.generated, PatchSource::Generated)?;
    let reference = load_traj(&manifest.reference, PatchSource::Reference)?;
    if let (Some(g), Some(r)) = (generated.first(), reference.first()) {
        if g.patches.dim() != r.patches.dim() {
            return Err(bad(format!(
                "generated patches have dimension {}, reference {}",
                g.patches.dim(),
                r.patches.dim()
            )));
        }
    }

    let masks = match &manifest.masks {
        Some(p) => {
            let path = resolve(p);
            let masks = read_masks(&path)?;
            let steps: Vec<usize> = masks.iter().map(|m| m.step).collect();
            if steps != manifest.steps {
                return Err(Error::validation(&path, format!("steps {steps:?} do not match {:?}", manifest.steps)));
            }
            masks
        }
        None => attention
            .iter()
            .map(|a| build_soft_mask(a, None, None))
            .collect::<Result<Vec<_>>>()?,
    };

    Ok(FixtureBundle {
        root: dir.to_path_buf(),
        manifest,
        prompts,
        corpus,
        latents,
        attention,
        generated,
        reference,
        masks,
    })
}

impl FixtureBundle {
    fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST)
    }

    /// Aligned detector inputs, one per manifest step.
    pub fn detector_inputs(&self) -> Result<(Vec<GeneratedStep>, Vec<ReferenceStep>)> {
        if self.generated.is_empty() || self.reference.is_empty() || self.masks.is_empty() {
            return Err(Error::validation(
                self.manifest_path(),
                "bundle lacks generated or reference trajectories, or masks",
            ));
        }
        let gen = self
            .generated
            .iter()
            .zip(&self.masks)
            .map(|(s, m)| GeneratedStep {
                t: s.t,
                patches: s.patches.clone(),
                mask: m.clone(),
            })
            .collect();
        let reference = self
            .reference
            .iter()
            .map(|s| ReferenceStep {
                t: s.t,
                patches: s.patches.clone(),
            })
            .collect();
        Ok((gen, reference))
    }

    /// Rebuilds the mitigation fixture from the bundle's latents and masks.
    pub fn mitigation_fixture(&self) -> Result<MitigationFixture> {
        let spec = self
            .manifest
            .mitigation
            .clone()
            .ok_or_else(|| Error::validation(self.manifest_path(), "bundle has no [mitigation] section"))?;
        if spec.steps != self.manifest.steps {
            return Err(Error::validation(self.manifest_path(), "mitigation steps differ from bundle steps"));
        }
        let [z_gen, z_ref] = <[LatentState; 2]>::try_from(self.latents.clone()).map_err(|v| {
            Error::validation(
                self.manifest_path(),
                format!("mitigation needs exactly 2 latents, found {}", v.len()),
            )
        })?;
        MitigationFixture::build(spec, z_gen, z_ref, self.masks.clone(), None)
    }
}
