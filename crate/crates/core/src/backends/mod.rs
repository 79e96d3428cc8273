//! Provider contracts and their hermetic and remote implementations.

mod container;
mod fixtures;
mod patch_encoder;
mod persist;
mod remote;
mod test_encoder;

pub use container::{
    read_attention, read_latents, read_masks, read_trajectory, write_attention, write_latents, write_masks,
    write_trajectory, TrajectoryStep,
};
pub use fixtures::{ingest_fixture_bundle, BundleManifest, FixtureBundle, MANIFEST};
pub use patch_encoder::LinearPatchEncoder;
pub use persist::{canonical_f64, canonical_json, canonical_json_line, persist_report, read_report};
pub use remote::{HttpCandidateProvider, HttpSlotProvider, JsonEndpoint, RemoteTextEncoder};
pub use test_encoder::{DeterministicTestEncoder, PlantedVocabulary};

pub use crate::diffusion::VPredictor;
pub use crate::prompt::SlotProvider;
pub use crate::sanitizer::CandidateProvider;

use crate::detector::PatchEmbeddings;
use crate::diffusion::LatentState;
use crate::error::{ProviderError, Result};
use crate::numerics::EmbeddingVector;

/// Whether a provider may be called from several threads at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concurrency {
    SerialOnly,
    ConcurrentSafe,
}

/// Maps text to unit-normalized embeddings.
pub trait TextEncoder {
    /// Stable identifier; corpora remember the id of the encoder that built them.
    fn id(&self) -> &str;

    fn dim(&self) -> usize;

    fn embed(&self, texts: &[&str]) -> std::result::Result<Vec<EmbeddingVector>, ProviderError>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::SerialOnly
    }

    fn embed_one(&self, text: &str) -> std::result::Result<EmbeddingVector, ProviderError> {
        let mut out = self.embed(&[text])?;
        match (out.pop(), out.is_empty()) {
            (Some(v), true) => Ok(v),
            _ => Err(ProviderError::Protocol("expected exactly one embedding".into())),
        }
    }
}

/// Maps a latent to a grid of unit-normalized patch embeddings.
pub trait ImagePatchEncoder {
    fn id(&self) -> &str;

    fn dim(&self) -> usize;

    /// Patch grid as (width, height).
    fn grid(&self) -> (usize, usize);

    fn embed_patches(&self, latent: &LatentState) -> Result<PatchEmbeddings>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::SerialOnly
    }
}
