use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{Concurrency, TextEncoder};
use crate::error::{Error, ProviderError, Result};
use crate::numerics::EmbeddingVector;
use crate::prompt::fold;

const BUILTIN_VOCAB: &str = include_str!("../../data/test_vocab.toml");

/// Hand-placed phrase vectors: each axis owns one coordinate and a phrase is
/// a weighted combination of axes.
#[derive(Debug, Clone, Deserialize)]
pub struct PlantedVocabulary {
    axes: Vec<String>,
    phrases: BTreeMap<String, BTreeMap<String, f64>>,
}

impl PlantedVocabulary {
    pub fn builtin() -> &'static PlantedVocabulary {
        static VOCAB: OnceLock<PlantedVocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| PlantedVocabulary::from_toml_str(BUILTIN_VOCAB).expect("builtin vocabulary parses"))
    }

    pub fn empty() -> Self {
        Self {
            axes: Vec::new(),
            phrases: BTreeMap::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: PlantedVocabulary = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut vocab = PlantedVocabulary {
            axes: raw.axes,
            phrases: BTreeMap::new(),
        };
        for (phrase, weights) in raw.phrases {
            vocab.plant(&phrase, weights)?;
        }
        Ok(vocab)
    }

    /// Adds (or replaces) a planted phrase.
    pub fn plant(&mut self, phrase: &str, weights: BTreeMap<String, f64>) -> Result<()> {
        for (axis, w) in &weights {
            if !self.axes.contains(axis) {
                return Err(Error::Config(format!("phrase '{phrase}' uses unknown axis '{axis}'")));
            }
            if !w.is_finite() {
                return Err(Error::Config(format!("phrase '{phrase}' has a non-finite weight")));
            }
        }
        if weights.values().all(|w| *w == 0.0) {
            return Err(Error::Config(format!("phrase '{phrase}' has no nonzero weight")));
        }
        self.phrases.insert(fold(phrase), weights);
        Ok(())
    }

    pub fn axes(&self) -> &[String] {
        &self.axes
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.phrases.contains_key(&fold(phrase))
    }

    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        self.phrases.keys().map(String::as_str)
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for axis in &self.axes {
            h.update(axis.as_bytes());
            h.update([0]);
        }
        for (phrase, weights) in &self.phrases {
            h.update(phrase.as_bytes());
            for (axis, w) in weights {
                h.update(axis.as_bytes());
                h.update(w.to_le_bytes());
            }
        }
        h.finalize().iter().take(4).map(|b| format!("{b:02x}")).collect()
    }
}

/// Hermetic text encoder. Planted phrases get their hand-placed vectors;
/// every other string gets a pseudorandom unit vector keyed by a hash of the
/// seed and the case-folded string, confined to the coordinates not used by
/// planted axes.
#[derive(Debug, Clone)]
pub struct DeterministicTestEncoder {
    seed: u64,
    dim: usize,
    vocab: PlantedVocabulary,
    id: String,
}

impl DeterministicTestEncoder {
    pub const DEFAULT_DIM: usize = 64;

    /// Encoder with the builtin planted vocabulary and the default dimension.
    pub fn new(seed: u64) -> Self {
        Self::with_vocabulary(seed, Self::DEFAULT_DIM, PlantedVocabulary::builtin().clone())
            .expect("builtin vocabulary fits the default dimension")
    }

    /// Encoder without planted phrases: every string is pseudorandom.
    pub fn unplanted(seed: u64, dim: usize) -> Result<Self> {
        Self::with_vocabulary(seed, dim, PlantedVocabulary::empty())
    }

    pub fn with_vocabulary(seed: u64, dim: usize, vocab: PlantedVocabulary) -> Result<Self> {
        if dim <= vocab.axes.len() {
            return Err(Error::contract(format!(
                "dimension {dim} leaves no room beyond {} planted axes",
                vocab.axes.len()
            )));
        }
        let id = format!("deterministic-test/seed={seed}/dim={dim}/vocab={}", vocab.digest());
        Ok(Self { seed, dim, vocab, id })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocabulary(&self) -> &PlantedVocabulary {
        &self.vocab
    }

    pub fn encode(&self, text: &str) -> EmbeddingVector {
        let key = fold(text);
        let mut v = vec![0.0; self.dim];
        if let Some(weights) = self.vocab.phrases.get(&key) {
            for (axis, w) in weights {
                let i = self.vocab.axes.iter().position(|a| a == axis).expect("axis validated on plant");
                v[i] = *w;
            }
        } else {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(key.as_bytes());
            let mut rng = ChaCha20Rng::from_seed(h.finalize().into());
            for x in &mut v[self.vocab.axes.len()..] {
                *x = StandardNormal.sample(&mut rng);
            }
        }
        EmbeddingVector::unit(v).expect("test embeddings are finite and nonzero")
    }
}

impl TextEncoder for DeterministicTestEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> std::result::Result<Vec<EmbeddingVector>, ProviderError> {
        Ok(texts.iter().map(|t| self.encode(t)).collect())
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::ConcurrentSafe
    }
}
