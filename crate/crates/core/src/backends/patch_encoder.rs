use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Concurrency, ImagePatchEncoder};
use crate::detector::{PatchEmbeddings, PatchSource};
use crate::diffusion::LatentState;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, EmbeddingVector};

/// Hermetic image-side encoder: each `patch × patch` block of the latent is
/// mapped affinely (`E·x + c`) and unit-normalized. Being affine before the
/// normalization, its Jacobian is available in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPatchEncoder {
    channels: usize,
    width: usize,
    height: usize,
    patch: usize,
    dim: usize,
    /// Row-major `dim × (channels·patch²)`.
    e: Vec<f64>,
    c: Vec<f64>,
    id: String,
}

impl LinearPatchEncoder {
    pub fn seeded(seed: u64, channels: usize, width: usize, height: usize, patch: usize, dim: usize) -> Result<Self> {
        if patch == 0 || !width.is_multiple_of(patch) || !height.is_multiple_of(patch) {
            return Err(Error::ShapeMismatch(format!(
                "patch size {patch} does not tile a {height}x{width} latent"
            )));
        }
        if channels == 0 || dim == 0 {
            return Err(Error::ShapeMismatch("encoder needs channels and an embedding dimension".into()));
        }
        let k = channels * patch * patch;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let scale = 1.0 / (k as f64).sqrt();
        let e = (0..dim * k)
            .map(|_| { let x: f64 = StandardNormal.sample(&mut rng); scale * x })
            .collect();
        let c = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Self {
            channels,
            width,
            height,
            patch,
            dim,
            e,
            c,
            id: format!("linear-patch/seed={seed}/patch={patch}/dim={dim}"),
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    fn inputs(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    fn check_latent(&self, latent: &LatentState) -> Result<()> {
        if latent.shape() != (self.channels, self.height, self.width) {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects latent {:?}, got {:?}",
                (self.channels, self.height, self.width),
                latent.shape()
            )));
        }
        Ok(())
    }

    /// Latent indices feeding patch `p`, in input order.
    fn patch_indices(&self, p: usize) -> Vec<usize> {
        let (gw, _) = self.grid();
        let (px, py) = (p % gw, p / gw);
        let mut idx = Vec::with_capacity(self.inputs());
        for ch in 0..self.channels {
            for dy in 0..self.patch {
                for dx in 0..self.patch {
                    let (x, y) = (px * self.patch + dx, py * self.patch + dy);
                    idx.push(ch * self.width * self.height + y * self.width + x);
                }
            }
        }
        idx
    }

    /// Pre-normalization activations `E·x_p + c` for every patch.
    pub fn activations(&self, latent: &LatentState) -> Result<Vec<Vec<f64>>> {
        self.check_latent(latent)?;
        let k = self.inputs();
        let (gw, gh) = self.grid();
        Ok((0..gw * gh)
            .map(|p| {
                let x: Vec<f64> = self.patch_indices(p).iter().map(|&i| latent.values()[i]).collect();
                (0..self.dim)
                    .map(|r| dot(&self.e[r * k..(r + 1) * k], &x) + self.c[r])
                    .collect()
            })
            .collect())
    }

    /// Pulls gradients with respect to the unit patch embeddings back to the
    /// latent. `activations` must come from [`Self::activations`] on the same
    /// latent.
    pub fn backprop(&self, activations: &[Vec<f64>], grad_units: &[Vec<f64>]) -> Vec<f64> {
        let k = self.inputs();
        let mut grad = vec![0.0; self.channels * self.width * self.height];
        for (p, (y, du)) in activations.iter().zip(grad_units).enumerate() {
            let n = norm(y);
            let u: Vec<f64> = y.iter().map(|v| v / n).collect();
            let proj = dot(&u, du);
            let dy: Vec<f64> = du.iter().zip(&u).map(|(d, ui)| (d - ui * proj) / n).collect();
            for (j, &li) in self.patch_indices(p).iter().enumerate() {
                grad[li] += (0..self.dim).map(|r| self.e[r * k + j] * dy[r]).sum::<f64>();
            }
        }
        grad
    }
}

impl ImagePatchEncoder for LinearPatchEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn grid(&self) -> (usize, usize) {
        (self.width / self.patch, self.height / self.patch)
    }

    fn embed_patches(&self, latent: &LatentState) -> Result<PatchEmbeddings> {
        let (gw, gh) = self.grid();
        let patches = self
            .activations(latent)?
            .into_iter()
            .map(EmbeddingVector::unit)
            .collect::<Result<Vec<_>>>()?;
        PatchEmbeddings::new(gw, gh, patches, PatchSource::Generated)
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::ConcurrentSafe
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoiseStream;

    #[test]
    fn grid_and_units() {
        let enc = LinearPatchEncoder::seeded(1, 1, 8, 8, 2, 16).unwrap();
        assert_eq!(enc.grid(), (4, 4));
        let z = NoiseStream::new(2).sample(0, &LatentState::zeros(1, 8, 8).unwrap());
        let p = enc.embed_patches(&z).unwrap();
        assert_eq!(p.len(), 16);
        assert!(p.patches.iter().all(|u| u.is_unit() && u.dim() == 16));
        assert!(LinearPatchEncoder::seeded(1, 1, 8, 8, 3, 16).is_err());
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let enc = LinearPatchEncoder::seeded(3, 1, 4, 4, 2, 5).unwrap();
        let z = NoiseStream::new(4).sample(0, &LatentState::zeros(1, 4, 4).unwrap());
        let probe: Vec<Vec<f64>> = (0..4).map(|p| (0..5).map(|r| ((p * 5 + r) as f64).sin()).collect()).collect();
        let objective = |z: &LatentState| -> f64 {
            let u = enc.embed_patches(z).unwrap();
            u.patches.iter().zip(&probe).map(|(u, w)| dot(u.as_slice(), w)).sum()
        };
        let analytic = enc.backprop(&enc.activations(&z).unwrap(), &probe);
        let h = 1e-6;
        for i in 0..z.len() {
            let mut plus = z.values().to_vec();
            let mut minus = z.values().to_vec();
            plus[i] += h;
            minus[i] -= h;
            let num = (objective(&z.with_values(plus).unwrap()) - objective(&z.with_values(minus).unwrap())) / (2.0 * h);
            assert!((num - analytic[i]).abs() < 1e-7, "{i}: {num} vs {}", analytic[i]);
        }
    }
}
