//! Desk-scale latent diffusion: variance-preserving schedules, forward
//! noising, clean-estimate reconstruction from v-predictions, and aligned
//! trajectories.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{EmbeddingVector, ScalarField};

/// A `channels × height × width` latent, channel-major then row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    channels: usize,
    width: usize,
    height: usize,
    values: Vec<f64>,
    pub step: usize,
}

impl LatentState {
    pub fn new(channels: usize, width: usize, height: usize, values: Vec<f64>, step: usize) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(Error::ShapeMismatch(format!(
                "latent dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * width * height {
            return Err(Error::ShapeMismatch(format!(
                "latent {channels}x{height}x{width} needs {} values, got {}",
                channels * width * height,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("latent value {i} is not finite")));
        }
        Ok(Self {
            channels,
            width,
            height,
            values,
            step,
        })
    }

    pub fn zeros(channels: usize, width: usize, height: usize) -> Result<Self> {
        Self::new(channels, width, height, vec![0.0; channels * width * height], 0)
    }

    /// Single-channel latent holding a scalar field.
    pub fn from_field(field: &ScalarField) -> Self {
        Self {
            channels: 1,
            width: field.width(),
            height: field.height(),
            values: field.values().to_vec(),
            step: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Same shape, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.channels, self.width, self.height, values, self.step)
    }

    pub fn check_same_shape(&self, other: &LatentState) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "latent shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `a·self + b·other`, elementwise.
    pub fn axpby(&self, a: f64, other: &LatentState, b: f64) -> Result<LatentState> {
        self.check_same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        self.with_values(values)
    }

    pub fn max_abs_diff(&self, other: &LatentState) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleFamily {
    /// α_t = cos(πt / 2(T+1)), σ_t = sin(πt / 2(T+1)).
    Cosine,
    /// σ_t² = t / (T+1), α_t = √(1 − σ_t²).
    Linear,
}

impl std::str::FromStr for ScheduleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleFamily::Cosine),
            "linear" => Ok(ScheduleFamily::Linear),
            _ => Err(Error::Config(format!("unknown schedule family '{s}'"))),
        }
    }
}

/// Variance-preserving schedule for t = 1..=T. Step 0 is the noise-free
/// endpoint (α = 1, σ = 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    family: ScheduleFamily,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

pub fn make_schedule(total_steps: usize, family: ScheduleFamily) -> Result<NoiseSchedule> {
    if total_steps < 1 {
        return Err(Error::contract("schedule needs at least one step"));
    }
    let denom = (total_steps + 1) as f64;
    let (alpha, sigma) = (0..=total_steps)
        .map(|t| match family {
            ScheduleFamily::Cosine => {
                let phase = std::f64::consts::FRAC_PI_2 * t as f64 / denom;
                (phase.cos(), phase.sin())
            }
            ScheduleFamily::Linear => {
                let var = t as f64 / denom;
                ((1.0 - var).sqrt(), var.sqrt())
            }
        })
        .unzip();
    Ok(NoiseSchedule { family, alpha, sigma })
}

impl NoiseSchedule {
    pub fn total_steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.total_steps() {
            return Err(Error::contract(format!(
                "step {t} outside schedule range 0..={}",
                self.total_steps()
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha[t])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.sigma[t])
    }

    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        Ok((self.alpha[t], self.sigma[t]))
    }
}

/// Conditioning passed to a v-predictor. `Minimal` carries no tokens at all.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioning {
    Prompt(Vec<EmbeddingVector>),
    Minimal,
}

/// Predicts v = α_t ε − σ_t z₀ from a noisy latent.
pub trait VPredictor {
    fn predict(&self, z_t: &LatentState, t: usize, cond: &Conditioning) -> Result<LatentState>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl VPredictor for ZeroPredictor {
    fn predict(&self, z_t: &LatentState, _t: usize, _cond: &Conditioning) -> Result<LatentState> {
        z_t.with_values(vec![0.0; z_t.len()])
    }
}

/// Seeded Gaussian noise indexed by timestep, so the same ε is drawn at a
/// given t no matter which trajectory asks for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseStream {
    pub seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn eps(&self, t: usize, like: &LatentState) -> LatentState {
        self.sample(t as u64, like)
    }

    /// Noise on an independent stream (distinct from every timestep stream).
    pub fn sample(&self, stream: u64, like: &LatentState) -> LatentState {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let values = (0..like.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut out = like.with_values(values).expect("shape copied from a valid latent");
        out.step = like.step;
        out
    }
}

/// Knows the clean latent and the noise stream, so it returns the exact v.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub z0: LatentState,
    pub noise: NoiseStream,
    pub schedule: NoiseSchedule,
}

impl VPredictor for OraclePredictor {
    fn predict(&self, z_t: &LatentState, t: usize, _cond: &Conditioning) -> Result<LatentState> {
        z_t.check_same_shape(&self.z0)?;
        let eps = self.noise.eps(t, &self.z0);
        v_target(&self.z0, &eps, t, &self.schedule)
    }
}

/// v̂ = W·flatten(z_t) + b, ignoring the conditioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPredictor {
    channels: usize,
    width: usize,
    height: usize,
    /// Row-major `n × n` matrix, n = channels·width·height.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ToyPredictor {
    pub fn new(channels: usize, width: usize, height: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let n = channels * width * height;
        if n == 0 {
            return Err(Error::ShapeMismatch("toy predictor needs a nonempty latent".into()));
        }
        if w.len() != n * n || b.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "toy predictor for {n} values needs {} weights and {n} biases, got {} and {}",
                n * n,
                w.len(),
                b.len()
            )));
        }
        Ok(Self {
            channels,
            width,
            height,
            w,
            b,
        })
    }

    pub fn zeros(channels: usize, width: usize, height: usize) -> Result<Self> {
        let n = channels * width * height;
        Self::new(channels, width, height, vec![0.0; n * n], vec![0.0; n])
    }

    pub fn n(&self) -> usize {
        self.b.len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Flattened parameters: W row-major, then b.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.w.clone();
        p.extend_from_slice(&self.b);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let n = self.n();
        if params.len() != n * n + n {
            return Err(Error::DimensionMismatch {
                expected: n * n + n,
                found: params.len(),
            });
        }
        self.w.copy_from_slice(&params[..n * n]);
        self.b.copy_from_slice(&params[n * n..]);
        Ok(())
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_params(params)?;
        Ok(p)
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .map(|i| {
                let row = &self.w[i * n..(i + 1) * n];
                row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + self.b[i]
            })
            .collect()
    }
}

impl VPredictor for ToyPredictor {
    fn predict(&self, z_t: &LatentState, _t: usize, _cond: &Conditioning) -> Result<LatentState> {
        if z_t.shape() != self.shape() {
            return Err(Error::ShapeMismatch(format!(
                "toy predictor expects {:?}, got {:?}",
                self.shape(),
                z_t.shape()
            )));
        }
        z_t.with_values(self.apply(z_t.values()))
    }
}

/// z_t = α_t z₀ + σ_t ε.
pub fn forward_diffuse(z0: &LatentState, t: usize, sched: &NoiseSchedule, eps: &LatentState) -> Result<LatentState> {
    let (a, s) = sched.coefficients(t)?;
    let mut z = z0.axpby(a, eps, s)?;
    z.step = t;
    Ok(z)
}

/// ẑ₀ = α_t z_t − σ_t v̂.
pub fn estimate_clean(
    z_t: &LatentState,
    t: usize,
    sched: &NoiseSchedule,
    predictor: &dyn VPredictor,
    cond: &Conditioning,
) -> Result<LatentState> {
    let (a, s) = sched.coefficients(t)?;
    let v = predictor.predict(z_t, t, cond)?;
    if v.shape() != z_t.shape() {
        return Err(Error::ShapeMismatch(format!(
            "predictor returned {:?} for input {:?}",
            v.shape(),
            z_t.shape()
        )));
    }
    let mut z = z_t.axpby(a, &v, -s)?;
    z.step = t;
    Ok(z)
}

/// v = α_t ε − σ_t z₀.
pub fn v_target(z0: &LatentState, eps: &LatentState, t: usize, sched: &NoiseSchedule) -> Result<LatentState> {
    let (a, s) = sched.coefficients(t)?;
    let mut v = eps.axpby(a, z0, -s)?;
    v.step = t;
    Ok(v)
}

/// Clean estimates of `z0` at each step, noising with the shared stream.
pub fn trajectory(
    z0: &LatentState,
    sched: &NoiseSchedule,
    predictor: &dyn VPredictor,
    cond: &Conditioning,
    steps: &[usize],
    noise: &NoiseStream,
) -> Result<Vec<LatentState>> {
    steps
        .iter()
        .map(|&t| {
            let eps = noise.eps(t, z0);
            let z_t = forward_diffuse(z0, t, sched, &eps)?;
            estimate_clean(&z_t, t, sched, predictor, cond)
        })
        .collect()
}

/// Reference-side trajectory: always minimally conditioned, so the base
/// predictor never sees prompt tokens.
pub fn reference_trajectory(
    z_ref: &LatentState,
    sched: &NoiseSchedule,
    base: &dyn VPredictor,
    steps: &[usize],
    noise: &NoiseStream,
) -> Result<Vec<LatentState>> {
    trajectory(z_ref, sched, base, &Conditioning::Minimal, steps, noise)
}

/// Evenly spaced steps in 1..=T (at most `count`), ascending.
pub fn spread_steps(total: usize, count: usize) -> Vec<usize> {
    if total == 0 || count == 0 {
        return Vec::new();
    }
    let count = count.min(total);
    let mut steps: Vec<usize> = (1..=count).map(|i| (i * total).div_ceil(count)).collect();
    steps.dedup();
    steps
}
