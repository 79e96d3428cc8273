//! Preservation, risk and alignment losses, their analytic gradients with
//! respect to a linear v-predictor, gradient verification, and a plain
//! gradient-descent fine-tuning loop.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::SoftMask;
use crate::backends::{ImagePatchEncoder, LinearPatchEncoder};
use crate::detector::{
    check_pi, mask_weights, partial_similarity, pooled_embedding, step_similarity, uniform_pi, GeneratedStep,
    PatchEmbeddings, PatchSource, ReferenceStep, DEFAULT_BETA,
};
use crate::diffusion::{
    forward_diffuse, make_schedule, reference_trajectory, Conditioning, LatentState, NoiseSchedule, NoiseStream,
    ScheduleFamily, ToyPredictor, VPredictor,
};
pub use crate::diffusion::v_target;
use crate::error::{Error, Result};
use crate::numerics::{cosine, dot, lse_weights, norm, EmbeddingVector, ScalarField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFamily {
    /// w(t) = 1.
    Unit,
    /// w(t) = SNR/(1 + SNR) = α_t² under a variance-preserving schedule.
    Snr,
}

impl WeightFamily {
    pub fn weight(self, t: usize, sched: &NoiseSchedule) -> Result<f64> {
        match self {
            WeightFamily::Unit => {
                sched.alpha(t)?;
                Ok(1.0)
            }
            WeightFamily::Snr => snr_weight(t, sched),
        }
    }
}

impl std::str::FromStr for WeightFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(WeightFamily::Unit),
            "snr" => Ok(WeightFamily::Snr),
            _ => Err(Error::Config(format!("unknown weight family '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightSchedule {
    pub preserve: WeightFamily,
    pub risk: WeightFamily,
    pub align: WeightFamily,
}

impl Default for WeightSchedule {
    fn default() -> Self {
        Self {
            preserve: WeightFamily::Unit,
            risk: WeightFamily::Snr,
            align: WeightFamily::Unit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationConfig {
    pub lambda_r: f64,
    pub lambda_a: f64,
    pub beta: f64,
    /// Step weights aligned with the fixture steps; uniform when absent.
    pub pi: Option<Vec<f64>>,
    pub w_schedule: WeightSchedule,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        Self {
            lambda_r: 1.0,
            lambda_a: 0.1,
            beta: DEFAULT_BETA,
            pi: None,
            w_schedule: WeightSchedule::default(),
        }
    }
}

impl MitigationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_r >= 0.0) || !(self.lambda_a >= 0.0) {
            return Err(Error::Config("lambda_r and lambda_a must be nonnegative".into()));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    fn pi_for(&self, n: usize) -> Result<Vec<f64>> {
        let pi = self.pi.clone().unwrap_or_else(|| uniform_pi(n));
        check_pi(&pi, n)?;
        Ok(pi)
    }
}

/// Risk weight SNR/(1 + SNR), evaluated as α²/(α² + σ²) so σ = 0 is safe.
pub fn snr_weight(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    let (a, s) = sched.coefficients(t)?;
    Ok(a * a / (a * a + s * s))
}

/// One preservation example: a clean latent, its noise, and the step.
#[derive(Debug, Clone, PartialEq)]
pub struct PreservationSample {
    pub z0: LatentState,
    pub eps: LatentState,
    pub cond: Conditioning,
    pub t: usize,
}

/// Mean over the batch of w(t)·‖v − v̂‖².
pub fn loss_preserve(
    batch: &[PreservationSample],
    predictor: &dyn VPredictor,
    sched: &NoiseSchedule,
    w: WeightFamily,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("preservation batch is empty"));
    }
    let mut total = 0.0;
    for s in batch {
        let z_t = forward_diffuse(&s.z0, s.t, sched, &s.eps)?;
        let v = v_target(&s.z0, &s.eps, s.t, sched)?;
        let v_hat = predictor.predict(&z_t, s.t, &s.cond)?;
        total += w.weight(s.t, sched)? * v.axpby(1.0, &v_hat, -1.0)?.squared_norm();
    }
    Ok(total / batch.len() as f64)
}

/// Σ_t π(t)·w_r(t)·S_img(t).
pub fn loss_risk(
    gen: &[GeneratedStep],
    reference: &[ReferenceStep],
    sched: &NoiseSchedule,
    w_r: WeightFamily,
    pi: Option<&[f64]>,
    beta: f64,
) -> Result<f64> {
    if gen.len() != reference.len() || gen.iter().zip(reference).any(|(g, r)| g.t != r.t) {
        return Err(Error::Alignment("risk loss needs aligned generated and reference steps".into()));
    }
    let uniform = uniform_pi(gen.len());
    let pi = pi.unwrap_or(&uniform);
    check_pi(pi, gen.len())?;
    let mut total = 0.0;
    for ((g, r), p) in gen.iter().zip(reference).zip(pi) {
        total += p * w_r.weight(g.t, sched)? * step_similarity(g, r, beta)?;
    }
    Ok(total)
}

/// Σ_t π(t)·w_a(t)·(−cos(uniform-pooled patches, prompt embedding)).
pub fn loss_align(
    gen: &[(usize, PatchEmbeddings)],
    prompt: &EmbeddingVector,
    sched: &NoiseSchedule,
    w_a: WeightFamily,
    pi: Option<&[f64]>,
) -> Result<f64> {
    let uniform = uniform_pi(gen.len());
    let pi = pi.unwrap_or(&uniform);
    check_pi(pi, gen.len())?;
    let mut total = 0.0;
    for ((t, patches), p) in gen.iter().zip(pi) {
        let g = pooled_embedding(patches, &vec![1.0; patches.len()])?;
        total += p * w_a.weight(*t, sched)? * -cosine(&g, prompt)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub lambda_r: f64,
    pub lambda_a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTerms {
    pub pi: f64,
    pub w_r: f64,
    pub w_a: f64,
    pub s_img: f64,
    pub align_cos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_preserve: f64,
    pub l_risk: f64,
    pub l_align: f64,
    pub l_total: f64,
    pub weights: TermWeights,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_step: BTreeMap<usize, StepTerms>,
}

/// L_total = L_P + λ_r·L_r + λ_a·L_a.
pub fn loss_total(l_preserve: f64, l_risk: f64, l_align: f64, cfg: &MitigationConfig) -> Result<LossReport> {
    for (name, v) in [("l_preserve", l_preserve), ("l_risk", l_risk), ("l_align", l_align)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is not finite")));
        }
    }
    let l_total = l_preserve + cfg.lambda_r * l_risk + cfg.lambda_a * l_align;
    if !l_total.is_finite() {
        return Err(Error::Numeric("l_total is not finite".into()));
    }
    Ok(LossReport {
        l_preserve,
        l_risk,
        l_align,
        l_total,
        weights: TermWeights {
            lambda_r: cfg.lambda_r,
            lambda_a: cfg.lambda_a,
        },
        per_step: BTreeMap::new(),
    })
}

/// A scalar objective with an analytic gradient.
pub trait Differentiable {
    fn value(&self, params: &[f64]) -> Result<f64>;
    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>>;
}

/// Denominator floor for relative errors, so coordinates whose true
/// gradient is zero are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Largest relative disagreement between the analytic gradient and central
/// differences `(f(p+h) − f(p−h)) / 2h`, over all coordinates.
pub fn finite_diff_check(objective: &dyn Differentiable, params: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::contract(format!("step size must be positive, got {h}")));
    }
    let analytic = objective.gradient(params)?;
    if analytic.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            found: analytic.len(),
        });
    }
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let plus = objective.value(&p)?;
        p[i] = orig - h;
        let minus = objective.value(&p)?;
        p[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at coordinate {i}")));
        }
        let denom = analytic[i].abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Shape of a synthetic mitigation fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    pub seed: u64,
    pub total_steps: usize,
    pub steps: Vec<usize>,
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub preservation: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            total_steps: 10,
            steps: vec![3, 6, 9],
            width: 8,
            height: 8,
            patch: 2,
            embed_dim: 16,
            preservation: 96,
        }
    }
}

/// Everything the mitigation objective needs, with the frozen reference
/// side precomputed.
#[derive(Debug, Clone)]
pub struct MitigationFixture {
    pub spec: FixtureSpec,
    pub schedule: NoiseSchedule,
    pub noise: NoiseStream,
    pub encoder: LinearPatchEncoder,
    pub z_gen: LatentState,
    pub z_ref: LatentState,
    pub masks: Vec<SoftMask>,
    pub prompt_embedding: EmbeddingVector,
    pub preservation: Vec<PreservationSample>,
    /// Frozen base predictor: least-squares fit to the preservation batch.
    pub base: ToyPredictor,
    pub reference_patches: Vec<PatchEmbeddings>,
}

/// Noise-stream offset for preservation samples, away from timestep streams.
const PRESERVATION_STREAM: u64 = 1 << 32;

impl MitigationFixture {
    /// Builds the fixture around the given latents and masks (one mask per
    /// step): draws the preservation batch, fits the base predictor and
    /// computes the reference trajectory embeddings.
    pub fn build(
        spec: FixtureSpec,
        z_gen: LatentState,
        z_ref: LatentState,
        masks: Vec<SoftMask>,
        prompt_embedding: Option<EmbeddingVector>,
    ) -> Result<Self> {
        let schedule = make_schedule(spec.total_steps, ScheduleFamily::Cosine)?;
        if spec.steps.is_empty() {
            return Err(Error::contract("fixture needs at least one step"));
        }
        for &t in &spec.steps {
            schedule.alpha(t)?;
        }
        if masks.len() != spec.steps.len() {
            return Err(Error::Alignment(format!(
                "{} masks for {} steps",
                masks.len(),
                spec.steps.len()
            )));
        }
        z_gen.check_same_shape(&z_ref)?;
        if z_gen.shape() != (1, spec.height, spec.width) {
            return Err(Error::ShapeMismatch(format!(
                "fixture latents must be 1x{}x{}, got {:?}",
                spec.height,
                spec.width,
                z_gen.shape()
            )));
        }
        let noise = NoiseStream::new(spec.seed);
        let encoder = LinearPatchEncoder::seeded(spec.seed, 1, spec.width, spec.height, spec.patch, spec.embed_dim)?;

        let preservation = preservation_batch(&noise, &z_gen, spec.preservation, spec.total_steps);
        let base = fit_least_squares(&preservation, &schedule)?;

        let ref_traj = reference_trajectory(&z_ref, &schedule, &base, &spec.steps, &noise)?;
        let reference_patches = ref_traj
            .iter()
            .map(|z| {
                let mut p = encoder.embed_patches(z)?;
                p.source = PatchSource::Reference;
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;

        let prompt_embedding = match prompt_embedding {
            Some(e) if e.dim() != spec.embed_dim => {
                return Err(Error::DimensionMismatch {
                    expected: spec.embed_dim,
                    found: e.dim(),
                })
            }
            Some(e) => e,
            None => {
                let p = encoder.embed_patches(&z_gen)?;
                pooled_embedding(&p, &vec![1.0; p.len()])?
            }
        };

        Ok(Self {
            spec,
            schedule,
            noise,
            encoder,
            z_gen,
            z_ref,
            masks,
            prompt_embedding,
            preservation,
            base,
            reference_patches,
        })
    }

    /// Synthetic partial-infringement scenario: the generated latent copies
    /// the reference in its top-left quadrant and the masks highlight that
    /// quadrant.
    pub fn infringing_reference(spec: FixtureSpec) -> Result<Self> {
        let (z_gen, z_ref) = synthetic_latents(&spec)?;
        let masks = quadrant_masks(&spec)?;
        Self::build(spec, z_gen, z_ref, masks, None)
    }

    /// Small variant for exhaustive gradient checks.
    pub fn gradient_check(seed: u64) -> Result<Self> {
        Self::infringing_reference(FixtureSpec {
            seed,
            preservation: 6,
            ..FixtureSpec::default()
        })
    }

    pub fn steps(&self) -> &[usize] {
        &self.spec.steps
    }

    /// The predictor fine-tuning starts from (a copy of the frozen base).
    pub fn initial_predictor(&self) -> ToyPredictor {
        self.base.clone()
    }

    /// Generated-side clean estimates at every fixture step.
    pub fn generated_trajectory(&self, predictor: &dyn VPredictor) -> Result<Vec<LatentState>> {
        crate::diffusion::trajectory(
            &self.z_gen,
            &self.schedule,
            predictor,
            &Conditioning::Minimal,
            &self.spec.steps,
            &self.noise,
        )
    }
}

/// Generated and reference latents for the synthetic scenario.
pub fn synthetic_latents(spec: &FixtureSpec) -> Result<(LatentState, LatentState)> {
    let like = LatentState::zeros(1, spec.width, spec.height)?;
    let noise = NoiseStream::new(spec.seed);
    let z_ref = noise.sample(u64::MAX, &like);
    let other = noise.sample(u64::MAX - 1, &like);
    let values = (0..like.len())
        .map(|i| {
            let (x, y) = (i % spec.width, i / spec.width);
            if x < spec.width / 2 && y < spec.height / 2 {
                z_ref.values()[i]
            } else {
                other.values()[i]
            }
        })
        .collect();
    Ok((like.with_values(values)?, z_ref))
}

/// Per-step masks on the patch grid highlighting the top-left quadrant.
pub fn quadrant_masks(spec: &FixtureSpec) -> Result<Vec<SoftMask>> {
    let (gw, gh) = (spec.width / spec.patch, spec.height / spec.patch);
    let values: Vec<f64> = (0..gw * gh)
        .map(|i| {
            let (x, y) = (i % gw, i / gw);
            match (x < gw / 2, y < gh / 2) {
                (true, true) => 1.0,
                (true, false) | (false, true) => 0.2,
                _ => 0.0,
            }
        })
        .collect();
    spec.steps
        .iter()
        .map(|&t| SoftMask::new(ScalarField::new(gw, gh, values.clone())?, t))
        .collect()
}

/// Seeded standard-normal (z₀, ε) pairs shaped like `like`, cycling through
/// steps 1..=T, on noise streams disjoint from the per-timestep ones.
pub fn preservation_batch(
    noise: &NoiseStream,
    like: &LatentState,
    count: usize,
    total_steps: usize,
) -> Vec<PreservationSample> {
    (0..count)
        .map(|k| PreservationSample {
            z0: noise.sample(PRESERVATION_STREAM + 2 * k as u64, like),
            eps: noise.sample(PRESERVATION_STREAM + 2 * k as u64 + 1, like),
            cond: Conditioning::Minimal,
            t: 1 + k % total_steps.max(1),
        })
        .collect()
}

/// Ordinary least-squares fit of `v ≈ W·z_t + b` over the batch (minimum-norm
/// solution when underdetermined).
pub fn fit_least_squares(batch: &[PreservationSample], sched: &NoiseSchedule) -> Result<ToyPredictor> {
    let first = batch.first().ok_or_else(|| Error::contract("cannot fit on an empty batch"))?;
    let (channels, height, width) = first.z0.shape();
    let n = first.z0.len();
    let rows = batch.len();
    let mut x = DMatrix::<f64>::zeros(rows, n + 1);
    let mut y = DMatrix::<f64>::zeros(rows, n);
    for (r, s) in batch.iter().enumerate() {
        let z_t = forward_diffuse(&s.z0, s.t, sched, &s.eps)?;
        let v = v_target(&s.z0, &s.eps, s.t, sched)?;
        for j in 0..n {
            x[(r, j)] = z_t.values()[j];
            y[(r, j)] = v.values()[j];
        }
        x[(r, n)] = 1.0;
    }
    let theta = x
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::Numeric(format!("least-squares fit failed: {e}")))?;
    let mut w = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = theta[(j, i)];
        }
        b[i] = theta[(n, i)];
    }
    ToyPredictor::new(channels, width, height, w, b)
}

/// L_total over a fixture as a function of the toy predictor's parameters.
pub struct MitigationObjective<'a> {
    pub fixture: &'a MitigationFixture,
    pub cfg: &'a MitigationConfig,
    template: ToyPredictor,
    pi: Vec<f64>,
}

struct Cached {
    z_t: LatentState,
    v: LatentState,
    w: f64,
}

impl<'a> MitigationObjective<'a> {
    pub fn new(fixture: &'a MitigationFixture, cfg: &'a MitigationConfig) -> Result<Self> {
        cfg.validate()?;
        let pi = cfg.pi_for(fixture.spec.steps.len())?;
        Ok(Self {
            fixture,
            cfg,
            template: fixture.base.clone(),
            pi,
        })
    }

    fn preservation_cache(&self) -> Result<Vec<Cached>> {
        let f = self.fixture;
        f.preservation
            .iter()
            .map(|s| {
                Ok(Cached {
                    z_t: forward_diffuse(&s.z0, s.t, &f.schedule, &s.eps)?,
                    v: v_target(&s.z0, &s.eps, s.t, &f.schedule)?,
                    w: self.cfg.w_schedule.preserve.weight(s.t, &f.schedule)?,
                })
            })
            .collect()
    }

    /// Loss report, plus the gradient with respect to `[W row-major, b]`
    /// when `with_grad` is set.
    pub fn evaluate(&self, params: &[f64], with_grad: bool) -> Result<(LossReport, Option<Vec<f64>>)> {
        let f = self.fixture;
        let cfg = self.cfg;
        let predictor = self.template.with_params(params)?;
        let n = predictor.n();
        let mut grad = with_grad.then(|| vec![0.0; n * n + n]);

        let accumulate = |grad: &mut Vec<f64>, dv: &[f64], z: &[f64]| {
            for i in 0..n {
                if dv[i] == 0.0 {
                    continue;
                }
                let row = &mut grad[i * n..(i + 1) * n];
                for (g, zj) in row.iter_mut().zip(z) {
                    *g += dv[i] * zj;
                }
                grad[n * n + i] += dv[i];
            }
        };

        // Preservation term.
        let cache = self.preservation_cache()?;
        let count = cache.len() as f64;
        let mut l_preserve = 0.0;
        for c in &cache {
            let v_hat = predictor.apply(c.z_t.values());
            let r: Vec<f64> = v_hat.iter().zip(c.v.values()).map(|(a, b)| a - b).collect();
            l_preserve += c.w * dot(&r, &r) / count;
            if let Some(g) = grad.as_mut() {
                let dv: Vec<f64> = r.iter().map(|x| 2.0 * c.w * x / count).collect();
                accumulate(g, &dv, c.z_t.values());
            }
        }

        // Generated trajectory terms.
        let mut l_risk = 0.0;
        let mut l_align = 0.0;
        let mut per_step = BTreeMap::new();
        for (i, &t) in f.spec.steps.iter().enumerate() {
            let (alpha, sigma) = f.schedule.coefficients(t)?;
            let eps = f.noise.eps(t, &f.z_gen);
            let z_t = forward_diffuse(&f.z_gen, t, &f.schedule, &eps)?;
            let v_hat = predictor.apply(z_t.values());
            let z0_hat = z_t.with_values(
                z_t.values()
                    .iter()
                    .zip(&v_hat)
                    .map(|(z, v)| alpha * z - sigma * v)
                    .collect(),
            )?;
            let acts = f.encoder.activations(&z0_hat)?;
            let units: Vec<EmbeddingVector> = acts
                .iter()
                .map(|y| EmbeddingVector::unit(y.clone()))
                .collect::<Result<_>>()?;
            let (gw, gh) = f.encoder.grid();
            let gen_patches = PatchEmbeddings::new(gw, gh, units, PatchSource::Generated)?;
            let reference = &f.reference_patches[i];
            let pi = self.pi[i];
            let w_r = cfg.w_schedule.risk.weight(t, &f.schedule)?;
            let w_a = cfg.w_schedule.align.weight(t, &f.schedule)?;

            let mut mask_w = mask_weights(&f.masks[i], gw, gh)?;
            let pooled = match weighted_sum(&gen_patches, &mask_w) {
                Some(s) => s,
                None => {
                    mask_w = vec![1.0; gen_patches.len()];
                    weighted_sum(&gen_patches, &mask_w).ok_or(Error::DegeneratePool)?
                }
            };
            let g = EmbeddingVector::unit(pooled.clone())?;
            let s_img = partial_similarity(&g, reference, cfg.beta)?;

            let uniform_w = vec![1.0; gen_patches.len()];
            let pooled_u = weighted_sum(&gen_patches, &uniform_w).ok_or(Error::DegeneratePool)?;
            let g_u = EmbeddingVector::unit(pooled_u.clone())?;
            let align_cos = cosine(&g_u, &f.prompt_embedding)?;

            l_risk += pi * w_r * s_img;
            l_align += pi * w_a * -align_cos;
            per_step.insert(
                t,
                StepTerms {
                    pi,
                    w_r,
                    w_a,
                    s_img,
                    align_cos,
                },
            );

            if let Some(gr) = grad.as_mut() {
                let dim = gen_patches.dim();
                let mut du = vec![vec![0.0; dim]; gen_patches.len()];

                // Risk: S = LSE_j cos(g, u_j), g = normalize(Σ m_p u_p).
                let sims: Vec<f64> = reference
                    .patches
                    .iter()
                    .map(|u| cosine(&g, u))
                    .collect::<Result<_>>()?;
                let soft = lse_weights(&sims, cfg.beta);
                let mut dg = vec![0.0; dim];
                for ((u, c), sw) in reference.patches.iter().zip(&sims).zip(&soft) {
                    let d = cosine_grad(g.as_slice(), u.as_slice(), *c);
                    for (a, x) in dg.iter_mut().zip(d) {
                        *a += cfg.lambda_r * pi * w_r * sw * x;
                    }
                }
                let ds = normalize_grad(&pooled, &dg);
                for (dup, m) in du.iter_mut().zip(&mask_w) {
                    for (a, x) in dup.iter_mut().zip(&ds) {
                        *a += m * x;
                    }
                }

                // Alignment: −cos(normalize(Σ u_p), e).
                let d = cosine_grad(g_u.as_slice(), f.prompt_embedding.as_slice(), align_cos);
                let dg_u: Vec<f64> = d.iter().map(|x| -cfg.lambda_a * pi * w_a * x).collect();
                let ds_u = normalize_grad(&pooled_u, &dg_u);
                for dup in du.iter_mut() {
                    for (a, x) in dup.iter_mut().zip(&ds_u) {
                        *a += x;
                    }
                }

                let dz0 = f.encoder.backprop(&acts, &du);
                let dv: Vec<f64> = dz0.iter().map(|x| -sigma * x).collect();
                accumulate(gr, &dv, z_t.values());
            }
        }

        let mut report = loss_total(l_preserve, l_risk, l_align, cfg)?;
        report.per_step = per_step;
        Ok((report, grad))
    }

    pub fn report(&self, predictor: &ToyPredictor) -> Result<LossReport> {
        Ok(self.evaluate(&predictor.params(), false)?.0)
    }
}

impl Differentiable for MitigationObjective<'_> {
    fn value(&self, params: &[f64]) -> Result<f64> {
        Ok(self.evaluate(params, false)?.0.l_total)
    }

    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(params, true)?.1.expect("gradient requested"))
    }
}

fn weighted_sum(patches: &PatchEmbeddings, weights: &[f64]) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; patches.dim()];
    for (p, w) in patches.patches.iter().zip(weights) {
        for (a, x) in acc.iter_mut().zip(p.as_slice()) {
            *a += w * x;
        }
    }
    acc.iter().any(|v| *v != 0.0).then_some(acc)
}

/// ∂cos(a, b)/∂a.
fn cosine_grad(a: &[f64], b: &[f64], cos: f64) -> Vec<f64> {
    let (na, nb) = (norm(a), norm(b));
    a.iter()
        .zip(b)
        .map(|(ai, bi)| bi / (na * nb) - cos * ai / (na * na))
        .collect()
}

/// Pulls a gradient with respect to `y/‖y‖` back to `y`.
fn normalize_grad(y: &[f64], du: &[f64]) -> Vec<f64> {
    let n = norm(y);
    let proj: f64 = y.iter().zip(du).map(|(a, b)| a * b).sum::<f64>() / n;
    y.iter().zip(du).map(|(yi, d)| (d - yi / n * proj) / n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneStatus {
    Completed,
    Diverged { iter: usize },
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    /// One report per iterate, starting with the initial parameters.
    pub reports: Vec<LossReport>,
    pub predictor: ToyPredictor,
    pub status: FinetuneStatus,
}

/// Plain gradient descent on L_total. Stops early (keeping the trajectory)
/// if the loss or gradient becomes non-finite.
pub fn toy_finetune(
    predictor: &ToyPredictor,
    fixture: &MitigationFixture,
    cfg: &MitigationConfig,
    steps: usize,
    lr: f64,
) -> Result<FinetuneRun> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be nonnegative, got {lr}")));
    }
    let objective = MitigationObjective::new(fixture, cfg)?;
    let mut params = predictor.params();
    let mut reports = Vec::with_capacity(steps + 1);
    let mut status = FinetuneStatus::Completed;
    for iter in 0..=steps {
        let want_grad = iter < steps;
        let (report, grad) = match objective.evaluate(&params, want_grad) {
            Ok(r) => r,
            Err(Error::Numeric(m)) => {
                log::warn!("fine-tuning diverged at iteration {iter}: {m}");
                status = FinetuneStatus::Diverged { iter };
                break;
            }
            Err(e) => return Err(e),
        };
        reports.push(report);
        if let Some(g) = grad {
            if g.iter().any(|x| !x.is_finite()) {
                status = FinetuneStatus::Diverged { iter };
                break;
            }
            for (p, d) in params.iter_mut().zip(&g) {
                *p -= lr * d;
            }
        }
    }
    Ok(FinetuneRun {
        reports,
        predictor: predictor.with_params(&params)?,
        status,
    })
}
