//! The `amcr` command line.
//!
//! Exit codes: 0 success (or clean detection), 1 infringement detected,
//! 2 usage or configuration error, 3 provider or runtime error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attention::{build_soft_mask, export_mask, SoftMask};
use crate::backends::{
    canonical_json, canonical_json_line, ingest_fixture_bundle, read_attention, read_latents, read_masks,
    read_trajectory, write_latents, write_trajectory, DeterministicTestEncoder, HttpCandidateProvider,
    HttpSlotProvider, ImagePatchEncoder, JsonEndpoint, LinearPatchEncoder, RemoteTextEncoder, TextEncoder,
    TrajectoryStep,
};
use crate::calibration::{calibrate, load_pairs, OperatingPoint};
use crate::config::{Config, EncoderKind};
use crate::detector::{detect, AggregationRule, GeneratedStep, PatchSource, ReferenceStep};
use crate::diffusion::{
    forward_diffuse, make_schedule, spread_steps, Conditioning, LatentState, NoiseSchedule, NoiseStream,
    OraclePredictor, ScheduleFamily, VPredictor, ZeroPredictor,
};
use crate::error::{Error, Result};
use crate::mitigator::{fit_least_squares, preservation_batch, toy_finetune, FinetuneStatus, WeightFamily};
use crate::prompt::{parse_prompt, parse_with_provider, StructuredPrompt};
use crate::risk::{load_corpus, rank_slots};
use crate::sanitizer::{sanitize, Providers, SynonymTable};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFRINGED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "amcr", version, about = "Copyright-risk assessment and mitigation for text-to-image pipelines")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "AMCR_CONFIG")]
    pub config: Option<PathBuf>,

    /// Seed for every noise draw and the test encoder.
    #[arg(long, global = true, env = "AMCR_SEED")]
    pub seed: Option<u64>,

    /// Write the report here instead of standard output.
    #[arg(long, global = true, env = "AMCR_REPORT")]
    pub report: Option<PathBuf>,

    /// Raise log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rewrite a prompt slot by slot and emit the negative-prompt set.
    Sanitize(SanitizeArgs),
    /// Score every slot of a prompt against a risk corpus.
    Score(ScoreArgs),
    /// Aggregate an attention stack into a soft mask image.
    Mask(MaskArgs),
    /// Dump aligned noisy/clean trajectory pairs for latents.
    Trajectory(TrajectoryArgs),
    /// Decide partial infringement between generated and reference trajectories.
    Detect(DetectArgs),
    /// Run the toy mitigation fine-tuning loop.
    Mitigate(MitigateArgs),
    /// Choose a detection threshold from labeled pairs.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
pub struct EncoderArgs {
    /// Embedding dimension of the text encoder.
    #[arg(long, env = "AMCR_ENCODER_DIM")]
    pub encoder_dim: Option<usize>,
    /// Use a remote text encoder at this URL.
    #[arg(long, env = "AMCR_ENCODER_URL")]
    pub encoder_url: Option<String>,
    /// Per-request timeout of the remote encoder.
    #[arg(long, env = "AMCR_ENCODER_TIMEOUT_MS")]
    pub encoder_timeout_ms: Option<u64>,
    /// Retries after a failed remote encoder call.
    #[arg(long, env = "AMCR_ENCODER_RETRIES")]
    pub encoder_retries: Option<u32>,
    /// Bearer token for the remote encoder.
    #[arg(long, env = "AMCR_ENCODER_BEARER", hide_env_values = true)]
    pub encoder_bearer: Option<String>,
    /// External slot parser URL.
    #[arg(long, env = "AMCR_SLOTS_URL")]
    pub slots_url: Option<String>,
}

#[derive(Debug, Args)]
pub struct SanitizeArgs {
    /// Prompt text.
    #[arg(long)]
    pub prompt: String,
    /// Risk corpus (line-delimited JSON).
    #[arg(long, env = "AMCR_CORPUS")]
    pub corpus: PathBuf,
    /// Weight of risk reduction against semantic alignment, in [0, 1].
    #[arg(long, env = "AMCR_SANITIZER_LAMBDA")]
    pub lambda: Option<f64>,
    /// Maximum accepted replacements.
    #[arg(long, env = "AMCR_SANITIZER_BUDGET")]
    pub budget: Option<usize>,
    /// Stop when the mean risk reduction over the window falls below this.
    #[arg(long, env = "AMCR_SANITIZER_GAMMA")]
    pub gamma: Option<f64>,
    /// Window length for the marginal-improvement stop.
    #[arg(long, env = "AMCR_SANITIZER_WINDOW_M")]
    pub window: Option<usize>,
    /// Stop once every open slot is below this quantile of the initial slot risks.
    #[arg(long, env = "AMCR_SANITIZER_RISK_QUANTILE")]
    pub quantile: Option<f64>,
    /// Replacement candidates considered per phrase.
    #[arg(long, env = "AMCR_SANITIZER_CANDIDATES_PER_ELEMENT")]
    pub candidates: Option<usize>,
    /// Replacement table used when no candidate service is configured or it fails.
    #[arg(long, env = "AMCR_SYNONYMS")]
    pub synonyms: Option<PathBuf>,
    /// External candidate generator URL.
    #[arg(long, env = "AMCR_CANDIDATES_URL")]
    pub candidates_url: Option<String>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Prompt text.
    #[arg(long)]
    pub prompt: String,
    /// Risk corpus (line-delimited JSON).
    #[arg(long, env = "AMCR_CORPUS")]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub encoder: EncoderArgs,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Attention container.
    #[arg(long)]
    pub attn: PathBuf,
    /// Token indices to reduce over (all when omitted).
    #[arg(long, value_delimiter = ',', env = "AMCR_MASK_TOKENS")]
    pub tokens: Option<Vec<usize>>,
    /// Per-layer aggregation weights (uniform when omitted).
    #[arg(long, value_delimiter = ',', env = "AMCR_MASK_LAYER_WEIGHTS")]
    pub layer_weights: Option<Vec<f64>>,
    /// Output PNG path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PredictorChoice {
    /// Least-squares linear fit on a seeded batch.
    Fit,
    /// Knows the clean latent; reconstructs it exactly.
    Oracle,
    Zero,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    /// Reference latents container.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Generated latents container, paired step by step with the reference.
    #[arg(long)]
    pub gen: Option<PathBuf>,
    /// Steps to evaluate.
    #[arg(long, value_delimiter = ',', env = "AMCR_DIFFUSION_STEPS")]
    pub steps: Option<Vec<usize>>,
    /// Schedule length T.
    #[arg(long, env = "AMCR_DIFFUSION_TOTAL_STEPS")]
    pub total_steps: Option<usize>,
    /// cosine or linear.
    #[arg(long, env = "AMCR_DIFFUSION_SCHEDULE")]
    pub schedule: Option<ScheduleFamily>,
    /// Noise predictor: fit (least squares on simulated pairs), oracle or zero.
    #[arg(long, value_enum, default_value = "fit")]
    pub predictor: PredictorChoice,
    /// Patch size of the patch encoder.
    #[arg(long, env = "AMCR_DIFFUSION_PATCH")]
    pub patch: Option<usize>,
    /// Patch embedding dimension.
    #[arg(long, env = "AMCR_DIFFUSION_EMBED_DIM")]
    pub embed_dim: Option<usize>,
    /// Directory for the latent and patch containers.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectorArgs {
    /// Log-sum-exp sharpness.
    #[arg(long, env = "AMCR_DETECTOR_BETA")]
    pub beta: Option<f64>,
    /// Infringed when the overall score exceeds this.
    #[arg(long, env = "AMCR_DETECTOR_TAU")]
    pub tau: Option<f64>,
    /// weighted_mean or max_over_steps.
    #[arg(long, env = "AMCR_DETECTOR_RULE")]
    pub rule: Option<AggregationRule>,
    /// Step weights, one per evaluated step.
    #[arg(long, value_delimiter = ',', env = "AMCR_DETECTOR_PI")]
    pub pi: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Generated patch trajectory container.
    #[arg(long, requires_all = ["reference", "masks"], conflicts_with = "fixtures")]
    pub gen: Option<PathBuf>,
    /// Reference patch trajectory container.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Mask container.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Fixture bundle directory instead of the three files.
    #[arg(long, required_unless_present = "gen")]
    pub fixtures: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorArgs,
}

#[derive(Debug, Args)]
pub struct MitigateArgs {
    /// Fixture bundle directory with a mitigation section.
    #[arg(long)]
    pub fixtures: PathBuf,
    /// Gradient-descent iterations.
    #[arg(long, env = "AMCR_FINETUNE_STEPS")]
    pub steps: Option<usize>,
    /// Learning rate.
    #[arg(long, env = "AMCR_FINETUNE_LR")]
    pub lr: Option<f64>,
    /// Weight of the risk term.
    #[arg(long, env = "AMCR_MITIGATION_LAMBDA_R")]
    pub lambda_r: Option<f64>,
    /// Weight of the prompt-alignment term.
    #[arg(long, env = "AMCR_MITIGATION_LAMBDA_A")]
    pub lambda_a: Option<f64>,
    /// Log-sum-exp sharpness of the risk term.
    #[arg(long, env = "AMCR_MITIGATION_BETA")]
    pub beta: Option<f64>,
    /// Step weights, one per fixture step.
    #[arg(long, value_delimiter = ',', env = "AMCR_MITIGATION_PI")]
    pub pi: Option<Vec<f64>>,
    /// Step weighting of the preservation term: unit or snr.
    #[arg(long, env = "AMCR_MITIGATION_W_PRESERVE")]
    pub w_preserve: Option<WeightFamily>,
    /// Step weighting of the risk term.
    #[arg(long, env = "AMCR_MITIGATION_W_RISK")]
    pub w_risk: Option<WeightFamily>,
    /// Step weighting of the alignment term.
    #[arg(long, env = "AMCR_MITIGATION_W_ALIGN")]
    pub w_align: Option<WeightFamily>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Line-delimited `{"score": .., "infringing": ..}` records.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Only accept thresholds reaching this precision.
    #[arg(long, env = "AMCR_CALIBRATE_MIN_PRECISION")]
    pub min_precision: Option<f64>,
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_env("AMCR_LOG").try_init();

    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Effective configuration after the file, environment and flag layers.
pub fn resolve_config(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
        if let Some(v) = v {
            *slot = v.clone();
        }
    }
    let encoder_args = match &cli.command {
        Command::Sanitize(a) => Some(&a.encoder),
        Command::Score(a) => Some(&a.encoder),
        _ => None,
    };
    if let Some(a) = encoder_args {
        set(&mut cfg.encoder.dim, &a.encoder_dim);
        if let Some(url) = &a.encoder_url {
            cfg.encoder.kind = EncoderKind::Remote;
            cfg.encoder.endpoint.get_or_insert_with(JsonEndpoint::default).url = url.clone();
        }
        if let Some(ep) = cfg.encoder.endpoint.as_mut() {
            set(&mut ep.timeout_ms, &a.encoder_timeout_ms);
            set(&mut ep.retries, &a.encoder_retries);
            if a.encoder_bearer.is_some() {
                ep.bearer = a.encoder_bearer.clone();
            }
        }
        if let Some(url) = &a.slots_url {
            cfg.providers.slots.get_or_insert_with(JsonEndpoint::default).url = url.clone();
        }
    }
    match &cli.command {
        Command::Sanitize(a) => {
            let s = &mut cfg.sanitizer;
            set(&mut s.lambda, &a.lambda);
            set(&mut s.budget, &a.budget);
            set(&mut s.gamma, &a.gamma);
            set(&mut s.window_m, &a.window);
            set(&mut s.risk_quantile, &a.quantile);
            set(&mut s.candidates_per_element, &a.candidates);
            if let Some(url) = &a.candidates_url {
                cfg.providers.candidates.get_or_insert_with(JsonEndpoint::default).url = url.clone();
            }
        }
        Command::Mask(a) => {
            if a.tokens.is_some() {
                cfg.mask.tokens = a.tokens.clone();
            }
            if a.layer_weights.is_some() {
                cfg.mask.layer_weights = a.layer_weights.clone();
            }
        }
        Command::Trajectory(a) => {
            let d = &mut cfg.diffusion;
            if a.steps.is_some() {
                d.steps = a.steps.clone();
            }
            set(&mut d.total_steps, &a.total_steps);
            set(&mut d.schedule, &a.schedule);
            set(&mut d.patch, &a.patch);
            set(&mut d.embed_dim, &a.embed_dim);
        }
        Command::Detect(a) => {
            let d = &mut cfg.detector;
            set(&mut d.beta, &a.detector.beta);
            set(&mut d.tau, &a.detector.tau);
            set(&mut d.rule, &a.detector.rule);
            if a.detector.pi.is_some() {
                d.pi = a.detector.pi.clone();
            }
        }
        Command::Mitigate(a) => {
            set(&mut cfg.finetune.steps, &a.steps);
            set(&mut cfg.finetune.lr, &a.lr);
            let m = &mut cfg.mitigation;
            set(&mut m.lambda_r, &a.lambda_r);
            set(&mut m.lambda_a, &a.lambda_a);
            set(&mut m.beta, &a.beta);
            if a.pi.is_some() {
                m.pi = a.pi.clone();
            }
            set(&mut m.w_schedule.preserve, &a.w_preserve);
            set(&mut m.w_schedule.risk, &a.w_risk);
            set(&mut m.w_schedule.align, &a.w_align);
        }
        Command::Score(_) | Command::Calibrate(_) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<i32> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Sanitize(a) => cmd_sanitize(cli, &cfg, a),
        Command::Score(a) => cmd_score(cli, &cfg, a),
        Command::Mask(a) => cmd_mask(cli, &cfg, a),
        Command::Trajectory(a) => cmd_trajectory(cli, &cfg, a),
        Command::Detect(_) => cmd_detect(cli, &cfg),
        Command::Mitigate(a) => cmd_mitigate(cli, &cfg, a),
        Command::Calibrate(a) => cmd_calibrate(cli, a),
    }
}

fn emit<T: Serialize>(cli: &Cli, report: &T) -> Result<()> {
    write_output(cli, &canonical_json(report)?)
}

fn write_output(cli: &Cli, text: &str) -> Result<()> {
    match &cli.report {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, text)?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

/// Text encoder named by the configuration.
pub fn build_encoder(cfg: &Config) -> Result<Box<dyn TextEncoder>> {
    Ok(match cfg.encoder.kind {
        EncoderKind::Test => {
            let vocab = crate::backends::PlantedVocabulary::builtin().clone();
            Box::new(DeterministicTestEncoder::with_vocabulary(cfg.seed, cfg.encoder.dim, vocab)?)
        }
        EncoderKind::Remote => {
            let ep = cfg
                .encoder
                .endpoint
                .clone()
                .ok_or_else(|| Error::Config("remote encoder needs an endpoint".into()))?;
            Box::new(RemoteTextEncoder::new(ep, cfg.encoder.dim))
        }
    })
}

fn structure(cfg: &Config, prompt: &str) -> Result<StructuredPrompt> {
    match &cfg.providers.slots {
        Some(ep) => parse_with_provider(prompt, &HttpSlotProvider { endpoint: ep.clone() }),
        None => parse_prompt(prompt),
    }
}

fn cmd_sanitize(cli: &Cli, cfg: &Config, a: &SanitizeArgs) -> Result<i32> {
    let encoder = build_encoder(cfg)?;
    let corpus = load_corpus(&a.corpus, encoder.as_ref())?;
    let sp = structure(cfg, &a.prompt)?;
    let table = match &a.synonyms {
        Some(p) => SynonymTable::from_path(p)?,
        None => SynonymTable::builtin().clone(),
    };
    let remote = cfg
        .providers
        .candidates
        .as_ref()
        .map(|ep| HttpCandidateProvider { endpoint: ep.clone() });
    let providers = Providers {
        candidates: remote.as_ref().map(|r| r as &dyn crate::sanitizer::CandidateProvider),
        fallback: &table,
    };
    let result = sanitize(&sp, &corpus, encoder.as_ref(), &providers, &cfg.sanitizer)?;
    emit(cli, &result)?;
    Ok(EXIT_OK)
}

fn cmd_score(cli: &Cli, cfg: &Config, a: &ScoreArgs) -> Result<i32> {
    let encoder = build_encoder(cfg)?;
    let corpus = load_corpus(&a.corpus, encoder.as_ref())?;
    let sp = structure(cfg, &a.prompt)?;
    let report = rank_slots(&sp, &corpus, encoder.as_ref())?;
    emit(cli, &report)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct MaskReport<'a> {
    image: String,
    mask: &'a SoftMask,
    all_zero: bool,
}

fn cmd_mask(cli: &Cli, cfg: &Config, a: &MaskArgs) -> Result<i32> {
    let stack = read_attention(&a.attn)?;
    let mask = build_soft_mask(&stack, cfg.mask.layer_weights.as_deref(), cfg.mask.tokens.as_deref())?;
    export_mask(&mask, &a.out)?;
    emit(
        cli,
        &MaskReport {
            image: a.out.display().to_string(),
            mask: &mask,
            all_zero: mask.is_all_zero(),
        },
    )?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct StepPair {
    t: usize,
    alpha: f64,
    sigma: f64,
    /// max |ẑ₀ − z₀| for the reference latent.
    reference_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_error: Option<f64>,
}

#[derive(Serialize)]
struct TrajectoryReport {
    schedule: ScheduleFamily,
    total_steps: usize,
    steps: Vec<usize>,
    predictor: String,
    seed: u64,
    pairs: Vec<StepPair>,
    /// Written containers, relative to the output directory.
    files: Vec<String>,
}

/// Noisy latents and clean estimates of `z0` at each step.
fn dump_side(
    z0: &LatentState,
    sched: &NoiseSchedule,
    predictor: &dyn VPredictor,
    steps: &[usize],
    noise: &NoiseStream,
) -> Result<(Vec<LatentState>, Vec<LatentState>)> {
    let mut noisy = Vec::new();
    let mut clean = Vec::new();
    for &t in steps {
        let z_t = forward_diffuse(z0, t, sched, &noise.eps(t, z0))?;
        let z0_hat = crate::diffusion::estimate_clean(&z_t, t, sched, predictor, &Conditioning::Minimal)?;
        noisy.push(z_t);
        clean.push(z0_hat);
    }
    Ok((noisy, clean))
}

fn cmd_trajectory(cli: &Cli, cfg: &Config, a: &TrajectoryArgs) -> Result<i32> {
    let d = &cfg.diffusion;
    let sched = make_schedule(d.total_steps, d.schedule)?;
    let steps = d.steps.clone().unwrap_or_else(|| spread_steps(d.total_steps, d.step_count));
    for &t in &steps {
        sched.alpha(t).map_err(|_| Error::Config(format!("step {t} is outside 0..={}", d.total_steps)))?;
    }
    let noise = NoiseStream::new(cfg.seed);
    let z_ref = first_latent(&a.reference)?;
    let z_gen = a.gen.as_deref().map(first_latent).transpose()?;
    if let Some(g) = &z_gen {
        g.check_same_shape(&z_ref)?;
    }
    let (c, h, w) = z_ref.shape();
    let encoder = LinearPatchEncoder::seeded(cfg.seed, c, w, h, d.patch, d.embed_dim)?;
    fs::create_dir_all(&a.out_dir)?;

    let fitted;
    let base: &dyn VPredictor = match a.predictor {
        PredictorChoice::Zero => &ZeroPredictor,
        PredictorChoice::Fit => {
            let batch = preservation_batch(&noise, &z_ref, FIT_SAMPLES, d.total_steps);
            fitted = fit_least_squares(&batch, &sched)?;
            &fitted
        }
        // The oracle is per latent; built in `write_side`.
        PredictorChoice::Oracle => &ZeroPredictor,
    };

    let mut files = Vec::new();
    let mut write_side = |name: &str, z0: &LatentState, source: PatchSource| -> Result<Vec<f64>> {
        let oracle = OraclePredictor {
            z0: z0.clone(),
            noise,
            schedule: sched.clone(),
        };
        let predictor: &dyn VPredictor = if a.predictor == PredictorChoice::Oracle { &oracle } else { base };
        let (noisy, clean) = dump_side(z0, &sched, predictor, &steps, &noise)?;
        let errors = clean.iter().map(|z| z.max_abs_diff(z0)).collect::<Result<Vec<_>>>()?;
        let traj = clean
            .iter()
            .zip(&steps)
            .map(|(z, &t)| {
                let mut patches = encoder.embed_patches(z)?;
                patches.source = source;
                Ok(TrajectoryStep { t, patches })
            })
            .collect::<Result<Vec<_>>>()?;
        for (suffix, write) in [("noisy.bin", 0), ("clean.bin", 1), ("patches.bin", 2)] {
            let file = format!("{name}_{suffix}");
            let path = a.out_dir.join(&file);
            match write {
                0 => write_latents(&path, &noisy)?,
                1 => write_latents(&path, &clean)?,
                _ => write_trajectory(&path, &traj)?,
            }
            files.push(file);
        }
        Ok(errors)
    };
    let ref_err = write_side("reference", &z_ref, PatchSource::Reference)?;
    let gen_err = z_gen
        .as_ref()
        .map(|z| write_side("generated", z, PatchSource::Generated))
        .transpose()?;

    let pairs = steps
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let (alpha, sigma) = sched.coefficients(t)?;
            Ok(StepPair {
                t,
                alpha,
                sigma,
                reference_error: ref_err[i],
                generated_error: gen_err.as_ref().map(|g| g[i]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    emit(
        cli,
        &TrajectoryReport {
            schedule: d.schedule,
            total_steps: d.total_steps,
            steps: steps.clone(),
            predictor: format!("{:?}", a.predictor).to_lowercase(),
            seed: cfg.seed,
            pairs,
            files,
        },
    )?;
    Ok(EXIT_OK)
}

/// Samples used to fit the linear base predictor for `trajectory`.
const FIT_SAMPLES: usize = 96;

fn first_latent(path: &Path) -> Result<LatentState> {
    read_latents(path)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::validation(path, "container holds no latents"))
}

fn cmd_detect(cli: &Cli, cfg: &Config) -> Result<i32> {
    let Command::Detect(a) = &cli.command else { unreachable!() };
    let (gen, reference) = match &a.fixtures {
        Some(dir) => {
            let encoder = build_encoder(cfg)?;
            ingest_fixture_bundle(dir, encoder.as_ref())?.detector_inputs()?
        }
        None => {
            let need = |p: &Option<PathBuf>, flag: &str| {
                p.clone().ok_or_else(|| Error::Config(format!("--{flag} is required without --fixtures")))
            };
            let gen_traj = read_trajectory(&need(&a.gen, "gen")?)?;
            let ref_traj = read_trajectory(&need(&a.reference, "ref")?)?;
            let masks = read_masks(&need(&a.masks, "masks")?)?;
            if masks.len() != gen_traj.len() {
                return Err(Error::Alignment(format!(
                    "{} masks for {} generated steps",
                    masks.len(),
                    gen_traj.len()
                )));
            }
            let gen = gen_traj
                .into_iter()
                .zip(masks)
                .map(|(s, mask)| GeneratedStep {
                    t: s.t,
                    patches: s.patches,
                    mask,
                })
                .collect();
            let reference = ref_traj
                .into_iter()
                .map(|s| ReferenceStep { t: s.t, patches: s.patches })
                .collect();
            (gen, reference)
        }
    };
    let d = &cfg.detector;
    let report = detect(&gen, &reference, d.pi.as_deref(), d.beta, d.tau, d.rule)?;
    emit(cli, &report)?;
    Ok(if report.infringed { EXIT_INFRINGED } else { EXIT_OK })
}

#[derive(Serialize)]
struct IterRecord {
    iter: usize,
    l_preserve: f64,
    l_risk: f64,
    l_align: f64,
    l_total: f64,
}

fn cmd_mitigate(cli: &Cli, cfg: &Config, a: &MitigateArgs) -> Result<i32> {
    let encoder = build_encoder(cfg)?;
    let bundle = ingest_fixture_bundle(&a.fixtures, encoder.as_ref())?;
    let fixture = bundle.mitigation_fixture()?;
    let run = toy_finetune(
        &fixture.initial_predictor(),
        &fixture,
        &cfg.mitigation,
        cfg.finetune.steps,
        cfg.finetune.lr,
    )?;
    let mut text = String::new();
    for (iter, r) in run.reports.iter().enumerate() {
        text.push_str(&canonical_json_line(&IterRecord {
            iter,
            l_preserve: r.l_preserve,
            l_risk: r.l_risk,
            l_align: r.l_align,
            l_total: r.l_total,
        })?);
        text.push('\n');
    }
    write_output(cli, &text)?;
    match run.status {
        FinetuneStatus::Completed => Ok(EXIT_OK),
        FinetuneStatus::Diverged { iter } => Err(Error::Numeric(format!("fine-tuning diverged at iteration {iter}"))),
    }
}

fn cmd_calibrate(cli: &Cli, a: &CalibrateArgs) -> Result<i32> {
    let pairs = load_pairs(&a.pairs)?;
    let point = match a.min_precision {
        Some(p) => OperatingPoint::MinPrecision(p),
        None => OperatingPoint::MaxF1,
    };
    emit(cli, &calibrate(&pairs, point)?)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["amcr", "score", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["amcr"]), EXIT_USAGE);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "seed = 4\n[sanitizer]\nlambda = 0.25\nbudget = 2\n").unwrap();
        let cli = Cli::try_parse_from([
            "amcr",
            "--config",
            path.to_str().unwrap(),
            "sanitize",
            "--prompt",
            "x",
            "--corpus",
            "c.jsonl",
            "--budget",
            "7",
        ])
        .unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.sanitizer.lambda, 0.25);
        assert_eq!(cfg.sanitizer.budget, 7);
    }

    #[test]
    fn invalid_knob_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = dir.path().join("p.jsonl");
        fs::write(&pairs, "").unwrap();
        let code = run([
            "amcr",
            "sanitize",
            "--prompt",
            "x",
            "--corpus",
            "missing.jsonl",
            "--lambda",
            "2.0",
        ]);
        assert_eq!(code, EXIT_USAGE);
    }
}
