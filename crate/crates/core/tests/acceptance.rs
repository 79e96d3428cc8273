//! Acceptance criteria, one line each. Runs as a plain binary so the
//! summary is printed even when every criterion passes.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use amcr_core::attention::{build_soft_mask, AttentionLayer, AttentionStack, SoftMask};
use amcr_core::backends::{read_attention, DeterministicTestEncoder, TextEncoder};
use amcr_core::calibration::{calibrate, confusion_scores, LabeledPair, OperatingPoint};
use amcr_core::detector::{detect, AggregationRule, GeneratedStep, PatchEmbeddings, PatchSource, ReferenceStep};
use amcr_core::diffusion::{estimate_clean, forward_diffuse, make_schedule, Conditioning, LatentState, NoiseStream};
use amcr_core::diffusion::{OraclePredictor, ScheduleFamily};
use amcr_core::mitigator::{
    finite_diff_check, toy_finetune, FixtureSpec, MitigationConfig, MitigationFixture, MitigationObjective,
};
use amcr_core::numerics::{cosine, lse_pool, quantile, EmbeddingVector, ScalarField};
use amcr_core::prompt::{fold, parse_prompt, Bucket, SlotKind, StructuredPrompt};
use amcr_core::risk::{load_corpus, rank_slots, score_text, RiskCorpus};
use amcr_core::sanitizer::{
    evaluate_candidate, generate_candidates, sanitize, select_replacement, Providers, SanitizerConfig, StopReason,
};

type Outcome = Result<String, String>;
type Trace = Vec<(Bucket, String, String)>;
type Criterion = (&'static str, fn() -> Outcome, u64);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixtures() -> PathBuf {
    repo_root().join("fixtures")
}

fn encoder() -> DeterministicTestEncoder {
    DeterministicTestEncoder::new(0)
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> EmbeddingVector {
    EmbeddingVector::unit((0..d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn c1_vp_reconstruction() -> Outcome {
    let mut worst: f64 = 0.0;
    for total in [1, 10, 50] {
        let sched = make_schedule(total, ScheduleFamily::Cosine).map_err(err)?;
        let noise = NoiseStream::new(11);
        let like = LatentState::zeros(4, 8, 8).map_err(err)?;
        let z0 = noise.sample(999, &like);
        let oracle = OraclePredictor {
            z0: z0.clone(),
            noise,
            schedule: sched.clone(),
        };
        for t in 0..=total {
            let z_t = forward_diffuse(&z0, t, &sched, &noise.eps(t, &z0)).map_err(err)?;
            let back = estimate_clean(&z_t, t, &sched, &oracle, &Conditioning::Minimal).map_err(err)?;
            worst = worst.max(back.max_abs_diff(&z0).map_err(err)?);
        }
    }
    ensure(worst < 1e-9, || format!("max error {worst:e}"))?;
    Ok(format!("max error {worst:.1e}"))
}

fn c2_lse_limit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_limit: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=64);
        let sims: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let gap = lse_pool(&sims, 1000.0).map_err(err)? - max;
        worst_limit = worst_limit.max(gap.abs());
        ensure(gap.abs() < 1e-3, || format!("beta=1000 gap {gap}"))?;
        for beta in [1.0, 5.0, 20.0] {
            let gap = lse_pool(&sims, beta).map_err(err)? - max;
            let bound = (n as f64).ln() / beta;
            ensure(gap >= 0.0 && gap <= bound + 1e-12, || {
                format!("beta={beta} n={n}: gap {gap} outside [0, {bound}]")
            })?;
        }
    }
    Ok(format!("worst beta=1000 gap {worst_limit:.1e}"))
}

fn c3_risk_oracle() -> Outcome {
    let enc = encoder();
    let planted = [
        "mario",
        "super mario",
        "mustached plumber",
        "red cap and blue overalls",
        "red cap with m emblem",
        "bitten apple logo",
        "apple inc",
        "apple logo with leaf",
    ];
    let mut phrases: Vec<(String, Option<String>)> = planted.iter().map(|p| (p.to_string(), None)).collect();
    for i in 0..42 {
        phrases.push((format!("protected entity {i}"), None));
    }
    let corpus = RiskCorpus::from_phrases(&phrases, &enc).map_err(err)?;
    ensure(corpus.len() == 50, || format!("corpus has {} entries", corpus.len()))?;
    let mut queries: Vec<String> = [
        "cheerful plumber",
        "red cap",
        "blue overalls",
        "fixing a sink",
        "photo",
        "single leaf",
        "flat design",
        "Mario",
        "  Super   MARIO ",
        "protected entity 7",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    queries.extend((0..10).map(|i| format!("unrelated query {i}")));

    for q in &queries {
        let got = score_text(q, &corpus, &enc).map_err(err)?;
        let e = enc.embed(&[fold(q).as_str()]).map_err(err)?.remove(0);
        let mut best = f64::NEG_INFINITY;
        for entry in corpus.entries() {
            best = best.max(cosine(&e, &entry.embedding).map_err(err)?);
        }
        ensure(got.to_bits() == best.to_bits(), || format!("'{q}': {got} != scan {best}"))?;
    }
    Ok(format!("{} queries bitwise equal", queries.len()))
}

fn slot(kind: SlotKind) -> Bucket {
    Bucket::Slot(kind)
}

/// Step-by-step replay of the sanitizer loop from its building blocks.
fn scripted_replay(
    sp: &StructuredPrompt,
    corpus: &RiskCorpus,
    enc: &dyn TextEncoder,
    cfg: &SanitizerConfig,
) -> Result<(Trace, StopReason), String> {
    let providers = Providers::fallback_only();
    let mut current = sp.clone();
    let mut done: BTreeSet<(Bucket, usize)> = BTreeSet::new();
    let mut trace = Vec::new();
    let mut deltas: Vec<f64> = Vec::new();
    let first = rank_slots(&current, corpus, enc).map_err(err)?;
    let risks: Vec<f64> = first.per_slot.values().copied().collect();
    let floor = quantile(&risks, cfg.risk_quantile).map_err(err)?;
    loop {
        if trace.len() >= cfg.budget {
            return Ok((trace, StopReason::Budget));
        }
        if deltas.len() >= cfg.window_m {
            let w = &deltas[deltas.len() - cfg.window_m..];
            if w.iter().sum::<f64>() / (cfg.window_m as f64) < cfg.gamma {
                return Ok((trace, StopReason::MarginalImprovement));
            }
        }
        let report = rank_slots(&current, corpus, enc).map_err(err)?;
        let open: Vec<Bucket> = report
            .ranking
            .iter()
            .copied()
            .filter(|b| (0..current.bucket(*b).len()).any(|i| !done.contains(&(*b, i))))
            .collect();
        let Some(&bucket) = open.first() else {
            return Ok((trace, StopReason::Exhausted));
        };
        if open.iter().all(|b| report.per_slot[b] < floor) {
            return Ok((trace, StopReason::RiskQuantile));
        }
        let phrases = current.bucket(bucket).to_vec();
        let mut idx = None;
        for (i, p) in phrases.iter().enumerate() {
            if done.contains(&(bucket, i)) {
                continue;
            }
            if idx.is_none_or(|j: usize| report.per_phrase[p].score > report.per_phrase[&phrases[j]].score) {
                idx = Some(i);
            }
        }
        let i = idx.unwrap();
        done.insert((bucket, i));
        let cands: Vec<String> =
            generate_candidates(&phrases[i], bucket, &providers, corpus, cfg.candidates_per_element)
                .into_iter()
                .filter(|c| current.find(c).is_none())
                .collect();
        let evals = cands
            .iter()
            .map(|c| evaluate_candidate(&phrases[i], c, &phrases, corpus, enc, cfg.lambda))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        if let Some(k) = select_replacement(&evals) {
            current.replace(bucket, i, cands[k].clone()).map_err(err)?;
            trace.push((bucket, phrases[i].clone(), cands[k].clone()));
            deltas.push(evals[k].delta_r);
        }
    }
}

fn c4_sanitizer_oracle() -> Outcome {
    let enc = encoder();
    let corpus = RiskCorpus::from_phrases(
        &[("alpha hero emblem", None), ("beta banner", None)],
        &enc,
    )
    .map_err(err)?;
    let mut sp = StructuredPrompt::new("alpha hero in a beta cloak by the gamma tower");
    sp.push(slot(SlotKind::Subject), "alpha hero");
    sp.push(slot(SlotKind::Clothing), "beta cloak");
    sp.push(slot(SlotKind::Scene), "gamma tower");
    let cfg = SanitizerConfig::default();
    let result = sanitize(&sp, &corpus, &enc, &Providers::fallback_only(), &cfg).map_err(err)?;
    let (replay, stop) = scripted_replay(&sp, &corpus, &enc, &cfg)?;
    let got: Vec<(Bucket, String, String)> = result
        .trace
        .iter()
        .map(|t| (t.slot, t.original.clone(), t.chosen.clone()))
        .collect();
    ensure(got == replay, || format!("trace {got:?} != replay {replay:?}"))?;
    ensure(result.stop_reason == stop, || format!("stop {:?} != replay {stop:?}", result.stop_reason))?;
    let expected = vec![
        (slot(SlotKind::Clothing), "beta cloak".to_string(), "grey cloak".to_string()),
        (slot(SlotKind::Subject), "alpha hero".to_string(), "plain hero".to_string()),
    ];
    ensure(got == expected, || format!("trace {got:?} differs from the worked fixture"))?;
    let before = rank_slots(&sp, &corpus, &enc).map_err(err)?.max_risk();
    let after = rank_slots(&result.sanitized, &corpus, &enc).map_err(err)?.max_risk();
    ensure(after < before, || format!("max risk {after} !< {before}"))?;
    Ok(format!("{} steps, stop {:?}, max risk {before:.3} -> {after:.3}", got.len(), stop))
}

fn c5_worked_prompts() -> Outcome {
    let enc = encoder();
    let corpus = load_corpus(&fixtures().join("corpus.jsonl"), &enc).map_err(err)?;
    let cases: [(&str, &[&str]); 2] = [
        (
            "A cheerful plumber fixing a sink, red cap, blue overalls, photo.",
            &["cheerful plumber", "red cap", "blue overalls"],
        ),
        (
            "A minimal bitten apple logo with a single leaf at an angled corner, flat design.",
            &["bitten apple logo", "single leaf"],
        ),
    ];
    let mut summary = Vec::new();
    for (prompt, flagged) in cases {
        let sp = parse_prompt(prompt).map_err(err)?;
        let r = sanitize(&sp, &corpus, &enc, &Providers::fallback_only(), &SanitizerConfig::default())
            .map_err(err)?;
        ensure(!r.trace.is_empty(), || format!("empty trace for '{prompt}'"))?;
        for f in flagged {
            ensure(r.negative_prompts.iter().any(|q| q == f), || {
                format!("'{f}' missing from q = {:?}", r.negative_prompts)
            })?;
        }
        let before = rank_slots(&sp, &corpus, &enc).map_err(err)?.max_risk();
        let after = rank_slots(&r.sanitized, &corpus, &enc).map_err(err)?.max_risk();
        ensure(after < before, || format!("'{prompt}': max risk {after} !< {before}"))?;
        summary.push(format!("{before:.3}->{after:.3}"));
    }
    Ok(format!("max risk {}", summary.join(", ")))
}

/// Heads averaged, tokens maxed, layers averaged, then min-max scaled.
fn staged_mask(stack: &AttentionStack, tokens: &[usize]) -> Vec<f64> {
    let first = &stack.layers[0];
    let cells = first.width * first.height;
    let mut u = vec![0.0; cells];
    for layer in &stack.layers {
        for (cell, acc) in u.iter_mut().enumerate() {
            let mut best = f64::NEG_INFINITY;
            for &k in tokens {
                let mean = layer.heads.iter().map(|h| h[cell * layer.tokens + k]).sum::<f64>() / layer.heads.len() as f64;
                best = best.max(mean);
            }
            *acc += best / stack.layers.len() as f64;
        }
    }
    let lo = u.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    u.iter().map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect()
}

fn random_stack(rng: &mut ChaCha8Rng) -> AttentionStack {
    let (w, h, l) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=6));
    let layers = (0..rng.random_range(1..=3))
        .map(|_| {
            let heads = (0..rng.random_range(2..=4))
                .map(|_| {
                    (0..w * h)
                        .flat_map(|_| {
                            let row: Vec<f64> = (0..l).map(|_| rng.random::<f64>()).collect();
                            let s: f64 = row.iter().sum::<f64>() * 1.01;
                            row.into_iter().map(move |v| v / s)
                        })
                        .collect()
                })
                .collect();
            AttentionLayer::new(w, h, l, heads).unwrap()
        })
        .collect();
    AttentionStack::new(layers, (0..l).map(|i| format!("tok{i}")).collect(), 0).unwrap()
}

fn c6_mask_pipeline() -> Outcome {
    let stack = read_attention(&fixtures().join("plumber/attention_t3.bin")).map_err(err)?;
    ensure(stack.layers.len() == 2 && stack.layers.iter().all(|l| l.heads.len() == 2), || {
        "shipped stack is not 2-layer/2-head".into()
    })?;
    let all: Vec<usize> = (0..stack.tokens()).collect();
    let mut worst: f64 = 0.0;
    for tokens in [all.clone(), vec![2, 3]] {
        let mask = build_soft_mask(&stack, None, Some(&tokens)).map_err(err)?;
        for (a, b) in mask.field.values().iter().zip(staged_mask(&stack, &tokens)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-9, || format!("staged oracle differs by {worst:e}"))?;

    let layer = &stack.layers[0];
    let flat = vec![1.0 / layer.tokens as f64; layer.cells() * layer.tokens];
    let constant = AttentionStack::new(
        vec![AttentionLayer::new(layer.width, layer.height, layer.tokens, vec![flat.clone(), flat]).map_err(err)?],
        stack.token_labels.clone(),
        3,
    )
    .map_err(err)?;
    let m = build_soft_mask(&constant, None, None).map_err(err)?;
    ensure(m.is_all_zero(), || "constant attention gave a nonzero mask".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..20 {
        let s = random_stack(&mut rng);
        let mut p = s.clone();
        for layer in &mut p.layers {
            layer.heads.shuffle(&mut rng);
        }
        let a = build_soft_mask(&s, None, None).map_err(err)?;
        let b = build_soft_mask(&p, None, None).map_err(err)?;
        let d = a
            .field
            .values()
            .iter()
            .zip(b.field.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        ensure(d < 1e-12, || format!("stack {i}: head permutation moved the mask by {d:e}"))?;
    }
    Ok(format!("staged oracle max error {worst:.1e}"))
}

fn random_detector_fixture(rng: &mut ChaCha8Rng) -> (Vec<GeneratedStep>, Vec<ReferenceStep>, usize) {
    let d = rng.random_range(3..=12);
    let (w, h) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let n_ref = rng.random_range(1..=8);
    let steps: Vec<usize> = {
        let mut s: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(0..50)).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let mut gen = Vec::new();
    let mut reference = Vec::new();
    for &t in &steps {
        let patches = (0..w * h).map(|_| random_unit(rng, d)).collect();
        let mask = ScalarField::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap();
        gen.push(GeneratedStep {
            t,
            patches: PatchEmbeddings::new(w, h, patches, PatchSource::Generated).unwrap(),
            mask: SoftMask::new(mask, t).unwrap(),
        });
        let patches = (0..n_ref).map(|_| random_unit(rng, d)).collect();
        reference.push(ReferenceStep {
            t,
            patches: PatchEmbeddings::new(n_ref, 1, patches, PatchSource::Reference).unwrap(),
        });
    }
    (gen, reference, d)
}

fn c7_detector() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..100 {
        let (gen, reference, d) = random_detector_fixture(&mut rng);
        let mean = detect(&gen, &reference, None, 20.0, 0.9, AggregationRule::WeightedMean).map_err(err)?;
        let max = detect(&gen, &reference, None, 20.0, 0.9, AggregationRule::MaxOverSteps).map_err(err)?;
        ensure(max.overall >= mean.overall, || {
            format!("fixture {i}: max-over-steps {} < weighted mean {}", max.overall, mean.overall)
        })?;
        let mut grown = reference.clone();
        for r in &mut grown {
            r.patches.patches.push(random_unit(&mut rng, d));
            r.patches.width += 1;
        }
        let more = detect(&gen, &grown, None, 20.0, 0.9, AggregationRule::WeightedMean).map_err(err)?;
        for (t, s) in &mean.per_step {
            ensure(more.per_step[t] >= *s, || {
                format!("fixture {i} step {t}: extra reference patch lowered {s} to {}", more.per_step[t])
            })?;
        }
    }

    let dir = tempfile::tempdir().map_err(err)?;
    let report = dir.path().join("detect.json");
    let status = Command::new(env!("CARGO_BIN_EXE_amcr"))
        .args(["detect", "--tau", "0.9", "--fixtures"])
        .arg(fixtures().join("selfcheck"))
        .arg("--report")
        .arg(&report)
        .status()
        .map_err(err)?;
    ensure(status.code() == Some(1), || format!("self-comparison exited {status}"))?;
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).map_err(err)?).map_err(err)?;
    let overall = json["overall"].as_f64().ok_or("report lacks overall")?;
    ensure((overall - 1.0).abs() < 1e-6, || format!("self-comparison scored {overall}"))?;
    Ok(format!("100 random fixtures; self-comparison {overall} exits 1"))
}

fn c8_gradient_check() -> Outcome {
    let fixture = MitigationFixture::gradient_check(8).map_err(err)?;
    ensure(fixture.spec.width == 8 && fixture.spec.height == 8 && fixture.steps().len() == 3, || {
        "gradient fixture is not 8x8 with 3 steps".into()
    })?;
    let cfg = MitigationConfig::default();
    let objective = MitigationObjective::new(&fixture, &cfg).map_err(err)?;
    let params = fixture.initial_predictor().params();
    let worst = finite_diff_check(&objective, &params, 1e-4).map_err(err)?;
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!("{} params, max relative error {worst:.1e}", params.len()))
}

fn c9_mitigation_direction() -> Outcome {
    let fixture = MitigationFixture::infringing_reference(FixtureSpec::default()).map_err(err)?;
    let cfg = MitigationConfig {
        lambda_r: 1.0,
        lambda_a: 0.1,
        ..MitigationConfig::default()
    };
    let run = toy_finetune(&fixture.initial_predictor(), &fixture, &cfg, 200, 1e-2).map_err(err)?;
    let (first, last) = (&run.reports[0], run.reports.last().unwrap());
    ensure(last.l_risk < first.l_risk, || format!("L_r {} !< {}", last.l_risk, first.l_risk))?;
    let growth = last.l_preserve - first.l_preserve;
    ensure(growth <= 0.25 * first.l_preserve, || {
        format!("L_P grew by {growth} from {}", first.l_preserve)
    })?;
    Ok(format!(
        "L_r {:.4} -> {:.4}, L_P {:.4} -> {:.4}",
        first.l_risk, last.l_risk, first.l_preserve, last.l_preserve
    ))
}

fn c10_determinism() -> Outcome {
    let fx = fixtures();
    let corpus = fx.join("corpus.jsonl");
    let plumber = fx.join("plumber");
    let tmp = tempfile::tempdir().map_err(err)?;
    let pairs = tmp.path().join("pairs.jsonl");
    std::fs::write(
        &pairs,
        "{\"score\":0.2,\"infringing\":false}\n{\"score\":0.7,\"infringing\":true}\n{\"score\":0.9,\"infringing\":true}\n",
    )
    .map_err(err)?;
    let prompt = "A cheerful plumber fixing a sink, red cap, blue overalls, photo.";
    let p = |x: &Path| x.display().to_string();
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("sanitize", vec!["--prompt".into(), prompt.into(), "--corpus".into(), p(&corpus)]),
        ("score", vec!["--prompt".into(), prompt.into(), "--corpus".into(), p(&corpus)]),
        (
            "mask",
            vec!["--attn".into(), p(&plumber.join("attention_t6.bin")), "--out".into(), "OUT/mask.png".into()],
        ),
        (
            "trajectory",
            vec![
                "--ref".into(),
                p(&plumber.join("latents.bin")),
                "--gen".into(),
                p(&plumber.join("latents.bin")),
                "--out-dir".into(),
                "OUT/traj".into(),
            ],
        ),
        ("detect", vec!["--fixtures".into(), p(&plumber)]),
        ("mitigate", vec!["--fixtures".into(), p(&plumber), "--steps".into(), "20".into()]),
        ("calibrate", vec!["--pairs".into(), p(&pairs)]),
    ];
    for (name, args) in &runs {
        let mut outputs = Vec::new();
        let out = tmp.path().join(name);
        for _ in 0..2 {
            if out.exists() {
                std::fs::remove_dir_all(&out).map_err(err)?;
            }
            std::fs::create_dir_all(&out).map_err(err)?;
            let args: Vec<String> = args.iter().map(|a| a.replace("OUT", &p(&out))).collect();
            let status = Command::new(env!("CARGO_BIN_EXE_amcr"))
                .arg("--seed")
                .arg("5")
                .arg(name)
                .args(&args)
                .arg("--report")
                .arg(out.join("report"))
                .status()
                .map_err(err)?;
            ensure(matches!(status.code(), Some(0 | 1)), || format!("{name} exited {status}"))?;
            let mut files: Vec<(String, Vec<u8>)> = Vec::new();
            for entry in walk(&out) {
                let rel = entry.strip_prefix(&out).unwrap().display().to_string();
                files.push((rel, std::fs::read(&entry).map_err(err)?));
            }
            files.sort();
            outputs.push(files);
        }
        ensure(outputs[0] == outputs[1], || format!("{name}: outputs differ between runs"))?;
        ensure(outputs[0].iter().all(|(_, b)| !b.is_empty()), || format!("{name}: empty output"))?;
    }
    Ok(format!("{} subcommands byte-identical", runs.len()))
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap().flatten() {
        let path = entry.path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

fn c11_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pairs: Vec<LabeledPair> = (0..10)
        .map(|i| {
            let infringing = i % 2 == 0;
            let centre = if infringing { 0.75 } else { 0.45 };
            LabeledPair {
                score: centre + rng.random_range(-0.25..0.25),
                infringing,
            }
        })
        .collect();
    let got = calibrate(&pairs, OperatingPoint::MaxF1).map_err(err)?;

    // Sweep every cut between consecutive distinct scores, plus both ends.
    let mut scores: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut cuts = vec![scores[0] - 1.0];
    cuts.extend(scores.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cuts.push(scores[scores.len() - 1] + 1.0);
    let (mut best_f1, mut best_cut) = (-1.0, f64::NAN);
    for &c in &cuts {
        let (_, _, f1) = confusion_scores(&pairs, c);
        if f1 >= best_f1 {
            best_f1 = f1;
            best_cut = c;
        }
    }
    ensure(got.f1 == best_f1, || format!("F1 {} != sweep {best_f1}", got.f1))?;
    let flagged = |tau: f64| pairs.iter().map(|p| p.score > tau).collect::<Vec<_>>();
    ensure(flagged(got.tau) == flagged(best_cut), || {
        format!("tau {} splits the pairs differently from sweep cut {best_cut}", got.tau)
    })?;
    Ok(format!("tau {:.6}, F1 {:.3}", got.tau, got.f1))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("1 VP reconstruction identity", c1_vp_reconstruction, 1),
        ("2 LSE limit", c2_lse_limit, 1),
        ("3 risk-scoring oracle equivalence", c3_risk_oracle, 1),
        ("4 sanitizer loop oracle", c4_sanitizer_oracle, 1),
        ("5 worked-example sanitization", c5_worked_prompts, 1),
        ("6 mask pipeline", c6_mask_pipeline, 1),
        ("7 detector invariants", c7_detector, 2),
        ("8 gradient check", c8_gradient_check, 5),
        ("9 mitigation direction", c9_mitigation_direction, 30),
        ("10 determinism", c10_determinism, 5),
        ("11 calibration oracle", c11_calibration, 1),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|msg| {
            if elapsed > Duration::from_secs(budget) {
                Err(format!("{msg}; took {elapsed:.2?}, budget {budget} s"))
            } else {
                Ok(msg)
            }
        });
        match outcome {
            Ok(msg) => println!("PASS  criterion {name} ({elapsed:.2?}): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  criterion {name} ({elapsed:.2?}): {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
