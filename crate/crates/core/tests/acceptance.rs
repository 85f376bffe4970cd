//! Acceptance suite. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion fails.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};

use consistory_core::attention::{
    adain, blend_queries, dropout_mask, dropout_stream, sdsa, sdsa_weights, ChannelStats, NuSchedule,
    SharedKVBundle,
};
use consistory_core::denoiser::{DenoiserConfig, DenoiserModel, PromptSpec};
use consistory_core::injection::{build_correspondence, select_sources, FeatureBank};
use consistory_core::numerics::{cosine_similarity, otsu_bins, otsu_threshold, BitMask, Tensor, OTSU_BINS};
use consistory_core::pipeline::{
    generate, generate_observed, invert_anchor, personalize, read_manifest, reuse_subject,
    write_run, GenerationConfig, InversionConfig, MetricSummary, RunObserver, StepInfo,
};
use consistory_core::prompts::tokenize;
use consistory_core::schedule::Sampler;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

const SETTINGS: [&str; 5] = ["blowing bubbles", "in a library", "on the beach", "in the snow", "at a market"];
const OTHER_SETTINGS: [&str; 5] = ["riding a bike", "under the rain", "in a forest", "on a rooftop", "in a cave"];

fn denoiser() -> DenoiserConfig {
    DenoiserConfig {
        latent_side: 8,
        ..DenoiserConfig::default()
    }
}

fn dragon_prompts(settings: &[&str]) -> Vec<PromptSpec> {
    settings
        .iter()
        .map(|s| tokenize(&format!("A 3D animation of a red dragon {s}"), &["dragon"], 1024).unwrap())
        .collect()
}

fn run_config(n: usize, seed: u64) -> GenerationConfig {
    GenerationConfig {
        denoiser: denoiser(),
        ..GenerationConfig::new(dragon_prompts(&SETTINGS[..n]), seed)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> BitMask {
    BitMask::new((0..len).map(|_| rng.random::<f64>() < p).collect()).unwrap()
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1 ------------------------------------------------------------------------

fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, m: &BitMask) -> (Vec<Vec<f64>>, Tensor) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut weights = Vec::new();
    let mut out = Tensor::zeros(vec![q.rows(), v.cols()]);
    for i in 0..q.rows() {
        let logits: Vec<f64> = (0..k.rows())
            .map(|j| (0..q.cols()).map(|c| q.row(i)[c] * k.row(j)[c]).sum::<f64>() * scale)
            .collect();
        let max = (0..k.rows()).filter(|&j| m.get(j)).map(|j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = (0..k.rows()).map(|j| if m.get(j) { (logits[j] - max).exp() } else { 0.0 }).collect();
        let z: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|x| x / z).collect();
        for c in 0..v.cols() {
            out.row_mut(i)[c] = (0..k.rows()).map(|j| w[j] * v.row(j)[c]).sum();
        }
        weights.push(w);
    }
    (weights, out)
}

fn criterion_1() -> Outcome {
    let (p, n, d) = (64, 3, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for inst in 0..50 {
        let q = gaussian(&mut rng, p, d);
        let ks: Vec<Tensor> = (0..n).map(|_| gaussian(&mut rng, p, d)).collect();
        let vs: Vec<Tensor> = (0..n).map(|_| gaussian(&mut rng, p, d)).collect();
        let masks: Vec<BitMask> = (0..n)
            .map(|_| {
                let density = rng.random::<f64>();
                random_mask(&mut rng, p, density)
            })
            .collect();
        let target = inst % n;
        let blocks: Vec<(usize, &Tensor, &Tensor, BitMask)> = (0..n).map(|i| (i, &ks[i], &vs[i], masks[i].clone())).collect();
        let bundle = SharedKVBundle::assemble(&blocks).map_err(|e| e.to_string())?;
        let m = bundle.extended_mask(target).map_err(|e| e.to_string())?;
        let w = sdsa_weights(&q, &bundle, &m).map_err(|e| e.to_string())?;
        let h = sdsa(&q, &bundle, &m).map_err(|e| e.to_string())?;
        let (_, h_ref) = naive_attention(&q, &bundle.k_plus, &bundle.v_plus, &m);
        for r in 0..p {
            let sum: f64 = w.row(r).iter().sum();
            check((sum - 1.0).abs() < 1e-12, || format!("instance {inst} row {r} sums to {sum}"))?;
            for c in 0..n * p {
                let cross_image = c / p != target;
                if cross_image && !m.get(c) {
                    check(w.row(r)[c] == 0.0, || format!("instance {inst}: mass {} at masked key {c}", w.row(r)[c]))?;
                }
            }
        }
        let diff = h.max_abs_diff(&h_ref).map_err(|e| e.to_string())?;
        worst = worst.max(diff);
        check(diff < 1e-9, || format!("instance {inst}: output differs from reference by {diff:e}"))?;
    }
    Ok(format!("50 instances, max deviation from naive reference {worst:.1e}"))
}

// 2 ------------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let base = run_config(3, 10 + seed);
        let gated = GenerationConfig {
            dropout_p: 1.0,
            alpha: 0.0,
            ..base.clone()
        };
        let vanilla = GenerationConfig {
            consistent: false,
            ..base
        };
        let a = generate(&gated).map_err(|e| e.to_string())?;
        let b = generate(&vanilla).map_err(|e| e.to_string())?;
        for (x, y) in a.latents.iter().zip(&b.latents) {
            let d = x.max_abs_diff(y).map_err(|e| e.to_string())?;
            worst = worst.max(d);
        }
    }
    check(worst < 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!("5 seeds, max latent deviation {worst:.1e}"))
}

// 3 ------------------------------------------------------------------------

/// Exhaustive search over all splits with the between-class variance in
/// floating point, then the midpoint between the two classes.
fn brute_force_otsu(values: &[f64]) -> f64 {
    let bins = otsu_bins(values).unwrap();
    let n = values.len() as f64;
    let mut best: Option<(usize, f64)> = None;
    for split in 0..OTSU_BINS - 1 {
        let (mut n0, mut s0, mut n1, mut s1) = (0.0, 0.0, 0.0, 0.0);
        for &b in &bins {
            if b <= split {
                n0 += 1.0;
                s0 += b as f64;
            } else {
                n1 += 1.0;
                s1 += b as f64;
            }
        }
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let (w0, w1) = (n0 / n, n1 / n);
        let var = w0 * w1 * (s0 / n0 - s1 / n1).powi(2);
        if best.is_none_or(|(_, b)| var > b) {
            best = Some((split, var));
        }
    }
    let split = best.unwrap().0;
    let below = values.iter().zip(&bins).filter(|(_, &b)| b <= split).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
    let above = values.iter().zip(&bins).filter(|(_, &b)| b > split).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
    let mid = below + (above - below) / 2.0;
    if mid < above {
        mid
    } else {
        below
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let len = rng.random_range(10..=4096);
        let values: Vec<f64> = match case % 3 {
            0 => (0..len).map(|_| rng.random::<f64>()).collect(),
            1 => (0..len)
                .map(|_| {
                    let centre = if rng.random::<bool>() { 0.2 } else { 0.8 };
                    let z: f64 = StandardNormal.sample(&mut rng);
                    centre + 0.1 * z
                })
                .collect(),
            _ => (0..len).map(|_| (rng.random::<f64>() * 20.0).round() / 4.0).collect(),
        };
        let module = otsu_threshold(&values).map_err(|e| format!("case {case}: {e}"))?;
        let oracle = brute_force_otsu(&values);
        check(module.to_bits() == oracle.to_bits(), || {
            format!("case {case} (n = {len}): module {module} vs brute force {oracle}")
        })?;
    }
    Ok("200 arrays, thresholds bit-identical".into())
}

// 4 ------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let (p, d, n) = (64, 16, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..50 {
        let quantized = case % 2 == 1;
        let maps: Vec<Tensor> = (0..n)
            .map(|_| {
                let mut t = gaussian(&mut rng, p, d);
                if quantized {
                    // coarse grid values make exact ties common
                    t.data_mut().iter_mut().for_each(|v| *v = v.round().clamp(-1.0, 1.0) + 2.0);
                }
                t
            })
            .collect();
        let bank = FeatureBank::new(maps.clone()).unwrap();
        for t in 0..n {
            for s in (0..n).filter(|&s| s != t) {
                let c = build_correspondence(&bank, t, s).map_err(|e| e.to_string())?;
                for pt in 0..p {
                    let mut best = (0, f64::NEG_INFINITY);
                    for ps in 0..p {
                        let sim = cosine_similarity(maps[t].row(pt), maps[s].row(ps)).unwrap();
                        if sim > best.1 {
                            best = (ps, sim);
                        }
                    }
                    check(c.indices[pt] == best.0 && c.scores[pt] == best.1, || {
                        format!("case {case} C[{t}→{s}][{pt}] = {} vs scan {}", c.indices[pt], best.0)
                    })?;
                }
            }
            let mask = random_mask(&mut rng, p, 0.5);
            let sources: Vec<usize> = (0..n).filter(|&s| s != t).rev().collect();
            let plan = select_sources(&bank, t, &mask, &sources).map_err(|e| e.to_string())?;
            let masked = mask.ones_indices();
            check(plan.entries.len() == masked.len(), || format!("case {case}: plan size"))?;
            let mut winners = Vec::new();
            for (e, &pt) in plan.entries.iter().zip(&masked) {
                let mut best = (usize::MAX, usize::MAX, f64::NEG_INFINITY);
                for s in (0..n).filter(|&s| s != t) {
                    for ps in 0..p {
                        let sim = cosine_similarity(maps[t].row(pt), maps[s].row(ps)).unwrap();
                        if sim > best.2 {
                            best = (s, ps, sim);
                        }
                    }
                }
                check(e.patch == pt && (e.source_image, e.source_patch, e.score) == best, || {
                    format!("case {case} target {t} patch {pt}: plan {:?} vs scan {best:?}", (e.source_image, e.source_patch, e.score))
                })?;
                winners.push(best.2);
            }
            let gate = otsu_threshold(&winners).ok();
            check(plan.threshold == gate, || format!("case {case}: gate {:?} vs {gate:?}", plan.threshold))?;
            for e in &plan.entries {
                let keep = gate.is_none_or(|g| e.score > g);
                check(e.keep == keep, || format!("case {case}: keep flag of patch {}", e.patch))?;
            }
        }
    }
    Ok("50 banks, maps and plans identical to exhaustive scans".into())
}

// 5 ------------------------------------------------------------------------

#[derive(Default)]
struct StepLog {
    steps: Vec<StepInfo>,
    injections: Vec<usize>,
    subject_masks: Vec<(usize, usize, Vec<BitMask>, BitMask)>,
    extended: Vec<(usize, usize, Vec<usize>, Vec<BitMask>, BitMask)>,
}

impl RunObserver for StepLog {
    fn on_step(&mut self, info: &StepInfo) {
        self.steps.push(info.clone());
    }

    fn on_masks(&mut self, step: usize, image: usize, subjects: &[consistory_core::masking::SubjectMask], union: &BitMask) {
        self.subject_masks
            .push((step, image, subjects.iter().map(|m| m.bits.clone()).collect(), union.clone()));
    }

    fn on_extended_mask(&mut self, step: usize, target: usize, sources: &[usize], blocks: &[BitMask], mask: &BitMask) {
        self.extended.push((step, target, sources.to_vec(), blocks.to_vec(), mask.clone()));
    }

    fn on_injection(&mut self, step: usize, _plan: &consistory_core::injection::InjectionPlan) {
        if self.injections.last() != Some(&step) {
            self.injections.push(step);
        }
    }
}

fn criterion_5() -> Outcome {
    let nu = NuSchedule::default();
    check(nu.nu(0) == 0.9, || format!("nu(0) = {}", nu.nu(0)))?;
    check(nu.nu(4) == 0.8, || format!("nu(4) = {}", nu.nu(4)))?;
    for k in 5..50 {
        check(nu.nu(k) == 0.0, || format!("nu({k}) = {}", nu.nu(k)))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (q_sdsa, q_van) = (gaussian(&mut rng, 64, 32), gaussian(&mut rng, 64, 32));
    for k in 5..50 {
        let out = blend_queries(&q_sdsa, &q_van, k, &nu).map_err(|e| e.to_string())?;
        check(out == q_sdsa, || format!("step {k}: blended queries differ from the shared-attention queries"))?;
    }

    let mut log = StepLog::default();
    generate_observed(&run_config(3, 50), &mut log).map_err(|e| e.to_string())?;
    let expected: Vec<usize> = log
        .steps
        .iter()
        .filter(|s| (680..=900).contains(&s.t))
        .map(|s| s.step)
        .collect();
    for s in &log.steps {
        check(s.fi_active == (680..=900).contains(&s.t), || format!("step {} (t = {}) active flag {}", s.step, s.t, s.fi_active))?;
    }
    check(log.injections == expected, || format!("injection at steps {:?}, expected {expected:?}", log.injections))?;
    Ok(format!(
        "nu 0.9 -> 0.8 then 0; injection at {} steps, t = {}..{}",
        expected.len(),
        log.steps[expected[expected.len() - 1]].t,
        log.steps[expected[0]].t
    ))
}

// 6 ------------------------------------------------------------------------

fn criterion_6() -> Outcome {
    let n = 200_000;
    let mask = BitMask::ones(n);
    let kept = dropout_mask(&mask, 0.5, &mut dropout_stream(6, 0, 1, 0)).map_err(|e| e.to_string())?;
    let frac = kept.count_ones() as f64 / n as f64;
    check((frac - 0.5).abs() <= 0.01, || format!("survival fraction {frac}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let sparse = random_mask(&mut rng, 4096, 0.3);
    let same = dropout_mask(&sparse, 0.0, &mut rng).map_err(|e| e.to_string())?;
    check(same == sparse, || "p = 0 changed the mask".into())?;
    let none = dropout_mask(&sparse, 1.0, &mut rng).map_err(|e| e.to_string())?;
    check(!none.any(), || "p = 1 left bits set".into())?;
    Ok(format!("survival {frac:.4} over {n} bits; p = 0 identity, p = 1 empty"))
}

// 7 ------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    for seed in 0..5 {
        let config = run_config(4, 70 + seed);
        let original = generate(&config).map_err(|e| e.to_string())?;
        let replaced = dragon_prompts(&OTHER_SETTINGS[..2]);
        let reused = reuse_subject(&original.manifest, Some(replaced)).map_err(|e| format!("seed {seed}: {e}"))?;
        for a in [0, 1] {
            let (x, y) = (&original.manifest.images[a].digest, &reused.manifest.images[a].digest);
            check(x == y, || format!("seed {seed}: anchor {a} digest {x} -> {y}"))?;
        }
        for i in [2, 3] {
            check(original.manifest.images[i].digest != reused.manifest.images[i].digest, || {
                format!("seed {seed}: image {i} did not change with its prompt")
            })?;
        }
    }
    Ok("5 seeds, anchor digests unchanged, non-anchors changed".into())
}

// 8 ------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let seeds = 10;
    let mut rows: Vec<[MetricSummary; 4]> = Vec::new();
    for seed in 0..seeds {
        let full = run_config(5, seed * 100);
        let variants = [
            full.clone(),
            GenerationConfig { alpha: 0.0, ..full.clone() },
            GenerationConfig { consistent: false, ..full.clone() },
            GenerationConfig {
                dropout_p: 0.0,
                nu: NuSchedule::disabled(),
                ..full.clone()
            },
        ];
        let m: Vec<MetricSummary> = variants
            .iter()
            .map(|c| generate(c).map(|o| o.manifest.metrics.expect("metrics are always filled")))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        rows.push(m.try_into().expect("four variants"));
    }
    let mean = |f: &dyn Fn(&[MetricSummary; 4]) -> f64| rows.iter().map(f).sum::<f64>() / seeds as f64;
    let (c_full, c_nofi, c_van) = (mean(&|r| r[0].consistency), mean(&|r| r[1].consistency), mean(&|r| r[2].consistency));
    let cons_wins = rows.iter().filter(|r| r[0].consistency > r[2].consistency).count();
    let div_wins = rows.iter().filter(|r| r[0].displacement > r[3].displacement).count();
    let (d_full, d_nodiv) = (mean(&|r| r[0].displacement), mean(&|r| r[3].displacement));
    let summary = format!(
        "consistency full {c_full:.4} / no-FI {c_nofi:.4} / vanilla {c_van:.4}, full > vanilla in {cons_wins}/10; \
         displacement full {d_full:.3} vs no dropout+blend {d_nodiv:.3}, full higher in {div_wins}/10"
    );
    check(c_full >= c_nofi && c_nofi >= c_van && cons_wins >= 8 && div_wins >= 8, || summary.clone())?;
    Ok(summary)
}

// 9 ------------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let cfg = denoiser();
    let model = DenoiserModel::new(cfg.clone()).map_err(|e| e.to_string())?;
    let prompt = tokenize("a photo of a red dragon", &["dragon"], cfg.vocab_size).unwrap();
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut inverted = Vec::new();
    for i in 0..10 {
        let z0 = gaussian(&mut rng, cfg.patches(), cfg.latent_channels).scaled(0.5);
        let inv = invert_anchor(&model, &z0, &prompt, &InversionConfig { seed: i, ..InversionConfig::default() })
            .map_err(|e| e.to_string())?;
        let z = inv.replay(&model).map_err(|e| e.to_string())?;
        worst = worst.max(z.max_abs_diff(&z0).unwrap());
        if i < 2 {
            inverted.push(inv);
        }
    }
    check(worst < 1e-4, || format!("replay error {worst:e}"))?;

    // anchors replayed inside a personalization run with no generated images
    let config = GenerationConfig {
        sampler: Sampler::Ddpm { steps: 100 },
        denoiser: cfg.clone(),
        ..GenerationConfig::default()
    };
    let out = personalize(&inverted, &config).map_err(|e| e.to_string())?;
    for (a, inv) in inverted.iter().enumerate() {
        let d = out.latents[a].max_abs_diff(&inv.z0).unwrap();
        check(d < 1e-4, || format!("personalization anchor {a} off by {d:e}"))?;
    }

    let mut adain_worst = 0.0f64;
    for _ in 0..10 {
        let keys = gaussian(&mut rng, 64, 32).scaled(rng.random_range(0.2..3.0));
        let target = ChannelStats::of(&[&gaussian(&mut rng, 128, 32).scaled(rng.random_range(0.2..3.0))]).unwrap();
        let from = ChannelStats::of(&[&keys]).unwrap();
        let got = ChannelStats::of(&[&adain(&keys, &from, &target).unwrap()]).unwrap();
        for j in 0..32 {
            adain_worst = adain_worst
                .max((got.mean[j] - target.mean[j]).abs())
                .max((got.std[j] - target.std[j]).abs());
        }
    }
    check(adain_worst < 1e-6, || format!("AdaIN statistics off by {adain_worst:e}"))?;
    Ok(format!("replay error {worst:.1e} over 10 latents; AdaIN moment error {adain_worst:.1e}"))
}

// 10 -----------------------------------------------------------------------

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = generate(&run_config(3, 1000)).map_err(|e| e.to_string())?;
    write_run(&a, &first).map_err(|e| e.to_string())?;
    let manifest = read_manifest(&a).map_err(|e| e.to_string())?;
    let second = generate(&manifest.config).map_err(|e| e.to_string())?;
    write_run(&b, &second).map_err(|e| e.to_string())?;
    let mut files = vec!["manifest.json".to_string()];
    files.extend((0..3).map(|i| format!("latents/{i:02}.cstl")));
    for f in &files {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        check(x == y, || format!("{f} differs between executions"))?;
    }
    Ok(format!("{} files byte-identical", files.len()))
}

// 11 -----------------------------------------------------------------------

fn or_all(masks: &[BitMask]) -> BitMask {
    let len = masks[0].len();
    BitMask::new((0..len).map(|p| masks.iter().any(|m| m.get(p))).collect()).unwrap()
}

fn criterion_11() -> Outcome {
    let prompts: Vec<PromptSpec> = SETTINGS[..3]
        .iter()
        .map(|s| tokenize(&format!("a dragon and a knight {s}"), &["dragon", "knight"], 1024).unwrap())
        .collect();
    let mut checked = 0;
    for seed in 0..3 {
        for dropout_p in [0.0, 0.5] {
            let config = GenerationConfig {
                dropout_p,
                denoiser: denoiser(),
                ..GenerationConfig::new(prompts.clone(), 110 + seed)
            };
            let mut log = StepLog::default();
            generate_observed(&config, &mut log).map_err(|e| e.to_string())?;
            let mut unions = std::collections::BTreeMap::new();
            for (step, image, subjects, union) in &log.subject_masks {
                check(subjects.len() == 2, || "expected two subject masks".into())?;
                let or = or_all(subjects);
                check(&or == union, || format!("seed {seed} step {step} image {image}: union is not the OR"))?;
                unions.insert((*step, *image), or);
            }
            for (step, target, sources, blocks, mask) in &log.extended {
                let mut expect = Vec::new();
                for (&j, block) in sources.iter().zip(blocks) {
                    let or = &unions[&(*step, j)];
                    if j == *target {
                        expect.extend(std::iter::repeat_n(true, or.len()));
                    } else if dropout_p == 0.0 {
                        check(block == or, || format!("seed {seed} step {step}: block of {j} for {target} is not the OR"))?;
                        expect.extend_from_slice(or.bits());
                    } else {
                        let inside = (0..or.len()).all(|p| !block.get(p) || or.get(p));
                        check(inside, || format!("seed {seed} step {step}: dropped block outside the union"))?;
                        expect.extend_from_slice(block.bits());
                    }
                }
                check(mask.bits() == expect.as_slice(), || format!("seed {seed} step {step} target {target}: extended mask"))?;
                checked += 1;
            }
        }
    }
    check(checked > 0, || "no extended masks observed".into())?;
    Ok(format!("3 seeds, {checked} extended masks checked against per-subject ORs"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("shared-attention gating exactness", criterion_1),
        ("vanilla reduction", criterion_2),
        ("Otsu oracle equivalence", criterion_3),
        ("correspondence oracle equivalence", criterion_4),
        ("schedule endpoints", criterion_5),
        ("dropout statistics", criterion_6),
        ("anchor isolation", criterion_7),
        ("directional ablation", criterion_8),
        ("inversion exactness", criterion_9),
        ("determinism", criterion_10),
        ("multi-subject union", criterion_11),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let line = match &outcome {
            Ok(detail) => format!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => format!("criterion {:>2} FAIL  {name}: {detail}", i + 1),
        };
        // bypass the test harness's output capture so the lines always show
        let _ = writeln!(std::io::stdout().lock(), "{line}");
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
