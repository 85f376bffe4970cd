//! Full runs: two sweeps, shared attention, feature injection, anchors,
//! subject reuse and inversion-based personalization.
//!
//! Sweep 1 denoises every image without sharing down to the correspondence
//! timestep and captures a feature bank. Sweep 2 restarts from the same
//! noise. At each step it runs a vanilla conditional pass (which feeds the
//! subject masks and the blend queries), an unconditional pass, and a
//! consistent conditional pass with shared attention and feature injection.
//! Only the conditional branch is rewritten; guidance then mixes the two.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    adain, blend_queries, build_extended_mask, dropout_mask, dropout_stream, sdsa, ChannelStats, NuSchedule,
    SharedKVBundle,
};
use crate::denoiser::{
    ActivationRecord, BatchAttentionHook, BatchItem, DenoiserConfig, DenoiserModel, LayerProjections, PromptSpec,
};
use crate::error::{Error, Result};
use crate::eval::{consistency_proxy, displacement_diversity, ConsistencyReport, DiversityReport};
use crate::injection::{build_correspondence, inject, select_from_maps, CorrespondenceMap, FeatureBank, InjectionPlan};
use crate::io::{fnv1a64, latent_digest, read_latent, write_latent, write_preview};
use crate::masking::{union_masks, write_mask_pgm, CrossAttnStore, SubjectMask};
use crate::numerics::{attention, BitMask, Tensor};
use crate::schedule::{cfg, nearest_step, Sampler, TRAIN_TIMESTEPS};

pub const MANIFEST_VERSION: u32 = 1;

/// Which images serve as sharing sources.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anchors {
    /// Every image shares with every other image.
    All,
    Indices(Vec<usize>),
}

impl Default for Anchors {
    fn default() -> Self {
        Anchors::Indices(vec![0, 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub prompts: Vec<PromptSpec>,
    /// Initial-noise seed per image.
    pub seeds: Vec<u64>,
    /// Seed of the dropout streams.
    pub run_seed: u64,
    pub sampler: Sampler,
    pub guidance_scale: f64,
    pub dropout_p: f64,
    pub alpha: f64,
    pub nu: NuSchedule,
    /// Inclusive diffusion-time window in which features are injected.
    pub fi_window: [u32; 2],
    pub dift_t: u32,
    pub anchors: Anchors,
    /// `false` gives the vanilla baseline: no sharing and no injection.
    pub consistent: bool,
    pub denoiser: DenoiserConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            prompts: Vec::new(),
            seeds: Vec::new(),
            run_seed: 0,
            sampler: Sampler::default(),
            guidance_scale: 5.0,
            dropout_p: 0.5,
            alpha: 0.8,
            nu: NuSchedule::default(),
            fi_window: [680, 900],
            dift_t: 261,
            anchors: Anchors::default(),
            consistent: true,
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl GenerationConfig {
    /// Defaults with the given prompts and seeds `base_seed, base_seed + 1, …`.
    pub fn new(prompts: Vec<PromptSpec>, base_seed: u64) -> Self {
        let seeds = (0..prompts.len() as u64).map(|i| base_seed.wrapping_add(i)).collect();
        Self {
            prompts,
            seeds,
            run_seed: base_seed,
            ..Self::default()
        }
    }

    /// Checks shared by generation and personalization.
    fn validate_common(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.nu.validate()?;
        if self.seeds.len() != self.prompts.len() {
            return Err(Error::Config(format!(
                "{} seeds for {} prompts",
                self.seeds.len(),
                self.prompts.len()
            )));
        }
        for (i, p) in self.prompts.iter().enumerate() {
            p.validate(self.denoiser.vocab_size)
                .map_err(|e| Error::Config(format!("prompt {i}: {e}")))?;
            if p.subject_token_positions.is_empty() {
                return Err(Error::Config(format!("prompt {i} names no subject")));
            }
        }
        for (name, v) in [("dropout_p", self.dropout_p), ("alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0,1]")));
            }
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::Config("guidance scale must be finite".into()));
        }
        let [lo, hi] = self.fi_window;
        if lo > hi || hi > TRAIN_TIMESTEPS {
            return Err(Error::Config(format!("injection window [{lo}, {hi}] outside [0, {TRAIN_TIMESTEPS}]")));
        }
        if self.dift_t > TRAIN_TIMESTEPS {
            return Err(Error::Config(format!("dift_t {} beyond T", self.dift_t)));
        }
        self.sampler.timesteps(TRAIN_TIMESTEPS)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.len() < 2 {
            return Err(Error::Config("a run needs at least two prompts".into()));
        }
        self.validate_common()?;
        if let Anchors::Indices(a) = &self.anchors {
            if a.is_empty() {
                return Err(Error::Config("anchor list is empty".into()));
            }
            let mut sorted = a.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != a.len() {
                return Err(Error::Config("anchor indices repeat".into()));
            }
            if let Some(&i) = a.iter().find(|&&i| i >= self.prompts.len()) {
                return Err(Error::Config(format!("anchor {i} outside {} images", self.prompts.len())));
            }
        }
        Ok(())
    }

    pub fn anchor_indices(&self) -> Vec<usize> {
        match &self.anchors {
            Anchors::All => (0..self.prompts.len()).collect(),
            Anchors::Indices(a) => {
                let mut a = a.clone();
                a.sort_unstable();
                a
            }
        }
    }

    /// Sharing sources per image: anchors draw only on other anchors, and
    /// everyone else draws on the anchors.
    pub fn sharing_sources(&self) -> Vec<Vec<usize>> {
        let anchors = self.anchor_indices();
        (0..self.prompts.len())
            .map(|i| anchors.iter().copied().filter(|&a| a != i).collect())
            .collect()
    }

    /// FNV-1a over the canonical JSON of the config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config always serializes");
        format!("{:016x}", fnv1a64(&bytes))
    }
}

/// Noise for one image: `P × c` standard normals from `seed`, stream `stream`.
fn gaussian_latent(seed: u64, stream: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape is consistent by construction")
}

pub fn initial_latent(seed: u64, cfg: &DenoiserConfig) -> Tensor {
    gaussian_latent(seed, 0, cfg.patches(), cfg.latent_channels)
}

/// Fresh DDPM noise for sampler step `step`.
pub fn step_noise(seed: u64, step: usize, cfg: &DenoiserConfig) -> Tensor {
    gaussian_latent(seed, step as u64 + 1, cfg.patches(), cfg.latent_channels)
}

/// Per-step events for instrumentation. Every method defaults to a no-op.
pub trait RunObserver {
    fn on_step(&mut self, _info: &StepInfo) {}

    /// Per-subject masks and their union for one image.
    fn on_masks(&mut self, _step: usize, _image: usize, _subjects: &[SubjectMask], _union: &BitMask) {}

    /// The extended mask used by `target`, with the (dropped) per-source blocks.
    fn on_extended_mask(&mut self, _step: usize, _target: usize, _sources: &[usize], _blocks: &[BitMask], _mask: &BitMask) {}

    fn on_injection(&mut self, _step: usize, _plan: &InjectionPlan) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl RunObserver for NoObserver {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub step: usize,
    pub t: u32,
    pub t_prev: u32,
    pub nu: f64,
    pub fi_active: bool,
    /// Base of the dropout stream ids used at this step.
    pub dropout_stream: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Generate,
    Personalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub prompt: String,
    pub seed: u64,
    pub anchor: bool,
    pub digest: String,
    /// Final union subject mask as a `0`/`1` string.
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub consistency: f64,
    pub displacement: f64,
    pub displacement_masked: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub kind: RunKind,
    pub config: GenerationConfig,
    pub config_hash: String,
    pub anchors: Vec<usize>,
    pub images: Vec<ImageRecord>,
    pub steps: Vec<StepInfo>,
    pub metrics: Option<MetricSummary>,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn digests(&self) -> Vec<&str> {
        self.images.iter().map(|i| i.digest.as_str()).collect()
    }

    pub fn masks(&self) -> Result<Vec<BitMask>> {
        self.images.iter().map(|i| BitMask::from_bit_string(&i.mask)).collect()
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub latents: Vec<Tensor>,
    /// Final union subject mask per image.
    pub masks: Vec<BitMask>,
    /// Correspondence features of the final latents.
    pub eval_bank: FeatureBank,
}

// ---------------------------------------------------------------------------
// engine

enum Noise<'a> {
    Fresh(u64),
    Replay(&'a [Tensor]),
}

struct Slot<'a> {
    prompt: &'a PromptSpec,
    z_init: Tensor,
    guidance: f64,
    noise: Noise<'a>,
    sources: Vec<usize>,
}

/// Key statistics for personalization: inverted anchors' keys are mapped
/// onto the statistics of the generated images' keys.
struct Alignment<'a> {
    /// `(slot, stats[step][decoder layer])`.
    anchors: Vec<(usize, &'a [Vec<ChannelStats>])>,
    generated: Vec<usize>,
}

struct Protocol {
    grid: Vec<(u32, u32)>,
    ddpm: bool,
    dropout_p: f64,
    alpha: f64,
    nu: NuSchedule,
    fi_window: [u32; 2],
    dift_step: usize,
    consistent: bool,
    run_seed: u64,
}

impl Protocol {
    fn from_config(c: &GenerationConfig) -> Result<Self> {
        let grid = c.sampler.timesteps(TRAIN_TIMESTEPS)?;
        let dift_step = nearest_step(&grid, c.dift_t);
        Ok(Self {
            ddpm: matches!(c.sampler, Sampler::Ddpm { .. }),
            dropout_p: c.dropout_p,
            alpha: c.alpha,
            nu: c.nu,
            fi_window: c.fi_window,
            dift_step,
            consistent: c.consistent,
            run_seed: c.run_seed,
            grid,
        })
    }

    fn fi_active(&self, t: u32) -> bool {
        self.consistent && self.alpha > 0.0 && self.fi_window[0] <= t && t <= self.fi_window[1]
    }

    fn injection_used(&self) -> bool {
        self.consistent && self.alpha > 0.0 && self.grid.iter().any(|&(t, _)| self.fi_active(t))
    }
}

struct TargetSetup {
    order: Vec<usize>,
    blocks: Vec<BitMask>,
    mask: BitMask,
}

struct StepHook<'a> {
    layers: Vec<usize>,
    decoder_start: usize,
    step: usize,
    nu: &'a NuSchedule,
    vanilla: &'a [ActivationRecord],
    targets: &'a [Option<TargetSetup>],
    align: Option<&'a Alignment<'a>>,
    plans: &'a [Option<InjectionPlan>],
    alpha: f64,
}

impl StepHook<'_> {
    fn aligned_keys(&self, layer: usize, projections: &[LayerProjections]) -> Result<BTreeMap<usize, Tensor>> {
        let mut out = BTreeMap::new();
        let Some(align) = self.align else {
            return Ok(out);
        };
        if align.generated.is_empty() {
            return Ok(out);
        }
        let gen: Vec<&Tensor> = align.generated.iter().map(|&g| &projections[g].k).collect();
        let target = ChannelStats::of(&gen)?;
        for &(slot, stats) in &align.anchors {
            let from = stats
                .get(self.step)
                .and_then(|s| s.get(layer - self.decoder_start))
                .ok_or_else(|| Error::Anchor(format!("no cached key statistics for step {}", self.step)))?;
            out.insert(slot, adain(&projections[slot].k, from, &target)?);
        }
        Ok(out)
    }
}

impl BatchAttentionHook for StepHook<'_> {
    fn layers(&self) -> Vec<usize> {
        self.layers.clone()
    }

    fn attend(&self, layer: usize, projections: &[LayerProjections]) -> Result<Vec<Tensor>> {
        use rayon::prelude::*;
        let aligned = self.aligned_keys(layer, projections)?;
        let key = |j: usize| aligned.get(&j).unwrap_or(&projections[j].k);
        (0..projections.len())
            .into_par_iter()
            .map(|i| {
                let own = &projections[i];
                match &self.targets[i] {
                    None => attention(&own.q, &own.k, &own.v, None),
                    Some(setup) => {
                        let q_van = &self.vanilla[i].self_attn[layer].q;
                        let q = blend_queries(&own.q, q_van, self.step, self.nu)?;
                        let blocks: Vec<(usize, &Tensor, &Tensor, BitMask)> = setup
                            .order
                            .iter()
                            .zip(&setup.blocks)
                            .map(|(&j, m)| (j, if j == i { &own.k } else { key(j) }, &projections[j].v, m.clone()))
                            .collect();
                        let bundle = SharedKVBundle::assemble(&blocks)?;
                        sdsa(&q, &bundle, &setup.mask)
                    }
                }
            })
            .collect()
    }

    fn rewrite_outputs(&self, _layer: usize, x_out: &mut [Tensor]) -> Result<()> {
        if self.plans.iter().all(Option::is_none) {
            return Ok(());
        }
        let original: Vec<Tensor> = x_out.to_vec();
        for (i, plan) in self.plans.iter().enumerate() {
            if let Some(plan) = plan {
                let sources: Vec<(usize, &Tensor)> = self.targets[i]
                    .as_ref()
                    .map(|s| s.order.iter().filter(|&&j| j != i).map(|&j| (j, &original[j])).collect())
                    .unwrap_or_default();
                x_out[i] = inject(&original[i], &sources, plan, self.alpha)?;
            }
        }
        Ok(())
    }
}

struct Engine<'a> {
    model: &'a DenoiserModel,
    slots: Vec<Slot<'a>>,
    protocol: Protocol,
    align: Option<Alignment<'a>>,
}

struct EngineOutput {
    latents: Vec<Tensor>,
    masks: Vec<BitMask>,
    steps: Vec<StepInfo>,
}

impl Engine<'_> {
    fn items<'z>(&'z self, zs: &'z [Tensor]) -> Vec<BatchItem<'z>> {
        self.slots
            .iter()
            .zip(zs)
            .map(|(s, z)| BatchItem { z, prompt: s.prompt })
            .collect()
    }

    fn advance(&self, k: usize, image: usize, z: &Tensor, eps: &Tensor) -> Result<Tensor> {
        let (t, t_prev) = self.protocol.grid[k];
        let schedule = self.model.schedule();
        let next = if self.protocol.ddpm {
            let noise = match &self.slots[image].noise {
                Noise::Fresh(seed) => step_noise(*seed, k, self.model.config()),
                Noise::Replay(maps) => maps
                    .get(k)
                    .cloned()
                    .ok_or_else(|| Error::Anchor(format!("no stored noise for step {k}")))?,
            };
            schedule.ddpm_step(z, eps, &noise, t, t_prev)?
        } else {
            schedule.ddim_step(z, eps, t, t_prev)?
        };
        if !next.all_finite() {
            return Err(Error::NonFinite("latent after sampler step".into()));
        }
        Ok(next)
    }

    fn guided(&self, image: usize, cond: &Tensor, uncond: &Tensor) -> Result<Tensor> {
        cfg(cond, uncond, self.slots[image].guidance)
    }

    /// Vanilla sweep down to the correspondence step; returns its features.
    fn feature_sweep(&self) -> Result<FeatureBank> {
        let mut zs: Vec<Tensor> = self.slots.iter().map(|s| s.z_init.clone()).collect();
        let layer = self.model.config().feature_layer();
        for k in 0..self.protocol.dift_step {
            let t = self.protocol.grid[k].0;
            let ctx = |e: Error| e.at_step(k, None);
            let cond = self.model.forward_batch(&self.items(&zs), t, false, None).map_err(ctx)?;
            let uncond = self.model.forward_batch(&self.items(&zs), t, true, None).map_err(ctx)?;
            for i in 0..zs.len() {
                let eps = self.guided(i, &cond[i].0, &uncond[i].0).map_err(|e| e.at_step(k, Some(i)))?;
                zs[i] = self.advance(k, i, &zs[i], &eps).map_err(|e| e.at_step(k, Some(i)))?;
            }
        }
        let t = self.protocol.grid[self.protocol.dift_step].0;
        let records = self
            .model
            .forward_batch(&self.items(&zs), t, false, None)
            .map_err(|e| e.at_step(self.protocol.dift_step, None))?;
        FeatureBank::new(records.into_iter().map(|(_, r)| r.features[layer].clone()).collect())
    }

    fn correspondences(&self, bank: &FeatureBank) -> Result<BTreeMap<(usize, usize), CorrespondenceMap>> {
        let mut out = BTreeMap::new();
        for (i, slot) in self.slots.iter().enumerate() {
            for &s in &slot.sources {
                out.insert((i, s), build_correspondence(bank, i, s)?);
            }
        }
        Ok(out)
    }

    fn record_cross_attention(&self, store: &mut CrossAttnStore, k: usize, records: &[(Tensor, ActivationRecord)]) -> Result<()> {
        for (i, (_, rec)) in records.iter().enumerate() {
            let subjects = &self.slots[i].prompt.subject_token_positions;
            for layer in 0..rec.cross_attn.len() {
                let maps: Vec<Vec<f64>> = subjects.iter().map(|pos| rec.subject_map(layer, pos)).collect();
                store.record_maps(i, k, layer, &maps).map_err(|e| e.at_step(k, Some(i)))?;
            }
        }
        Ok(())
    }

    fn union_masks_at(&self, store: &CrossAttnStore, k: Option<usize>, observer: &mut dyn RunObserver) -> Result<Vec<BitMask>> {
        (0..self.slots.len())
            .map(|i| {
                let n = self.slots[i].prompt.subject_token_positions.len();
                let subjects = (0..n)
                    .map(|s| store.compute_mask(i, s))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| e.at_step(k.unwrap_or(0), Some(i)))?;
                let refs: Vec<&BitMask> = subjects.iter().map(|m| &m.bits).collect();
                let union = union_masks(&refs)?;
                if let Some(k) = k {
                    observer.on_masks(k, i, &subjects, &union);
                }
                Ok(union)
            })
            .collect()
    }

    fn target_setups(&self, k: usize, masks: &[BitMask], observer: &mut dyn RunObserver) -> Result<Vec<Option<TargetSetup>>> {
        let p = self.model.config().patches();
        let mut out = Vec::with_capacity(self.slots.len());
        for (i, slot) in self.slots.iter().enumerate() {
            if slot.sources.is_empty() {
                out.push(None);
                continue;
            }
            // own block first, then sources in index order
            let mut order = vec![i];
            order.extend(slot.sources.iter().copied().filter(|&j| j != i));
            let blocks = order
                .iter()
                .map(|&j| {
                    if j == i {
                        Ok(BitMask::ones(p))
                    } else {
                        let mut rng = dropout_stream(self.protocol.run_seed, k, i, j);
                        dropout_mask(&masks[j], self.protocol.dropout_p, &mut rng)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<(usize, &BitMask)> = order.iter().copied().zip(&blocks).collect();
            let mask = build_extended_mask(i, p, &pairs).map_err(|e| e.at_step(k, Some(i)))?;
            observer.on_extended_mask(k, i, &order, &blocks, &mask);
            out.push(Some(TargetSetup { order, blocks, mask }));
        }
        Ok(out)
    }

    fn run(&self, observer: &mut dyn RunObserver) -> Result<EngineOutput> {
        let n = self.slots.len();
        let cfg = self.model.config();
        let sharing = self.protocol.consistent && self.slots.iter().any(|s| !s.sources.is_empty());
        let correspondences = if sharing && self.protocol.injection_used() {
            self.correspondences(&self.feature_sweep()?)?
        } else {
            BTreeMap::new()
        };
        let layers: Vec<usize> = cfg.decoder_layers().collect();
        let mut store = CrossAttnStore::new(cfg.patches());
        let mut zs: Vec<Tensor> = self.slots.iter().map(|s| s.z_init.clone()).collect();
        let mut steps = Vec::with_capacity(self.protocol.grid.len());

        for (k, &(t, t_prev)) in self.protocol.grid.iter().enumerate() {
            let fi_active = sharing && self.protocol.fi_active(t);
            let info = StepInfo {
                step: k,
                t,
                t_prev,
                nu: if sharing { self.protocol.nu.nu(k) } else { 0.0 },
                fi_active,
                dropout_stream: (k as u64) << 32,
            };
            observer.on_step(&info);
            steps.push(info);

            let ctx = |e: Error| e.at_step(k, None);
            let vanilla = self.model.forward_batch(&self.items(&zs), t, false, None).map_err(ctx)?;
            let uncond = self.model.forward_batch(&self.items(&zs), t, true, None).map_err(ctx)?;
            self.record_cross_attention(&mut store, k, &vanilla)?;
            let masks = self.union_masks_at(&store, Some(k), observer)?;

            let consistent = if sharing {
                let targets = self.target_setups(k, &masks, observer)?;
                let mut plans = vec![None; n];
                if fi_active {
                    for (i, slot) in self.slots.iter().enumerate() {
                        let maps: Vec<&CorrespondenceMap> =
                            slot.sources.iter().map(|&s| &correspondences[&(i, s)]).collect();
                        if maps.is_empty() {
                            continue;
                        }
                        let plan = select_from_maps(i, &masks[i], &maps).map_err(|e| e.at_step(k, Some(i)))?;
                        observer.on_injection(k, &plan);
                        plans[i] = Some(plan);
                    }
                }
                let records: Vec<ActivationRecord> = vanilla.iter().map(|(_, r)| r.clone()).collect();
                let hook = StepHook {
                    layers: layers.clone(),
                    decoder_start: layers[0],
                    step: k,
                    nu: &self.protocol.nu,
                    vanilla: &records,
                    targets: &targets,
                    align: self.align.as_ref(),
                    plans: &plans,
                    alpha: self.protocol.alpha,
                };
                Some(self.model.forward_batch(&self.items(&zs), t, false, Some(&hook)).map_err(ctx)?)
            } else {
                None
            };

            for i in 0..n {
                let cond = match &consistent {
                    Some(c) => &c[i].0,
                    None => &vanilla[i].0,
                };
                let eps = self.guided(i, cond, &uncond[i].0).map_err(|e| e.at_step(k, Some(i)))?;
                zs[i] = self.advance(k, i, &zs[i], &eps).map_err(|e| e.at_step(k, Some(i)))?;
            }
        }
        let masks = self.union_masks_at(&store, None, observer)?;
        Ok(EngineOutput {
            latents: zs,
            masks,
            steps,
        })
    }
}

/// Correspondence features of finished latents, taken at the bank timestep.
pub fn eval_bank(model: &DenoiserModel, latents: &[Tensor], prompts: &[PromptSpec], config: &GenerationConfig) -> Result<FeatureBank> {
    let grid = config.sampler.timesteps(TRAIN_TIMESTEPS)?;
    let t = grid[nearest_step(&grid, config.dift_t)].0;
    let items: Vec<BatchItem<'_>> = latents.iter().zip(prompts).map(|(z, prompt)| BatchItem { z, prompt }).collect();
    let layer = model.config().feature_layer();
    let records = model.forward_batch(&items, t, false, None)?;
    FeatureBank::new(records.into_iter().map(|(_, r)| r.features[layer].clone()).collect())
}

fn metric_summary(bank: &FeatureBank, masks: &[BitMask], side: usize) -> Result<MetricSummary> {
    Ok(MetricSummary {
        consistency: consistency_proxy(bank, masks)?.aggregate,
        displacement: displacement_diversity(bank, None, side)?.aggregate,
        displacement_masked: displacement_diversity(bank, Some(masks), side)?.aggregate,
    })
}

fn assemble_output(
    model: &DenoiserModel,
    kind: RunKind,
    config: GenerationConfig,
    anchors: Vec<usize>,
    out: EngineOutput,
) -> Result<RunOutput> {
    let bank = eval_bank(model, &out.latents, &config.prompts, &config)?;
    let metrics = metric_summary(&bank, &out.masks, config.denoiser.latent_side)?;
    let images = (0..out.latents.len())
        .map(|i| ImageRecord {
            index: i,
            prompt: config.prompts[i].text.clone(),
            seed: config.seeds[i],
            anchor: anchors.contains(&i),
            digest: latent_digest(&out.latents[i]),
            mask: out.masks[i].to_bit_string(),
        })
        .collect();
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        kind,
        config_hash: config.hash(),
        config,
        anchors,
        images,
        steps: out.steps,
        metrics: Some(metrics),
    };
    Ok(RunOutput {
        manifest,
        latents: out.latents,
        masks: out.masks,
        eval_bank: bank,
    })
}

pub fn generate(config: &GenerationConfig) -> Result<RunOutput> {
    generate_observed(config, &mut NoObserver)
}

pub fn generate_observed(config: &GenerationConfig, observer: &mut dyn RunObserver) -> Result<RunOutput> {
    config.validate()?;
    let model = DenoiserModel::new(config.denoiser.clone())?;
    let sources = config.sharing_sources();
    let slots = config
        .prompts
        .iter()
        .zip(&config.seeds)
        .zip(sources)
        .map(|((prompt, &seed), sources)| Slot {
            prompt,
            z_init: initial_latent(seed, &config.denoiser),
            guidance: config.guidance_scale,
            noise: Noise::Fresh(seed),
            sources,
        })
        .collect();
    let engine = Engine {
        model: &model,
        slots,
        protocol: Protocol::from_config(config)?,
        align: None,
    };
    let out = engine.run(observer)?;
    let anchors = config.anchor_indices();
    assemble_output(&model, RunKind::Generate, config.clone(), anchors, out)
}

/// Re-run a manifest with new prompts in the non-anchor slots (or the same
/// prompts when `new_prompts` is `None`). Anchor outputs must reproduce the
/// recorded digests exactly.
pub fn reuse_subject(manifest: &RunManifest, new_prompts: Option<Vec<PromptSpec>>) -> Result<RunOutput> {
    if manifest.kind != RunKind::Generate {
        return Err(Error::Anchor("only generated runs can be reused".into()));
    }
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Anchor("manifest config does not match its recorded hash".into()));
    }
    let anchors = manifest.config.anchor_indices();
    if anchors != manifest.anchors {
        return Err(Error::Anchor("manifest anchor list does not match its config".into()));
    }
    let mut config = manifest.config.clone();
    if let Some(prompts) = new_prompts {
        let slots: Vec<usize> = (0..config.prompts.len()).filter(|i| !anchors.contains(i)).collect();
        if prompts.len() != slots.len() {
            return Err(Error::Anchor(format!(
                "{} new prompts for {} non-anchor slots",
                prompts.len(),
                slots.len()
            )));
        }
        for (slot, p) in slots.into_iter().zip(prompts) {
            config.prompts[slot] = p;
        }
    }
    let out = generate(&config)?;
    for &a in &anchors {
        let (old, new) = (&manifest.images[a].digest, &out.manifest.images[a].digest);
        if old != new {
            return Err(Error::Anchor(format!("anchor {a} digest {new} differs from recorded {old}")));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// inversion and personalization

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: u32,
    pub guidance_scale: f64,
    /// Seed of the forward-noising draws.
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            guidance_scale: 2.0,
            seed: 0,
        }
    }
}

/// A real latent expressed as a replayable DDPM trajectory.
#[derive(Debug, Clone)]
pub struct InvertedAnchor {
    pub z0: Tensor,
    pub prompt: PromptSpec,
    pub config: InversionConfig,
    /// Latent at `t = T` that the replay starts from.
    pub z_start: Tensor,
    /// Noise map per sampler step.
    pub noise_maps: Vec<Tensor>,
    /// Self-attention key statistics, `[step][decoder layer]`.
    pub key_stats: Vec<Vec<ChannelStats>>,
}

impl InvertedAnchor {
    /// Run the sampler with the stored noise maps.
    pub fn replay(&self, model: &DenoiserModel) -> Result<Tensor> {
        let grid = Sampler::Ddpm { steps: self.config.steps }.timesteps(TRAIN_TIMESTEPS)?;
        let mut z = self.z_start.clone();
        for (k, &(t, t_prev)) in grid.iter().enumerate() {
            let eps = guided_eps(model, &z, t, &self.prompt, self.config.guidance_scale)?.0;
            z = model.schedule().ddpm_step(&z, &eps, &self.noise_maps[k], t, t_prev)?;
        }
        Ok(z)
    }
}

fn guided_eps(model: &DenoiserModel, z: &Tensor, t: u32, prompt: &PromptSpec, scale: f64) -> Result<(Tensor, ActivationRecord)> {
    let (cond, record) = model.forward(z, t, prompt, false, None)?;
    let (uncond, _) = model.forward(z, t, prompt, true, None)?;
    Ok((cfg(&cond, &uncond, scale)?, record))
}

/// Edit-friendly DDPM inversion: noise `z0` independently to every grid
/// timestep, then solve each reverse step for the noise map that lands
/// exactly on the next trajectory point.
pub fn invert_anchor(model: &DenoiserModel, z0: &Tensor, prompt: &PromptSpec, config: &InversionConfig) -> Result<InvertedAnchor> {
    if !z0.all_finite() {
        return Err(Error::NonFinite("latent to invert".into()));
    }
    let dc = model.config();
    if z0.shape() != [dc.patches(), dc.latent_channels] {
        return Err(Error::Shape(format!("latent {:?} for a {}×{} model", z0.shape(), dc.patches(), dc.latent_channels)));
    }
    let grid = Sampler::Ddpm { steps: config.steps }.timesteps(TRAIN_TIMESTEPS)?;
    let schedule = model.schedule();
    // trajectory[k] is the latent at grid[k].0; the last entry is z0 itself
    let mut trajectory = Vec::with_capacity(grid.len() + 1);
    for (k, &(t, _)) in grid.iter().enumerate() {
        let noise = gaussian_latent(config.seed, k as u64, dc.patches(), dc.latent_channels);
        trajectory.push(schedule.add_noise(z0, &noise, t)?);
    }
    trajectory.push(z0.clone());

    let layers: Vec<usize> = dc.decoder_layers().collect();
    let mut noise_maps = Vec::with_capacity(grid.len());
    let mut key_stats = Vec::with_capacity(grid.len());
    for (k, &(t, t_prev)) in grid.iter().enumerate() {
        let (eps, record) = guided_eps(model, &trajectory[k], t, prompt, config.guidance_scale).map_err(|e| e.at_step(k, None))?;
        let mean = schedule.ddpm_mean(&trajectory[k], &eps, t, t_prev)?;
        let sigma = schedule.ddpm_sigma(t, t_prev)?;
        let u = trajectory[k + 1].sub(&mean)?.scaled(1.0 / sigma);
        if !u.all_finite() {
            return Err(Error::NonFinite(format!("noise map at step {k}")));
        }
        noise_maps.push(u);
        key_stats.push(
            layers
                .iter()
                .map(|&l| ChannelStats::of(&[&record.self_attn[l].k]))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(InvertedAnchor {
        z0: z0.clone(),
        prompt: prompt.clone(),
        config: config.clone(),
        z_start: trajectory[0].clone(),
        noise_maps,
        key_stats,
    })
}

/// Generate `config.prompts` around two inverted anchors. Anchors replay
/// their own trajectories untouched; generated images attend to the
/// anchors' subject patches, whose keys are aligned to the generated
/// images' key statistics.
pub fn personalize(anchors: &[InvertedAnchor], config: &GenerationConfig) -> Result<RunOutput> {
    personalize_observed(anchors, config, &mut NoObserver)
}

pub fn personalize_observed(anchors: &[InvertedAnchor], config: &GenerationConfig, observer: &mut dyn RunObserver) -> Result<RunOutput> {
    if anchors.len() != 2 {
        return Err(Error::Anchor(format!("personalization takes 2 inverted anchors, got {}", anchors.len())));
    }
    config.validate_common()?;
    let steps = match config.sampler {
        Sampler::Ddpm { steps } => steps,
        Sampler::Ddim { .. } => return Err(Error::Config("personalization needs the DDPM sampler".into())),
    };
    for (i, a) in anchors.iter().enumerate() {
        if a.config.steps != steps || a.noise_maps.len() != steps as usize {
            return Err(Error::Anchor(format!(
                "anchor {i} was inverted with {} steps, sampler has {steps}",
                a.config.steps
            )));
        }
    }
    let model = DenoiserModel::new(config.denoiser.clone())?;
    let n_gen = config.prompts.len();
    let mut slots = Vec::with_capacity(2 + n_gen);
    for a in anchors {
        slots.push(Slot {
            prompt: &a.prompt,
            z_init: a.z_start.clone(),
            guidance: a.config.guidance_scale,
            noise: Noise::Replay(&a.noise_maps),
            sources: Vec::new(),
        });
    }
    for (p, &seed) in config.prompts.iter().zip(&config.seeds) {
        slots.push(Slot {
            prompt: p,
            z_init: initial_latent(seed, &config.denoiser),
            guidance: config.guidance_scale,
            noise: Noise::Fresh(seed),
            sources: vec![0, 1],
        });
    }
    let align = Alignment {
        anchors: anchors.iter().enumerate().map(|(i, a)| (i, a.key_stats.as_slice())).collect(),
        generated: (2..2 + n_gen).collect(),
    };
    let engine = Engine {
        model: &model,
        slots,
        protocol: Protocol::from_config(config)?,
        align: Some(align),
    };
    let out = engine.run(observer)?;

    let mut full = config.clone();
    full.prompts = anchors.iter().map(|a| a.prompt.clone()).chain(config.prompts.iter().cloned()).collect();
    full.seeds = anchors.iter().map(|a| a.config.seed).chain(config.seeds.iter().copied()).collect();
    full.anchors = Anchors::Indices(vec![0, 1]);
    assemble_output(&model, RunKind::Personalize, full, vec![0, 1], out)
}

// ---------------------------------------------------------------------------
// run directories

/// `manifest.json`, `latents/NN.cstl`, `previews/NN.png`, `masks/NN.pgm`
/// and an empty `reports/`.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    let side = out.manifest.config.denoiser.latent_side;
    for sub in ["latents", "previews", "masks", "reports"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    for (i, z) in out.latents.iter().enumerate() {
        write_latent(&dir.join(format!("latents/{i:02}.cstl")), z)?;
        write_preview(&dir.join(format!("previews/{i:02}.png")), z, side)?;
        write_mask_pgm(&out.masks[i], side, &dir.join(format!("masks/{i:02}.pgm")))?;
    }
    std::fs::write(dir.join("manifest.json"), out.manifest.to_json()?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    RunManifest::from_json(&std::fs::read_to_string(dir.join("manifest.json"))?)
}

/// Manifest plus latents, with digests checked against the manifest.
pub fn read_run(dir: &Path) -> Result<(RunManifest, Vec<Tensor>)> {
    let manifest = read_manifest(dir)?;
    let latents = (0..manifest.images.len())
        .map(|i| read_latent(&dir.join(format!("latents/{i:02}.cstl"))))
        .collect::<Result<Vec<_>>>()?;
    for (rec, z) in manifest.images.iter().zip(&latents) {
        if latent_digest(z) != rec.digest {
            return Err(Error::Format(format!("latent {} does not match its manifest digest", rec.index)));
        }
    }
    Ok((manifest, latents))
}

/// Metrics of a stored run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub consistency: ConsistencyReport,
    pub diversity: DiversityReport,
    pub diversity_masked: DiversityReport,
}

pub fn evaluate_run(manifest: &RunManifest, latents: &[Tensor]) -> Result<EvalSummary> {
    let model = DenoiserModel::new(manifest.config.denoiser.clone())?;
    let bank = eval_bank(&model, latents, &manifest.config.prompts, &manifest.config)?;
    let masks = manifest.masks()?;
    let side = manifest.config.denoiser.latent_side;
    Ok(EvalSummary {
        consistency: consistency_proxy(&bank, &masks)?,
        diversity: displacement_diversity(&bank, None, side)?,
        diversity_masked: displacement_diversity(&bank, Some(&masks), side)?,
    })
}
