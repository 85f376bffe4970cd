//! Deterministic toy diffusion denoiser.
//!
//! The network is small but has every hook point the consistency mechanisms
//! need: alternating cross-attention (prompt tokens) and self-attention
//! blocks, an explicit output projection `W_O` per self-attention block, and
//! a designated set of trailing "decoder" self-attention layers.
//!
//! Weights are fixed Gaussian draws from `weight_seed`; nothing is trained.
//! The final linear head predicts the clean latent, which is converted to an
//! ε prediction through the noise schedule so that sampling stays bounded.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{attention, layer_norm_rows, BitMask, Tensor};
use crate::schedule::NoiseSchedule;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Patches per side; `P = latent_side²`.
    pub latent_side: usize,
    /// Channels of the latent being denoised.
    pub latent_channels: usize,
    /// Hidden feature width `d`.
    pub channels: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_self_layers: usize,
    /// The last `n_decoder_layers` self-attention blocks are decoder layers.
    pub n_decoder_layers: usize,
    pub vocab_size: usize,
    pub token_dim: usize,
    pub weight_seed: u64,
    /// Gain on `W_Q`/`W_K`; larger values give sharper self-attention.
    pub qk_gain: f64,
    /// Correlation between `W_Q` and `W_K`. Positive values make patches
    /// with similar features attend to each other.
    pub qk_correlation: f64,
    /// Layer whose normalized input serves as the correspondence feature map.
    /// Defaults to the first decoder layer.
    pub feature_layer: Option<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_side: 16,
            latent_channels: 4,
            channels: 32,
            d_k: 32,
            d_v: 32,
            n_self_layers: 4,
            n_decoder_layers: 2,
            vocab_size: 1024,
            token_dim: 32,
            weight_seed: 0,
            qk_gain: 1.5,
            qk_correlation: 0.7,
            feature_layer: None,
        }
    }
}

impl DenoiserConfig {
    pub fn patches(&self) -> usize {
        self.latent_side * self.latent_side
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("latent_side", self.latent_side),
            ("latent_channels", self.latent_channels),
            ("channels", self.channels),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("n_self_layers", self.n_self_layers),
            ("vocab_size", self.vocab_size),
            ("token_dim", self.token_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.n_decoder_layers > self.n_self_layers {
            return Err(Error::Config(format!(
                "n_decoder_layers {} exceeds n_self_layers {}",
                self.n_decoder_layers, self.n_self_layers
            )));
        }
        if !(-1.0..=1.0).contains(&self.qk_correlation) || !self.qk_gain.is_finite() {
            return Err(Error::Config("qk_correlation must lie in [-1, 1]".into()));
        }
        if let Some(l) = self.feature_layer {
            if l >= self.n_self_layers {
                return Err(Error::Config(format!("feature_layer {l} out of range")));
            }
        }
        Ok(())
    }

    pub fn decoder_layers(&self) -> std::ops::Range<usize> {
        self.n_self_layers - self.n_decoder_layers..self.n_self_layers
    }

    pub fn is_decoder_layer(&self, layer: usize) -> bool {
        self.decoder_layers().contains(&layer)
    }

    pub fn feature_layer(&self) -> usize {
        self.feature_layer
            .unwrap_or(self.n_self_layers - self.n_decoder_layers.max(1))
    }
}

/// Tokenized prompt plus the token positions of each subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    #[serde(default)]
    pub text: String,
    pub token_ids: Vec<usize>,
    /// One entry per subject; each lists the token positions naming it.
    pub subject_token_positions: Vec<Vec<usize>>,
}

impl PromptSpec {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.token_ids.is_empty() {
            return Err(Error::InvalidArgument("prompt has no tokens".into()));
        }
        if let Some(id) = self.token_ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {id} >= vocab {vocab_size}")));
        }
        for (s, positions) in self.subject_token_positions.iter().enumerate() {
            if positions.is_empty() {
                return Err(Error::InvalidArgument(format!("subject {s} has no tokens")));
            }
            if let Some(p) = positions.iter().find(|&&p| p >= self.token_ids.len()) {
                return Err(Error::InvalidArgument(format!(
                    "subject {s} position {p} outside {} tokens",
                    self.token_ids.len()
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer self-attention inputs for one image.
#[derive(Debug, Clone)]
pub struct LayerProjections {
    /// Layer-normalized input features (`P × d`).
    pub input: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone)]
pub struct SelfAttnActivations {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// `h · W_O`, after any output rewrite, before the residual add.
    pub x_out: Tensor,
}

/// Everything a forward pass exposes.
#[derive(Debug, Clone, Default)]
pub struct ActivationRecord {
    pub self_attn: Vec<SelfAttnActivations>,
    /// Per cross-attention layer, a `P × n_tokens` map; every row sums to 1.
    pub cross_attn: Vec<Tensor>,
    /// Per self-attention layer, its normalized input (`P × d`).
    pub features: Vec<Tensor>,
}

impl ActivationRecord {
    /// Map of one token over patches.
    pub fn token_map(&self, layer: usize, token: usize) -> Vec<f64> {
        let m = &self.cross_attn[layer];
        (0..m.rows()).map(|p| m.row(p)[token]).collect()
    }

    /// Mean of the token maps naming one subject.
    pub fn subject_map(&self, layer: usize, positions: &[usize]) -> Vec<f64> {
        let m = &self.cross_attn[layer];
        let n = positions.len() as f64;
        (0..m.rows())
            .map(|p| {
                let row = m.row(p);
                positions.iter().map(|&j| row[j]).sum::<f64>() / n
            })
            .collect()
    }
}

/// Extended keys/values and the admissibility mask over them.
#[derive(Debug, Clone)]
pub struct ExtendedKv {
    pub k_plus: Tensor,
    pub v_plus: Tensor,
    pub mask: BitMask,
}

/// Callbacks that rewrite self-attention in a single-image forward.
pub trait AttentionHook {
    fn kv_provider(&self, _layer: usize, _own: &LayerProjections) -> Result<Option<ExtendedKv>> {
        Ok(None)
    }

    fn query_transform(&self, _layer: usize, _q: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }

    fn output_transform(&self, _layer: usize, _x_out: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

/// Hook plus the decoder layers it applies to.
pub struct AttentionOverride<'a> {
    pub layers: Vec<usize>,
    pub hook: &'a dyn AttentionHook,
}

/// Batch-level self-attention rewrite, run in lockstep across images.
///
/// At each hooked layer the model first computes every image's projections,
/// then hands them all to [`attend`](Self::attend). The returned attention
/// outputs are projected by `W_O` and passed to
/// [`rewrite_outputs`](Self::rewrite_outputs) before the residual add.
pub trait BatchAttentionHook: Sync {
    fn layers(&self) -> Vec<usize>;

    fn attend(&self, layer: usize, projections: &[LayerProjections]) -> Result<Vec<Tensor>>;

    fn rewrite_outputs(&self, _layer: usize, _x_out: &mut [Tensor]) -> Result<()> {
        Ok(())
    }
}

pub struct BatchItem<'a> {
    pub z: &'a Tensor,
    pub prompt: &'a PromptSpec,
}

#[derive(Debug, Clone)]
struct SelfAttnWeights {
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
}

#[derive(Debug, Clone)]
struct CrossAttnWeights {
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    w_in: Tensor,
    positional: Tensor,
    w_time: Tensor,
    token_embedding: Tensor,
    null_embedding: Tensor,
    cross: Vec<CrossAttnWeights>,
    selfs: Vec<SelfAttnWeights>,
    w_head: Tensor,
}

struct ForwardState {
    x: Tensor,
    tokens: Tensor,
    record: ActivationRecord,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * std
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape is consistent by construction")
}

/// Sinusoidal embedding of a scalar position into `dim` features.
fn sinusoid(pos: f64, dim: usize, base: f64, out: &mut [f64]) {
    let half = dim.div_ceil(2);
    for i in 0..half {
        let freq = base.powf(-(i as f64) / half as f64);
        out[2 * i] = (pos * freq).sin();
        if 2 * i + 1 < dim {
            out[2 * i + 1] = (pos * freq).cos();
        }
    }
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.weight_seed);
        let d = config.channels;
        let side = config.latent_side;
        let p = config.patches();

        let w_in = gaussian(&mut rng, config.latent_channels, d, 1.0 / (config.latent_channels as f64).sqrt());
        let w_time = gaussian(&mut rng, d, d, 1.0 / (d as f64).sqrt());
        let token_embedding = gaussian(&mut rng, config.vocab_size, config.token_dim, 1.0);
        let null_embedding = gaussian(&mut rng, 1, config.token_dim, 1.0);

        let mut cross = Vec::with_capacity(config.n_self_layers);
        let mut selfs = Vec::with_capacity(config.n_self_layers);
        let inv_d = 1.0 / (d as f64).sqrt();
        for _ in 0..config.n_self_layers {
            cross.push(CrossAttnWeights {
                w_q: gaussian(&mut rng, d, config.d_k, inv_d),
                w_k: gaussian(&mut rng, config.token_dim, config.d_k, 1.0 / (config.token_dim as f64).sqrt()),
                w_v: gaussian(&mut rng, config.token_dim, d, 1.0 / (config.token_dim as f64).sqrt()),
                w_o: gaussian(&mut rng, d, d, 0.5 * inv_d),
            });
            let w_q = gaussian(&mut rng, d, config.d_k, config.qk_gain * inv_d);
            let noise = gaussian(&mut rng, d, config.d_k, config.qk_gain * inv_d);
            let rho = config.qk_correlation;
            let mix = (1.0 - rho * rho).sqrt();
            let data = w_q
                .data()
                .iter()
                .zip(noise.data())
                .map(|(q, n)| rho * q + mix * n)
                .collect();
            let w_k = Tensor::matrix(d, config.d_k, data)?;
            selfs.push(SelfAttnWeights {
                w_q,
                w_k,
                w_v: gaussian(&mut rng, d, config.d_v, inv_d),
                w_o: gaussian(&mut rng, config.d_v, d, inv_d),
            });
        }
        let w_head = gaussian(&mut rng, d, config.latent_channels, inv_d);

        let mut positional = Tensor::zeros(vec![p, d]);
        let half = d / 2;
        for r in 0..side {
            for c in 0..side {
                let row = positional.row_mut(r * side + c);
                sinusoid(r as f64, half, side as f64 * 4.0, &mut row[..half]);
                sinusoid(c as f64, d - half, side as f64 * 4.0, &mut row[half..]);
            }
        }

        Ok(Self {
            config,
            schedule: NoiseSchedule::default(),
            w_in,
            positional,
            w_time,
            token_embedding,
            null_embedding,
            cross,
            selfs,
            w_head,
        })
    }

    /// A model whose every weight is zero (positional table kept).
    pub fn zeroed(config: DenoiserConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        let zero = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        zero(&mut m.w_in);
        zero(&mut m.w_time);
        zero(&mut m.token_embedding);
        zero(&mut m.null_embedding);
        zero(&mut m.w_head);
        for c in &mut m.cross {
            for t in [&mut c.w_q, &mut c.w_k, &mut c.w_v, &mut c.w_o] {
                zero(t);
            }
        }
        for s in &mut m.selfs {
            for t in [&mut s.w_q, &mut s.w_k, &mut s.w_v, &mut s.w_o] {
                zero(t);
            }
        }
        Ok(m)
    }

    /// Zero `W_O` of one self-attention layer, turning that block into the identity.
    pub fn zero_output_projection(&mut self, layer: usize) {
        self.selfs[layer].w_o.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Flat view of every weight, for equality checks.
    pub fn weight_fingerprint(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in [&self.w_in, &self.w_time, &self.token_embedding, &self.null_embedding, &self.w_head] {
            out.extend_from_slice(t.data());
        }
        for c in &self.cross {
            for t in [&c.w_q, &c.w_k, &c.w_v, &c.w_o] {
                out.extend_from_slice(t.data());
            }
        }
        for s in &self.selfs {
            for t in [&s.w_q, &s.w_k, &s.w_v, &s.w_o] {
                out.extend_from_slice(t.data());
            }
        }
        out
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let want = [self.config.patches(), self.config.latent_channels];
        if z.shape() != want {
            return Err(Error::Shape(format!("latent {:?}, expected {want:?}", z.shape())));
        }
        if !z.all_finite() {
            return Err(Error::NonFinite("latent".into()));
        }
        Ok(())
    }

    fn begin(&self, z: &Tensor, t: u32, prompt: &PromptSpec, guidance_null: bool) -> Result<ForwardState> {
        self.check_latent(z)?;
        if t > self.schedule.max_timestep() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside schedule")));
        }
        let tokens = if guidance_null {
            self.null_embedding.clone()
        } else {
            prompt.validate(self.config.vocab_size)?;
            self.token_embedding.gather_rows(&prompt.token_ids)
        };

        let d = self.config.channels;
        let mut time = vec![0.0; d];
        sinusoid(t as f64, d, 10_000.0, &mut time);
        let time = Tensor::matrix(1, d, time)?.matmul(&self.w_time)?;

        let mut x = z.matmul(&self.w_in)?;
        x.add_assign(&self.positional)?;
        for p in 0..x.rows() {
            for (v, &e) in x.row_mut(p).iter_mut().zip(time.data()) {
                *v += e;
            }
        }
        Ok(ForwardState {
            x,
            tokens,
            record: ActivationRecord::default(),
        })
    }

    fn cross_block(&self, layer: usize, st: &mut ForwardState) -> Result<()> {
        let w = &self.cross[layer];
        let normed = layer_norm_rows(&st.x, LN_EPS);
        let q = normed.matmul(&w.w_q)?;
        let k = st.tokens.matmul(&w.w_k)?;
        let v = st.tokens.matmul(&w.w_v)?;
        let maps = crate::numerics::attention_weights(&q, &k, None)?;
        let out = maps.matmul(&v)?.matmul(&w.w_o)?;
        st.x.add_assign(&out)?;
        st.record.cross_attn.push(maps);
        Ok(())
    }

    fn projections(&self, layer: usize, st: &ForwardState) -> Result<LayerProjections> {
        let w = &self.selfs[layer];
        let input = layer_norm_rows(&st.x, LN_EPS);
        Ok(LayerProjections {
            q: input.matmul(&w.w_q)?,
            k: input.matmul(&w.w_k)?,
            v: input.matmul(&w.w_v)?,
            input,
        })
    }

    fn project_output(&self, layer: usize, h: &Tensor) -> Result<Tensor> {
        if h.shape() != [self.config.patches(), self.config.d_v] {
            return Err(Error::Shape(format!("attention output {:?}", h.shape())));
        }
        h.matmul(&self.selfs[layer].w_o)
    }

    fn finish_layer(&self, st: &mut ForwardState, proj: LayerProjections, x_out: Tensor) -> Result<()> {
        st.x.add_assign(&x_out)?;
        st.record.features.push(proj.input);
        st.record.self_attn.push(SelfAttnActivations {
            q: proj.q,
            k: proj.k,
            v: proj.v,
            x_out,
        });
        Ok(())
    }

    fn head(&self, st: &ForwardState, z: &Tensor, t: u32) -> Result<Tensor> {
        let x0 = layer_norm_rows(&st.x, LN_EPS).matmul(&self.w_head)?;
        self.schedule.eps_from_x0(z, &x0, t)
    }

    fn check_override_layers(&self, layers: &[usize]) -> Result<()> {
        match layers.iter().find(|&&l| !self.config.is_decoder_layer(l)) {
            Some(&l) => Err(Error::NotDecoderLayer(l)),
            None => Ok(()),
        }
    }

    /// One denoiser evaluation, optionally with rewritten self-attention.
    pub fn forward(
        &self,
        z: &Tensor,
        t: u32,
        prompt: &PromptSpec,
        guidance_null: bool,
        overrides: Option<&AttentionOverride<'_>>,
    ) -> Result<(Tensor, ActivationRecord)> {
        if let Some(o) = overrides {
            self.check_override_layers(&o.layers)?;
        }
        let mut st = self.begin(z, t, prompt, guidance_null)?;
        for layer in 0..self.config.n_self_layers {
            self.cross_block(layer, &mut st)?;
            let proj = self.projections(layer, &st)?;
            let hook = overrides.filter(|o| o.layers.contains(&layer)).map(|o| o.hook);
            let x_out = match hook {
                None => self.project_output(layer, &attention(&proj.q, &proj.k, &proj.v, None)?)?,
                Some(hook) => {
                    let q = hook.query_transform(layer, &proj.q)?.unwrap_or_else(|| proj.q.clone());
                    let h = match hook.kv_provider(layer, &proj)? {
                        Some(ext) => attention(&q, &ext.k_plus, &ext.v_plus, Some(&ext.mask))?,
                        None => attention(&q, &proj.k, &proj.v, None)?,
                    };
                    let x_out = self.project_output(layer, &h)?;
                    hook.output_transform(layer, &x_out)?.unwrap_or(x_out)
                }
            };
            self.finish_layer(&mut st, proj, x_out)?;
        }
        let eps = self.head(&st, z, t)?;
        Ok((eps, st.record))
    }

    /// Forward a batch in layer lockstep so a hook can share attention
    /// across images. Without a hook each output equals [`forward`](Self::forward).
    pub fn forward_batch(
        &self,
        items: &[BatchItem<'_>],
        t: u32,
        guidance_null: bool,
        hook: Option<&dyn BatchAttentionHook>,
    ) -> Result<Vec<(Tensor, ActivationRecord)>> {
        let hooked = hook.map(|h| h.layers()).unwrap_or_default();
        self.check_override_layers(&hooked)?;
        let mut states = items
            .par_iter()
            .map(|it| self.begin(it.z, t, it.prompt, guidance_null))
            .collect::<Result<Vec<_>>>()?;

        for layer in 0..self.config.n_self_layers {
            let projections = states
                .par_iter_mut()
                .map(|st| {
                    self.cross_block(layer, st)?;
                    self.projections(layer, st)
                })
                .collect::<Result<Vec<_>>>()?;

            let mut outputs = match hook.filter(|_| hooked.contains(&layer)) {
                Some(h) => {
                    let hs = h.attend(layer, &projections)?;
                    if hs.len() != items.len() {
                        return Err(Error::Shape(format!(
                            "hook returned {} outputs for {} images",
                            hs.len(),
                            items.len()
                        )));
                    }
                    let mut outs = hs
                        .par_iter()
                        .map(|h| self.project_output(layer, h))
                        .collect::<Result<Vec<_>>>()?;
                    h.rewrite_outputs(layer, &mut outs)?;
                    outs
                }
                None => projections
                    .par_iter()
                    .map(|p| self.project_output(layer, &attention(&p.q, &p.k, &p.v, None)?))
                    .collect::<Result<Vec<_>>>()?,
            };

            states
                .par_iter_mut()
                .zip(projections.into_par_iter())
                .zip(outputs.par_drain(..))
                .try_for_each(|((st, proj), x_out)| self.finish_layer(st, proj, x_out))?;
        }

        states
            .into_par_iter()
            .zip(items.par_iter())
            .map(|(st, it)| Ok((self.head(&st, it.z, t)?, st.record)))
            .collect()
    }

    /// Correspondence features: the normalized input of `layer` (a decoder layer).
    pub fn extract_features(&self, z: &Tensor, t: u32, prompt: &PromptSpec, layer: usize) -> Result<Tensor> {
        if !self.config.is_decoder_layer(layer) {
            return Err(Error::NotDecoderLayer(layer));
        }
        let (_, record) = self.forward(z, t, prompt, false, None)?;
        Ok(record.features[layer].clone())
    }
}
