//! Subject-driven shared self-attention and its two diversity controls.
//!
//! A target image's queries attend to an extended key set: all of its own
//! patches plus the subject patches of its source images. Masked keys get an
//! additive `-1e30` logit, so their attention weight is exactly zero.
//! Subject bits are thinned by a per-step random dropout, and early in
//! sampling the queries are blended toward the vanilla pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{attention, attention_weights, lerp, BitMask, Tensor};

/// Extended keys/values gathered from an ordered list of source images.
#[derive(Debug, Clone)]
pub struct SharedKVBundle {
    pub source_images: Vec<usize>,
    pub k_plus: Tensor,
    pub v_plus: Tensor,
    /// One mask per source, each of length `P`.
    pub masks: Vec<BitMask>,
}

impl SharedKVBundle {
    /// Stack `(image, K, V, mask)` blocks in the given order.
    pub fn assemble(blocks: &[(usize, &Tensor, &Tensor, BitMask)]) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::InvalidArgument("bundle with no sources".into()))?;
        let p = first.1.rows();
        for (img, k, v, m) in blocks {
            if k.rows() != p || v.rows() != p || m.len() != p {
                return Err(Error::Shape(format!(
                    "bundle block for image {img}: K {:?}, V {:?}, mask {} (P = {p})",
                    k.shape(),
                    v.shape(),
                    m.len()
                )));
            }
        }
        let ks: Vec<&Tensor> = blocks.iter().map(|b| b.1).collect();
        let vs: Vec<&Tensor> = blocks.iter().map(|b| b.2).collect();
        Ok(Self {
            source_images: blocks.iter().map(|b| b.0).collect(),
            k_plus: Tensor::vstack(&ks)?,
            v_plus: Tensor::vstack(&vs)?,
            masks: blocks.iter().map(|b| b.3.clone()).collect(),
        })
    }

    pub fn patches(&self) -> usize {
        self.masks.first().map_or(0, BitMask::len)
    }

    /// Extended mask for `self_image`: its own block is all ones, every
    /// other block carries that source's (dropped) subject bits.
    pub fn extended_mask(&self, self_image: usize) -> Result<BitMask> {
        let p = self.patches();
        let ones = BitMask::ones(p);
        let sources: Vec<(usize, &BitMask)> = self
            .source_images
            .iter()
            .zip(&self.masks)
            .map(|(&img, m)| (img, if img == self_image { &ones } else { m }))
            .collect();
        build_extended_mask(self_image, p, &sources)
    }
}

/// Linear decay of the query-blend weight over the first sampler steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuSchedule {
    pub n_blend_steps: usize,
    pub nu_start: f64,
    pub nu_end: f64,
}

impl Default for NuSchedule {
    fn default() -> Self {
        Self {
            n_blend_steps: 5,
            nu_start: 0.9,
            nu_end: 0.8,
        }
    }
}

impl NuSchedule {
    /// Blending switched off.
    pub fn disabled() -> Self {
        Self {
            n_blend_steps: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.nu_end && self.nu_end <= self.nu_start && self.nu_start <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "nu schedule needs 0 <= nu_end <= nu_start <= 1, got {} -> {}",
                self.nu_start, self.nu_end
            )))
        }
    }

    pub fn nu(&self, step_index: usize) -> f64 {
        if step_index >= self.n_blend_steps {
            return 0.0;
        }
        if self.n_blend_steps == 1 {
            return self.nu_start;
        }
        let frac = step_index as f64 / (self.n_blend_steps - 1) as f64;
        // written as a lerp so both endpoints are exact
        (1.0 - frac) * self.nu_start + frac * self.nu_end
    }
}

/// Zero each set bit independently with probability `p`.
pub fn dropout_mask<R: Rng + ?Sized>(mask: &BitMask, p: f64, rng: &mut R) -> Result<BitMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0,1]")));
    }
    let bits = mask
        .bits()
        .iter()
        .map(|&b| b && rng.random::<f64>() >= p)
        .collect();
    BitMask::new(bits)
}

/// Random stream for the dropout applied between `target` and `source`
/// during sampler step `step`.
///
/// The stream depends on the unordered pair, so two images with identical
/// inputs drop identical bits from each other and stay identical.
pub fn dropout_stream(run_seed: u64, step: usize, target: usize, source: usize) -> ChaCha8Rng {
    let (lo, hi) = (target.min(source) as u64, target.max(source) as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(((step as u64) << 32) | ((lo & 0xffff) << 16) | (hi & 0xffff));
    rng
}

/// Concatenate per-source masks in source order; the target's own block
/// must be all ones.
pub fn build_extended_mask(self_image: usize, query_p: usize, sources: &[(usize, &BitMask)]) -> Result<BitMask> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("extended mask with no sources".into()));
    }
    for (img, m) in sources {
        if m.len() != query_p {
            return Err(Error::Shape(format!(
                "mask for image {img} has {} bits, expected {query_p}",
                m.len()
            )));
        }
        if *img == self_image && !m.is_all_ones() {
            return Err(Error::InvalidArgument(format!(
                "own block of image {self_image} must be all ones"
            )));
        }
    }
    let parts: Vec<&BitMask> = sources.iter().map(|(_, m)| *m).collect();
    BitMask::concat(&parts)
}

fn check_sdsa(q: &Tensor, bundle: &SharedKVBundle, m_plus: &BitMask) -> Result<()> {
    if m_plus.len() != bundle.k_plus.rows() {
        return Err(Error::Shape(format!(
            "extended mask of {} bits for {} keys",
            m_plus.len(),
            bundle.k_plus.rows()
        )));
    }
    if q.cols() != bundle.k_plus.cols() {
        return Err(Error::Shape(format!("queries {:?} vs keys {:?}", q.shape(), bundle.k_plus.shape())));
    }
    Ok(())
}

/// `softmax(Q K⁺ᵀ/√d_k + log M⁺)·V⁺`.
pub fn sdsa(q: &Tensor, bundle: &SharedKVBundle, m_plus: &BitMask) -> Result<Tensor> {
    check_sdsa(q, bundle, m_plus)?;
    attention(q, &bundle.k_plus, &bundle.v_plus, Some(m_plus))
}

/// The attention matrix `A⁺` behind [`sdsa`].
pub fn sdsa_weights(q: &Tensor, bundle: &SharedKVBundle, m_plus: &BitMask) -> Result<Tensor> {
    check_sdsa(q, bundle, m_plus)?;
    attention_weights(q, &bundle.k_plus, Some(m_plus))
}

/// `(1 − ν)·Q_sdsa + ν·Q_vanilla` with `ν` taken from the schedule.
pub fn blend_queries(q_sdsa: &Tensor, q_vanilla: &Tensor, step_index: usize, sched: &NuSchedule) -> Result<Tensor> {
    lerp(q_sdsa, q_vanilla, sched.nu(step_index))
}

/// Per-channel (column) mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population statistics over all rows of all given tensors.
    pub fn of(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("channel statistics of nothing".into()))?;
        let c = first.cols();
        let mut n = 0usize;
        let mut mean = vec![0.0; c];
        for t in parts {
            if t.cols() != c {
                return Err(Error::Shape(format!("channel statistics over {} and {} columns", c, t.cols())));
            }
            for r in 0..t.rows() {
                for (m, v) in mean.iter_mut().zip(t.row(r)) {
                    *m += v;
                }
            }
            n += t.rows();
        }
        if n == 0 {
            return Err(Error::InvalidArgument("channel statistics of zero rows".into()));
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for t in parts {
            for r in 0..t.rows() {
                for ((s, v), m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }
}

/// Shift and scale each channel of `x` from `from` statistics to `to`.
/// A channel with zero spread maps to the target mean.
pub fn adain(x: &Tensor, from: &ChannelStats, to: &ChannelStats) -> Result<Tensor> {
    let c = x.cols();
    if [from.mean.len(), from.std.len(), to.mean.len(), to.std.len()] != [c; 4] {
        return Err(Error::Shape(format!("AdaIN statistics do not match {c} channels")));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            let z = if from.std[j] > 0.0 {
                (*v - from.mean[j]) / from.std[j]
            } else {
                0.0
            };
            *v = z * to.std[j] + to.mean[j];
        }
    }
    Ok(out)
}
