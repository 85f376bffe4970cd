//! Subject masks from accumulated cross-attention.
//!
//! Every denoising step records, per image and subject, the subject token's
//! cross-attention map from each layer. A mask is the Otsu binarization of
//! the mean of everything recorded so far. When Otsu cannot split the heat
//! the top 10% of patches are used instead, so a mask is never empty.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{otsu_threshold, BitMask};

/// Fraction of patches kept by the fallback rule.
pub const FALLBACK_FRACTION: f64 = 0.1;

/// Binary subject mask together with the averaged map it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMask {
    pub bits: BitMask,
    pub heat: Vec<f64>,
    /// True when the top-k fallback produced the bits.
    pub fallback: bool,
}

impl SubjectMask {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// `max(1, ⌈0.1·P⌉)`.
pub fn fallback_k(patches: usize) -> usize {
    ((patches as f64 * FALLBACK_FRACTION).ceil() as usize).max(1)
}

/// Indices of the `k` hottest patches, lowest index first among ties.
fn top_k(heat: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..heat.len()).collect();
    order.sort_by(|&a, &b| heat[b].total_cmp(&heat[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Otsu-threshold a heat map, falling back to top-k when Otsu fails or
/// selects nothing.
pub fn mask_from_heat(heat: Vec<f64>) -> Result<SubjectMask> {
    if heat.is_empty() {
        return Err(Error::InvalidArgument("empty heat map".into()));
    }
    let bits = match otsu_threshold(&heat) {
        Ok(t) => heat.iter().map(|&v| v > t).collect::<Vec<_>>(),
        Err(Error::Unimodal(_)) | Err(Error::InvalidArgument(_)) => vec![false; heat.len()],
        Err(e) => return Err(e),
    };
    if bits.iter().any(|&b| b) {
        return Ok(SubjectMask {
            bits: BitMask::new(bits)?,
            heat,
            fallback: false,
        });
    }
    let mut bits = vec![false; heat.len()];
    for i in top_k(&heat, fallback_k(heat.len())) {
        bits[i] = true;
    }
    Ok(SubjectMask {
        bits: BitMask::new(bits)?,
        heat,
        fallback: true,
    })
}

/// Accumulated cross-attention per (image, subject).
#[derive(Debug, Clone)]
pub struct CrossAttnStore {
    patches: usize,
    // (step, layer) → maps; summed in key order so the mean does not depend
    // on the order in which recordings arrive.
    maps: BTreeMap<(usize, usize), Vec<((usize, usize), Vec<f64>)>>,
}

impl CrossAttnStore {
    pub fn new(patches: usize) -> Self {
        Self {
            patches,
            maps: BTreeMap::new(),
        }
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    /// Record one map per subject for `image` at (`step`, `layer`).
    pub fn record_maps(&mut self, image: usize, step: usize, layer: usize, maps: &[Vec<f64>]) -> Result<()> {
        for m in maps {
            if m.len() != self.patches {
                return Err(Error::Shape(format!(
                    "cross-attention map of {} patches, store expects {}",
                    m.len(),
                    self.patches
                )));
            }
            if let Some((patch, &value)) = m.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
                return Err(Error::NegativeMap { patch, value });
            }
        }
        for (subject, m) in maps.iter().enumerate() {
            self.maps
                .entry((image, subject))
                .or_default()
                .push(((step, layer), m.clone()));
        }
        Ok(())
    }

    pub fn count(&self, image: usize, subject: usize) -> usize {
        self.maps.get(&(image, subject)).map_or(0, Vec::len)
    }

    /// Mean of all recorded maps for one (image, subject).
    pub fn heat(&self, image: usize, subject: usize) -> Result<Vec<f64>> {
        let entries = self
            .maps
            .get(&(image, subject))
            .filter(|e| !e.is_empty())
            .ok_or(Error::NoRecordings { image, subject })?;
        let mut order: Vec<&((usize, usize), Vec<f64>)> = entries.iter().collect();
        order.sort_by_key(|(key, _)| *key);
        let mut sum = vec![0.0; self.patches];
        for (_, m) in order {
            for (s, v) in sum.iter_mut().zip(m) {
                *s += v;
            }
        }
        let n = entries.len() as f64;
        Ok(sum.into_iter().map(|s| s / n).collect())
    }

    pub fn compute_mask(&self, image: usize, subject: usize) -> Result<SubjectMask> {
        mask_from_heat(self.heat(image, subject)?)
    }
}

/// Elementwise OR.
pub fn union_masks(masks: &[&BitMask]) -> Result<BitMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("union of no masks".into()))?;
    let mut bits = first.bits().to_vec();
    for m in &masks[1..] {
        if m.len() != bits.len() {
            return Err(Error::Shape(format!(
                "union of masks with lengths {} and {}",
                bits.len(),
                m.len()
            )));
        }
        for (b, &o) in bits.iter_mut().zip(m.bits()) {
            *b |= o;
        }
    }
    BitMask::new(bits)
}

/// Binary PGM (P5) with one byte per patch, 0 or 255.
pub fn mask_to_pgm(mask: &BitMask, side: usize) -> Result<Vec<u8>> {
    if side * side != mask.len() {
        return Err(Error::Shape(format!(
            "mask of {} patches is not {side}×{side}",
            mask.len()
        )));
    }
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    Ok(out)
}

pub fn write_mask_pgm(mask: &BitMask, side: usize, path: &Path) -> Result<()> {
    let bytes = mask_to_pgm(mask, side)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}
