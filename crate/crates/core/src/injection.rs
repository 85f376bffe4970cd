//! Dense correspondence and feature injection.
//!
//! Each target subject patch is matched, by cosine similarity of
//! correspondence features, to its best patch among the source images.
//! Matches scoring above an Otsu threshold have their self-attention output
//! pulled toward the matched patch's output.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_with_norms, lerp_slice_into, norm, otsu_threshold, BitMask, Tensor};

/// Per-image correspondence features, all `P × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    maps: Vec<Tensor>,
}

impl FeatureBank {
    pub fn new(maps: Vec<Tensor>) -> Result<Self> {
        if let Some(first) = maps.first() {
            if let Some((i, m)) = maps.iter().enumerate().find(|(_, m)| m.shape() != first.shape()) {
                return Err(Error::Shape(format!(
                    "feature map {i} is {:?}, map 0 is {:?}",
                    m.shape(),
                    first.shape()
                )));
            }
        }
        Ok(Self { maps })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn map(&self, image: usize) -> &Tensor {
        &self.maps[image]
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn patches(&self) -> usize {
        self.maps.first().map_or(0, Tensor::rows)
    }

    fn check_image(&self, image: usize) -> Result<()> {
        if image < self.maps.len() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "image {image} outside a bank of {}",
                self.maps.len()
            )))
        }
    }
}

/// Best source patch for every target patch.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    pub target: usize,
    pub source: usize,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

fn row_norms(t: &Tensor) -> Result<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let n = norm(t.row(r));
            if n == 0.0 {
                Err(Error::DegenerateVector)
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// `C_{t→s}[p] = argmax_q cos(D_t[p], D_s[q])`, lowest `q` on ties.
pub fn build_correspondence(bank: &FeatureBank, target: usize, source: usize) -> Result<CorrespondenceMap> {
    bank.check_image(target)?;
    bank.check_image(source)?;
    if target == source {
        return Err(Error::InvalidArgument(format!("correspondence of image {target} with itself")));
    }
    let (dt, ds) = (bank.map(target), bank.map(source));
    let (nt, ns) = (row_norms(dt)?, row_norms(ds)?);
    let mut indices = Vec::with_capacity(dt.rows());
    let mut scores = Vec::with_capacity(dt.rows());
    for p in 0..dt.rows() {
        let mut best = (0, f64::NEG_INFINITY);
        for q in 0..ds.rows() {
            let c = cosine_with_norms(dt.row(p), ds.row(q), nt[p], ns[q])?;
            if c > best.1 {
                best = (q, c);
            }
        }
        indices.push(best.0);
        scores.push(best.1);
    }
    Ok(CorrespondenceMap {
        target,
        source,
        indices,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub patch: usize,
    pub source_image: usize,
    pub source_patch: usize,
    pub score: f64,
    pub keep: bool,
}

/// Chosen source for every masked patch of one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionPlan {
    pub target: usize,
    /// `None` when Otsu could not split the scores and every patch is kept.
    pub threshold: Option<f64>,
    pub entries: Vec<PlanEntry>,
}

impl InjectionPlan {
    pub fn kept(&self) -> impl Iterator<Item = &PlanEntry> {
        self.entries.iter().filter(|e| e.keep)
    }

    /// `target_patch,source_image,source_patch,score` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target_patch,source_image,source_patch,score\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{},{}", e.patch, e.source_image, e.source_patch, e.score);
        }
        out
    }
}

/// Plan from precomputed correspondence maps, one per source image.
pub fn select_from_maps(target: usize, mask: &BitMask, maps: &[&CorrespondenceMap]) -> Result<InjectionPlan> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("feature injection needs at least one source".into()));
    }
    let mut ordered: Vec<&CorrespondenceMap> = maps.to_vec();
    ordered.sort_by_key(|m| m.source);
    for m in &ordered {
        if m.target != target || m.source == target {
            return Err(Error::InvalidArgument(format!(
                "correspondence {}→{} used for target {target}",
                m.target, m.source
            )));
        }
        if m.indices.len() != mask.len() {
            return Err(Error::Shape(format!(
                "correspondence of {} patches, mask of {}",
                m.indices.len(),
                mask.len()
            )));
        }
    }
    let mut entries = Vec::with_capacity(mask.count_ones());
    for p in mask.ones_indices() {
        let mut best = ordered[0];
        for m in &ordered[1..] {
            if m.scores[p] > best.scores[p] {
                best = m;
            }
        }
        entries.push(PlanEntry {
            patch: p,
            source_image: best.source,
            source_patch: best.indices[p],
            score: best.scores[p],
            keep: true,
        });
    }
    let scores: Vec<f64> = entries.iter().map(|e| e.score).collect();
    let threshold = match otsu_threshold(&scores) {
        Ok(t) => Some(t),
        Err(Error::Unimodal(_)) | Err(Error::InvalidArgument(_)) => None,
        Err(e) => return Err(e),
    };
    if let Some(t) = threshold {
        for e in &mut entries {
            e.keep = e.score > t;
        }
    }
    Ok(InjectionPlan {
        target,
        threshold,
        entries,
    })
}

/// Best `(source image, patch)` for each masked patch of `target`, lowest
/// image index on ties, gated by Otsu over the winning scores.
pub fn select_sources(bank: &FeatureBank, target: usize, mask: &BitMask, sources: &[usize]) -> Result<InjectionPlan> {
    let maps = sources
        .iter()
        .map(|&s| build_correspondence(bank, target, s))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&CorrespondenceMap> = maps.iter().collect();
    select_from_maps(target, mask, &refs)
}

/// Blend each kept patch of `x_target` toward its matched source patch:
/// `(1 − α)·x + α·x_src`. Everything else is returned untouched.
pub fn inject(x_target: &Tensor, x_sources: &[(usize, &Tensor)], plan: &InjectionPlan, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0,1]")));
    }
    for (img, x) in x_sources {
        if x.shape() != x_target.shape() {
            return Err(Error::Shape(format!(
                "source {img} features {:?}, target {:?}",
                x.shape(),
                x_target.shape()
            )));
        }
    }
    let mut out = x_target.clone();
    for e in plan.kept() {
        let src = x_sources
            .iter()
            .find(|(img, _)| *img == e.source_image)
            .map(|(_, x)| *x)
            .ok_or_else(|| Error::InvalidArgument(format!("plan references missing source {}", e.source_image)))?;
        if e.patch >= out.rows() || e.source_patch >= src.rows() {
            return Err(Error::Shape(format!(
                "plan entry {}→{} outside {} patches",
                e.patch,
                e.source_patch,
                out.rows()
            )));
        }
        lerp_slice_into(out.row_mut(e.patch), src.row(e.source_patch), alpha);
    }
    Ok(out)
}
