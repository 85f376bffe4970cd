//! Layout-diversity and subject-consistency scores over a feature bank.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injection::{build_correspondence, FeatureBank};
use crate::numerics::BitMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub target: usize,
    pub source: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Whether displacements were averaged over subject patches only.
    pub masked: bool,
    pub pairs: Vec<PairScore>,
    pub aggregate: f64,
    /// `aggregate / baseline aggregate`, once a baseline is supplied.
    pub normalized: Option<f64>,
}

impl DiversityReport {
    pub fn normalize_by(&mut self, baseline: &DiversityReport) -> Result<f64> {
        if !(baseline.aggregate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "baseline displacement {} must be positive",
                baseline.aggregate
            )));
        }
        let n = self.aggregate / baseline.aggregate;
        self.normalized = Some(n);
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub pairs: Vec<PairScore>,
    pub aggregate: f64,
}

fn check_inputs(bank: &FeatureBank, masks: Option<&[BitMask]>) -> Result<()> {
    if bank.len() < 2 {
        return Err(Error::InvalidArgument("metrics need at least two images".into()));
    }
    if let Some(masks) = masks {
        if masks.len() != bank.len() {
            return Err(Error::Shape(format!("{} masks for {} images", masks.len(), bank.len())));
        }
        for (i, m) in masks.iter().enumerate() {
            if m.len() != bank.patches() {
                return Err(Error::Shape(format!("mask {i} has {} bits for {} patches", m.len(), bank.patches())));
            }
            if !m.any() {
                return Err(Error::InvalidArgument(format!("subject mask of image {i} is empty")));
            }
        }
    }
    Ok(())
}

fn ordered_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |t| (0..n).filter(move |&s| s != t).map(move |s| (t, s)))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Mean grid distance between each patch and its correspondence, per
/// ordered image pair. `masks` restricts the average to subject patches.
pub fn displacement_diversity(bank: &FeatureBank, masks: Option<&[BitMask]>, side: usize) -> Result<DiversityReport> {
    check_inputs(bank, masks)?;
    if side * side != bank.patches() {
        return Err(Error::Shape(format!("{} patches do not form a {side}×{side} grid", bank.patches())));
    }
    let coord = |p: usize| ((p / side) as f64, (p % side) as f64);
    let mut pairs = Vec::new();
    for (t, s) in ordered_pairs(bank.len()) {
        let c = build_correspondence(bank, t, s)?;
        let patches: Vec<usize> = match masks {
            Some(m) => m[t].ones_indices(),
            None => (0..bank.patches()).collect(),
        };
        let value = mean(patches.iter().map(|&p| {
            let (a, b) = (coord(p), coord(c.indices[p]));
            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
        }));
        pairs.push(PairScore { target: t, source: s, value });
    }
    let aggregate = mean(pairs.iter().map(|p| p.value));
    Ok(DiversityReport {
        masked: masks.is_some(),
        pairs,
        aggregate,
        normalized: None,
    })
}

/// Mean cosine between each subject patch and its correspondence, per
/// ordered image pair.
pub fn consistency_proxy(bank: &FeatureBank, masks: &[BitMask]) -> Result<ConsistencyReport> {
    check_inputs(bank, Some(masks))?;
    let mut pairs = Vec::new();
    for (t, s) in ordered_pairs(bank.len()) {
        let c = build_correspondence(bank, t, s)?;
        let value = mean(masks[t].ones_indices().into_iter().map(|p| c.scores[p]));
        pairs.push(PairScore { target: t, source: s, value });
    }
    let aggregate = mean(pairs.iter().map(|p| p.value));
    Ok(ConsistencyReport { pairs, aggregate })
}

/// `metric,target,source,value` rows for both reports.
pub fn pairs_csv(diversity: &DiversityReport, consistency: &ConsistencyReport) -> String {
    let mut out = String::from("metric,target,source,value\n");
    for (name, pairs) in [("displacement", &diversity.pairs), ("consistency", &consistency.pairs)] {
        for p in pairs.iter() {
            let _ = writeln!(out, "{name},{},{},{}", p.target, p.source, p.value);
        }
    }
    out
}

/// One labelled point of a consistency-vs-diversity plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub label: String,
    pub consistency: f64,
    pub diversity: f64,
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Minimal SVG scatter with diversity on x and consistency on y.
pub fn scatter_svg(points: &[ScatterPoint]) -> String {
    let (w, h, pad) = (480.0, 360.0, 48.0);
    let range = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(points.iter().map(|p| p.diversity).collect());
    let (y0, y1) = range(points.iter().map(|p| p.consistency).collect());
    let sx = |v: f64| pad + (v - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |v: f64| h - pad - (v - y0) / (y1 - y0) * (h - 2.0 * pad);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    let _ = writeln!(
        out,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(out, "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>", h - pad);
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">diversity</text>", w / 2.0, h - 12.0);
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">consistency</text>",
        h / 2.0,
        h / 2.0
    );
    for p in points {
        let (x, y) = (sx(p.diversity), sy(p.consistency));
        let _ = writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"steelblue\"/>");
        let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">{}</text>", x + 6.0, y - 6.0, xml_escape(&p.label));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_map(rng: &mut ChaCha8Rng, p: usize, d: usize) -> Tensor {
        let data = (0..p * d).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::matrix(p, d, data).unwrap()
    }

    /// Move every patch's feature one column to the right, wrapping.
    fn shift_columns(t: &Tensor, side: usize) -> Tensor {
        let idx: Vec<usize> = (0..side * side)
            .map(|p| {
                let (r, c) = (p / side, p % side);
                r * side + (c + side - 1) % side
            })
            .collect();
        t.gather_rows(&idx)
    }

    #[test]
    fn identical_banks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_map(&mut rng, 16, 8);
        let bank = FeatureBank::new(vec![d.clone(), d.clone(), d]).unwrap();
        let masks = vec![BitMask::ones(16); 3];
        let div = displacement_diversity(&bank, None, 4).unwrap();
        assert_eq!(div.aggregate, 0.0);
        assert!(div.pairs.iter().all(|p| p.value == 0.0));
        let cons = consistency_proxy(&bank, &masks).unwrap();
        assert!((cons.aggregate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn column_shift_moves_interior_patches_by_one() {
        let side = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_map(&mut rng, side * side, 8);
        let bank = FeatureBank::new(vec![d.clone(), shift_columns(&d, side)]).unwrap();
        // interior: columns that do not wrap when moved one to the right
        let interior = BitMask::new((0..side * side).map(|p| p % side != side - 1).collect()).unwrap();
        let masks = vec![interior.clone(), interior];
        let rep = displacement_diversity(&bank, Some(&masks), side).unwrap();
        assert!((rep.pairs[0].value - 1.0).abs() < 1e-12, "{:?}", rep.pairs);
    }

    #[test]
    fn self_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = FeatureBank::new(vec![random_map(&mut rng, 9, 4), random_map(&mut rng, 9, 4)]).unwrap();
        let mut a = displacement_diversity(&bank, None, 3).unwrap();
        let b = a.clone();
        assert_eq!(a.normalize_by(&b).unwrap(), 1.0);
    }

    #[test]
    fn orthogonal_random_banks() {
        // cosine of independent Gaussian vectors in d = 4096 has σ ≈ 1/64,
        // and each patch takes the best of 8 candidates (≈ +1.4σ)
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = FeatureBank::new(vec![random_map(&mut rng, 8, 4096), random_map(&mut rng, 8, 4096)]).unwrap();
        let rep = consistency_proxy(&bank, &[BitMask::ones(8), BitMask::ones(8)]).unwrap();
        assert!(rep.aggregate.abs() < 0.1, "{}", rep.aggregate);
    }

    #[test]
    fn noised_duplicate_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_map(&mut rng, 16, 32);
        let mut noisy = d.clone();
        for v in noisy.data_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += 0.01 * n;
        }
        let bank = FeatureBank::new(vec![d, noisy]).unwrap();
        let rep = consistency_proxy(&bank, &[BitMask::ones(16), BitMask::ones(16)]).unwrap();
        assert!(rep.aggregate > 0.99);
    }

    #[test]
    fn input_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = FeatureBank::new(vec![random_map(&mut rng, 4, 2), random_map(&mut rng, 4, 2)]).unwrap();
        assert!(consistency_proxy(&bank, &[BitMask::ones(4), BitMask::zeros(4)]).is_err());
        assert!(displacement_diversity(&bank, None, 3).is_err());
        let single = FeatureBank::new(vec![random_map(&mut rng, 4, 2)]).unwrap();
        assert!(displacement_diversity(&single, None, 2).is_err());
    }

    #[test]
    fn report_formats() {
        let div = DiversityReport {
            masked: false,
            pairs: vec![PairScore { target: 0, source: 1, value: 2.0 }],
            aggregate: 2.0,
            normalized: None,
        };
        let cons = ConsistencyReport {
            pairs: vec![PairScore { target: 0, source: 1, value: 0.5 }],
            aggregate: 0.5,
        };
        assert_eq!(pairs_csv(&div, &cons), "metric,target,source,value\ndisplacement,0,1,2\nconsistency,0,1,0.5\n");
        let svg = scatter_svg(&[ScatterPoint { label: "a<b".into(), consistency: 0.5, diversity: 1.0 }]);
        assert!(svg.starts_with("<svg") && svg.contains("a&lt;b") && svg.trim_end().ends_with("</svg>"));
    }

    fn rotate(t: &Tensor, side: usize) -> Tensor {
        // new (r, c) takes old (side-1-c, r)
        let idx: Vec<usize> = (0..side * side)
            .map(|p| {
                let (r, c) = (p / side, p % side);
                (side - 1 - c) * side + r
            })
            .collect();
        t.gather_rows(&idx)
    }

    proptest! {
        #[test]
        fn metrics_invariant_to_rotation_and_scale(seed in any::<u64>(), c in 0.1f64..10.0) {
            let side = 4;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps: Vec<Tensor> = (0..3).map(|_| random_map(&mut rng, side * side, 6)).collect();
            let masks: Vec<BitMask> = (0..3)
                .map(|_| {
                    let mut m = BitMask::new((0..side * side).map(|_| rng.random::<bool>()).collect()).unwrap();
                    m.set(0, true);
                    m
                })
                .collect();
            let bank = FeatureBank::new(maps.clone()).unwrap();
            let base = displacement_diversity(&bank, None, side).unwrap();
            let rotated = FeatureBank::new(maps.iter().map(|m| rotate(m, side)).collect()).unwrap();
            let rot = displacement_diversity(&rotated, None, side).unwrap();
            prop_assert!((base.aggregate - rot.aggregate).abs() < 1e-9);

            let scaled = FeatureBank::new(maps.iter().enumerate().map(|(i, m)| m.scaled(c * (i + 1) as f64)).collect()).unwrap();
            let sdiv = displacement_diversity(&scaled, Some(&masks), side).unwrap();
            let bdiv = displacement_diversity(&bank, Some(&masks), side).unwrap();
            prop_assert!((sdiv.aggregate - bdiv.aggregate).abs() < 1e-12);
            let a = consistency_proxy(&bank, &masks).unwrap().aggregate;
            let b = consistency_proxy(&scaled, &masks).unwrap().aggregate;
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}
