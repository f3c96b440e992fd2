//! gIoU / cIoU evaluation and the per-image optimal-threshold sweep.

use serde::{Deserialize, Serialize};

use crate::embed::{PatchGeometry, SimilarityMap};
use crate::error::{Result, SaspError};
use crate::exec::Exec;
use crate::mask::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouPair {
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

impl IouPair {
    /// Empty prediction against empty ground truth counts as a perfect match.
    pub fn from_counts(intersection: u64, union: u64) -> Self {
        let iou = if union == 0 {
            1.0
        } else {
            intersection as f64 / union as f64
        };
        Self {
            intersection,
            union,
            iou,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub per_image: Vec<IouPair>,
    pub giou: f64,
    pub ciou: f64,
}

pub fn iou_pair(pred: &BinaryMask, gt: &BinaryMask) -> Result<IouPair> {
    if !pred.same_shape(gt.width(), gt.height()) {
        return Err(SaspError::shape(
            "iou masks",
            gt.width() * gt.height(),
            pred.width() * pred.height(),
        ));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok(IouPair::from_counts(inter, union))
}

pub fn aggregate(pairs: &[IouPair]) -> Result<IoUReport> {
    if pairs.is_empty() {
        return Err(SaspError::invalid("cannot aggregate an empty set of images"));
    }
    let giou = pairs.iter().map(|p| p.iou).sum::<f64>() / pairs.len() as f64;
    let inter: u64 = pairs.iter().map(|p| p.intersection).sum();
    let union: u64 = pairs.iter().map(|p| p.union).sum();
    Ok(IoUReport {
        per_image: pairs.to_vec(),
        giou,
        ciou: IouPair::from_counts(inter, union).iou,
    })
}

/// Evaluates every (prediction, ground truth) pair and aggregates.
pub fn evaluate(pairs: &[(BinaryMask, BinaryMask)], exec: Exec) -> Result<IoUReport> {
    let ious = exec
        .map(pairs, |(p, g)| iou_pair(p, g))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    aggregate(&ious)
}

/// Normalized similarity scores on a pixel lattice, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelScores {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl PixelScores {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(SaspError::shape("pixel scores", width * height, values.len()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SaspError::invalid("pixel scores must lie in [0, 1]"));
        }
        Ok(Self { width, height, values })
    }

    /// Upsamples the normalized token scores by nearest-patch replication.
    pub fn from_map(map: &SimilarityMap, geometry: &PatchGeometry) -> Result<Self> {
        let values = geometry.lift_to_pixels(&map.normalized)?;
        Ok(Self {
            width: geometry.img_w,
            height: geometry.img_h,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn binarize(scores: &PixelScores, t: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&t) {
        return Err(SaspError::invalid(format!("threshold {t} outside [0, 1]")));
    }
    BinaryMask::new(
        scores.width,
        scores.height,
        scores.values.iter().map(|&v| v >= t).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub step: f64,
    pub best_t: f64,
    pub best_ciou: f64,
    pub curve: Vec<(f64, f64)>,
}

/// Thresholds `0, step, 2·step, …, 1`. When `1/step` is integral each value
/// is computed as `k / K` so that e.g. step 0.01 yields exactly the decimals
/// 0.01, 0.02, … rather than accumulated multiples.
pub fn sweep_thresholds(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(SaspError::invalid(format!("sweep step must be in (0, 0.5], got {step}")));
    }
    let inv = 1.0 / step;
    let k_max = inv.round();
    if (inv - k_max).abs() < 1e-9 {
        let k_max = k_max as u64;
        return Ok((0..=k_max).map(|k| k as f64 / k_max as f64).collect());
    }
    let mut ts: Vec<f64> = (0..)
        .map(|k| k as f64 * step)
        .take_while(|&t| t < 1.0)
        .collect();
    ts.push(1.0);
    Ok(ts)
}

pub fn grid_search_threshold(scores: &PixelScores, gt: &BinaryMask, step: f64) -> Result<ThresholdSweep> {
    grid_search_threshold_with(scores, gt, step, Exec::default())
}

pub fn grid_search_threshold_with(
    scores: &PixelScores,
    gt: &BinaryMask,
    step: f64,
    exec: Exec,
) -> Result<ThresholdSweep> {
    if !gt.same_shape(scores.width, scores.height) {
        return Err(SaspError::shape(
            "threshold sweep ground truth",
            scores.width * scores.height,
            gt.width() * gt.height(),
        ));
    }
    let ts = sweep_thresholds(step)?;
    let curve = exec
        .map(&ts, |&t| binarize(scores, t).and_then(|m| iou_pair(&m, gt)).map(|p| (t, p.iou)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    // strict > keeps the smallest maximizing threshold
    let (mut best_t, mut best_ciou) = curve[0];
    for &(t, c) in &curve[1..] {
        if c > best_ciou {
            best_t = t;
            best_ciou = c;
        }
    }
    Ok(ThresholdSweep {
        step,
        best_t,
        best_ciou,
        curve,
    })
}
