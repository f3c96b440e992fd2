//! Threshold-based point selection over a similarity map.

use serde::{Deserialize, Serialize};

use crate::embed::{PatchGeometry, SimilarityMap, TokenGrid};
use crate::error::{Result, SaspError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub epsilon: f64,
    /// Per-class cap on selected points. `None` keeps everything past the
    /// thresholds.
    pub max_points: Option<usize>,
    pub include_neutral: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            max_points: None,
            include_neutral: false,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(SaspError::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_points == Some(0) {
            return Err(SaspError::invalid("max_points must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub pos: f64,
    pub neg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum PointLabel {
    Positive,
    Negative,
    Neutral,
}

impl From<PointLabel> for i8 {
    fn from(l: PointLabel) -> i8 {
        match l {
            PointLabel::Positive => 1,
            PointLabel::Negative => 0,
            PointLabel::Neutral => -1,
        }
    }
}

impl TryFrom<i8> for PointLabel {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(PointLabel::Positive),
            0 => Ok(PointLabel::Negative),
            -1 => Ok(PointLabel::Neutral),
            other => Err(format!("point label must be 1, 0 or -1, got {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexSets {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub neutral: Vec<usize>,
}

/// Selected points in pixel coordinates with their labels and the tokens
/// they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<PointLabel>,
    pub token_index: Vec<usize>,
    pub thresholds: Thresholds,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("point set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: PointSet =
            serde_json::from_str(text).map_err(|e| SaspError::format(0, e.to_string()))?;
        if set.labels.len() != set.points.len() || set.token_index.len() != set.points.len() {
            return Err(SaspError::format(0, "points, labels and token_index differ in length"));
        }
        Ok(set)
    }
}

pub fn thresholds(map: &SimilarityMap, cfg: &SelectionConfig) -> Thresholds {
    Thresholds {
        pos: map.mean + map.std * cfg.epsilon,
        neg: map.mean - map.std * cfg.epsilon,
    }
}

pub fn select_indices(map: &SimilarityMap, cfg: &SelectionConfig) -> Result<IndexSets> {
    cfg.validate()?;
    let t = thresholds(map, cfg);
    let n = map.len();
    if map.is_degenerate() {
        return Ok(IndexSets {
            neutral: (0..n).collect(),
            ..Default::default()
        });
    }

    let mut positive: Vec<usize> = (0..n).filter(|&j| map.normalized[j] >= t.pos).collect();
    let mut negative: Vec<usize> = (0..n).filter(|&j| map.normalized[j] <= t.neg).collect();

    if let Some(cap) = cfg.max_points {
        let s = &map.normalized;
        // stable sorts keep ascending index order among ties
        positive.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        positive.truncate(cap);
        positive.sort_unstable();
        negative.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
        negative.truncate(cap);
        negative.sort_unstable();
    }

    let mut class = vec![PointLabel::Neutral; n];
    positive.iter().for_each(|&j| class[j] = PointLabel::Positive);
    negative.iter().for_each(|&j| class[j] = PointLabel::Negative);
    let neutral = (0..n).filter(|&j| class[j] == PointLabel::Neutral).collect();

    Ok(IndexSets {
        positive,
        negative,
        neutral,
    })
}

/// Pixel position of the centre of token `j`'s patch, clamped to the image.
pub fn restore_coordinates(j: usize, grid: &TokenGrid) -> Result<(f64, f64)> {
    grid.geometry().patch_center(j)
}

pub fn select_points(map: &SimilarityMap, grid: &TokenGrid, cfg: &SelectionConfig) -> Result<PointSet> {
    if map.len() != grid.n_tokens() {
        return Err(SaspError::shape("select_points", grid.n_tokens(), map.len()));
    }
    select_points_on(map, &grid.geometry(), cfg)
}

pub(crate) fn select_points_on(
    map: &SimilarityMap,
    geometry: &PatchGeometry,
    cfg: &SelectionConfig,
) -> Result<PointSet> {
    let sets = select_indices(map, cfg)?;
    let mut ordered: Vec<(usize, PointLabel)> = Vec::new();
    ordered.extend(sets.positive.iter().map(|&j| (j, PointLabel::Positive)));
    ordered.extend(sets.negative.iter().map(|&j| (j, PointLabel::Negative)));
    if cfg.include_neutral {
        ordered.extend(sets.neutral.iter().map(|&j| (j, PointLabel::Neutral)));
    }

    let mut points = Vec::with_capacity(ordered.len());
    for &(j, _) in &ordered {
        let (x, y) = geometry.patch_center(j)?;
        points.push([x, y]);
    }
    Ok(PointSet {
        points,
        labels: ordered.iter().map(|&(_, l)| l).collect(),
        token_index: ordered.iter().map(|&(j, _)| j).collect(),
        thresholds: thresholds(map, cfg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n_tokens: usize, w: usize, h: usize) -> TokenGrid {
        TokenGrid::new(vec![0.0; n_tokens], n_tokens, 1, w, h).unwrap()
    }

    #[test]
    fn thresholds_from_moments() {
        let map = SimilarityMap {
            scores: vec![],
            normalized: vec![],
            probs: vec![],
            mean: 0.5,
            std: 0.2,
        };
        let t = thresholds(&map, &SelectionConfig::default());
        assert!((t.pos - 0.6).abs() < 1e-15);
        assert!((t.neg - 0.4).abs() < 1e-15);
    }

    #[test]
    fn three_level_map() {
        let map = SimilarityMap::from_scores(vec![0.0, 0.5, 1.0]).unwrap();
        let t = thresholds(&map, &SelectionConfig::default());
        let want = 0.5 + 0.5 * (1.0f64 / 6.0).sqrt();
        assert!((t.pos - want).abs() < 1e-12);
        assert!((t.pos - 0.7041).abs() < 1e-4);
        assert!((t.neg - 0.2959).abs() < 1e-4);
        let sets = select_indices(&map, &SelectionConfig::default()).unwrap();
        assert_eq!(sets.positive, vec![2]);
        assert_eq!(sets.negative, vec![0]);
        assert_eq!(sets.neutral, vec![1]);
    }

    #[test]
    fn constant_map_is_all_neutral() {
        let map = SimilarityMap::from_scores(vec![1.5; 4]).unwrap();
        let t = thresholds(&map, &SelectionConfig::default());
        assert_eq!(t.pos, t.neg);
        let sets = select_indices(&map, &SelectionConfig::default()).unwrap();
        assert!(sets.positive.is_empty() && sets.negative.is_empty());
        assert_eq!(sets.neutral, vec![0, 1, 2, 3]);
        let pts = select_points(&map, &grid(4, 4, 4), &SelectionConfig::default()).unwrap();
        assert!(pts.is_empty());
    }

    #[test]
    fn cap_breaks_ties_by_index() {
        let map = SimilarityMap::from_scores(vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let cfg = SelectionConfig {
            max_points: Some(1),
            ..Default::default()
        };
        let sets = select_indices(&map, &cfg).unwrap();
        assert_eq!(sets.positive, vec![0]);
        assert_eq!(sets.negative, vec![2]);
        assert_eq!(sets.neutral, vec![1, 3]);
    }

    #[test]
    fn cap_keeps_extremes() {
        let map = SimilarityMap::from_scores(vec![0.9, 1.0, 0.95, 0.0, 0.1, 0.05, 0.5]).unwrap();
        let cfg = SelectionConfig {
            max_points: Some(2),
            ..Default::default()
        };
        let sets = select_indices(&map, &cfg).unwrap();
        assert_eq!(sets.positive, vec![1, 2]);
        assert_eq!(sets.negative, vec![3, 5]);
    }

    #[test]
    fn restore_small_grid() {
        let g = grid(4, 4, 4);
        assert_eq!(restore_coordinates(0, &g).unwrap(), (1.0, 1.0));
        assert_eq!(restore_coordinates(3, &g).unwrap(), (3.0, 3.0));
        let g = grid(4, 2, 2);
        assert_eq!(restore_coordinates(3, &g).unwrap(), (1.0, 1.0));
        assert!(matches!(restore_coordinates(4, &g), Err(SaspError::Index { .. })));
    }

    #[test]
    fn restore_clip_336_geometry() {
        let g = grid(576, 336, 336);
        assert_eq!(restore_coordinates(25, &g).unwrap(), (21.0, 21.0));
    }

    #[test]
    fn select_points_orders_and_labels() {
        let map = SimilarityMap::from_scores(vec![0.0, 0.5, 0.5, 1.0]).unwrap();
        let pts = select_points(&map, &grid(4, 4, 4), &SelectionConfig::default()).unwrap();
        assert_eq!(pts.points, vec![[3.0, 3.0], [1.0, 1.0]]);
        assert_eq!(pts.labels, vec![PointLabel::Positive, PointLabel::Negative]);
        assert_eq!(pts.token_index, vec![3, 0]);

        let cfg = SelectionConfig {
            include_neutral: true,
            ..Default::default()
        };
        let pts = select_points(&map, &grid(4, 4, 4), &cfg).unwrap();
        assert_eq!(pts.token_index, vec![3, 0, 1, 2]);
        assert_eq!(pts.labels[2], PointLabel::Neutral);
    }

    #[test]
    fn bad_config_rejected() {
        let map = SimilarityMap::from_scores(vec![0.0, 1.0]).unwrap();
        for cfg in [
            SelectionConfig { epsilon: 0.0, ..Default::default() },
            SelectionConfig { max_points: Some(0), ..Default::default() },
        ] {
            assert!(select_indices(&map, &cfg).is_err());
        }
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let map = SimilarityMap::from_scores(vec![0.1, 0.7, 0.3, 0.9, 0.2, 0.4, 0.8, 0.0, 0.6]).unwrap();
        let mut pts = select_points(&map, &grid(9, 17, 13), &SelectionConfig::default()).unwrap();
        pts.points[0][0] += 1.0 / 3.0;
        let back = PointSet::from_json(&pts.to_json()).unwrap();
        assert_eq!(back, pts);
        assert!(PointSet::from_json(r#"{"points":[[0,0]],"labels":[2],"token_index":[0],"thresholds":{"pos":0,"neg":0}}"#).is_err());
    }

    proptest! {
        #[test]
        fn affine_maps_preserve_selection(
            scores in prop::collection::vec(-5.0f64..5.0, 16),
            a in 0.01f64..100.0,
            b in -100.0f64..100.0,
        ) {
            let cfg = SelectionConfig::default();
            let base = select_indices(&SimilarityMap::from_scores(scores.clone()).unwrap(), &cfg).unwrap();
            let moved: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            let other = select_indices(&SimilarityMap::from_scores(moved).unwrap(), &cfg).unwrap();
            // min-max output can differ by an ulp; only compare when no score
            // sits on a threshold
            let m = SimilarityMap::from_scores(scores).unwrap();
            let t = thresholds(&m, &cfg);
            let near = m.normalized.iter().any(|v| (v - t.pos).abs() < 1e-9 || (v - t.neg).abs() < 1e-9);
            if !near {
                prop_assert_eq!(base, other);
            }
        }

        #[test]
        fn partition_and_bounds(
            scores in prop::collection::vec(-5.0f64..5.0, 25),
            cap in prop::option::of(1usize..6),
            w in 1usize..60,
            h in 1usize..60,
        ) {
            let cfg = SelectionConfig { max_points: cap, include_neutral: true, ..Default::default() };
            let map = SimilarityMap::from_scores(scores).unwrap();
            let sets = select_indices(&map, &cfg).unwrap();
            let mut all: Vec<usize> = sets.positive.iter().chain(&sets.negative).chain(&sets.neutral).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..25).collect::<Vec<_>>());

            let g = TokenGrid::new(vec![0.0; 25], 25, 1, w, h).unwrap();
            let pts = select_points(&map, &g, &cfg).unwrap();
            let t = pts.thresholds;
            for k in 0..pts.len() {
                let [x, y] = pts.points[k];
                prop_assert!(x >= 0.0 && x <= w as f64 - 1.0);
                prop_assert!(y >= 0.0 && y <= h as f64 - 1.0);
                let s = map.normalized[pts.token_index[k]];
                match pts.labels[k] {
                    PointLabel::Positive => prop_assert!(s >= t.pos),
                    PointLabel::Negative => prop_assert!(s <= t.neg),
                    PointLabel::Neutral => {}
                }
            }
        }

        #[test]
        fn restore_is_injective_for_coarse_patches(side in 1usize..12, extra_w in 0usize..40, extra_h in 0usize..40) {
            let n = side * side;
            let g = TokenGrid::new(vec![0.0; n], n, 1, side + extra_w, side + extra_h).unwrap();
            let mut seen = std::collections::HashSet::new();
            for j in 0..n {
                let (x, y) = restore_coordinates(j, &g).unwrap();
                prop_assert!(seen.insert((x.to_bits(), y.to_bits())));
            }
        }
    }
}
