//! Toy end-to-end loop: mask loss → decoder → interpolated points →
//! similarity scores → image-token embeddings.
//!
//! The hard selection runs once, on the initial map; afterwards the same
//! token indices are re-interpolated every step so the loss only sees the
//! differentiable path.

use serde::{Deserialize, Serialize};

use crate::decode::{decode_backward, decode_with, loss_mask, LossWeights, MockDecoder};
use crate::dtoc::{dtoc_backward_with, dtoc_forward, DtocOptions, InterpGrid};
use crate::embed::{similarity, SegEmbedding, TokenGrid};
use crate::error::{Result, SaspError};
use crate::exec::Exec;
use crate::mask::BinaryMask;
use crate::select::{select_points, PointLabel, PointSet, SelectionConfig};

/// Learnable token grid plus everything held fixed during training.
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub grid: TokenGrid,
    pub seg: SegEmbedding,
    pub target: BinaryMask,
    pub decoder: MockDecoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub selection: SelectionConfig,
    pub stride: f64,
    pub tau: f64,
    pub weights: LossWeights,
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub in_mask_fraction: f64,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub labels: Vec<PointLabel>,
    pub token_index: Vec<usize>,
    pub entries: Vec<TraceEntry>,
}

impl TrainTrace {
    pub fn initial(&self) -> &TraceEntry {
        &self.entries[0]
    }

    pub fn last(&self) -> &TraceEntry {
        self.entries.last().expect("trace has at least one entry")
    }
}

fn in_mask_fraction(points: &[[f64; 2]], labels: &[PointLabel], target: &BinaryMask) -> f64 {
    let (mut inside, mut total) = (0usize, 0usize);
    for (p, l) in points.iter().zip(labels) {
        if *l == PointLabel::Positive {
            total += 1;
            inside += target.contains_point(p[0], p[1]) as usize;
        }
    }
    inside as f64 / total as f64
}

/// Runs `cfg.steps` gradient-descent updates on the scene's token
/// embeddings. The trace holds `steps + 1` entries: the state before each
/// update and after the last one.
pub fn train_toy(scene: &ToyScene, cfg: &TrainConfig) -> Result<TrainTrace> {
    let geometry = scene.grid.geometry();
    if !scene.target.same_shape(geometry.img_w, geometry.img_h) {
        return Err(SaspError::shape(
            "training target",
            geometry.img_w * geometry.img_h,
            scene.target.width() * scene.target.height(),
        ));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(SaspError::invalid(format!("learning rate must be non-negative, got {}", cfg.lr)));
    }
    let interp = InterpGrid::new(geometry.img_w, geometry.img_h, cfg.stride)?;
    let dtoc_opts = DtocOptions {
        tau: cfg.tau,
        record_tape: true,
        exec: cfg.exec,
    };

    let mut grid = scene.grid.clone();
    let initial_map = similarity(&grid, &scene.seg)?;
    let selection = SelectionConfig {
        include_neutral: false,
        ..cfg.selection
    };
    let frozen: PointSet = select_points(&initial_map, &grid, &selection)?;
    if !frozen.labels.contains(&PointLabel::Positive) {
        return Err(SaspError::invalid("initial map selects no positive points"));
    }

    let dim = grid.dim();
    let mut entries = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let map = similarity(&grid, &scene.seg)?;
        let pts = dtoc_forward(&frozen, &map, &interp, &dtoc_opts)?;
        let mask = decode_with(&scene.decoder, &pts, &scene.seg, geometry.img_h, geometry.img_w, cfg.exec)?;
        let loss = loss_mask(&mask, &scene.target, &cfg.weights)?;
        if !loss.total.is_finite() {
            return Err(SaspError::Divergence { step });
        }
        entries.push(TraceEntry {
            step,
            total: loss.total,
            bce: loss.bce,
            dice: loss.dice,
            in_mask_fraction: in_mask_fraction(&pts.points, &pts.labels, &scene.target),
            points: pts.points.clone(),
        });
        if step == cfg.steps {
            break;
        }

        let d_points = decode_backward(&scene.decoder, &pts, &scene.seg, &mask, &loss.grad, cfg.exec)?;
        let d_scores = dtoc_backward_with(&pts, &d_points, cfg.exec)?;
        // S_t = <H_t, h_seg>  ⇒  dL/dH_t = dL/dS_t · h_seg
        let data = grid.data_mut();
        for (t, &g) in d_scores.iter().enumerate() {
            for (h, &s) in data[t * dim..(t + 1) * dim].iter_mut().zip(&scene.seg.projected) {
                *h -= cfg.lr * g * s;
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SaspError::Divergence { step });
        }
    }

    Ok(TrainTrace {
        labels: frozen.labels,
        token_index: frozen.token_index,
        entries,
    })
}
