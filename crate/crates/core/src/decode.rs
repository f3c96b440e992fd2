//! A differentiable stand-in for a point-prompted mask decoder, plus the
//! mask and text losses.
//!
//! The decoder splats a signed Gaussian at every interpolated point
//! (positive points add, negative points subtract), scales the sum by a
//! scalar gate read off the seg embedding, and squashes through a sigmoid.

use serde::{Deserialize, Serialize};

use crate::dtoc::DtocResult;
use crate::embed::{dot, SegEmbedding};
use crate::error::{Result, SaspError};
use crate::exec::Exec;
use crate::mask::{BinaryMask, SoftMask};
use crate::select::PointLabel;

/// Sigmoid outputs are clamped this far away from 0 and 1 so the mask
/// stays strictly inside the open interval and the BCE stays finite.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockDecoder {
    pub sigma_mask: f64,
    pub gain: f64,
    pub bias: f64,
    pub seg_gate: Vec<f64>,
}

impl MockDecoder {
    pub fn new(sigma_mask: f64, gain: f64, bias: f64, seg_gate: Vec<f64>) -> Result<Self> {
        if !(sigma_mask > 0.0 && sigma_mask.is_finite()) {
            return Err(SaspError::invalid(format!("sigma_mask must be positive, got {sigma_mask}")));
        }
        if !gain.is_finite() || !bias.is_finite() || seg_gate.iter().any(|v| !v.is_finite()) {
            return Err(SaspError::NonFinite("decoder parameters"));
        }
        Ok(Self {
            sigma_mask,
            gain,
            bias,
            seg_gate,
        })
    }

    pub fn gate(&self, seg: &SegEmbedding) -> Result<f64> {
        if seg.projected.len() != self.seg_gate.len() {
            return Err(SaspError::shape("decoder seg gate", self.seg_gate.len(), seg.projected.len()));
        }
        Ok(dot(&self.seg_gate, &seg.projected))
    }

    fn signs(pts: &DtocResult) -> Result<Vec<f64>> {
        if pts.is_empty() {
            return Err(SaspError::invalid("decoder needs at least one point"));
        }
        pts.labels
            .iter()
            .map(|l| match l {
                PointLabel::Positive => Ok(1.0),
                PointLabel::Negative => Ok(-1.0),
                PointLabel::Neutral => Err(SaspError::invalid("decoder accepts only positive and negative points")),
            })
            .collect()
    }

    fn kernel(&self, x: f64, y: f64, p: [f64; 2]) -> f64 {
        let d2 = (x - p[0]).powi(2) + (y - p[1]).powi(2);
        (-d2 / (2.0 * self.sigma_mask * self.sigma_mask)).exp()
    }
}

fn sigmoid(z: f64) -> f64 {
    let v = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    v.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

pub fn decode(dec: &MockDecoder, pts: &DtocResult, seg: &SegEmbedding, out_h: usize, out_w: usize) -> Result<SoftMask> {
    decode_with(dec, pts, seg, out_h, out_w, Exec::default())
}

pub fn decode_with(
    dec: &MockDecoder,
    pts: &DtocResult,
    seg: &SegEmbedding,
    out_h: usize,
    out_w: usize,
    exec: Exec,
) -> Result<SoftMask> {
    let signs = MockDecoder::signs(pts)?;
    let amp = dec.gate(seg)? * dec.gain;
    let rows = exec.map_range(out_h, |y| {
        (0..out_w)
            .map(|x| {
                let (xf, yf) = (x as f64, y as f64);
                let splat: f64 = pts
                    .points
                    .iter()
                    .zip(&signs)
                    .map(|(&p, s)| s * dec.kernel(xf, yf, p))
                    .sum();
                sigmoid(dec.bias + amp * splat)
            })
            .collect::<Vec<_>>()
    });
    SoftMask::new(out_w, out_h, rows.concat())
}

/// Gradient with respect to each interpolated point, given the gradient of
/// the loss with respect to every mask value.
pub fn decode_backward(
    dec: &MockDecoder,
    pts: &DtocResult,
    seg: &SegEmbedding,
    mask: &SoftMask,
    upstream: &[f64],
    exec: Exec,
) -> Result<Vec<[f64; 2]>> {
    let signs = MockDecoder::signs(pts)?;
    if upstream.len() != mask.values().len() {
        return Err(SaspError::shape("decoder upstream gradient", mask.values().len(), upstream.len()));
    }
    let amp = dec.gate(seg)? * dec.gain;
    let inv_var = 1.0 / (dec.sigma_mask * dec.sigma_mask);
    let (w, h) = (mask.width(), mask.height());
    // dL/dlogit per pixel
    let dlogit: Vec<f64> = mask
        .values()
        .iter()
        .zip(upstream)
        .map(|(&v, &u)| u * v * (1.0 - v))
        .collect();
    let idx: Vec<usize> = (0..pts.len()).collect();
    Ok(exec.map(&idx, |&j| {
        let p = pts.points[j];
        let (mut gx, mut gy) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let c = dlogit[y * w + x] * dec.kernel(xf, yf, p) * inv_var;
                gx += c * (xf - p[0]);
                gy += c * (yf - p[1]);
            }
        }
        [amp * signs[j] * gx, amp * signs[j] * gy]
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub text: f64,
    pub mask: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            text: 1.0,
            mask: 1.0,
            bce: 2.0,
            dice: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.text, self.mask, self.bce, self.dice];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(SaspError::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskLoss {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    /// d total / d prediction, per pixel.
    pub grad: Vec<f64>,
}

pub fn loss_mask(pred: &SoftMask, gt: &BinaryMask, weights: &LossWeights) -> Result<MaskLoss> {
    if !gt.same_shape(pred.width(), pred.height()) {
        return Err(SaspError::shape(
            "mask loss",
            pred.width() * pred.height(),
            gt.width() * gt.height(),
        ));
    }
    weights.validate()?;
    let v = pred.values();
    let n = v.len() as f64;
    let g: Vec<f64> = gt.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();

    let bce = v
        .iter()
        .zip(&g)
        .map(|(&p, &t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
        .sum::<f64>()
        / n;
    let inter: f64 = v.iter().zip(&g).map(|(p, t)| p * t).sum();
    let sum_p: f64 = v.iter().sum();
    let sum_g: f64 = g.iter().sum();
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sum_p + sum_g + DICE_SMOOTH;
    let dice = 1.0 - num / den;

    let grad = v
        .iter()
        .zip(&g)
        .map(|(&p, &t)| {
            let d_bce = (-t / p + (1.0 - t) / (1.0 - p)) / n;
            let d_dice = -(2.0 * t * den - num) / (den * den);
            weights.bce * d_bce + weights.dice * d_dice
        })
        .collect();

    Ok(MaskLoss {
        total: weights.bce * bce + weights.dice * dice,
        bce,
        dice,
        grad,
    })
}

/// Mean token cross-entropy of `logits` (row-major `targets.len() × vocab`).
pub fn loss_text(logits: &[f64], vocab: usize, targets: &[usize]) -> Result<f64> {
    if vocab == 0 || targets.is_empty() {
        return Err(SaspError::invalid("text loss needs a vocabulary and at least one target"));
    }
    if logits.len() != targets.len() * vocab {
        return Err(SaspError::shape("text logits", targets.len() * vocab, logits.len()));
    }
    let mut total = 0.0;
    for (row, &t) in logits.chunks(vocab).zip(targets) {
        if t >= vocab {
            return Err(SaspError::Index { index: t, limit: vocab });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / targets.len() as f64)
}

/// `λ_txt · L_txt + λ_mask · L_mask`.
pub fn combined_objective(text_loss: f64, mask_loss: f64, weights: &LossWeights) -> f64 {
    weights.text * text_loss + weights.mask * mask_loss
}
