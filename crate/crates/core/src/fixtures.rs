//! Small deterministic scenes used by the CLI `fixture` command, the tests
//! and the benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decode::{LossWeights, MockDecoder};
use crate::embed::{SegEmbedding, TokenGrid};
use crate::error::Result;
use crate::exec::Exec;
use crate::mask::BinaryMask;
use crate::select::SelectionConfig;
use crate::train::{ToyScene, TrainConfig};

/// Token grid whose scores against `e_0` are exactly `scores`; the other
/// channels carry seeded noise that the seg embedding ignores.
pub fn grid_with_scores(scores: &[f64], dim: usize, img_w: usize, img_h: usize, seed: u64) -> Result<(TokenGrid, SegEmbedding)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(scores.len() * dim);
    for &s in scores {
        data.push(s);
        data.extend((1..dim).map(|_| rng.gen_range(-1.0..1.0)));
    }
    let grid = TokenGrid::new(data, scores.len(), dim, img_w, img_h)?;
    let mut seg = vec![0.0; dim];
    seg[0] = 1.0;
    Ok((grid, SegEmbedding::unprojected(seg)?))
}

/// 2×2 tokens over 8×8 pixels; token 2 (bottom-left) is the peak.
pub fn peak_2x2() -> (TokenGrid, SegEmbedding) {
    grid_with_scores(&[0.25, 0.5, 2.0, 0.0], 3, 8, 8, 1).expect("valid fixture")
}

/// Every token scores the same, so nothing is selected.
pub fn constant_map() -> (TokenGrid, SegEmbedding) {
    grid_with_scores(&[0.75; 16], 3, 16, 16, 2).expect("valid fixture")
}

/// 4×4 tokens over 16×16 pixels with a single hot token (index 6).
pub fn one_hot() -> (TokenGrid, SegEmbedding) {
    let mut s = [0.0; 16];
    s[6] = 3.0;
    grid_with_scores(&s, 3, 16, 16, 3).expect("valid fixture")
}

/// Two equally hot tokens (indices 5 and 10).
pub fn two_hot() -> (TokenGrid, SegEmbedding) {
    let mut s = [0.0; 16];
    s[5] = 3.0;
    s[10] = 3.0;
    grid_with_scores(&s, 3, 16, 16, 4).expect("valid fixture")
}

/// Three 4×4 (prediction, ground truth) pairs with (intersection, union)
/// of (1, 2), (3, 4) and (6, 6): gIoU 0.75, cIoU 5/6.
pub fn metrics_set() -> Vec<(String, BinaryMask, BinaryMask)> {
    vec![
        (
            "a.pgm".into(),
            BinaryMask::from_fn(4, 4, |x, y| y == 0 && x < 2),
            BinaryMask::from_fn(4, 4, |x, y| y == 0 && x == 0),
        ),
        (
            "b.pgm".into(),
            BinaryMask::from_fn(4, 4, |_, y| y == 0),
            BinaryMask::from_fn(4, 4, |x, y| y == 0 && x < 3),
        ),
        (
            "c.pgm".into(),
            BinaryMask::from_fn(4, 4, |x, y| y >= 2 && x < 3),
            BinaryMask::from_fn(4, 4, |x, y| y >= 2 && x < 3),
        ),
    ]
}

pub const BLOB_IMG: usize = 32;
pub const BLOB_SIDE: usize = 8;
pub const BLOB_CENTER: (f64, f64) = (20.0, 20.0);
pub const BLOB_RADIUS: f64 = 7.0;

/// Disk-shaped target with the initial similarity peak off to the upper
/// left of it and the trough in the lower-left corner.
pub fn offset_blob(seed: u64) -> ToyScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = BLOB_IMG as f64 / BLOB_SIDE as f64;
    let peak = (11.0, 11.0);
    let trough = (2.0, 30.0);
    let scores: Vec<f64> = (0..BLOB_SIDE * BLOB_SIDE)
        .map(|j| {
            let cx = ((j % BLOB_SIDE) as f64 + 0.5) * alpha;
            let cy = ((j / BLOB_SIDE) as f64 + 0.5) * alpha;
            let bump = |c: (f64, f64)| (-((cx - c.0).powi(2) + (cy - c.1).powi(2)) / (2.0 * 16.0)).exp();
            2.0 * bump(peak) - 2.0 * bump(trough) + rng.gen_range(-0.05..0.05)
        })
        .collect();
    let (grid, seg) = grid_with_scores(&scores, 4, BLOB_IMG, BLOB_IMG, seed ^ 0x5eed).expect("valid fixture");
    let target = BinaryMask::from_fn(BLOB_IMG, BLOB_IMG, |x, y| {
        (x as f64 - BLOB_CENTER.0).powi(2) + (y as f64 - BLOB_CENTER.1).powi(2) <= BLOB_RADIUS * BLOB_RADIUS
    });
    let decoder = MockDecoder::new(5.0, 2.0, -4.0, seg.projected.clone()).expect("valid decoder");
    ToyScene {
        grid,
        seg,
        target,
        decoder,
    }
}

/// Training settings that solve `offset_blob` within 500 steps.
pub fn offset_blob_config() -> TrainConfig {
    TrainConfig {
        steps: 500,
        lr: 1.0,
        selection: SelectionConfig {
            max_points: Some(4),
            ..Default::default()
        },
        stride: 1.0,
        tau: 4.0,
        weights: LossWeights::default(),
        exec: Exec::default(),
    }
}
