//! Dependency-free plots: grayscale similarity heatmaps and loss curves.

use crate::embed::{PatchGeometry, SimilarityMap};
use crate::error::Result;
use crate::io::{GrayImage, RgbImage};
use crate::train::TrainTrace;

/// Normalized scores upsampled to the image lattice, 0 → black, 1 → white.
pub fn heatmap(map: &SimilarityMap, geometry: &PatchGeometry) -> Result<GrayImage> {
    let lifted = geometry.lift_to_pixels(&map.normalized)?;
    Ok(GrayImage::from_unit(geometry.img_w, geometry.img_h, &lifted))
}

const PLOT_W: usize = 480;
const PLOT_H: usize = 270;
const MARGIN: i64 = 24;

const BACKGROUND: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [96, 96, 96];
const GRID: [u8; 3] = [228, 228, 228];
pub const TOTAL_COLOR: [u8; 3] = [0, 0, 0];
pub const BCE_COLOR: [u8; 3] = [200, 40, 40];
pub const DICE_COLOR: [u8; 3] = [40, 80, 200];

fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        img.put(x0, y0, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Loss curves of a training trace: total in black, BCE in red, Dice in
/// blue, on a shared linear axis from 0 to the largest value seen.
pub fn loss_curve(trace: &TrainTrace) -> RgbImage {
    let mut img = RgbImage::filled(PLOT_W, PLOT_H, BACKGROUND);
    let (left, top) = (MARGIN, MARGIN / 2);
    let (right, bottom) = (PLOT_W as i64 - MARGIN / 2, PLOT_H as i64 - MARGIN);

    for k in 1..4 {
        let y = bottom - (bottom - top) * k / 4;
        line(&mut img, (left, y), (right, y), GRID);
    }
    line(&mut img, (left, top), (left, bottom), AXIS);
    line(&mut img, (left, bottom), (right, bottom), AXIS);

    let entries = &trace.entries;
    let y_max = entries
        .iter()
        .flat_map(|e| [e.total, e.bce, e.dice])
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let x_span = (entries.len().max(2) - 1) as f64;
    let to_px = |i: usize, v: f64| {
        let x = left + ((right - left) as f64 * i as f64 / x_span).round() as i64;
        let y = bottom - ((bottom - top) as f64 * (v / y_max).clamp(0.0, 1.0)).round() as i64;
        (x, y)
    };
    type Series = (fn(&crate::train::TraceEntry) -> f64, [u8; 3]);
    let series: [Series; 3] = [
        (|e| e.dice, DICE_COLOR),
        (|e| e.bce, BCE_COLOR),
        (|e| e.total, TOTAL_COLOR),
    ];
    for (value, color) in series {
        let mut prev = None;
        for (i, e) in entries.iter().enumerate() {
            let p = to_px(i, value(e));
            if let Some(q) = prev {
                line(&mut img, q, p, color);
            } else {
                img.put(p.0, p.1, color);
            }
            prev = Some(p);
        }
    }
    img
}
