//! Discrete-to-continuous point interpolation.
//!
//! Each selected point is replaced by the average of the interpolation grid
//! coordinates weighted by `exp(-d / tau) * p`, where `d` is the pixel
//! distance from the grid point to the selected point and `p` is the token
//! softmax probability lifted onto the grid by nearest patch. The result is
//! differentiable in the similarity scores; the selection itself is not.
//!
//! Weights are evaluated in log space, shifted by their maximum before
//! exponentiation, so a full-resolution grid never underflows to an all-zero
//! weight vector.

use serde::{Deserialize, Serialize};

use crate::embed::{PatchGeometry, SimilarityMap};
use crate::error::{Result, SaspError};
use crate::exec::Exec;
use crate::select::{PointLabel, PointSet};

/// Rectangular lattice of interpolation points over `[0, img_w-1] × [0, img_h-1]`.
///
/// Axis coordinates are `0, stride, 2·stride, …` with the far edge appended
/// when the stride does not land on it. Points are ordered row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpGrid {
    img_w: usize,
    img_h: usize,
    stride: f64,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

fn axis(extent: usize, stride: f64) -> Vec<f64> {
    let last = extent as f64 - 1.0;
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let v = k as f64 * stride;
        if v > last {
            break;
        }
        out.push(v);
        k += 1;
    }
    if *out.last().unwrap() < last {
        out.push(last);
    }
    out
}

impl InterpGrid {
    pub fn new(img_w: usize, img_h: usize, stride: f64) -> Result<Self> {
        if img_w == 0 || img_h == 0 {
            return Err(SaspError::invalid("interpolation grid needs a non-empty image"));
        }
        if !(stride >= 1.0 && stride.is_finite()) {
            return Err(SaspError::invalid(format!("grid stride must be >= 1, got {stride}")));
        }
        Ok(Self {
            img_w,
            img_h,
            stride,
            xs: axis(img_w, stride),
            ys: axis(img_h, stride),
        })
    }

    /// The full-resolution pixel grid.
    pub fn full(img_w: usize, img_h: usize) -> Result<Self> {
        Self::new(img_w, img_h, 1.0)
    }

    pub fn len(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn img_w(&self) -> usize {
        self.img_w
    }

    pub fn img_h(&self) -> usize {
        self.img_h
    }

    /// Coordinates of grid point `i` in row-major order.
    pub fn point(&self, i: usize) -> (f64, f64) {
        let nx = self.xs.len();
        (self.xs[i % nx], self.ys[i / nx])
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.img_w as f64 - 1.0).contains(&x) && (0.0..=self.img_h as f64 - 1.0).contains(&y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtocOptions {
    /// Distance bandwidth; 1.0 gives `exp(-d)` exactly.
    pub tau: f64,
    /// Keep the per-point weights so `dtoc_backward` can run.
    pub record_tape: bool,
    pub exec: Exec,
}

impl Default for DtocOptions {
    fn default() -> Self {
        Self {
            tau: 1.0,
            record_tape: true,
            exec: Exec::default(),
        }
    }
}

/// Forward state needed to differentiate the interpolated coordinates with
/// respect to the similarity scores.
#[derive(Debug, Clone)]
pub struct GradTape {
    grid: InterpGrid,
    token_of: Vec<usize>,
    n_tokens: usize,
    weights: Vec<Vec<f64>>,
}

impl GradTape {
    /// Normalized weights of point `j` over the grid, row-major.
    pub fn weights(&self, j: usize) -> &[f64] {
        &self.weights[j]
    }

    pub fn grid(&self) -> &InterpGrid {
        &self.grid
    }
}

#[derive(Debug, Clone)]
pub struct DtocResult {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<PointLabel>,
    pub token_index: Vec<usize>,
    tape: Option<GradTape>,
}

impl DtocResult {
    /// Points with no recorded tape, e.g. for driving the decoder directly.
    pub fn untracked(points: Vec<[f64; 2]>, labels: Vec<PointLabel>) -> Self {
        let token_index = vec![0; points.len()];
        Self {
            points,
            labels,
            token_index,
            tape: None,
        }
    }

    pub fn tape(&self) -> Option<&GradTape> {
        self.tape.as_ref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The interpolated points as a `PointSet`, keeping the selection
    /// thresholds of `source`.
    pub fn to_point_set(&self, source: &PointSet) -> PointSet {
        PointSet {
            points: self.points.clone(),
            labels: self.labels.clone(),
            token_index: self.token_index.clone(),
            thresholds: source.thresholds,
        }
    }
}

fn geometry_for(map: &SimilarityMap, grid: &InterpGrid) -> Result<PatchGeometry> {
    let n = map.len();
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(SaspError::invalid(format!("{n} scores do not form a square patch grid")));
    }
    PatchGeometry::new(side, grid.img_w, grid.img_h)
}

fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

pub fn dtoc_forward(pts: &PointSet, map: &SimilarityMap, grid: &InterpGrid, opts: &DtocOptions) -> Result<DtocResult> {
    if grid.is_empty() {
        return Err(SaspError::invalid("empty interpolation grid"));
    }
    if !(opts.tau > 0.0 && opts.tau.is_finite()) {
        return Err(SaspError::invalid(format!("tau must be positive, got {}", opts.tau)));
    }
    if let Some(&[x, y]) = pts.points.iter().find(|&&[x, y]| !grid.contains(x, y)) {
        return Err(SaspError::invalid(format!("point ({x}, {y}) lies outside the interpolation grid")));
    }
    let geometry = geometry_for(map, grid)?;
    let log_p = log_softmax(&map.scores);
    let token_of: Vec<usize> = (0..grid.len())
        .map(|i| {
            let (gx, gy) = grid.point(i);
            geometry.token_at(gx, gy)
        })
        .collect();
    let log_prior: Vec<f64> = token_of.iter().map(|&t| log_p[t]).collect();

    let x_max = grid.img_w as f64 - 1.0;
    let y_max = grid.img_h as f64 - 1.0;
    let per_point = opts.exec.map(&pts.points, |&[px, py]| {
        let mut w: Vec<f64> = (0..grid.len())
            .map(|i| {
                let (gx, gy) = grid.point(i);
                let d = ((gx - px).powi(2) + (gy - py).powi(2)).sqrt();
                -d / opts.tau + log_prior[i]
            })
            .collect();
        let peak = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in w.iter_mut() {
            *v = (*v - peak).exp();
            total += *v;
        }
        let (mut x, mut y) = (0.0, 0.0);
        for (i, v) in w.iter_mut().enumerate() {
            *v /= total;
            let (gx, gy) = grid.point(i);
            x += gx * *v;
            y += gy * *v;
        }
        debug_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        ([x.clamp(0.0, x_max), y.clamp(0.0, y_max)], w)
    });

    let mut points = Vec::with_capacity(per_point.len());
    let mut weights = Vec::with_capacity(per_point.len());
    for (p, w) in per_point {
        points.push(p);
        weights.push(w);
    }
    let tape = opts.record_tape.then(|| GradTape {
        grid: grid.clone(),
        token_of,
        n_tokens: map.len(),
        weights,
    });
    Ok(DtocResult {
        points,
        labels: pts.labels.clone(),
        token_index: pts.token_index.clone(),
        tape,
    })
}

/// Gradient of the loss with respect to every similarity score, given the
/// gradient with respect to each interpolated point.
pub fn dtoc_backward(res: &DtocResult, upstream: &[[f64; 2]]) -> Result<Vec<f64>> {
    dtoc_backward_with(res, upstream, Exec::default())
}

pub fn dtoc_backward_with(res: &DtocResult, upstream: &[[f64; 2]], exec: Exec) -> Result<Vec<f64>> {
    let tape = res.tape.as_ref().ok_or(SaspError::MissingTape)?;
    if upstream.len() != res.points.len() {
        return Err(SaspError::shape("dtoc upstream gradient", res.points.len(), upstream.len()));
    }
    // d x_hat / d S_t = sum over grid points i in patch t of w_i (g_i - x_hat);
    // the softmax normaliser is shared by every grid point and cancels.
    let idx: Vec<usize> = (0..res.points.len()).collect();
    let partials = exec.map(&idx, |&j| {
        let [ux, uy] = upstream[j];
        let [xh, yh] = res.points[j];
        let mut g = vec![0.0; tape.n_tokens];
        for (i, &w) in tape.weights[j].iter().enumerate() {
            let (gx, gy) = tape.grid.point(i);
            g[tape.token_of[i]] += w * (ux * (gx - xh) + uy * (gy - yh));
        }
        g
    });
    let mut grad = vec![0.0; tape.n_tokens];
    for g in &partials {
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceEntry {
    pub stride: f64,
    pub points: Vec<[f64; 2]>,
}

/// Runs the forward interpolation at each stride (descending, down to 1) so
/// coarse-grid results can be compared with the full-resolution one.
pub fn dtoc_convergence(
    pts: &PointSet,
    map: &SimilarityMap,
    img_w: usize,
    img_h: usize,
    strides: &[f64],
    opts: &DtocOptions,
) -> Result<Vec<ConvergenceEntry>> {
    if strides.is_empty() {
        return Err(SaspError::invalid("no strides given"));
    }
    if let Some(s) = strides.iter().find(|&&s| !(s >= 1.0)) {
        return Err(SaspError::invalid(format!("stride {s} is below 1")));
    }
    if strides.windows(2).any(|w| w[0] < w[1]) {
        return Err(SaspError::invalid("strides must be sorted in descending order"));
    }
    let opts = DtocOptions {
        record_tape: false,
        ..*opts
    };
    strides
        .iter()
        .map(|&stride| {
            let grid = InterpGrid::new(img_w, img_h, stride)?;
            let res = dtoc_forward(pts, map, &grid, &opts)?;
            Ok(ConvergenceEntry {
                stride,
                points: res.points,
            })
        })
        .collect()
}
