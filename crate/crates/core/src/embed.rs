//! Embedding containers, the seg-token projection and the raw similarity map.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaspError};

/// Square patch grid laid over an image of `img_w` × `img_h` pixels.
///
/// This is the one place that maps between token indices and pixel
/// positions; point selection, the interpolation lift and mask binarization
/// all go through it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub side: usize,
    pub img_w: usize,
    pub img_h: usize,
}

impl PatchGeometry {
    pub fn new(side: usize, img_w: usize, img_h: usize) -> Result<Self> {
        if side == 0 || img_w == 0 || img_h == 0 {
            return Err(SaspError::invalid(format!(
                "patch geometry needs positive sizes (side={side}, img={img_w}x{img_h})"
            )));
        }
        Ok(Self { side, img_w, img_h })
    }

    pub fn n_tokens(&self) -> usize {
        self.side * self.side
    }

    /// Horizontal patch size in pixels.
    pub fn alpha(&self) -> f64 {
        self.img_w as f64 / self.side as f64
    }

    /// Vertical patch size in pixels.
    pub fn beta(&self) -> f64 {
        self.img_h as f64 / self.side as f64
    }

    /// Pixel position of the centre of patch `j`, clamped to the image.
    pub fn patch_center(&self, j: usize) -> Result<(f64, f64)> {
        if j >= self.n_tokens() {
            return Err(SaspError::Index {
                index: j,
                limit: self.n_tokens(),
            });
        }
        let col = (j % self.side) as f64;
        let row = (j / self.side) as f64;
        let x = ((col + 0.5) * self.alpha()).min(self.img_w as f64 - 1.0);
        let y = ((row + 0.5) * self.beta()).min(self.img_h as f64 - 1.0);
        Ok((x, y))
    }

    /// Token whose patch contains the continuous pixel position `(x, y)`.
    pub fn token_at(&self, x: f64, y: f64) -> usize {
        let last = self.side - 1;
        let col = ((x / self.alpha()).floor().max(0.0) as usize).min(last);
        let row = ((y / self.beta()).floor().max(0.0) as usize).min(last);
        row * self.side + col
    }

    /// Nearest-patch replication of per-token values onto the pixel lattice,
    /// row-major `img_h` × `img_w`.
    pub fn lift_to_pixels(&self, per_token: &[f64]) -> Result<Vec<f64>> {
        if per_token.len() != self.n_tokens() {
            return Err(SaspError::shape(
                "lift_to_pixels",
                self.n_tokens(),
                per_token.len(),
            ));
        }
        let mut out = Vec::with_capacity(self.img_w * self.img_h);
        for y in 0..self.img_h {
            for x in 0..self.img_w {
                out.push(per_token[self.token_at(x as f64, y as f64)]);
            }
        }
        Ok(out)
    }
}

/// Image-token embeddings, one row per token, on a square patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    data: Vec<f64>,
    n_tokens: usize,
    dim: usize,
    geometry: PatchGeometry,
}

impl TokenGrid {
    /// `data` is row-major `n_tokens × dim`. The token count must be a
    /// perfect square; a trailing partial row of patches is rejected rather
    /// than dropped.
    pub fn new(data: Vec<f64>, n_tokens: usize, dim: usize, img_w: usize, img_h: usize) -> Result<Self> {
        if n_tokens == 0 || dim == 0 {
            return Err(SaspError::invalid("token grid needs at least one token and one channel"));
        }
        if data.len() != n_tokens * dim {
            return Err(SaspError::shape("token grid data", n_tokens * dim, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SaspError::NonFinite("token grid"));
        }
        let side = (n_tokens as f64).sqrt().floor() as usize;
        // guard against sqrt rounding for large counts
        let side = if (side + 1) * (side + 1) <= n_tokens { side + 1 } else { side };
        if side * side != n_tokens {
            return Err(SaspError::invalid(format!(
                "{n_tokens} tokens do not form a square patch grid ({} would be left over)",
                n_tokens - side * side
            )));
        }
        let geometry = PatchGeometry::new(side, img_w, img_h)?;
        Ok(Self {
            data,
            n_tokens,
            dim,
            geometry,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = SaspError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "none" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(SaspError::invalid(format!("unknown activation '{other}'"))),
        }
    }
}

/// Dense layer computing `y = x·W + b` with `W` stored row-major as
/// `in_dim × out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl MlpLayer {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim {
            return Err(SaspError::shape("mlp weight", in_dim * out_dim, weight.len()));
        }
        if bias.len() != out_dim {
            return Err(SaspError::shape("mlp bias", out_dim, bias.len()));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(SaspError::NonFinite("mlp parameters"));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weight[i * self.out_dim..(i + 1) * self.out_dim];
            for (yo, &w) in y.iter_mut().zip(row) {
                *yo += xi * w;
            }
        }
        y
    }
}

/// Projection of the seg-token hidden state into the image-token space.
/// The activation sits between layers, never after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpProjection {
    layers: Vec<MlpLayer>,
    activation: Activation,
}

impl MlpProjection {
    /// Channel widths of the reference projection: 512 → 4096 → 4096.
    pub const DEFAULT_CHANNELS: [usize; 3] = [512, 4096, 4096];

    pub fn new(layers: Vec<MlpLayer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(SaspError::invalid("mlp needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(SaspError::shape("mlp layer chain", pair[0].out_dim, pair[1].in_dim));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Randomly initialised projection through the given channel widths,
    /// uniform in ±1/√fan_in.
    pub fn seeded(channels: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if channels.len() < 2 || channels.contains(&0) {
            return Err(SaspError::invalid("mlp channels need at least two positive widths"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = channels
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = (0..w[0] * w[1]).map(|_| rng.gen_range(-bound..bound)).collect();
                let bias = (0..w[1]).map(|_| rng.gen_range(-bound..bound)).collect();
                MlpLayer::new(w[0], w[1], weight, bias)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, activation)
    }

    pub fn layers(&self) -> &[MlpLayer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(SaspError::shape("mlp input", self.in_dim(), x.len()));
        }
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if k < last {
                h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegEmbedding {
    pub raw: Vec<f64>,
    pub projected: Vec<f64>,
}

impl SegEmbedding {
    /// Seg embedding used as-is, without a projection layer.
    pub fn unprojected(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(SaspError::invalid("empty seg embedding"));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(SaspError::NonFinite("seg embedding"));
        }
        Ok(Self {
            projected: raw.clone(),
            raw,
        })
    }
}

pub fn project_seg(raw: &[f64], mlp: &MlpProjection) -> Result<SegEmbedding> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(SaspError::NonFinite("seg embedding"));
    }
    let projected = mlp.forward(raw)?;
    if projected.iter().any(|v| !v.is_finite()) {
        return Err(SaspError::NonFinite("projected seg embedding"));
    }
    Ok(SegEmbedding {
        raw: raw.to_vec(),
        projected,
    })
}

/// Per-token similarity scores with their min-max normalized form and
/// softmax probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub scores: Vec<f64>,
    pub normalized: Vec<f64>,
    pub probs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl SimilarityMap {
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(SaspError::invalid("similarity map needs at least one score"));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(SaspError::NonFinite("similarity scores"));
        }
        let normalized = min_max_normalize(&scores);
        let probs = softmax(&scores);
        let n = normalized.len() as f64;
        let mean = normalized.iter().sum::<f64>() / n;
        // population moment
        let var = normalized.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            scores,
            normalized,
            probs,
            mean,
            std: var.sqrt(),
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// True when every raw score is identical (no localization signal).
    pub fn is_degenerate(&self) -> bool {
        self.std == 0.0
    }
}

/// Min-max rescale onto [0, 1]; a constant input maps to 0.5 everywhere.
pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range == 0.0 {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|s| ((s - lo) / range).clamp(0.0, 1.0)).collect()
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn similarity(grid: &TokenGrid, seg: &SegEmbedding) -> Result<SimilarityMap> {
    if seg.projected.len() != grid.dim() {
        return Err(SaspError::shape("similarity", grid.dim(), seg.projected.len()));
    }
    if seg.projected.iter().any(|v| !v.is_finite()) {
        return Err(SaspError::NonFinite("seg embedding"));
    }
    let scores = (0..grid.n_tokens())
        .map(|i| dot(grid.row(i), &seg.projected))
        .collect();
    SimilarityMap::from_scores(scores)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
