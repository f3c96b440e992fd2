//! Similarity maps between a seg-token embedding and image-token embeddings,
//! turned into labelled point prompts whose coordinates stay differentiable
//! in the similarity scores.
//!
//! Pipeline: [`embed::similarity`] → [`select::select_points`] →
//! [`dtoc::dtoc_forward`] → [`decode::decode`] → [`decode::loss_mask`], with
//! [`dtoc::dtoc_backward`] and [`decode::decode_backward`] carrying the mask
//! loss gradient back to the scores. [`metrics`] holds gIoU/cIoU and the
//! per-image threshold sweep.

// `!(x >= lo)` style checks are used on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod decode;
pub mod dtoc;
pub mod embed;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod plot;
pub mod select;
pub mod train;

pub use decode::{decode, loss_mask, loss_text, LossWeights, MaskLoss, MockDecoder};
pub use dtoc::{dtoc_backward, dtoc_convergence, dtoc_forward, DtocOptions, DtocResult, GradTape, InterpGrid};
pub use embed::{project_seg, similarity, MlpProjection, PatchGeometry, SegEmbedding, SimilarityMap, TokenGrid};
pub use error::{Result, SaspError};
pub use exec::Exec;
pub use mask::{BinaryMask, SoftMask};
pub use metrics::{aggregate, binarize, grid_search_threshold, iou_pair, IoUReport, PixelScores, ThresholdSweep};
pub use select::{restore_coordinates, select_indices, select_points, thresholds, PointLabel, PointSet, SelectionConfig};
pub use train::{train_toy, ToyScene, TrainConfig, TrainTrace};
