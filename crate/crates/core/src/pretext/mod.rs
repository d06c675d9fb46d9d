//! Self-supervised tasks: data synthesis, label generation, preprocessing,
//! heads and losses.

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::lasso::LassoError;

pub mod color;
pub mod colorization;
pub mod exemplar;
mod image;
pub mod motion;
pub mod relpos;
pub mod scenes;
pub mod task;

pub use image::{decode_raster, read_raster, stack, write_raster, Image, RASTER_MAGIC};
pub use task::{
    init_head, sample_task_batch, task_loss, triplet_loss, DataConfig, TaskBatch, TaskKind, TaskLoss, TaskSpec,
};

#[derive(Debug, Error)]
pub enum PretextError {
    #[error("expected {expected} channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
    #[error("{0}")]
    Config(String),
    #[error("image {height}x{width} is too small: {detail}")]
    ImageTooSmall { height: usize, width: usize, detail: String },
    #[error("exemplar sampling needs at least 2 images, got {0}")]
    TooFewImages(usize),
    #[error("extent {extent} is not divisible by {by}")]
    Indivisible { extent: usize, by: usize },
    #[error("batch for `{got}` passed to a `{expected}` task")]
    KindMismatch { expected: &'static str, got: &'static str },
    #[error("bad raster {path}: {detail}")]
    Raster { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error(transparent)]
    Lasso(#[from] LassoError),
}
