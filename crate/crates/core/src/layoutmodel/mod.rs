//! The relation-aware layout model: scene graph → initial boxes (graph
//! convolution) → per-edge relation-units → classifier-weighted unification →
//! refined boxes → layout grid. Also holds the losses, the training loop and
//! checkpoint I/O.

mod checkpoint;
mod model;
mod params;
mod raster;
mod train;
mod unify;

use thiserror::Error;

use crate::metrics::MetricError;
use crate::tensorgrad::TensorError;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use model::{
    box_loss, embed_edge_inputs, forward, gcn_forward, relation_classify, relation_loss, relation_unit_forward,
    EnrichedEdge, LayoutModel, LayoutOutput, Mode, RelationUnit,
};
pub use params::{Architecture, ModelDims, ModelParams};
pub use raster::{compose_layout, rasterize_mask, warp_embedding, LayoutGrid, Mask, DEFAULT_GRID};
pub use train::{
    batch_loss, dataset_rs, evaluate_losses, loss_graph, train, EpochRecord, LossSummary, LossVars, TrainConfig,
};
pub use unify::{average_entity_embeddings, relation_weight, unify, unify_candidates, BoxCoords, CandidateSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("no entity layouts to compose")]
    EmptyLayout,
    #[error("{what}: expected {expected}, found {found}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("predicate index {predicate} out of range for {size} predicates")]
    PredicateOutOfRange { predicate: usize, size: usize },
    #[error("parameter {name}: {reason}")]
    BadParameter { name: String, reason: String },
    #[error("scene {scene}: {reason}")]
    Graph { scene: usize, reason: String },
    #[error("scene {scene}: missing gt_boxes")]
    MissingGroundTruth { scene: usize },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
