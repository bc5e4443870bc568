//! Relation-aware scene-graph to layout inference.
//!
//! A scene graph (entities plus subject–predicate–object edges) is turned into
//! one initial box per entity by a graph convolution network, each edge then
//! predicts its own pair of boxes (a relation-unit), and the relation-units of
//! every entity are merged into a refined box using weights from an auxiliary
//! relation classifier. Refined boxes and their embeddings are rasterized into
//! a `G×G×D` layout grid.
//!
//! The crate also ships the pieces needed to train and judge that model at
//! desk scale: a procedural scene generator with geometric predicates, a small
//! reverse-mode autodiff engine with Adam, and the layout metrics
//! (`R@τ`, relation IoU, relation score, coverage).

pub mod cli;
pub mod layoutmodel;
pub mod metrics;
pub mod scenegraph;
pub mod synthdata;
pub mod tensorgrad;

pub use layoutmodel::{LayoutModel, Mode, ModelDims, ModelParams, TrainConfig};
pub use metrics::{MetricReport, Predicate};
pub use scenegraph::{BoundingBox, Dataset, Edge, Scene, SceneGraph, Vocabulary};
pub use synthdata::{GeneratorConfig, Rng};
