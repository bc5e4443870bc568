use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::params::{Dense, ModelParams, Slots};
use super::raster::{compose_layout, warp_embedding, LayoutGrid};
use super::unify::{average_entity_embeddings, BoxCoords, CandidateSet};
use super::ModelError;
use crate::scenegraph::{BoundingBox, Dataset, Edge, SceneGraph, Vocabulary};
use crate::tensorgrad::{Tape, Tensor, Var, PROB_FLOOR};

/// Which parts of the box refinement are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Relation-units merged with weights `1 + β`.
    Full,
    /// Refined boxes are the graph-convolution boxes; no relation-units.
    NoIndividual,
    /// Relation-units merged by a plain average.
    NoWeightedUnification,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::NoIndividual, Mode::NoWeightedUnification];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoIndividual => "no-individual",
            Mode::NoWeightedUnification => "no-weighted-unification",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected full, no-individual or no-weighted-unification)"))
    }
}

/// Final-layer graph-convolution output for one edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrichedEdge {
    pub subj_emb: Vec<f64>,
    pub pred_emb: Vec<f64>,
    pub obj_emb: Vec<f64>,
    pub subj_init_box: BoxCoords,
    pub obj_init_box: BoxCoords,
}

/// Boxes predicted for the subject and object of one edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationUnit {
    pub subj_box: BoxCoords,
    pub obj_box: BoxCoords,
}

/// Everything one forward pass produces for a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutOutput {
    pub enriched: Vec<EnrichedEdge>,
    pub initial_boxes: Vec<BoxCoords>,
    pub units: Vec<RelationUnit>,
    pub distributions: Vec<Vec<f64>>,
    /// Weight attached to each relation-unit.
    pub betas: Vec<f64>,
    pub refined_boxes: Vec<BoxCoords>,
    pub entity_embeddings: Vec<Vec<f64>>,
    /// Present when a grid size was requested.
    pub layout: Option<LayoutGrid>,
}

impl LayoutOutput {
    /// Refined boxes clipped into the unit square.
    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.refined_boxes.iter().map(|b| BoundingBox::clip_from(*b)).collect()
    }
}

/// Several scene graphs flattened into one graph with offset indices.
#[derive(Debug, Clone)]
pub(crate) struct Batch {
    pub categories: Vec<usize>,
    pub subj: Vec<usize>,
    pub pred: Vec<usize>,
    pub obj: Vec<usize>,
    pub entity_offsets: Vec<usize>,
    pub edge_offsets: Vec<usize>,
    /// Number of edge slots (as subject or object) per entity.
    pub degree: Vec<usize>,
}

impl Batch {
    pub fn new(graphs: &[&SceneGraph], num_categories: usize, num_predicates: usize) -> Result<Self, ModelError> {
        let mut b = Batch {
            categories: Vec::new(),
            subj: Vec::new(),
            pred: Vec::new(),
            obj: Vec::new(),
            entity_offsets: vec![0],
            edge_offsets: vec![0],
            degree: Vec::new(),
        };
        for (scene, g) in graphs.iter().enumerate() {
            let err = |reason: String| ModelError::Graph { scene, reason };
            let base = b.categories.len();
            let n = g.entities.len();
            if g.edges.is_empty() {
                return Err(err("scene has no edges".into()));
            }
            if let Some(j) = g.entities.iter().position(|&c| c >= num_categories) {
                return Err(err(format!("entity {j}: category index out of range")));
            }
            let mut degree = vec![0usize; n];
            for (k, e) in g.edges.iter().enumerate() {
                if e.subject >= n || e.object >= n {
                    return Err(err(format!("edge {k}: entity index out of range")));
                }
                if e.predicate >= num_predicates {
                    return Err(err(format!("edge {k}: predicate index out of range")));
                }
                degree[e.subject] += 1;
                degree[e.object] += 1;
                b.subj.push(base + e.subject);
                b.pred.push(e.predicate);
                b.obj.push(base + e.object);
            }
            if let Some(j) = degree.iter().position(|&d| d == 0) {
                return Err(err(format!("entity {j} takes part in no edge")));
            }
            b.categories.extend_from_slice(&g.entities);
            b.degree.extend(degree);
            b.entity_offsets.push(b.categories.len());
            b.edge_offsets.push(b.subj.len());
        }
        Ok(b)
    }

    pub fn num_entities(&self) -> usize {
        self.categories.len()
    }

    pub fn num_edges(&self) -> usize {
        self.subj.len()
    }

    pub fn num_scenes(&self) -> usize {
        self.entity_offsets.len() - 1
    }

    fn inv_degree(&self) -> Tensor {
        let n = self.num_entities();
        Tensor::from_parts(vec![n, 1], self.degree.iter().map(|&d| 1.0 / d as f64).collect())
    }

    pub fn predicate_onehot(&self, num_predicates: usize) -> Tensor {
        let mut data = vec![0.0; self.num_edges() * num_predicates];
        for (k, &p) in self.pred.iter().enumerate() {
            data[k * num_predicates + p] = 1.0;
        }
        Tensor::from_parts(vec![self.num_edges(), num_predicates], data)
    }
}

/// Tape nodes produced by one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Pass {
    pub subj_emb: Var,
    pub pred_emb: Var,
    pub obj_emb: Var,
    pub initial: Var,
    pub unit_subj: Var,
    pub unit_obj: Var,
    pub distribution: Var,
    pub beta: Var,
    pub refined: Var,
}

/// Puts every parameter on the tape, trainable or constant.
pub(crate) fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Vec<Var> {
    params
        .tensors()
        .iter()
        .map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

fn dense(tape: &mut Tape, vars: &[Var], x: Var, layer: Dense, relu: bool) -> Result<Var, ModelError> {
    let y = tape.matmul(x, vars[layer.weight])?;
    let y = tape.add(y, vars[layer.bias])?;
    Ok(if relu { tape.relu(y)? } else { y })
}

/// Mean over edge slots: subject rows by `subj`, object rows by `obj`.
fn pool(tape: &mut Tape, s: Var, o: Var, batch: &Batch, inv_degree: Var) -> Result<Var, ModelError> {
    let n = batch.num_entities();
    let from_s = tape.scatter_add_rows(s, &batch.subj, n)?;
    let from_o = tape.scatter_add_rows(o, &batch.obj, n)?;
    let total = tape.add(from_s, from_o)?;
    Ok(tape.mul(total, inv_degree)?)
}

fn edge_inputs(tape: &mut Tape, vars: &[Var], slots: &Slots, batch: &Batch) -> Result<Var, ModelError> {
    let ents = tape.gather_rows(vars[slots.entity_embedding], &batch.categories)?;
    let subj = tape.gather_rows(ents, &batch.subj)?;
    let obj = tape.gather_rows(ents, &batch.obj)?;
    let pred = tape.gather_rows(vars[slots.predicate_embedding], &batch.pred)?;
    let default_box = BoundingBox::FULL.to_array();
    let boxes = tape.constant(Tensor::from_parts(
        vec![batch.num_edges(), 4],
        default_box.repeat(batch.num_edges()),
    ));
    Ok(tape.concat(&[subj, boxes, pred, obj, boxes], 1)?)
}

/// Runs the relation-unit net on assembled `[P, 392]` inputs and splits the
/// sigmoid outputs into subject and object boxes.
fn unit_net(tape: &mut Tape, vars: &[Var], slots: &Slots, input: Var) -> Result<(Var, Var), ModelError> {
    let h = dense(tape, vars, input, slots.unit[0], true)?;
    let raw = dense(tape, vars, h, slots.unit[1], false)?;
    let boxes = tape.sigmoid(raw)?;
    Ok((tape.slice(boxes, 1, 0, 4)?, tape.slice(boxes, 1, 4, 8)?))
}

fn classifier_net(
    tape: &mut Tape,
    vars: &[Var],
    slots: &Slots,
    subj_emb: Var,
    subj_box: Var,
    obj_emb: Var,
    obj_box: Var,
) -> Result<Var, ModelError> {
    let input = tape.concat(&[subj_emb, subj_box, obj_emb, obj_box], 1)?;
    let h = dense(tape, vars, input, slots.classifier[0], true)?;
    let logits = dense(tape, vars, h, slots.classifier[1], false)?;
    Ok(tape.softmax(logits, 1)?)
}

/// Batched forward pass recorded on `tape`.
pub(crate) fn build(
    tape: &mut Tape,
    vars: &[Var],
    params: &ModelParams,
    batch: &Batch,
    mode: Mode,
) -> Result<Pass, ModelError> {
    let slots = params.slots();
    let embed = params.dims.arch.embed;
    let num_predicates = params.dims.num_predicates;
    let inv_degree = tape.constant(batch.inv_degree());

    let edge_input = edge_inputs(tape, vars, &slots, batch)?;

    // Graph convolution: per-edge transforms with per-entity averaging between
    // layers; the last layer stays per-edge.
    let mut x = edge_input;
    let mut triplet = None;
    for (l, layer) in slots.gcn.iter().enumerate() {
        let h = dense(tape, vars, x, layer[0], true)?;
        let out = dense(tape, vars, h, layer[1], true)?;
        let s = tape.slice(out, 1, 0, embed)?;
        let p = tape.slice(out, 1, embed, 2 * embed)?;
        let o = tape.slice(out, 1, 2 * embed, 3 * embed)?;
        if l + 1 < slots.gcn.len() {
            let pooled = pool(tape, s, o, batch, inv_degree)?;
            let ps = tape.gather_rows(pooled, &batch.subj)?;
            let po = tape.gather_rows(pooled, &batch.obj)?;
            x = tape.concat(&[ps, p, po], 1)?;
        } else {
            triplet = Some((s, p, o));
        }
    }
    let (subj_emb, pred_emb, obj_emb) =
        triplet.ok_or_else(|| ModelError::Config("gcn_layers must be positive".into()))?;

    // One initial box per entity from its pooled final embedding.
    let pooled = pool(tape, subj_emb, obj_emb, batch, inv_degree)?;
    let hb = dense(tape, vars, pooled, slots.box_head[0], true)?;
    let raw = dense(tape, vars, hb, slots.box_head[1], false)?;
    let initial = tape.sigmoid(raw)?;
    let init_s = tape.gather_rows(initial, &batch.subj)?;
    let init_o = tape.gather_rows(initial, &batch.obj)?;

    let (unit_subj, unit_obj) = match mode {
        Mode::NoIndividual => (init_s, init_o),
        Mode::Full | Mode::NoWeightedUnification => {
            let input = tape.concat(&[subj_emb, init_s, pred_emb, obj_emb, init_o], 1)?;
            unit_net(tape, vars, &slots, input)?
        }
    };

    let distribution = classifier_net(tape, vars, &slots, subj_emb, unit_subj, obj_emb, unit_obj)?;
    let onehot = tape.constant(batch.predicate_onehot(num_predicates));
    let picked = tape.mul(distribution, onehot)?;
    let beta = tape.sum_axis(picked, 1)?;

    let n = batch.num_entities();
    let refined = match mode {
        Mode::NoIndividual => initial,
        Mode::NoWeightedUnification => {
            let s = tape.scatter_add_rows(unit_subj, &batch.subj, n)?;
            let o = tape.scatter_add_rows(unit_obj, &batch.obj, n)?;
            let total = tape.add(s, o)?;
            tape.mul(total, inv_degree)?
        }
        Mode::Full => {
            let weight = tape.add_scalar(beta, 1.0)?;
            let ws = tape.mul(unit_subj, weight)?;
            let wo = tape.mul(unit_obj, weight)?;
            let ns = tape.scatter_add_rows(ws, &batch.subj, n)?;
            let no = tape.scatter_add_rows(wo, &batch.obj, n)?;
            let num = tape.add(ns, no)?;
            let ds = tape.scatter_add_rows(weight, &batch.subj, n)?;
            let dn = tape.scatter_add_rows(weight, &batch.obj, n)?;
            let den = tape.add(ds, dn)?;
            tape.div(num, den)?
        }
    };

    Ok(Pass {
        subj_emb,
        pred_emb,
        obj_emb,
        initial,
        unit_subj,
        unit_obj,
        distribution,
        beta,
        refined,
    })
}

fn rows(t: &Tensor, range: std::ops::Range<usize>) -> Vec<Vec<f64>> {
    range.map(|r| t.row_slice(r).to_vec()).collect()
}

fn box_rows(t: &Tensor, range: std::ops::Range<usize>) -> Vec<BoxCoords> {
    range
        .map(|r| {
            let s = t.row_slice(r);
            [s[0], s[1], s[2], s[3]]
        })
        .collect()
}

/// Reads one scene's outputs from a finished pass.
pub(crate) fn extract(
    tape: &Tape,
    pass: &Pass,
    batch: &Batch,
    scene: usize,
    graph: &SceneGraph,
    grid: Option<usize>,
) -> Result<LayoutOutput, ModelError> {
    let ents = batch.entity_offsets[scene]..batch.entity_offsets[scene + 1];
    let edges = batch.edge_offsets[scene]..batch.edge_offsets[scene + 1];
    let initial_boxes = box_rows(tape.value(pass.initial), ents.clone());
    let refined_boxes = box_rows(tape.value(pass.refined), ents.clone());
    let subj = rows(tape.value(pass.subj_emb), edges.clone());
    let pred = rows(tape.value(pass.pred_emb), edges.clone());
    let obj = rows(tape.value(pass.obj_emb), edges.clone());
    let unit_s = box_rows(tape.value(pass.unit_subj), edges.clone());
    let unit_o = box_rows(tape.value(pass.unit_obj), edges.clone());
    let distributions = rows(tape.value(pass.distribution), edges.clone());
    let betas: Vec<f64> = edges.clone().map(|k| tape.value(pass.beta).data()[k]).collect();

    let mut enriched = Vec::with_capacity(graph.edges.len());
    let mut units = Vec::with_capacity(graph.edges.len());
    let mut candidates = vec![CandidateSet::default(); graph.entities.len()];
    for (k, e) in graph.edges.iter().enumerate() {
        enriched.push(EnrichedEdge {
            subj_emb: subj[k].clone(),
            pred_emb: pred[k].clone(),
            obj_emb: obj[k].clone(),
            subj_init_box: initial_boxes[e.subject],
            obj_init_box: initial_boxes[e.object],
        });
        units.push(RelationUnit {
            subj_box: unit_s[k],
            obj_box: unit_o[k],
        });
        candidates[e.subject].push(unit_s[k], betas[k], subj[k].clone());
        candidates[e.object].push(unit_o[k], betas[k], obj[k].clone());
    }
    let entity_embeddings = candidates
        .iter()
        .map(average_entity_embeddings)
        .collect::<Result<Vec<_>, _>>()?;

    let layout = match grid {
        None => None,
        Some(size) => {
            let layers: Vec<LayoutGrid> = refined_boxes
                .iter()
                .zip(&entity_embeddings)
                .map(|(b, e)| warp_embedding(e, &BoundingBox::clip_from(*b), size))
                .collect();
            Some(compose_layout(&layers)?)
        }
    };

    Ok(LayoutOutput {
        enriched,
        initial_boxes,
        units,
        distributions,
        betas,
        refined_boxes,
        entity_embeddings,
        layout,
    })
}

/// Full pipeline for one scene graph. `grid` selects the layout grid size.
pub fn forward(
    graph: &SceneGraph,
    params: &ModelParams,
    mode: Mode,
    grid: Option<usize>,
) -> Result<LayoutOutput, ModelError> {
    let batch = Batch::new(&[graph], params.dims.num_categories, params.dims.num_predicates)?;
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let pass = build(&mut tape, &vars, params, &batch, mode)?;
    extract(&tape, &pass, &batch, 0, graph, grid)
}

/// Per-edge GCN inputs (`2|C| + |R| + 8` values each).
pub fn embed_edge_inputs(graph: &SceneGraph, params: &ModelParams) -> Result<Vec<Vec<f64>>, ModelError> {
    let batch = Batch::new(&[graph], params.dims.num_categories, params.dims.num_predicates)?;
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let slots = params.slots();
    let x = edge_inputs(&mut tape, &vars, &slots, &batch)?;
    Ok(rows(tape.value(x), 0..batch.num_edges()))
}

/// Enriched per-edge embeddings and one initial box per entity.
pub fn gcn_forward(
    graph: &SceneGraph,
    params: &ModelParams,
) -> Result<(Vec<EnrichedEdge>, Vec<BoxCoords>), ModelError> {
    let out = forward(graph, params, Mode::NoIndividual, None)?;
    Ok((out.enriched, out.initial_boxes))
}

fn row_const(tape: &mut Tape, v: &[f64]) -> Result<Var, ModelError> {
    Ok(tape.constant(Tensor::row(v.to_vec())?))
}

pub fn relation_unit_forward(edge: &EnrichedEdge, params: &ModelParams) -> Result<RelationUnit, ModelError> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let parts = [
        row_const(&mut tape, &edge.subj_emb)?,
        row_const(&mut tape, &edge.subj_init_box)?,
        row_const(&mut tape, &edge.pred_emb)?,
        row_const(&mut tape, &edge.obj_emb)?,
        row_const(&mut tape, &edge.obj_init_box)?,
    ];
    let input = tape.concat(&parts, 1)?;
    let (s, o) = unit_net(&mut tape, &vars, &params.slots(), input)?;
    let (s, o) = (tape.value(s).data(), tape.value(o).data());
    Ok(RelationUnit {
        subj_box: [s[0], s[1], s[2], s[3]],
        obj_box: [o[0], o[1], o[2], o[3]],
    })
}

/// Probability distribution over predicates for one relation-unit.
pub fn relation_classify(
    edge: &EnrichedEdge,
    unit: &RelationUnit,
    params: &ModelParams,
) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let se = row_const(&mut tape, &edge.subj_emb)?;
    let sb = row_const(&mut tape, &unit.subj_box)?;
    let oe = row_const(&mut tape, &edge.obj_emb)?;
    let ob = row_const(&mut tape, &unit.obj_box)?;
    let w = classifier_net(&mut tape, &vars, &params.slots(), se, sb, oe, ob)?;
    Ok(tape.value(w).data().to_vec())
}

/// `Σ_k −ln w_k[p_k]` with probabilities floored at 1e-12.
pub fn relation_loss(distributions: &[Vec<f64>], edges: &[Edge]) -> Result<f64, ModelError> {
    if distributions.len() != edges.len() {
        return Err(ModelError::CountMismatch {
            what: "relation distributions",
            expected: edges.len(),
            found: distributions.len(),
        });
    }
    let mut total = 0.0;
    for (w, e) in distributions.iter().zip(edges) {
        let p = w.get(e.predicate).ok_or(ModelError::PredicateOutOfRange {
            predicate: e.predicate,
            size: w.len(),
        })?;
        total -= p.clamp(PROB_FLOOR, 1.0).ln();
    }
    Ok(total)
}

/// Mean squared error over all `4·|E|` box coordinates.
pub fn box_loss(refined: &[BoxCoords], gt: &[BoundingBox]) -> Result<f64, ModelError> {
    if refined.len() != gt.len() {
        return Err(ModelError::CountMismatch {
            what: "boxes",
            expected: gt.len(),
            found: refined.len(),
        });
    }
    if gt.is_empty() {
        return Err(ModelError::EmptyCandidates);
    }
    let sq: f64 = refined
        .iter()
        .zip(gt)
        .flat_map(|(r, g)| r.iter().zip(g.to_array()).map(|(a, b)| (a - b) * (a - b)))
        .sum();
    Ok(sq / (4 * gt.len()) as f64)
}

/// Parameters bound to the vocabulary they were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutModel {
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub mode: Mode,
}

impl LayoutModel {
    pub fn new(vocab: Vocabulary, params: ModelParams, mode: Mode) -> Result<Self, ModelError> {
        if params.dims.num_categories != vocab.num_categories() || params.dims.num_predicates != vocab.num_predicates()
        {
            return Err(ModelError::VocabMismatch(format!(
                "parameters expect {}x{} categories/predicates, vocabulary has {}x{}",
                params.dims.num_categories,
                params.dims.num_predicates,
                vocab.num_categories(),
                vocab.num_predicates()
            )));
        }
        Ok(Self { vocab, params, mode })
    }

    pub fn forward(&self, graph: &SceneGraph, grid: Option<usize>) -> Result<LayoutOutput, ModelError> {
        forward(graph, &self.params, self.mode, grid)
    }

    /// Refined boxes for every scene, evaluated in batches.
    pub fn refined_boxes(&self, graphs: &[&SceneGraph]) -> Result<Vec<Vec<BoxCoords>>, ModelError> {
        predict_boxes(&self.params, graphs, self.mode)
    }

    /// Copies `dataset` with each scene's `gt_boxes` replaced by refined boxes
    /// clipped into the unit square.
    pub fn predict(&self, dataset: &Dataset) -> Result<Dataset, ModelError> {
        if dataset.vocab != self.vocab {
            return Err(ModelError::VocabMismatch(
                "dataset vocabulary differs from the model's".into(),
            ));
        }
        let graphs: Vec<&SceneGraph> = dataset.scenes.iter().map(|s| &s.graph).collect();
        let boxes = self.refined_boxes(&graphs)?;
        let mut out = dataset.clone();
        for (scene, b) in out.scenes.iter_mut().zip(boxes) {
            scene.gt_boxes = Some(b.into_iter().map(BoundingBox::clip_from).collect());
        }
        Ok(out)
    }
}

const PREDICT_BATCH: usize = 64;

pub(crate) fn predict_boxes(
    params: &ModelParams,
    graphs: &[&SceneGraph],
    mode: Mode,
) -> Result<Vec<Vec<BoxCoords>>, ModelError> {
    let mut out = Vec::with_capacity(graphs.len());
    for (chunk_index, chunk) in graphs.chunks(PREDICT_BATCH).enumerate() {
        let batch = Batch::new(chunk, params.dims.num_categories, params.dims.num_predicates).map_err(|e| match e {
            ModelError::Graph { scene, reason } => ModelError::Graph {
                scene: scene + chunk_index * PREDICT_BATCH,
                reason,
            },
            other => other,
        })?;
        let mut tape = Tape::new();
        let vars = bind(&mut tape, params, false);
        let pass = build(&mut tape, &vars, params, &batch, mode)?;
        let refined = tape.value(pass.refined);
        for s in 0..batch.num_scenes() {
            out.push(box_rows(refined, batch.entity_offsets[s]..batch.entity_offsets[s + 1]));
        }
    }
    Ok(out)
}
