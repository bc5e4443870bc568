use serde::{Deserialize, Serialize};

use super::model::{bind, build, predict_boxes, Batch, Mode};
use super::params::{Architecture, ModelDims, ModelParams};
use super::ModelError;
use crate::metrics::{relation_score, Predicate};
use crate::scenegraph::{BoundingBox, Dataset, Scene, SceneGraph};
use crate::synthdata::{splitmix64, Rng};
use crate::tensorgrad::{Adam, AdamConfig, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds both the initialization and the per-epoch shuffling.
    pub seed: u64,
    pub lambda_rel: f64,
    pub lambda_box: f64,
    pub mode: Mode,
    pub arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-3,
            seed: 42,
            lambda_rel: 1.0,
            lambda_box: 1.0,
            mode: Mode::Full,
            arch: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ModelError::Config("lr must be positive and finite".into()));
        }
        for (name, v) in [("lambda_rel", self.lambda_rel), ("lambda_box", self.lambda_box)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ModelError::Config(format!("{name} must be non-negative and finite")));
            }
        }
        if self.arch.gcn_layers == 0 {
            return Err(ModelError::Config("gcn_layers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-scene relation loss over the epoch's minibatches.
    pub rel_loss: f64,
    /// Mean per-scene box loss over the epoch's minibatches.
    pub box_loss: f64,
    /// Mean RS of the refined boxes on the validation set, if one was given.
    pub val_rs: Option<f64>,
}

/// Per-scene means of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub rel_loss: f64,
    pub box_loss: f64,
    /// `λ_rel·rel_loss + λ_box·box_loss`.
    pub total: f64,
}

/// Loss nodes of one minibatch.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    /// Sum over scenes of per-scene relation loss.
    pub rel_sum: Var,
    /// Sum over scenes of per-scene box MSE.
    pub box_sum: Var,
}

fn ground_truth<'a>(scenes: &[&'a Scene], offset: usize) -> Result<Vec<&'a [BoundingBox]>, ModelError> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.gt_boxes
                .as_deref()
                .ok_or(ModelError::MissingGroundTruth { scene: offset + i })
        })
        .collect()
}

/// Records `λ_rel·L_rel + λ_box·box_loss`, averaged over `scenes`, on `tape`.
/// `vars` must hold the tensors of `params` in storage order; only the shapes
/// of `params` are read.
pub fn loss_graph(
    tape: &mut Tape,
    vars: &[Var],
    params: &ModelParams,
    scenes: &[&Scene],
    mode: Mode,
    lambda_rel: f64,
    lambda_box: f64,
) -> Result<LossVars, ModelError> {
    let dims = params.dims;
    let graphs: Vec<&SceneGraph> = scenes.iter().map(|s| &s.graph).collect();
    let gt = ground_truth(scenes, 0)?;
    let batch = Batch::new(&graphs, dims.num_categories, dims.num_predicates)?;
    let pass = build(tape, vars, params, &batch, mode)?;

    let onehot = tape.constant(batch.predicate_onehot(dims.num_predicates));
    let rel_sum = tape.cross_entropy(pass.distribution, onehot)?;

    let mut target = Vec::with_capacity(4 * batch.num_entities());
    let mut weight = Vec::with_capacity(batch.num_entities());
    for (boxes, g) in gt.iter().zip(&graphs) {
        if boxes.len() != g.entities.len() {
            return Err(ModelError::CountMismatch {
                what: "gt_boxes",
                expected: g.entities.len(),
                found: boxes.len(),
            });
        }
        for b in *boxes {
            target.extend_from_slice(&b.to_array());
            weight.push(1.0 / (4 * boxes.len()) as f64);
        }
    }
    let n = batch.num_entities();
    let target = tape.constant(Tensor::from_parts(vec![n, 4], target));
    let weight = tape.constant(Tensor::from_parts(vec![n, 1], weight));
    let diff = tape.sub(pass.refined, target)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, weight)?;
    let box_sum = tape.sum(weighted)?;

    let b = scenes.len() as f64;
    let rel = tape.scale(rel_sum, lambda_rel / b)?;
    let bx = tape.scale(box_sum, lambda_box / b)?;
    let total = tape.add(rel, bx)?;
    Ok(LossVars {
        total,
        rel_sum,
        box_sum,
    })
}

/// Loss terms of one minibatch, without gradients.
pub fn batch_loss(params: &ModelParams, scenes: &[&Scene], config: &TrainConfig) -> Result<LossSummary, ModelError> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let l = loss_graph(
        &mut tape,
        &vars,
        params,
        scenes,
        config.mode,
        config.lambda_rel,
        config.lambda_box,
    )?;
    let b = scenes.len() as f64;
    Ok(LossSummary {
        rel_loss: tape.value(l.rel_sum).item()? / b,
        box_loss: tape.value(l.box_sum).item()? / b,
        total: tape.value(l.total).item()?,
    })
}

const EVAL_BATCH: usize = 64;

/// Per-scene mean losses over a whole dataset.
pub fn evaluate_losses(
    params: &ModelParams,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<LossSummary, ModelError> {
    let scenes: Vec<&Scene> = dataset.scenes.iter().collect();
    ground_truth(&scenes, 0)?;
    let (mut rel, mut bx) = (0.0, 0.0);
    for chunk in scenes.chunks(EVAL_BATCH) {
        let s = batch_loss(params, chunk, config)?;
        rel += s.rel_loss * chunk.len() as f64;
        bx += s.box_loss * chunk.len() as f64;
    }
    let n = scenes.len().max(1) as f64;
    let (rel, bx) = (rel / n, bx / n);
    Ok(LossSummary {
        rel_loss: rel,
        box_loss: bx,
        total: config.lambda_rel * rel + config.lambda_box * bx,
    })
}

/// Mean per-scene RS of the model's clipped refined boxes.
pub fn dataset_rs(params: &ModelParams, dataset: &Dataset, mode: Mode) -> Result<f64, ModelError> {
    if dataset.scenes.is_empty() {
        return Ok(0.0);
    }
    let predicates = Predicate::resolve(&dataset.vocab)?;
    let graphs: Vec<&SceneGraph> = dataset.scenes.iter().map(|s| &s.graph).collect();
    let boxes = predict_boxes(params, &graphs, mode)?;
    let mut total = 0.0;
    for (g, b) in graphs.iter().zip(boxes) {
        let clipped: Vec<BoundingBox> = b.into_iter().map(BoundingBox::clip_from).collect();
        total += relation_score(&clipped, &g.edges, &predicates)?;
    }
    Ok(total / graphs.len() as f64)
}

/// Trains a fresh model on `data` and returns the final parameters with one
/// record per epoch.
pub fn train(
    data: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochRecord>), ModelError> {
    config.validate()?;
    let scenes: Vec<&Scene> = data.scenes.iter().collect();
    ground_truth(&scenes, 0)?;
    if let Some(v) = validation {
        if v.vocab != data.vocab {
            return Err(ModelError::VocabMismatch(
                "validation vocabulary differs from training".into(),
            ));
        }
        Predicate::resolve(&v.vocab)?;
    }
    let dims = ModelDims::new(data.vocab.num_categories(), data.vocab.num_predicates(), config.arch);
    let mut params = ModelParams::init(dims, config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    if scenes.is_empty() {
        return Ok((params, history));
    }
    // Catch malformed graphs before the first update.
    let graphs: Vec<&SceneGraph> = scenes.iter().map(|s| &s.graph).collect();
    Batch::new(&graphs, dims.num_categories, dims.num_predicates)?;

    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        params.tensors(),
    );
    let mut rng = Rng::seed_from_u64(splitmix64(config.seed));
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let (mut rel, mut bx) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| scenes[i]).collect();
            let mut tape = Tape::new();
            let vars = bind(&mut tape, &params, true);
            let l = loss_graph(
                &mut tape,
                &vars,
                &params,
                &batch,
                config.mode,
                config.lambda_rel,
                config.lambda_box,
            )?;
            rel += tape.value(l.rel_sum).item()?;
            bx += tape.value(l.box_sum).item()?;
            let mut grads = tape.backward(l.total)?;
            drop(tape);
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|&v| grads.take(v).expect("every parameter is a leaf"))
                .collect();
            adam.step(params.tensors_mut(), &grads)?;
        }
        let n = scenes.len() as f64;
        let val_rs = validation.map(|v| dataset_rs(&params, v, config.mode)).transpose()?;
        history.push(EpochRecord {
            epoch: epoch + 1,
            rel_loss: rel / n,
            box_loss: bx / n,
            val_rs,
        });
    }
    Ok((params, history))
}
