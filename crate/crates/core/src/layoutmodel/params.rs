use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::synthdata::Rng;
use crate::tensorgrad::Tensor;

/// Layer widths independent of the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Width of enriched entity/predicate embeddings.
    pub embed: usize,
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    pub box_hidden: usize,
    /// Hidden width of the relation-unit net.
    pub unit_hidden: usize,
    /// Hidden width of the relation classifier.
    pub cls_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            embed: 128,
            gcn_layers: 3,
            gcn_hidden: 128,
            box_hidden: 128,
            unit_hidden: 512,
            cls_hidden: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_categories: usize,
    pub num_predicates: usize,
    pub arch: Architecture,
}

impl ModelDims {
    pub fn new(num_categories: usize, num_predicates: usize, arch: Architecture) -> Self {
        Self {
            num_categories,
            num_predicates,
            arch,
        }
    }

    /// Per-edge GCN input: subject, subject box, predicate, object, object box.
    pub fn edge_input(&self) -> usize {
        2 * self.num_categories + self.num_predicates + 8
    }

    /// Enriched triplet plus the initial box pair.
    pub fn unit_input(&self) -> usize {
        3 * self.arch.embed + 8
    }

    /// Subject embedding, subject box, object embedding, object box.
    pub fn classifier_input(&self) -> usize {
        2 * self.arch.embed + 8
    }

    fn gcn_output(&self) -> usize {
        3 * self.arch.embed
    }

    /// Name and shape of every tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        let a = &self.arch;
        let mut out = vec![
            (
                "entity_embedding".to_owned(),
                [self.num_categories, self.num_categories],
            ),
            (
                "predicate_embedding".to_owned(),
                [self.num_predicates, self.num_predicates],
            ),
        ];
        let mut dense = |name: String, fan_in: usize, fan_out: usize| {
            out.push((format!("{name}.weight"), [fan_in, fan_out]));
            out.push((format!("{name}.bias"), [1, fan_out]));
        };
        for l in 0..a.gcn_layers {
            let fan_in = if l == 0 { self.edge_input() } else { self.gcn_output() };
            dense(format!("gcn.{l}.0"), fan_in, a.gcn_hidden);
            dense(format!("gcn.{l}.1"), a.gcn_hidden, self.gcn_output());
        }
        dense("box_head.0".into(), a.embed, a.box_hidden);
        dense("box_head.1".into(), a.box_hidden, 4);
        dense("unit.0".into(), self.unit_input(), a.unit_hidden);
        dense("unit.1".into(), a.unit_hidden, 8);
        dense("classifier.0".into(), self.classifier_input(), a.cls_hidden);
        dense("classifier.1".into(), a.cls_hidden, self.num_predicates);
        out
    }
}

/// Indices of one dense layer's tensors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub weight: usize,
    pub bias: usize,
}

/// Tensor indices for every block of the model.
#[derive(Debug, Clone)]
pub(crate) struct Slots {
    pub entity_embedding: usize,
    pub predicate_embedding: usize,
    pub gcn: Vec<[Dense; 2]>,
    pub box_head: [Dense; 2],
    pub unit: [Dense; 2],
    pub classifier: [Dense; 2],
}

impl Slots {
    pub fn new(layers: usize) -> Self {
        let dense = |i: usize| Dense { weight: i, bias: i + 1 };
        let pair = |i: usize| [dense(i), dense(i + 2)];
        let base = 2 + 4 * layers;
        Self {
            entity_embedding: 0,
            predicate_embedding: 1,
            gcn: (0..layers).map(|l| pair(2 + 4 * l)).collect(),
            box_head: pair(base),
            unit: pair(base + 4),
            classifier: pair(base + 8),
        }
    }
}

/// All learnable tensors of the layout model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, embeddings uniform in ±0.05.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, [r, c]) in dims.layout() {
            let data: Vec<f64> = if name.ends_with("embedding") {
                (0..r * c).map(|_| rng.uniform(-0.05, 0.05)).collect()
            } else if name.ends_with("bias") {
                vec![0.0; r * c]
            } else {
                let a = (6.0 / (r + c) as f64).sqrt();
                (0..r * c).map(|_| rng.uniform(-a, a)).collect()
            };
            names.push(name);
            tensors.push(Tensor::matrix(r, c, data).expect("finite init"));
        }
        Self { dims, names, tensors }
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_named(dims: ModelDims, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let layout = dims.layout();
        if layout.len() != named.len() {
            return Err(ModelError::CountMismatch {
                what: "parameter tensors",
                expected: layout.len(),
                found: named.len(),
            });
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((want, shape), (name, t)) in layout.into_iter().zip(named) {
            if want != name || t.shape() != shape {
                return Err(ModelError::BadParameter {
                    name,
                    reason: format!("expected {want} with shape {shape:?}, got shape {:?}", t.shape()),
                });
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { dims, names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub(crate) fn slots(&self) -> Slots {
        Slots::new(self.dims.arch.gcn_layers)
    }
}
