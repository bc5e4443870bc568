//! Merging the relation-unit boxes of one entity into its refined box.

use super::ModelError;

/// Box coordinates `[x, y, w, h]` as produced by the model (each in `[0,1]`,
/// not necessarily inside the unit square).
pub type BoxCoords = [f64; 4];

/// Boxes, relation weights and embeddings gathered for one entity from every
/// relation-unit that mentions it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub boxes: Vec<BoxCoords>,
    pub weights: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
}

impl CandidateSet {
    pub fn push(&mut self, b: BoxCoords, weight: f64, embedding: Vec<f64>) {
        self.boxes.push(b);
        self.weights.push(weight);
        self.embeddings.push(embedding);
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Weight of a relation-unit: the classifier's probability of the edge's own
/// predicate.
pub fn relation_weight(distribution: &[f64], predicate: usize) -> Result<f64, ModelError> {
    distribution
        .get(predicate)
        .copied()
        .ok_or(ModelError::PredicateOutOfRange {
            predicate,
            size: distribution.len(),
        })
}

/// Refined box `Σ (1+β_ν)·B_ν / Σ (1+β_ν)`, coordinate-wise.
pub fn unify(boxes: &[BoxCoords], betas: &[f64]) -> Result<BoxCoords, ModelError> {
    if boxes.is_empty() {
        return Err(ModelError::EmptyCandidates);
    }
    if boxes.len() != betas.len() {
        return Err(ModelError::CountMismatch {
            what: "candidate weights",
            expected: boxes.len(),
            found: betas.len(),
        });
    }
    let mut num = [0.0; 4];
    let mut den = 0.0;
    for (b, &beta) in boxes.iter().zip(betas) {
        let w = 1.0 + beta;
        for (n, v) in num.iter_mut().zip(b) {
            *n += w * v;
        }
        den += w;
    }
    Ok(num.map(|n| n / den))
}

pub fn unify_candidates(c: &CandidateSet) -> Result<BoxCoords, ModelError> {
    unify(&c.boxes, &c.weights)
}

/// Unweighted mean of the embeddings attached to an entity's candidates.
pub fn average_entity_embeddings(c: &CandidateSet) -> Result<Vec<f64>, ModelError> {
    let first = c.embeddings.first().ok_or(ModelError::EmptyCandidates)?;
    let mut mean = vec![0.0; first.len()];
    for e in &c.embeddings {
        if e.len() != mean.len() {
            return Err(ModelError::CountMismatch {
                what: "embedding width",
                expected: mean.len(),
                found: e.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    let n = c.embeddings.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}
