//! Layout metrics: entity recall at an IoU threshold, relation IoU, relation
//! score and coverage, together with the geometric truth conditions of the six
//! predicates.

use serde_json::{Map, Value};
use thiserror::Error;

use crate::scenegraph::{BoundingBox, Dataset, Edge, Vocabulary};

/// IoU thresholds reported by default.
pub const DEFAULT_TAUS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("unknown predicate {0:?}")]
    UnknownPredicate(String),
    #[error("empty ground-truth box set")]
    EmptyGroundTruth,
    #[error("empty box set")]
    EmptyBoxes,
    #[error("scene has no edges")]
    NoEdges,
    #[error("edge {edge}: index out of range")]
    EdgeOutOfRange { edge: usize },
    #[error("scene {scene}: {reason}")]
    Mismatch { scene: usize, reason: String },
}

/// The geometric predicates understood by the generator and the relation score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Predicate {
    LeftOf,
    RightOf,
    Above,
    Below,
    Inside,
    Surrounding,
}

impl Predicate {
    pub const ALL: [Predicate; 6] = [
        Predicate::LeftOf,
        Predicate::RightOf,
        Predicate::Above,
        Predicate::Below,
        Predicate::Inside,
        Predicate::Surrounding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Predicate::LeftOf => "left of",
            Predicate::RightOf => "right of",
            Predicate::Above => "above",
            Predicate::Below => "below",
            Predicate::Inside => "inside",
            Predicate::Surrounding => "surrounding",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, MetricError> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| MetricError::UnknownPredicate(name.to_owned()))
    }

    /// The predicate that holds with subject and object swapped.
    pub fn converse(self) -> Self {
        match self {
            Predicate::LeftOf => Predicate::RightOf,
            Predicate::RightOf => Predicate::LeftOf,
            Predicate::Above => Predicate::Below,
            Predicate::Below => Predicate::Above,
            Predicate::Inside => Predicate::Surrounding,
            Predicate::Surrounding => Predicate::Inside,
        }
    }

    /// Center-based truth condition. Ties evaluate false.
    pub fn holds(self, s: &BoundingBox, o: &BoundingBox) -> bool {
        let (sx, sy) = s.center();
        let (ox, oy) = o.center();
        match self {
            Predicate::LeftOf => sx < ox,
            Predicate::RightOf => sx > ox,
            Predicate::Above => sy < oy,
            Predicate::Below => sy > oy,
            Predicate::Inside => strictly_within((sx, sy), o),
            Predicate::Surrounding => strictly_within((ox, oy), s),
        }
    }

    /// Maps every predicate of a vocabulary onto its geometric meaning.
    pub fn resolve(vocab: &Vocabulary) -> Result<Vec<Predicate>, MetricError> {
        vocab.predicates().iter().map(|n| Predicate::from_name(n)).collect()
    }
}

fn strictly_within((px, py): (f64, f64), b: &BoundingBox) -> bool {
    px > b.x && px < b.right() && py > b.y && py < b.bottom()
}

/// Truth condition looked up by predicate name.
pub fn relation_holds(predicate: &str, s: &BoundingBox, o: &BoundingBox) -> Result<bool, MetricError> {
    Ok(Predicate::from_name(predicate)?.holds(s, o))
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    // `right() - x` need not round back to `w`, so identical boxes would
    // otherwise land one ulp short of 1.
    if a == b {
        return 1.0;
    }
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Fraction of index-matched entities whose IoU with ground truth is at least `tau`.
pub fn recall_at_tau(pred: &[BoundingBox], gt: &[BoundingBox], tau: f64) -> Result<f64, MetricError> {
    if gt.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    let n = pred.len().min(gt.len());
    if n == 0 {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| iou(p, g) >= tau).count();
    Ok(hits as f64 / n as f64)
}

fn edge_boxes<'a>(
    boxes: &'a [BoundingBox],
    k: usize,
    e: &Edge,
) -> Result<(&'a BoundingBox, &'a BoundingBox), MetricError> {
    match (boxes.get(e.subject), boxes.get(e.object)) {
        (Some(s), Some(o)) => Ok((s, o)),
        _ => Err(MetricError::EdgeOutOfRange { edge: k }),
    }
}

/// Mean over edges of the product of subject IoU and object IoU.
pub fn relation_iou(pred: &[BoundingBox], gt: &[BoundingBox], edges: &[Edge]) -> Result<f64, MetricError> {
    if edges.is_empty() {
        return Err(MetricError::NoEdges);
    }
    let mut total = 0.0;
    for (k, e) in edges.iter().enumerate() {
        let (ps, po) = edge_boxes(pred, k, e)?;
        let (gs, go) = edge_boxes(gt, k, e)?;
        total += iou(ps, gs) * iou(po, go);
    }
    Ok(total / edges.len() as f64)
}

/// Fraction of edges whose predicate holds on the given boxes.
/// `predicates` maps vocabulary indices to geometric predicates.
pub fn relation_score(boxes: &[BoundingBox], edges: &[Edge], predicates: &[Predicate]) -> Result<f64, MetricError> {
    if edges.is_empty() {
        return Err(MetricError::NoEdges);
    }
    let mut hits = 0usize;
    for (k, e) in edges.iter().enumerate() {
        let (s, o) = edge_boxes(boxes, k, e)?;
        let p = predicates
            .get(e.predicate)
            .ok_or(MetricError::EdgeOutOfRange { edge: k })?;
        if p.holds(s, o) {
            hits += 1;
        }
    }
    Ok(hits as f64 / edges.len() as f64)
}

/// Exact area of the union of the boxes clipped to the unit image, by
/// coordinate compression along x and interval merging along y.
pub fn coverage(boxes: &[BoundingBox]) -> Result<f64, MetricError> {
    if boxes.is_empty() {
        return Err(MetricError::EmptyBoxes);
    }
    let rects: Vec<[f64; 4]> = boxes
        .iter()
        .map(|b| {
            [
                b.x.clamp(0.0, 1.0),
                b.y.clamp(0.0, 1.0),
                b.right().clamp(0.0, 1.0),
                b.bottom().clamp(0.0, 1.0),
            ]
        })
        .filter(|r| r[2] > r[0] && r[3] > r[1])
        .collect();

    let mut xs: Vec<f64> = rects.iter().flat_map(|r| [r[0], r[2]]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();

    let mut area = 0.0;
    let mut spans: Vec<(f64, f64)> = Vec::with_capacity(rects.len());
    for slab in xs.windows(2) {
        let (x0, x1) = (slab[0], slab[1]);
        spans.clear();
        spans.extend(rects.iter().filter(|r| r[0] <= x0 && r[2] >= x1).map(|r| (r[1], r[3])));
        if spans.is_empty() {
            continue;
        }
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut covered = 0.0;
        let (mut lo, mut hi) = spans[0];
        for &(a, b) in &spans[1..] {
            if a > hi {
                covered += hi - lo;
                lo = a;
                hi = b;
            } else if b > hi {
                hi = b;
            }
        }
        covered += hi - lo;
        area += covered * (x1 - x0);
    }
    Ok(area.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// `(τ, R@τ)` in the order the thresholds were requested.
    pub recall_at: Vec<(f64, f64)>,
    pub r_iou: f64,
    pub rs: f64,
    pub coverage: f64,
    pub n_scenes: usize,
}

impl MetricReport {
    pub fn recall(&self, tau: f64) -> Option<f64> {
        self.recall_at.iter().find(|(t, _)| *t == tau).map(|(_, v)| *v)
    }

    pub fn to_json_value(&self) -> Value {
        let mut recall = Map::new();
        for (tau, v) in &self.recall_at {
            recall.insert(format!("{tau:?}"), Value::from(*v));
        }
        let mut root = Map::new();
        root.insert("recall_at".into(), Value::Object(recall));
        root.insert("r_iou".into(), Value::from(self.r_iou));
        root.insert("rs".into(), Value::from(self.rs));
        root.insert("coverage".into(), Value::from(self.coverage));
        root.insert("n_scenes".into(), Value::from(self.n_scenes));
        Value::Object(root)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("report serializes")
    }
}

/// Averages per-scene metrics uniformly over a corpus. Predicted boxes are
/// read from the `gt_boxes` slots of `pred`.
pub fn evaluate(pred: &Dataset, gt: &Dataset, taus: &[f64]) -> Result<MetricReport, MetricError> {
    let predicates = Predicate::resolve(&gt.vocab)?;
    if pred.scenes.len() != gt.scenes.len() {
        return Err(MetricError::Mismatch {
            scene: pred.scenes.len().min(gt.scenes.len()),
            reason: format!(
                "scene count differs ({} predicted, {} ground truth)",
                pred.scenes.len(),
                gt.scenes.len()
            ),
        });
    }
    let mut recall_sums = vec![0.0; taus.len()];
    let (mut r_iou, mut rs, mut cov) = (0.0, 0.0, 0.0);
    for (i, (ps, gs)) in pred.scenes.iter().zip(&gt.scenes).enumerate() {
        let mismatch = |reason: &str| MetricError::Mismatch {
            scene: i,
            reason: reason.to_owned(),
        };
        if ps.graph.entities.len() != gs.graph.entities.len() {
            return Err(mismatch("entity count differs"));
        }
        if ps.graph.edges != gs.graph.edges {
            return Err(mismatch("edge lists differ"));
        }
        let pb = ps
            .gt_boxes
            .as_deref()
            .ok_or_else(|| mismatch("prediction has no boxes"))?;
        let gb = gs
            .gt_boxes
            .as_deref()
            .ok_or_else(|| mismatch("ground truth has no boxes"))?;
        let wrap = |e: MetricError| MetricError::Mismatch {
            scene: i,
            reason: e.to_string(),
        };
        for (sum, &tau) in recall_sums.iter_mut().zip(taus) {
            *sum += recall_at_tau(pb, gb, tau).map_err(wrap)?;
        }
        r_iou += relation_iou(pb, gb, &gs.graph.edges).map_err(wrap)?;
        rs += relation_score(pb, &gs.graph.edges, &predicates).map_err(wrap)?;
        cov += coverage(pb).map_err(wrap)?;
    }
    let n = gt.scenes.len();
    let denom = n.max(1) as f64;
    Ok(MetricReport {
        recall_at: taus.iter().zip(recall_sums).map(|(&t, s)| (t, s / denom)).collect(),
        r_iou: r_iou / denom,
        rs: rs / denom,
        coverage: cov / denom,
        n_scenes: n,
    })
}
