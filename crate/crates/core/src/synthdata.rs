//! Procedural scene graphs with geometric relations and consistent
//! ground-truth boxes.
//!
//! Boxes are sampled first; edges are then labelled by evaluating the
//! predicate truth conditions of [`crate::metrics::Predicate`] on the sampled
//! boxes, so every emitted edge holds on its ground truth by construction.

use std::collections::HashSet;

use thiserror::Error;

use crate::metrics::Predicate;
use crate::scenegraph::{round_sig9, BoundingBox, Dataset, Edge, Invalid, Scene, SceneGraph, Vocabulary};

/// Maximum number of box resamplings before a scene is given up on.
pub const MAX_ATTEMPTS: usize = 1000;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// The splitmix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// First output of a splitmix64 generator whose state is `x`.
pub fn splitmix64(x: u64) -> u64 {
    mix64(x.wrapping_add(GOLDEN_GAMMA))
}

/// xoshiro256** seeded from four consecutive splitmix64 outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut state = seed;
        let mut s = [0u64; 4];
        for slot in &mut s {
            state = state.wrapping_add(GOLDEN_GAMMA);
            *slot = mix64(state);
        }
        Self { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n` (multiply-shift reduction). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn coin(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("vocabulary lacks geometric predicate {0:?}")]
    MissingPredicate(&'static str),
    #[error("no consistent edge set after {0} attempts; retry with another seed")]
    Exhausted(usize),
    #[error("scene {index}: {source}")]
    Scene {
        index: usize,
        #[source]
        source: Box<GenError>,
    },
    #[error(transparent)]
    Invalid(#[from] Invalid),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeBudget {
    /// At least this many edges; more when needed so that every entity is
    /// covered, fewer only when the scene runs out of distinct triples.
    Count(usize),
    /// One edge per unordered entity pair.
    AllConsistent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub num_scenes: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    pub num_categories: usize,
    pub seed: u64,
    pub min_box_side: f64,
    pub max_box_side: f64,
    pub edges_per_scene: EdgeBudget,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl GeneratorConfig {
    /// 10 categories, 3–5 entities, seed 42; 300 scenes split 200/100 by
    /// [`reference_split`].
    pub fn reference() -> Self {
        Self {
            num_scenes: 300,
            min_entities: 3,
            max_entities: 5,
            num_categories: 10,
            seed: 42,
            min_box_side: 0.1,
            max_box_side: 0.5,
            edges_per_scene: EdgeBudget::Count(4),
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.min_entities < 2 || self.min_entities > self.max_entities {
            return Err(GenError::Config("need 2 <= min_entities <= max_entities".into()));
        }
        if !(self.min_box_side > 0.0 && self.min_box_side <= self.max_box_side && self.max_box_side <= 1.0) {
            return Err(GenError::Config("need 0 < min_box_side <= max_box_side <= 1".into()));
        }
        if self.num_categories == 0 {
            return Err(GenError::Config("num_categories must be positive".into()));
        }
        Ok(())
    }
}

/// Vocabulary with `num_categories` generic categories and the six geometric
/// predicates in canonical order.
pub fn geometric_vocabulary(num_categories: usize) -> Result<Vocabulary, Invalid> {
    Vocabulary::new(
        (0..num_categories).map(|i| format!("category {i}")).collect(),
        Predicate::ALL.iter().map(|p| p.name().to_owned()).collect(),
    )
}

/// Seed of scene `index`, independent of generation order.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed ^ splitmix64(index as u64)
}

fn sample_box(rng: &mut Rng, config: &GeneratorConfig) -> BoundingBox {
    let w = round_sig9(rng.uniform(config.min_box_side, config.max_box_side));
    let h = round_sig9(rng.uniform(config.min_box_side, config.max_box_side));
    let x = round_sig9(rng.uniform(0.0, 1.0 - w));
    let y = round_sig9(rng.uniform(0.0, 1.0 - h));
    BoundingBox { x, y, w, h }
}

/// Vocabulary indices of predicates that hold for `(s, o)`.
fn holding(table: &[(usize, Predicate)], s: &BoundingBox, o: &BoundingBox) -> Vec<usize> {
    table.iter().filter(|(_, p)| p.holds(s, o)).map(|(i, _)| *i).collect()
}

/// Picks a random orientation of `{a, b}` and a random predicate holding on it.
fn random_edge(rng: &mut Rng, table: &[(usize, Predicate)], boxes: &[BoundingBox], a: usize, b: usize) -> Option<Edge> {
    let (s, o) = if rng.coin() { (a, b) } else { (b, a) };
    let options = holding(table, &boxes[s], &boxes[o]);
    if options.is_empty() {
        return None;
    }
    Some(Edge::new(s, options[rng.below(options.len())], o))
}

fn derive_edges(
    rng: &mut Rng,
    config: &GeneratorConfig,
    table: &[(usize, Predicate)],
    boxes: &[BoundingBox],
) -> Option<Vec<Edge>> {
    let n = boxes.len();
    let mut edges = Vec::new();
    let mut seen = HashSet::new();
    let mut covered = vec![false; n];
    let mut add = |e: Edge, edges: &mut Vec<Edge>, covered: &mut [bool]| {
        if seen.insert(e) {
            covered[e.subject] = true;
            covered[e.object] = true;
            edges.push(e);
        }
    };

    match config.edges_per_scene {
        EdgeBudget::AllConsistent => {
            for a in 0..n {
                for b in a + 1..n {
                    if let Some(e) = random_edge(rng, table, boxes, a, b) {
                        add(e, &mut edges, &mut covered);
                    }
                }
            }
        }
        EdgeBudget::Count(target) => {
            for i in 0..n {
                if covered[i] {
                    continue;
                }
                let mut partners: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                rng.shuffle(&mut partners);
                let edge = partners.into_iter().find_map(|j| random_edge(rng, table, boxes, i, j));
                add(edge?, &mut edges, &mut covered);
            }
            let mut tries = 0;
            while edges.len() < target && tries < 100 * target.max(1) {
                tries += 1;
                let a = rng.below(n);
                let b = rng.below(n - 1);
                let b = if b >= a { b + 1 } else { b };
                if let Some(e) = random_edge(rng, table, boxes, a, b) {
                    add(e, &mut edges, &mut covered);
                }
            }
        }
    }
    covered.iter().all(|&c| c).then_some(edges)
}

/// Samples one scene whose edges all hold on its ground-truth boxes and whose
/// entities each take part in at least one edge.
pub fn sample_scene(rng: &mut Rng, config: &GeneratorConfig, vocab: &Vocabulary) -> Result<Scene, GenError> {
    config.validate()?;
    let table: Vec<(usize, Predicate)> = Predicate::ALL
        .iter()
        .map(|&p| {
            vocab
                .predicate_index(p.name())
                .map(|i| (i, p))
                .ok_or(GenError::MissingPredicate(p.name()))
        })
        .collect::<Result<_, _>>()?;
    if vocab.num_categories() < config.num_categories {
        return Err(GenError::Config(
            "vocabulary has fewer categories than num_categories".into(),
        ));
    }

    let n = config.min_entities + rng.below(config.max_entities - config.min_entities + 1);
    let entities: Vec<usize> = (0..n).map(|_| rng.below(config.num_categories)).collect();
    for _ in 0..MAX_ATTEMPTS {
        let boxes: Vec<BoundingBox> = (0..n).map(|_| sample_box(rng, config)).collect();
        if let Some(edges) = derive_edges(rng, config, &table, &boxes) {
            return Ok(Scene::new(
                SceneGraph {
                    entities: entities.clone(),
                    edges,
                },
                Some(boxes),
            ));
        }
    }
    Err(GenError::Exhausted(MAX_ATTEMPTS))
}

pub fn generate_scene(config: &GeneratorConfig, vocab: &Vocabulary, index: usize) -> Result<Scene, GenError> {
    let mut rng = Rng::seed_from_u64(scene_seed(config.seed, index));
    sample_scene(&mut rng, config, vocab).map_err(|e| GenError::Scene {
        index,
        source: Box::new(e),
    })
}

/// Generates `num_scenes` scenes over [`geometric_vocabulary`].
pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset, GenError> {
    config.validate()?;
    let vocab = geometric_vocabulary(config.num_categories)?;
    let scenes = (0..config.num_scenes)
        .map(|i| generate_scene(config, &vocab, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset::new(vocab, scenes)?)
}

/// Splits the reference corpus into its first `train` scenes and the rest.
pub fn split(dataset: &Dataset, train: usize) -> (Dataset, Dataset) {
    let train = train.min(dataset.scenes.len());
    (
        Dataset {
            vocab: dataset.vocab.clone(),
            scenes: dataset.scenes[..train].to_vec(),
        },
        Dataset {
            vocab: dataset.vocab.clone(),
            scenes: dataset.scenes[train..].to_vec(),
        },
    )
}

/// The reference corpus: 200 training and 100 held-out scenes for `seed`.
pub fn reference_split(seed: u64) -> Result<(Dataset, Dataset), GenError> {
    let config = GeneratorConfig {
        seed,
        ..GeneratorConfig::reference()
    };
    Ok(split(&generate_dataset(&config)?, 200))
}
