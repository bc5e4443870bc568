//! Vocabularies, scene graphs, box sets and the dataset JSON format.

use std::collections::HashSet;
use std::fmt::{self, Write as _};

use serde_json::Value;
use thiserror::Error;

/// Slack allowed on `x + w <= 1` and `y + h <= 1`.
pub const BOX_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("{0}")]
    Invalid(#[from] Invalid),
}

/// A validation failure located by a human-readable path such as
/// `scene 0: edge 0`.
#[derive(Debug, Error, Clone, PartialEq)]
pub struct Invalid {
    pub path: String,
    pub reason: String,
}

impl Invalid {
    pub fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Prefixes the path with an outer location.
    pub fn within(mut self, outer: impl fmt::Display) -> Self {
        self.path = if self.path.is_empty() {
            outer.to_string()
        } else {
            format!("{outer}: {}", self.path)
        };
        self
    }
}

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.reason)
        } else {
            write!(f, "{}: {}", self.path, self.reason)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    categories: Vec<String>,
    predicates: Vec<String>,
}

impl Vocabulary {
    pub fn new(categories: Vec<String>, predicates: Vec<String>) -> Result<Self, Invalid> {
        check_names("vocab: categories", &categories)?;
        check_names("vocab: predicates", &predicates)?;
        Ok(Self { categories, predicates })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    pub fn predicate_index(&self, name: &str) -> Option<usize> {
        self.predicates.iter().position(|p| p == name)
    }
}

fn check_names(path: &str, names: &[String]) -> Result<(), Invalid> {
    if names.is_empty() {
        return Err(Invalid::new(path, "list must not be empty"));
    }
    let mut seen = HashSet::new();
    for (i, name) in names.iter().enumerate() {
        if !seen.insert(name.as_str()) {
            return Err(Invalid::new(format!("{path} {i}"), format!("duplicate name {name:?}")));
        }
    }
    Ok(())
}

/// Axis-aligned box in normalized image coordinates, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// The box covering the whole image.
    pub const FULL: BoundingBox = BoundingBox {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
    };

    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, Invalid> {
        let b = Self { x, y, w, h };
        b.check().map_err(|reason| Invalid::new("", reason))?;
        Ok(b)
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self, Invalid> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Builds a valid box from unconstrained model coordinates in `[0,1]^4`:
    /// the origin is kept inside the image and the extent is clipped so the
    /// box stays within the unit square.
    pub fn clip_from(raw: [f64; 4]) -> Self {
        const MIN_SIDE: f64 = 1e-6;
        let x = raw[0].clamp(0.0, 1.0 - MIN_SIDE);
        let y = raw[1].clamp(0.0, 1.0 - MIN_SIDE);
        let w = raw[2].clamp(MIN_SIDE, 1.0 - x);
        let h = raw[3].clamp(MIN_SIDE, 1.0 - y);
        Self { x, y, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn check(&self) -> Result<(), &'static str> {
        let vals = [self.x, self.y, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err("non-finite box coordinate");
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err("degenerate box");
        }
        if self.x < 0.0
            || self.y < 0.0
            || self.x > 1.0
            || self.y > 1.0
            || self.w > 1.0
            || self.h > 1.0
            || self.right() > 1.0 + BOX_EPS
            || self.bottom() > 1.0 + BOX_EPS
        {
            return Err("box outside unit square");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

impl Edge {
    pub fn new(subject: usize, predicate: usize, object: usize) -> Self {
        Self {
            subject,
            predicate,
            object,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SceneGraph {
    /// Category index of every entity.
    pub entities: Vec<usize>,
    pub edges: Vec<Edge>,
}

impl SceneGraph {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub graph: SceneGraph,
    pub gt_boxes: Option<Vec<BoundingBox>>,
}

impl Scene {
    pub fn new(graph: SceneGraph, gt_boxes: Option<Vec<BoundingBox>>) -> Self {
        Self { graph, gt_boxes }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    /// Validates every scene against the vocabulary.
    pub fn new(vocab: Vocabulary, scenes: Vec<Scene>) -> Result<Self, Invalid> {
        for (i, scene) in scenes.iter().enumerate() {
            validate_scene(scene, &vocab).map_err(|e| e.within(format!("scene {i}")))?;
        }
        Ok(Self { vocab, scenes })
    }

    pub fn validate(&self) -> Result<(), Invalid> {
        for (i, scene) in self.scenes.iter().enumerate() {
            validate_scene(scene, &self.vocab).map_err(|e| e.within(format!("scene {i}")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serialize_dataset(self)
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        parse_dataset(text)
    }
}

/// Checks every scene invariant and reports the first violation.
pub fn validate_scene(scene: &Scene, vocab: &Vocabulary) -> Result<(), Invalid> {
    let g = &scene.graph;
    if g.entities.is_empty() {
        return Err(Invalid::new("entities", "scene has no entities"));
    }
    for (j, &cat) in g.entities.iter().enumerate() {
        if cat >= vocab.num_categories() {
            return Err(Invalid::new(format!("entity {j}"), "category index out of range"));
        }
    }
    let mut seen = HashSet::with_capacity(g.edges.len());
    for (k, e) in g.edges.iter().enumerate() {
        let path = format!("edge {k}");
        if e.subject >= g.entities.len() || e.object >= g.entities.len() {
            return Err(Invalid::new(path, "entity index out of range"));
        }
        if e.predicate >= vocab.num_predicates() {
            return Err(Invalid::new(path, "predicate index out of range"));
        }
        if e.subject == e.object {
            return Err(Invalid::new(path, "subject equals object"));
        }
        if !seen.insert(*e) {
            return Err(Invalid::new(path, "duplicate edge"));
        }
    }
    if let Some(boxes) = &scene.gt_boxes {
        if boxes.len() != g.entities.len() {
            return Err(Invalid::new(
                "gt_boxes",
                format!("expected {} boxes, found {}", g.entities.len(), boxes.len()),
            ));
        }
        for (i, b) in boxes.iter().enumerate() {
            b.check()
                .map_err(|reason| Invalid::new(format!("gt_boxes {i}"), reason))?;
        }
    }
    Ok(())
}

/// Rounds to 9 significant decimal digits, the precision of the dataset format.
pub fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

fn push_float9(out: &mut String, v: f64) {
    // Debug keeps a trailing ".0" on integral values and is the shortest
    // representation that parses back to the same f64.
    let _ = write!(out, "{:?}", round_sig9(v));
}

fn push_str_list(out: &mut String, names: &[String]) {
    out.push('[');
    for (i, n) in names.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&serde_json::to_string(n).expect("string serializes"));
    }
    out.push(']');
}

fn push_usize_list(out: &mut String, xs: impl IntoIterator<Item = usize>) {
    out.push('[');
    for (i, x) in xs.into_iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "{x}");
    }
    out.push(']');
}

/// Renders a dataset in the canonical JSON layout: fixed key order, one scene
/// per line, floats rounded to 9 significant digits.
pub fn serialize_dataset(d: &Dataset) -> String {
    let mut out = String::new();
    out.push_str("{\n  \"vocab\": {\"categories\": ");
    push_str_list(&mut out, &d.vocab.categories);
    out.push_str(", \"predicates\": ");
    push_str_list(&mut out, &d.vocab.predicates);
    out.push_str("},\n  \"scenes\": [");
    for (i, s) in d.scenes.iter().enumerate() {
        out.push_str(if i == 0 { "\n    " } else { ",\n    " });
        out.push_str("{\"entities\": ");
        push_usize_list(&mut out, s.graph.entities.iter().copied());
        out.push_str(", \"edges\": [");
        for (k, e) in s.graph.edges.iter().enumerate() {
            if k > 0 {
                out.push_str(", ");
            }
            push_usize_list(&mut out, [e.subject, e.predicate, e.object]);
        }
        out.push(']');
        if let Some(boxes) = &s.gt_boxes {
            out.push_str(", \"gt_boxes\": [");
            for (j, b) in boxes.iter().enumerate() {
                if j > 0 {
                    out.push_str(", ");
                }
                out.push('[');
                for (c, v) in b.to_array().iter().enumerate() {
                    if c > 0 {
                        out.push_str(", ");
                    }
                    push_float9(&mut out, *v);
                }
                out.push(']');
            }
            out.push(']');
        }
        out.push('}');
    }
    if !d.scenes.is_empty() {
        out.push_str("\n  ");
    }
    out.push_str("]\n}\n");
    out
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

/// Parses and validates a dataset document.
pub fn parse_dataset(text: &str) -> Result<Dataset, SceneError> {
    let root: Value = serde_json::from_str(text).map_err(|e| SceneError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    Ok(dataset_from_value(&root)?)
}

fn field<'a>(obj: &'a Value, key: &str, path: &str) -> Result<&'a Value, Invalid> {
    obj.as_object()
        .ok_or_else(|| Invalid::new(path, "expected an object"))?
        .get(key)
        .ok_or_else(|| Invalid::new(path, format!("missing field \"{key}\"")))
}

fn array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, Invalid> {
    v.as_array().ok_or_else(|| Invalid::new(path, "expected an array"))
}

fn index(v: &Value, path: &str) -> Result<usize, Invalid> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| Invalid::new(path, "expected a non-negative integer"))
}

fn names(v: &Value, path: &str) -> Result<Vec<String>, Invalid> {
    array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, n)| {
            n.as_str()
                .map(str::to_owned)
                .ok_or_else(|| Invalid::new(format!("{path} {i}"), "expected a string"))
        })
        .collect()
}

fn dataset_from_value(root: &Value) -> Result<Dataset, Invalid> {
    let vocab_v = field(root, "vocab", "")?;
    let categories = names(field(vocab_v, "categories", "vocab")?, "vocab: categories")?;
    let predicates = names(field(vocab_v, "predicates", "vocab")?, "vocab: predicates")?;
    let vocab = Vocabulary::new(categories, predicates)?;

    let scenes_v = array(field(root, "scenes", "")?, "scenes")?;
    let mut scenes = Vec::with_capacity(scenes_v.len());
    for (i, sv) in scenes_v.iter().enumerate() {
        let scene = scene_from_value(sv).map_err(|e| e.within(format!("scene {i}")))?;
        validate_scene(&scene, &vocab).map_err(|e| e.within(format!("scene {i}")))?;
        scenes.push(scene);
    }
    Ok(Dataset { vocab, scenes })
}

fn scene_from_value(sv: &Value) -> Result<Scene, Invalid> {
    let entities = array(field(sv, "entities", "")?, "entities")?
        .iter()
        .enumerate()
        .map(|(j, v)| index(v, &format!("entity {j}")))
        .collect::<Result<Vec<_>, _>>()?;

    let mut edges = Vec::new();
    for (k, ev) in array(field(sv, "edges", "")?, "edges")?.iter().enumerate() {
        let path = format!("edge {k}");
        let triple = array(ev, &path)?;
        if triple.len() != 3 {
            return Err(Invalid::new(path, "expected [subject, predicate, object]"));
        }
        edges.push(Edge::new(
            index(&triple[0], &path)?,
            index(&triple[1], &path)?,
            index(&triple[2], &path)?,
        ));
    }

    let gt_boxes = match sv.get("gt_boxes") {
        None | Some(Value::Null) => None,
        Some(bv) => {
            let mut boxes = Vec::new();
            for (j, b) in array(bv, "gt_boxes")?.iter().enumerate() {
                let path = format!("gt_boxes {j}");
                let coords = array(b, &path)?;
                if coords.len() != 4 {
                    return Err(Invalid::new(path, "expected [x, y, w, h]"));
                }
                let mut a = [0.0; 4];
                for (slot, c) in a.iter_mut().zip(coords) {
                    *slot = c
                        .as_f64()
                        .ok_or_else(|| Invalid::new(path.clone(), "expected a number"))?;
                }
                // Range checks happen in validate_scene.
                boxes.push(BoundingBox {
                    x: a[0],
                    y: a[1],
                    w: a[2],
                    h: a[3],
                });
            }
            Some(boxes)
        }
    };

    Ok(Scene::new(SceneGraph { entities, edges }, gt_boxes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(
            vec!["sky".into(), "tree".into(), "dog".into()],
            vec!["left of".into(), "above".into()],
        )
        .unwrap()
    }

    const MINIMAL: &str = r#"{"vocab": {"categories": ["sky", "tree"], "predicates": ["left of"]},
        "scenes": [{"entities": [0, 1], "edges": [[0, 0, 1]]}]}"#;

    #[test]
    fn parses_minimal_document() {
        let d = parse_dataset(MINIMAL).unwrap();
        assert_eq!(d.scenes.len(), 1);
        assert_eq!(d.scenes[0].graph.num_entities(), 2);
        assert_eq!(d.scenes[0].graph.num_edges(), 1);
        assert!(d.scenes[0].gt_boxes.is_none());
    }

    #[test]
    fn edge_out_of_range_is_located() {
        let text = r#"{"vocab": {"categories": ["a"], "predicates": ["p"]},
            "scenes": [{"entities": [0, 0], "edges": [[0, 0, 5]]}]}"#;
        let err = parse_dataset(text).unwrap_err();
        assert_eq!(err.to_string(), "scene 0: edge 0: entity index out of range");
    }

    #[test]
    fn box_count_mismatch_rejected() {
        let text = r#"{"vocab": {"categories": ["a"], "predicates": ["p"]},
            "scenes": [{"entities": [0, 0], "edges": [[0, 0, 1]], "gt_boxes": [[0, 0, 1, 1]]}]}"#;
        let err = parse_dataset(text).unwrap_err();
        assert!(err.to_string().starts_with("scene 0: gt_boxes"), "{err}");
    }

    #[test]
    fn missing_field_names_scene_and_field() {
        let text = r#"{"vocab": {"categories": ["a"], "predicates": ["p"]},
            "scenes": [{"entities": [0]}, {"edges": []}]}"#;
        let err = parse_dataset(text).unwrap_err();
        assert!(err.to_string().contains("scene 0"), "{err}");
        assert!(err.to_string().contains("\"edges\""), "{err}");
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let text = "{\"vocab\": \n  {\"categories\": [\"a\",, ]}}";
        match parse_dataset(text).unwrap_err() {
            SceneError::Parse { offset, .. } => {
                assert_eq!(&text[offset..offset + 1], ",");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_edge_rejected() {
        let scene = Scene::new(
            SceneGraph {
                entities: vec![0, 1],
                edges: vec![Edge::new(0, 0, 1), Edge::new(0, 0, 1)],
            },
            None,
        );
        let err = validate_scene(&scene, &vocab()).unwrap_err();
        assert_eq!(err.to_string(), "edge 1: duplicate edge");
    }

    #[test]
    fn degenerate_box_rejected() {
        let scene = Scene::new(
            SceneGraph {
                entities: vec![0, 1],
                edges: vec![Edge::new(0, 0, 1)],
            },
            Some(vec![
                BoundingBox::FULL,
                BoundingBox {
                    x: 0.1,
                    y: 0.1,
                    w: 0.0,
                    h: 0.5,
                },
            ]),
        );
        let err = validate_scene(&scene, &vocab()).unwrap_err();
        assert_eq!(err.to_string(), "gt_boxes 1: degenerate box");
    }

    #[test]
    fn valid_scene_passes() {
        let scene = Scene::new(
            SceneGraph {
                entities: vec![0, 2, 1],
                edges: vec![Edge::new(0, 0, 1), Edge::new(2, 1, 0)],
            },
            Some(vec![BoundingBox::FULL; 3]),
        );
        validate_scene(&scene, &vocab()).unwrap();
    }

    #[test]
    fn self_loop_and_bad_predicate_rejected() {
        let mut scene = Scene::new(
            SceneGraph {
                entities: vec![0, 1],
                edges: vec![Edge::new(1, 0, 1)],
            },
            None,
        );
        assert!(validate_scene(&scene, &vocab()).is_err());
        scene.graph.edges = vec![Edge::new(0, 9, 1)];
        assert_eq!(
            validate_scene(&scene, &vocab()).unwrap_err().to_string(),
            "edge 0: predicate index out of range"
        );
    }

    #[test]
    fn box_slack_on_right_edge() {
        assert!(BoundingBox::new(0.5, 0.0, 0.5 + 5e-7, 1.0).is_ok());
        assert!(BoundingBox::new(0.5, 0.0, 0.5 + 5e-6, 1.0).is_err());
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_empty() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into()], vec!["p".into()]).is_err());
        assert!(Vocabulary::new(vec!["a".into()], vec![]).is_err());
        let v = vocab();
        assert_eq!(v.category_index("dog"), Some(2));
        assert_eq!(v.predicate_index("above"), Some(1));
    }

    #[test]
    fn empty_scene_list_serializes() {
        let d = Dataset::new(vocab(), vec![]).unwrap();
        let text = serialize_dataset(&d);
        assert!(text.contains("\"scenes\": []"), "{text}");
        assert_eq!(parse_dataset(&text).unwrap(), d);
    }

    #[test]
    fn full_box_renders_with_decimal_points() {
        let d = Dataset::new(
            vocab(),
            vec![Scene::new(
                SceneGraph {
                    entities: vec![0, 1],
                    edges: vec![Edge::new(0, 0, 1)],
                },
                Some(vec![BoundingBox::FULL; 2]),
            )],
        )
        .unwrap();
        let text = serialize_dataset(&d);
        assert!(text.contains("[0.0, 0.0, 1.0, 1.0]"), "{text}");
        assert_eq!(parse_dataset(&text).unwrap(), d);
    }

    #[test]
    fn sig9_rounding() {
        assert_eq!(round_sig9(0.123456789012), 0.123456789);
        assert_eq!(round_sig9(1.0), 1.0);
        assert_eq!(round_sig9(round_sig9(1.0 / 3.0)), round_sig9(1.0 / 3.0));
    }

    #[test]
    fn clip_from_keeps_box_inside() {
        let b = BoundingBox::clip_from([0.8, 0.9, 0.7, 0.5]);
        assert!(b.check().is_ok());
        assert!((b.right() - 1.0).abs() < 1e-12);
        assert_eq!(b.x, 0.8);
    }
}
