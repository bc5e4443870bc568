//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use vrlayout::layoutmodel::{loss_graph, Architecture, Mode, ModelDims, ModelParams};
use vrlayout::scenegraph::{BoundingBox, Edge, Scene, SceneGraph};
use vrlayout::tensorgrad::{
    gradient_check_many, gradient_check_smooth, GradCheckReport, Tape, Tensor, TensorError, Var,
};
use vrlayout::Rng;

pub const FD_STEP: f64 = 1e-4;

pub fn random_tensor(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Values with magnitude in [0.1, 1] and random sign, away from ReLU's kink.
pub fn off_kink_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.uniform(0.1, 1.0);
            if rng.coin() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn random_box(rng: &mut Rng, min_side: f64, max_side: f64) -> BoundingBox {
    let w = rng.uniform(min_side, max_side);
    let h = rng.uniform(min_side, max_side);
    let x = rng.uniform(0.0, 1.0 - w);
    let y = rng.uniform(0.0, 1.0 - h);
    BoundingBox::new(x, y, w, h).unwrap()
}

const GRID: usize = 1000;

fn grid_points() -> impl Iterator<Item = (f64, f64)> {
    (0..GRID).flat_map(|r| (0..GRID).map(move |c| ((c as f64 + 0.5) / GRID as f64, (r as f64 + 0.5) / GRID as f64)))
}

fn contains(b: &BoundingBox, (px, py): (f64, f64)) -> bool {
    px >= b.x && px < b.x + b.w && py >= b.y && py < b.y + b.h
}

/// IoU estimated by counting 1000×1000 sample points.
pub fn grid_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (mut both, mut either) = (0usize, 0usize);
    for p in grid_points() {
        let (ia, ib) = (contains(a, p), contains(b, p));
        both += (ia && ib) as usize;
        either += (ia || ib) as usize;
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Union area estimated by counting 1000×1000 sample points.
pub fn grid_coverage(boxes: &[BoundingBox]) -> f64 {
    let hits = grid_points().filter(|&p| boxes.iter().any(|b| contains(b, p))).count();
    hits as f64 / (GRID * GRID) as f64
}

fn corner_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax2, ay2, bx2, by2) = (a.x + a.w, a.y + a.h, b.x + b.w, b.y + b.h);
    let iw = ax2.min(bx2) - a.x.max(b.x);
    let ih = ay2.min(by2) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

pub fn brute_recall(pred: &[BoundingBox], gt: &[BoundingBox], tau: f64) -> f64 {
    let n = pred.len().min(gt.len());
    let mut hits = 0;
    for i in 0..n {
        if corner_iou(&pred[i], &gt[i]) >= tau {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

pub fn brute_r_iou(pred: &[BoundingBox], gt: &[BoundingBox], edges: &[Edge]) -> f64 {
    let mut total = 0.0;
    for e in edges {
        total += corner_iou(&pred[e.subject], &gt[e.subject]) * corner_iou(&pred[e.object], &gt[e.object]);
    }
    total / edges.len() as f64
}

/// Scalar probe `Σ out ⊙ W` with fixed pseudo-random `W`, so every output
/// element contributes a distinct weight to the gradient.
fn probe(tape: &mut Tape, v: Var) -> Result<Var, TensorError> {
    let shape = tape.value(v).shape().to_vec();
    let mut rng = Rng::seed_from_u64(0x5eed ^ (shape[0] * 31 + shape[1]) as u64);
    let w = random_tensor(&mut rng, shape[0], shape[1], -1.0, 1.0);
    let w = tape.constant(w);
    let m = tape.mul(v, w)?;
    tape.sum(m)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>;
type Binary = fn(&mut Tape, Var, Var) -> Result<Var, TensorError>;
type Unary = fn(&mut Tape, Var) -> Result<Var, TensorError>;

fn binary(op: Binary) -> OpFn {
    Box::new(move |tp, v| {
        let o = op(tp, v[0], v[1])?;
        probe(tp, o)
    })
}

fn unary(op: Unary) -> OpFn {
    Box::new(move |tp, v| {
        let o = op(tp, v[0])?;
        probe(tp, o)
    })
}

fn probed(op: impl Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + 'static) -> OpFn {
    Box::new(move |tp, v| {
        let o = op(tp, v)?;
        probe(tp, o)
    })
}

fn onehot_rows(rows: usize, cols: usize) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        data[r * cols + (r * 2 + 1) % cols] = 1.0;
    }
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Maximum relative gradient error of every differentiable tape op, each
/// probed in the shapes and broadcasting forms the model uses.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut rng = Rng::seed_from_u64(2024);
    let r = &mut rng;
    let t = |rng: &mut Rng, m, n| random_tensor(rng, m, n, -1.0, 1.0);
    let positive = |rng: &mut Rng, m, n| random_tensor(rng, m, n, 0.5, 2.0);

    let cases: Vec<(&'static str, OpFn, Vec<Tensor>)> = vec![
        ("matmul", binary(Tape::matmul), vec![t(r, 3, 4), t(r, 4, 2)]),
        ("add", binary(Tape::add), vec![t(r, 3, 4), t(r, 3, 4)]),
        ("add/row", binary(Tape::add), vec![t(r, 3, 4), t(r, 1, 4)]),
        ("add/col", binary(Tape::add), vec![t(r, 3, 4), t(r, 3, 1)]),
        ("add/scalar", binary(Tape::add), vec![t(r, 3, 4), t(r, 1, 1)]),
        ("sub", binary(Tape::sub), vec![t(r, 3, 4), t(r, 3, 4)]),
        ("sub/row", binary(Tape::sub), vec![t(r, 3, 4), t(r, 1, 4)]),
        ("mul", binary(Tape::mul), vec![t(r, 3, 4), t(r, 3, 4)]),
        ("mul/col", binary(Tape::mul), vec![t(r, 3, 4), t(r, 3, 1)]),
        ("mul/self", probed(|tp, v| tp.mul(v[0], v[0])), vec![t(r, 3, 4)]),
        ("div", binary(Tape::div), vec![t(r, 3, 4), positive(r, 3, 4)]),
        ("div/col", binary(Tape::div), vec![t(r, 3, 4), positive(r, 3, 1)]),
        ("div/scalar", binary(Tape::div), vec![t(r, 3, 4), positive(r, 1, 1)]),
        ("scale", probed(|tp, v| tp.scale(v[0], -1.7)), vec![t(r, 2, 3)]),
        ("add_scalar", probed(|tp, v| tp.add_scalar(v[0], 0.3)), vec![t(r, 2, 3)]),
        (
            "concat/0",
            probed(|tp, v| tp.concat(&[v[0], v[1]], 0)),
            vec![t(r, 2, 3), t(r, 1, 3)],
        ),
        (
            "concat/1",
            probed(|tp, v| tp.concat(&[v[0], v[1], v[0]], 1)),
            vec![t(r, 2, 3), t(r, 2, 2)],
        ),
        ("slice/0", probed(|tp, v| tp.slice(v[0], 0, 1, 3)), vec![t(r, 4, 3)]),
        ("slice/1", probed(|tp, v| tp.slice(v[0], 1, 2, 5)), vec![t(r, 2, 6)]),
        ("relu", unary(Tape::relu), vec![off_kink_tensor(r, 3, 5)]),
        ("sigmoid", unary(Tape::sigmoid), vec![random_tensor(r, 3, 4, -3.0, 3.0)]),
        (
            "softmax/1",
            probed(|tp, v| tp.softmax(v[0], 1)),
            vec![random_tensor(r, 3, 6, -2.0, 2.0)],
        ),
        (
            "softmax/0",
            probed(|tp, v| tp.softmax(v[0], 0)),
            vec![random_tensor(r, 4, 2, -2.0, 2.0)],
        ),
        (
            "sum",
            Box::new(|tp: &mut Tape, v: &[Var]| {
                let s = tp.mul(v[0], v[0])?;
                tp.sum(s)
            }),
            vec![t(r, 3, 3)],
        ),
        (
            "mean",
            Box::new(|tp: &mut Tape, v: &[Var]| {
                let s = tp.mul(v[0], v[0])?;
                tp.mean(s)
            }),
            vec![t(r, 3, 3)],
        ),
        ("sum_axis/0", probed(|tp, v| tp.sum_axis(v[0], 0)), vec![t(r, 3, 4)]),
        ("sum_axis/1", probed(|tp, v| tp.sum_axis(v[0], 1)), vec![t(r, 3, 4)]),
        (
            "mse",
            Box::new(|tp: &mut Tape, v: &[Var]| tp.mse(v[0], v[1])),
            vec![t(r, 3, 4), t(r, 3, 4)],
        ),
        (
            "cross_entropy",
            Box::new(|tp: &mut Tape, v: &[Var]| {
                let target = tp.constant(onehot_rows(2, 3));
                tp.cross_entropy(v[0], target)
            }),
            vec![random_tensor(r, 2, 3, 0.05, 0.95)],
        ),
        (
            "softmax+cross_entropy",
            Box::new(|tp: &mut Tape, v: &[Var]| {
                let p = tp.softmax(v[0], 1)?;
                let target = tp.constant(onehot_rows(3, 4));
                tp.cross_entropy(p, target)
            }),
            vec![random_tensor(r, 3, 4, -2.0, 2.0)],
        ),
        (
            "gather_rows",
            probed(|tp, v| tp.gather_rows(v[0], &[0, 2, 2, 1])),
            vec![t(r, 3, 2)],
        ),
        (
            "scatter_add_rows",
            probed(|tp, v| tp.scatter_add_rows(v[0], &[1, 0, 1], 3)),
            vec![t(r, 3, 2)],
        ),
    ];

    cases
        .into_iter()
        .map(|(name, f, xs)| (name, gradient_check_many(f, &xs, FD_STEP).expect(name)))
        .collect()
}

pub fn small_vocab_dims() -> ModelDims {
    ModelDims::new(10, 6, Architecture::default())
}

/// Two entities joined by one "left of" edge, with consistent ground truth.
pub fn two_entity_scene() -> Scene {
    Scene::new(
        SceneGraph {
            entities: vec![3, 7],
            edges: vec![Edge::new(0, 0, 1)],
        },
        Some(vec![
            BoundingBox::new(0.05, 0.3, 0.3, 0.4).unwrap(),
            BoundingBox::new(0.6, 0.2, 0.3, 0.5).unwrap(),
        ]),
    )
}

/// Gradient check of `λ_rel·L_rel + λ_box·box_loss` on [`two_entity_scene`]
/// over every element of the small tensors and a seeded sample of the large
/// ones. Coordinates whose probes cross a ReLU kink are counted, not compared.
pub fn model_gradient_check(mode: Mode, seed: u64) -> GradCheckReport {
    let params = ModelParams::init(small_vocab_dims(), seed);
    let scene = two_entity_scene();
    let mut rng = Rng::seed_from_u64(seed ^ 0xabcdef);
    let mut coords = Vec::new();
    for (ti, t) in params.tensors().iter().enumerate() {
        let n = t.numel();
        if n <= 64 {
            coords.extend((0..n).map(|ci| (ti, ci)));
        } else {
            coords.extend((0..8).map(|_| (ti, rng.below(n))));
        }
    }
    let f = |tape: &mut Tape, vars: &[Var]| {
        loss_graph(tape, vars, &params, &[&scene], mode, 1.0, 1.0)
            .map(|l| l.total)
            .map_err(|e| TensorError::Invalid {
                op: "loss_graph",
                reason: e.to_string(),
            })
    };
    gradient_check_smooth(f, params.tensors(), FD_STEP, &coords).unwrap()
}
