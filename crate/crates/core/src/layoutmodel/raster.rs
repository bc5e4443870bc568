//! Transfer of refined boxes and their embeddings onto a `G×G×D` grid.
//!
//! Cell `(r, c)` covers `[c/G, (c+1)/G) × [r/G, (r+1)/G)`; rows run top to
//! bottom like the box `y` coordinate.

use super::ModelError;
use crate::scenegraph::BoundingBox;

pub const DEFAULT_GRID: usize = 64;

/// Row-major `size × size` binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub size: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.size + c]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }
}

/// Cells whose centers lie in `[x, x+w) × [y, y+h)`.
pub fn rasterize_mask(b: &BoundingBox, size: usize) -> Mask {
    let g = size as f64;
    let mut cells = vec![false; size * size];
    for r in 0..size {
        let cy = (r as f64 + 0.5) / g;
        if cy < b.y || cy >= b.bottom() {
            continue;
        }
        for c in 0..size {
            let cx = (c as f64 + 0.5) / g;
            cells[r * size + c] = cx >= b.x && cx < b.right();
        }
    }
    Mask { size, cells }
}

/// Fraction of each of the `size` unit cells along one axis covered by
/// `[lo, hi)`, with both bounds given in cell units.
fn axis_coverage(lo: f64, hi: f64, size: usize) -> Vec<f64> {
    (0..size)
        .map(|i| {
            let (a, b) = (i as f64, i as f64 + 1.0);
            (hi.min(b) - lo.max(a)).clamp(0.0, 1.0)
        })
        .collect()
}

/// `G×G×D` grid, index `(r, c, d)` at `(r·G + c)·D + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutGrid {
    pub size: usize,
    pub depth: usize,
    pub data: Vec<f64>,
}

impl LayoutGrid {
    pub fn zeros(size: usize, depth: usize) -> Self {
        Self {
            size,
            depth,
            data: vec![0.0; size * size * depth],
        }
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.size + c) * self.depth;
        &self.data[i..i + self.depth]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.size, self.size, self.depth]
    }
}

/// Broadcasts `embedding` over the box: cells fully inside carry the whole
/// vector, cells straddling the border carry it scaled by the product of
/// their per-axis coverage, cells outside are zero.
pub fn warp_embedding(embedding: &[f64], b: &BoundingBox, size: usize) -> LayoutGrid {
    let g = size as f64;
    let cov_x = axis_coverage(b.x * g, b.right() * g, size);
    let cov_y = axis_coverage(b.y * g, b.bottom() * g, size);
    let depth = embedding.len();
    let mut grid = LayoutGrid::zeros(size, depth);
    for (r, &wy) in cov_y.iter().enumerate() {
        if wy == 0.0 {
            continue;
        }
        for (c, &wx) in cov_x.iter().enumerate() {
            if wx == 0.0 {
                continue;
            }
            let k = wy * wx;
            let i = (r * size + c) * depth;
            for (o, e) in grid.data[i..i + depth].iter_mut().zip(embedding) {
                *o = k * e;
            }
        }
    }
    grid
}

/// Element-wise sum of entity layouts. Terms are added in sorted order so the
/// result is bit-identical under any permutation of `layouts`.
pub fn compose_layout(layouts: &[LayoutGrid]) -> Result<LayoutGrid, ModelError> {
    let first = layouts.first().ok_or(ModelError::EmptyLayout)?;
    for l in layouts {
        if l.size != first.size || l.depth != first.depth {
            return Err(ModelError::CountMismatch {
                what: "layout grid cells",
                expected: first.data.len(),
                found: l.data.len(),
            });
        }
    }
    let mut out = LayoutGrid::zeros(first.size, first.depth);
    let mut terms = Vec::with_capacity(layouts.len());
    for (i, o) in out.data.iter_mut().enumerate() {
        terms.clear();
        terms.extend(layouts.iter().map(|l| l.data[i]).filter(|v| *v != 0.0));
        terms.sort_by(f64::total_cmp);
        *o = terms.iter().fold(0.0, |acc, v| acc + v);
    }
    Ok(out)
}
