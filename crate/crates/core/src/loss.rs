//! Pixel L2 loss, grid loss and the deeply-supervised combined objective.
//!
//! All losses take `(n, 1, H, W)` tensors and average over the batch, so for
//! `n == 1` they are exactly the per-image formulas. Sums are accumulated in
//! f64 regardless of the tensor precision.

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Real, Tensor};

/// Half-open rectangle `[row0, row1) x [col0, col1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cell {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Cell {
    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }
}

/// Disjoint rectangular cells tiling an `h x w` map, with a per-pixel lookup
/// of the owning cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridPartition {
    height: usize,
    width: usize,
    cells: Vec<Cell>,
    owner: Vec<usize>,
}

/// Boundaries `floor(i * len / parts)` for `i = 0..=parts`.
fn even_cuts(len: usize, parts: usize) -> Vec<usize> {
    (0..=parts).map(|i| i * len / parts).collect()
}

/// `g x g` cells whose sides differ by at most one pixel.
pub fn make_partition(h: usize, w: usize, g: usize) -> Result<GridPartition> {
    if g == 0 || g > h.min(w) {
        return Err(Error::invalid(format!(
            "grid size {g} must be in 1..={} for a {h}x{w} map",
            h.min(w)
        )));
    }
    GridPartition::from_cuts(h, w, &even_cuts(h, g), &even_cuts(w, g))
}

impl GridPartition {
    /// Cells from the cross product of row and column cut points. Cuts must
    /// start at 0, end at the map size and be strictly increasing.
    pub fn from_cuts(h: usize, w: usize, row_cuts: &[usize], col_cuts: &[usize]) -> Result<Self> {
        for (name, cuts, len) in [("row", row_cuts, h), ("col", col_cuts, w)] {
            let ok = cuts.len() >= 2
                && cuts[0] == 0
                && *cuts.last().unwrap() == len
                && cuts.windows(2).all(|p| p[0] < p[1]);
            if !ok {
                return Err(Error::invalid(format!(
                    "{name} cuts {cuts:?} do not split 0..{len} into non-empty pieces"
                )));
            }
        }
        let mut cells = Vec::with_capacity((row_cuts.len() - 1) * (col_cuts.len() - 1));
        for r in row_cuts.windows(2) {
            for c in col_cuts.windows(2) {
                cells.push(Cell {
                    row0: r[0],
                    row1: r[1],
                    col0: c[0],
                    col1: c[1],
                });
            }
        }
        Self::from_cells(h, w, cells)
    }

    /// Validates that `cells` cover every pixel exactly once.
    pub fn from_cells(h: usize, w: usize, cells: Vec<Cell>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!("partition of an empty {h}x{w} map")));
        }
        let mut owner = vec![usize::MAX; h * w];
        for (j, c) in cells.iter().enumerate() {
            if c.row0 >= c.row1 || c.col0 >= c.col1 || c.row1 > h || c.col1 > w {
                return Err(Error::invalid(format!("cell {c:?} is empty or outside {h}x{w}")));
            }
            for r in c.row0..c.row1 {
                for col in c.col0..c.col1 {
                    let o = &mut owner[r * w + col];
                    if *o != usize::MAX {
                        return Err(Error::invalid(format!(
                            "cells {} and {j} overlap at ({r}, {col})",
                            *o
                        )));
                    }
                    *o = j;
                }
            }
        }
        if let Some(p) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::invalid(format!(
                "pixel ({}, {}) is not covered by any cell",
                p / w,
                p % w
            )));
        }
        Ok(Self {
            height: h,
            width: w,
            cells,
            owner,
        })
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Index of the cell owning flat pixel `p`.
    #[inline]
    pub fn owner(&self, p: usize) -> usize {
        self.owner[p]
    }

    /// Sum of `values` (row-major, one map) within every cell.
    pub fn cell_sums(&self, values: impl Iterator<Item = f64>) -> Vec<f64> {
        let mut sums = vec![0.0; self.cells.len()];
        for (p, v) in values.enumerate() {
            sums[self.owner[p]] += v;
        }
        sums
    }
}

/// Per-stage weights: `alpha` scales each side-output loss, `lambda` mixes
/// pixel (`1 - lambda`) and grid (`lambda`) terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl LossWeights {
    pub fn uniform(stages: usize, alpha: f64, lambda: f64) -> Self {
        Self {
            alpha: vec![alpha; stages],
            lambda: vec![lambda; stages],
        }
    }

    pub fn validate(&self, stages: usize) -> Result<()> {
        if self.alpha.len() != stages || self.lambda.len() != stages {
            return Err(Error::invalid(format!(
                "{stages} side outputs but {} alpha and {} lambda weights",
                self.alpha.len(),
                self.lambda.len()
            )));
        }
        if self.alpha.iter().any(|&a| !(a >= 0.0 && a.is_finite())) {
            return Err(Error::invalid(format!("alpha must be >= 0: {:?}", self.alpha)));
        }
        if self.lambda.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
            return Err(Error::invalid(format!("lambda must lie in [0, 1]: {:?}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct GridLossOutput<T> {
    /// `sum_j m_j^2` with `m_j` the mean error of cell `j`.
    pub value: f64,
    /// `sum_j |b_j| m_j^2`: the per-pixel grid field summed over the map.
    pub field_sum: f64,
    /// Gradient of `field_sum`: `2 m_j` at every pixel of cell `j`.
    pub grad: Tensor<T>,
    /// Gradient of `value`: `2 m_j / |b_j|`.
    pub grad_value: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct CombinedLossOutput<T> {
    pub value: f64,
    /// Weighted contribution of each stage to `value`.
    pub per_stage: Vec<f64>,
    /// Gradient w.r.t. each side output, ready for `model_backward`.
    pub grads: Vec<Tensor<T>>,
}

fn check_maps<T: Real>(es: &Tensor<T>, gt: &Tensor<T>) -> Result<()> {
    ensure_same_shape("loss", es.shape(), gt.shape())?;
    if es.shape().c != 1 {
        return Err(Error::invalid(format!(
            "density maps must have one channel, got {}",
            es.shape()
        )));
    }
    Ok(())
}

fn check_partition<T: Real>(es: &Tensor<T>, part: &GridPartition) -> Result<()> {
    let s = es.shape();
    if (part.height, part.width) != (s.h, s.w) {
        return Err(Error::invalid(format!(
            "partition covers {}x{} but maps are {}x{}",
            part.height, part.width, s.h, s.w
        )));
    }
    Ok(())
}

/// Per-image errors `es - gt` in f64.
fn errors<T: Real>(es: &Tensor<T>, gt: &Tensor<T>, n: usize) -> Vec<f64> {
    es.plane(n, 0)
        .iter()
        .zip(gt.plane(n, 0))
        .map(|(&a, &b)| a.as_f64() - b.as_f64())
        .collect()
}

/// `(1/N) sum_p (es - gt)^2`, gradient `(2/N)(es - gt)`.
pub fn pixel_loss<T: Real>(es: &Tensor<T>, gt: &Tensor<T>) -> Result<LossOutput<T>> {
    check_maps(es, gt)?;
    let s = es.shape();
    let scale = 1.0 / (s.n * s.plane()) as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(s);
    for b in 0..s.n {
        let e = errors(es, gt, b);
        value += e.iter().map(|v| v * v).sum::<f64>() * scale;
        for (g, v) in grad.plane_mut(b, 0).iter_mut().zip(&e) {
            *g = T::of(2.0 * v * scale);
        }
    }
    Ok(LossOutput { value, grad })
}

/// Squared mean error per cell. Each pixel is tied to its cell's mean
/// error, so the loss only sees cell totals, not the layout inside a cell.
pub fn grid_loss<T: Real>(
    es: &Tensor<T>,
    gt: &Tensor<T>,
    part: &GridPartition,
) -> Result<GridLossOutput<T>> {
    check_maps(es, gt)?;
    check_partition(es, part)?;
    let s = es.shape();
    let inv_n = 1.0 / s.n as f64;
    let (mut value, mut field_sum) = (0.0, 0.0);
    let mut grad = Tensor::zeros(s);
    let mut grad_value = Tensor::zeros(s);
    for b in 0..s.n {
        let means = cell_means(part, &errors(es, gt, b));
        for (m, c) in means.iter().zip(&part.cells) {
            value += m * m * inv_n;
            field_sum += c.area() as f64 * m * m * inv_n;
        }
        let gp = grad.plane_mut(b, 0);
        for (p, g) in gp.iter_mut().enumerate() {
            *g = T::of(2.0 * means[part.owner[p]] * inv_n);
        }
        let gv = grad_value.plane_mut(b, 0);
        for (p, g) in gv.iter_mut().enumerate() {
            let j = part.owner[p];
            *g = T::of(2.0 * means[j] / part.cells[j].area() as f64 * inv_n);
        }
    }
    Ok(GridLossOutput {
        value,
        field_sum,
        grad,
        grad_value,
    })
}

fn cell_means(part: &GridPartition, err: &[f64]) -> Vec<f64> {
    let mut sums = part.cell_sums(err.iter().copied());
    for (s, c) in sums.iter_mut().zip(&part.cells) {
        *s /= c.area() as f64;
    }
    sums
}

/// `(1/N) sum_p sum_s alpha_s [(1 - lambda_s) (es_s(p) - gt(p))^2 + lambda_s m_s(p)^2]`
/// where `m_s(p)` is the mean error of the cell containing `p`.
pub fn combined_loss<T: Real>(
    sides: &[&Tensor<T>],
    gt: &Tensor<T>,
    weights: &LossWeights,
    part: &GridPartition,
) -> Result<CombinedLossOutput<T>> {
    if sides.is_empty() {
        return Err(Error::invalid("combined loss needs at least one side output"));
    }
    weights.validate(sides.len())?;
    let s = gt.shape();
    let scale = 1.0 / (s.n * s.plane()) as f64;
    let mut per_stage = Vec::with_capacity(sides.len());
    let mut grads = Vec::with_capacity(sides.len());
    for (k, es) in sides.iter().enumerate() {
        check_maps(es, gt)?;
        check_partition(es, part)?;
        let (alpha, lambda) = (weights.alpha[k], weights.lambda[k]);
        let mut value = 0.0;
        let mut grad = Tensor::zeros(s);
        for b in 0..s.n {
            let e = errors(es, gt, b);
            let means = cell_means(part, &e);
            let sq: f64 = e.iter().map(|v| v * v).sum();
            let field: f64 = means
                .iter()
                .zip(&part.cells)
                .map(|(m, c)| c.area() as f64 * m * m)
                .sum();
            value += alpha * scale * ((1.0 - lambda) * sq + lambda * field);
            let gp = grad.plane_mut(b, 0);
            for (p, g) in gp.iter_mut().enumerate() {
                let m = means[part.owner[p]];
                *g = T::of(alpha * scale * 2.0 * ((1.0 - lambda) * e[p] + lambda * m));
            }
        }
        per_stage.push(value);
        grads.push(grad);
    }
    Ok(CombinedLossOutput {
        value: per_stage.iter().sum(),
        per_stage,
        grads,
    })
}
