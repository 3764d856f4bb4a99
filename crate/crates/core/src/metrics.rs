//! Counting metrics: MAE, rooted MSE, GAME and the local/global error bound.
//!
//! All counts are in physical units: a map's pixel sum divided by its
//! magnification. ROI masks are applied by zeroing both maps outside the mask
//! before any metric.

use serde::Serialize;

use crate::density::{DensityMap, Rect};
use crate::error::{Error, Result};
use crate::loss::{Cell, GridPartition};

/// Binary region-of-interest mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoiMask {
    height: usize,
    width: usize,
    inside: Vec<bool>,
}

impl RoiMask {
    pub fn new(height: usize, width: usize, inside: Vec<bool>) -> Result<Self> {
        if inside.len() != height * width {
            return Err(Error::invalid(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                inside.len()
            )));
        }
        Ok(Self {
            height,
            width,
            inside,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn inside(&self) -> &[bool] {
        &self.inside
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            inside: self.inside.iter().map(|b| !b).collect(),
        }
    }
}

fn ensure_same_dims(a: &DensityMap, b: &DensityMap) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::invalid(format!(
            "density maps differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Copy of `d` with every pixel outside `roi` set to zero.
pub fn apply_roi(d: &DensityMap, roi: &RoiMask) -> Result<DensityMap> {
    if (roi.height, roi.width) != (d.height(), d.width()) {
        return Err(Error::invalid(format!(
            "ROI mask {}x{} does not match density map {}x{}",
            roi.height,
            roi.width,
            d.height(),
            d.width()
        )));
    }
    let mut out = d.clone();
    for (v, &keep) in out.values_mut().iter_mut().zip(&roi.inside) {
        if !keep {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Object count of the map, optionally restricted to a mask.
pub fn count(d: &DensityMap, roi: Option<&RoiMask>) -> Result<f64> {
    match roi {
        Some(m) => Ok(apply_roi(d, m)?.count()),
        None => Ok(d.count()),
    }
}

/// Mean absolute error over `(c_es, c_gt)` pairs.
pub fn mae(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("MAE of an empty list"));
    }
    Ok(pairs.iter().map(|(e, g)| (e - g).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Rooted mean squared error, `sqrt(mean((c_es - c_gt)^2))`, as is customary
/// in the counting literature despite the name.
pub fn mse(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("MSE of an empty list"));
    }
    let mean = pairs.iter().map(|(e, g)| (e - g) * (e - g)).sum::<f64>() / pairs.len() as f64;
    Ok(mean.sqrt())
}

/// The `4^level` regions of an `h x w` map obtained by splitting into
/// quadrants `level` times, midpoint `lo + (hi - lo) / 2`. Regions of maps
/// smaller than `2^level` may be empty.
pub fn game_regions(h: usize, w: usize, level: u32) -> Vec<Cell> {
    let mut regions = vec![Cell {
        row0: 0,
        row1: h,
        col0: 0,
        col1: w,
    }];
    for _ in 0..level {
        regions = regions
            .into_iter()
            .flat_map(|c| {
                let rm = c.row0 + (c.row1 - c.row0) / 2;
                let cm = c.col0 + (c.col1 - c.col0) / 2;
                [
                    (c.row0, rm, c.col0, cm),
                    (c.row0, rm, cm, c.col1),
                    (rm, c.row1, c.col0, cm),
                    (rm, c.row1, cm, c.col1),
                ]
                .map(|(row0, row1, col0, col1)| Cell {
                    row0,
                    row1,
                    col0,
                    col1,
                })
            })
            .collect();
    }
    regions
}

fn region_count(d: &DensityMap, c: &Cell) -> f64 {
    d.region_sum(Rect::new(c.row0, c.col0, c.row1 - c.row0, c.col1 - c.col0)) / d.magnification()
}

/// Per-image GAME: `sum_l |C_es^l - C_gt^l|` over the `4^level` regions.
/// Level 0 is the absolute count error.
pub fn game(d_es: &DensityMap, d_gt: &DensityMap, level: u32) -> Result<f64> {
    ensure_same_dims(d_es, d_gt)?;
    Ok(game_regions(d_es.height(), d_es.width(), level)
        .iter()
        .map(|c| (region_count(d_es, c) - region_count(d_gt, c)).abs())
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundCheck {
    /// `|sum_p (gt - es)|`
    pub global_err: f64,
    /// `sum_j |sum_{p in b_j} (gt - es)|`
    pub sum_local_errs: f64,
    pub holds: bool,
}

/// The global absolute count error never exceeds the sum of the per-cell
/// absolute errors, for any partition.
pub fn bound_check(d_es: &DensityMap, d_gt: &DensityMap, part: &GridPartition) -> Result<BoundCheck> {
    ensure_same_dims(d_es, d_gt)?;
    if (part.height(), part.width()) != (d_es.height(), d_es.width()) {
        return Err(Error::invalid("partition does not match the density maps"));
    }
    let (me, mg) = (d_es.magnification(), d_gt.magnification());
    let diff = d_gt
        .values()
        .iter()
        .zip(d_es.values())
        .map(|(g, e)| g / mg - e / me);
    let locals = part.cell_sums(diff.clone());
    let global_err = diff.sum::<f64>().abs();
    let sum_local_errs: f64 = locals.iter().map(|v| v.abs()).sum();
    Ok(BoundCheck {
        global_err,
        sum_local_errs,
        holds: global_err <= sum_local_errs + 1e-9,
    })
}

/// Bound diagnostics for every `(name, prediction, ground truth)` item on a
/// `g x g` grid (clamped to the map size).
pub fn bound_checks(items: &[(String, DensityMap, DensityMap)], g: usize) -> Result<Vec<(String, BoundCheck)>> {
    items
        .iter()
        .map(|(name, es, gt)| {
            let g = g.min(gt.height()).min(gt.width());
            let part = crate::loss::make_partition(gt.height(), gt.width(), g)?;
            Ok((name.clone(), bound_check(es, gt, &part)?))
        })
        .collect()
}

/// `image,global_err,sum_local_errs,holds`
pub fn bounds_csv(checks: &[(String, BoundCheck)]) -> String {
    let mut out = String::from("image,global_err,sum_local_errs,holds\n");
    for (name, b) in checks {
        out.push_str(&format!("{name},{},{},{}\n", b.global_err, b.sum_local_errs, b.holds));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageCounts {
    pub image: String,
    pub c_gt: f64,
    pub c_es: f64,
    /// GAME for levels `0..=max_level`; `game[0]` is the absolute error.
    pub game: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountReport {
    pub images: Vec<ImageCounts>,
    pub mae: f64,
    pub mse: f64,
    /// Dataset GAME (mean over images) for levels `0..=max_level`.
    pub game: Vec<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    mae: f64,
    mse: f64,
    game: &'a [f64],
}

impl CountReport {
    /// Builds the report from `(name, prediction, ground truth)` triples.
    pub fn from_maps(
        items: &[(String, DensityMap, DensityMap)],
        max_level: u32,
        roi: Option<&[RoiMask]>,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("cannot report on zero images"));
        }
        if let Some(r) = roi {
            if r.len() != items.len() {
                return Err(Error::invalid(format!(
                    "{} ROI masks for {} images",
                    r.len(),
                    items.len()
                )));
            }
        }
        let mut images = Vec::with_capacity(items.len());
        for (i, (name, es, gt)) in items.iter().enumerate() {
            let (es, gt) = match roi {
                Some(r) => (apply_roi(es, &r[i])?, apply_roi(gt, &r[i])?),
                None => (es.clone(), gt.clone()),
            };
            let game = (0..=max_level)
                .map(|l| game(&es, &gt, l))
                .collect::<Result<Vec<_>>>()?;
            images.push(ImageCounts {
                image: name.clone(),
                c_gt: gt.count(),
                c_es: es.count(),
                game,
            });
        }
        let pairs: Vec<(f64, f64)> = images.iter().map(|r| (r.c_es, r.c_gt)).collect();
        let m = images.len() as f64;
        let game = (0..=max_level as usize)
            .map(|l| images.iter().map(|r| r.game[l]).sum::<f64>() / m)
            .collect();
        Ok(Self {
            mae: mae(&pairs)?,
            mse: mse(&pairs)?,
            game,
            images,
        })
    }

    pub fn max_level(&self) -> usize {
        self.game.len() - 1
    }

    /// `image,c_gt,c_es,abs_err,game1,...,gameL`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,c_gt,c_es,abs_err");
        for l in 1..=self.max_level() {
            out.push_str(&format!(",game{l}"));
        }
        out.push('\n');
        for r in &self.images {
            out.push_str(&format!("{},{},{},{}", r.image, r.c_gt, r.c_es, r.game[0]));
            for g in &r.game[1..] {
                out.push_str(&format!(",{g}"));
            }
            out.push('\n');
        }
        out
    }

    /// `{"mae": .., "mse": .., "game": [..]}`
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&Summary {
            mae: self.mae,
            mse: self.mse,
            game: &self.game,
        })
        .expect("summary serializes")
    }
}
