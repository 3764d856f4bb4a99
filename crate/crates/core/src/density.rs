//! Ground-truth density maps from dot annotations.
//!
//! Each annotated point contributes an isotropic Gaussian truncated to a
//! window of radius `ceil(3 * sigma)`. The truncated kernel is renormalised
//! over the pixels that fall inside the image, so every point carries a mass
//! of exactly one and the map sums to the object count.

use std::path::Path;

use crate::error::{read_file, write_file, Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const DEFAULT_SIGMA: f64 = 4.0;

const DMAP_MAGIC: &[u8; 4] = b"DMAP";
const DMAP_VERSION: u32 = 1;
const DMAP_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

/// Object centres for one image. `x` is the sub-pixel column, `y` the row;
/// pixel `(r, c)` covers `[c, c + 1) x [r, r + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DotAnnotation {
    points: Vec<(f64, f64)>,
    width: usize,
    height: usize,
}

impl DotAnnotation {
    pub fn new(points: Vec<(f64, f64)>, width: usize, height: usize) -> Result<Self> {
        let outside: Vec<String> = points
            .iter()
            .filter(|&&(x, y)| {
                !(x.is_finite() && y.is_finite())
                    || x < 0.0
                    || y < 0.0
                    || x >= width as f64
                    || y >= height as f64
            })
            .map(|(x, y)| format!("({x}, {y})"))
            .collect();
        if !outside.is_empty() {
            return Err(Error::invalid(format!(
                "annotation points outside the {width}x{height} image: {}",
                outside.join(", ")
            )));
        }
        Ok(Self {
            points,
            width,
            height,
        })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Row-major `height x width` map. `count()` divides the pixel sum by the
/// magnification, so a ground-truth map scaled for training still reports
/// object counts.
///
/// Ground-truth maps are nonnegative; predicted maps stored in this type may
/// not be.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    magnification: f64,
}

/// Half-open pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(row0: usize, col0: usize, height: usize, width: usize) -> Self {
        Self {
            row0,
            col0,
            height,
            width,
        }
    }
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
            magnification: 1.0,
        }
    }

    pub fn from_values(
        height: usize,
        width: usize,
        values: Vec<f64>,
        magnification: f64,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "density map dims must be >= 1, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::invalid(format!(
                "density map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if !(magnification.is_finite() && magnification > 0.0) {
            return Err(Error::invalid(format!(
                "magnification must be positive, got {magnification}"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            magnification,
        })
    }

    /// Reads batch item `n`, channel 0 of a tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize, magnification: f64) -> Result<Self> {
        let s = t.shape();
        if n >= s.n {
            return Err(Error::invalid(format!("batch index {n} out of range for {s}")));
        }
        let values = t.plane(n, 0).iter().map(|v| v.as_f64()).collect();
        Self::from_values(s.h, s.w, values, magnification)
    }

    /// (1, 1, h, w) tensor holding the raw (possibly magnified) values.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.values.iter().map(|&v| T::of(v)).collect();
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), data)
            .expect("density map dims are valid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn magnification(&self) -> f64 {
        self.magnification
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Object count: pixel sum divided by the magnification.
    pub fn count(&self) -> f64 {
        self.sum() / self.magnification
    }

    /// Multiplies the values by `factor` and records it in the magnification.
    pub fn magnified(&self, factor: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v * factor).collect(),
            magnification: self.magnification * factor,
        }
    }

    /// Physical-unit copy (magnification 1).
    pub fn unmagnified(&self) -> Self {
        let m = self.magnification;
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v / m).collect(),
            magnification: 1.0,
        }
    }

    /// Sum of the raw values over `rect`, without bounds checks beyond slicing.
    /// Full-width rectangles are summed as one contiguous run, so the whole
    /// map gives exactly [`DensityMap::sum`].
    pub fn region_sum(&self, rect: Rect) -> f64 {
        if rect.col0 == 0 && rect.width == self.width {
            let start = rect.row0 * self.width;
            return self.values[start..start + rect.height * self.width].iter().sum();
        }
        let mut s = 0.0;
        for r in rect.row0..rect.row0 + rect.height {
            let row = &self.values[r * self.width..(r + 1) * self.width];
            s += row[rect.col0..rect.col0 + rect.width].iter().sum::<f64>();
        }
        s
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(DMAP_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(DMAP_MAGIC);
        out.extend_from_slice(&DMAP_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.magnification.to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < DMAP_HEADER_LEN {
            return Err(Error::parse(
                bytes.len(),
                format!("density file truncated: {} byte header expected", DMAP_HEADER_LEN),
            ));
        }
        if &bytes[0..4] != DMAP_MAGIC {
            return Err(Error::parse(0, "bad magic, expected DMAP"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != DMAP_VERSION {
            return Err(Error::parse(4, format!("unsupported density version {version}")));
        }
        let height = u32_at(8) as usize;
        let width = u32_at(12) as usize;
        let magnification = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let expected = DMAP_HEADER_LEN + 4 * height * width;
        if bytes.len() != expected {
            return Err(Error::parse(
                bytes.len().min(expected),
                format!(
                    "density payload for {height}x{width} needs {expected} bytes, file has {}",
                    bytes.len()
                ),
            ));
        }
        let values = bytes[DMAP_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_values(height, width, values, magnification)
            .map_err(|e| Error::parse(8, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// Sums one unit-mass truncated Gaussian per annotated point.
pub fn make_density(ann: &DotAnnotation, sigma: f64) -> Result<DensityMap> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = (ann.height, ann.width);
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("image dims must be >= 1, got {w}x{h}")));
    }
    let mut map = DensityMap::zeros(h, w);
    let radius = (3.0 * sigma).ceil() as usize;
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut kernel = Vec::new();
    for &(x, y) in &ann.points {
        let (cx, cy) = (x.floor() as usize, y.floor() as usize);
        let (r0, r1) = (cy.saturating_sub(radius), (cy + radius).min(h - 1));
        let (c0, c1) = (cx.saturating_sub(radius), (cx + radius).min(w - 1));
        kernel.clear();
        let mut mass = 0.0;
        for r in r0..=r1 {
            let dy = r as f64 + 0.5 - y;
            for c in c0..=c1 {
                let dx = c as f64 + 0.5 - x;
                let v = (-(dx * dx + dy * dy) * inv_two_var).exp();
                mass += v;
                kernel.push(v);
            }
        }
        if mass > 0.0 {
            let cols = c1 - c0 + 1;
            for (i, v) in kernel.iter().enumerate() {
                map.values[(r0 + i / cols) * w + c0 + i % cols] += v / mass;
            }
        } else {
            // sigma so small that every tap underflowed
            map.values[cy * w + cx] += 1.0;
        }
    }
    Ok(map)
}

/// Sub-map over `rect`. Kernels straddling the border lose the mass that
/// falls outside the rectangle.
pub fn crop_density(d: &DensityMap, rect: Rect) -> Result<DensityMap> {
    if rect.height == 0
        || rect.width == 0
        || rect.row0 + rect.height > d.height
        || rect.col0 + rect.width > d.width
    {
        return Err(Error::invalid(format!(
            "crop {rect:?} outside the {}x{} map",
            d.height, d.width
        )));
    }
    let mut values = Vec::with_capacity(rect.height * rect.width);
    for r in rect.row0..rect.row0 + rect.height {
        let start = r * d.width + rect.col0;
        values.extend_from_slice(&d.values[start..start + rect.width]);
    }
    DensityMap::from_values(rect.height, rect.width, values, d.magnification)
}
