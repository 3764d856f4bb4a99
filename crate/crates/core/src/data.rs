//! Dataset I/O (PGM images, CSV annotations, ROI masks, index files) and the
//! synthetic scene generator used for desk-scale experiments.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::density::{make_density, DensityMap, DotAnnotation};
use crate::error::{read_file, write_file, Error, Result};
use crate::metrics::RoiMask;
use crate::tensor::{Real, Shape, Tensor};

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "image {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// (1, 1, h, w) tensor with intensities scaled to [0, 1].
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.pixels.iter().map(|&p| T::of(p as f64 / 255.0)).collect();
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), data).expect("valid dims")
    }

    /// Binary P5 with maxval 255 and a single newline after each header field group.
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let (width, height, maxval, start) = parse_pgm_header(bytes)?;
        if maxval > 255 {
            return Err(Error::parse(
                start,
                format!("16-bit PGM (maxval {maxval}) is not supported"),
            ));
        }
        let need = width * height;
        let have = bytes.len() - start;
        if have < need {
            return Err(Error::parse(
                bytes.len(),
                format!("truncated pixel data: {have} of {need} bytes"),
            ));
        }
        if have > need {
            return Err(Error::parse(start + need, format!("{} trailing bytes", have - need)));
        }
        Self::new(width, height, bytes[start..].to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode_pgm())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode_pgm(&read_file(path)?)
    }
}

/// Returns (width, height, maxval, offset of the first pixel byte).
fn parse_pgm_header(bytes: &[u8]) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::parse(0, "bad magic, expected P5"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        let ws_start = pos;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if pos == ws_start {
            return Err(Error::parse(pos, "expected whitespace in PGM header"));
        }
        let digits_start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == digits_start {
            let what = ["width", "height", "maxval"][i];
            return Err(Error::parse(pos, format!("expected {what} in PGM header")));
        }
        let text = std::str::from_utf8(&bytes[digits_start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::parse(digits_start, format!("number {text} out of range")))?;
        if *field == 0 {
            return Err(Error::parse(digits_start, "PGM header values must be positive"));
        }
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::parse(pos, "expected a whitespace byte after maxval")),
    }
    Ok((fields[0], fields[1], fields[2], pos))
}

/// One `x,y` line per point.
pub fn encode_annotation(points: &[(f64, f64)]) -> String {
    points.iter().map(|(x, y)| format!("{x},{y}\n")).collect()
}

/// Parses `x,y` lines; blank lines are skipped. Errors carry the byte offset
/// of the offending line.
pub fn decode_annotation(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::new();
    let mut offset = 0;
    for (lineno, line) in text.split_inclusive('\n').enumerate() {
        let body = line.trim();
        if !body.is_empty() {
            let parsed = body.split_once(',').and_then(|(x, y)| {
                Some((x.trim().parse::<f64>().ok()?, y.trim().parse::<f64>().ok()?))
            });
            match parsed {
                Some(p) => points.push(p),
                None => {
                    return Err(Error::parse(
                        offset,
                        format!("line {}: expected `x,y`, got {body:?}", lineno + 1),
                    ))
                }
            }
        }
        offset += line.len();
    }
    Ok(points)
}

pub fn save_annotation(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    write_file(path, encode_annotation(points).as_bytes())
}

/// Loads an annotation for an image of the given size, validating bounds.
pub fn load_annotation(path: &Path, width: usize, height: usize) -> Result<DotAnnotation> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::parse(e.valid_up_to(), "annotation is not UTF-8"))?;
    DotAnnotation::new(decode_annotation(text)?, width, height)
}

/// ROI mask from a PGM where 255 marks the region and 0 the outside.
pub fn load_roi(path: &Path) -> Result<RoiMask> {
    let bytes = read_file(path)?;
    let img = GrayImage::decode_pgm(&bytes)?;
    let start = bytes.len() - img.pixels.len();
    let mut inside = Vec::with_capacity(img.pixels.len());
    for (i, &p) in img.pixels.iter().enumerate() {
        match p {
            0 => inside.push(false),
            255 => inside.push(true),
            v => return Err(Error::parse(start + i, format!("ROI value {v} is neither 0 nor 255"))),
        }
    }
    RoiMask::new(img.height, img.width, inside)
}

pub fn roi_to_image(roi: &RoiMask) -> GrayImage {
    let px = roi.inside().iter().map(|&b| if b { 255 } else { 0 }).collect();
    GrayImage::new(roi.width(), roi.height(), px).expect("mask dims are valid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexRecord {
    pub split: Split,
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub roi: Option<PathBuf>,
}

/// `split<TAB>image<TAB>annotation[<TAB>roi]` per line; paths are relative
/// to the index file's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub records: Vec<IndexRecord>,
}

/// One loaded image with its ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub image: GrayImage,
    pub annotation: DotAnnotation,
    /// Ground-truth density in physical units (magnification 1).
    pub density: DensityMap,
    pub roi: Option<RoiMask>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<Sample> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

impl DatasetIndex {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        let mut offset = 0;
        for (lineno, line) in text.split_inclusive('\n').enumerate() {
            let body = line.trim_end_matches(['\n', '\r']);
            if !body.trim().is_empty() {
                let cols: Vec<&str> = body.split('\t').collect();
                if !(3..=4).contains(&cols.len()) {
                    return Err(Error::parse(
                        offset,
                        format!(
                            "line {}: expected 3 or 4 tab-separated fields, got {}",
                            lineno + 1,
                            cols.len()
                        ),
                    ));
                }
                let split = cols[0]
                    .parse()
                    .map_err(|e: Error| Error::parse(offset, format!("line {}: {e}", lineno + 1)))?;
                records.push(IndexRecord {
                    split,
                    image: cols[1].into(),
                    annotation: cols[2].into(),
                    roi: cols.get(3).map(PathBuf::from),
                });
            }
            offset += line.len();
        }
        Ok(Self {
            root: root.into(),
            records,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::parse(e.valid_up_to(), "index is not UTF-8"))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(text, root)
    }

    pub fn encode(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}",
                r.split,
                r.image.display(),
                r.annotation.display()
            ));
            if let Some(roi) = &r.roi {
                out.push_str(&format!("\t{}", roi.display()));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.encode().as_bytes())
    }

    /// Loads and validates every record, reporting all failures at once.
    pub fn load_dataset(&self, sigma: f64) -> Result<Dataset> {
        let mut ds = Dataset::default();
        let mut problems = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            match self.load_record(r, sigma) {
                Ok(s) => ds.split_mut(r.split).push(s),
                Err(e) => problems.push(format!("record {} ({}): {e}", i + 1, r.image.display())),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Index(problems));
        }
        Ok(ds)
    }

    fn load_record(&self, r: &IndexRecord, sigma: f64) -> Result<Sample> {
        let image = GrayImage::load(&self.root.join(&r.image))?;
        let annotation = load_annotation(&self.root.join(&r.annotation), image.width, image.height)?;
        let density = make_density(&annotation, sigma)?;
        let roi = match &r.roi {
            Some(p) => {
                let m = load_roi(&self.root.join(p))?;
                if (m.height(), m.width()) != (image.height, image.width) {
                    return Err(Error::invalid(format!(
                        "ROI {}x{} does not match image {}x{}",
                        m.width(),
                        m.height(),
                        image.width,
                        image.height
                    )));
                }
                Some(m)
            }
            None => None,
        };
        let name = r
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Sample {
            name,
            image,
            annotation,
            density,
            roi,
        })
    }
}

/// Parameters of a synthetic scene: bright Gaussian blobs on a noisy
/// background, with blob size growing linearly from the top row (`blob_sigma_top`)
/// to the bottom row (`blob_sigma_bottom`) to mimic perspective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub blob_sigma_top: f64,
    pub blob_sigma_bottom: f64,
    pub background: f64,
    pub amplitude: f64,
    /// Half-width of the uniform per-pixel noise.
    pub noise: f64,
    /// Number of cluster centres; a `cluster_fraction` of the objects is drawn
    /// around them, the rest uniformly.
    pub clusters: usize,
    pub cluster_fraction: f64,
    pub cluster_spread: f64,
    /// Unannotated wide faint blobs acting as background clutter.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            count_min: 5,
            count_max: 40,
            blob_sigma_top: 0.8,
            blob_sigma_bottom: 2.4,
            background: 40.0,
            amplitude: 150.0,
            noise: 12.0,
            clusters: 2,
            cluster_fraction: 0.5,
            cluster_spread: 6.0,
            distractors: 2,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let problems = [
            (self.width == 0 || self.height == 0, "width and height must be positive"),
            (self.count_min > self.count_max, "count_min must not exceed count_max"),
            (
                !(self.blob_sigma_top > 0.0 && self.blob_sigma_top <= self.blob_sigma_bottom),
                "need 0 < blob_sigma_top <= blob_sigma_bottom",
            ),
            (!(0.0..=1.0).contains(&self.cluster_fraction), "cluster_fraction must lie in [0, 1]"),
            (self.noise < 0.0 || self.cluster_spread < 0.0, "noise and spread must be >= 0"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::Config(format!("scene spec: {msg}"))),
            None => Ok(()),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}

/// Renders one scene; the annotation holds the exact blob centres.
pub fn gen_scene(spec: &SceneSpec) -> Result<(GrayImage, DotAnnotation)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let count = rng.random_range(spec.count_min..=spec.count_max);
    let centres: Vec<(f64, f64)> = (0..spec.clusters)
        .map(|_| (rng.random::<f64>() * w as f64, rng.random::<f64>() * h as f64))
        .collect();
    let spread = Normal::new(0.0, spec.cluster_spread.max(1e-9)).expect("finite spread");

    let mut points = Vec::with_capacity(count);
    while points.len() < count {
        let p = if !centres.is_empty() && rng.random::<f64>() < spec.cluster_fraction {
            let (cx, cy) = centres[rng.random_range(0..centres.len())];
            (cx + spread.sample(&mut rng), cy + spread.sample(&mut rng))
        } else {
            (rng.random::<f64>() * w as f64, rng.random::<f64>() * h as f64)
        };
        if p.0 >= 0.0 && p.1 >= 0.0 && p.0 < w as f64 && p.1 < h as f64 {
            points.push(p);
        }
    }

    let mut canvas = vec![spec.background; w * h];
    let sigma_at = |y: f64| {
        let t = if h > 1 { y / (h - 1) as f64 } else { 0.0 };
        spec.blob_sigma_top + (spec.blob_sigma_bottom - spec.blob_sigma_top) * t.clamp(0.0, 1.0)
    };
    for _ in 0..spec.distractors {
        let (x, y) = (rng.random::<f64>() * w as f64, rng.random::<f64>() * h as f64);
        splat(&mut canvas, w, h, x, y, 3.0 * sigma_at(y), 0.35 * spec.amplitude);
    }
    for &(x, y) in &points {
        splat(&mut canvas, w, h, x, y, sigma_at(y), spec.amplitude);
    }
    let pixels = canvas
        .iter()
        .map(|&v| {
            let noisy = v + (rng.random::<f64>() * 2.0 - 1.0) * spec.noise;
            noisy.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok((GrayImage::new(w, h, pixels)?, DotAnnotation::new(points, w, h)?))
}

fn splat(canvas: &mut [f64], w: usize, h: usize, x: f64, y: f64, sigma: f64, amp: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let (cx, cy) = (x.floor() as isize, y.floor() as isize);
    for row in (cy - r).max(0)..=(cy + r).min(h as isize - 1) {
        for col in (cx - r).max(0)..=(cx + r).min(w as isize - 1) {
            let dx = col as f64 + 0.5 - x;
            let dy = row as f64 + 0.5 - y;
            canvas[row as usize * w + col as usize] +=
                amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
}

/// Scene spec for item `i` of a corpus: independent ChaCha stream per scene.
pub fn scene_seed(corpus_seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
    rng.set_stream(i as u64 + 1);
    rng.random()
}

/// Deterministic 70/15/15 train/val/test assignment of `n` items.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let n_train = ((n as f64 * 0.70).round() as usize).clamp(n.min(1), n);
    let n_val = ((n as f64 * 0.15).round() as usize).min(n - n_train);
    let mut splits: Vec<Split> = (0..n)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();
    splits.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    splits
}

/// A generated scene with its ground truth, ready for training.
pub fn synthetic_sample(spec: &SceneSpec, name: String, sigma: f64) -> Result<Sample> {
    let (image, annotation) = gen_scene(spec)?;
    let density = make_density(&annotation, sigma)?;
    Ok(Sample {
        name,
        image,
        annotation,
        density,
        roi: None,
    })
}

/// In-memory corpus: `n` scenes with per-scene seeds derived from `spec.seed`.
pub fn synthetic_samples(spec: &SceneSpec, n: usize, sigma: f64, prefix: &str) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let s = SceneSpec {
                seed: scene_seed(spec.seed, i),
                ..spec.clone()
            };
            synthetic_sample(&s, format!("{prefix}{i:04}"), sigma)
        })
        .collect()
}

/// Writes `n` scenes as `scene_NNNN.{pgm,csv,dmap}` plus `index.tsv` with a
/// 70/15/15 split, and returns the index.
pub fn write_corpus(dir: &Path, spec: &SceneSpec, n: usize, sigma: f64) -> Result<DatasetIndex> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let splits = assign_splits(n, spec.seed);
    let mut records = Vec::with_capacity(n);
    for (i, split) in splits.into_iter().enumerate() {
        let stem = format!("scene_{i:04}");
        let s = synthetic_sample(
            &SceneSpec {
                seed: scene_seed(spec.seed, i),
                ..spec.clone()
            },
            stem.clone(),
            sigma,
        )?;
        s.image.save(&dir.join(format!("{stem}.pgm")))?;
        save_annotation(&dir.join(format!("{stem}.csv")), s.annotation.points())?;
        s.density.save(&dir.join(format!("{stem}.dmap")))?;
        records.push(IndexRecord {
            split,
            image: format!("{stem}.pgm").into(),
            annotation: format!("{stem}.csv").into(),
            roi: None,
        });
    }
    let index = DatasetIndex {
        root: dir.to_path_buf(),
        records,
    };
    index.save(&dir.join("index.tsv"))?;
    Ok(index)
}

/// Pairs each sample with the stored prediction `dir/<name>.dmap`. The
/// ground truth is rounded to the storage precision of the file format, so a
/// stored copy of the ground truth scores exactly zero.
pub fn load_predictions(dir: &Path, samples: &[Sample]) -> Result<Vec<(String, DensityMap, DensityMap)>> {
    samples
        .iter()
        .map(|s| {
            let es = DensityMap::load(&dir.join(format!("{}.dmap", s.name)))?;
            let gt = DensityMap::decode(&s.density.encode())?;
            Ok((s.name.clone(), es, gt))
        })
        .collect()
}

/// 8-bit visualisation scaled linearly so the maximum density maps to 255;
/// negative values clamp to 0.
pub fn heatmap(d: &DensityMap) -> GrayImage {
    let max = d.values().iter().copied().fold(0.0, f64::max);
    let px = d
        .values()
        .iter()
        .map(|&v| if max > 0.0 { (255.0 * v.max(0.0) / max).round() as u8 } else { 0 })
        .collect();
    GrayImage::new(d.width(), d.height(), px).expect("map dims are valid")
}
