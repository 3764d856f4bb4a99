//! SGD with momentum, patch augmentation, duplication initialisation and
//! the epoch loop with plateau learning-rate drops.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::density::{DensityMap, DEFAULT_SIGMA};
use crate::error::{read_file, write_file, Error, Result};
use crate::loss::{combined_loss, make_partition, GridPartition, LossWeights};
use crate::metrics::{CountReport, RoiMask};
use crate::net::{decode_layers, encode_layers, model_backward, model_forward, pad_to_mult4, predict, ModelParams, NetConfig, StageParams};
use crate::tensor::{ConvParams, Real, Shape, Tensor};

const OPT_MAGIC: &[u8; 4] = b"CMSO";

/// A scalar applied to every stage, or one value per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerStage {
    Uniform(f64),
    Each(Vec<f64>),
}

impl PerStage {
    pub fn resolve(&self, stages: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            PerStage::Uniform(v) => Ok(vec![*v; stages]),
            PerStage::Each(v) if v.len() == stages => Ok(v.clone()),
            PerStage::Each(v) => Err(Error::Config(format!(
                "{what} lists {} values for {stages} stages",
                v.len()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_initial: f64,
    pub lr_drop_factor: f64,
    /// Epochs without a relative val-loss improvement of `plateau_threshold`
    /// before the learning rate is divided.
    pub patience: usize,
    pub plateau_threshold: f64,
    pub crops_per_image: usize,
    pub crop_size: usize,
    pub magnification: f64,
    pub stages: usize,
    pub alpha: PerStage,
    pub lambda: PerStage,
    /// Grid loss blocks per side.
    pub grid: usize,
    pub seed: u64,
    pub epochs: usize,
    /// Epochs for the standalone base model before duplication.
    pub pretrain_epochs: usize,
    /// Gaussian width for ground-truth densities.
    pub sigma: f64,
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub conversion_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        Self {
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_initial: 1e-6,
            lr_drop_factor: 10.0,
            patience: 5,
            plateau_threshold: 0.01,
            crops_per_image: 20,
            crop_size: 224,
            magnification: 100.0,
            stages: 2,
            alpha: PerStage::Uniform(1.0),
            lambda: PerStage::Uniform(0.5),
            grid: 4,
            seed: 0,
            epochs: 30,
            pretrain_epochs: 30,
            sigma: DEFAULT_SIGMA,
            in_channels: net.in_channels,
            widths: net.widths,
            conversion_channels: net.conversion_channels,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_toml(text)
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: self.in_channels,
            widths: self.widths,
            conversion_channels: self.conversion_channels,
        }
    }

    pub fn loss_weights(&self, stages: usize) -> Result<LossWeights> {
        let w = LossWeights {
            alpha: self.alpha.resolve(stages, "alpha")?,
            lambda: self.lambda.resolve(stages, "lambda")?,
        };
        w.validate(stages).map_err(|e| Error::Config(e.to_string()))?;
        Ok(w)
    }

    pub fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("crops_per_image", self.crops_per_image),
            ("crop_size", self.crop_size),
            ("stages", self.stages),
            ("grid", self.grid),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.crop_size.is_multiple_of(4) {
            return Err(Error::Config(format!("crop_size {} must be a multiple of 4", self.crop_size)));
        }
        if self.grid > self.crop_size {
            return Err(Error::Config(format!("grid {} exceeds crop_size {}", self.grid, self.crop_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        let nonneg = [
            ("weight_decay", self.weight_decay),
            ("lr_initial", self.lr_initial),
            ("plateau_threshold", self.plateau_threshold),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
        }
        if !(self.lr_drop_factor >= 1.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::Config(format!("lr_drop_factor {} must be >= 1", self.lr_drop_factor)));
        }
        if !(self.magnification > 0.0 && self.magnification.is_finite()) {
            return Err(Error::Config("magnification must be positive".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        self.net_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loss_weights(self.stages)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum velocities, shaped like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub velocity: ModelParams<T>,
}

impl<T: Real> OptState<T> {
    pub fn zeros_like(m: &ModelParams<T>) -> Self {
        Self {
            velocity: m.zeros_like(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_layers(OPT_MAGIC, &self.velocity)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Ok(Self {
            velocity: decode_layers(OPT_MAGIC, bytes)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

fn congruent<T: Real>(a: &ConvParams<T>, b: &ConvParams<T>) -> bool {
    a.kernels.shape() == b.kernels.shape() && a.bias.len() == b.bias.len()
}

/// `v <- momentum v - lr (g + weight_decay w)`, `w <- w + v`; biases are not decayed.
pub fn sgd_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptState<T>,
    cfg: &SgdConfig,
) -> Result<()> {
    let (np, ng, nv) = (params.layers().count(), grads.layers().count(), state.velocity.layers().count());
    let shapes_ok = np == ng
        && np == nv
        && params
            .layers()
            .zip(grads.layers())
            .zip(state.velocity.layers())
            .all(|((p, g), v)| congruent(p, g) && congruent(p, v));
    if !shapes_ok {
        return Err(Error::invalid("parameters, gradients and velocities are not shape-congruent"));
    }
    let (lr, mu, wd) = (T::of(cfg.lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    for ((p, g), v) in params.layers_mut().zip(grads.layers()).zip(state.velocity.layers_mut()) {
        for ((w, &gw), vw) in p
            .kernels
            .data_mut()
            .iter_mut()
            .zip(g.kernels.data())
            .zip(v.kernels.data_mut())
        {
            *vw = mu * *vw - lr * (gw + wd * *w);
            *w += *vw;
        }
        for ((b, &gb), vb) in p.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
            *vb = mu * *vb - lr * gb;
            *b += *vb;
        }
    }
    Ok(())
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Mirror-pads (without edge repetition) every plane to at least `min_h x min_w`.
pub fn reflect_pad<T: Real>(x: &Tensor<T>, min_h: usize, min_w: usize) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s.h.max(min_h), s.w.max(min_w));
    if (h, w) == (s.h, s.w) {
        return x.clone();
    }
    let (top, left) = ((h - s.h) / 2, (w - s.w) / 2);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for b in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(b, c);
            let dst = out.plane_mut(b, c);
            for r in 0..h {
                let sr = reflect(r as isize - top as isize, s.h);
                for col in 0..w {
                    dst[r * w + col] = src[sr * s.w + reflect(col as isize - left as isize, s.w)];
                }
            }
        }
    }
    out
}

fn crop<T: Real>(x: &Tensor<T>, row0: usize, col0: usize, size: usize, flip: bool) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(1, s.c, size, size));
    for c in 0..s.c {
        let src = x.plane(0, c);
        let dst = out.plane_mut(0, c);
        for r in 0..size {
            let row = &src[(row0 + r) * s.w + col0..(row0 + r) * s.w + col0 + size];
            let out_row = &mut dst[r * size..(r + 1) * size];
            out_row.copy_from_slice(row);
            if flip {
                out_row.reverse();
            }
        }
    }
    out
}

/// One training patch: a random `crop x crop` window of the image and of the
/// magnified density, mirrored horizontally with probability 0.5. Inputs
/// smaller than the crop are reflect-padded (image and density alike).
pub fn augment<T: Real, R: Rng + ?Sized>(
    image: &Tensor<T>,
    density: &DensityMap,
    crop_size: usize,
    magnification: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = image.shape();
    if s.n != 1 || (s.h, s.w) != (density.height(), density.width()) {
        return Err(Error::invalid(format!(
            "image {s} does not pair with a {}x{} density",
            density.height(),
            density.width()
        )));
    }
    let image = reflect_pad(image, crop_size, crop_size);
    let mut dens: Tensor<T> = density.to_tensor();
    dens.scale(T::of(magnification / density.magnification()));
    let dens = reflect_pad(&dens, crop_size, crop_size);
    let (h, w) = (image.shape().h, image.shape().w);
    let row0 = rng.random_range(0..=h - crop_size);
    let col0 = rng.random_range(0..=w - crop_size);
    let flip = rng.random_bool(0.5);
    Ok((crop(&image, row0, col0, crop_size, flip), crop(&dens, row0, col0, crop_size, flip)))
}

/// Stacks a pretrained base model `k` times. Stage 1 is an exact copy; later
/// stages get a fresh He-initialised first conv sized for the conversion
/// channels. All conversion layers are re-initialised.
pub fn init_by_duplication<T: Real, R: Rng + ?Sized>(
    base: &StageParams<T>,
    k: usize,
    conversion_channels: usize,
    rng: &mut R,
) -> Result<ModelParams<T>> {
    base.validate()?;
    if k == 0 || conversion_channels == 0 {
        return Err(Error::invalid("need at least one stage and one conversion channel"));
    }
    let width = base.conv3.out_channels();
    let mut stages = Vec::with_capacity(k);
    for s in 0..k {
        let mut stage = base.clone();
        if s > 0 {
            let c1 = &base.conv1;
            let ksz = c1.kernels.shape().h;
            stage.conv1 = ConvParams::he_normal(c1.out_channels(), conversion_channels, ksz, c1.stride, c1.pad, rng);
        }
        stage.convert = ConvParams::he_normal(conversion_channels, width, 1, 1, 0, rng);
        stages.push(stage);
    }
    let m = ModelParams {
        stages,
        conversion_channels,
    };
    m.validate()?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// `epoch,train_loss,val_loss,val_mae`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_mae\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_mae));
        }
        out
    }
}

/// Divides the learning rate after `patience` epochs without sufficient
/// relative improvement of the monitored loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub best: f64,
    pub stale: usize,
    pub lr: f64,
}

impl Plateau {
    pub fn new(lr: f64) -> Self {
        Self {
            best: f64::INFINITY,
            stale: 0,
            lr,
        }
    }

    /// Records one epoch's loss; returns true when the rate was dropped.
    pub fn observe(&mut self, loss: f64, cfg: &TrainConfig) -> bool {
        if loss < self.best * (1.0 - cfg.plateau_threshold) || self.best.is_infinite() {
            self.best = loss;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= cfg.patience {
            self.lr /= cfg.lr_drop_factor;
            self.stale = 0;
            true
        } else {
            false
        }
    }
}

/// Prepared image/target pair in training precision.
struct Prepared<T> {
    image: Tensor<T>,
    density: DensityMap,
}

fn prepare<T: Real>(s: &Sample) -> Prepared<T> {
    Prepared {
        image: s.image.to_tensor(),
        density: s.density.clone(),
    }
}

/// Full-image validation: mean combined loss and count MAE.
fn validate_model<T: Real>(
    m: &ModelParams<T>,
    val: &[Prepared<T>],
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let (mut loss, mut abs_err) = (0.0, 0.0);
    for p in val {
        let (x, _) = pad_to_mult4(&p.image);
        let mut gt: Tensor<T> = p.density.to_tensor();
        gt.scale(T::of(cfg.magnification / p.density.magnification()));
        let (gt, _) = pad_to_mult4(&gt);
        let trace = model_forward(&x, m)?;
        let s = gt.shape();
        let part = make_partition(s.h, s.w, cfg.grid.min(s.h).min(s.w))?;
        loss += combined_loss(&trace.sides(), &gt, weights, &part)?.value;
        let c_es = trace.prediction().data().iter().map(|v| v.as_f64()).sum::<f64>() / cfg.magnification;
        abs_err += (c_es - p.density.count()).abs();
    }
    let n = val.len() as f64;
    Ok((loss / n, abs_err / n))
}

/// One SGD step on a batch of patches; returns the loss before the update.
pub fn train_step<T: Real>(
    m: &mut ModelParams<T>,
    state: &mut OptState<T>,
    x: &Tensor<T>,
    gt: &Tensor<T>,
    weights: &LossWeights,
    part: &GridPartition,
    sgd: &SgdConfig,
) -> Result<f64> {
    let trace = model_forward(x, m)?;
    let loss = combined_loss(&trace.sides(), gt, weights, part)?;
    if !loss.value.is_finite() {
        return Err(Error::Diverged(format!(
            "loss became {} at lr {:e}; lower the learning rate",
            loss.value, sgd.lr
        )));
    }
    let grads = model_backward(&trace, &loss.grads, m)?;
    sgd_step(m, &grads, state, sgd)?;
    Ok(loss.value)
}

/// Trains `init` on `data` for `cfg.epochs` epochs and returns the parameters
/// with the lowest validation MAE along with the per-epoch history.
pub fn train_loop<T: Real>(
    data: &Dataset,
    init: ModelParams<T>,
    cfg: &TrainConfig,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(ModelParams<T>, History)> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and val splits"));
    }
    let k = init.num_stages();
    let weights = cfg.loss_weights(k)?;
    let train: Vec<Prepared<T>> = data.train.iter().map(prepare).collect();
    let val: Vec<Prepared<T>> = data.val.iter().map(prepare).collect();
    let part = make_partition(cfg.crop_size, cfg.crop_size, cfg.grid)?;

    let mut m = init;
    let mut state = OptState::zeros_like(&m);
    let mut plateau = Plateau::new(cfg.lr_initial);
    let (_, init_mae) = validate_model(&m, &val, &weights, cfg)?;
    let mut best = (init_mae, m.clone());
    let mut history = History::default();

    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..train.len())
            .flat_map(|i| std::iter::repeat_n(i, cfg.crops_per_image))
            .collect();
        order.shuffle(rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut xs = Vec::with_capacity(chunk.len());
            let mut gts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (x, g) = augment(&train[i].image, &train[i].density, cfg.crop_size, cfg.magnification, rng)?;
                xs.push(x);
                gts.push(g);
            }
            let (x, gt) = (Tensor::stack(&xs)?, Tensor::stack(&gts)?);
            loss_sum += train_step(&mut m, &mut state, &x, &gt, &weights, &part, &cfg.sgd(plateau.lr))?;
            batches += 1;
        }
        let (val_loss, val_mae) = validate_model(&m, &val, &weights, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("validation loss became {val_loss} in epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            val_mae,
            lr: plateau.lr,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if val_mae < best.0 {
            best = (val_mae, m.clone());
        }
        plateau.observe(val_loss, cfg);
    }
    Ok((best.1, history))
}

/// Result of the full pretrain, duplicate and fine-tune procedure.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: ModelParams<T>,
    /// Standalone base model the stack was duplicated from.
    pub base: Option<StageParams<T>>,
    pub pretrain_history: Option<History>,
    pub history: History,
}

/// Full procedure: train a standalone base model (unless `pretrained` is
/// given), duplicate it into `cfg.stages` stages and fine-tune end to end.
/// With one stage this is plain base-model training.
pub fn train_pipeline(
    data: &Dataset,
    cfg: &TrainConfig,
    pretrained: Option<&StageParams<f32>>,
    on_epoch: &mut dyn FnMut(&str, &EpochRecord),
) -> Result<TrainOutcome<f32>> {
    cfg.validate()?;
    let net = cfg.net_config();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(1);

    if cfg.stages == 1 && pretrained.is_none() {
        let init = ModelParams::init(&net, 1, &mut init_rng)?;
        let (model, history) = train_loop(data, init, cfg, cfg.epochs, &mut data_rng, &mut |r| on_epoch("train", r))?;
        return Ok(TrainOutcome {
            model,
            base: None,
            pretrain_history: None,
            history,
        });
    }

    let (base, pretrain_history) = match pretrained {
        Some(b) => (b.clone(), None),
        None => {
            let init = ModelParams::init(&net, 1, &mut init_rng)?;
            let base_cfg = TrainConfig {
                stages: 1,
                alpha: PerStage::Uniform(cfg.alpha.resolve(cfg.stages, "alpha")?[0]),
                lambda: PerStage::Uniform(cfg.lambda.resolve(cfg.stages, "lambda")?[0]),
                ..cfg.clone()
            };
            let (m, h) = train_loop(data, init, &base_cfg, cfg.pretrain_epochs, &mut data_rng, &mut |r| {
                on_epoch("pretrain", r)
            })?;
            (m.stages.into_iter().next().expect("one stage"), Some(h))
        }
    };
    if base.in_channels() != cfg.in_channels {
        return Err(Error::Config(format!(
            "pretrained base expects {} input channels, config has {}",
            base.in_channels(),
            cfg.in_channels
        )));
    }
    let init = init_by_duplication(&base, cfg.stages, cfg.conversion_channels, &mut init_rng)?;
    let (model, history) = train_loop(data, init, cfg, cfg.epochs, &mut data_rng, &mut |r| on_epoch("finetune", r))?;
    Ok(TrainOutcome {
        model,
        base: Some(base),
        pretrain_history,
        history,
    })
}

/// Predicted density (physical units) for one sample.
pub fn predict_density(m: &ModelParams<f32>, image: &Tensor<f32>, magnification: f64) -> Result<DensityMap> {
    let pred = predict(image, m)?;
    DensityMap::from_tensor(&pred, 0, magnification)
}

/// `(name, prediction, ground truth)` for every sample.
pub fn predict_items(
    m: &ModelParams<f32>,
    samples: &[Sample],
    magnification: f64,
) -> Result<Vec<(String, DensityMap, DensityMap)>> {
    samples
        .iter()
        .map(|s| {
            let es = predict_density(m, &s.image.to_tensor(), magnification)?;
            Ok((s.name.clone(), es, s.density.clone()))
        })
        .collect()
}

/// Count report over prepared items; ROI masks come from `samples` when
/// `use_roi` is set, and every sample must then carry one.
pub fn report_items(
    items: &[(String, DensityMap, DensityMap)],
    samples: &[Sample],
    max_level: u32,
    use_roi: bool,
) -> Result<CountReport> {
    if !use_roi {
        return CountReport::from_maps(items, max_level, None);
    }
    let masks: Option<Vec<RoiMask>> = samples.iter().map(|s| s.roi.clone()).collect();
    let masks = masks.ok_or_else(|| Error::invalid("ROI evaluation requested but some samples have no mask"))?;
    CountReport::from_maps(items, max_level, Some(&masks))
}

/// Count report of `m` on `samples`.
pub fn evaluate(
    m: &ModelParams<f32>,
    samples: &[Sample],
    magnification: f64,
    max_level: u32,
    use_roi: bool,
) -> Result<CountReport> {
    report_items(&predict_items(m, samples, magnification)?, samples, max_level, use_roi)
}

/// One cell of a grid-size x lambda study, evaluated on the test split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub grid: usize,
    pub lambda: f64,
    pub report: CountReport,
}

/// Trains one model per `(grid, lambda)` pair with otherwise identical
/// settings. Each cell is exactly the run `train_pipeline` would perform.
pub fn sweep(
    data: &Dataset,
    cfg: &TrainConfig,
    grids: &[usize],
    lambdas: &[f64],
    pretrained: Option<&StageParams<f32>>,
    max_level: u32,
    on_epoch: &mut dyn FnMut(usize, f64, &str, &EpochRecord),
) -> Result<Vec<SweepRow>> {
    if grids.is_empty() || lambdas.is_empty() {
        return Err(Error::invalid("sweep needs at least one grid size and one lambda"));
    }
    if data.test.is_empty() {
        return Err(Error::invalid("sweep evaluates on the test split, which is empty"));
    }
    let mut rows = Vec::with_capacity(grids.len() * lambdas.len());
    for &grid in grids {
        for &lambda in lambdas {
            let cell = TrainConfig {
                grid,
                lambda: PerStage::Uniform(lambda),
                ..cfg.clone()
            };
            let out = train_pipeline(data, &cell, pretrained, &mut |phase, r| on_epoch(grid, lambda, phase, r))?;
            let report = evaluate(&out.model, &data.test, cell.magnification, max_level, false)?;
            rows.push(SweepRow { grid, lambda, report });
        }
    }
    Ok(rows)
}

/// `grid,lambda,mae,mse,game1..gameL`
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let levels = rows.first().map_or(0, |r| r.report.max_level());
    let mut out = String::from("grid,lambda,mae,mse");
    for l in 1..=levels {
        out.push_str(&format!(",game{l}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}", r.grid, r.lambda, r.report.mae, r.report.mse));
        for g in &r.report.game[1..] {
            out.push_str(&format!(",{g}"));
        }
        out.push('\n');
    }
    out
}
