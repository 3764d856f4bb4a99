//! Central finite-difference verification of every hand-written backward pass.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{combined_loss, grid_loss, make_partition, pixel_loss, LossWeights};
use crate::net::{base_backward, base_forward, model_backward, model_forward, ModelParams, NetConfig, StageParams, LAYER_NAMES};
use crate::tensor::{
    conv2d_backward, conv2d_forward, deconv4_backward, deconv4_forward, maxpool2_backward, maxpool2_forward,
    relu_backward, relu_forward, ConvParams, Shape, Tensor,
};

/// Perturbation used by the suite.
pub const FD_EPS: f64 = 1e-5;
/// Maximum tolerated relative error.
pub const REL_TOL: f64 = 1e-4;
/// Relative errors are measured against `max(|a|, |n|, REL_FLOOR)`, so any
/// absolute discrepancy below `REL_TOL * REL_FLOOR = 1e-7` passes.
pub const REL_FLOOR: f64 = 1e-3;

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every `i`.
pub fn central_diff(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            v[i] = x[i] + eps;
            let hi = f(&v);
            v[i] = x[i] - eps;
            let lo = f(&v);
            v[i] = x[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Comparison {
    pub max_rel: f64,
    /// Index of the worst component.
    pub worst: usize,
    pub count: usize,
}

impl Comparison {
    fn merge(self, other: Self) -> Self {
        let (max_rel, worst) = if other.max_rel > self.max_rel {
            (other.max_rel, self.count + other.worst)
        } else {
            (self.max_rel, self.worst)
        };
        Self {
            max_rel,
            worst,
            count: self.count + other.count,
        }
    }
}

/// Floored relative error between analytic and numeric gradients.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> Comparison {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut out = Comparison {
        max_rel: 0.0,
        worst: 0,
        count: analytic.len(),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        // NaN must never pass
        if rel > out.max_rel || rel.is_nan() {
            out.max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
            out.worst = i;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel: f64,
    pub components: usize,
}

impl CheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel < REL_TOL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub entries: Vec<CheckEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(CheckEntry::passed)
    }

    pub fn max_rel(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel).fold(0.0, f64::max)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>8} {:>12}  status", "check", "params", "max_rel")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<28} {:>8} {:>12.3e}  {}",
                e.name,
                e.components,
                e.max_rel,
                if e.passed() { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "tolerance {REL_TOL:e}: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Deliberate defects for validating that the checker catches mistakes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// The conv2d backward pass sees a kernel whose first tap is perturbed.
    CorruptKernel,
}

fn conv_flat(p: &ConvParams<f64>) -> Vec<f64> {
    p.kernels.data().iter().chain(&p.bias).copied().collect()
}

fn set_conv_flat(p: &mut ConvParams<f64>, v: &[f64]) {
    let nk = p.kernels.data().len();
    p.kernels.data_mut().copy_from_slice(&v[..nk]);
    p.bias.copy_from_slice(&v[nk..]);
}

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::random_normal(shape, 1.0, rng)
}

/// Random values bounded away from zero (ReLU kink) by at least 0.05.
fn away_from_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.len())
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("sized")
}

/// Distinct values spaced 0.01 apart in random order, so no pooling window
/// has a near-tie a finite-difference step could flip.
fn distinct(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let mut data: Vec<f64> = (0..shape.len()).map(|i| i as f64 * 0.01 - 0.5).collect();
    data.shuffle(rng);
    Tensor::from_vec(shape, data).expect("sized")
}

struct Suite {
    rng: ChaCha8Rng,
    fault: Fault,
    entries: Vec<CheckEntry>,
}

impl Suite {
    fn push(&mut self, name: impl Into<String>, c: Comparison) {
        self.entries.push(CheckEntry {
            name: name.into(),
            max_rel: c.max_rel,
            components: c.count,
        });
    }

    fn conv_backward(
        &self,
        x: &Tensor<f64>,
        p: &ConvParams<f64>,
        d: &Tensor<f64>,
    ) -> Result<crate::tensor::LayerGrad<f64>> {
        match self.fault {
            Fault::None => conv2d_backward(x, p, d),
            Fault::CorruptKernel => {
                let mut bad = p.clone();
                bad.kernels.data_mut()[0] += 0.25;
                conv2d_backward(x, &bad, d)
            }
        }
    }

    fn layer_checks(&mut self) -> Result<()> {
        for (name, stride, pad) in [("conv2d 3x3 s1", 1, 1), ("conv2d 3x3 s2", 2, 1)] {
            let x = random(Shape::new(2, 3, 7, 6), &mut self.rng);
            let p = ConvParams::he_normal(4, 3, 3, stride, pad, &mut self.rng);
            let y = conv2d_forward(&x, &p)?;
            let r = random(y.shape(), &mut self.rng);
            let g = self.conv_backward(&x, &p, &r)?;
            let num = central_diff(x.data(), FD_EPS, |v| {
                let xx = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
                conv2d_forward(&xx, &p).unwrap().dot(&r).unwrap()
            });
            let mut c = compare(g.d_input.data(), &num);
            let num = central_diff(&conv_flat(&p), FD_EPS, |v| {
                let mut pp = p.clone();
                set_conv_flat(&mut pp, v);
                conv2d_forward(&x, &pp).unwrap().dot(&r).unwrap()
            });
            let analytic: Vec<f64> = g.d_kernels.data().iter().chain(&g.d_bias).copied().collect();
            c = c.merge(compare(&analytic, &num));
            self.push(name, c);
        }

        let x = random(Shape::new(1, 2, 3, 3), &mut self.rng);
        let p = ConvParams::he_normal(3, 2, 8, 4, 2, &mut self.rng);
        let y = deconv4_forward(&x, &p)?;
        let r = random(y.shape(), &mut self.rng);
        let g = deconv4_backward(&x, &p, &r)?;
        let num = central_diff(x.data(), FD_EPS, |v| {
            let xx = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
            deconv4_forward(&xx, &p).unwrap().dot(&r).unwrap()
        });
        let mut c = compare(g.d_input.data(), &num);
        let num = central_diff(&conv_flat(&p), FD_EPS, |v| {
            let mut pp = p.clone();
            set_conv_flat(&mut pp, v);
            deconv4_forward(&x, &pp).unwrap().dot(&r).unwrap()
        });
        let analytic: Vec<f64> = g.d_kernels.data().iter().chain(&g.d_bias).copied().collect();
        c = c.merge(compare(&analytic, &num));
        self.push("deconv4", c);

        let x = away_from_zero(Shape::new(2, 2, 4, 5), &mut self.rng);
        let r = random(x.shape(), &mut self.rng);
        let g = relu_backward(&x, &r)?;
        let num = central_diff(x.data(), FD_EPS, |v| {
            relu_forward(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap()).dot(&r).unwrap()
        });
        self.push("relu", compare(g.data(), &num));

        let x = distinct(Shape::new(2, 2, 6, 4), &mut self.rng);
        let (y, idx) = maxpool2_forward(&x)?;
        let r = random(y.shape(), &mut self.rng);
        let g = maxpool2_backward(&idx, &r)?;
        let num = central_diff(x.data(), FD_EPS, |v| {
            let xx = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
            maxpool2_forward(&xx).unwrap().0.dot(&r).unwrap()
        });
        self.push("maxpool2", compare(g.data(), &num));
        Ok(())
    }

    /// Nonzero biases keep pre-activations off the ReLU kink, which the
    /// bilinear deconv init with zero bias would otherwise hit exactly.
    fn jitter_biases(&mut self, s: &mut StageParams<f64>) {
        for layer in s.layers_mut() {
            for b in &mut layer.bias {
                *b = self.rng.random_range(0.05..0.3) * if self.rng.random::<bool>() { 1.0 } else { -1.0 };
            }
        }
    }

    fn tiny_config() -> NetConfig {
        NetConfig {
            in_channels: 1,
            widths: [2, 3, 4],
            conversion_channels: 2,
        }
    }

    fn base_checks(&mut self) -> Result<()> {
        let cfg = Self::tiny_config();
        let mut s = StageParams::init(1, &cfg, &mut self.rng);
        self.jitter_biases(&mut s);
        let x = random(Shape::new(1, 1, 8, 8), &mut self.rng);
        let t = base_forward(&x, &s)?;
        let r_side = random(t.side.shape(), &mut self.rng);
        let r_conv = random(t.converted.shape(), &mut self.rng);
        let objective = |x: &Tensor<f64>, s: &StageParams<f64>| {
            let t = base_forward(x, s).unwrap();
            t.side.dot(&r_side).unwrap() + t.converted.dot(&r_conv).unwrap()
        };
        let (grads, d_input) = base_backward(&t, &s, Some(&r_side), Some(&r_conv), true)?;
        let num = central_diff(x.data(), FD_EPS, |v| {
            objective(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap(), &s)
        });
        self.push("base_forward/input", compare(d_input.expect("requested").data(), &num));
        for (li, name) in LAYER_NAMES.iter().enumerate() {
            let num = central_diff(&conv_flat(s.layers()[li]), FD_EPS, |v| {
                let mut ss = s.clone();
                set_conv_flat(ss.layers_mut()[li], v);
                objective(&x, &ss)
            });
            self.push(format!("base_forward/{name}"), compare(&conv_flat(grads.layers()[li]), &num));
        }
        Ok(())
    }

    fn model_checks(&mut self) -> Result<()> {
        let cfg = Self::tiny_config();
        let mut m = ModelParams::init(&cfg, 2, &mut self.rng)?;
        for s in &mut m.stages {
            self.jitter_biases(s);
        }
        let x = random(Shape::new(1, 1, 8, 8), &mut self.rng);
        let t = model_forward(&x, &m)?;
        let rs: Vec<Tensor<f64>> = t.sides().iter().map(|s| random(s.shape(), &mut self.rng)).collect();
        let objective = |m: &ModelParams<f64>| {
            let t = model_forward(&x, m).unwrap();
            t.sides().iter().zip(&rs).map(|(s, r)| s.dot(r).unwrap()).sum::<f64>()
        };
        let grads = model_backward(&t, &rs, &m)?;
        for (si, stage) in m.stages.iter().enumerate() {
            for (li, name) in LAYER_NAMES.iter().enumerate() {
                let num = central_diff(&conv_flat(stage.layers()[li]), FD_EPS, |v| {
                    let mut mm = m.clone();
                    set_conv_flat(mm.stages[si].layers_mut()[li], v);
                    objective(&mm)
                });
                let analytic = conv_flat(grads.stages[si].layers()[li]);
                self.push(format!("model2/stage{}/{name}", si + 1), compare(&analytic, &num));
            }
        }
        Ok(())
    }

    fn loss_checks(&mut self) -> Result<()> {
        let shape = Shape::new(2, 1, 8, 8);
        let gt = random(shape, &mut self.rng);
        let es = random(shape, &mut self.rng);
        let fd = |f: &dyn Fn(&Tensor<f64>) -> f64| {
            central_diff(es.data(), FD_EPS, |v| f(&Tensor::from_vec(shape, v.to_vec()).unwrap()))
        };

        let num = fd(&|e| pixel_loss(e, &gt).unwrap().value);
        self.push("pixel_loss", compare(pixel_loss(&es, &gt)?.grad.data(), &num));

        for g in [1, 2, 4] {
            let part = make_partition(8, 8, g)?;
            let out = grid_loss(&es, &gt, &part)?;
            let num = fd(&|e| grid_loss(e, &gt, &part).unwrap().field_sum);
            let c = compare(out.grad.data(), &num);
            let num = fd(&|e| grid_loss(e, &gt, &part).unwrap().value);
            let c = c.merge(compare(out.grad_value.data(), &num));
            self.push(format!("grid_loss g={g}"), c);
        }

        let s1 = random(shape, &mut self.rng);
        let s2 = random(shape, &mut self.rng);
        let weights = LossWeights {
            alpha: vec![0.7, 1.3],
            lambda: vec![0.3, 0.5],
        };
        let part = make_partition(8, 8, 4)?;
        let out = combined_loss(&[&s1, &s2], &gt, &weights, &part)?;
        let num1 = central_diff(s1.data(), FD_EPS, |v| {
            let t = Tensor::from_vec(shape, v.to_vec()).unwrap();
            combined_loss(&[&t, &s2], &gt, &weights, &part).unwrap().value
        });
        let num2 = central_diff(s2.data(), FD_EPS, |v| {
            let t = Tensor::from_vec(shape, v.to_vec()).unwrap();
            combined_loss(&[&s1, &t], &gt, &weights, &part).unwrap().value
        });
        let c = compare(out.grads[0].data(), &num1).merge(compare(out.grads[1].data(), &num2));
        self.push("combined_loss", c);
        Ok(())
    }
}

/// Runs the whole finite-difference suite in 64-bit precision.
pub fn run_suite(seed: u64, fault: Fault) -> Result<SuiteReport> {
    let mut suite = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        fault,
        entries: Vec::new(),
    };
    suite.layer_checks()?;
    suite.base_checks()?;
    suite.model_checks()?;
    suite.loss_checks()?;
    Ok(SuiteReport {
        entries: suite.entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_quadratic_is_exact() {
        let g = central_diff(&[1.0, -2.0, 0.5], 1e-3, |v| v.iter().map(|x| x * x).sum());
        for (a, b) in g.iter().zip([2.0, -4.0, 1.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn compare_floors_small_magnitudes() {
        assert_eq!(compare(&[1e-9], &[0.0]).max_rel, 1e-6);
        assert!((compare(&[1.0, 2.0], &[1.0, 2.002]).max_rel - 0.002 / 2.002).abs() < 1e-15);
        assert_eq!(compare(&[1.0, 2.0], &[1.0, 2.002]).worst, 1);
        assert!(compare(&[f64::NAN], &[0.0]).max_rel.is_infinite());
    }

    #[test]
    fn suite_passes_and_catches_faults() {
        let ok = run_suite(0, Fault::None).unwrap();
        assert!(ok.passed(), "{ok}");
        assert!(ok.entries.iter().any(|e| e.name == "model2/stage1/conv1"));
        let bad = run_suite(0, Fault::CorruptKernel).unwrap();
        assert!(!bad.passed());
        let failing: Vec<_> = bad.entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
        assert!(failing.contains(&"conv2d 3x3 s1"), "{failing:?}");
    }
}
