//! Central finite-difference checks of every loss, every layer and the whole
//! network.
//!
//! A case's error is `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-12)` over the probed
//! coordinates, where `a` is the analytic gradient and `n` the numerical one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::Config;
use crate::error::Result;
use crate::geometry::BBox;
use crate::losses::{self, Centers, LossWeights, MultitaskInputs};
use crate::matrix::Matrix;
use crate::tinynet::detector::{build_plan, loss_and_grad};
use crate::tinynet::layers;
use crate::tinynet::{DetectorModel, Gradients, NetConfig, Param, Tensor};

pub const LOSS_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;
pub const CASES: usize = 20;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Central differences of `f` with respect to the listed coordinates of `x`.
fn numeric<F: FnMut(&[f64]) -> f64>(x: &[f64], coords: &[usize], mut f: F) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn pick<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return all(n);
    }
    rand::seq::index::sample(rng, n, k).into_vec()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Suite {
    rng: ChaCha8Rng,
    checks: Vec<CheckResult>,
}

impl Suite {
    fn run<F>(&mut self, name: &str, tolerance: f64, mut case: F) -> Result<()>
    where
        F: FnMut(&mut ChaCha8Rng) -> Result<f64>,
    {
        let mut worst: f64 = 0.0;
        for _ in 0..CASES {
            let e = case(&mut self.rng)?;
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        self.checks.push(CheckResult {
            name: name.to_string(),
            cases: CASES,
            max_relative_error: worst,
            tolerance,
            passed: worst < tolerance,
        });
        Ok(())
    }
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    y[0] = 0;
    y[n - 1] = 1;
    y
}

fn ce_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let m = rng.random_range(2..10);
    let logits = normal(rng, m * 2).iter().map(|v| 3.0 * v).collect::<Vec<_>>();
    let labels = random_labels(rng, m);
    let a = losses::softmax_ce(&Matrix::from_vec(m, 2, logits.clone())?, &labels)?.grad;
    let n = numeric(&logits, &all(m * 2), |x| {
        losses::softmax_ce(&Matrix::from_vec(m, 2, x.to_vec()).unwrap(), &labels).unwrap().loss
    });
    Ok(relative_error(a.as_slice(), &n))
}

fn smooth_l1_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let m = rng.random_range(2..10);
    let pred = normal(rng, m * 4).iter().map(|v| 2.0 * v).collect::<Vec<_>>();
    let target = Matrix::from_vec(m, 4, normal(rng, m * 4))?;
    let mask: Vec<bool> = (0..m).map(|i| i == 0 || rng.random_bool(0.6)).collect();
    let a = losses::smooth_l1(&Matrix::from_vec(m, 4, pred.clone())?, &target, &mask)?.grad;
    let n = numeric(&pred, &all(m * 4), |x| {
        losses::smooth_l1(&Matrix::from_vec(m, 4, x.to_vec()).unwrap(), &target, &mask).unwrap().loss
    });
    Ok(relative_error(a.as_slice(), &n))
}

fn random_centers(rng: &mut ChaCha8Rng, d: usize) -> Result<Centers> {
    Centers::new(Matrix::from_vec(2, d, normal(rng, 2 * d))?, 0.5)
}

fn center_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, d) = (rng.random_range(2..8), rng.random_range(2..8));
    let x = normal(rng, m * d);
    let labels = random_labels(rng, m);
    let centers = random_centers(rng, d)?;
    let (_, a) = losses::center_loss(&Matrix::from_vec(m, d, x.clone())?, &labels, &centers)?;
    let n = numeric(&x, &all(m * d), |v| {
        losses::center_loss(&Matrix::from_vec(m, d, v.to_vec()).unwrap(), &labels, &centers).unwrap().0
    });
    Ok(relative_error(a.as_slice(), &n))
}

/// The composite loss, differentiated jointly in logits, deltas and features.
fn multitask_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, d) = (rng.random_range(2..8), rng.random_range(2..6));
    let labels = random_labels(rng, m);
    let targets = Matrix::from_vec(m, 4, normal(rng, m * 4))?;
    let mask: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
    let centers = random_centers(rng, d)?;
    let weights = LossWeights {
        lambda: rng.random_range(0.5..2.0),
        mu: rng.random_range(0.01..1.0),
    };
    let x = normal(rng, m * (2 + 4 + d));
    let eval = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        let logits = Matrix::from_vec(m, 2, v[..2 * m].to_vec())?;
        let deltas = Matrix::from_vec(m, 4, v[2 * m..6 * m].to_vec())?;
        let feats = Matrix::from_vec(m, d, v[6 * m..].to_vec())?;
        let (report, g) = losses::multitask_loss(
            MultitaskInputs {
                logits: &logits,
                labels: &labels,
                pred_deltas: &deltas,
                target_deltas: &targets,
                pos_mask: &mask,
                features: &feats,
            },
            &centers,
            weights,
        )?;
        let mut grad = g.logits.into_vec();
        grad.extend(g.deltas.into_vec());
        grad.extend(g.features.into_vec());
        Ok((report.total, grad))
    };
    let (_, a) = eval(&x)?;
    let n = numeric(&x, &all(x.len()), |v| eval(v).unwrap().0);
    Ok(relative_error(&a, &n))
}

fn conv_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (c, o, h, w) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(3..7), rng.random_range(3..7));
    let x = normal(rng, c * h * w);
    let wt = normal(rng, o * c * 9);
    let b = normal(rng, o);
    let proj = normal(rng, o * h * w);
    let f = |x: &[f64], wt: &[f64], b: &[f64]| -> f64 {
        let out = layers::conv2d(
            &Tensor::from_vec(&[c, h, w], x.to_vec()).unwrap(),
            &Tensor::from_vec(&[o, c, 3, 3], wt.to_vec()).unwrap(),
            &Tensor::from_vec(&[o], b.to_vec()).unwrap(),
        )
        .unwrap();
        dot(out.data(), &proj)
    };
    let g = layers::conv2d_backward(
        &Tensor::from_vec(&[c, h, w], x.clone())?,
        &Tensor::from_vec(&[o, c, 3, 3], wt.clone())?,
        &proj,
        true,
    )?;
    let mut a = g.input.unwrap_or_default();
    a.extend(&g.weight);
    a.extend(&g.bias);
    let mut n = numeric(&x, &all(x.len()), |v| f(v, &wt, &b));
    n.extend(numeric(&wt, &all(wt.len()), |v| f(&x, v, &b)));
    n.extend(numeric(&b, &all(b.len()), |v| f(&x, &wt, v)));
    Ok(relative_error(&a, &n))
}

fn pool_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (c, h, w) = (rng.random_range(1..4), 2 * rng.random_range(1..5), 2 * rng.random_range(1..5));
    let x = normal(rng, c * h * w);
    let proj = normal(rng, c * h * w / 4);
    let (_, arg) = layers::maxpool2(&Tensor::from_vec(&[c, h, w], x.clone())?)?;
    let a = layers::scatter_backward(x.len(), &arg, &proj);
    let n = numeric(&x, &all(x.len()), |v| {
        let (out, _) = layers::maxpool2(&Tensor::from_vec(&[c, h, w], v.to_vec()).unwrap()).unwrap();
        dot(out.data(), &proj)
    });
    Ok(relative_error(&a, &n))
}

fn relu_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(4..40);
    // keep inputs away from the kink
    let x: Vec<f64> = normal(rng, n).iter().map(|v| v + 0.1 * v.signum()).collect();
    let proj = normal(rng, n);
    let mut out = x.clone();
    layers::relu_inplace(&mut out);
    let mut a = proj.clone();
    layers::relu_backward(&out, &mut a);
    let num = numeric(&x, &all(n), |v| {
        let mut y = v.to_vec();
        layers::relu_inplace(&mut y);
        dot(&y, &proj)
    });
    Ok(relative_error(&a, &num))
}

fn linear_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, i, o) = (rng.random_range(1..6), rng.random_range(1..8), rng.random_range(1..6));
    let x = normal(rng, m * i);
    let wt = normal(rng, o * i);
    let b = normal(rng, o);
    let proj = normal(rng, m * o);
    let f = |x: &[f64], wt: &[f64], b: &[f64]| -> f64 {
        let y = layers::linear(
            &Matrix::from_vec(m, i, x.to_vec()).unwrap(),
            &Tensor::from_vec(&[o, i], wt.to_vec()).unwrap(),
            &Tensor::from_vec(&[o], b.to_vec()).unwrap(),
        )
        .unwrap();
        dot(y.as_slice(), &proj)
    };
    let g = layers::linear_backward(
        &Matrix::from_vec(m, i, x.clone())?,
        &Tensor::from_vec(&[o, i], wt.clone())?,
        &Matrix::from_vec(m, o, proj.clone())?,
    )?;
    let mut a = g.input.into_vec();
    a.extend(&g.weight);
    a.extend(&g.bias);
    let mut n = numeric(&x, &all(x.len()), |v| f(v, &wt, &b));
    n.extend(numeric(&wt, &all(wt.len()), |v| f(&x, v, &b)));
    n.extend(numeric(&b, &all(b.len()), |v| f(&x, &wt, v)));
    Ok(relative_error(&a, &n))
}

fn roi_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (c, h, w, p) = (rng.random_range(1..4), rng.random_range(4..10), rng.random_range(4..10), rng.random_range(1..4));
    let x = normal(rng, c * h * w);
    let x1 = rng.random_range(0.0..w as f64 - 1.0);
    let y1 = rng.random_range(0.0..h as f64 - 1.0);
    let roi = BBox::new(x1, y1, rng.random_range(x1 + 0.5..=w as f64), rng.random_range(y1 + 0.5..=h as f64))?;
    let proj = normal(rng, c * p * p);
    let (_, arg) = layers::roi_pool(&Tensor::from_vec(&[c, h, w], x.clone())?, &roi, p)?;
    let a = layers::scatter_backward(x.len(), &arg, &proj);
    let n = numeric(&x, &all(x.len()), |v| {
        let (out, _) = layers::roi_pool(&Tensor::from_vec(&[c, h, w], v.to_vec()).unwrap(), &roi, p).unwrap();
        dot(out.data(), &proj)
    });
    Ok(relative_error(&a, &n))
}

/// Small random scene for the whole-network check.
fn network_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut cfg = Config::default();
    cfg.rpn_batch = 32;
    cfg.head_batch = 16;
    cfg.mu = rng.random_range(0.01..0.5);
    let net = NetConfig {
        conv1_channels: 3,
        conv2_channels: 4,
        rpn_channels: 4,
        hidden: 8,
        feature_dim: 6,
        ..cfg.net_config()
    };
    let mut model = DetectorModel::new(net.clone(), rng)?;
    for p in Param::ALL {
        let t = model.param_mut(p);
        if t.shape().len() == 1 {
            let b = normal(rng, t.len());
            t.data_mut().iter_mut().zip(b).for_each(|(d, v)| *d = 0.1 * v);
        }
    }
    let image = Tensor::from_vec(&[1, 32, 32], (0..32 * 32).map(|_| rng.random::<f64>()).collect())?;
    let gts: Vec<BBox> = (0..rng.random_range(1..3))
        .map(|_| {
            let s = rng.random_range(8.0..16.0);
            let x = rng.random_range(0.0..32.0 - s);
            let y = rng.random_range(0.0..32.0 - s);
            BBox::new(x, y, x + s, y + s * 1.2_f64.min((32.0 - y) / s))
        })
        .collect::<Result<_>>()?;
    let centers = random_centers(rng, net.feature_dim)?;
    let plan = build_plan(&model, &cfg, &image, &gts, rng)?;

    let mut grads = Gradients::zeros_like(&model);
    loss_and_grad(&model, &cfg, &centers, &image, &plan, Some(&mut grads))?;

    // 50 random coordinates over the flattened parameter vector
    let sizes: Vec<usize> = Param::ALL.iter().map(|&p| model.param(p).len()).collect();
    let total: usize = sizes.iter().sum();
    let chosen = pick(rng, total, 50);
    let locate = |mut k: usize| {
        for (pi, &s) in sizes.iter().enumerate() {
            if k < s {
                return (Param::ALL[pi], k);
            }
            k -= s;
        }
        unreachable!()
    };
    let base = loss_and_grad(&model, &cfg, &centers, &image, &plan, None)?.total;
    let mut a = Vec::with_capacity(chosen.len());
    let mut n = Vec::with_capacity(chosen.len());
    for &k in &chosen {
        let (p, i) = locate(k);
        a.push(grads.get(p)[i]);
        let orig = model.param(p).data()[i];
        let at = |v: f64, m: &mut DetectorModel| -> Result<f64> {
            m.param_mut(p).data_mut()[i] = v;
            Ok(loss_and_grad(m, &cfg, &centers, &image, &plan, None)?.total)
        };
        // A probe that straddles a ReLU or max-pool switch shows up as
        // disagreeing one-sided slopes; shrink the step until they agree.
        let mut slope = 0.0;
        for h in [STEP, STEP / 10.0, STEP / 100.0] {
            let up = at(orig + h, &mut model)?;
            let down = at(orig - h, &mut model)?;
            slope = (up - down) / (2.0 * h);
            let (fwd, bwd) = ((up - base) / h, (base - down) / h);
            if (fwd - bwd).abs() <= 1e-3 * fwd.abs().max(bwd.abs()).max(1e-3) {
                break;
            }
        }
        at(orig, &mut model)?;
        n.push(slope);
    }
    Ok(relative_error(&a, &n))
}

/// Runs the whole suite from one seed.
pub fn run(seed: u64) -> Result<GradcheckReport> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        checks: Vec::new(),
    };
    s.run("loss/softmax_ce", LOSS_TOLERANCE, ce_case)?;
    s.run("loss/smooth_l1", LOSS_TOLERANCE, smooth_l1_case)?;
    s.run("loss/center", LOSS_TOLERANCE, center_case)?;
    s.run("loss/multitask", LOSS_TOLERANCE, multitask_case)?;
    s.run("layer/conv3x3", NETWORK_TOLERANCE, conv_case)?;
    s.run("layer/relu", NETWORK_TOLERANCE, relu_case)?;
    s.run("layer/maxpool2", NETWORK_TOLERANCE, pool_case)?;
    s.run("layer/linear", NETWORK_TOLERANCE, linear_case)?;
    s.run("layer/roi_pool", NETWORK_TOLERANCE, roi_case)?;
    s.run("network/full", NETWORK_TOLERANCE, network_case)?;
    Ok(GradcheckReport {
        seed,
        checks: s.checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn suite_passes() {
        let report = run(7).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{} max rel error {:e}", c.name, c.max_relative_error);
        }
    }
}
