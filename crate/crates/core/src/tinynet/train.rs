//! Joint training of both heads with SGD and momentum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::{update_centers, Centers, FACE};
use crate::matrix::Matrix;
use crate::pyramid::{pick_training_scale, resize_image};

use super::detector::{build_plan_from, loss_and_grad_from, ImageLoss};
use super::model::{DetectorModel, Gradients};
use super::tensor::Tensor;

/// One training image and its face boxes.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub boxes: Vec<BBox>,
}

/// RNG for a given `(seed, step, slot)`; independent of thread scheduling.
pub fn stream_rng(seed: u64, step: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 16) | (slot & 0xffff));
    rng
}

const INIT_SLOT: u64 = 0xffff;
const BATCH_SLOT: u64 = 0xfffe;

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: DetectorModel,
    pub centers: Centers,
    pub step: u64,
    pub seed: u64,
    velocity: Gradients,
}

/// Losses of one step, averaged over the images of the batch.
#[derive(Debug, Clone, Default, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub learning_rate: f64,
    pub total: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub head_cls: f64,
    pub head_reg: f64,
    pub center: f64,
    /// Mean head cross-entropy over mined face RoIs.
    pub head_cls_face: f64,
    /// Mean head cross-entropy over mined background RoIs.
    pub head_cls_background: f64,
    pub grad_norm: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str =
        "step,learning_rate,total,rpn_cls,rpn_reg,head_cls,head_reg,center,head_cls_face,head_cls_background,grad_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.learning_rate,
            self.total,
            self.rpn_cls,
            self.rpn_reg,
            self.head_cls,
            self.head_reg,
            self.center,
            self.head_cls_face,
            self.head_cls_background,
            self.grad_norm
        )
    }
}

impl TrainState {
    /// Fresh model initialized from `cfg.seed`, zero centers.
    pub fn new(cfg: &Config) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, 0, INIT_SLOT);
        let model = DetectorModel::new(cfg.net_config(), &mut rng)?;
        Self::from_parts(cfg, model, Centers::zeros(cfg.feature_dim, cfg.center_alpha)?, 0)
    }

    pub fn from_parts(cfg: &Config, model: DetectorModel, centers: Centers, step: u64) -> Result<Self> {
        let velocity = Gradients::zeros_like(&model);
        Ok(TrainState {
            model,
            centers,
            step,
            seed: cfg.seed,
            velocity,
        })
    }

    /// Learning rate at the current step: constant, multiplied by `lr_decay`
    /// once `lr_decay_at * steps` steps have run.
    pub fn learning_rate(&self, cfg: &Config) -> f64 {
        if (self.step as f64) >= cfg.lr_decay_at * cfg.steps as f64 {
            cfg.learning_rate * cfg.lr_decay
        } else {
            cfg.learning_rate
        }
    }

    /// Indices of the images used by the next step.
    pub fn batch_indices(&self, cfg: &Config, dataset_len: usize) -> Vec<usize> {
        let mut rng = stream_rng(self.seed, self.step, BATCH_SLOT);
        (0..cfg.batch_images).map(|_| rng.random_range(0..dataset_len)).collect()
    }

    /// One SGD step on `batch`. Per-image gradients are computed in parallel
    /// and reduced in batch order, so the result does not depend on the
    /// number of threads.
    pub fn train_step(&mut self, cfg: &Config, batch: &[&Sample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let scales = cfg.scale_set()?;
        let per_image: Vec<Result<(Gradients, ImageLoss)>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, sample)| {
                let mut rng = stream_rng(self.seed, self.step, slot as u64);
                let (image, boxes) = if cfg.multiscale_train {
                    let s = pick_training_scale(&mut rng, &scales);
                    if s == 1.0 {
                        (sample.image.clone(), sample.boxes.clone())
                    } else {
                        let img = resize_image(&sample.image, s)?;
                        (img, sample.boxes.iter().map(|b| b.scaled(s)).collect())
                    }
                } else {
                    (sample.image.clone(), sample.boxes.clone())
                };
                let fwd = self.model.forward(&image)?;
                let plan = build_plan_from(&self.model, cfg, &fwd, &boxes, &mut rng)?;
                let mut g = Gradients::zeros_like(&self.model);
                let loss = loss_and_grad_from(&self.model, cfg, &self.centers, &fwd, &plan, Some(&mut g))?;
                Ok((g, loss))
            })
            .collect();

        let n = batch.len() as f64;
        let mut grads = Gradients::zeros_like(&self.model);
        let mut report = StepReport {
            step: self.step,
            learning_rate: self.learning_rate(cfg),
            ..Default::default()
        };
        let (mut face_ce, mut face_n, mut bg_ce, mut bg_n) = (0.0, 0usize, 0.0, 0usize);
        let mut feats: Vec<f64> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        for r in per_image {
            let (g, loss) = r?;
            grads.add_all(&g);
            report.total += loss.total / n;
            report.rpn_cls += loss.rpn.cls / n;
            report.rpn_reg += loss.rpn.reg / n;
            report.head_cls += loss.head.cls / n;
            report.head_reg += loss.head.reg / n;
            report.center += loss.head.center / n;
            if let Some((f, y)) = loss.features {
                for (&yi, &ce) in y.iter().zip(&loss.head.per_sample_cls) {
                    if yi == FACE {
                        face_ce += ce;
                        face_n += 1;
                    } else {
                        bg_ce += ce;
                        bg_n += 1;
                    }
                }
                feats.extend_from_slice(f.as_slice());
                labels.extend(y);
            }
        }
        report.head_cls_face = if face_n > 0 { face_ce / face_n as f64 } else { 0.0 };
        report.head_cls_background = if bg_n > 0 { bg_ce / bg_n as f64 } else { 0.0 };
        if !report.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }

        grads.scale(1.0 / n);
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        report.grad_norm = norm;
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            grads.scale(cfg.grad_clip / norm);
        }

        let lr = report.learning_rate;
        for (v, g) in self.velocity.0.iter_mut().zip(&grads.0) {
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.momentum * *vi + gi;
            }
        }
        for (slot, v) in self.velocity.0.iter().enumerate() {
            let p = super::model::Param::ALL[slot];
            for (w, vi) in self.model.param_mut(p).data_mut().iter_mut().zip(v) {
                *w -= lr * vi;
            }
        }
        if !self.model.all_finite() {
            return Err(Error::NonFinite("parameters"));
        }

        if !labels.is_empty() {
            let d = self.centers.feature_dim();
            let f = Matrix::from_vec(labels.len(), d, feats)?;
            self.centers = update_centers(&self.centers, &f, &labels)?;
        }
        self.step += 1;
        Ok(report)
    }
}

/// Trains from `state` until `cfg.steps`, calling `log` after every step.
pub fn train<F: FnMut(&StepReport)>(state: &mut TrainState, cfg: &Config, data: &[Sample], mut log: F) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    while state.step < cfg.steps as u64 {
        let idx = state.batch_indices(cfg, data.len());
        let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
        let report = state.train_step(cfg, &batch)?;
        log(&report);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_scene;

    fn small_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.image_width = 32;
        cfg.image_height = 32;
        cfg.face_size_min = 10;
        cfg.face_size_max = 16;
        cfg.faces_max = 2;
        cfg.distractors_max = 1;
        cfg.batch_images = 2;
        cfg.steps = 10;
        cfg
    }

    fn data(cfg: &Config, n: usize) -> Vec<Sample> {
        let spec = cfg.scene_spec(cfg.seed);
        (0..n as u64)
            .map(|i| {
                let (image, boxes) = generate_scene(&spec, i).unwrap();
                Sample { image, boxes }
            })
            .collect()
    }

    #[test]
    fn identical_seeds_give_identical_parameters() {
        let cfg = small_cfg();
        let d = data(&cfg, 4);
        let run = || {
            let mut s = TrainState::new(&cfg).unwrap();
            train(&mut s, &cfg, &d, |_| {}).unwrap();
            s
        };
        let (a, b) = (run(), run());
        assert_eq!(a.step, 10);
        assert_eq!(a.model, b.model);
        assert_eq!(a.centers, b.centers);
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let cfg = small_cfg();
        let d = data(&cfg, 4);
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut s = TrainState::new(&cfg).unwrap();
                train(&mut s, &cfg, &d, |_| {}).unwrap();
                s
            })
        };
        assert_eq!(run(1).model, run(3).model);
    }

    #[test]
    fn mu_only_matters_after_first_center_gradient() {
        // centers start at zero but features are not, so the center term
        // contributes a gradient from the first step on: the two runs agree
        // at initialization and differ after step 1.
        let mut a = small_cfg();
        a.steps = 1;
        a.grad_clip = 1e9;
        let mut b = a.clone();
        a.mu = 0.0;
        b.mu = 0.5;
        let d = data(&a, 2);
        let (mut sa, mut sb) = (TrainState::new(&a).unwrap(), TrainState::new(&b).unwrap());
        assert_eq!(sa.model, sb.model);
        train(&mut sa, &a, &d, |_| {}).unwrap();
        train(&mut sb, &b, &d, |_| {}).unwrap();
        assert_ne!(sa.model, sb.model);
        // only parameters upstream of the feature layer move differently
        use super::super::model::Param;
        assert_eq!(sa.model.param(Param::RpnClsW), sb.model.param(Param::RpnClsW));
        assert_eq!(sa.model.param(Param::ClsW), sb.model.param(Param::ClsW));
        assert_ne!(sa.model.param(Param::FeatW), sb.model.param(Param::FeatW));
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let mut cfg = small_cfg();
        cfg.steps = 0;
        let mut s = TrainState::new(&cfg).unwrap();
        let init = s.model.clone();
        train(&mut s, &cfg, &data(&cfg, 1), |_| {}).unwrap();
        assert_eq!(s.model, init);
    }

    #[test]
    fn overfits_one_image() {
        let mut cfg = small_cfg();
        cfg.multiscale_train = false;
        cfg.batch_images = 1;
        cfg.steps = 200;
        cfg.lr_decay_at = 1.0;
        let d = data(&cfg, 1);
        let mut s = TrainState::new(&cfg).unwrap();
        let mut losses = Vec::new();
        train(&mut s, &cfg, &d, |r| losses.push(r.total)).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let first = mean(&losses[..20]);
        let last = mean(&losses[180..]);
        assert!(last < 0.5 * first, "first {first} last {last}");
    }
}
