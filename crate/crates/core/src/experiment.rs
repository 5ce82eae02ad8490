//! Datasets, batch evaluation and the paired trainings behind the ablation
//! report.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{self, parse_wider_annotations, EvalReport, EvalSummary};
use crate::geometry::{BBox, Detection};
use crate::losses::FACE;
use crate::pyramid::ScaleSet;
use crate::synthdata::{generate_scene, image_path, read_pgm, WIDER_FILE};
use crate::tinynet::detector::{detect, detect_multiscale, labeled_features};
use crate::tinynet::{train, DetectorModel, Sample, StepReport, TrainState};

/// Generator seed of the training split for a run seed.
pub fn train_split_seed(seed: u64) -> u64 {
    seed.wrapping_mul(2)
}

/// Generator seed of the held-out split for a run seed.
pub fn test_split_seed(seed: u64) -> u64 {
    seed.wrapping_mul(2).wrapping_add(1)
}

/// Held-out images whose faces are all smaller than 16 px.
pub fn small_face_config(cfg: &Config) -> Config {
    Config {
        face_size_min: 8,
        face_size_max: 15,
        ..cfg.clone()
    }
}

/// `n` synthetic scenes from split seed `split`.
pub fn synthetic_split(cfg: &Config, split: u64, n: usize) -> Result<Vec<Sample>> {
    let spec = cfg.scene_spec(split);
    spec.validate()?;
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let (image, boxes) = generate_scene(&spec, i)?;
            Ok(Sample { image, boxes })
        })
        .collect()
}

/// Loads a dataset directory written by `write_dataset` (or any directory
/// with a WIDER-style annotation file and PGM images). Returns image keys
/// (paths without extension) in file order.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, Sample)>> {
    let ann = dir.join(WIDER_FILE);
    let text = std::fs::read_to_string(&ann).map_err(|e| Error::io(&ann, e))?;
    let entries = parse_wider_annotations(&text)?;
    entries
        .into_par_iter()
        .map(|(path, boxes)| {
            let key = eval::image_key(&path).to_string();
            let image = read_pgm(&image_path(dir, &key))?;
            Ok((key, Sample { image, boxes }))
        })
        .collect()
}

/// Detections for every image, in input order. With `scales`, each image
/// is run at every scale and merged.
pub fn detect_all(
    model: &DetectorModel,
    cfg: &Config,
    samples: &[Sample],
    scales: Option<&ScaleSet>,
    score_threshold: f64,
) -> Result<Vec<Vec<Detection>>> {
    samples
        .par_iter()
        .map(|s| match scales {
            Some(set) => detect_multiscale(model, cfg, &s.image, set, score_threshold),
            None => detect(model, cfg, &s.image, score_threshold),
        })
        .collect()
}

pub fn ground_truths(samples: &[Sample]) -> Vec<Vec<BBox>> {
    samples.iter().map(|s| s.boxes.clone()).collect()
}

/// Single- or multi-scale evaluation with every detection kept (threshold 0).
pub fn evaluate_model(model: &DetectorModel, cfg: &Config, samples: &[Sample], scales: Option<&ScaleSet>) -> Result<EvalReport> {
    let dets = detect_all(model, cfg, samples, scales, 0.0)?;
    eval::evaluate(&dets, &ground_truths(samples), cfg.eval_iou, cfg.eval_fp_at)
}

/// Trace of the within-class covariance of head features, per class
/// (`[background, face]`), over the labeled proposals of `samples`.
pub fn within_class_trace(model: &DetectorModel, cfg: &Config, samples: &[Sample]) -> Result<[f64; 2]> {
    let per_image: Vec<_> = samples
        .par_iter()
        .map(|s| labeled_features(model, cfg, &s.image, &s.boxes))
        .collect::<Result<_>>()?;
    let d = model.config.feature_dim;
    let mut out = [0.0; 2];
    for (class, slot) in out.iter_mut().enumerate() {
        let rows: Vec<&[f64]> = per_image
            .iter()
            .flat_map(|(f, y)| y.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| f.row(i)))
            .collect();
        if rows.is_empty() {
            *slot = f64::NAN;
            continue;
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v / n;
            }
        }
        *slot = rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
            .sum::<f64>()
            / n;
    }
    Ok(out)
}

/// Trains a fresh model on `data` and returns the final state and the
/// per-step log.
pub fn train_model(cfg: &Config, data: &[Sample]) -> Result<(TrainState, Vec<StepReport>)> {
    let mut state = TrainState::new(cfg)?;
    let mut log = Vec::with_capacity(cfg.steps);
    train(&mut state, cfg, data, |r| log.push(r.clone()))?;
    Ok((state, log))
}

pub fn loss_log_csv(log: &[StepReport]) -> String {
    let mut out = String::from(StepReport::CSV_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Outcome of one trained variant.
#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub mu: f64,
    pub ohem: bool,
    pub single_scale: EvalSummary,
    pub multi_scale: EvalSummary,
    pub small_face_recall_single: f64,
    pub small_face_recall_multi: f64,
    /// Within-class covariance trace of head features on the held-out set.
    pub trace_background: f64,
    pub trace_face: f64,
    /// Mean of the last tenth of the training log.
    pub final_head_cls_face: f64,
    pub final_head_cls_background: f64,
    pub final_total_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub seed: u64,
    pub steps: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub variants: Vec<VariantResult>,
}

/// Held-out data shared by every variant.
pub struct EvalSets {
    pub test: Vec<Sample>,
    pub small_faces: Vec<Sample>,
}

impl EvalSets {
    pub fn synthetic(cfg: &Config) -> Result<Self> {
        let split = test_split_seed(cfg.seed);
        Ok(EvalSets {
            test: synthetic_split(cfg, split, cfg.test_images)?,
            small_faces: synthetic_split(&small_face_config(cfg), split, cfg.test_images)?,
        })
    }
}

fn tail_mean(log: &[StepReport], f: impl Fn(&StepReport) -> f64) -> f64 {
    if log.is_empty() {
        return f64::NAN;
    }
    let k = (log.len() / 10).max(1);
    log[log.len() - k..].iter().map(f).sum::<f64>() / k as f64
}

/// Evaluates a trained model on every held-out measurement.
pub fn assess(name: &str, cfg: &Config, model: &DetectorModel, log: &[StepReport], sets: &EvalSets) -> Result<VariantResult> {
    let scales = cfg.scale_set()?;
    let single = evaluate_model(model, cfg, &sets.test, None)?;
    let multi = evaluate_model(model, cfg, &sets.test, Some(&scales))?;
    let small_gts = ground_truths(&sets.small_faces);
    let small_single = detect_all(model, cfg, &sets.small_faces, None, cfg.score_threshold)?;
    let small_multi = detect_all(model, cfg, &sets.small_faces, Some(&scales), cfg.score_threshold)?;
    let trace = within_class_trace(model, cfg, &sets.test)?;
    Ok(VariantResult {
        name: name.to_string(),
        mu: cfg.mu,
        ohem: cfg.ohem,
        single_scale: single.summary,
        multi_scale: multi.summary,
        small_face_recall_single: eval::recall_at(&small_single, &small_gts, cfg.eval_iou, cfg.score_threshold),
        small_face_recall_multi: eval::recall_at(&small_multi, &small_gts, cfg.eval_iou, cfg.score_threshold),
        trace_background: trace[0],
        trace_face: trace[FACE],
        final_head_cls_face: tail_mean(log, |r| r.head_cls_face),
        final_head_cls_background: tail_mean(log, |r| r.head_cls_background),
        final_total_loss: tail_mean(log, |r| r.total),
    })
}

/// Paired seeded trainings: the configured run, the same run with `mu = 0`,
/// and the same run with hard-example mining off. Every variant is scored
/// single- and multi-scale. `on_variant` receives each finished variant's
/// name, config and log.
pub fn ablate<F>(cfg: &Config, mut on_variant: F) -> Result<AblationReport>
where
    F: FnMut(&str, &Config, &[StepReport]),
{
    let train_set = synthetic_split(cfg, train_split_seed(cfg.seed), cfg.train_images)?;
    let sets = EvalSets::synthetic(cfg)?;
    let variants = [
        ("baseline", cfg.clone()),
        ("no_center_loss", Config { mu: 0.0, ..cfg.clone() }),
        (
            "no_ohem",
            Config {
                ohem: false,
                ohem_rpn: false,
                ..cfg.clone()
            },
        ),
    ];
    let mut results = Vec::new();
    for (name, vcfg) in variants {
        let (state, log) = train_model(&vcfg, &train_set)?;
        on_variant(name, &vcfg, &log);
        results.push(assess(name, &vcfg, &state.model, &log, &sets)?);
    }
    Ok(AblationReport {
        seed: cfg.seed,
        steps: cfg.steps,
        train_images: cfg.train_images,
        test_images: cfg.test_images,
        variants: results,
    })
}
