//! Two-stage inference and the per-image training objective.

use rand::Rng;

use crate::config::{Config, OhemRank};
use crate::pyramid::{merge_multiscale, resize_image, ScaleSet};
use crate::error::Result;
use crate::geometry::{clip_box, decode_delta, generate_anchors, nms, BBox, Delta, Detection};
use crate::losses::{self, face_probability, multitask_loss, Centers, LossReport, MultitaskInputs};
use crate::matching::{self, Label, LabeledSample, OhemConfig};
use crate::matrix::Matrix;

use super::model::{gather_anchor_rows, scatter_anchor_rows, DetectorModel, ForwardOutput, Gradients};
use super::tensor::Tensor;

/// Width/height log-ratio clamp when decoding, `ln(1000 / 16)`.
const MAX_LOG_RATIO: f64 = 4.135;

fn clamped(d: &[f64]) -> Delta {
    Delta {
        dx: d[0],
        dy: d[1],
        dw: d[2].min(MAX_LOG_RATIO),
        dh: d[3].min(MAX_LOG_RATIO),
    }
}

/// A scored candidate box from the proposal head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
}

/// Anchors matching a forward pass.
pub fn anchors_for(cfg: &Config, fwd: &ForwardOutput) -> Result<Vec<BBox>> {
    let (_, fh, fw) = fwd.feature_map.chw()?;
    generate_anchors(&cfg.anchor_spec(), fw, fh)
}

/// Decodes every anchor, clips to the image, drops boxes smaller than the
/// minimum size, keeps the top `proposal_cap` by score and applies NMS.
pub fn propose(cfg: &Config, fwd: &ForwardOutput, anchors: &[BBox], image_w: usize, image_h: usize) -> Result<Vec<Proposal>> {
    let a = cfg.net_config().anchors_per_cell;
    let logits = gather_anchor_rows(&fwd.proposal_logits, 2, a)?;
    let deltas = gather_anchor_rows(&fwd.proposal_deltas, 4, a)?;
    let mut cands = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let b = clip_box(&decode_delta(&clamped(deltas.row(i)), anchor)?, image_w, image_h);
        if b.width() < cfg.min_proposal_size || b.height() < cfg.min_proposal_size || b.area() <= 0.0 {
            continue;
        }
        cands.push(Detection::new(b, face_probability(logits.row(i))));
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&x, &y| cands[y].score.total_cmp(&cands[x].score).then(x.cmp(&y)));
    order.truncate(cfg.proposal_cap);
    order.sort_unstable();
    let top: Vec<Detection> = order.iter().map(|&i| cands[i]).collect();
    Ok(nms(&top, cfg.nms_proposal)
        .into_iter()
        .map(|d| Proposal {
            bbox: d.bbox,
            score: d.score,
        })
        .collect())
}

/// Head-B detections before score filtering and final NMS.
fn refine(model: &DetectorModel, fwd: &ForwardOutput, proposals: &[Proposal], image_w: usize, image_h: usize) -> Result<Vec<Detection>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let head = model.head_forward(&fwd.feature_map, &rois)?;
    let mut out = Vec::with_capacity(rois.len());
    for (i, roi) in rois.iter().enumerate() {
        let b = clip_box(&decode_delta(&clamped(head.deltas.row(i)), roi)?, image_w, image_h);
        if b.area() <= 0.0 {
            continue;
        }
        out.push(Detection::new(b, face_probability(head.logits.row(i))));
    }
    Ok(out)
}

/// Full two-stage inference on one image at its native scale: proposals,
/// refinement, decode, clip, keep scores strictly above the threshold, NMS.
pub fn detect(model: &DetectorModel, cfg: &Config, image: &Tensor, score_threshold: f64) -> Result<Vec<Detection>> {
    let (_, h, w) = image.chw()?;
    let fwd = model.forward(image)?;
    let anchors = anchors_for(cfg, &fwd)?;
    let proposals = propose(cfg, &fwd, &anchors, w, h)?;
    let refined: Vec<Detection> = refine(model, &fwd, &proposals, w, h)?
        .into_iter()
        .filter(|d| d.score > score_threshold)
        .collect();
    Ok(nms(&refined, cfg.nms_final))
}

/// Head-B center-loss features for proposals labeled against `gts`, with
/// their labels (1 = face). Used to measure intra-class compactness.
pub fn labeled_features(model: &DetectorModel, cfg: &Config, image: &Tensor, gts: &[BBox]) -> Result<(Matrix, Vec<usize>)> {
    let (_, h, w) = image.chw()?;
    let fwd = model.forward(image)?;
    let anchors = anchors_for(cfg, &fwd)?;
    let mut rois: Vec<BBox> = propose(cfg, &fwd, &anchors, w, h)?.iter().map(|p| p.bbox).collect();
    let labels = matching::label_proposals_with(&rois, gts, &cfg.thresholds());
    let keep: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label != Label::Ignore)
        .map(|(i, _)| i)
        .collect();
    let y: Vec<usize> = keep.iter().map(|&i| usize::from(labels[i].label == Label::Positive)).collect();
    rois = keep.iter().map(|&i| rois[i]).collect();
    if rois.is_empty() {
        return Ok((Matrix::zeros(0, model.config.feature_dim), y));
    }
    let head = model.head_forward(&fwd.feature_map, &rois)?;
    Ok((head.features, y))
}

/// Everything the loss needs that does not depend on the parameters being
/// differentiated: chosen anchors and proposals with their targets.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub anchor_idx: Vec<usize>,
    pub anchor_labels: Vec<usize>,
    pub anchor_targets: Vec<Option<Delta>>,
    pub rois: Vec<BBox>,
    pub roi_labels: Vec<usize>,
    pub roi_targets: Vec<Option<Delta>>,
}

fn targets_matrix(targets: &[Option<Delta>]) -> (Matrix, Vec<bool>) {
    let mut m = Matrix::zeros(targets.len(), 4);
    let mut mask = Vec::with_capacity(targets.len());
    for (i, t) in targets.iter().enumerate() {
        if let Some(d) = t {
            m.row_mut(i).copy_from_slice(&d.to_array());
        }
        mask.push(t.is_some());
    }
    (m, mask)
}

fn sample_class(s: &LabeledSample) -> usize {
    usize::from(s.label == Label::Positive)
}

fn per_sample_rank(cfg: &Config, cls: &[f64], reg: &[f64]) -> Vec<f64> {
    match cfg.ohem_rank {
        OhemRank::Cls => cls.to_vec(),
        OhemRank::ClsReg => cls.iter().zip(reg).map(|(c, r)| c + cfg.lambda * r).collect(),
    }
}

/// Per-row losses for labeled rows; rows labeled ignore get zero.
fn ranking_losses(cfg: &Config, logits: &Matrix, deltas: &Matrix, samples: &[LabeledSample]) -> Result<Vec<f64>> {
    let labels: Vec<usize> = samples.iter().map(sample_class).collect();
    let ce = losses::softmax_ce(logits, &labels)?;
    let targets: Vec<Option<Delta>> = samples.iter().map(|s| s.target_delta).collect();
    let (t, mask) = targets_matrix(&targets);
    let reg = losses::smooth_l1(deltas, &t, &mask)?;
    Ok(per_sample_rank(cfg, &ce.per_sample, &reg.per_sample))
}

fn select<R: Rng + ?Sized>(
    samples: &[LabeledSample],
    losses: &[f64],
    batch: usize,
    hard: bool,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let cfg = OhemConfig::new(batch)?;
    if hard {
        matching::ohem_select(samples, losses, &cfg)
    } else {
        matching::random_select(samples, &cfg, rng)
    }
}

/// Runs the forward pass, labels anchors and proposals against `gts`, and
/// mines the anchor and RoI mini-batches.
pub fn build_plan<R: Rng + ?Sized>(
    model: &DetectorModel,
    cfg: &Config,
    image: &Tensor,
    gts: &[BBox],
    rng: &mut R,
) -> Result<TrainPlan> {
    let fwd = model.forward(image)?;
    build_plan_from(model, cfg, &fwd, gts, rng)
}

/// [`build_plan`] on an existing forward pass.
pub fn build_plan_from<R: Rng + ?Sized>(
    model: &DetectorModel,
    cfg: &Config,
    fwd: &ForwardOutput,
    gts: &[BBox],
    rng: &mut R,
) -> Result<TrainPlan> {
    let (w, h) = fwd.image_size();
    let anchors = anchors_for(cfg, &fwd)?;
    let a = model.config.anchors_per_cell;
    let th = cfg.thresholds();

    let anchor_samples = matching::label_anchors_with(&anchors, gts, w, h, &th);
    let logits = gather_anchor_rows(&fwd.proposal_logits, 2, a)?;
    let deltas = gather_anchor_rows(&fwd.proposal_deltas, 4, a)?;
    let anchor_losses = ranking_losses(cfg, &logits, &deltas, &anchor_samples)?;
    let picked = select(&anchor_samples, &anchor_losses, cfg.rpn_batch, cfg.ohem_rpn, rng)?;

    let mut rois: Vec<BBox> = propose(cfg, &fwd, &anchors, w, h)?.iter().map(|p| p.bbox).collect();
    rois.extend(gts.iter().copied().filter(|g| g.area() > 0.0));
    let roi_samples = matching::label_proposals_with(&rois, gts, &th);
    let labeled: Vec<usize> = (0..rois.len()).filter(|&i| roi_samples[i].label != Label::Ignore).collect();
    let (roi_idx, roi_sel_samples) = if labeled.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let lrois: Vec<BBox> = labeled.iter().map(|&i| rois[i]).collect();
        let lsamples: Vec<LabeledSample> = labeled.iter().map(|&i| roi_samples[i]).collect();
        let head = model.head_forward(&fwd.feature_map, &lrois)?;
        let roi_losses = ranking_losses(cfg, &head.logits, &head.deltas, &lsamples)?;
        let chosen = select(&lsamples, &roi_losses, cfg.head_batch, cfg.ohem, rng)?;
        let idx: Vec<usize> = chosen.iter().map(|&k| labeled[k]).collect();
        let s: Vec<LabeledSample> = chosen.iter().map(|&k| lsamples[k]).collect();
        (idx, s)
    };

    Ok(TrainPlan {
        anchor_labels: picked.iter().map(|&i| sample_class(&anchor_samples[i])).collect(),
        anchor_targets: picked.iter().map(|&i| anchor_samples[i].target_delta).collect(),
        anchor_idx: picked,
        rois: roi_idx.iter().map(|&i| rois[i]).collect(),
        roi_labels: roi_sel_samples.iter().map(sample_class).collect(),
        roi_targets: roi_sel_samples.iter().map(|s| s.target_delta).collect(),
    })
}

/// Loss terms of one image under a fixed plan.
#[derive(Debug, Clone, Default)]
pub struct ImageLoss {
    pub rpn: LossReport,
    pub head: LossReport,
    pub total: f64,
    /// Head features and labels of the mined RoIs, for the center update.
    pub features: Option<(Matrix, Vec<usize>)>,
}

/// Loss and parameter gradients of one image under `plan`: proposal-head
/// cross-entropy and SmoothL1 plus the refinement-head multitask loss.
pub fn loss_and_grad(
    model: &DetectorModel,
    cfg: &Config,
    centers: &Centers,
    image: &Tensor,
    plan: &TrainPlan,
    grads: Option<&mut Gradients>,
) -> Result<ImageLoss> {
    let fwd = model.forward(image)?;
    loss_and_grad_from(model, cfg, centers, &fwd, plan, grads)
}

/// [`loss_and_grad`] on an existing forward pass.
pub fn loss_and_grad_from(
    model: &DetectorModel,
    cfg: &Config,
    centers: &Centers,
    fwd: &ForwardOutput,
    plan: &TrainPlan,
    grads: Option<&mut Gradients>,
) -> Result<ImageLoss> {
    let a = model.config.anchors_per_cell;
    let weights = cfg.loss_weights();

    let all_logits = gather_anchor_rows(&fwd.proposal_logits, 2, a)?;
    let all_deltas = gather_anchor_rows(&fwd.proposal_deltas, 4, a)?;
    let logits = all_logits.select_rows(&plan.anchor_idx);
    let deltas = all_deltas.select_rows(&plan.anchor_idx);
    let (targets, mask) = targets_matrix(&plan.anchor_targets);
    let ce = losses::softmax_ce(&logits, &plan.anchor_labels)?;
    let reg = losses::smooth_l1(&deltas, &targets, &mask)?;
    let rpn = LossReport {
        cls: ce.loss,
        reg: reg.loss,
        center: 0.0,
        total: ce.loss + weights.lambda * reg.loss,
        per_sample_cls: ce.per_sample,
        per_sample_reg: reg.per_sample,
    };

    let mut out = ImageLoss {
        total: rpn.total,
        rpn,
        ..Default::default()
    };

    let head_part = if plan.rois.is_empty() {
        None
    } else {
        let head = model.head_forward(&fwd.feature_map, &plan.rois)?;
        let (t, m) = targets_matrix(&plan.roi_targets);
        let (report, g) = multitask_loss(
            MultitaskInputs {
                logits: &head.logits,
                labels: &plan.roi_labels,
                pred_deltas: &head.deltas,
                target_deltas: &t,
                pos_mask: &m,
                features: &head.features,
            },
            centers,
            weights,
        )?;
        out.total += report.total;
        out.head = report;
        out.features = Some((head.features.clone(), plan.roi_labels.clone()));
        Some((head, g))
    };

    if let Some(grads) = grads {
        let map_len = fwd.feature_map.len();
        let g_map = match &head_part {
            Some((head, g)) => model.head_backward(head, map_len, &g.logits, &g.deltas, &g.features, grads)?,
            None => vec![0.0; map_len],
        };
        let mut g_logits = Matrix::zeros(all_logits.rows(), 2);
        let mut g_deltas = Matrix::zeros(all_deltas.rows(), 4);
        for (k, &i) in plan.anchor_idx.iter().enumerate() {
            for (d, s) in g_logits.row_mut(i).iter_mut().zip(ce.grad.row(k)) {
                *d += s;
            }
            for (d, s) in g_deltas.row_mut(i).iter_mut().zip(reg.grad.row(k)) {
                *d += weights.lambda * s;
            }
        }
        let gl = scatter_anchor_rows(&g_logits, fwd.proposal_logits.shape(), a);
        let gd = scatter_anchor_rows(&g_deltas, fwd.proposal_deltas.shape(), a);
        model.trunk_backward(&fwd, &gl, &gd, &g_map, grads)?;
    }
    Ok(out)
}

/// Runs [`detect`] on every rescaled copy of the image and merges the
/// results in the original frame.
pub fn detect_multiscale(
    model: &DetectorModel,
    cfg: &Config,
    image: &Tensor,
    scales: &ScaleSet,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let mut all = Vec::new();
    for (id, &s) in scales.scales().iter().enumerate() {
        let scaled = if s == 1.0 { image.clone() } else { resize_image(image, s)? };
        all.extend(detect(model, cfg, &scaled, score_threshold)?.into_iter().map(|d| Detection { scale_id: id, ..d }));
    }
    merge_multiscale(scales, &all, cfg.nms_final)
}
