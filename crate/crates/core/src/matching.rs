//! Ground-truth assignment for anchors and proposals, and balanced hard
//! example mining.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_delta, iou, BBox, Delta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSample {
    pub index: usize,
    pub label: Label,
    pub matched_gt: Option<usize>,
    pub target_delta: Option<Delta>,
}

impl LabeledSample {
    fn ignore(index: usize) -> Self {
        LabeledSample {
            index,
            label: Label::Ignore,
            matched_gt: None,
            target_delta: None,
        }
    }

    fn negative(index: usize) -> Self {
        LabeledSample {
            label: Label::Negative,
            ..Self::ignore(index)
        }
    }

    fn positive(index: usize, gt: usize, delta: Delta) -> Self {
        LabeledSample {
            index,
            label: Label::Positive,
            matched_gt: Some(gt),
            target_delta: Some(delta),
        }
    }
}

/// IoU cut-offs for both labeling stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelThresholds {
    pub anchor_pos: f64,
    pub anchor_neg: f64,
    pub proposal_pos: f64,
    pub proposal_neg_lo: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        LabelThresholds {
            anchor_pos: 0.7,
            anchor_neg: 0.3,
            proposal_pos: 0.5,
            proposal_neg_lo: 0.1,
        }
    }
}

/// Best gt (lowest index on ties) and its IoU for one box.
fn best_gt(b: &BBox, gts: &[BBox]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        let v = iou(b, gt);
        if best.map_or(true, |(_, bv)| v > bv) {
            best = Some((g, v));
        }
    }
    best
}

fn positive_sample(index: usize, b: &BBox, gt_index: usize, gts: &[BBox]) -> LabeledSample {
    match encode_delta(&gts[gt_index], b) {
        Ok(d) => LabeledSample::positive(index, gt_index, d),
        // Zero-size boxes cannot carry a regression target.
        Err(_) => LabeledSample::ignore(index),
    }
}

/// Labels anchors for the proposal stage with the default 0.7 / 0.3 cut-offs.
pub fn label_anchors(anchors: &[BBox], gts: &[BBox], image_w: usize, image_h: usize) -> Vec<LabeledSample> {
    label_anchors_with(anchors, gts, image_w, image_h, &LabelThresholds::default())
}

pub fn label_anchors_with(
    anchors: &[BBox],
    gts: &[BBox],
    image_w: usize,
    image_h: usize,
    th: &LabelThresholds,
) -> Vec<LabeledSample> {
    let (w, h) = (image_w as f64, image_h as f64);
    let inside: Vec<bool> = anchors.iter().map(|a| a.inside(w, h)).collect();

    // For every gt, its best in-image anchor (lowest index on ties).
    let mut claimed = vec![None::<usize>; anchors.len()];
    for (g, gt) in gts.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (a, anchor) in anchors.iter().enumerate() {
            if !inside[a] {
                continue;
            }
            let v = iou(anchor, gt);
            if v > 0.0 && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((a, v));
            }
        }
        if let Some((a, _)) = best {
            // Several gts may claim one anchor; its regression target goes to
            // the gt it overlaps most.
            claimed[a].get_or_insert(g);
        }
    }

    anchors
        .iter()
        .enumerate()
        .map(|(a, anchor)| {
            if !inside[a] {
                return LabeledSample::ignore(a);
            }
            let best = best_gt(anchor, gts);
            let max_iou = best.map_or(0.0, |(_, v)| v);
            if claimed[a].is_some() || max_iou > th.anchor_pos {
                let (g, _) = best.expect("claimed anchor overlaps a gt");
                positive_sample(a, anchor, g, gts)
            } else if max_iou < th.anchor_neg {
                LabeledSample::negative(a)
            } else {
                LabeledSample::ignore(a)
            }
        })
        .collect()
}

/// Labels refinement-stage proposals: `>= 0.5` positive, `[0.1, 0.5)`
/// negative, everything below 0.1 ignored.
pub fn label_proposals(proposals: &[BBox], gts: &[BBox]) -> Vec<LabeledSample> {
    label_proposals_with(proposals, gts, &LabelThresholds::default())
}

pub fn label_proposals_with(proposals: &[BBox], gts: &[BBox], th: &LabelThresholds) -> Vec<LabeledSample> {
    proposals
        .iter()
        .enumerate()
        .map(|(p, b)| match best_gt(b, gts) {
            Some((g, v)) if v >= th.proposal_pos => positive_sample(p, b, g, gts),
            Some((_, v)) if v >= th.proposal_neg_lo => LabeledSample::negative(p),
            _ => LabeledSample::ignore(p),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OhemConfig {
    pub batch_size: usize,
}

impl OhemConfig {
    pub fn new(batch_size: usize) -> Result<Self> {
        if batch_size < 2 || batch_size % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "OHEM batch size must be even and >= 2, got {batch_size}"
            )));
        }
        Ok(OhemConfig { batch_size })
    }

    /// Per-class cap; positives and negatives are mined 1:1.
    pub fn per_class(&self) -> usize {
        self.batch_size / 2
    }
}

fn split_by_label(samples: &[LabeledSample]) -> (Vec<usize>, Vec<usize>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match s.label {
            Label::Positive => pos.push(i),
            Label::Negative => neg.push(i),
            Label::Ignore => {}
        }
    }
    (pos, neg)
}

/// Selects the hardest positives and hardest negatives separately, at most
/// `batch_size / 2` of each. Returns positions into `samples`: positives
/// first, then negatives, each by descending loss with ties to the lower
/// position.
pub fn ohem_select(samples: &[LabeledSample], per_sample_loss: &[f64], cfg: &OhemConfig) -> Result<Vec<usize>> {
    if samples.len() != per_sample_loss.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} samples but {} losses",
            samples.len(),
            per_sample_loss.len()
        )));
    }
    if per_sample_loss.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("per-sample losses"));
    }
    let (mut pos, mut neg) = split_by_label(samples);
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::UntrainableBatch);
    }
    let k = cfg.per_class();
    let hardest = |set: &mut Vec<usize>| {
        set.sort_by(|&a, &b| per_sample_loss[b].total_cmp(&per_sample_loss[a]).then(a.cmp(&b)));
        set.truncate(k);
    };
    hardest(&mut pos);
    hardest(&mut neg);
    pos.extend(neg);
    Ok(pos)
}

/// Random balanced sampling with the same per-class caps, for runs with
/// hard example mining disabled. Output order: positives then negatives,
/// each ascending.
pub fn random_select<R: Rng + ?Sized>(samples: &[LabeledSample], cfg: &OhemConfig, rng: &mut R) -> Result<Vec<usize>> {
    let (mut pos, mut neg) = split_by_label(samples);
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::UntrainableBatch);
    }
    let k = cfg.per_class();
    for set in [&mut pos, &mut neg] {
        set.shuffle(rng);
        set.truncate(k);
        set.sort_unstable();
    }
    pos.extend(neg);
    Ok(pos)
}
