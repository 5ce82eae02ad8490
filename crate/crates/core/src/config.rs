//! Run configuration: every hyperparameter, as a flat `key = value` file.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are skipped.
//! Lists are comma-separated. [`Config::to_text`] writes every key in a fixed
//! order, so `to_text(parse(to_text(c))) == to_text(c)`.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::AnchorSpec;
use crate::losses::LossWeights;
use crate::matching::{LabelThresholds, OhemConfig};
use crate::pyramid::ScaleSet;
use crate::synthdata::SceneSpec;
use crate::tinynet::{NetConfig, TRUNK_STRIDE};

/// Which per-sample loss ranks hard examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OhemRank {
    Cls,
    ClsReg,
}

impl FromStr for OhemRank {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cls" => Ok(OhemRank::Cls),
            "cls+reg" => Ok(OhemRank::ClsReg),
            other => Err(format!("expected `cls` or `cls+reg`, got `{other}`")),
        }
    }
}

impl std::fmt::Display for OhemRank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OhemRank::Cls => "cls",
            OhemRank::ClsReg => "cls+reg",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Learning rate is multiplied by `lr_decay` at `lr_decay_at * steps`.
    pub lr_decay: f64,
    pub lr_decay_at: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    pub batch_images: usize,

    pub lambda: f64,
    pub mu: f64,
    pub center_alpha: f64,

    pub rpn_batch: usize,
    pub head_batch: usize,
    pub ohem: bool,
    pub ohem_rpn: bool,
    pub ohem_rank: OhemRank,

    pub proposal_cap: usize,
    pub nms_proposal: f64,
    pub nms_final: f64,
    pub min_proposal_size: f64,
    pub score_threshold: f64,

    pub anchor_pos_iou: f64,
    pub anchor_neg_iou: f64,
    pub proposal_pos_iou: f64,
    pub proposal_neg_iou_lo: f64,

    pub anchor_stride: f64,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub scales: Vec<f64>,
    pub multiscale_train: bool,

    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub rpn_channels: usize,
    pub roi_size: usize,
    pub hidden: usize,
    pub feature_dim: usize,

    pub image_width: usize,
    pub image_height: usize,
    pub faces_min: usize,
    pub faces_max: usize,
    pub face_size_min: usize,
    pub face_size_max: usize,
    pub distractors_min: usize,
    pub distractors_max: usize,
    pub noise_sigma: f64,
    pub train_images: usize,
    pub test_images: usize,

    pub eval_iou: f64,
    pub eval_fp_at: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            steps: 2000,
            learning_rate: 0.02,
            lr_decay: 0.1,
            lr_decay_at: 0.8,
            momentum: 0.9,
            grad_clip: 10.0,
            batch_images: 4,
            lambda: 1.0,
            mu: 0.01,
            center_alpha: 0.5,
            rpn_batch: 256,
            head_batch: 128,
            ohem: true,
            ohem_rpn: true,
            ohem_rank: OhemRank::Cls,
            proposal_cap: 2000,
            nms_proposal: 0.7,
            nms_final: 0.3,
            min_proposal_size: 2.0,
            score_threshold: 0.5,
            anchor_pos_iou: 0.7,
            anchor_neg_iou: 0.3,
            proposal_pos_iou: 0.5,
            proposal_neg_iou_lo: 0.1,
            anchor_stride: TRUNK_STRIDE as f64,
            anchor_scales: vec![8.0, 16.0, 32.0],
            anchor_ratios: vec![1.0, 1.3],
            scales: vec![0.5, 1.0, 2.0],
            multiscale_train: true,
            conv1_channels: 8,
            conv2_channels: 16,
            rpn_channels: 16,
            roi_size: 4,
            hidden: 64,
            feature_dim: 32,
            image_width: 64,
            image_height: 64,
            faces_min: 1,
            faces_max: 3,
            face_size_min: 12,
            face_size_max: 32,
            distractors_min: 1,
            distractors_max: 3,
            noise_sigma: 0.04,
            train_images: 2000,
            test_images: 200,
            eval_iou: 0.5,
            eval_fp_at: 2000,
        }
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn parse_scalar<T: FromStr>(field: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        field: field.into(),
        msg: format!("cannot parse `{value}`"),
    })
}

fn parse_bool(field: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config {
            field: field.into(),
            msg: format!("expected on/off, got `{value}`"),
        }),
    }
}

pub fn parse_list(field: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|s| parse_scalar::<f64>(field, s.trim()))
        .collect()
}

fn invalid(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

impl Config {
    /// Parses a config file on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(n + 1, format!("expected `key = value`, got `{line}`")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! scalar {
            ($($name:ident),* $(,)?) => {
                match key {
                    $(stringify!($name) => { self.$name = parse_scalar(key, value)?; return Ok(()); })*
                    _ => {}
                }
            };
        }
        scalar!(
            seed, steps, learning_rate, lr_decay, lr_decay_at, momentum, grad_clip, batch_images,
            lambda, mu, center_alpha, rpn_batch, head_batch, proposal_cap, nms_proposal, nms_final,
            min_proposal_size, score_threshold, anchor_pos_iou, anchor_neg_iou, proposal_pos_iou,
            proposal_neg_iou_lo, anchor_stride, conv1_channels, conv2_channels, rpn_channels,
            roi_size, hidden, feature_dim, image_width, image_height, faces_min, faces_max,
            face_size_min, face_size_max, distractors_min, distractors_max, noise_sigma,
            train_images, test_images, eval_iou, eval_fp_at,
        );
        match key {
            "ohem" => self.ohem = parse_bool(key, value)?,
            "ohem_rpn" => self.ohem_rpn = parse_bool(key, value)?,
            "multiscale_train" => self.multiscale_train = parse_bool(key, value)?,
            "ohem_rank" => self.ohem_rank = value.parse().map_err(|m: String| invalid(key, m))?,
            "anchor_scales" => self.anchor_scales = parse_list(key, value)?,
            "anchor_ratios" => self.anchor_ratios = parse_list(key, value)?,
            "scales" => self.scales = parse_list(key, value)?,
            _ => return Err(invalid(key, "unknown key")),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! emit {
            ($($name:ident),* $(,)?) => {
                $( let _ = writeln!(s, "{} = {}", stringify!($name), self.$name); )*
            };
        }
        emit!(seed, steps, learning_rate, lr_decay, lr_decay_at, momentum, grad_clip, batch_images);
        emit!(lambda, mu, center_alpha, rpn_batch, head_batch);
        let _ = writeln!(s, "ohem = {}", on_off(self.ohem));
        let _ = writeln!(s, "ohem_rpn = {}", on_off(self.ohem_rpn));
        emit!(ohem_rank, proposal_cap, nms_proposal, nms_final, min_proposal_size, score_threshold);
        emit!(anchor_pos_iou, anchor_neg_iou, proposal_pos_iou, proposal_neg_iou_lo, anchor_stride);
        let _ = writeln!(s, "anchor_scales = {}", fmt_list(&self.anchor_scales));
        let _ = writeln!(s, "anchor_ratios = {}", fmt_list(&self.anchor_ratios));
        let _ = writeln!(s, "scales = {}", fmt_list(&self.scales));
        let _ = writeln!(s, "multiscale_train = {}", on_off(self.multiscale_train));
        emit!(conv1_channels, conv2_channels, rpn_channels, roi_size, hidden, feature_dim);
        emit!(image_width, image_height, faces_min, faces_max, face_size_min, face_size_max);
        emit!(distractors_min, distractors_max, noise_sigma, train_images, test_images);
        emit!(eval_iou, eval_fp_at);
        s
    }

    /// SHA-256 of the canonical text; stored in checkpoint headers.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |field: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(field, format!("must be in [0, 1], got {v}")))
            }
        };
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(field, format!("must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("grad_clip", self.grad_clip)?;
        positive("lr_decay", self.lr_decay)?;
        unit("lr_decay_at", self.lr_decay_at)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum", "must be in [0, 1)"));
        }
        if self.batch_images == 0 {
            return Err(invalid("batch_images", "must be at least 1"));
        }
        LossWeights {
            lambda: self.lambda,
            mu: self.mu,
        }
        .validate()
        .map_err(|e| invalid("lambda/mu", e.to_string()))?;
        if !(self.center_alpha > 0.0 && self.center_alpha <= 1.0) {
            return Err(invalid("center_alpha", "must be in (0, 1]"));
        }
        OhemConfig::new(self.rpn_batch).map_err(|e| invalid("rpn_batch", e.to_string()))?;
        OhemConfig::new(self.head_batch).map_err(|e| invalid("head_batch", e.to_string()))?;
        if self.proposal_cap == 0 {
            return Err(invalid("proposal_cap", "must be at least 1"));
        }
        for (f, v) in [
            ("nms_proposal", self.nms_proposal),
            ("nms_final", self.nms_final),
            ("score_threshold", self.score_threshold),
            ("anchor_pos_iou", self.anchor_pos_iou),
            ("anchor_neg_iou", self.anchor_neg_iou),
            ("proposal_pos_iou", self.proposal_pos_iou),
            ("proposal_neg_iou_lo", self.proposal_neg_iou_lo),
            ("eval_iou", self.eval_iou),
        ] {
            unit(f, v)?;
        }
        if self.anchor_neg_iou > self.anchor_pos_iou {
            return Err(invalid("anchor_neg_iou", "must not exceed anchor_pos_iou"));
        }
        if self.proposal_neg_iou_lo > self.proposal_pos_iou {
            return Err(invalid("proposal_neg_iou_lo", "must not exceed proposal_pos_iou"));
        }
        if self.min_proposal_size < 0.0 {
            return Err(invalid("min_proposal_size", "must be non-negative"));
        }
        if self.anchor_stride != TRUNK_STRIDE as f64 {
            return Err(invalid(
                "anchor_stride",
                format!("must equal the trunk stride {TRUNK_STRIDE}"),
            ));
        }
        self.anchor_spec()
            .validate()
            .map_err(|e| invalid("anchor_scales/anchor_ratios", e.to_string()))?;
        ScaleSet::new(self.scales.clone()).map_err(|e| invalid("scales", e.to_string()))?;
        for (f, v) in [
            ("conv1_channels", self.conv1_channels),
            ("conv2_channels", self.conv2_channels),
            ("rpn_channels", self.rpn_channels),
            ("roi_size", self.roi_size),
            ("hidden", self.hidden),
            ("feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                return Err(invalid(f, "must be at least 1"));
            }
        }
        if self.image_width % TRUNK_STRIDE != 0 || self.image_width < 8 {
            return Err(invalid("image_width", format!("must be a multiple of {TRUNK_STRIDE}, >= 8")));
        }
        if self.image_height % TRUNK_STRIDE != 0 || self.image_height < 8 {
            return Err(invalid("image_height", format!("must be a multiple of {TRUNK_STRIDE}, >= 8")));
        }
        self.scene_spec(0)
            .validate()
            .map_err(|e| invalid("faces/face_size/distractors/noise_sigma", e.to_string()))?;
        Ok(())
    }

    pub fn anchor_spec(&self) -> AnchorSpec {
        AnchorSpec {
            base_stride: self.anchor_stride,
            scales: self.anchor_scales.clone(),
            aspect_ratios: self.anchor_ratios.clone(),
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            conv1_channels: self.conv1_channels,
            conv2_channels: self.conv2_channels,
            rpn_channels: self.rpn_channels,
            anchors_per_cell: self.anchor_scales.len() * self.anchor_ratios.len(),
            roi_size: self.roi_size,
            hidden: self.hidden,
            feature_dim: self.feature_dim,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            mu: self.mu,
        }
    }

    pub fn thresholds(&self) -> LabelThresholds {
        LabelThresholds {
            anchor_pos: self.anchor_pos_iou,
            anchor_neg: self.anchor_neg_iou,
            proposal_pos: self.proposal_pos_iou,
            proposal_neg_lo: self.proposal_neg_iou_lo,
        }
    }

    pub fn scale_set(&self) -> Result<ScaleSet> {
        ScaleSet::new(self.scales.clone())
    }

    /// Scene generator settings; `seed` selects the split.
    pub fn scene_spec(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            image_w: self.image_width,
            image_h: self.image_height,
            n_faces: (self.faces_min, self.faces_max),
            face_size: (self.face_size_min, self.face_size_max),
            noise_sigma: self.noise_sigma,
            distractor_count: (self.distractors_min, self.distractors_max),
            seed,
        }
    }
}
