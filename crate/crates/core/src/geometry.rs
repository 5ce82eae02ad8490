//! Box arithmetic: IoU, anchor grids, delta encoding, clipping and greedy NMS.
//!
//! Boxes use the corner convention `(x1, y1, x2, y2)` in continuous pixel
//! coordinates, with `area = (x2 - x1) * (y2 - y1)`. There is no `+1` pixel
//! correction anywhere in this crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting inverted or non-finite corners.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(b)
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }

    pub fn divided(&self, s: f64) -> BBox {
        BBox {
            x1: self.x1 / s,
            y1: self.y1 / s,
            x2: self.x2 / s,
            y2: self.y2 / s,
        }
    }

    /// True when the box lies within `[0, w] x [0, h]`.
    pub fn inside(&self, w: f64, h: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= w && self.y2 <= h
    }
}

/// Box plus confidence, tagged with the pyramid scale that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub scale_id: usize,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Detection {
            bbox,
            score,
            scale_id: 0,
        }
    }
}

/// Anchor layout: one set of `scales x aspect_ratios` boxes per feature cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub base_stride: f64,
    /// Anchor side lengths in pixels (the square-root of the anchor area).
    pub scales: Vec<f64>,
    /// Height / width ratios.
    pub aspect_ratios: Vec<f64>,
}

impl AnchorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_stride > 0.0) {
            return Err(Error::InvalidArgument("anchor stride must be positive".into()));
        }
        if self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return Err(Error::InvalidArgument(
                "anchor scales and ratios must be non-empty".into(),
            ));
        }
        if self.scales.iter().chain(&self.aspect_ratios).any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument(
                "anchor scales and ratios must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

/// Regression target in center / log-size parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Delta {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Delta {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

/// Intersection area over union area; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Tiles anchors over a `feature_w x feature_h` grid.
///
/// Ordering is row-major over cells (`y` outer, `x` inner), then scales, then
/// ratios.
pub fn generate_anchors(spec: &AnchorSpec, feature_w: usize, feature_h: usize) -> Result<Vec<BBox>> {
    spec.validate()?;
    if feature_w == 0 || feature_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "feature map must be at least 1x1, got {feature_w}x{feature_h}"
        )));
    }
    let shapes: Vec<(f64, f64)> = spec
        .scales
        .iter()
        .flat_map(|&s| {
            spec.aspect_ratios.iter().map(move |&r| {
                let root = r.sqrt();
                (s / root, s * root)
            })
        })
        .collect();
    let stride = spec.base_stride;
    let mut out = Vec::with_capacity(feature_w * feature_h * shapes.len());
    for j in 0..feature_h {
        let cy = (j as f64 + 0.5) * stride;
        for i in 0..feature_w {
            let cx = (i as f64 + 0.5) * stride;
            for &(w, h) in &shapes {
                out.push(BBox::from_center(cx, cy, w, h));
            }
        }
    }
    Ok(out)
}

fn check_positive_size(b: &BBox, what: &str) -> Result<()> {
    if !(b.width() > 0.0 && b.height() > 0.0) || !b.is_valid() {
        return Err(Error::DegenerateBox(format!(
            "{what} must have positive width and height, got {b:?}"
        )));
    }
    Ok(())
}

pub fn encode_delta(gt: &BBox, anchor: &BBox) -> Result<Delta> {
    check_positive_size(anchor, "anchor")?;
    check_positive_size(gt, "ground truth")?;
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(Delta {
        dx: (gx - ax) / aw,
        dy: (gy - ay) / ah,
        dw: (gt.width() / aw).ln(),
        dh: (gt.height() / ah).ln(),
    })
}

pub fn decode_delta(d: &Delta, anchor: &BBox) -> Result<BBox> {
    check_positive_size(anchor, "anchor")?;
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + d.dx * aw;
    let cy = ay + d.dy * ah;
    let w = aw * d.dw.exp();
    let h = ah * d.dh.exp();
    Ok(BBox::from_center(cx, cy, w, h))
}

/// Clamps both corners into `[0, w] x [0, h]`.
pub fn clip_box(b: &BBox, w: usize, h: usize) -> BBox {
    let (w, h) = (w as f64, h as f64);
    BBox {
        x1: b.x1.clamp(0.0, w),
        y1: b.y1.clamp(0.0, h),
        x2: b.x2.clamp(0.0, w),
        y2: b.y2.clamp(0.0, h),
    }
}

/// Indices of the detections kept by greedy NMS, in descending score order.
///
/// Equal scores are ordered by original index.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        let kept = &dets[i].bbox;
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(kept, &dets[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Greedy non-maximum suppression; output sorted by descending score.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}
