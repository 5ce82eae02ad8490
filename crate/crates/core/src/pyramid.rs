//! Multi-scale training and testing: resizing, scale sampling and merging
//! per-scale detections back into the original frame.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{nms, Detection};
use crate::tinynet::{Tensor, TRUNK_STRIDE};

/// Resize factors, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSet {
    scales: Vec<f64>,
}

impl ScaleSet {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidArgument("scale set is empty".into()));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("scales must be positive".into()));
        }
        if scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "scales must be strictly ascending".into(),
            ));
        }
        Ok(ScaleSet { scales })
    }

    pub fn single(scale: f64) -> Result<Self> {
        Self::new(vec![scale])
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn get(&self, id: usize) -> Option<f64> {
        self.scales.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

/// Output size for one axis: `round(n * scale)` snapped down to the trunk
/// stride.
pub fn scaled_dim(n: usize, scale: f64) -> usize {
    let r = (n as f64 * scale).round() as usize;
    r - r % TRUNK_STRIDE
}

/// Bilinear resize of a `[1, H, W]` image.
///
/// Sampling uses pixel centers: output pixel `d` reads source position
/// `(d + 0.5) / scale - 0.5`, clamped to the image. The mapping uses the
/// nominal `scale` on both axes, so snapping only trims the far edges and a
/// box maps back to the original frame by dividing by `scale`.
pub fn resize_image(image: &Tensor, scale: f64) -> Result<Tensor> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    let (c, h, w) = image.chw()?;
    let (oh, ow) = (scaled_dim(h, scale), scaled_dim(w, scale));
    if oh < 8 || ow < 8 {
        return Err(Error::InvalidArgument(format!(
            "resized image {ow}x{oh} is smaller than 8x8"
        )));
    }
    let src = image.data();
    let sample_axis = |d: usize, n: usize| -> (usize, usize, f64) {
        let pos = ((d as f64 + 0.5) / scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, pos - i0 as f64)
    };
    let cols: Vec<_> = (0..ow).map(|x| sample_axis(x, w)).collect();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = sample_axis(y, h);
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Uniform draw over the scale set.
pub fn pick_training_scale<R: Rng + ?Sized>(rng: &mut R, scale_set: &ScaleSet) -> f64 {
    scale_set.scales[rng.random_range(0..scale_set.len())]
}

/// Maps each detection back to the original frame by dividing by the scale
/// its `scale_id` names, then applies NMS over the union.
pub fn merge_multiscale(scale_set: &ScaleSet, dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    let mut unscaled = Vec::with_capacity(dets.len());
    for d in dets {
        let s = scale_set.get(d.scale_id).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "detection has scale id {} but only {} scales exist",
                d.scale_id,
                scale_set.len()
            ))
        })?;
        unscaled.push(Detection {
            bbox: d.bbox.divided(s),
            ..*d
        });
    }
    Ok(nms(&unscaled, iou_threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(n: usize) -> Tensor {
        let data = (0..n * n).map(|i| (i % n) as f64 / (n - 1) as f64).collect();
        Tensor::from_vec(&[1, n, n], data).unwrap()
    }

    #[test]
    fn identity_scale() {
        let img = ramp(64);
        let out = resize_image(&img, 1.0).unwrap();
        assert_eq!(out, img);
        let odd = Tensor::zeros(&[1, 30, 30]);
        assert_eq!(resize_image(&odd, 1.0).unwrap().shape(), &[1, 28, 28]);
    }

    #[test]
    fn constant_stays_constant() {
        let img = Tensor::from_vec(&[1, 40, 48], vec![0.3; 40 * 48]).unwrap();
        for s in [0.5, 0.77, 1.0, 1.6, 2.0] {
            let out = resize_image(&img, s).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        }
    }

    #[test]
    fn down_up_round_trip_on_ramp() {
        let img = ramp(64);
        let back = resize_image(&resize_image(&img, 0.5).unwrap(), 2.0).unwrap();
        assert_eq!(back.shape(), img.shape());
        let err = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.02, "max error {err}");
    }

    #[test]
    fn too_small_rejected() {
        assert!(resize_image(&ramp(16), 0.25).is_err());
        assert!(resize_image(&ramp(16), 0.0).is_err());
    }

    #[test]
    fn scale_set_validation() {
        assert!(ScaleSet::new(vec![]).is_err());
        assert!(ScaleSet::new(vec![1.0, 0.5]).is_err());
        assert!(ScaleSet::new(vec![-1.0]).is_err());
    }

    #[test]
    fn training_scale_draws() {
        let single = ScaleSet::single(1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| pick_training_scale(&mut rng, &single) == 1.5));

        let set = ScaleSet::new(vec![0.5, 1.0, 2.0]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| pick_training_scale(&mut rng, &set)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn merge_unscales_and_suppresses() {
        let set = ScaleSet::new(vec![0.5, 1.0, 2.0]).unwrap();
        let d = |x1, y1, x2, y2, score, scale_id| Detection {
            bbox: BBox::new(x1, y1, x2, y2).unwrap(),
            score,
            scale_id,
        };
        let out = merge_multiscale(&set, &[d(10.0, 10.0, 20.0, 20.0, 0.9, 2)], 0.3).unwrap();
        assert_eq!(out[0].bbox, BBox::new(5.0, 5.0, 10.0, 10.0).unwrap());

        // the same face seen at 0.5 and at 2.0
        let dets = [d(5.0, 5.0, 10.0, 10.0, 0.8, 0), d(20.0, 20.0, 40.0, 40.0, 0.7, 2)];
        let out = merge_multiscale(&set, &dets, 0.3).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].scale_id, 0);

        assert!(merge_multiscale(&set, &[d(0.0, 0.0, 1.0, 1.0, 0.5, 3)], 0.3).is_err());
    }
}
