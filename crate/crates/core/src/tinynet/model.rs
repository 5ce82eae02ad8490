//! The two-head detector: a shared stride-4 trunk, a dense proposal head and
//! a RoI-pooled refinement head whose pre-logit activation is the
//! center-loss feature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::matrix::Matrix;

use super::layers::{self, conv2d, linear, maxpool2, relu_inplace, roi_pool};
use super::tensor::Tensor;

/// Total downsampling of the trunk (two 2x2 pools).
pub const TRUNK_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub rpn_channels: usize,
    pub anchors_per_cell: usize,
    pub roi_size: usize,
    pub hidden: usize,
    pub feature_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            conv1_channels: 8,
            conv2_channels: 16,
            rpn_channels: 16,
            anchors_per_cell: 6,
            roi_size: 4,
            hidden: 64,
            feature_dim: 32,
        }
    }
}

/// Parameter slots, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Conv1W,
    Conv1B,
    Conv2W,
    Conv2B,
    RpnConvW,
    RpnConvB,
    RpnClsW,
    RpnClsB,
    RpnRegW,
    RpnRegB,
    Fc1W,
    Fc1B,
    FeatW,
    FeatB,
    ClsW,
    ClsB,
    RegW,
    RegB,
}

impl Param {
    pub const ALL: [Param; 18] = [
        Param::Conv1W,
        Param::Conv1B,
        Param::Conv2W,
        Param::Conv2B,
        Param::RpnConvW,
        Param::RpnConvB,
        Param::RpnClsW,
        Param::RpnClsB,
        Param::RpnRegW,
        Param::RpnRegB,
        Param::Fc1W,
        Param::Fc1B,
        Param::FeatW,
        Param::FeatB,
        Param::ClsW,
        Param::ClsB,
        Param::RegW,
        Param::RegB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::Conv1W => "conv1.weight",
            Param::Conv1B => "conv1.bias",
            Param::Conv2W => "conv2.weight",
            Param::Conv2B => "conv2.bias",
            Param::RpnConvW => "rpn.conv.weight",
            Param::RpnConvB => "rpn.conv.bias",
            Param::RpnClsW => "rpn.cls.weight",
            Param::RpnClsB => "rpn.cls.bias",
            Param::RpnRegW => "rpn.reg.weight",
            Param::RpnRegB => "rpn.reg.bias",
            Param::Fc1W => "head.fc1.weight",
            Param::Fc1B => "head.fc1.bias",
            Param::FeatW => "head.feature.weight",
            Param::FeatB => "head.feature.bias",
            Param::ClsW => "head.cls.weight",
            Param::ClsB => "head.cls.bias",
            Param::RegW => "head.reg.weight",
            Param::RegB => "head.reg.bias",
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Parameter gradients, aligned with [`Param::ALL`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(model: &DetectorModel) -> Self {
        Gradients(model.params.iter().map(|t| vec![0.0; t.len()]).collect())
    }

    pub fn get(&self, p: Param) -> &[f64] {
        &self.0[p.index()]
    }

    pub fn add(&mut self, p: Param, g: &[f64]) {
        for (a, b) in self.0[p.index()].iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn add_all(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: NetConfig,
    params: Vec<Tensor>,
}

/// Dense outputs of the proposal head plus every activation the backward
/// pass needs.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[2A, H/4, W/4]`; channel `2a + k` holds class `k` of anchor `a`.
    pub proposal_logits: Tensor,
    /// `[4A, H/4, W/4]`; channel `4a + j` holds coordinate `j` of anchor `a`.
    pub proposal_deltas: Tensor,
    /// Shared trunk output, `[C2, H/4, W/4]`.
    pub feature_map: Tensor,
    pub(crate) cache: TrunkCache,
}

impl ForwardOutput {
    /// `(width, height)` of the input image.
    pub fn image_size(&self) -> (usize, usize) {
        let s = self.cache.input.shape();
        (s[2], s[1])
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TrunkCache {
    input: Tensor,
    relu1: Tensor,
    pool1: Tensor,
    pool1_arg: Vec<usize>,
    relu2: Tensor,
    pool2_arg: Vec<usize>,
    rpn_hidden: Tensor,
}

/// Refinement-head activations for a batch of RoIs.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub logits: Matrix,
    pub deltas: Matrix,
    /// Center-loss features (post-ReLU pre-logit activations).
    pub features: Matrix,
    pooled: Matrix,
    pool_arg: Vec<Vec<usize>>,
    hidden: Matrix,
}

impl HeadOutput {
    pub fn len(&self) -> usize {
        self.logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl DetectorModel {
    /// Uniform fan-in initialization; biases start at zero.
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        let c = &config;
        if [c.conv1_channels, c.conv2_channels, c.rpn_channels, c.anchors_per_cell, c.roi_size, c.hidden, c.feature_dim]
            .contains(&0)
        {
            return Err(Error::InvalidArgument("network dimensions must be positive".into()));
        }
        let shapes = param_shapes(c);
        let params = Param::ALL
            .iter()
            .zip(shapes)
            .map(|(p, shape)| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    // ReLU layers get the He bound, output layers a narrower one.
                    let gain = match p {
                        Param::RpnClsW | Param::RpnRegW | Param::ClsW | Param::RegW => 1.0,
                        _ => 6.0,
                    };
                    let bound = (gain / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                Tensor::from_vec(&shape, data).map(Tensor::with_grad)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DetectorModel { config, params })
    }

    /// Rebuilds a model from named tensors (checkpoint loading).
    pub fn from_params(config: NetConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let shapes = param_shapes(&config);
        if tensors.len() != Param::ALL.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                Param::ALL.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(tensors.len());
        for ((name, t), p) in tensors.into_iter().zip(Param::ALL) {
            let expected = &shapes[p.index()];
            if name != p.name() || t.shape() != expected.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    p.name(),
                    expected
                )));
            }
            params.push(t.with_grad());
        }
        Ok(DetectorModel { config, params })
    }

    pub fn param(&self, p: Param) -> &Tensor {
        &self.params[p.index()]
    }

    pub fn param_mut(&mut self, p: Param) -> &mut Tensor {
        &mut self.params[p.index()]
    }

    pub fn params(&self) -> impl Iterator<Item = (Param, &Tensor)> {
        Param::ALL.iter().copied().zip(self.params.iter())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::all_finite)
    }

    /// Trunk and proposal head. `image` is `[1, H, W]` with values in `[0, 1]`.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        let (c, h, w) = image.chw()?;
        if c != 1 || h == 0 || w == 0 || h % TRUNK_STRIDE != 0 || w % TRUNK_STRIDE != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image must be [1, H, W] with H, W positive multiples of {TRUNK_STRIDE}, got {:?}",
                image.shape()
            )));
        }
        let centered = image.data().iter().map(|v| v - 0.5).collect();
        let input = Tensor::from_vec(&[1, h, w], centered)?;

        let mut relu1 = conv2d(&input, self.param(Param::Conv1W), self.param(Param::Conv1B))?;
        relu_inplace(relu1.data_mut());
        let (pool1, pool1_arg) = maxpool2(&relu1)?;
        let mut relu2 = conv2d(&pool1, self.param(Param::Conv2W), self.param(Param::Conv2B))?;
        relu_inplace(relu2.data_mut());
        let (feature_map, pool2_arg) = maxpool2(&relu2)?;

        let mut rpn_hidden = conv2d(&feature_map, self.param(Param::RpnConvW), self.param(Param::RpnConvB))?;
        relu_inplace(rpn_hidden.data_mut());
        let proposal_logits = conv2d(&rpn_hidden, self.param(Param::RpnClsW), self.param(Param::RpnClsB))?;
        let proposal_deltas = conv2d(&rpn_hidden, self.param(Param::RpnRegW), self.param(Param::RpnRegB))?;

        Ok(ForwardOutput {
            proposal_logits,
            proposal_deltas,
            feature_map,
            cache: TrunkCache {
                input,
                relu1,
                pool1,
                pool1_arg,
                relu2,
                pool2_arg,
                rpn_hidden,
            },
        })
    }

    /// Refinement head over RoIs given in image coordinates.
    pub fn head_forward(&self, feature_map: &Tensor, rois: &[BBox]) -> Result<HeadOutput> {
        let c = &self.config;
        let pooled_len = c.conv2_channels * c.roi_size * c.roi_size;
        let inv_stride = 1.0 / TRUNK_STRIDE as f64;
        let mut pooled = Matrix::zeros(rois.len(), pooled_len);
        let mut pool_arg = Vec::with_capacity(rois.len());
        for (i, roi) in rois.iter().enumerate() {
            let (t, arg) = roi_pool(feature_map, &roi.scaled(inv_stride), c.roi_size)?;
            pooled.row_mut(i).copy_from_slice(t.data());
            pool_arg.push(arg);
        }
        let mut hidden = linear(&pooled, self.param(Param::Fc1W), self.param(Param::Fc1B))?;
        relu_inplace(hidden.as_mut_slice());
        let mut features = linear(&hidden, self.param(Param::FeatW), self.param(Param::FeatB))?;
        relu_inplace(features.as_mut_slice());
        let logits = linear(&features, self.param(Param::ClsW), self.param(Param::ClsB))?;
        let deltas = linear(&features, self.param(Param::RegW), self.param(Param::RegB))?;
        Ok(HeadOutput {
            logits,
            deltas,
            features,
            pooled,
            pool_arg,
            hidden,
        })
    }

    /// Backpropagates through the refinement head. `grad_features` is the
    /// direct feature gradient (the center term); the classifier path is added
    /// here. Returns the gradient with respect to the feature map.
    pub fn head_backward(
        &self,
        out: &HeadOutput,
        feature_map_len: usize,
        grad_logits: &Matrix,
        grad_deltas: &Matrix,
        grad_features: &Matrix,
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        let cls = layers::linear_backward(&out.features, self.param(Param::ClsW), grad_logits)?;
        grads.add(Param::ClsW, &cls.weight);
        grads.add(Param::ClsB, &cls.bias);
        let reg = layers::linear_backward(&out.features, self.param(Param::RegW), grad_deltas)?;
        grads.add(Param::RegW, &reg.weight);
        grads.add(Param::RegB, &reg.bias);

        let mut g_feat = cls.input;
        for ((a, b), c) in g_feat
            .as_mut_slice()
            .iter_mut()
            .zip(reg.input.as_slice())
            .zip(grad_features.as_slice())
        {
            *a += b + c;
        }
        layers::relu_backward(out.features.as_slice(), g_feat.as_mut_slice());
        let feat = layers::linear_backward(&out.hidden, self.param(Param::FeatW), &g_feat)?;
        grads.add(Param::FeatW, &feat.weight);
        grads.add(Param::FeatB, &feat.bias);

        let mut g_hidden = feat.input;
        layers::relu_backward(out.hidden.as_slice(), g_hidden.as_mut_slice());
        let fc1 = layers::linear_backward(&out.pooled, self.param(Param::Fc1W), &g_hidden)?;
        grads.add(Param::Fc1W, &fc1.weight);
        grads.add(Param::Fc1B, &fc1.bias);

        let mut g_map = vec![0.0; feature_map_len];
        for (r, arg) in out.pool_arg.iter().enumerate() {
            for (&i, &g) in arg.iter().zip(fc1.input.row(r)) {
                g_map[i] += g;
            }
        }
        Ok(g_map)
    }

    /// Backpropagates proposal-head gradients plus an extra feature-map
    /// gradient (from the refinement head) through the trunk.
    pub fn trunk_backward(
        &self,
        fwd: &ForwardOutput,
        grad_logits: &[f64],
        grad_deltas: &[f64],
        grad_feature_map: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        let cache = &fwd.cache;
        let cls = layers::conv2d_backward(&cache.rpn_hidden, self.param(Param::RpnClsW), grad_logits, true)?;
        grads.add(Param::RpnClsW, &cls.weight);
        grads.add(Param::RpnClsB, &cls.bias);
        let reg = layers::conv2d_backward(&cache.rpn_hidden, self.param(Param::RpnRegW), grad_deltas, true)?;
        grads.add(Param::RpnRegW, &reg.weight);
        grads.add(Param::RpnRegB, &reg.bias);

        let mut g_hidden = cls.input.expect("input gradient requested");
        for (a, b) in g_hidden.iter_mut().zip(reg.input.expect("input gradient requested")) {
            *a += b;
        }
        layers::relu_backward(cache.rpn_hidden.data(), &mut g_hidden);
        let rpn = layers::conv2d_backward(&fwd.feature_map, self.param(Param::RpnConvW), &g_hidden, true)?;
        grads.add(Param::RpnConvW, &rpn.weight);
        grads.add(Param::RpnConvB, &rpn.bias);

        let mut g_map = rpn.input.expect("input gradient requested");
        for (a, b) in g_map.iter_mut().zip(grad_feature_map) {
            *a += b;
        }
        let mut g_relu2 = layers::scatter_backward(cache.relu2.len(), &cache.pool2_arg, &g_map);
        layers::relu_backward(cache.relu2.data(), &mut g_relu2);
        let c2 = layers::conv2d_backward(&cache.pool1, self.param(Param::Conv2W), &g_relu2, true)?;
        grads.add(Param::Conv2W, &c2.weight);
        grads.add(Param::Conv2B, &c2.bias);

        let mut g_relu1 =
            layers::scatter_backward(cache.relu1.len(), &cache.pool1_arg, &c2.input.expect("input gradient requested"));
        layers::relu_backward(cache.relu1.data(), &mut g_relu1);
        let c1 = layers::conv2d_backward(&cache.input, self.param(Param::Conv1W), &g_relu1, false)?;
        grads.add(Param::Conv1W, &c1.weight);
        grads.add(Param::Conv1B, &c1.bias);
        Ok(())
    }
}

fn param_shapes(c: &NetConfig) -> Vec<Vec<usize>> {
    let pooled = c.conv2_channels * c.roi_size * c.roi_size;
    let a = c.anchors_per_cell;
    vec![
        vec![c.conv1_channels, 1, 3, 3],
        vec![c.conv1_channels],
        vec![c.conv2_channels, c.conv1_channels, 3, 3],
        vec![c.conv2_channels],
        vec![c.rpn_channels, c.conv2_channels, 3, 3],
        vec![c.rpn_channels],
        vec![2 * a, c.rpn_channels, 1, 1],
        vec![2 * a],
        vec![4 * a, c.rpn_channels, 1, 1],
        vec![4 * a],
        vec![c.hidden, pooled],
        vec![c.hidden],
        vec![c.feature_dim, c.hidden],
        vec![c.feature_dim],
        vec![2, c.feature_dim],
        vec![2],
        vec![4, c.feature_dim],
        vec![4],
    ]
}

/// Reads anchor `a`'s rows out of the dense head maps. Anchor index is
/// `(y * fw + x) * A + a`, matching `generate_anchors`.
pub fn gather_anchor_rows(dense: &Tensor, per_anchor: usize, anchors_per_cell: usize) -> Result<Matrix> {
    let (ch, h, w) = dense.chw()?;
    if ch != per_anchor * anchors_per_cell {
        return Err(Error::ShapeMismatch(format!(
            "{ch} channels for {anchors_per_cell} anchors x {per_anchor}"
        )));
    }
    let data = dense.data();
    let n = h * w * anchors_per_cell;
    let mut out = Matrix::zeros(n, per_anchor);
    for y in 0..h {
        for x in 0..w {
            for a in 0..anchors_per_cell {
                let row = out.row_mut((y * w + x) * anchors_per_cell + a);
                for (k, v) in row.iter_mut().enumerate() {
                    *v = data[((a * per_anchor + k) * h + y) * w + x];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`gather_anchor_rows`] for gradients.
pub fn scatter_anchor_rows(rows: &Matrix, shape: &[usize], anchors_per_cell: usize) -> Vec<f64> {
    let (h, w) = (shape[1], shape[2]);
    let per_anchor = rows.cols();
    let mut out = vec![0.0; shape.iter().product()];
    for y in 0..h {
        for x in 0..w {
            for a in 0..anchors_per_cell {
                let row = rows.row((y * w + x) * anchors_per_cell + a);
                for (k, &v) in row.iter().enumerate() {
                    out[((a * per_anchor + k) * h + y) * w + x] = v;
                }
            }
        }
    }
    out
}
