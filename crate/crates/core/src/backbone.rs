//! Convolutional feature extraction and ROI pooling.
//!
//! The backbone is `conv3x3 -> ReLU -> maxpool2 -> conv3x3 -> ReLU ->
//! maxpool2` (stride 4), trained from scratch together with the head.

use serde::{Deserialize, Serialize};

use crate::diffcore::kernels::{self, ConvGeom, RoiWindow};
use crate::diffcore::{ops, Op, OpRecord, Parameter, Real, Tensor};
use crate::error::{AodError, Result};
use crate::geometry::BoundingBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            conv1_channels: 16,
            conv2_channels: 32,
        }
    }
}

const KERNEL: usize = 3;
const PAD: usize = 1;
const POOL: usize = 2;

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        POOL * POOL
    }

    /// Smallest image side that still yields one feature cell.
    pub fn min_input(&self) -> usize {
        self.stride()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2_channels
    }

    pub fn feature_shape(&self, height: usize, width: usize) -> [usize; 3] {
        [self.conv2_channels, height / POOL / POOL, width / POOL / POOL]
    }

    fn geoms(&self, height: usize, width: usize) -> (ConvGeom, ConvGeom) {
        let g1 = ConvGeom {
            in_c: self.in_channels,
            in_h: height,
            in_w: width,
            out_c: self.conv1_channels,
            k: KERNEL,
            pad: PAD,
        };
        let g2 = ConvGeom {
            in_c: self.conv1_channels,
            in_h: height / POOL,
            in_w: width / POOL,
            out_c: self.conv2_channels,
            k: KERNEL,
            pad: PAD,
        };
        (g1, g2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<R> {
    pub conv1_w: Parameter<R>,
    pub conv1_b: Parameter<R>,
    pub conv2_w: Parameter<R>,
    pub conv2_b: Parameter<R>,
}

impl<R: Real> BackboneParams<R> {
    pub fn zeros(cfg: &BackboneConfig) -> Self {
        let k = KERNEL;
        BackboneParams {
            conv1_w: Parameter::zeros("conv1.w", &[cfg.conv1_channels, cfg.in_channels, k, k]),
            conv1_b: Parameter::zeros("conv1.b", &[cfg.conv1_channels]),
            conv2_w: Parameter::zeros("conv2.w", &[cfg.conv2_channels, cfg.conv1_channels, k, k]),
            conv2_b: Parameter::zeros("conv2.b", &[cfg.conv2_channels]),
        }
    }

    pub fn all(&self) -> [&Parameter<R>; 4] {
        [&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b]
    }

    pub fn all_mut(&mut self) -> [&mut Parameter<R>; 4] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
        ]
    }
}

/// Gradient buffers mirroring [`BackboneParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneGrads<R> {
    pub conv1_w: Vec<R>,
    pub conv1_b: Vec<R>,
    pub conv2_w: Vec<R>,
    pub conv2_b: Vec<R>,
}

impl<R: Real> BackboneGrads<R> {
    pub fn zeros_like(p: &BackboneParams<R>) -> Self {
        BackboneGrads {
            conv1_w: vec![R::zero(); p.conv1_w.len()],
            conv1_b: vec![R::zero(); p.conv1_b.len()],
            conv2_w: vec![R::zero(); p.conv2_w.len()],
            conv2_b: vec![R::zero(); p.conv2_b.len()],
        }
    }

    pub fn buffers(&self) -> [&Vec<R>; 4] {
        [&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b]
    }

    pub fn buffers_mut(&mut self) -> [&mut Vec<R>; 4] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
        ]
    }
}

/// Channels x height x width features plus the input-pixels-per-cell stride.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<R> {
    pub tensor: Tensor<R>,
    pub stride: usize,
}

impl<R: Real> FeatureMap<R> {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BackboneTrace<R> {
    g1: ConvGeom,
    g2: ConvGeom,
    col1: Vec<R>,
    pre1: Vec<R>,
    pool1_argmax: Vec<usize>,
    col2: Vec<R>,
    pre2: Vec<R>,
    pool2_argmax: Vec<usize>,
}

fn relu_in_place<R: Real>(v: &[R]) -> Vec<R> {
    v.iter().map(|&x| x.max(R::zero())).collect()
}

/// Runs the backbone on a `C x H x W` image.
pub fn extract_features<R: Real>(
    image: &Tensor<R>,
    cfg: &BackboneConfig,
    params: &BackboneParams<R>,
) -> Result<(FeatureMap<R>, BackboneTrace<R>)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != cfg.in_channels {
        return Err(AodError::Shape(format!(
            "image shape {:?}, expected {} channels",
            s, cfg.in_channels
        )));
    }
    let (h, w) = (s[1], s[2]);
    let min = cfg.min_input();
    if h < min || w < min {
        return Err(AodError::UndersizedImage {
            height: h,
            width: w,
            min,
        });
    }
    let (g1, g2) = cfg.geoms(h, w);

    let mut col1 = vec![R::zero(); g1.patch() * g1.positions()];
    kernels::im2col(&g1, image.data(), &mut col1);
    let mut pre1 = vec![R::zero(); g1.out_c * g1.positions()];
    kernels::conv_forward(&g1, params.conv1_w.value.data(), params.conv1_b.value.data(), &col1, &mut pre1);
    let act1 = relu_in_place(&pre1);
    let n1 = g2.in_c * g2.in_h * g2.in_w;
    let mut pool1 = vec![R::zero(); n1];
    let mut pool1_argmax = vec![0; n1];
    kernels::maxpool_forward(&act1, g1.out_c, g1.out_h(), g1.out_w(), POOL, &mut pool1, &mut pool1_argmax);

    let mut col2 = vec![R::zero(); g2.patch() * g2.positions()];
    kernels::im2col(&g2, &pool1, &mut col2);
    let mut pre2 = vec![R::zero(); g2.out_c * g2.positions()];
    kernels::conv_forward(&g2, params.conv2_w.value.data(), params.conv2_b.value.data(), &col2, &mut pre2);
    let act2 = relu_in_place(&pre2);
    let [c, fh, fw] = cfg.feature_shape(h, w);
    let mut out = vec![R::zero(); c * fh * fw];
    let mut pool2_argmax = vec![0; out.len()];
    kernels::maxpool_forward(&act2, g2.out_c, g2.out_h(), g2.out_w(), POOL, &mut out, &mut pool2_argmax);

    let tensor = Tensor::new(vec![c, fh, fw], out)?;
    if !tensor.is_finite() {
        return Err(AodError::NonFinite("backbone features".into()));
    }
    Ok((
        FeatureMap {
            tensor,
            stride: cfg.stride(),
        },
        BackboneTrace {
            g1,
            g2,
            col1,
            pre1,
            pool1_argmax,
            col2,
            pre2,
            pool2_argmax,
        },
    ))
}

/// Accumulates parameter gradients given the gradient on the feature map.
pub fn backward_features<R: Real>(
    trace: &BackboneTrace<R>,
    params: &BackboneParams<R>,
    d_features: &[R],
    grads: &mut BackboneGrads<R>,
) {
    let (g1, g2) = (&trace.g1, &trace.g2);
    let mut d_act2 = vec![R::zero(); trace.pre2.len()];
    kernels::scatter_argmax(&trace.pool2_argmax, d_features, &mut d_act2);
    for (d, &p) in d_act2.iter_mut().zip(&trace.pre2) {
        if p <= R::zero() {
            *d = R::zero();
        }
    }
    let mut dcol2 = vec![R::zero(); trace.col2.len()];
    kernels::conv_backward(
        g2,
        params.conv2_w.value.data(),
        &trace.col2,
        &d_act2,
        &mut grads.conv2_w,
        &mut grads.conv2_b,
        Some(&mut dcol2),
    );
    let mut d_pool1 = vec![R::zero(); g2.in_c * g2.in_h * g2.in_w];
    kernels::col2im_accum(g2, &dcol2, &mut d_pool1);

    let mut d_act1 = vec![R::zero(); trace.pre1.len()];
    kernels::scatter_argmax(&trace.pool1_argmax, &d_pool1, &mut d_act1);
    for (d, &p) in d_act1.iter_mut().zip(&trace.pre1) {
        if p <= R::zero() {
            *d = R::zero();
        }
    }
    kernels::conv_backward(
        g1,
        params.conv1_w.value.data(),
        &trace.col1,
        &d_act1,
        &mut grads.conv1_w,
        &mut grads.conv1_b,
        None,
    );
}

/// Maps an image-pixel box onto feature cells: `floor(x1 / stride)`,
/// `ceil(x2 / stride)`, clamped to the map, at least one cell per axis.
pub fn roi_window(
    b: &BoundingBox,
    stride: usize,
    fm_h: usize,
    fm_w: usize,
    grid_h: usize,
    grid_w: usize,
) -> Result<RoiWindow> {
    b.validate()?;
    if grid_h == 0 || grid_w == 0 {
        return Err(AodError::Shape("roi grid must be at least 1x1".into()));
    }
    let s = stride as f64;
    let [x1, y1, x2, y2] = b.corners();
    let axis = |lo: f64, hi: f64, extent: usize| -> Result<(usize, usize)> {
        let start = (lo / s).floor().max(0.0);
        let end = (hi / s).ceil().min(extent as f64);
        if start >= extent as f64 || end <= 0.0 {
            return Err(AodError::DegenerateRoi);
        }
        let start = start as usize;
        let end = (end as usize).max(start + 1);
        Ok((start, end))
    };
    let (x0, x1) = axis(x1, x2, fm_w)?;
    let (y0, y1) = axis(y1, y2, fm_h)?;
    Ok(RoiWindow {
        y0,
        y1,
        x0,
        x1,
        grid_h,
        grid_w,
    })
}

/// Max-pools the features under `b` into a `grid_h x grid_w x C` tensor.
pub fn roi_pool<R: Real>(
    fm: &FeatureMap<R>,
    b: &BoundingBox,
    grid_h: usize,
    grid_w: usize,
) -> Result<(Tensor<R>, OpRecord<R>)> {
    let window = roi_window(b, fm.stride, fm.height(), fm.width(), grid_h, grid_w)?;
    ops::forward(&Op::RoiPool { window }, &[&fm.tensor])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::backward;

    fn fm_from(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64, stride: usize) -> FeatureMap<f64> {
        FeatureMap {
            tensor: Tensor::new(vec![c, h, w], (0..c * h * w).map(f).collect()).unwrap(),
            stride,
        }
    }

    #[test]
    fn quadrant_maxima() {
        let fm = fm_from(1, 4, 4, |i| (i + 1) as f64, 1);
        let roi = BoundingBox::from_corners(0.0, 0.0, 4.0, 4.0).unwrap();
        let (out, _) = roi_pool(&fm, &roi, 2, 2).unwrap();
        assert_eq!(out.data(), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let fm = fm_from(3, 12, 12, |_| 2.5, 4);
        let roi = BoundingBox::new(20.0, 17.0, 13.0, 9.0).unwrap();
        let (out, _) = roi_pool(&fm, &roi, 4, 4).unwrap();
        assert_eq!(out.shape(), &[4, 4, 3]);
        assert!(out.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn single_cell_roi_repeats_that_cell() {
        let fm = fm_from(2, 12, 12, |i| i as f64, 4);
        let roi = BoundingBox::from_corners(9.0, 13.0, 11.0, 15.0).unwrap();
        let (out, _) = roi_pool(&fm, &roi, 4, 4).unwrap();
        for cell in out.data().chunks(2) {
            assert_eq!(cell, &[(3 * 12 + 2) as f64, (144 + 3 * 12 + 2) as f64]);
        }
    }

    #[test]
    fn roi_outside_map_is_degenerate() {
        let fm = fm_from(1, 12, 12, |_| 0.0, 4);
        let left = BoundingBox::from_corners(-9.0, 5.0, -1.0, 9.0).unwrap();
        assert!(matches!(roi_pool(&fm, &left, 4, 4), Err(AodError::DegenerateRoi)));
        let right = BoundingBox::from_corners(48.0, 5.0, 50.0, 9.0).unwrap();
        assert!(matches!(roi_pool(&fm, &right, 4, 4), Err(AodError::DegenerateRoi)));
    }

    #[test]
    fn roi_backward_routes_to_argmax() {
        let fm = fm_from(1, 4, 4, |i| (i + 1) as f64, 1);
        let roi = BoundingBox::from_corners(0.0, 0.0, 4.0, 4.0).unwrap();
        let (_, rec) = roi_pool(&fm, &roi, 2, 2).unwrap();
        let g = backward(&rec, &Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let mut expected = vec![0.0; 16];
        expected[5] = 1.0;
        expected[7] = 2.0;
        expected[13] = 3.0;
        expected[15] = 4.0;
        assert_eq!(g[0].data(), expected.as_slice());
    }

    fn seeded_params(cfg: &BackboneConfig, seed: u64) -> BackboneParams<f64> {
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::stream_rng(seed, &[]);
        let n = Normal::new(0.0, 0.3).unwrap();
        let mut p = BackboneParams::zeros(cfg);
        for q in p.all_mut() {
            q.value.data_mut().iter_mut().for_each(|v| *v = n.sample(&mut rng));
        }
        p
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_features() {
        let cfg = BackboneConfig::default();
        let mut p = seeded_params(&cfg, 3);
        p.conv1_b.value.fill(0.0);
        p.conv2_b.value.fill(0.0);
        let img = Tensor::zeros(&[1, 48, 48]);
        let (fm, _) = extract_features(&img, &cfg, &p).unwrap();
        assert_eq!(fm.tensor.shape(), &[32, 12, 12]);
        assert_eq!(fm.stride, 4);
        assert!(fm.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn features_are_deterministic_and_reject_small_images() {
        let cfg = BackboneConfig::default();
        let p = seeded_params(&cfg, 5);
        let img = Tensor::new(vec![1, 48, 48], (0..2304).map(|i| ((i * 37) % 101) as f64 / 101.0).collect()).unwrap();
        let a = extract_features(&img, &cfg, &p).unwrap().0;
        let b = extract_features(&img, &cfg, &p).unwrap().0;
        assert_eq!(a, b);
        let tiny = Tensor::zeros(&[1, 3, 8]);
        assert!(matches!(
            extract_features(&tiny, &cfg, &p),
            Err(AodError::UndersizedImage { .. })
        ));
    }
}
