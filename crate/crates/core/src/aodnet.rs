//! The recurrent glimpse network.
//!
//! Per step `t = 1..T`:
//!
//! ```text
//! f_t   = roi_pool(fm, clip(G_t))
//! h6_t  = dropout(relu(W6 f_t + R6 h6_{t-1} + b6))
//! h7_t  = dropout(relu(W7 h6_t + R7 h7_{t-1} + b7))
//! hg_t  = relu(We d_t + Re hg_{t-1} + be)          d_1 = 0, d_t = a_{t-1}
//! x_t   = [h7_t, hg_t]
//! mu_t  = Wglimpse[t] x_t                           (t < T, no bias)
//! a_t   = mu_t + noise_t,  G_{t+1} = decode(a_t, proposal)
//! ```
//!
//! The fused feature is the element-wise max of `x_1..x_T` (or `x_T`), fed to
//! the classifier (`K + 1` logits) and the class-specific box regressor.
//!
//! Actions are treated as sampled constants: no gradient flows from the
//! supervised losses into the glimpse layers, and the policy gradient
//! enters only through `mu_t`. The classifier and regressor only ever see
//! supervised gradients.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{roi_window, BackboneConfig, BackboneGrads, BackboneParams, FeatureMap};
use crate::diffcore::kernels::{self, RoiWindow};
use crate::diffcore::ops::{dropout_mask, softmax};
use crate::diffcore::{Parameter, Real, Tensor};
use crate::error::{AodError, Result};
use crate::geometry::{clip_box, decode_glimpse, encode_glimpse, BoundingBox, GlimpseDelta};
use crate::rng::{stream_rng, tags};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AodConfig {
    /// Number of glimpse steps.
    #[serde(rename = "T")]
    pub steps: usize,
    /// Foreground class count.
    #[serde(rename = "K")]
    pub num_classes: usize,
    pub fc6_dim: usize,
    pub fc7_dim: usize,
    pub glimpse_embed_dim: usize,
    pub roi_grid: [usize; 2],
    /// Recurrence at both fc6 and fc7 (otherwise fc7 only).
    pub stacked_rnn: bool,
    /// Fuse all steps with an element-wise max (otherwise use the last step).
    pub eltwise_max: bool,
    /// 4 (shift + scale) or 2 (shift only).
    pub glimpse_dof: usize,
    pub dropout: f64,
    pub backbone: BackboneConfig,
}

impl Default for AodConfig {
    fn default() -> Self {
        AodConfig {
            steps: 3,
            num_classes: 5,
            fc6_dim: 64,
            fc7_dim: 64,
            glimpse_embed_dim: 32,
            roi_grid: [4, 4],
            stacked_rnn: true,
            eltwise_max: true,
            glimpse_dof: 4,
            dropout: 0.5,
            backbone: BackboneConfig::default(),
        }
    }
}

impl AodConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("T", self.steps),
            ("K", self.num_classes),
            ("fc6_dim", self.fc6_dim),
            ("fc7_dim", self.fc7_dim),
            ("glimpse_embed_dim", self.glimpse_embed_dim),
            ("roi_grid", self.roi_grid[0].min(self.roi_grid[1])),
            ("backbone.in_channels", self.backbone.in_channels),
            ("backbone.conv1_channels", self.backbone.conv1_channels),
            ("backbone.conv2_channels", self.backbone.conv2_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(AodError::config(format!("AODConfig.{name}"), "must be >= 1"));
            }
        }
        if self.glimpse_dof != 4 && self.glimpse_dof != 2 {
            return Err(AodError::config("AODConfig.glimpse_dof", "must be 4 or 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AodError::config("AODConfig.dropout", "must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn roi_features(&self) -> usize {
        self.roi_grid[0] * self.roi_grid[1] * self.backbone.out_channels()
    }

    /// Width of the per-step state `x_t`.
    pub fn state_dim(&self) -> usize {
        self.fc7_dim + self.glimpse_embed_dim
    }

    pub fn glimpse_layers(&self) -> usize {
        self.steps - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AodParams<R> {
    pub backbone: BackboneParams<R>,
    pub fc6_w: Parameter<R>,
    /// Absent when `stacked_rnn` is off.
    pub fc6_r: Option<Parameter<R>>,
    pub fc6_b: Parameter<R>,
    pub fc7_w: Parameter<R>,
    pub fc7_r: Parameter<R>,
    pub fc7_b: Parameter<R>,
    pub embed_w: Parameter<R>,
    pub embed_r: Parameter<R>,
    pub embed_b: Parameter<R>,
    /// One `4 x state_dim` layer per transition, no bias.
    pub glimpse: Vec<Parameter<R>>,
    pub cls_w: Parameter<R>,
    pub cls_b: Parameter<R>,
    pub reg_w: Parameter<R>,
    pub reg_b: Parameter<R>,
}

/// Named parameter groups, used for gradient masking checks and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Fc6,
    Fc7,
    GlimpseEmbed,
    Glimpse,
    Classifier,
    Regressor,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        match name.split('.').next().unwrap_or("") {
            "conv1" | "conv2" => ParamGroup::Backbone,
            "fc6" => ParamGroup::Fc6,
            "fc7" => ParamGroup::Fc7,
            "embed" => ParamGroup::GlimpseEmbed,
            "cls" => ParamGroup::Classifier,
            "reg" => ParamGroup::Regressor,
            _ => ParamGroup::Glimpse,
        }
    }
}

impl<R: Real> AodParams<R> {
    pub fn zeros(cfg: &AodConfig) -> Self {
        let (d_in, d6, d7, de) = (cfg.roi_features(), cfg.fc6_dim, cfg.fc7_dim, cfg.glimpse_embed_dim);
        let ds = cfg.state_dim();
        let k = cfg.num_classes;
        AodParams {
            backbone: BackboneParams::zeros(&cfg.backbone),
            fc6_w: Parameter::zeros("fc6.w", &[d6, d_in]),
            fc6_r: cfg.stacked_rnn.then(|| Parameter::zeros("fc6.r", &[d6, d6])),
            fc6_b: Parameter::zeros("fc6.b", &[d6]),
            fc7_w: Parameter::zeros("fc7.w", &[d7, d6]),
            fc7_r: Parameter::zeros("fc7.r", &[d7, d7]),
            fc7_b: Parameter::zeros("fc7.b", &[d7]),
            embed_w: Parameter::zeros("embed.w", &[de, 4]),
            embed_r: Parameter::zeros("embed.r", &[de, de]),
            embed_b: Parameter::zeros("embed.b", &[de]),
            glimpse: (1..cfg.steps)
                .map(|t| Parameter::zeros(format!("glimpse{t}.w"), &[4, ds]))
                .collect(),
            cls_w: Parameter::zeros("cls.w", &[k + 1, ds]),
            cls_b: Parameter::zeros("cls.b", &[k + 1]),
            reg_w: Parameter::zeros("reg.w", &[4 * k, ds]),
            reg_b: Parameter::zeros("reg.b", &[4 * k]),
        }
    }

    /// Canonical parameter order (checkpoints, optimizer, gradient buffers).
    pub fn all(&self) -> Vec<&Parameter<R>> {
        let mut v: Vec<&Parameter<R>> = self.backbone.all().into_iter().collect();
        v.push(&self.fc6_w);
        if let Some(r) = &self.fc6_r {
            v.push(r);
        }
        v.extend([
            &self.fc6_b,
            &self.fc7_w,
            &self.fc7_r,
            &self.fc7_b,
            &self.embed_w,
            &self.embed_r,
            &self.embed_b,
        ]);
        v.extend(self.glimpse.iter());
        v.extend([&self.cls_w, &self.cls_b, &self.reg_w, &self.reg_b]);
        v
    }

    pub fn all_mut(&mut self) -> Vec<&mut Parameter<R>> {
        let mut v: Vec<&mut Parameter<R>> = self.backbone.all_mut().into_iter().collect();
        v.push(&mut self.fc6_w);
        if let Some(r) = &mut self.fc6_r {
            v.push(r);
        }
        v.extend([
            &mut self.fc6_b,
            &mut self.fc7_w,
            &mut self.fc7_r,
            &mut self.fc7_b,
            &mut self.embed_w,
            &mut self.embed_r,
            &mut self.embed_b,
        ]);
        v.extend(self.glimpse.iter_mut());
        v.extend([&mut self.cls_w, &mut self.cls_b, &mut self.reg_w, &mut self.reg_b]);
        v
    }

    /// Loads values (and momentum buffers) by name from a parameter list.
    pub fn assign(&mut self, loaded: Vec<Parameter<R>>) -> Result<()> {
        let mut slots = self.all_mut();
        if slots.len() != loaded.len() {
            return Err(AodError::CheckpointMismatch(format!(
                "expected {} parameters, found {}",
                slots.len(),
                loaded.len()
            )));
        }
        for (slot, p) in slots.iter_mut().zip(loaded) {
            if slot.name != p.name || slot.value.shape() != p.value.shape() {
                return Err(AodError::CheckpointMismatch(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    slot.name,
                    slot.value.shape()
                )));
            }
            **slot = p;
        }
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> AodParams<S> {
        AodParams {
            backbone: BackboneParams {
                conv1_w: self.backbone.conv1_w.cast(),
                conv1_b: self.backbone.conv1_b.cast(),
                conv2_w: self.backbone.conv2_w.cast(),
                conv2_b: self.backbone.conv2_b.cast(),
            },
            fc6_w: self.fc6_w.cast(),
            fc6_r: self.fc6_r.as_ref().map(Parameter::cast),
            fc6_b: self.fc6_b.cast(),
            fc7_w: self.fc7_w.cast(),
            fc7_r: self.fc7_r.cast(),
            fc7_b: self.fc7_b.cast(),
            embed_w: self.embed_w.cast(),
            embed_r: self.embed_r.cast(),
            embed_b: self.embed_b.cast(),
            glimpse: self.glimpse.iter().map(Parameter::cast).collect(),
            cls_w: self.cls_w.cast(),
            cls_b: self.cls_b.cast(),
            reg_w: self.reg_w.cast(),
            reg_b: self.reg_b.cast(),
        }
    }
}

/// Glimpse layers `N(0, 1e-4^2)`, recurrent connections `N(0, 0.01^2)`,
/// classifier `N(0, 0.01^2)`, regressor `N(0, 0.001^2)`, feed-forward and
/// conv layers He-normal; every bias is 0. Deterministic in `seed`.
pub fn init_params<R: Real>(cfg: &AodConfig, seed: u64) -> Result<AodParams<R>> {
    cfg.validate()?;
    let mut p = AodParams::zeros(cfg);
    for (i, param) in p.all_mut().into_iter().enumerate() {
        let std = match param.name.as_str() {
            n if n.ends_with(".b") => continue,
            "fc6.r" | "fc7.r" | "embed.r" => 0.01,
            "cls.w" => 0.01,
            "reg.w" => 0.001,
            n if n.starts_with("glimpse") => 1e-4,
            _ => {
                let s = param.value.shape();
                let fan_in: usize = s[1..].iter().product();
                (2.0 / fan_in as f64).sqrt()
            }
        };
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut rng = stream_rng(seed, &[tags::INIT, i as u64]);
        for v in param.value.data_mut() {
            *v = R::of(normal.sample(&mut rng));
        }
    }
    Ok(p)
}

/// Gradient buffers mirroring [`AodParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct AodGrads<R> {
    pub backbone: BackboneGrads<R>,
    pub fc6_w: Vec<R>,
    pub fc6_r: Vec<R>,
    pub fc6_b: Vec<R>,
    pub fc7_w: Vec<R>,
    pub fc7_r: Vec<R>,
    pub fc7_b: Vec<R>,
    pub embed_w: Vec<R>,
    pub embed_r: Vec<R>,
    pub embed_b: Vec<R>,
    pub glimpse: Vec<Vec<R>>,
    pub cls_w: Vec<R>,
    pub cls_b: Vec<R>,
    pub reg_w: Vec<R>,
    pub reg_b: Vec<R>,
}

impl<R: Real> AodGrads<R> {
    pub fn zeros_like(p: &AodParams<R>) -> Self {
        let z = |q: &Parameter<R>| vec![R::zero(); q.len()];
        AodGrads {
            backbone: BackboneGrads::zeros_like(&p.backbone),
            fc6_w: z(&p.fc6_w),
            fc6_r: p.fc6_r.as_ref().map(z).unwrap_or_default(),
            fc6_b: z(&p.fc6_b),
            fc7_w: z(&p.fc7_w),
            fc7_r: z(&p.fc7_r),
            fc7_b: z(&p.fc7_b),
            embed_w: z(&p.embed_w),
            embed_r: z(&p.embed_r),
            embed_b: z(&p.embed_b),
            glimpse: p.glimpse.iter().map(z).collect(),
            cls_w: z(&p.cls_w),
            cls_b: z(&p.cls_b),
            reg_w: z(&p.reg_w),
            reg_b: z(&p.reg_b),
        }
    }

    /// Buffers in the canonical order of [`AodParams::all`].
    pub fn buffers(&self) -> Vec<&Vec<R>> {
        let mut v: Vec<&Vec<R>> = self.backbone.buffers().into_iter().collect();
        v.push(&self.fc6_w);
        if !self.fc6_r.is_empty() {
            v.push(&self.fc6_r);
        }
        v.extend([
            &self.fc6_b,
            &self.fc7_w,
            &self.fc7_r,
            &self.fc7_b,
            &self.embed_w,
            &self.embed_r,
            &self.embed_b,
        ]);
        v.extend(self.glimpse.iter());
        v.extend([&self.cls_w, &self.cls_b, &self.reg_w, &self.reg_b]);
        v
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<R>> {
        let mut v: Vec<&mut Vec<R>> = self.backbone.buffers_mut().into_iter().collect();
        v.push(&mut self.fc6_w);
        if !self.fc6_r.is_empty() {
            v.push(&mut self.fc6_r);
        }
        v.extend([
            &mut self.fc6_b,
            &mut self.fc7_w,
            &mut self.fc7_r,
            &mut self.fc7_b,
            &mut self.embed_w,
            &mut self.embed_r,
            &mut self.embed_b,
        ]);
        v.extend(self.glimpse.iter_mut());
        v.extend([&mut self.cls_w, &mut self.cls_b, &mut self.reg_w, &mut self.reg_b]);
        v
    }

    pub fn add_assign(&mut self, other: &AodGrads<R>) {
        for (a, b) in self.buffers_mut().into_iter().zip(other.buffers()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: R) {
        for a in self.buffers_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.buffers().iter().all(|b| b.iter().all(|&x| x == R::zero()))
    }

    /// Adds these buffers into the parameters' `grad` tensors.
    pub fn accumulate_into(&self, params: &mut AodParams<R>) {
        for (p, g) in params.all_mut().into_iter().zip(self.buffers()) {
            for (x, y) in p.grad.data_mut().iter_mut().zip(g) {
                *x += *y;
            }
        }
    }
}

/// Per-step dropout scale factors for fc6 and fc7 of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks<R> {
    pub fc6: Vec<Vec<R>>,
    pub fc7: Vec<Vec<R>>,
}

impl<R: Real> DropoutMasks<R> {
    pub fn sample(cfg: &AodConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, &[tags::DROPOUT]);
        let fc6 = (0..cfg.steps).map(|_| dropout_mask(&mut rng, cfg.fc6_dim, cfg.dropout)).collect();
        let fc7 = (0..cfg.steps).map(|_| dropout_mask(&mut rng, cfg.fc7_dim, cfg.dropout)).collect();
        DropoutMasks { fc6, fc7 }
    }
}

/// Where the glimpse actions come from.
#[derive(Clone, Copy, Debug)]
pub enum Actions<'a> {
    /// `a_t = mu_t`
    Mean,
    /// `a_t = mu_t + noise_t`, `T - 1` entries
    Noise(&'a [GlimpseDelta]),
    /// `a_t` given; used to evaluate a fixed trajectory under changing weights
    Fixed(&'a [GlimpseDelta]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepState<R> {
    /// 1-based step index.
    pub t: usize,
    /// Glimpse vector fed to the embedding: the clipped glimpse box encoded
    /// against the proposal (`a_{t-1}` while inside the image, zero at t = 1).
    pub input_delta: GlimpseDelta,
    /// Unclipped glimpse box; equals the proposal at t = 1.
    pub glimpse_box: BoundingBox,
    pub roi: RoiWindow,
    pub roi_argmax: Vec<usize>,
    pub features: Vec<R>,
    pub pre6: Vec<R>,
    pub h6: Vec<R>,
    pub pre7: Vec<R>,
    pub h7: Vec<R>,
    pub preg: Vec<R>,
    pub hg: Vec<R>,
    /// `x_t = [h7_t, hg_t]`, the state read by the glimpse layer.
    pub combined: Vec<R>,
    /// `mu_t` for `t < T`.
    pub mean: Option<GlimpseDelta>,
    /// `a_t` for `t < T`.
    pub action: Option<GlimpseDelta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutput {
    /// `K + 1` probabilities, background last.
    pub class_probs: Vec<f64>,
    /// One delta per foreground class, anchored at the proposal.
    pub bbox_deltas: Vec<GlimpseDelta>,
}

impl NetworkOutput {
    pub fn background(&self) -> usize {
        self.class_probs.len() - 1
    }

    pub fn argmax_class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.class_probs.iter().enumerate() {
            if p > self.class_probs[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout<R> {
    pub proposal: BoundingBox,
    pub steps: Vec<StepState<R>>,
    pub fused: Vec<R>,
    /// Step index (0-based) that won each fused coordinate.
    pub fused_from: Vec<usize>,
    pub logits: Vec<R>,
    pub probs: Vec<R>,
    pub output: NetworkOutput,
}

impl<R: Real> Rollout<R> {
    pub fn actions(&self) -> Vec<GlimpseDelta> {
        self.steps.iter().filter_map(|s| s.action).collect()
    }

    pub fn means(&self) -> Vec<GlimpseDelta> {
        self.steps.iter().filter_map(|s| s.mean).collect()
    }

    pub fn glimpse_boxes(&self) -> Vec<BoundingBox> {
        self.steps.iter().map(|s| s.glimpse_box).collect()
    }
}

fn to_delta<R: Real>(v: &[R]) -> GlimpseDelta {
    GlimpseDelta::new(v[0].as_f64(), v[1].as_f64(), v[2].as_f64(), v[3].as_f64())
}

fn shift_only(d: GlimpseDelta) -> GlimpseDelta {
    GlimpseDelta::new(d.dx, d.dy, 0.0, 0.0)
}

fn check_finite<R: Real>(v: &[R], step: usize, layer: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(AodError::Divergence { step, layer })
    }
}

fn relu_mask<R: Real>(pre: &[R], mask: Option<&[R]>) -> Vec<R> {
    match mask {
        Some(m) => pre.iter().zip(m).map(|(&p, &s)| p.max(R::zero()) * s).collect(),
        None => pre.iter().map(|&p| p.max(R::zero())).collect(),
    }
}

/// Runs one `T`-step rollout for a proposal. `masks` of `None` means eval
/// mode (no dropout).
pub fn forward_rollout<R: Real>(
    fm: &FeatureMap<R>,
    image_size: (usize, usize),
    proposal: &BoundingBox,
    params: &AodParams<R>,
    cfg: &AodConfig,
    actions: Actions<'_>,
    masks: Option<&DropoutMasks<R>>,
) -> Result<Rollout<R>> {
    forward_rollout_from(fm, image_size, proposal, params, cfg, actions, masks, None)
}

/// As [`forward_rollout`], optionally reusing the first step of an earlier
/// rollout of the same proposal under the same parameters and masks (step 1
/// does not depend on the actions).
#[allow(clippy::too_many_arguments)]
pub fn forward_rollout_from<R: Real>(
    fm: &FeatureMap<R>,
    image_size: (usize, usize),
    proposal: &BoundingBox,
    params: &AodParams<R>,
    cfg: &AodConfig,
    actions: Actions<'_>,
    masks: Option<&DropoutMasks<R>>,
    first_step: Option<&StepState<R>>,
) -> Result<Rollout<R>> {
    proposal.validate()?;
    let steps_n = cfg.steps;
    match actions {
        Actions::Noise(v) | Actions::Fixed(v) if v.len() != steps_n - 1 => {
            return Err(AodError::Contract(format!(
                "expected {} glimpse actions, got {}",
                steps_n - 1,
                v.len()
            )));
        }
        _ => {}
    }
    let (img_h, img_w) = (image_size.0 as f64, image_size.1 as f64);
    let (c, fh, fw) = (fm.channels(), fm.height(), fm.width());
    let d_in = cfg.roi_features();
    if c * cfg.roi_grid[0] * cfg.roi_grid[1] != d_in {
        return Err(AodError::Shape(format!("feature map has {c} channels")));
    }

    let mut steps: Vec<StepState<R>> = Vec::with_capacity(steps_n);
    let mut input_delta = GlimpseDelta::ZERO;
    let mut glimpse_box = *proposal;

    for t in 1..=steps_n {
        let state = if let (1, Some(s)) = (t, first_step) {
            s.clone()
        } else {
            let clipped = clip_box(&glimpse_box, img_w, img_h);
            let roi = roi_window(&clipped, fm.stride, fh, fw, cfg.roi_grid[0], cfg.roi_grid[1])?;
            let mut features = vec![R::zero(); d_in];
            let mut roi_argmax = vec![0; d_in];
            kernels::roi_pool_forward(fm.tensor.data(), c, fh, fw, &roi, &mut features, &mut roi_argmax);

            // Units dropped by the mask are not computed (pre-activation 0).
            let prev = steps.last();
            let keep6 = masks.map(|m| m.fc6[t - 1].as_slice());
            let mut pre6 = vec![R::zero(); cfg.fc6_dim];
            let (w6, b6) = (params.fc6_w.value.data(), params.fc6_b.value.data());
            kernels::affine_kept(w6, b6, &features, keep6, &mut pre6);
            if let (Some(r6), Some(p)) = (&params.fc6_r, prev) {
                kernels::affine_accum_kept(r6.value.data(), &p.h6, keep6, &mut pre6);
            }
            check_finite(&pre6, t, "fc6")?;
            let h6 = relu_mask(&pre6, keep6);

            let keep7 = masks.map(|m| m.fc7[t - 1].as_slice());
            let mut pre7 = vec![R::zero(); cfg.fc7_dim];
            let (w7, b7) = (params.fc7_w.value.data(), params.fc7_b.value.data());
            kernels::affine_kept(w7, b7, &h6, keep7, &mut pre7);
            if let Some(p) = prev {
                kernels::affine_accum_kept(params.fc7_r.value.data(), &p.h7, keep7, &mut pre7);
            }
            check_finite(&pre7, t, "fc7")?;
            let h7 = relu_mask(&pre7, keep7);

            let d_vec: Vec<R> = input_delta.to_array().iter().map(|&v| R::of(v)).collect();
            let mut preg = vec![R::zero(); cfg.glimpse_embed_dim];
            kernels::affine(params.embed_w.value.data(), params.embed_b.value.data(), &d_vec, &mut preg);
            if let Some(p) = prev {
                kernels::affine_accum(params.embed_r.value.data(), &p.hg, &mut preg);
            }
            check_finite(&preg, t, "glimpse embed")?;
            let hg = relu_mask(&preg, None);

            let mut combined = h7.clone();
            combined.extend_from_slice(&hg);
            StepState {
                t,
                input_delta,
                glimpse_box,
                roi,
                roi_argmax,
                features,
                pre6,
                h6,
                pre7,
                h7,
                preg,
                hg,
                combined,
                mean: None,
                action: None,
            }
        };
        let mut state = state;
        state.mean = None;
        state.action = None;

        if t < steps_n {
            let mut mu = [R::zero(); 4];
            kernels::affine(params.glimpse[t - 1].value.data(), &[], &state.combined, &mut mu);
            check_finite(&mu, t, "glimpse")?;
            let mut mean = to_delta(&mu);
            if cfg.glimpse_dof == 2 {
                mean = shift_only(mean);
            }
            let mut action = match actions {
                Actions::Mean => mean,
                Actions::Noise(n) => mean + n[t - 1],
                Actions::Fixed(a) => a[t - 1],
            };
            if cfg.glimpse_dof == 2 {
                action = shift_only(action);
            }
            state.mean = Some(mean);
            state.action = Some(action);
            glimpse_box = decode_glimpse(&action, proposal)?;
            // The embedding sees the region actually pooled, so an off-image
            // action cannot inflate it.
            input_delta = encode_glimpse(&clip_box(&glimpse_box, img_w, img_h), proposal)?;
        }
        steps.push(state);
    }

    let ds = cfg.state_dim();
    let (fused, fused_from) = if cfg.eltwise_max {
        let mut fused = steps[0].combined.clone();
        let mut from = vec![0usize; ds];
        for (k, s) in steps.iter().enumerate().skip(1) {
            for i in 0..ds {
                if s.combined[i] > fused[i] {
                    fused[i] = s.combined[i];
                    from[i] = k;
                }
            }
        }
        (fused, from)
    } else {
        (steps[steps_n - 1].combined.clone(), vec![steps_n - 1; ds])
    };

    let k = cfg.num_classes;
    let mut logits = vec![R::zero(); k + 1];
    kernels::affine(params.cls_w.value.data(), params.cls_b.value.data(), &fused, &mut logits);
    let mut reg = vec![R::zero(); 4 * k];
    kernels::affine(params.reg_w.value.data(), params.reg_b.value.data(), &fused, &mut reg);
    check_finite(&logits, steps_n, "classifier")?;
    check_finite(&reg, steps_n, "regressor")?;
    let probs = softmax(&logits);
    let output = NetworkOutput {
        class_probs: probs.iter().map(|p| p.as_f64()).collect(),
        bbox_deltas: reg.chunks_exact(4).map(to_delta).collect(),
    };
    Ok(Rollout {
        proposal: *proposal,
        steps,
        fused,
        fused_from,
        logits,
        probs,
        output,
    })
}

/// Loss gradients on the network outputs from the supervised objective.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedGrads<R> {
    /// `K + 1` values.
    pub d_logits: Vec<R>,
    /// `4K` values.
    pub d_deltas: Vec<R>,
}

/// Backpropagates through one rollout, accumulating into `grads` and into
/// `d_features` (the feature-map gradient).
///
/// `supervised` reaches the classifier, the regressor and every shared layer
/// but never the glimpse layers. `policy` holds the loss gradient on each
/// action mean `mu_t` (`T - 1` entries, the negated policy-gradient ascent
/// direction); it reaches the glimpse layers and the shared layers but never
/// the classifier or regressor.
#[allow(clippy::too_many_arguments)]
pub fn backward_rollout<R: Real>(
    rollout: &Rollout<R>,
    params: &AodParams<R>,
    cfg: &AodConfig,
    masks: Option<&DropoutMasks<R>>,
    supervised: Option<&SupervisedGrads<R>>,
    policy: Option<&[GlimpseDelta]>,
    grads: &mut AodGrads<R>,
    d_features: &mut [R],
) -> Result<()> {
    let steps_n = cfg.steps;
    let (d7, de, ds) = (cfg.fc7_dim, cfg.glimpse_embed_dim, cfg.state_dim());
    let mut d_combined = vec![vec![R::zero(); ds]; steps_n];

    if let Some(sup) = supervised {
        if sup.d_logits.len() != cfg.num_classes + 1 || sup.d_deltas.len() != 4 * cfg.num_classes {
            return Err(AodError::Shape("supervised gradient size".into()));
        }
        kernels::outer_accum(&sup.d_logits, &rollout.fused, &mut grads.cls_w);
        kernels::outer_accum(&sup.d_deltas, &rollout.fused, &mut grads.reg_w);
        for (g, &d) in grads.cls_b.iter_mut().zip(&sup.d_logits) {
            *g += d;
        }
        for (g, &d) in grads.reg_b.iter_mut().zip(&sup.d_deltas) {
            *g += d;
        }
        let mut d_fused = vec![R::zero(); ds];
        kernels::affine_t_accum(params.cls_w.value.data(), &sup.d_logits, &mut d_fused);
        kernels::affine_t_accum(params.reg_w.value.data(), &sup.d_deltas, &mut d_fused);
        for (i, &g) in d_fused.iter().enumerate() {
            d_combined[rollout.fused_from[i]][i] += g;
        }
    }

    if let Some(pg) = policy {
        if pg.len() != steps_n - 1 {
            return Err(AodError::Contract(format!(
                "expected {} action-mean gradients, got {}",
                steps_n - 1,
                pg.len()
            )));
        }
        for (t, d_mu) in pg.iter().enumerate() {
            let d_mu = if cfg.glimpse_dof == 2 { shift_only(*d_mu) } else { *d_mu };
            let d: [R; 4] = d_mu.to_array().map(R::of);
            let x = &rollout.steps[t].combined;
            kernels::outer_accum(&d, x, &mut grads.glimpse[t]);
            kernels::affine_t_accum(params.glimpse[t].value.data(), &d, &mut d_combined[t]);
        }
    }

    let mut carry6 = vec![R::zero(); cfg.fc6_dim];
    let mut carry7 = vec![R::zero(); d7];
    let mut carryg = vec![R::zero(); de];
    let zero = R::zero();
    for ti in (0..steps_n).rev() {
        let s = &rollout.steps[ti];
        let dc = &d_combined[ti];
        let idle = dc.iter().all(|&v| v == zero)
            && carry6.iter().all(|&v| v == zero)
            && carry7.iter().all(|&v| v == zero)
            && carryg.iter().all(|&v| v == zero);
        if idle {
            continue;
        }
        let prev = ti.checked_sub(1).map(|i| &rollout.steps[i]);

        // fc7
        let m7 = masks.map(|m| m.fc7[ti].as_slice());
        let d_pre7: Vec<R> = (0..d7)
            .map(|i| {
                let g = dc[i] + carry7[i];
                let scale = m7.map_or(R::one(), |m| m[i]);
                if s.pre7[i] > zero {
                    g * scale
                } else {
                    zero
                }
            })
            .collect();
        kernels::outer_accum(&d_pre7, &s.h6, &mut grads.fc7_w);
        for (g, &d) in grads.fc7_b.iter_mut().zip(&d_pre7) {
            *g += d;
        }
        let mut d_h6 = std::mem::replace(&mut carry6, vec![zero; cfg.fc6_dim]);
        kernels::affine_t_accum(params.fc7_w.value.data(), &d_pre7, &mut d_h6);
        carry7.fill(zero);
        if let Some(p) = prev {
            kernels::outer_accum(&d_pre7, &p.h7, &mut grads.fc7_r);
            kernels::affine_t_accum(params.fc7_r.value.data(), &d_pre7, &mut carry7);
        }

        // fc6
        let m6 = masks.map(|m| m.fc6[ti].as_slice());
        let d_pre6: Vec<R> = (0..cfg.fc6_dim)
            .map(|i| {
                let scale = m6.map_or(R::one(), |m| m[i]);
                if s.pre6[i] > zero {
                    d_h6[i] * scale
                } else {
                    zero
                }
            })
            .collect();
        kernels::outer_accum(&d_pre6, &s.features, &mut grads.fc6_w);
        for (g, &d) in grads.fc6_b.iter_mut().zip(&d_pre6) {
            *g += d;
        }
        if let (Some(r6), Some(p)) = (&params.fc6_r, prev) {
            kernels::outer_accum(&d_pre6, &p.h6, &mut grads.fc6_r);
            kernels::affine_t_accum(r6.value.data(), &d_pre6, &mut carry6);
        }
        let mut d_f = vec![zero; s.features.len()];
        kernels::affine_t_accum(params.fc6_w.value.data(), &d_pre6, &mut d_f);
        kernels::scatter_argmax(&s.roi_argmax, &d_f, d_features);

        // glimpse embedding
        let d_preg: Vec<R> = (0..de)
            .map(|i| {
                if s.preg[i] > zero {
                    dc[d7 + i] + carryg[i]
                } else {
                    zero
                }
            })
            .collect();
        let dvec: [R; 4] = s.input_delta.to_array().map(R::of);
        kernels::outer_accum(&d_preg, &dvec, &mut grads.embed_w);
        for (g, &d) in grads.embed_b.iter_mut().zip(&d_preg) {
            *g += d;
        }
        carryg.fill(zero);
        if let Some(p) = prev {
            kernels::outer_accum(&d_preg, &p.hg, &mut grads.embed_r);
            kernels::affine_t_accum(params.embed_r.value.data(), &d_preg, &mut carryg);
        }
    }
    Ok(())
}

/// Convenience: feature-map gradient buffer for `fm`.
pub fn feature_grad_buffer<R: Real>(fm: &FeatureMap<R>) -> Tensor<R> {
    Tensor::zeros(fm.tensor.shape())
}
