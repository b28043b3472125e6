//! Sample labeling, minibatches, the joint supervised + REINFORCE step and
//! the training loop.
//!
//! A step runs in four phases:
//!
//! 1. forward, in parallel per sample: one noiseless rollout for the
//!    supervised loss and, for foreground samples, `n_episodes` noisy
//!    rollouts sharing that sample's dropout masks;
//! 2. baseline adjustment of the returns, sequential in sample order (the
//!    moving-average baseline is shared state);
//! 3. backward, in parallel over fixed chunks of samples, each chunk owning
//!    its accumulators; chunks are reduced in order, so the result does not
//!    depend on the thread count;
//! 4. one SGD step on the batch-averaged gradient.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aodnet::{
    backward_rollout, forward_rollout, forward_rollout_from, init_params, Actions, AodConfig, AodGrads, AodParams,
    DropoutMasks, NetworkOutput, ParamGroup, Rollout, SupervisedGrads,
};
use crate::backbone::{backward_features, extract_features, BackboneTrace, FeatureMap};
use crate::data::{AnnotatedImage, GroundTruth};
use crate::diffcore::ops::{smooth_l1, smooth_l1_grad};
use crate::diffcore::{relative_error, sgd_step, Checkpoint, Real, SgdConfig, Tensor};
use crate::error::{AodError, Result};
use crate::geometry::{encode_glimpse, iou, BoundingBox, GlimpseDelta};
use crate::reinforce::{
    episode_reward, normalize_returns, policy_gradient, BaselineKind, EmaBaseline, RlConfig,
};
use crate::rng::{derive_seed, stream_rng, tags};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Foreground(usize),
    Background,
    Ignored,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionSample {
    pub image_id: usize,
    pub proposal: BoundingBox,
    pub label: Label,
    pub bbox_target: Option<GlimpseDelta>,
    pub matched_gt: Option<BoundingBox>,
}

impl DetectionSample {
    /// Classifier index: `c` for foreground, `K` for background.
    pub fn class_index(&self, num_classes: usize) -> Option<usize> {
        match self.label {
            Label::Foreground(c) => Some(c),
            Label::Background => Some(num_classes),
            Label::Ignored => None,
        }
    }
}

/// Labels proposals by their best-overlapping gt: IoU >= 0.5 foreground,
/// [0.1, 0.5) background, otherwise ignored. Ties go to the lowest gt index.
pub fn assign_labels(image_id: usize, proposals: &[BoundingBox], gts: &[GroundTruth]) -> Result<Vec<DetectionSample>> {
    proposals
        .iter()
        .map(|p| {
            p.validate()?;
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                let o = iou(p, &g.bbox);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            let alpha = best.map_or(0.0, |(_, o)| o);
            let s = match best {
                Some((j, _)) if alpha >= 0.5 => DetectionSample {
                    image_id,
                    proposal: *p,
                    label: Label::Foreground(gts[j].label),
                    bbox_target: Some(encode_glimpse(&gts[j].bbox, p)?),
                    matched_gt: Some(gts[j].bbox),
                },
                _ => DetectionSample {
                    image_id,
                    proposal: *p,
                    label: if alpha >= 0.1 { Label::Background } else { Label::Ignored },
                    bbox_target: None,
                    matched_gt: None,
                },
            };
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePool {
    pub image_id: usize,
    pub fg: Vec<DetectionSample>,
    pub bg: Vec<DetectionSample>,
}

/// Labels every image once, before training.
pub fn build_pools(images: &[AnnotatedImage]) -> Result<Vec<ImagePool>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let samples = assign_labels(i, &img.proposals, &img.gts)?;
            let (mut fg, mut bg) = (Vec::new(), Vec::new());
            for s in samples {
                match s.label {
                    Label::Foreground(_) => fg.push(s),
                    Label::Background => bg.push(s),
                    Label::Ignored => {}
                }
            }
            Ok(ImagePool { image_id: i, fg, bg })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` from `at_fraction * iterations` on.
    Step { at_fraction: f64, factor: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Step {
            at_fraction: 0.75,
            factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, iteration: u64, total: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { at_fraction, factor } => {
                if iteration as f64 >= (at_fraction * total as f64).floor() {
                    base * factor
                } else {
                    base
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub images_per_batch: usize,
    pub fg_per_image: usize,
    pub bg_per_image: usize,
    pub lr: f64,
    pub momentum: f64,
    pub iterations: u64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Global-norm gradient clip, `null` for none.
    pub grad_clip: Option<f64>,
    /// Checkpoint period in iterations; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    #[serde(rename = "RLConfig")]
    pub rl: RlConfig,
    #[serde(rename = "AODConfig")]
    pub aod: AodConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            images_per_batch: 2,
            fg_per_image: 16,
            bg_per_image: 48,
            lr: 0.001,
            momentum: 0.9,
            iterations: 4000,
            lr_schedule: LrSchedule::default(),
            seed: 0,
            grad_clip: Some(10.0),
            checkpoint_every: 0,
            rl: RlConfig::default(),
            aod: AodConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.aod.validate()?;
        self.rl.validate()?;
        if self.images_per_batch == 0 {
            return Err(AodError::config("images_per_batch", "must be >= 1"));
        }
        if self.fg_per_image + self.bg_per_image == 0 {
            return Err(AodError::config("fg_per_image", "batch would be empty"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AodError::config("lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AodError::config("momentum", "must be in [0, 1)"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(AodError::config("grad_clip", "must be > 0 or null"));
            }
        }
        if let LrSchedule::Step { at_fraction, factor } = self.lr_schedule {
            if !(0.0..=1.0).contains(&at_fraction) || !(factor > 0.0) {
                return Err(AodError::config("lr_schedule", "need at_fraction in [0, 1] and factor > 0"));
            }
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.images_per_batch * (self.fg_per_image + self.bg_per_image)
    }
}

fn draw<T: Copy>(pool: &[T], n: usize, rng: &mut crate::rng::Rng) -> Vec<T> {
    if pool.is_empty() || n == 0 {
        return Vec::new();
    }
    if pool.len() >= n {
        index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Picks `images_per_batch` images that have foreground samples, then
/// `fg_per_image` foreground and `bg_per_image` background samples from
/// each (with replacement when a pool is short). Deterministic in
/// `(seed, iteration)`.
pub fn build_minibatch(pools: &[ImagePool], cfg: &TrainConfig, seed: u64, iteration: u64) -> Result<Vec<DetectionSample>> {
    let eligible: Vec<&ImagePool> = pools.iter().filter(|p| !p.fg.is_empty()).collect();
    if eligible.is_empty() {
        return Err(AodError::Empty("images with foreground samples"));
    }
    let mut rng = stream_rng(seed, &[tags::MINIBATCH, iteration]);
    let chosen = draw(&eligible, cfg.images_per_batch, &mut rng);
    let mut batch = Vec::with_capacity(cfg.batch_size());
    for pool in chosen {
        batch.extend(draw(&pool.fg, cfg.fg_per_image, &mut rng));
        batch.extend(draw(&pool.bg, cfg.bg_per_image, &mut rng));
    }
    Ok(batch)
}

/// Cross-entropy plus, for foreground, smooth-L1 on the class's deltas
/// (weighted 1:1). Gradients are on the logits and the `4K` deltas.
pub fn supervised_loss(output: &NetworkOutput, sample: &DetectionSample) -> Result<(f64, SupervisedGrads<f64>)> {
    let k = output.bbox_deltas.len();
    let c = sample
        .class_index(k)
        .ok_or_else(|| AodError::Contract("ignored samples have no loss".into()))?;
    let p = &output.class_probs;
    let mut loss = -p[c].max(f64::MIN_POSITIVE).ln();
    let mut d_logits = p.clone();
    d_logits[c] -= 1.0;
    let mut d_deltas = vec![0.0; 4 * k];
    if let Label::Foreground(cls) = sample.label {
        let target = sample
            .bbox_target
            .ok_or_else(|| AodError::Contract("foreground sample without bbox target".into()))?;
        let pred = output.bbox_deltas[cls].to_array();
        for (j, (a, b)) in pred.iter().zip(target.to_array()).enumerate() {
            let d = a - b;
            loss += smooth_l1(d);
            d_deltas[4 * cls + j] = smooth_l1_grad(d);
        }
    }
    Ok((loss, SupervisedGrads { d_logits, d_deltas }))
}

fn cast_sup<R: Real>(g: &SupervisedGrads<f64>) -> SupervisedGrads<R> {
    SupervisedGrads {
        d_logits: g.d_logits.iter().map(|&v| R::of(v)).collect(),
        d_deltas: g.d_deltas.iter().map(|&v| R::of(v)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: u64,
    pub supervised_loss: f64,
    pub mean_return: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub episodes: usize,
}

/// Gradients of one step split by source, before averaging.
#[derive(Clone, Debug)]
pub struct SourceGrads<R> {
    pub supervised: AodGrads<R>,
    pub reinforce: AodGrads<R>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepOptions {
    /// Keep the two gradient sources apart (runs the backbone backward twice).
    pub instrument: bool,
    /// Skip episode sampling entirely.
    pub skip_reinforce: bool,
}

struct SampleForward<R> {
    slot: usize,
    masks: Option<DropoutMasks<R>>,
    base: Rollout<R>,
    loss: f64,
    sup: SupervisedGrads<R>,
    noise: Vec<Vec<GlimpseDelta>>,
    episodes: Vec<Rollout<R>>,
    raw: Vec<f64>,
}

const CHUNK: usize = 8;

fn sample_noise(rl: &RlConfig, aod: &AodConfig, seed: u64) -> Vec<GlimpseDelta> {
    let mut rng = stream_rng(seed, &[]);
    let normal = Normal::new(0.0, rl.sigma).expect("sigma > 0");
    (1..aod.steps)
        .map(|_| {
            let mut d = [0.0; 4];
            d.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            if aod.glimpse_dof == 2 {
                d[2] = 0.0;
                d[3] = 0.0;
            }
            GlimpseDelta::from_array(d)
        })
        .collect()
}

/// Mutable training state: parameters with momentum, the shared baseline and
/// the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<R> {
    pub params: AodParams<R>,
    pub ema: EmaBaseline,
    pub iteration: u64,
}

impl<R: Real> TrainState<R> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TrainState {
            params: init_params(&cfg.aod, cfg.seed)?,
            ema: EmaBaseline::new(cfg.rl.ema_decay),
            iteration: 0,
        })
    }

    pub fn checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let state = serde_json::json!({
            "ema_baseline": self.ema,
            "train_config": cfg,
        });
        Ok(Checkpoint::from_params(
            &self.params.all(),
            serde_json::to_value(&cfg.aod)?,
            self.iteration,
            state,
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let aod: AodConfig = serde_json::from_value(ck.network_config.clone())
            .map_err(|e| AodError::CheckpointMismatch(format!("network config: {e}")))?;
        if aod != cfg.aod {
            return Err(AodError::CheckpointMismatch(
                "checkpoint network config differs from the run config".into(),
            ));
        }
        let mut params = AodParams::zeros(&aod);
        params.assign(ck.params()?)?;
        let ema = match ck.state.get("ema_baseline") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => EmaBaseline::new(cfg.rl.ema_decay),
        };
        Ok(TrainState {
            params,
            ema,
            iteration: ck.iteration,
        })
    }
}

/// Loads only the parameters and network config of a checkpoint.
pub fn load_network<R: Real>(ck: &Checkpoint) -> Result<(AodConfig, AodParams<R>)> {
    let aod: AodConfig = serde_json::from_value(ck.network_config.clone())
        .map_err(|e| AodError::CheckpointMismatch(format!("network config: {e}")))?;
    aod.validate()?;
    let mut params = AodParams::zeros(&aod);
    params.assign(ck.params()?)?;
    Ok((aod, params))
}

/// One joint training step on `batch`. On error the parameters are left
/// unchanged.
pub fn train_step<R: Real>(
    state: &mut TrainState<R>,
    images: &[AnnotatedImage],
    batch: &[DetectionSample],
    cfg: &TrainConfig,
    opts: StepOptions,
) -> Result<(StepMetrics, Option<SourceGrads<R>>)> {
    let aod = &cfg.aod;
    let rl = &cfg.rl;
    let it = state.iteration;
    let params = &state.params;
    if batch.is_empty() {
        return Err(AodError::Empty("minibatch"));
    }

    let mut image_ids: Vec<usize> = Vec::new();
    let mut slot_of = vec![usize::MAX; images.len()];
    for s in batch {
        let id = s.image_id;
        if id >= images.len() {
            return Err(AodError::Contract(format!("sample refers to missing image {id}")));
        }
        if slot_of[id] == usize::MAX {
            slot_of[id] = image_ids.len();
            image_ids.push(id);
        }
    }
    let features: Vec<(FeatureMap<R>, BackboneTrace<R>, (usize, usize))> = image_ids
        .par_iter()
        .map(|&id| {
            let img = &images[id];
            let pixels: Tensor<R> = img.image.cast();
            let (fm, trace) = extract_features(&pixels, &aod.backbone, &params.backbone)?;
            Ok((fm, trace, img.size()))
        })
        .collect::<Result<_>>()?;

    let run_rl = aod.steps > 1 && !opts.skip_reinforce;
    let forwards: Vec<SampleForward<R>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<SampleForward<R>> {
            let slot = slot_of[s.image_id];
            let (fm, _, size) = &features[slot];
            let masks = (aod.dropout > 0.0)
                .then(|| DropoutMasks::sample(aod, derive_seed(cfg.seed, &[tags::DROPOUT, it, i as u64])));
            let base = forward_rollout(fm, *size, &s.proposal, params, aod, Actions::Mean, masks.as_ref())?;
            let (loss, sup) = supervised_loss(&base.output, s)?;
            let class = s.class_index(aod.num_classes).expect("batch holds labeled samples");
            let wants_rl = match s.label {
                Label::Foreground(_) => true,
                Label::Background => rl.include_background,
                Label::Ignored => false,
            };
            let (mut noise, mut episodes, mut raw) = (Vec::new(), Vec::new(), Vec::new());
            if run_rl && wants_rl {
                for e in 0..rl.n_episodes {
                    let n = sample_noise(rl, aod, derive_seed(cfg.seed, &[tags::EPISODE, it, i as u64, e as u64]));
                    let r = forward_rollout_from(
                        fm,
                        *size,
                        &s.proposal,
                        params,
                        aod,
                        Actions::Noise(&n),
                        masks.as_ref(),
                        Some(&base.steps[0]),
                    )?;
                    raw.push(episode_reward(rl, &r.output, class, s.matched_gt.as_ref(), &s.proposal)?);
                    noise.push(n);
                    episodes.push(r);
                }
            }
            Ok(SampleForward {
                slot,
                masks,
                base,
                loss,
                sup: cast_sup(&sup),
                noise,
                episodes,
                raw,
            })
        })
        .collect::<Result<_>>()?;

    // Baselines and episode-mean action gradients, in sample order.
    let mut ema = state.ema;
    let mut action_grads: Vec<Vec<Vec<GlimpseDelta>>> = Vec::with_capacity(batch.len());
    for f in &forwards {
        if f.episodes.is_empty() {
            action_grads.push(Vec::new());
            continue;
        }
        let adjusted = match rl.baseline_kind {
            BaselineKind::ReturnNorm => normalize_returns(&f.raw)?,
            BaselineKind::MovingAverage => f.raw.iter().map(|&r| ema.center(r)).collect(),
        };
        let ascent = policy_gradient(&f.noise, &adjusted, rl.sigma, rl.return_scale, rl.n_episodes)?;
        action_grads.push(
            ascent
                .into_iter()
                .map(|steps| steps.into_iter().map(|d| GlimpseDelta::ZERO - d).collect())
                .collect(),
        );
    }

    let fm_len = features[0].0.tensor.len();
    type ChunkOut<R> = (AodGrads<R>, AodGrads<R>, Vec<Vec<R>>, Vec<Vec<R>>);
    let chunks: Vec<ChunkOut<R>> = (0..batch.len().div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| -> Result<ChunkOut<R>> {
            let mut sup = AodGrads::zeros_like(params);
            let mut rlg = AodGrads::zeros_like(params);
            let mut dfm_sup = vec![vec![R::zero(); fm_len]; features.len()];
            let mut dfm_rl = vec![vec![R::zero(); fm_len]; features.len()];
            for i in c * CHUNK..((c + 1) * CHUNK).min(batch.len()) {
                let f = &forwards[i];
                let masks = f.masks.as_ref();
                backward_rollout(&f.base, params, aod, masks, Some(&f.sup), None, &mut sup, &mut dfm_sup[f.slot])?;
                for (ep, g) in f.episodes.iter().zip(&action_grads[i]) {
                    backward_rollout(ep, params, aod, masks, None, Some(g), &mut rlg, &mut dfm_rl[f.slot])?;
                }
            }
            Ok((sup, rlg, dfm_sup, dfm_rl))
        })
        .collect::<Result<_>>()?;
    let mut chunks = chunks.into_iter();
    let (mut sup, mut rlg, mut dfm_sup, mut dfm_rl) = chunks.next().expect("non-empty batch");
    for (s, r, ds, dr) in chunks {
        sup.add_assign(&s);
        rlg.add_assign(&r);
        for (a, b) in dfm_sup.iter_mut().zip(&ds) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
        for (a, b) in dfm_rl.iter_mut().zip(&dr) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }
    for (slot, (_, trace, _)) in features.iter().enumerate() {
        if opts.instrument {
            backward_features(trace, &params.backbone, &dfm_sup[slot], &mut sup.backbone);
            backward_features(trace, &params.backbone, &dfm_rl[slot], &mut rlg.backbone);
        } else {
            let total: Vec<R> = dfm_sup[slot].iter().zip(&dfm_rl[slot]).map(|(a, b)| *a + *b).collect();
            backward_features(trace, &params.backbone, &total, &mut sup.backbone);
        }
    }

    let sources = opts.instrument.then(|| SourceGrads {
        supervised: sup.clone(),
        reinforce: rlg.clone(),
    });
    let mut total = sup;
    total.add_assign(&rlg);
    total.scale(R::of(1.0 / batch.len() as f64));

    let lr = cfg.lr_schedule.lr_at(cfg.lr, it, cfg.iterations);
    let sgd = SgdConfig {
        lr,
        momentum: cfg.momentum,
        grad_clip: cfg.grad_clip,
    };
    let mut next = state.params.clone();
    total.accumulate_into(&mut next);
    let grad_norm = sgd_step(&mut next.all_mut(), &sgd)?;
    state.params = next;
    state.ema = ema;
    state.iteration += 1;

    let n_ep: usize = forwards.iter().map(|f| f.raw.len()).sum();
    let metrics = StepMetrics {
        iteration: it,
        supervised_loss: forwards.iter().map(|f| f.loss).sum::<f64>() / batch.len() as f64,
        mean_return: if n_ep == 0 {
            0.0
        } else {
            forwards.iter().flat_map(|f| f.raw.iter()).sum::<f64>() / n_ep as f64
        },
        grad_norm,
        lr,
        episodes: n_ep,
    };
    Ok((metrics, sources))
}

/// Where and how the loop writes its outputs.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    /// Record wall-clock milliseconds in the metrics CSV (otherwise 0, which
    /// keeps the file reproducible byte for byte).
    pub wall_time: bool,
    pub resume: Option<Checkpoint>,
    /// Progress line every this many steps on stderr; 0 is silent.
    pub log_every: u64,
}

pub const METRICS_HEADER: &str = "iteration,supervised_loss,mean_return,grad_norm,lr,wall_ms";

fn metrics_row(m: &StepMetrics, wall_ms: u128) -> String {
    format!(
        "{},{:.9e},{:.9e},{:.9e},{:.9e},{}",
        m.iteration, m.supervised_loss, m.mean_return, m.grad_norm, m.lr, wall_ms
    )
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:06}.json"))
}

/// Runs `cfg.iterations` steps (continuing from `opts.resume`), writing
/// `metrics.csv`, periodic checkpoints and `final.json` into `out_dir`.
pub fn train<R: Real>(images: &[AnnotatedImage], cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainState<R>> {
    cfg.validate()?;
    let pools = build_pools(images)?;
    let skipped = pools.iter().filter(|p| p.fg.is_empty()).count();
    if skipped > 0 && opts.log_every > 0 {
        eprintln!("note: {skipped} images have no foreground proposals and are never sampled");
    }
    let mut state = match &opts.resume {
        Some(ck) => TrainState::from_checkpoint(ck, cfg)?,
        None => TrainState::new(cfg)?,
    };
    let mut csv = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            let keep = opts.resume.is_some() && path.exists();
            let mut lines: Vec<String> = Vec::new();
            if keep {
                // Keep rows of the steps that precede the resume point.
                let text = std::fs::read_to_string(&path)?;
                for l in text.lines().skip(1) {
                    let step: u64 = l.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
                    if step < state.iteration {
                        lines.push(l.to_string());
                    }
                }
            }
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
            writeln!(f, "{METRICS_HEADER}")?;
            for l in lines {
                writeln!(f, "{l}")?;
            }
            Some(f)
        }
        None => None,
    };
    let save = |state: &TrainState<R>, name: PathBuf| -> Result<()> { state.checkpoint(cfg)?.save(&name) };

    while state.iteration < cfg.iterations {
        let t0 = Instant::now();
        let batch = build_minibatch(&pools, cfg, cfg.seed, state.iteration)?;
        let m = match train_step(&mut state, images, &batch, cfg, StepOptions::default()) {
            Ok((m, _)) => m,
            Err(e) => {
                if let Some(dir) = &opts.out_dir {
                    save(&state, dir.join("last_good.json"))?;
                }
                return Err(e);
            }
        };
        let wall = if opts.wall_time { t0.elapsed().as_millis() } else { 0 };
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", metrics_row(&m, wall))?;
        }
        if opts.log_every > 0 && (m.iteration % opts.log_every == 0 || state.iteration == cfg.iterations) {
            eprintln!(
                "iter {:>6}  loss {:.4}  return {:.4}  |g| {:.3}  lr {:.2e}",
                m.iteration, m.supervised_loss, m.mean_return, m.grad_norm, m.lr
            );
        }
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
                save(&state, checkpoint_path(dir, state.iteration))?;
            }
        }
    }
    if let Some(mut f) = csv {
        f.flush()?;
    }
    if let Some(dir) = &opts.out_dir {
        save(&state, dir.join("final.json"))?;
    }
    Ok(state)
}

/// Worst relative error per parameter group of the full-network gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub max_rel_error: f64,
    pub entries: usize,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Fc6 => "fc6",
            ParamGroup::Fc7 => "fc7",
            ParamGroup::GlimpseEmbed => "glimpse_embed",
            ParamGroup::Glimpse => "glimpse",
            ParamGroup::Classifier => "classifier",
            ParamGroup::Regressor => "regressor",
        }
    }

    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Backbone,
        ParamGroup::Fc6,
        ParamGroup::Fc7,
        ParamGroup::GlimpseEmbed,
        ParamGroup::Glimpse,
        ParamGroup::Classifier,
        ParamGroup::Regressor,
    ];
}

/// Tiny network (T = 2, fc dims 8, 6x6 image) used by the gradient check.
pub fn grad_check_config() -> AodConfig {
    AodConfig {
        steps: 2,
        num_classes: 2,
        fc6_dim: 8,
        fc7_dim: 8,
        glimpse_embed_dim: 8,
        roi_grid: [2, 2],
        backbone: crate::backbone::BackboneConfig {
            in_channels: 1,
            conv1_channels: 3,
            conv2_channels: 4,
        },
        ..AodConfig::default()
    }
}

/// Finite-difference check of the whole network in `f64`, dropout off and
/// glimpse actions held fixed. The objective is the supervised loss of a
/// foreground and a background sample plus a linear surrogate `sum_t c_t .
/// mu_t` standing in for the policy-gradient signal, so both gradient paths
/// are covered. `corrupt` scales the analytic classifier gradient (negative
/// control).
pub fn network_grad_check(eps: f64, corrupt: bool) -> Result<Vec<GroupCheck>> {
    let cfg = grad_check_config();
    let (h, w) = (6usize, 6usize);
    let pixels: Vec<f64> = (0..h * w).map(|i| ((i * 37 + 11) % 29) as f64 / 29.0).collect();
    let image = Tensor::new(vec![1, h, w], pixels)?;
    let gt = BoundingBox::new(3.0, 3.0, 4.0, 4.0)?;
    let samples = [
        DetectionSample {
            image_id: 0,
            proposal: BoundingBox::new(3.2, 2.9, 3.8, 4.2)?,
            label: Label::Foreground(1),
            bbox_target: None,
            matched_gt: Some(gt),
        },
        DetectionSample {
            image_id: 0,
            proposal: BoundingBox::new(4.5, 4.5, 3.0, 3.0)?,
            label: Label::Background,
            bbox_target: None,
            matched_gt: None,
        },
    ];
    let samples: Vec<DetectionSample> = samples
        .iter()
        .map(|s| {
            let mut s = *s;
            if let Some(g) = s.matched_gt {
                s.bbox_target = Some(encode_glimpse(&g, &s.proposal)?);
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let actions = [GlimpseDelta::new(0.15, -0.1, 0.2, -0.05)];
    let coef = [GlimpseDelta::new(0.7, -0.4, 0.3, 0.9)];

    let base: AodParams<f64> = init_params(&cfg, 5)?;
    // Larger weights than the production init so every path carries signal.
    let mut base = base;
    let mut rng = stream_rng(77, &[]);
    for p in base.all_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
    }

    let objective = |params: &AodParams<f64>, want_grad: bool| -> Result<(f64, Option<AodGrads<f64>>)> {
        let (fm, trace) = extract_features(&image, &cfg.backbone, &params.backbone)?;
        let mut grads = AodGrads::zeros_like(params);
        let mut dfm = vec![0.0; fm.tensor.len()];
        let mut total = 0.0;
        for s in &samples {
            let r = forward_rollout(&fm, (h, w), &s.proposal, params, &cfg, Actions::Fixed(&actions), None)?;
            let (loss, sup) = supervised_loss(&r.output, s)?;
            let mu = r.means();
            total += loss + mu.iter().zip(&coef).map(|(m, c)| dot4(m, c)).sum::<f64>();
            if want_grad {
                backward_rollout(&r, params, &cfg, None, Some(&sup), Some(&coef), &mut grads, &mut dfm)?;
            }
        }
        if want_grad {
            backward_features(&trace, &params.backbone, &dfm, &mut grads.backbone);
            return Ok((total, Some(grads)));
        }
        Ok((total, None))
    };

    let (_, grads) = objective(&base, true)?;
    let mut grads = grads.expect("requested");
    if corrupt {
        grads.cls_w.iter_mut().for_each(|g| *g *= 1.5);
    }
    let names: Vec<String> = base.all().iter().map(|p| p.name.clone()).collect();
    let analytic: Vec<Vec<f64>> = grads.buffers().into_iter().cloned().collect();
    let mut report: Vec<GroupCheck> = ParamGroup::ALL
        .iter()
        .map(|&g| GroupCheck {
            group: g,
            max_rel_error: 0.0,
            entries: 0,
        })
        .collect();
    let mut probe = base.clone();
    for (pi, name) in names.iter().enumerate() {
        let group = ParamGroup::of(name);
        let slot = report.iter_mut().find(|r| r.group == group).expect("known group");
        for j in 0..analytic[pi].len() {
            let orig = probe.all()[pi].value.data()[j];
            probe.all_mut()[pi].value.data_mut()[j] = orig + eps;
            let (plus, _) = objective(&probe, false)?;
            probe.all_mut()[pi].value.data_mut()[j] = orig - eps;
            let (minus, _) = objective(&probe, false)?;
            probe.all_mut()[pi].value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            slot.max_rel_error = slot.max_rel_error.max(relative_error(analytic[pi][j], numeric));
            slot.entries += 1;
        }
    }
    Ok(report)
}

fn dot4(a: &GlimpseDelta, b: &GlimpseDelta) -> f64 {
    a.dx * b.dx + a.dy * b.dy + a.dw * b.dw + a.dh * b.dh
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(cx: f64, cy: f64, s: f64, label: usize) -> GroundTruth {
        GroundTruth {
            bbox: BoundingBox::new(cx, cy, s, s).unwrap(),
            label,
        }
    }

    #[test]
    fn label_examples() {
        let gts = [gt(10.0, 10.0, 10.0, 3)];
        // IoU 0.3 and 0.05 via widths 10 * (1 / 0.3) and 10 * 20
        let props = [
            gts[0].bbox,
            BoundingBox::new(10.0, 10.0, 10.0 / 0.3, 10.0).unwrap(),
            BoundingBox::new(10.0, 10.0, 200.0, 10.0).unwrap(),
        ];
        let s = assign_labels(0, &props, &gts).unwrap();
        assert_eq!(s[0].label, Label::Foreground(3));
        assert_eq!(s[0].bbox_target, Some(GlimpseDelta::ZERO));
        assert_eq!(s[1].label, Label::Background);
        assert_eq!(s[2].label, Label::Ignored);
        assert!(s[1].bbox_target.is_none() && s[1].matched_gt.is_none());
    }

    #[test]
    fn label_ties_pick_the_first_gt() {
        let gts = [gt(10.0, 10.0, 10.0, 1), gt(10.0, 10.0, 10.0, 2)];
        let s = assign_labels(0, &[gts[0].bbox], &gts).unwrap();
        assert_eq!(s[0].label, Label::Foreground(1));
    }

    #[test]
    fn uniform_output_loss_is_ln6() {
        let out = NetworkOutput {
            class_probs: vec![1.0 / 6.0; 6],
            bbox_deltas: vec![GlimpseDelta::ZERO; 5],
        };
        let s = DetectionSample {
            image_id: 0,
            proposal: BoundingBox::new(5.0, 5.0, 4.0, 4.0).unwrap(),
            label: Label::Foreground(2),
            bbox_target: Some(GlimpseDelta::ZERO),
            matched_gt: None,
        };
        let (l, g) = supervised_loss(&out, &s).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-12);
        assert!(g.d_deltas.iter().all(|&v| v == 0.0));

        let bg = DetectionSample {
            label: Label::Background,
            bbox_target: None,
            ..s
        };
        let (l, g) = supervised_loss(&out, &bg).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-12);
        assert!(g.d_deltas.iter().all(|&v| v == 0.0));

        let ign = DetectionSample { label: Label::Ignored, ..s };
        assert!(supervised_loss(&out, &ign).is_err());
    }

    #[test]
    fn step_schedule() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0.01, 0, 100), 0.01);
        assert_eq!(s.lr_at(0.01, 74, 100), 0.01);
        assert!((s.lr_at(0.01, 75, 100) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn default_batch_is_128() {
        assert_eq!(TrainConfig::default().batch_size(), 128);
    }
}
