//! Rewards, baselines and the REINFORCE estimator for the glimpse policy.
//!
//! The policy is `a_t ~ N(mu_t, sigma^2 I)`. For one episode with adjusted
//! return `R`, the ascent direction on each action mean is
//! `R * (a_t - mu_t) / sigma^2`; backpropagating it through
//! `mu_t = Wglimpse[t] x_t` yields the usual `(a_t - mu_t) x_t^T` weight term.

use serde::{Deserialize, Serialize};

use crate::aodnet::{NetworkOutput, Rollout};
use crate::error::{AodError, Result};
use crate::geometry::{decode_glimpse, iou, BoundingBox, GlimpseDelta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Continuous,
    Discrete,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    ReturnNorm,
    MovingAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub n_episodes: usize,
    pub sigma: f64,
    pub return_scale: f64,
    pub reward_kind: RewardKind,
    pub baseline_kind: BaselineKind,
    pub ema_decay: f64,
    pub include_background: bool,
    /// IoU threshold of the discrete reward.
    pub discrete_iou_thresh: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            n_episodes: 8,
            sigma: 0.2,
            return_scale: 0.1,
            reward_kind: RewardKind::Continuous,
            baseline_kind: BaselineKind::ReturnNorm,
            ema_decay: 0.9,
            include_background: false,
            discrete_iou_thresh: 0.5,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_episodes == 0 {
            return Err(AodError::config("RLConfig.n_episodes", "must be >= 1"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(AodError::config("RLConfig.sigma", "must be > 0"));
        }
        if !(self.return_scale >= 0.0 && self.return_scale.is_finite()) {
            return Err(AodError::config("RLConfig.return_scale", "must be >= 0"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(AodError::config("RLConfig.ema_decay", "must be in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.discrete_iou_thresh) {
            return Err(AodError::config("RLConfig.discrete_iou_thresh", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// One noisy rollout of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<R> {
    /// Index of the sample inside its minibatch.
    pub sample: usize,
    pub noise: Vec<GlimpseDelta>,
    pub rollout: Rollout<R>,
    pub raw_return: f64,
    /// Return after baseline adjustment (before `return_scale`).
    pub adjusted_return: f64,
}

fn check_target(
    output: &NetworkOutput,
    true_class: usize,
    gt_box: Option<&BoundingBox>,
    include_background: bool,
) -> Result<Option<BoundingBox>> {
    let bg = output.background();
    if true_class > bg {
        return Err(AodError::Contract(format!("class {true_class} out of range")));
    }
    if true_class == bg {
        if !include_background {
            return Err(AodError::Contract(
                "background samples do not produce episodes unless include_background is set".into(),
            ));
        }
        return Ok(None);
    }
    match gt_box {
        Some(b) => {
            b.validate()?;
            Ok(Some(*b))
        }
        None => Err(AodError::Contract("foreground reward needs a ground-truth box".into())),
    }
}

/// `P(c*) * IoU(decode(deltas[c*], proposal), gt)`. Background samples (only
/// with `include_background`) score `P(background)`, i.e. IoU taken as 1.
pub fn compute_reward(
    output: &NetworkOutput,
    true_class: usize,
    gt_box: Option<&BoundingBox>,
    proposal: &BoundingBox,
    include_background: bool,
) -> Result<f64> {
    let p = output.class_probs[true_class.min(output.background())];
    match check_target(output, true_class, gt_box, include_background)? {
        None => Ok(p),
        Some(gt) => {
            let pred = decode_glimpse(&output.bbox_deltas[true_class], proposal)?;
            Ok(p * iou(&pred, &gt))
        }
    }
}

/// 1 iff the top class is `c*` and the decoded box reaches `iou_thresh`.
pub fn compute_discrete_reward(
    output: &NetworkOutput,
    true_class: usize,
    gt_box: Option<&BoundingBox>,
    proposal: &BoundingBox,
    include_background: bool,
    iou_thresh: f64,
) -> Result<f64> {
    let target = check_target(output, true_class, gt_box, include_background)?;
    if output.argmax_class() != true_class {
        return Ok(0.0);
    }
    match target {
        None => Ok(1.0),
        Some(gt) => {
            let pred = decode_glimpse(&output.bbox_deltas[true_class], proposal)?;
            Ok(if iou(&pred, &gt) >= iou_thresh { 1.0 } else { 0.0 })
        }
    }
}

pub fn episode_reward(
    cfg: &RlConfig,
    output: &NetworkOutput,
    true_class: usize,
    gt_box: Option<&BoundingBox>,
    proposal: &BoundingBox,
) -> Result<f64> {
    match cfg.reward_kind {
        RewardKind::Continuous => compute_reward(output, true_class, gt_box, proposal, cfg.include_background),
        RewardKind::Discrete => compute_discrete_reward(
            output,
            true_class,
            gt_box,
            proposal,
            cfg.include_background,
            cfg.discrete_iou_thresh,
        ),
    }
}

/// Standardizes one sample's returns to mean 0 and population variance 1;
/// all zeros when the variance is below `1e-12`.
pub fn normalize_returns(returns: &[f64]) -> Result<Vec<f64>> {
    if returns.is_empty() {
        return Err(AodError::Empty("returns"));
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    if var < 1e-12 {
        return Ok(vec![0.0; returns.len()]);
    }
    let std = var.sqrt();
    Ok(returns.iter().map(|r| (r - mean) / std).collect())
}

/// `decay * state + (1 - decay) * new_return`
pub fn ema_baseline_update(state: f64, new_return: f64, decay: f64) -> f64 {
    decay * state + (1.0 - decay) * new_return
}

/// Moving-average baseline shared by all samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaBaseline {
    pub value: f64,
    pub decay: f64,
}

impl EmaBaseline {
    pub fn new(decay: f64) -> Self {
        EmaBaseline { value: 0.0, decay }
    }

    /// Returns `r - previous state` and folds `r` into the state.
    pub fn center(&mut self, r: f64) -> f64 {
        let centered = r - self.value;
        self.value = ema_baseline_update(self.value, r, self.decay);
        centered
    }
}

/// Ascent directions on the action means for every episode of one sample:
/// `return_scale * R_i * noise_{i,t} / sigma^2 / n`. `noise[i]` is
/// `a - mu` for episode `i`; `adjusted` holds the baseline-adjusted returns.
pub fn policy_gradient(
    noise: &[Vec<GlimpseDelta>],
    adjusted: &[f64],
    sigma: f64,
    return_scale: f64,
    expected_episodes: usize,
) -> Result<Vec<Vec<GlimpseDelta>>> {
    if noise.len() != expected_episodes || adjusted.len() != expected_episodes {
        return Err(AodError::Contract(format!(
            "expected {expected_episodes} episodes, got {} noise traces and {} returns",
            noise.len(),
            adjusted.len()
        )));
    }
    let n = expected_episodes as f64;
    let inv_var = 1.0 / (sigma * sigma);
    Ok(noise
        .iter()
        .zip(adjusted)
        .map(|(steps, &r)| {
            let w = return_scale * r * inv_var / n;
            steps
                .iter()
                .map(|d| GlimpseDelta::from_array(d.to_array().map(|v| w * v)))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn output(probs: &[f64], deltas: Vec<GlimpseDelta>) -> NetworkOutput {
        NetworkOutput {
            class_probs: probs.to_vec(),
            bbox_deltas: deltas,
        }
    }

    #[test]
    fn reward_examples() {
        let prop = BoundingBox::new(10.0, 10.0, 10.0, 10.0).unwrap();
        let gt = prop;
        let o = output(&[1.0, 0.0, 0.0], vec![GlimpseDelta::ZERO; 2]);
        assert_eq!(compute_reward(&o, 0, Some(&gt), &prop, false).unwrap(), 1.0);

        // predicted box covers the left half of the gt -> IoU 0.5
        let half = GlimpseDelta::new(-0.25, 0.0, 0.5f64.ln(), 0.0);
        let o = output(&[0.8, 0.1, 0.1], vec![half, GlimpseDelta::ZERO]);
        let r = compute_reward(&o, 0, Some(&gt), &prop, false).unwrap();
        assert!((r - 0.4).abs() < 1e-12, "{r}");

        let far = GlimpseDelta::new(5.0, 0.0, 0.0, 0.0);
        let o = output(&[0.8, 0.1, 0.1], vec![far, GlimpseDelta::ZERO]);
        assert_eq!(compute_reward(&o, 0, Some(&gt), &prop, false).unwrap(), 0.0);
    }

    #[test]
    fn background_rewards_need_the_flag() {
        let prop = BoundingBox::new(10.0, 10.0, 10.0, 10.0).unwrap();
        let o = output(&[0.2, 0.1, 0.7], vec![GlimpseDelta::ZERO; 2]);
        assert!(matches!(compute_reward(&o, 2, None, &prop, false), Err(AodError::Contract(_))));
        assert_eq!(compute_reward(&o, 2, None, &prop, true).unwrap(), 0.7);
        assert_eq!(compute_discrete_reward(&o, 2, None, &prop, true, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn discrete_reward_rule_table() {
        let prop = BoundingBox::new(10.0, 10.0, 10.0, 10.0).unwrap();
        let gt = prop;
        // IoU 0.6: shrink width to 0.6
        let d06 = GlimpseDelta::new(0.0, 0.0, 0.6f64.ln(), 0.0);
        let d04 = GlimpseDelta::new(0.0, 0.0, 0.4f64.ln(), 0.0);
        let right = [0.7, 0.2, 0.1];
        let wrong = [0.2, 0.7, 0.1];
        let cases = [
            (right, d06, 1.0),
            (right, d04, 0.0),
            (wrong, GlimpseDelta::ZERO, 0.0),
        ];
        for (probs, d, want) in cases {
            let o = output(&probs, vec![d, d]);
            assert_eq!(compute_discrete_reward(&o, 0, Some(&gt), &prop, false, 0.5).unwrap(), want);
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_returns(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(normalize_returns(&[3.0, 3.0, 3.0]).unwrap(), vec![0.0; 3]);
        let got = normalize_returns(&[2.0, 4.0, 6.0, 8.0]).unwrap();
        let s5 = 5f64.sqrt();
        for (g, w) in got.iter().zip([-3.0 / s5, -1.0 / s5, 1.0 / s5, 3.0 / s5]) {
            assert!((g - w).abs() < 1e-15);
        }
        assert!(matches!(normalize_returns(&[]), Err(AodError::Empty(_))));
    }

    #[test]
    fn ema_examples() {
        assert!((ema_baseline_update(0.0, 1.0, 0.9) - 0.1).abs() < 1e-15);
        let s1 = ema_baseline_update(0.0, 1.0, 0.5);
        let s2 = ema_baseline_update(s1, 0.0, 0.5);
        assert_eq!((s1, s2), (0.5, 0.25));
        let mut s = 0.0;
        for _ in 0..400 {
            s = ema_baseline_update(s, 0.7, 0.9);
        }
        assert!((s - 0.7).abs() < 1e-12);
        let mut b = EmaBaseline::new(0.5);
        assert_eq!(b.center(1.0), 1.0);
        assert_eq!(b.center(0.0), -0.5);
    }

    #[test]
    fn policy_gradient_examples() {
        let g = policy_gradient(&vec![vec![GlimpseDelta::ZERO; 2]; 3], &[1.0, -1.0, 0.5], 0.2, 0.1, 3).unwrap();
        assert!(g.iter().flatten().all(|d| d.norm() == 0.0));

        let g = policy_gradient(&[vec![GlimpseDelta::new(0.2, -0.2, 0.0, 0.0)]], &[1.0], 0.2, 1.0, 1).unwrap();
        let d = g[0][0];
        assert!((d.dx - 5.0).abs() < 1e-12 && (d.dy + 5.0).abs() < 1e-12);
        assert_eq!((d.dw, d.dh), (0.0, 0.0));

        assert!(matches!(policy_gradient(&[], &[], 0.2, 0.1, 8), Err(AodError::Contract(_))));
    }

    #[test]
    fn policy_gradient_is_linear_in_returns() {
        let noise = vec![vec![GlimpseDelta::new(0.1, 0.3, -0.2, 0.05)], vec![GlimpseDelta::new(-0.4, 0.1, 0.0, 0.2)]];
        let a = policy_gradient(&noise, &[1.0, 2.0], 0.2, 0.1, 2).unwrap();
        let b = policy_gradient(&noise, &[-0.5, 3.0], 0.2, 0.1, 2).unwrap();
        let ab = policy_gradient(&noise, &[0.5, 5.0], 0.2, 0.1, 2).unwrap();
        for i in 0..2 {
            let sum = a[i][0] + b[i][0];
            assert!((sum - ab[i][0]).norm() < 1e-12);
        }
    }
}
