//! Preference-optimization loss terms and the weighted total, with analytic
//! gradients assembled from the policy gradients.
//!
//! Every sigmoid-based term has the shape `-ln sigma(u)` where `u` is a
//! difference of scaled log-probability ratios against a frozen reference
//! policy:
//!
//! ```text
//! response:  u_r = b*lr(y_w|v,x) - [b_re*b*lr(y_re|v,x) + b_ir*b*lr(y_ir|v,x)]
//! video:     u_v = b*lr(y_w|v_w,x) - b*lr(y_l|v_l,x)
//! clip:      u_c = b*lr(y_w|v_w_c,x) - b*lr(y_w|v_l_c,x)
//! object:    u_o = b*lr(y_w|v_w_f,x) - b*lr(y_w|v_l_f,x)
//! ```
//!
//! with `lr(y|v,x) = log pi_theta(y|v,x) - log pi_ref(y|v,x)`. The token term
//! is a difference of sequential KL divergences in which the chosen-sequence
//! KL is wrapped in a stop-gradient: it contributes value but no gradient.
//!
//! The total is
//!
//! ```text
//! L = L_video + L_response + lambda*L_clip + mu*L_object + rho*L_token
//! ```

use serde::{Deserialize, Serialize};

use crate::data::PreferenceRecord;
use crate::error::{Error, Result};
use crate::policy::{
    accumulate_logit_grads, accumulate_sequence_log_prob_grad, sequence_log_prob,
    step_log_probs_along, ParamGrad, PolicyParams, TokenSeq,
};
use crate::video::featurize_video;

/// Every scalar hyperparameter of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Ratio temperature.
    pub beta: f64,
    /// Weight of the relevant rejected response inside the response term.
    pub beta_re: f64,
    /// Weight of the irrelevant rejected response inside the response term.
    pub beta_ir: f64,
    /// Clip-term weight.
    pub lambda_c: f64,
    /// Object-term weight.
    pub mu_o: f64,
    /// Token-term weight.
    pub rho_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.1,
            beta_re: 0.7,
            beta_ir: 0.3,
            lambda_c: 0.4,
            mu_o: 0.2,
            rho_t: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.beta,
            self.beta_re,
            self.beta_ir,
            self.lambda_c,
            self.mu_o,
            self.rho_t,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Which rejected response feeds the video-level and token-level terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectedKind {
    Relevant,
    Irrelevant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossConfig {
    pub video_rejected: RejectedKind,
    pub token_rejected: RejectedKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            video_rejected: RejectedKind::Relevant,
            token_rejected: RejectedKind::Relevant,
        }
    }
}

/// Numerically stable sigmoid.
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `-ln sigma(u)`, computed as `softplus(-u)` so large |u| cannot overflow.
pub fn dpo_term(u: f64) -> f64 {
    // softplus(z) = max(z, 0) + ln(1 + exp(-|z|)) with z = -u
    let z = -u;
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// log pi_theta(y|v,x) - log pi_ref(y|v,x)
pub fn log_ratio(
    theta: &PolicyParams,
    reference: &PolicyParams,
    visual: &[f64],
    x: &TokenSeq,
    y: &TokenSeq,
) -> Result<f64> {
    Ok(sequence_log_prob(theta, visual, x, y)? - sequence_log_prob(reference, visual, x, y)?)
}

/// Per-term values plus the gradient accumulated over all terms.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub l_response: f64,
    pub l_video: f64,
    pub l_clip: f64,
    pub l_object: f64,
    pub l_token: f64,
    pub l_total: f64,
    pub grad: ParamGrad,
}

impl LossBreakdown {
    /// The recombination identity the breakdown must satisfy.
    pub fn recombination_residual(&self, w: &LossWeights) -> f64 {
        let recombined = self.l_video
            + self.l_response
            + w.lambda_c * self.l_clip
            + w.mu_o * self.l_object
            + w.rho_t * self.l_token;
        (self.l_total - recombined).abs()
    }
}

/// One serialized log line per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLogEntry {
    pub step: usize,
    pub l_response: f64,
    pub l_video: f64,
    pub l_clip: f64,
    pub l_object: f64,
    pub l_token: f64,
    pub l_total: f64,
}

fn pooled(video: &crate::video::SyntheticVideo) -> Vec<f64> {
    featurize_video(video).pooled
}

fn rejected_seq(rec: &PreferenceRecord, kind: RejectedKind) -> &TokenSeq {
    match kind {
        RejectedKind::Relevant => &rec.rejected_relevant,
        RejectedKind::Irrelevant => &rec.rejected_irrelevant,
    }
}

// --- response level -----------------------------------------------------------

/// The response-term argument with both rejected responses folded in.
pub fn response_u(
    theta: &PolicyParams,
    reference: &PolicyParams,
    rec: &PreferenceRecord,
    w: &LossWeights,
) -> Result<f64> {
    let v = pooled(&rec.video_pair.chosen);
    let lr_w = log_ratio(theta, reference, &v, &rec.prompt, &rec.chosen)?;
    let lr_re = log_ratio(theta, reference, &v, &rec.prompt, &rec.rejected_relevant)?;
    let lr_ir = log_ratio(theta, reference, &v, &rec.prompt, &rec.rejected_irrelevant)?;
    Ok(w.beta * lr_w - (w.beta_re * w.beta * lr_re + w.beta_ir * w.beta * lr_ir))
}

/// `-ln sigma(u_r)`. With `grad`, accumulates `grad_scale` times the term's
/// gradient with respect to `theta`.
pub fn response_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    rec: &PreferenceRecord,
    w: &LossWeights,
    grad_scale: f64,
    grad: Option<&mut ParamGrad>,
) -> Result<f64> {
    let u = response_u(theta, reference, rec, w)?;
    if let Some(grad) = grad {
        // d(-ln sigma(u))/du = sigma(u) - 1
        let du = grad_scale * (sigmoid(u) - 1.0);
        let v = pooled(&rec.video_pair.chosen);
        accumulate_sequence_log_prob_grad(theta, &v, &rec.prompt, &rec.chosen, du * w.beta, grad)?;
        accumulate_sequence_log_prob_grad(
            theta,
            &v,
            &rec.prompt,
            &rec.rejected_relevant,
            -du * w.beta_re * w.beta,
            grad,
        )?;
        accumulate_sequence_log_prob_grad(
            theta,
            &v,
            &rec.prompt,
            &rec.rejected_irrelevant,
            -du * w.beta_ir * w.beta,
            grad,
        )?;
    }
    Ok(dpo_term(u))
}

// --- paired-visual levels -------------------------------------------------------

/// The shared two-sided argument: `b*lr(y_chosen|v_w,x) - b*lr(y_rej|v_l,x)`.
#[allow(clippy::too_many_arguments)]
pub fn pair_u(
    theta: &PolicyParams,
    reference: &PolicyParams,
    v_w: &[f64],
    v_l: &[f64],
    x: &TokenSeq,
    y_chosen: &TokenSeq,
    y_rejected: &TokenSeq,
    beta: f64,
) -> Result<f64> {
    let lr_w = log_ratio(theta, reference, v_w, x, y_chosen)?;
    let lr_l = log_ratio(theta, reference, v_l, x, y_rejected)?;
    Ok(beta * (lr_w - lr_l))
}

#[allow(clippy::too_many_arguments)]
fn pair_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    v_w: &[f64],
    v_l: &[f64],
    x: &TokenSeq,
    y_chosen: &TokenSeq,
    y_rejected: &TokenSeq,
    beta: f64,
    grad_scale: f64,
    grad: Option<&mut ParamGrad>,
) -> Result<f64> {
    let u = pair_u(theta, reference, v_w, v_l, x, y_chosen, y_rejected, beta)?;
    if let Some(grad) = grad {
        let du = grad_scale * (sigmoid(u) - 1.0);
        accumulate_sequence_log_prob_grad(theta, v_w, x, y_chosen, du * beta, grad)?;
        accumulate_sequence_log_prob_grad(theta, v_l, x, y_rejected, -du * beta, grad)?;
    }
    Ok(dpo_term(u))
}

/// Video-level term: chosen response under the chosen video against the
/// rejected response under the rejected video.
pub fn video_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    rec: &PreferenceRecord,
    w: &LossWeights,
    cfg: &LossConfig,
    grad_scale: f64,
    grad: Option<&mut ParamGrad>,
) -> Result<f64> {
    pair_loss(
        theta,
        reference,
        &pooled(&rec.video_pair.chosen),
        &pooled(&rec.video_pair.rejected),
        &rec.prompt,
        &rec.chosen,
        rejected_seq(rec, cfg.video_rejected),
        w.beta,
        grad_scale,
        grad,
    )
}

/// Clip-level term: visual contrast only, the chosen response on both sides.
pub fn clip_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    rec: &PreferenceRecord,
    w: &LossWeights,
    grad_scale: f64,
    grad: Option<&mut ParamGrad>,
) -> Result<f64> {
    pair_loss(
        theta,
        reference,
        &pooled(&rec.clip_pair.chosen),
        &pooled(&rec.clip_pair.rejected),
        &rec.prompt,
        &rec.chosen,
        &rec.chosen,
        w.beta,
        grad_scale,
        grad,
    )
}

/// Object-level term: keyframe against its masked/perturbed variant, the
/// chosen response on both sides.
pub fn object_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    rec: &PreferenceRecord,
    w: &LossWeights,
    grad_scale: f64,
    grad: Option<&mut ParamGrad>,
) -> Result<f64> {
    pair_loss(
        theta,
        reference,
        &pooled(&rec.frame_pair.chosen),
        &pooled(&rec.frame_pair.rejected),
        &rec.prompt,
        &rec.chosen,
        &rec.chosen,
        w.beta,
        grad_scale,
        grad,
    )
}

// --- token level -----------------------------------------------------------------

/// Sequential KL: the sum over response positions of the full-vocabulary KL
/// between the reference and target next-token distributions.
pub fn seq_kl(
    reference: &PolicyParams,
    theta: &PolicyParams,
    visual: &[f64],
    x: &TokenSeq,
    y: &TokenSeq,
) -> Result<f64> {
    seq_kl_impl(reference, theta, visual, x, y, 0.0, None)
}

/// Like [`seq_kl`] but also accumulates `grad_scale * d KL / d theta`.
fn seq_kl_impl(
    reference: &PolicyParams,
    theta: &PolicyParams,
    visual: &[f64],
    x: &TokenSeq,
    y: &TokenSeq,
    grad_scale: f64,
    grad: Option<&mut ParamGrad>,
) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InvalidInput("empty response".into()));
    }
    // Work from log-probabilities: they stay finite at any parameter scale,
    // while exp-then-ln would round tiny probabilities to zero and blow the
    // divergence up to infinity.
    let lp_ref = step_log_probs_along(reference, visual, x, y)?;
    let lp_theta = step_log_probs_along(theta, visual, x, y)?;
    let mut total = 0.0;
    for (lr, lt) in lp_ref.iter().zip(&lp_theta) {
        for (a, b) in lr.iter().zip(lt) {
            total += a.exp() * (a - b);
        }
    }
    if let Some(grad) = grad {
        // d KL(p_ref || p_theta) / d logits_theta = p_theta - p_ref
        let deltas: Vec<Vec<f64>> = lp_theta
            .iter()
            .zip(&lp_ref)
            .map(|(lt, lr)| lt.iter().zip(lr).map(|(t, r)| t.exp() - r.exp()).collect())
            .collect();
        accumulate_logit_grads(theta, visual, x, y, &deltas, grad_scale, grad)?;
    }
    Ok(total)
}

/// Token-level term: `b*KL(y_w) - b*KL(y_l)` conditioned on the chosen
/// keyframe, with the chosen-sequence KL under stop-gradient. Only the
/// rejected-sequence KL contributes to the gradient.
pub fn token_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    rec: &PreferenceRecord,
    w: &LossWeights,
    cfg: &LossConfig,
    grad_scale: f64,
    grad: Option<&mut ParamGrad>,
) -> Result<f64> {
    let v = pooled(&rec.frame_pair.chosen);
    let y_l = rejected_seq(rec, cfg.token_rejected);
    let kl_w = seq_kl(reference, theta, &v, &rec.prompt, &rec.chosen)?;
    let kl_l = seq_kl_impl(
        reference,
        theta,
        &v,
        &rec.prompt,
        y_l,
        -grad_scale * w.beta,
        grad,
    )?;
    Ok(w.beta * kl_w - w.beta * kl_l)
}

/// Token-level objective in its combined form: the response margin and the
/// KL difference inside one sigmoid,
/// `-ln sigma(u_single - alpha*(KL(y_w) - sg(KL(y_l))))`,
/// with `u_single` the single-rejection response argument conditioned on the
/// chosen keyframe. Value only; it is not part of the weighted total.
#[allow(clippy::too_many_arguments)]
pub fn tlpo_combined(
    theta: &PolicyParams,
    reference: &PolicyParams,
    rec: &PreferenceRecord,
    w: &LossWeights,
    alpha: f64,
) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::Config("alpha must be >= 0".into()));
    }
    let v = pooled(&rec.frame_pair.chosen);
    let u_single = pair_u(
        theta,
        reference,
        &v,
        &v,
        &rec.prompt,
        &rec.chosen,
        &rec.rejected_relevant,
        w.beta,
    )?;
    let kl_w = seq_kl(reference, theta, &v, &rec.prompt, &rec.chosen)?;
    let kl_l = seq_kl(reference, theta, &v, &rec.prompt, &rec.rejected_relevant)?;
    Ok(dpo_term(u_single - alpha * (kl_w - kl_l)))
}

// --- total --------------------------------------------------------------------

/// All five terms and the weighted total, with gradients accumulated into one
/// gradient object.
pub fn total_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    rec: &PreferenceRecord,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    total_loss_with(theta, reference, rec, w, &LossConfig::default())
}

pub fn total_loss_with(
    theta: &PolicyParams,
    reference: &PolicyParams,
    rec: &PreferenceRecord,
    w: &LossWeights,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    w.validate()?;
    let mut grad = ParamGrad::zeros_like(theta);
    let l_response = response_loss(theta, reference, rec, w, 1.0, Some(&mut grad))?;
    let l_video = video_loss(theta, reference, rec, w, cfg, 1.0, Some(&mut grad))?;
    let l_clip = clip_loss(theta, reference, rec, w, w.lambda_c, Some(&mut grad))?;
    let l_object = object_loss(theta, reference, rec, w, w.mu_o, Some(&mut grad))?;
    let l_token = token_loss(theta, reference, rec, w, cfg, w.rho_t, Some(&mut grad))?;
    let l_total =
        l_video + l_response + w.lambda_c * l_clip + w.mu_o * l_object + w.rho_t * l_token;
    Ok(LossBreakdown {
        l_response,
        l_video,
        l_clip,
        l_object,
        l_token,
        l_total,
        grad,
    })
}

/// Total-loss value with the stop-gradient KL term held at a caller-supplied
/// constant. This is the function finite differences must probe: the
/// chosen-sequence KL contributes no gradient, so the probe must not see its
/// variation either.
pub fn total_loss_value_sg_frozen(
    theta: &PolicyParams,
    reference: &PolicyParams,
    rec: &PreferenceRecord,
    w: &LossWeights,
    cfg: &LossConfig,
    frozen_chosen_kl: f64,
) -> Result<f64> {
    let l_response = response_loss(theta, reference, rec, w, 0.0, None)?;
    let l_video = video_loss(theta, reference, rec, w, cfg, 0.0, None)?;
    let l_clip = clip_loss(theta, reference, rec, w, 0.0, None)?;
    let l_object = object_loss(theta, reference, rec, w, 0.0, None)?;
    let v = pooled(&rec.frame_pair.chosen);
    let kl_l = seq_kl(
        reference,
        theta,
        &v,
        &rec.prompt,
        rejected_seq(rec, cfg.token_rejected),
    )?;
    let l_token = w.beta * frozen_chosen_kl - w.beta * kl_l;
    Ok(l_video + l_response + w.lambda_c * l_clip + w.mu_o * l_object + w.rho_t * l_token)
}

/// The chosen-sequence KL that [`total_loss_value_sg_frozen`] freezes.
pub fn chosen_seq_kl(
    theta: &PolicyParams,
    reference: &PolicyParams,
    rec: &PreferenceRecord,
) -> Result<f64> {
    let v = pooled(&rec.frame_pair.chosen);
    seq_kl(reference, theta, &v, &rec.prompt, &rec.chosen)
}
