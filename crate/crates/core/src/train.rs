//! Optimizer, training loop, and the synthetic adversarial evaluations.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::PreferenceRecord;
use crate::error::{Error, Result};
use crate::losses::{total_loss_with, LossConfig, LossLogEntry, LossWeights};
use crate::policy::{checksum, freeze_reference, sequence_log_prob, ParamGrad, PolicyParams};
use crate::rng::{derive_seed, rng_from};
use crate::video::{extract_range, featurize_video, remove_object_everywhere, SyntheticVideo};

/// Adam moment hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ParamGrad,
    v: ParamGrad,
    t: u64,
}

impl AdamState {
    pub fn new(params: &PolicyParams) -> Self {
        Self {
            m: ParamGrad::zeros_like(params),
            v: ParamGrad::zeros_like(params),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected adaptive-moment descent step on `loss_grad`.
pub fn adam_step(
    params: &mut PolicyParams,
    grad: &ParamGrad,
    state: &mut AdamState,
    learning_rate: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.frozen {
        return Err(Error::Contract(
            "optimizer steps on frozen parameters are forbidden".into(),
        ));
    }
    if grad.param_count() != params.param_count() {
        return Err(Error::Config("gradient/parameter shape mismatch".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.param_count() {
        let g = grad.get_flat(i);
        let m = cfg.beta1 * state.m.get_flat(i) + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v.get_flat(i) + (1.0 - cfg.beta2) * g * g;
        state.m.set_flat(i, m);
        state.v.set_flat(i, v);
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        let update = learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        params.set_flat(i, params.get_flat(i) - update);
    }
    Ok(())
}

/// Hyperparameters reported for full-scale models. Both stall or underfit
/// the toy policy and are kept selectable only for completeness; the toy
/// defaults below converge at desk scale.
pub const REFERENCE_MODEL_LEARNING_RATE: f64 = 5e-7;
pub const REFERENCE_MODEL_EPOCHS: usize = 3;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub loss_config: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 5,
            batch_size: 8,
            seed: 0,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            loss_config: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub log: Vec<LossLogEntry>,
    /// Corpus-mean preference margin after each epoch.
    pub epoch_mean_margin: Vec<f64>,
}

/// Minimizes the total loss over the corpus. The reference policy is a frozen
/// copy of `init`; its checksum is asserted unchanged at the end. The shuffle
/// schedule is a pure function of the seed, so runs are bit-reproducible.
pub fn train_loop(
    corpus: &[PreferenceRecord],
    init: &PolicyParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    let mut theta = init.clone();
    theta.frozen = false;
    let reference = freeze_reference(init);
    let ref_checksum = checksum(&reference);

    let mut state = AdamState::new(&theta);
    let mut log = Vec::new();
    let mut epoch_mean_margin = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = rng_from(derive_seed(cfg.seed, 0x5805, epoch as u64));
        order.shuffle(&mut rng);

        for batch in order.chunks(cfg.batch_size) {
            let mut grad = ParamGrad::zeros_like(&theta);
            let mut sums = [0.0f64; 6];
            for &idx in batch {
                let b = total_loss_with(
                    &theta,
                    &reference,
                    &corpus[idx],
                    &cfg.weights,
                    &cfg.loss_config,
                )?;
                if !b.l_total.is_finite() {
                    return Err(Error::NonFinite { step });
                }
                grad.scaled_add(1.0, &b.grad);
                for (s, v) in sums.iter_mut().zip([
                    b.l_response,
                    b.l_video,
                    b.l_clip,
                    b.l_object,
                    b.l_token,
                    b.l_total,
                ]) {
                    *s += v;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.scale(inv);
            adam_step(&mut theta, &grad, &mut state, cfg.learning_rate, &cfg.adam)?;
            log.push(LossLogEntry {
                step,
                l_response: sums[0] * inv,
                l_video: sums[1] * inv,
                l_clip: sums[2] * inv,
                l_object: sums[3] * inv,
                l_token: sums[4] * inv,
                l_total: sums[5] * inv,
            });
            step += 1;
        }
        epoch_mean_margin.push(mean_margin(&theta, corpus)?);
    }

    if checksum(&reference) != ref_checksum {
        return Err(Error::Contract(
            "frozen reference parameters changed during training".into(),
        ));
    }
    Ok(TrainOutcome {
        params: theta,
        log,
        epoch_mean_margin,
    })
}

fn mean_margin(params: &PolicyParams, corpus: &[PreferenceRecord]) -> Result<f64> {
    let mut total = 0.0;
    for rec in corpus {
        let v = featurize_video(&rec.video_pair.chosen).pooled;
        let lp_w = sequence_log_prob(params, &v, &rec.prompt, &rec.chosen)?;
        let lp_l = sequence_log_prob(params, &v, &rec.prompt, &rec.rejected_relevant)?;
        total += lp_w - lp_l;
    }
    Ok(total / corpus.len() as f64)
}

// --- evaluation -------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdversarialSummary {
    pub temporal_reverse_acc: f64,
    pub spatial_mask_acc: f64,
    pub token_swap_acc: f64,
}

/// Full evaluation document; serializes to a single JSON object.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub preference_accuracy: f64,
    pub mean_margin: f64,
    pub per_category: BTreeMap<String, f64>,
    pub adversarial: AdversarialSummary,
    pub loglik_shift: f64,
}

#[derive(Debug, Clone)]
pub struct PreferenceEvalOutcome {
    pub accuracy: f64,
    pub mean_margin: f64,
    pub per_category: BTreeMap<String, f64>,
}

/// Fraction of records whose chosen response outscores both rejections under
/// the chosen video. Ties count as failures.
pub fn eval_preference_accuracy(
    params: &PolicyParams,
    corpus: &[PreferenceRecord],
) -> Result<PreferenceEvalOutcome> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("evaluation corpus is empty".into()));
    }
    let mut correct = 0usize;
    let mut margin_sum = 0.0;
    let mut per_cat: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for rec in corpus {
        let v = featurize_video(&rec.video_pair.chosen).pooled;
        let lp_w = sequence_log_prob(params, &v, &rec.prompt, &rec.chosen)?;
        let lp_re = sequence_log_prob(params, &v, &rec.prompt, &rec.rejected_relevant)?;
        let lp_ir = sequence_log_prob(params, &v, &rec.prompt, &rec.rejected_irrelevant)?;
        let ok = lp_w > lp_re.max(lp_ir);
        margin_sum += lp_w - lp_re;
        let entry = per_cat
            .entry(rec.category.name().to_string())
            .or_insert((0, 0));
        entry.1 += 1;
        if ok {
            entry.0 += 1;
            correct += 1;
        }
    }
    Ok(PreferenceEvalOutcome {
        accuracy: correct as f64 / corpus.len() as f64,
        mean_margin: margin_sum / corpus.len() as f64,
        per_category: per_cat
            .into_iter()
            .map(|(k, (c, n))| (k, c as f64 / n as f64))
            .collect(),
    })
}

/// Margin of the chosen text over the relevant rejection when the policy is
/// conditioned on the temporal-evidence clip.
///
/// `reversed = false` scores the annotated event clip of the original video.
/// `reversed = true` scores the reversed video: order-dependent records keep
/// the *positional* window (the question points at a position in time, and
/// reversal moves different content into it), while order-insensitive
/// records remap the window so it tracks the same content — for them the
/// score is identical either way.
pub fn clip_conditioned_margin(
    params: &PolicyParams,
    rec: &PreferenceRecord,
    reversed: bool,
) -> Result<f64> {
    let (s, e) = rec.event_segment;
    let video = &rec.video_pair.chosen;
    let clip = if !reversed {
        extract_range(video, s, e)?
    } else {
        let rev = crate::negatives::reverse_frames(video);
        if rec.category.order_dependent() {
            extract_range(&rev, s, e)?
        } else {
            let t = video.frames.len();
            extract_range(&rev, t - 1 - e, t - 1 - s)?
        }
    };
    let v = featurize_video(&clip).pooled;
    let lp_w = sequence_log_prob(params, &v, &rec.prompt, &rec.chosen)?;
    let lp_re = sequence_log_prob(params, &v, &rec.prompt, &rec.rejected_relevant)?;
    Ok(lp_w - lp_re)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalAdversarialOutcome {
    pub original_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub accuracy_drop: f64,
    pub evaluated: usize,
}

/// Reverses every order-dependent record's video, swaps the order answers to
/// match the reversed timeline, and reports the accuracy drop against the
/// original orientation. Scoring is clip-conditioned: pooled whole-video
/// features are frame-order invariant and cannot see the reversal at all.
pub fn eval_temporal_adversarial(
    params: &PolicyParams,
    corpus: &[PreferenceRecord],
) -> Result<TemporalAdversarialOutcome> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("evaluation corpus is empty".into()));
    }
    let mut orig_correct = 0usize;
    let mut adv_correct = 0usize;
    let mut n = 0usize;
    for rec in corpus.iter().filter(|r| r.category.order_dependent()) {
        n += 1;
        if clip_conditioned_margin(params, rec, false)? > 0.0 {
            orig_correct += 1;
        }
        // On the reversed timeline the relevant rejection is the truthful
        // answer, so correctness flips sign.
        if clip_conditioned_margin(params, rec, true)? < 0.0 {
            adv_correct += 1;
        }
    }
    if n == 0 {
        return Ok(TemporalAdversarialOutcome {
            original_accuracy: 0.0,
            adversarial_accuracy: 0.0,
            accuracy_drop: 0.0,
            evaluated: 0,
        });
    }
    let original_accuracy = orig_correct as f64 / n as f64;
    let adversarial_accuracy = adv_correct as f64 / n as f64;
    Ok(TemporalAdversarialOutcome {
        original_accuracy,
        adversarial_accuracy,
        accuracy_drop: original_accuracy - adversarial_accuracy,
        evaluated: n,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialAdversarialOutcome {
    pub masked_accuracy: f64,
    /// Mean drop in log-likelihood of the chosen response when the key
    /// object is masked out of every frame. Larger means the preference is
    /// more strongly grounded in the visual evidence.
    pub loglik_shift: f64,
}

fn masked_video(rec: &PreferenceRecord) -> Result<SyntheticVideo> {
    remove_object_everywhere(&rec.video_pair.chosen, rec.key_object_id)
}

/// Masks each record's key object out of the whole video and measures both
/// the surviving preference accuracy and the log-likelihood shift of the
/// chosen response.
pub fn eval_spatial_adversarial(
    params: &PolicyParams,
    corpus: &[PreferenceRecord],
) -> Result<SpatialAdversarialOutcome> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("evaluation corpus is empty".into()));
    }
    let mut correct = 0usize;
    let mut shift_sum = 0.0;
    for rec in corpus {
        let v_orig = featurize_video(&rec.video_pair.chosen).pooled;
        let masked = masked_video(rec)?;
        let v_mask = featurize_video(&masked).pooled;
        let lp_orig = sequence_log_prob(params, &v_orig, &rec.prompt, &rec.chosen)?;
        let lp_mask = sequence_log_prob(params, &v_mask, &rec.prompt, &rec.chosen)?;
        shift_sum += lp_orig - lp_mask;
        let lp_re = sequence_log_prob(params, &v_mask, &rec.prompt, &rec.rejected_relevant)?;
        let lp_ir = sequence_log_prob(params, &v_mask, &rec.prompt, &rec.rejected_irrelevant)?;
        if lp_mask > lp_re.max(lp_ir) {
            correct += 1;
        }
    }
    Ok(SpatialAdversarialOutcome {
        masked_accuracy: correct as f64 / corpus.len() as f64,
        loglik_shift: shift_sum / corpus.len() as f64,
    })
}

/// Log-likelihood shift of a single record under an arbitrary object mask.
/// Exposed for the constructed-record checks (masking an object that never
/// contributes features must shift nothing).
pub fn single_record_shift(
    params: &PolicyParams,
    rec: &PreferenceRecord,
    object_id: u32,
) -> Result<f64> {
    let v_orig = featurize_video(&rec.video_pair.chosen).pooled;
    let masked = remove_object_everywhere(&rec.video_pair.chosen, object_id)?;
    let v_mask = featurize_video(&masked).pooled;
    let lp_orig = sequence_log_prob(params, &v_orig, &rec.prompt, &rec.chosen)?;
    let lp_mask = sequence_log_prob(params, &v_mask, &rec.prompt, &rec.chosen)?;
    Ok(lp_orig - lp_mask)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenAdversarialOutcome {
    pub accuracy: f64,
    pub evaluated: usize,
}

/// Accuracy of preferring the chosen response over its one-token-edited
/// variant (the relevant rejection, on records where it is a single-token
/// substitution of the chosen text). Ties count as failures.
pub fn eval_token_adversarial(
    params: &PolicyParams,
    corpus: &[PreferenceRecord],
) -> Result<TokenAdversarialOutcome> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("evaluation corpus is empty".into()));
    }
    let mut correct = 0usize;
    let mut n = 0usize;
    for rec in corpus {
        let (c, r) = (rec.chosen.tokens(), rec.rejected_relevant.tokens());
        if c.len() != r.len() {
            continue;
        }
        let diffs = c.iter().zip(r).filter(|(a, b)| a != b).count();
        if diffs != 1 {
            continue;
        }
        n += 1;
        let v = featurize_video(&rec.video_pair.chosen).pooled;
        let lp_w = sequence_log_prob(params, &v, &rec.prompt, &rec.chosen)?;
        let lp_e = sequence_log_prob(params, &v, &rec.prompt, &rec.rejected_relevant)?;
        if lp_w > lp_e {
            correct += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput(
            "no single-token-edit records in the corpus".into(),
        ));
    }
    Ok(TokenAdversarialOutcome {
        accuracy: correct as f64 / n as f64,
        evaluated: n,
    })
}

/// Composes every evaluation into a single report.
pub fn evaluate(params: &PolicyParams, corpus: &[PreferenceRecord]) -> Result<EvalReport> {
    let pref = eval_preference_accuracy(params, corpus)?;
    let temporal = eval_temporal_adversarial(params, corpus)?;
    let spatial = eval_spatial_adversarial(params, corpus)?;
    let token = eval_token_adversarial(params, corpus)?;
    Ok(EvalReport {
        preference_accuracy: pref.accuracy,
        mean_margin: pref.mean_margin,
        per_category: pref.per_category,
        adversarial: AdversarialSummary {
            temporal_reverse_acc: temporal.adversarial_accuracy,
            spatial_mask_acc: spatial.masked_accuracy,
            token_swap_acc: token.accuracy,
        },
        loglik_shift: spatial.loglik_shift,
    })
}
