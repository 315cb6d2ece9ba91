//! Independent brute-force checkers used by tests: finite-difference
//! gradients, Bradley-Terry probabilities, normalization sweeps, and raw
//! reassembly of every sigmoid argument from plain sequence log-probs.
//!
//! Everything here depends only on policy evaluation and deliberately
//! reimplements the arithmetic it checks (plain exp/sum softmax, explicit
//! chain products) rather than calling into the loss code.

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::policy::{ParamGrad, PolicyParams, StepContext, TokenSeq};

/// Central finite differences configuration.
#[derive(Debug, Clone, Copy)]
pub struct FDConfig {
    pub epsilon: f64,
}

impl Default for FDConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5 }
    }
}

/// Central finite differences of `loss_fn` with respect to every parameter
/// entry. `loss_fn` must be deterministic.
pub fn finite_diff_grad<F>(loss_fn: F, params: &PolicyParams, cfg: &FDConfig) -> Result<ParamGrad>
where
    F: Fn(&PolicyParams) -> Result<f64>,
{
    if cfg.epsilon <= 0.0 {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let mut probe = params.clone();
    probe.frozen = false;
    let mut grad = ParamGrad::zeros_like(params);
    for i in 0..probe.param_count() {
        let original = probe.get_flat(i);
        probe.set_flat(i, original + cfg.epsilon);
        let plus = loss_fn(&probe)?;
        probe.set_flat(i, original - cfg.epsilon);
        let minus = loss_fn(&probe)?;
        probe.set_flat(i, original);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::InvalidInput(format!(
                "loss not finite near parameter {i}"
            )));
        }
        grad.set_flat(i, (plus - minus) / (2.0 * cfg.epsilon));
    }
    Ok(grad)
}

/// exp(r_w) / (exp(r_w) + exp(r_l)), computed with a max shift.
pub fn bt_probability(reward_w: f64, reward_l: f64) -> f64 {
    let m = reward_w.max(reward_l);
    let ew = (reward_w - m).exp();
    let el = (reward_l - m).exp();
    ew / (ew + el)
}

/// Relative error with a floor: entries smaller than 1e-4 in magnitude are
/// effectively compared absolutely at the same tolerance.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-4)
}

/// Largest elementwise relative error between two gradients.
pub fn max_rel_err(a: &ParamGrad, b: &ParamGrad) -> f64 {
    assert_eq!(a.param_count(), b.param_count());
    (0..a.param_count())
        .map(|i| rel_err(a.get_flat(i), b.get_flat(i)))
        .fold(0.0, f64::max)
}

/// Per-block maxima, for reporting.
pub fn per_block_max_rel_err(a: &ParamGrad, b: &ParamGrad) -> Vec<(&'static str, f64)> {
    a.blocks()
        .iter()
        .zip(b.blocks().iter())
        .map(|((name, ma), (_, mb))| {
            let worst = ma
                .data()
                .iter()
                .zip(mb.data())
                .map(|(&x, &y)| rel_err(x, y))
                .fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}

// --- independent policy evaluation ---------------------------------------------

/// Softmax log-probabilities recomputed the naive way: explicit exponentials
/// and a plain sum, no log-sum-exp shift.
#[allow(clippy::needless_range_loop)] // index arithmetic on purpose: a separate code path
pub fn naive_step_log_probs(params: &PolicyParams, ctx: &StepContext) -> Result<Vec<f64>> {
    if ctx.visual.len() != params.d_v {
        return Err(Error::Config("visual width mismatch".into()));
    }
    // phi rebuilt with index arithmetic rather than iterator zips.
    let mut phi = vec![0.0; params.d];
    for j in 0..params.d {
        let mut acc = ctx.prompt_mean[j];
        for a in 0..params.d_v {
            acc += ctx.visual[a] * params.visual_proj.get(a, j);
        }
        let mut wsum = 0.0;
        for w in &ctx.prefix_window {
            wsum += w[j];
        }
        acc += wsum / ctx.prefix_window.len() as f64;
        phi[j] = acc;
    }
    let mut logits = vec![0.0; params.vocab.size];
    for (t, logit) in logits.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..params.d {
            acc += params.out.get(t, j) * phi[j];
        }
        *logit = acc;
    }
    let total: f64 = logits.iter().map(|z| z.exp()).sum();
    Ok(logits.iter().map(|z| (z.exp() / total).ln()).collect())
}

/// Sequence log-probability as an explicit chain of per-step softmaxes.
pub fn naive_sequence_log_prob(
    params: &PolicyParams,
    visual: &[f64],
    x: &TokenSeq,
    y: &TokenSeq,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..y.len() {
        let ctx = StepContext::assemble(params, visual, x, &y.tokens()[..i])?;
        let lps = naive_step_log_probs(params, &ctx)?;
        total += lps[y.tokens()[i] as usize];
    }
    Ok(total)
}

/// Per-step brute-force sequential KL: each step's divergence summed term by
/// term over the full vocabulary.
pub fn naive_seq_kl(
    reference: &PolicyParams,
    theta: &PolicyParams,
    visual: &[f64],
    x: &TokenSeq,
    y: &TokenSeq,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..y.len() {
        let ctx_ref = StepContext::assemble(reference, visual, x, &y.tokens()[..i])?;
        let ctx_theta = StepContext::assemble(theta, visual, x, &y.tokens()[..i])?;
        let lp_ref = naive_step_log_probs(reference, &ctx_ref)?;
        let lp_theta = naive_step_log_probs(theta, &ctx_theta)?;
        let mut step = 0.0;
        for t in 0..reference.vocab.size {
            let p = lp_ref[t].exp();
            step += p * (lp_ref[t] - lp_theta[t]);
        }
        total += step;
    }
    Ok(total)
}

/// Independent mean of a set of equal-length vectors.
pub fn naive_mean(vectors: &[Vec<f64>]) -> Vec<f64> {
    if vectors.is_empty() {
        return Vec::new();
    }
    let dim = vectors[0].len();
    let mut acc = vec![0.0; dim];
    for v in vectors {
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    for a in &mut acc {
        *a /= vectors.len() as f64;
    }
    acc
}

// --- normalization sweep ---------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct NormalizationReport {
    /// (context index, |sum - 1|) for every failing context.
    pub failures: Vec<(usize, f64)>,
    pub checked: usize,
}

impl NormalizationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Asserts sum(exp(step_log_probs)) = 1 within 1e-12 over the given contexts.
pub fn check_normalization(
    params: &PolicyParams,
    contexts: &[StepContext],
) -> Result<NormalizationReport> {
    let mut report = NormalizationReport {
        checked: contexts.len(),
        ..Default::default()
    };
    for (i, ctx) in contexts.iter().enumerate() {
        let lps = crate::policy::step_log_probs(params, ctx)?;
        let total: f64 = lps.iter().map(|lp| lp.exp()).sum();
        let gap = (total - 1.0).abs();
        // Non-finite sums (corrupted inputs) must fail, not slip through a
        // NaN comparison.
        if gap.is_nan() || gap > 1e-12 {
            report.failures.push((i, gap));
        }
    }
    Ok(report)
}

// --- sigmoid-argument reassembly ---------------------------------------------------

/// The six raw sequence log-probs behind the dual-rejection response term.
#[derive(Debug, Clone, Copy)]
pub struct ResponseLogProbs {
    pub theta_chosen: f64,
    pub ref_chosen: f64,
    pub theta_relevant: f64,
    pub ref_relevant: f64,
    pub theta_irrelevant: f64,
    pub ref_irrelevant: f64,
}

/// Recomputes the response-term argument from scratch.
pub fn reassemble_u_r(lp: &ResponseLogProbs, w: &LossWeights) -> f64 {
    let lr_w = lp.theta_chosen - lp.ref_chosen;
    let lr_re = lp.theta_relevant - lp.ref_relevant;
    let lr_ir = lp.theta_irrelevant - lp.ref_irrelevant;
    w.beta * lr_w - (w.beta_re * w.beta * lr_re + w.beta_ir * w.beta * lr_ir)
}

/// The four raw sequence log-probs behind a two-sided (video/clip/object)
/// term.
#[derive(Debug, Clone, Copy)]
pub struct PairLogProbs {
    pub theta_chosen: f64,
    pub ref_chosen: f64,
    pub theta_rejected: f64,
    pub ref_rejected: f64,
}

/// Recomputes a two-sided argument from scratch.
pub fn reassemble_u_pair(lp: &PairLogProbs, beta: f64) -> f64 {
    beta * ((lp.theta_chosen - lp.ref_chosen) - (lp.theta_rejected - lp.ref_rejected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{sigmoid, LossWeights};
    use crate::policy::{PolicyParams, Vocab};

    #[test]
    fn fd_recovers_quadratic_gradient() {
        let vocab = Vocab::new(4, 0, 1).unwrap();
        let params = PolicyParams::gaussian(vocab, 4, 2, 5);
        let fd = finite_diff_grad(
            |p| {
                Ok((0..p.param_count())
                    .map(|i| p.get_flat(i) * p.get_flat(i))
                    .sum())
            },
            &params,
            &FDConfig::default(),
        )
        .unwrap();
        for i in 0..params.param_count() {
            let expected = 2.0 * params.get_flat(i);
            assert!((fd.get_flat(i) - expected).abs() < 1e-8);
        }
    }

    #[test]
    fn fd_of_constant_is_zero() {
        let vocab = Vocab::new(4, 0, 1).unwrap();
        let params = PolicyParams::gaussian(vocab, 4, 2, 6);
        let fd = finite_diff_grad(|_| Ok(3.25), &params, &FDConfig::default()).unwrap();
        assert_eq!(fd.max_abs(), 0.0);
    }

    #[test]
    fn bt_probability_basics() {
        assert!((bt_probability(1.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((bt_probability(3.0f64.ln(), 0.0) - 0.75).abs() < 1e-12);
        // Stable far out in the tails.
        assert!((bt_probability(1000.0, 0.0) - 1.0).abs() < 1e-12);
        assert!(bt_probability(0.0, 1000.0) < 1e-12);
    }

    #[test]
    fn bt_probability_equals_sigmoid_of_reward_gap() {
        // With implicit rewards r = beta*logratio the pairwise-comparison
        // probability and the sigmoid of the argument agree exactly.
        for (rw, rl) in [(0.2, -0.1), (-3.0, 2.0), (0.0, 0.0), (12.0, -9.0)] {
            let p = bt_probability(rw, rl);
            let s = sigmoid(rw - rl);
            assert!((p - s).abs() < 1e-12);
        }
    }

    #[test]
    fn reassembly_identities() {
        let w = LossWeights::default();
        let all_equal = ResponseLogProbs {
            theta_chosen: -2.0,
            ref_chosen: -2.0,
            theta_relevant: -3.0,
            ref_relevant: -3.0,
            theta_irrelevant: -4.0,
            ref_irrelevant: -4.0,
        };
        assert_eq!(reassemble_u_r(&all_equal, &w), 0.0);

        // Single-rejection hand arithmetic: beta=0.1, ratios 0.5 and -0.25.
        let pair = PairLogProbs {
            theta_chosen: -1.5,
            ref_chosen: -2.0,
            theta_rejected: -2.25,
            ref_rejected: -2.0,
        };
        let expected = 0.1 * (0.5 - (-0.25));
        assert!((reassemble_u_pair(&pair, 0.1) - expected).abs() < 1e-15);

        // Dual weights by hand: 0.1*(0.5) - (0.7*0.1*0.3 + 0.3*0.1*(-0.2)).
        let resp = ResponseLogProbs {
            theta_chosen: -1.5,
            ref_chosen: -2.0,
            theta_relevant: -1.7,
            ref_relevant: -2.0,
            theta_irrelevant: -2.2,
            ref_irrelevant: -2.0,
        };
        let expected = 0.1 * 0.5 - (0.7 * 0.1 * 0.3 + 0.3 * 0.1 * (-0.2));
        assert!((reassemble_u_r(&resp, &w) - expected).abs() < 1e-15);
    }

    #[test]
    fn normalization_sweep_passes_and_catches_corruption() {
        let vocab = Vocab::new(6, 0, 1).unwrap();
        let zero = PolicyParams::zeros(vocab, 8, 4);
        let x = TokenSeq::prompt(vec![2, 3], &vocab).unwrap();
        let contexts: Vec<StepContext> = (0..5)
            .map(|i| {
                let visual: Vec<f64> = (0..4).map(|j| (i * j) as f64 * 0.1).collect();
                StepContext::assemble(&zero, &visual, &x, &[4]).unwrap()
            })
            .collect();
        let report = check_normalization(&zero, &contexts).unwrap();
        assert!(report.passed());
        assert_eq!(report.checked, 5);

        let seeded = PolicyParams::gaussian(vocab, 8, 4, 77);
        let contexts: Vec<StepContext> = (0..5)
            .map(|i| {
                let visual: Vec<f64> = (0..4).map(|j| ((i + j) as f64 * 0.2).sin()).collect();
                StepContext::assemble(&seeded, &visual, &x, &[4, 5]).unwrap()
            })
            .collect();
        let report = check_normalization(&seeded, &contexts).unwrap();
        assert!(report.passed());

        // Corrupt one context with a non-finite visual entry: exp(nan) sums
        // break normalization and the report names the context.
        let mut bad = contexts;
        bad[3].visual[0] = f64::NAN;
        let report = check_normalization(&seeded, &bad).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures[0].0, 3);
    }
}
