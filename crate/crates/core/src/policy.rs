//! Minimal autoregressive policy over a finite token vocabulary, conditioned
//! on a visual feature vector.
//!
//! The next-token distribution is a linear softmax:
//!
//! ```text
//! phi     = visual_projᵀ · visual + prompt_mean + mean(prefix_window)
//! logits  = out · phi
//! p(t|·)  = softmax(logits)[t]
//! ```
//!
//! where `prompt_mean` is the mean embedding of the prompt tokens and
//! `prefix_window` holds the embeddings of the last two generated tokens
//! (zero-padded at the start of a response). The model is shallow enough for
//! hand-derived gradients while still coupling text to the visual input.
//!
//! Everything is `f64`; gradient-check tolerances of 1e-5 are not reliable in
//! single precision.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::rng::rng_from;

/// Number of trailing response tokens whose embeddings feed each step.
pub const PREFIX_WINDOW: usize = 2;

/// Standard deviation of the Gaussian parameter initialization.
pub const INIT_SIGMA: f64 = 0.1;

/// Token alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub bos_id: u32,
    pub eos_id: u32,
}

impl Vocab {
    pub fn new(size: usize, bos_id: u32, eos_id: u32) -> Result<Self> {
        if size == 0 || size > 256 {
            return Err(Error::Config(format!(
                "vocab size {size} outside the supported range 1..=256"
            )));
        }
        if bos_id == eos_id {
            return Err(Error::Config("bos and eos must differ".into()));
        }
        if bos_id as usize >= size || eos_id as usize >= size {
            return Err(Error::Config("bos/eos outside the vocabulary".into()));
        }
        Ok(Self {
            size,
            bos_id,
            eos_id,
        })
    }
}

/// Whether a token sequence is a prompt or a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Prompt,
    Response,
}

/// Validated token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    tokens: Vec<u32>,
    role: Role,
}

impl TokenSeq {
    pub fn prompt(tokens: Vec<u32>, vocab: &Vocab) -> Result<Self> {
        Self::new(tokens, Role::Prompt, vocab)
    }

    pub fn response(tokens: Vec<u32>, vocab: &Vocab) -> Result<Self> {
        Self::new(tokens, Role::Response, vocab)
    }

    fn new(tokens: Vec<u32>, role: Role, vocab: &Vocab) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab.size) {
            return Err(Error::InvalidInput(format!(
                "token {bad} outside vocabulary of size {}",
                vocab.size
            )));
        }
        if role == Role::Response && *tokens.last().unwrap() != vocab.eos_id {
            return Err(Error::InvalidInput(
                "response sequences must end with the eos token".into(),
            ));
        }
        Ok(Self { tokens, role })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Parameters of the policy. `frozen` marks a reference copy that no
/// optimizer step may touch.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub vocab: Vocab,
    /// Embedding width.
    pub d: usize,
    /// Visual feature width.
    pub d_v: usize,
    /// `vocab.size x d` token embeddings.
    pub embed: Matrix,
    /// `d_v x d` projection of the visual vector into embedding space.
    pub visual_proj: Matrix,
    /// `vocab.size x d` output weights.
    pub out: Matrix,
    pub frozen: bool,
    /// Seed the parameters were drawn from (0 for hand-built params).
    pub seed: u64,
}

impl PolicyParams {
    /// All-zero parameters; the softmax is exactly uniform.
    pub fn zeros(vocab: Vocab, d: usize, d_v: usize) -> Self {
        Self {
            vocab,
            d,
            d_v,
            embed: Matrix::zeros(vocab.size, d),
            visual_proj: Matrix::zeros(d_v, d),
            out: Matrix::zeros(vocab.size, d),
            frozen: false,
            seed: 0,
        }
    }

    /// Gaussian(0, 0.1) initialization from an explicit seed. Entries are
    /// drawn in a fixed order (embed, visual_proj, out; row-major).
    pub fn gaussian(vocab: Vocab, d: usize, d_v: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let normal = Normal::new(0.0, INIT_SIGMA).expect("valid normal");
        let mut draw =
            |rows: usize, cols: usize| Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng));
        let embed = draw(vocab.size, d);
        let visual_proj = draw(d_v, d);
        let out = draw(vocab.size, d);
        Self {
            vocab,
            d,
            d_v,
            embed,
            visual_proj,
            out,
            frozen: false,
            seed,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.embed.all_finite() && self.visual_proj.all_finite() && self.out.all_finite()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.embed.len() + self.visual_proj.len() + self.out.len()
    }

    /// Flat read access across (embed, visual_proj, out).
    pub fn get_flat(&self, i: usize) -> f64 {
        let (e, p) = (self.embed.len(), self.visual_proj.len());
        if i < e {
            self.embed.data()[i]
        } else if i < e + p {
            self.visual_proj.data()[i - e]
        } else {
            self.out.data()[i - e - p]
        }
    }

    /// Flat write access across (embed, visual_proj, out).
    pub fn set_flat(&mut self, i: usize, v: f64) {
        let (e, p) = (self.embed.len(), self.visual_proj.len());
        if i < e {
            self.embed.data_mut()[i] = v;
        } else if i < e + p {
            self.visual_proj.data_mut()[i - e] = v;
        } else {
            self.out.data_mut()[i - e - p] = v;
        }
    }
}

/// Deep copy with `frozen = true`; the reference policy for ratio terms.
pub fn freeze_reference(params: &PolicyParams) -> PolicyParams {
    let mut copy = params.clone();
    copy.frozen = true;
    copy
}

/// FNV-1a over the bit patterns of every parameter. Used to assert that
/// frozen parameters survive training untouched.
pub fn checksum(params: &PolicyParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bits: u64| {
        for byte in bits.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    };
    eat(params.vocab.size as u64);
    eat(params.d as u64);
    eat(params.d_v as u64);
    for m in [&params.embed, &params.visual_proj, &params.out] {
        for &v in m.data() {
            eat(v.to_bits());
        }
    }
    h
}

/// Conditioning state for one decoding step: raw visual vector, mean prompt
/// embedding, and the embeddings of the last two response tokens
/// (zero-padded when the prefix is shorter).
#[derive(Debug, Clone)]
pub struct StepContext {
    pub visual: Vec<f64>,
    pub prompt_mean: Vec<f64>,
    pub prefix_window: Vec<Vec<f64>>,
}

impl StepContext {
    /// Builds the context for the step that follows `prefix` (the response
    /// tokens generated so far).
    pub fn assemble(
        params: &PolicyParams,
        visual: &[f64],
        x: &TokenSeq,
        prefix: &[u32],
    ) -> Result<Self> {
        if visual.len() != params.d_v {
            return Err(Error::Config(format!(
                "visual width {} does not match policy d_v {}",
                visual.len(),
                params.d_v
            )));
        }
        if x.role() != Role::Prompt {
            return Err(Error::InvalidInput(
                "conditioning x must be a prompt".into(),
            ));
        }
        let prompt_mean = mean_embedding(params, x.tokens());
        let mut prefix_window = vec![vec![0.0; params.d]; PREFIX_WINDOW];
        for (slot, &tok) in (0..PREFIX_WINDOW).rev().zip(prefix.iter().rev()) {
            prefix_window[slot] = params.embed.row(tok as usize).to_vec();
        }
        Ok(Self {
            visual: visual.to_vec(),
            prompt_mean,
            prefix_window,
        })
    }

    fn check_dims(&self, params: &PolicyParams) -> Result<()> {
        if self.visual.len() != params.d_v {
            return Err(Error::Config(format!(
                "visual width {} does not match policy d_v {}",
                self.visual.len(),
                params.d_v
            )));
        }
        if self.prompt_mean.len() != params.d
            || self.prefix_window.len() != PREFIX_WINDOW
            || self.prefix_window.iter().any(|w| w.len() != params.d)
        {
            return Err(Error::Config(
                "context vector widths do not match the policy".into(),
            ));
        }
        Ok(())
    }
}

fn mean_embedding(params: &PolicyParams, tokens: &[u32]) -> Vec<f64> {
    let mut mean = vec![0.0; params.d];
    let scale = 1.0 / tokens.len() as f64;
    for &t in tokens {
        for (m, &e) in mean.iter_mut().zip(params.embed.row(t as usize)) {
            *m += scale * e;
        }
    }
    mean
}

/// phi = visual_projᵀ·visual + prompt_mean + mean(prefix_window)
fn phi(params: &PolicyParams, ctx: &StepContext) -> Vec<f64> {
    let mut out = ctx.prompt_mean.clone();
    for (a, &va) in ctx.visual.iter().enumerate() {
        if va == 0.0 {
            continue;
        }
        for (o, &p) in out.iter_mut().zip(params.visual_proj.row(a)) {
            *o += va * p;
        }
    }
    let wscale = 1.0 / PREFIX_WINDOW as f64;
    for w in &ctx.prefix_window {
        for (o, &e) in out.iter_mut().zip(w) {
            *o += wscale * e;
        }
    }
    out
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Log-probabilities of every next token given a step context. Exponentials
/// sum to 1 within 1e-12.
pub fn step_log_probs(params: &PolicyParams, ctx: &StepContext) -> Result<Vec<f64>> {
    ctx.check_dims(params)?;
    let phi = phi(params, ctx);
    let logits: Vec<f64> = (0..params.vocab.size)
        .map(|t| dot(params.out.row(t), &phi))
        .collect();
    Ok(log_softmax(&logits))
}

/// log pi(y | v, x) = sum_i log p(y_i | v, x, y_<i)
pub fn sequence_log_prob(
    params: &PolicyParams,
    visual: &[f64],
    x: &TokenSeq,
    y: &TokenSeq,
) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InvalidInput("empty response".into()));
    }
    if y.role() != Role::Response {
        return Err(Error::InvalidInput(
            "sequence_log_prob scores response sequences".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..y.len() {
        let ctx = StepContext::assemble(params, visual, x, &y.tokens()[..i])?;
        let lps = step_log_probs(params, &ctx)?;
        total += lps[y.tokens()[i] as usize];
    }
    Ok(total)
}

/// Gradient with the same block structure as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub embed: Matrix,
    pub visual_proj: Matrix,
    pub out: Matrix,
}

impl ParamGrad {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            embed: Matrix::zeros(params.embed.rows(), params.embed.cols()),
            visual_proj: Matrix::zeros(params.visual_proj.rows(), params.visual_proj.cols()),
            out: Matrix::zeros(params.out.rows(), params.out.cols()),
        }
    }

    pub fn scaled_add(&mut self, scale: f64, other: &ParamGrad) {
        self.embed.scaled_add(scale, &other.embed);
        self.visual_proj.scaled_add(scale, &other.visual_proj);
        self.out.scaled_add(scale, &other.out);
    }

    pub fn scale(&mut self, s: f64) {
        self.embed.scale(s);
        self.visual_proj.scale(s);
        self.out.scale(s);
    }

    pub fn param_count(&self) -> usize {
        self.embed.len() + self.visual_proj.len() + self.out.len()
    }

    pub fn get_flat(&self, i: usize) -> f64 {
        let (e, p) = (self.embed.len(), self.visual_proj.len());
        if i < e {
            self.embed.data()[i]
        } else if i < e + p {
            self.visual_proj.data()[i - e]
        } else {
            self.out.data()[i - e - p]
        }
    }

    pub fn set_flat(&mut self, i: usize, v: f64) {
        let (e, p) = (self.embed.len(), self.visual_proj.len());
        if i < e {
            self.embed.data_mut()[i] = v;
        } else if i < e + p {
            self.visual_proj.data_mut()[i - e] = v;
        } else {
            self.out.data_mut()[i - e - p] = v;
        }
    }

    pub fn max_abs(&self) -> f64 {
        [&self.embed, &self.visual_proj, &self.out]
            .iter()
            .flat_map(|m| m.data().iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.embed.all_finite() && self.visual_proj.all_finite() && self.out.all_finite()
    }

    /// Named blocks, for per-block reporting.
    pub fn blocks(&self) -> [(&'static str, &Matrix); 3] {
        [
            ("embed", &self.embed),
            ("visual_proj", &self.visual_proj),
            ("out", &self.out),
        ]
    }
}

/// Per-step next-token log-probability vectors along `y`'s contexts.
pub fn step_log_probs_along(
    params: &PolicyParams,
    visual: &[f64],
    x: &TokenSeq,
    y: &TokenSeq,
) -> Result<Vec<Vec<f64>>> {
    let mut all = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let ctx = StepContext::assemble(params, visual, x, &y.tokens()[..i])?;
        all.push(step_log_probs(params, &ctx)?);
    }
    Ok(all)
}

/// Per-step next-token probability vectors along `y`'s contexts. Shared by
/// the gradient driver and the KL computation.
pub fn step_probs_along(
    params: &PolicyParams,
    visual: &[f64],
    x: &TokenSeq,
    y: &TokenSeq,
) -> Result<Vec<Vec<f64>>> {
    Ok(step_log_probs_along(params, visual, x, y)?
        .into_iter()
        .map(|lps| lps.into_iter().map(|lp| lp.exp()).collect())
        .collect())
}

/// Backpropagates per-step logit cotangents through the policy.
///
/// `deltas[i]` is dLoss/dlogits at step `i` (length `vocab.size`); the
/// resulting parameter gradient, times `scale`, is accumulated into `grad`.
pub fn accumulate_logit_grads(
    params: &PolicyParams,
    visual: &[f64],
    x: &TokenSeq,
    y: &TokenSeq,
    deltas: &[Vec<f64>],
    scale: f64,
    grad: &mut ParamGrad,
) -> Result<()> {
    if deltas.len() != y.len() {
        return Err(Error::Config("one delta vector per step required".into()));
    }
    let prompt_scale = scale / x.len() as f64;
    let window_scale = scale / PREFIX_WINDOW as f64;
    for (i, delta) in deltas.iter().enumerate() {
        let ctx = StepContext::assemble(params, visual, x, &y.tokens()[..i])?;
        let phi = phi(params, &ctx);
        // d logits / d out: delta ⊗ phi
        grad.out.add_outer(scale, delta, &phi);
        // g = outᵀ · delta, the cotangent of phi
        let mut g = vec![0.0; params.d];
        for (t, &dt) in delta.iter().enumerate() {
            if dt == 0.0 {
                continue;
            }
            for (gj, &o) in g.iter_mut().zip(params.out.row(t)) {
                *gj += dt * o;
            }
        }
        // phi depends on visual_proj through visualᵀ · visual_proj
        grad.visual_proj.add_outer(scale, visual, &g);
        // ... on the prompt embeddings through their mean
        for &t in x.tokens() {
            grad.embed.axpy_row(t as usize, prompt_scale, &g);
        }
        // ... and on the last two prefix embeddings through their mean
        let lo = i.saturating_sub(PREFIX_WINDOW);
        for &t in &y.tokens()[lo..i] {
            grad.embed.axpy_row(t as usize, window_scale, &g);
        }
    }
    Ok(())
}

/// Analytic gradient of [`sequence_log_prob`] with respect to every
/// parameter entry.
pub fn grad_sequence_log_prob(
    params: &PolicyParams,
    visual: &[f64],
    x: &TokenSeq,
    y: &TokenSeq,
) -> Result<ParamGrad> {
    let mut grad = ParamGrad::zeros_like(params);
    accumulate_sequence_log_prob_grad(params, visual, x, y, 1.0, &mut grad)?;
    Ok(grad)
}

/// Adds `scale * d log pi(y|v,x) / d params` into `grad`.
pub fn accumulate_sequence_log_prob_grad(
    params: &PolicyParams,
    visual: &[f64],
    x: &TokenSeq,
    y: &TokenSeq,
    scale: f64,
    grad: &mut ParamGrad,
) -> Result<()> {
    if params.frozen {
        return Err(Error::Contract(
            "gradients of frozen parameters are never taken".into(),
        ));
    }
    if y.role() != Role::Response {
        return Err(Error::InvalidInput(
            "gradients are defined over response sequences".into(),
        ));
    }
    let probs = step_probs_along(params, visual, x, y)?;
    let deltas: Vec<Vec<f64>> = probs
        .iter()
        .zip(y.tokens())
        .map(|(p, &t)| {
            let mut d: Vec<f64> = p.iter().map(|&pi| -pi).collect();
            d[t as usize] += 1.0;
            d
        })
        .collect();
    accumulate_logit_grads(params, visual, x, y, &deltas, scale, grad)
}

// ---------------------------------------------------------------------------
// Parameter dump format: a small text header followed by one row per line of
// f64 bit patterns in hex. Round-trips bit-exactly.
// ---------------------------------------------------------------------------

const DUMP_MAGIC: &str = "hsdpo-params v1";

pub fn write_params<W: Write>(params: &PolicyParams, mut w: W) -> Result<()> {
    writeln!(w, "{DUMP_MAGIC}")?;
    writeln!(
        w,
        "vocab_size={} bos_id={} eos_id={} d={} d_v={} seed={} frozen={}",
        params.vocab.size,
        params.vocab.bos_id,
        params.vocab.eos_id,
        params.d,
        params.d_v,
        params.seed,
        params.frozen as u8
    )?;
    for (name, m) in [
        ("embed", &params.embed),
        ("visual_proj", &params.visual_proj),
        ("out", &params.out),
    ] {
        writeln!(w, "{name} {} {}", m.rows(), m.cols())?;
        for r in 0..m.rows() {
            let line: Vec<String> = m
                .row(r)
                .iter()
                .map(|v| format!("{:016x}", v.to_bits()))
                .collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

pub fn read_params<R: Read>(r: R) -> Result<PolicyParams> {
    let mut lines = BufReader::new(r).lines().enumerate();
    let mut next_line = |expect: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            }),
            None => Err(Error::Parse {
                line: 0,
                msg: format!("unexpected end of file, expected {expect}"),
            }),
        }
    };

    let (line_no, magic) = next_line("magic header")?;
    if magic.trim() != DUMP_MAGIC {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("unrecognized parameter dump header '{magic}'"),
        });
    }
    let (line_no, header) = next_line("field header")?;
    let mut fields = std::collections::HashMap::new();
    for part in header.split_whitespace() {
        let (k, v) = part.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("malformed header field '{part}'"),
        })?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<u64> {
        fields
            .get(k)
            .ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("missing header field '{k}'"),
            })?
            .parse()
            .map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("bad value for '{k}': {e}"),
            })
    };
    let vocab = Vocab::new(
        get("vocab_size")? as usize,
        get("bos_id")? as u32,
        get("eos_id")? as u32,
    )?;
    let (d, d_v) = (get("d")? as usize, get("d_v")? as usize);
    let seed = get("seed")?;
    let frozen = get("frozen")? != 0;

    let mut read_matrix = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
        let (line_no, head) = next_line("matrix header")?;
        let expected = format!("{name} {rows} {cols}");
        if head.trim() != expected {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected '{expected}', found '{head}'"),
            });
        }
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let (line_no, row) = next_line("matrix row")?;
            let parsed: Vec<f64> = row
                .split_whitespace()
                .map(|h| u64::from_str_radix(h, 16).map(f64::from_bits))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad hex float: {e}"),
                })?;
            if parsed.len() != cols {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {cols} entries, found {}", parsed.len()),
                });
            }
            m.row_mut(r).copy_from_slice(&parsed);
        }
        Ok(m)
    };

    let embed = read_matrix("embed", vocab.size, d)?;
    let visual_proj = read_matrix("visual_proj", d_v, d)?;
    let out = read_matrix("out", vocab.size, d)?;
    Ok(PolicyParams {
        vocab,
        d,
        d_v,
        embed,
        visual_proj,
        out,
        frozen,
        seed,
    })
}

pub fn save_params(params: &PolicyParams, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_params(params, std::io::BufWriter::new(file))
}

pub fn load_params(path: &Path) -> Result<PolicyParams> {
    let file = std::fs::File::open(path)?;
    read_params(file)
}
