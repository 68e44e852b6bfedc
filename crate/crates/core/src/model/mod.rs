//! Instrumented decoder-only transformer.
//!
//! A small pre-norm GPT-style stack (token + learned position embeddings,
//! `layers` blocks of causal multi-head attention and a GELU MLP, final
//! layer norm, untied unembedding). Three properties matter more than scale:
//!
//! * **Traceability.** Every forward pass can capture the residual-stream
//!   state at the final token after the embedding and after each block
//!   (`layers + 1` entries, index 0 = embedding output), plus each block's
//!   post-softmax attention row for the final query position, per head.
//! * **Editability.** A forward pass accepts an activation patch (overwrite
//!   the final-position residual vector at one trace index before the next
//!   block consumes it) and additive pre-softmax attention-mask edits on the
//!   final query row of chosen blocks.
//! * **Determinism.** A sequence is always processed on one thread with
//!   fixed reduction order, so identical inputs give bitwise-identical
//!   outputs regardless of thread count; batches parallelize across trials
//!   with order-preserving collection.
//!
//! Causality is structural: a query at position `t` only ever computes
//! scores against keys `0..=t`, so future positions receive exactly zero
//! attention mass rather than a rounded epsilon.

pub mod math;
mod train;

pub use train::{train, TrainConfig, TrainReport};

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ProbeKind, Trial, N_OPTIONS};
use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::Token;

/// Architecture and initialization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Transformer blocks (L).
    pub layers: usize,
    /// Residual width (d).
    pub width: usize,
    /// Attention heads (H); must divide `width`.
    pub heads: usize,
    /// MLP hidden width as a multiple of `width`.
    pub mlp_ratio: usize,
    /// Maximum sequence length (position table size).
    pub max_seq_len: usize,
    /// Embedding rows; set from the corpus vocabulary.
    pub vocab_size: usize,
    /// Standard deviation of weight init.
    pub init_std: f64,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 8,
            width: 64,
            heads: 4,
            mlp_ratio: 2,
            max_seq_len: 96,
            vocab_size: 343,
            init_std: 0.02,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 {
            return Err(Error::config("layers, width, heads must be nonzero"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be nonzero"));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::config("vocab_size and max_seq_len must be nonzero"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.width * self.mlp_ratio
    }
}

/// Learnable layer-norm parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }
}

/// One transformer block's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Vec<f32>,
    pub bq: Vec<f32>,
    pub wk: Vec<f32>,
    pub bk: Vec<f32>,
    pub wv: Vec<f32>,
    pub bv: Vec<f32>,
    pub wo: Vec<f32>,
    pub bo: Vec<f32>,
    pub ln2: LayerNorm,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

/// The full parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub tok_emb: Vec<f32>,
    pub pos_emb: Vec<f32>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub unembed: Vec<f32>,
}

fn normal(rng: &mut impl Rng, std: f64) -> f32 {
    // Box-Muller; uniform draws come from the named init stream.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std) as f32
}

fn init_matrix(seed: u64, tag: u64, len: usize, std: f64) -> Vec<f32> {
    let mut r = rng::stream(seed, "model.init", &[tag]);
    (0..len).map(|_| normal(&mut r, std)).collect()
}

impl Model {
    /// Initializes parameters deterministically from `cfg.seed`.
    pub fn init(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let d = cfg.width;
        let m = cfg.mlp_dim();
        let v = cfg.vocab_size;
        let std = cfg.init_std;
        // Residual-branch output projections get the usual depth scaling so
        // the initial residual stream does not blow up with depth.
        let out_std = std / ((2.0 * cfg.layers as f64).sqrt());
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let base = 100 + (l as u64) * 10;
            blocks.push(Block {
                ln1: LayerNorm::new(d),
                wq: init_matrix(cfg.seed, base, d * d, std),
                bq: vec![0.0; d],
                wk: init_matrix(cfg.seed, base + 1, d * d, std),
                bk: vec![0.0; d],
                wv: init_matrix(cfg.seed, base + 2, d * d, std),
                bv: vec![0.0; d],
                wo: init_matrix(cfg.seed, base + 3, d * d, out_std),
                bo: vec![0.0; d],
                ln2: LayerNorm::new(d),
                w1: init_matrix(cfg.seed, base + 4, m * d, std),
                b1: vec![0.0; m],
                w2: init_matrix(cfg.seed, base + 5, d * m, out_std),
                b2: vec![0.0; d],
            });
        }
        Ok(Model {
            tok_emb: init_matrix(cfg.seed, 1, v * d, std),
            pos_emb: init_matrix(cfg.seed, 2, cfg.max_seq_len * d, std),
            blocks,
            ln_f: LayerNorm::new(d),
            unembed: init_matrix(cfg.seed, 3, v * d, std),
            cfg,
        })
    }

    /// Total parameter count.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Named views of every tensor, in canonical checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = vec![
            ("tok_emb".into(), self.tok_emb.as_slice()),
            ("pos_emb".into(), self.pos_emb.as_slice()),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}.ln1.gain"), b.ln1.gain.as_slice()));
            out.push((format!("block{l}.ln1.bias"), b.ln1.bias.as_slice()));
            out.push((format!("block{l}.wq"), b.wq.as_slice()));
            out.push((format!("block{l}.bq"), b.bq.as_slice()));
            out.push((format!("block{l}.wk"), b.wk.as_slice()));
            out.push((format!("block{l}.bk"), b.bk.as_slice()));
            out.push((format!("block{l}.wv"), b.wv.as_slice()));
            out.push((format!("block{l}.bv"), b.bv.as_slice()));
            out.push((format!("block{l}.wo"), b.wo.as_slice()));
            out.push((format!("block{l}.bo"), b.bo.as_slice()));
            out.push((format!("block{l}.ln2.gain"), b.ln2.gain.as_slice()));
            out.push((format!("block{l}.ln2.bias"), b.ln2.bias.as_slice()));
            out.push((format!("block{l}.w1"), b.w1.as_slice()));
            out.push((format!("block{l}.b1"), b.b1.as_slice()));
            out.push((format!("block{l}.w2"), b.w2.as_slice()));
            out.push((format!("block{l}.b2"), b.b2.as_slice()));
        }
        out.push(("ln_f.gain".into(), self.ln_f.gain.as_slice()));
        out.push(("ln_f.bias".into(), self.ln_f.bias.as_slice()));
        out.push(("unembed".into(), self.unembed.as_slice()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut out: Vec<(String, &mut Vec<f32>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{l}.ln1.gain"), &mut b.ln1.gain));
            out.push((format!("block{l}.ln1.bias"), &mut b.ln1.bias));
            out.push((format!("block{l}.wq"), &mut b.wq));
            out.push((format!("block{l}.bq"), &mut b.bq));
            out.push((format!("block{l}.wk"), &mut b.wk));
            out.push((format!("block{l}.bk"), &mut b.bk));
            out.push((format!("block{l}.wv"), &mut b.wv));
            out.push((format!("block{l}.bv"), &mut b.bv));
            out.push((format!("block{l}.wo"), &mut b.wo));
            out.push((format!("block{l}.bo"), &mut b.bo));
            out.push((format!("block{l}.ln2.gain"), &mut b.ln2.gain));
            out.push((format!("block{l}.ln2.bias"), &mut b.ln2.bias));
            out.push((format!("block{l}.w1"), &mut b.w1));
            out.push((format!("block{l}.b1"), &mut b.b1));
            out.push((format!("block{l}.w2"), &mut b.w2));
            out.push((format!("block{l}.b2"), &mut b.b2));
        }
        out.push(("ln_f.gain".into(), &mut self.ln_f.gain));
        out.push(("ln_f.bias".into(), &mut self.ln_f.bias));
        out.push(("unembed".into(), &mut self.unembed));
        out
    }
}

// ---------------------------------------------------------------------------
// Forward-pass hooks
// ---------------------------------------------------------------------------

/// Overwrite the final-position residual vector at one trace index.
///
/// Trace index 0 is the embedding output; index `l` in `[1, L)` is the output
/// of block `l`. The overwrite happens before block `l+1` (code block index
/// `l`) consumes the stream, so index `L` (which nothing downstream would
/// consume except the readout) is not patchable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    /// Trace index in `[0, layers)`.
    pub layer: usize,
    /// Replacement vector, length `width`.
    pub vector: Vec<f32>,
    /// Where the donor vector was read from (metadata only).
    pub donor_trial: String,
    /// Donor trace index (metadata only).
    pub donor_layer: usize,
}

/// Additive pre-softmax edit of the final query row of one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskEdit {
    /// Block index in `[0, layers)`.
    pub layer: usize,
    /// Key span `[start, end)` the additive applies to.
    pub span: (usize, usize),
    /// Value added to pre-softmax scores (log of the intended multiplier).
    pub additive: f32,
}

/// Suppression floor standing in for log(0).
pub const MASK_NEG: f32 = -1e9;

impl MaskEdit {
    /// Builds an edit from a mass multiplier `v`: additive = ln(v), with
    /// v = 0 mapped to [`MASK_NEG`].
    pub fn from_multiplier(layer: usize, span: (usize, usize), v: f64) -> Result<MaskEdit> {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::config(format!(
                "mask multiplier must be finite and >= 0, got {v}"
            )));
        }
        let additive = if v == 0.0 { MASK_NEG } else { v.ln() as f32 };
        Ok(MaskEdit {
            layer,
            span,
            additive,
        })
    }
}

/// What a forward pass should record and apply.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub patch: Option<PatchSpec>,
    pub mask_edits: Vec<MaskEdit>,
    /// Record residual-stream states and attention rows.
    pub capture: bool,
    /// Additionally record full pre-softmax score tensors (debug/tests).
    pub capture_scores: bool,
}

impl ForwardOptions {
    pub fn capture() -> Self {
        ForwardOptions {
            capture: true,
            ..Default::default()
        }
    }
}

/// Recorded activations and the probe decision for one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `layers + 1` final-position residual states; entry 0 is the embedding
    /// output (empty when capture was off).
    pub hidden: Vec<Vec<f32>>,
    /// Post-softmax attention of the final query row: `[layer][head][key]`,
    /// key dimension is the true sequence length (empty when capture off).
    pub attention: Vec<Vec<Vec<f32>>>,
    /// Pre-softmax scores `[layer][head][query][key]`, future keys set to
    /// `f32::NEG_INFINITY`; only with `capture_scores`.
    pub scores: Option<Vec<Vec<Vec<Vec<f32>>>>>,
    /// Logits of the four option tokens, in presented order.
    pub option_logits: [f32; N_OPTIONS],
    /// Argmax over `option_logits` (ties -> lowest index).
    pub predicted_option: usize,
    pub seq_len: usize,
}

/// One evaluated trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial_id: String,
    pub n_turns: usize,
    pub probe_kind: ProbeKind,
    pub anchor_class: usize,
    pub predicted_option: usize,
    pub correct_option: usize,
    pub correct: bool,
    pub option_logits: [f32; N_OPTIONS],
}

impl Model {
    fn validate_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::config("forward: empty token sequence"));
        }
        if tokens.len() > self.cfg.max_seq_len {
            return Err(Error::config(format!(
                "forward: sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.cfg.max_seq_len
            )));
        }
        for (i, &t) in tokens.iter().enumerate() {
            if (t as usize) >= self.cfg.vocab_size {
                return Err(Error::config(format!(
                    "forward: token {t} at position {i} outside vocab of {}",
                    self.cfg.vocab_size
                )));
            }
        }
        Ok(())
    }

    fn validate_options(&self, opts: &ForwardOptions, seq_len: usize) -> Result<()> {
        if let Some(p) = &opts.patch {
            if p.layer >= self.cfg.layers {
                return Err(Error::config(format!(
                    "patch layer {} outside [0, {})",
                    p.layer, self.cfg.layers
                )));
            }
            if p.vector.len() != self.cfg.width {
                return Err(Error::config(format!(
                    "patch vector length {} != width {}",
                    p.vector.len(),
                    self.cfg.width
                )));
            }
            if p.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("patch vector contains non-finite values"));
            }
        }
        for e in &opts.mask_edits {
            if e.layer >= self.cfg.layers {
                return Err(Error::config(format!(
                    "mask edit layer {} outside [0, {})",
                    e.layer, self.cfg.layers
                )));
            }
            let (s, t) = e.span;
            if s >= t || t > seq_len {
                return Err(Error::config(format!(
                    "mask edit span [{s}, {t}) invalid for sequence of {seq_len}"
                )));
            }
        }
        Ok(())
    }

    /// Runs the model over `tokens` and scores `options` at the final
    /// position. Applies the patch/mask hooks in `opts` and captures what
    /// `opts` requests.
    pub fn forward(
        &self,
        tokens: &[Token],
        options: &[Token; N_OPTIONS],
        opts: &ForwardOptions,
    ) -> Result<ForwardTrace> {
        self.validate_tokens(tokens)?;
        let t_len = tokens.len();
        self.validate_options(opts, t_len)?;
        for &o in options {
            if (o as usize) >= self.cfg.vocab_size {
                return Err(Error::config(format!("option token {o} outside vocab")));
            }
        }

        let d = self.cfg.width;
        let last = t_len - 1;
        let mut x = vec![0.0f32; t_len * d];
        for t in 0..t_len {
            let tok = tokens[t] as usize;
            let row = &mut x[t * d..(t + 1) * d];
            for i in 0..d {
                row[i] = self.tok_emb[tok * d + i] + self.pos_emb[t * d + i];
            }
        }

        let mut hidden: Vec<Vec<f32>> = Vec::new();
        let mut attention: Vec<Vec<Vec<f32>>> = Vec::new();
        let mut scores_dump: Option<Vec<Vec<Vec<Vec<f32>>>>> =
            opts.capture_scores.then(Vec::new);

        // Trace index 0: embedding output (patched if requested).
        if let Some(p) = &opts.patch {
            if p.layer == 0 {
                x[last * d..(last + 1) * d].copy_from_slice(&p.vector);
            }
        }
        if opts.capture {
            hidden.push(x[last * d..(last + 1) * d].to_vec());
        }

        for (li, blk) in self.blocks.iter().enumerate() {
            let edits: Vec<&MaskEdit> =
                opts.mask_edits.iter().filter(|e| e.layer == li).collect();
            let (attn_rows, score_tensor) =
                self.block_forward(blk, &mut x, t_len, &edits, opts.capture, opts.capture_scores);
            if opts.capture {
                attention.push(attn_rows);
            }
            if let Some(dump) = scores_dump.as_mut() {
                dump.push(score_tensor.expect("scores captured"));
            }
            // Trace index li + 1 — patch before the next block consumes it.
            if let Some(p) = &opts.patch {
                if p.layer == li + 1 {
                    x[last * d..(last + 1) * d].copy_from_slice(&p.vector);
                }
            }
            if opts.capture {
                hidden.push(x[last * d..(last + 1) * d].to_vec());
            }
        }

        // Readout at the final position.
        let mut normed = vec![0.0f32; d];
        math::layernorm(
            &x[last * d..(last + 1) * d],
            &self.ln_f.gain,
            &self.ln_f.bias,
            &mut normed,
        );
        let mut option_logits = [0.0f32; N_OPTIONS];
        for (i, &o) in options.iter().enumerate() {
            let o = o as usize;
            option_logits[i] = math::dot(&self.unembed[o * d..(o + 1) * d], &normed);
        }
        let mut predicted = 0usize;
        for i in 1..N_OPTIONS {
            if option_logits[i] > option_logits[predicted] {
                predicted = i;
            }
        }
        Ok(ForwardTrace {
            hidden,
            attention,
            scores: scores_dump,
            option_logits,
            predicted_option: predicted,
            seq_len: t_len,
        })
    }

    /// One block, in place over `x`. Returns the captured final-row attention
    /// (per head) and, if requested, the full pre-softmax score tensor.
    #[allow(clippy::type_complexity)]
    fn block_forward(
        &self,
        blk: &Block,
        x: &mut [f32],
        t_len: usize,
        edits: &[&MaskEdit],
        capture: bool,
        capture_scores: bool,
    ) -> (Vec<Vec<f32>>, Option<Vec<Vec<Vec<f32>>>>) {
        let d = self.cfg.width;
        let h = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let m = self.cfg.mlp_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let last = t_len - 1;

        let mut ln1_out = vec![0.0f32; t_len * d];
        for t in 0..t_len {
            math::layernorm(
                &x[t * d..(t + 1) * d],
                &blk.ln1.gain,
                &blk.ln1.bias,
                &mut ln1_out[t * d..(t + 1) * d],
            );
        }
        let mut q = vec![0.0f32; t_len * d];
        let mut k = vec![0.0f32; t_len * d];
        let mut v = vec![0.0f32; t_len * d];
        for t in 0..t_len {
            let ln = &ln1_out[t * d..(t + 1) * d];
            math::affine(&blk.wq, &blk.bq, ln, &mut q[t * d..(t + 1) * d]);
            math::affine(&blk.wk, &blk.bk, ln, &mut k[t * d..(t + 1) * d]);
            math::affine(&blk.wv, &blk.bv, ln, &mut v[t * d..(t + 1) * d]);
        }

        let mut attn_cat = vec![0.0f32; t_len * d];
        let mut captured_rows: Vec<Vec<f32>> = Vec::new();
        let mut score_tensor: Option<Vec<Vec<Vec<f32>>>> = capture_scores.then(|| {
            vec![vec![vec![f32::NEG_INFINITY; t_len]; t_len]; h]
        });

        let mut row = vec![0.0f32; t_len];
        for head in 0..h {
            let off = head * dh;
            for t in 0..t_len {
                let qv = &q[t * d + off..t * d + off + dh];
                for key in 0..=t {
                    let kv = &k[key * d + off..key * d + off + dh];
                    let mut s = math::dot(qv, kv) * scale;
                    if t == last {
                        for e in edits {
                            if key >= e.span.0 && key < e.span.1 {
                                s += e.additive;
                            }
                        }
                    }
                    row[key] = s;
                }
                if let Some(dump) = score_tensor.as_mut() {
                    dump[head][t][..=t].copy_from_slice(&row[..=t]);
                }
                math::softmax_inplace(&mut row[..=t]);
                if capture && t == last {
                    // The final row spans every key position.
                    captured_rows.push(row[..t_len].to_vec());
                }
                let ctx = &mut attn_cat[t * d + off..t * d + off + dh];
                for c in ctx.iter_mut() {
                    *c = 0.0;
                }
                for key in 0..=t {
                    let p = row[key];
                    let vv = &v[key * d + off..key * d + off + dh];
                    for i in 0..dh {
                        ctx[i] += p * vv[i];
                    }
                }
            }
        }

        let mut proj = vec![0.0f32; d];
        for t in 0..t_len {
            math::affine(&blk.wo, &blk.bo, &attn_cat[t * d..(t + 1) * d], &mut proj);
            let xr = &mut x[t * d..(t + 1) * d];
            for i in 0..d {
                xr[i] += proj[i];
            }
        }

        let mut ln2_out = vec![0.0f32; d];
        let mut hidden_mlp = vec![0.0f32; m];
        let mut mlp_out = vec![0.0f32; d];
        for t in 0..t_len {
            math::layernorm(
                &x[t * d..(t + 1) * d],
                &blk.ln2.gain,
                &blk.ln2.bias,
                &mut ln2_out,
            );
            math::affine(&blk.w1, &blk.b1, &ln2_out, &mut hidden_mlp);
            for hval in hidden_mlp.iter_mut() {
                *hval = math::gelu(*hval);
            }
            math::affine(&blk.w2, &blk.b2, &hidden_mlp, &mut mlp_out);
            let xr = &mut x[t * d..(t + 1) * d];
            for i in 0..d {
                xr[i] += mlp_out[i];
            }
        }

        (captured_rows, score_tensor)
    }

    /// Evaluates one trial (no hooks, optional capture).
    pub fn eval_trial(&self, trial: &Trial, opts: &ForwardOptions) -> Result<(TrialOutcome, ForwardTrace)> {
        let trace = self.forward(&trial.tokens, &trial.options, opts)?;
        let outcome = TrialOutcome {
            trial_id: trial.trial_id.clone(),
            n_turns: trial.n_turns,
            probe_kind: trial.probe_kind,
            anchor_class: trial.anchor_class,
            predicted_option: trace.predicted_option,
            correct_option: trial.correct_option,
            correct: trace.predicted_option == trial.correct_option,
            option_logits: trace.option_logits,
        };
        Ok((outcome, trace))
    }
}

/// Evaluates trials in parallel (order-preserving, so results are identical
/// on any thread count). An empty list yields an empty vector.
pub fn batch_eval(model: &Model, trials: &[Trial]) -> Result<Vec<TrialOutcome>> {
    trials
        .par_iter()
        .map(|t| {
            model
                .eval_trial(t, &ForwardOptions::default())
                .map(|(o, _)| o)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    len: usize,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    config: ModelConfig,
    param_count: usize,
    tensors: Vec<TensorMeta>,
}

impl Model {
    /// Writes `<stem>.bin` (little-endian f32, canonical tensor order) and
    /// `<stem>.json` (shapes and config).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let tensors = self.tensors();
        let mut metas = Vec::with_capacity(tensors.len());
        let mut offset = 0usize;
        let mut bytes: Vec<u8> = Vec::with_capacity(self.param_count() * 4);
        for (name, data) in &tensors {
            metas.push(TensorMeta {
                name: name.clone(),
                len: data.len(),
                offset,
            });
            offset += data.len();
            for v in *data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = CheckpointMeta {
            format: "f32-le".to_string(),
            config: self.cfg.clone(),
            param_count: offset,
            tensors: metas,
        };
        if let Some(parent) = stem.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(stem.with_extension("bin"), &bytes)?;
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_vec_pretty(&meta)?,
        )?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Model::save`], validating shapes.
    pub fn load(stem: &Path) -> Result<Model> {
        let json_path = stem.with_extension("json");
        let bin_path = stem.with_extension("bin");
        let read = |p: &Path| -> Result<Vec<u8>> {
            std::fs::read(p).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    Error::missing(p.display().to_string(), "train")
                } else {
                    Error::Io(e)
                }
            })
        };
        let meta: CheckpointMeta = serde_json::from_slice(&read(&json_path)?)?;
        if meta.format != "f32-le" {
            return Err(Error::Format {
                path: json_path.display().to_string(),
                message: format!("unsupported checkpoint format `{}`", meta.format),
            });
        }
        let bytes = read(&bin_path)?;
        if bytes.len() != meta.param_count * 4 {
            return Err(Error::Format {
                path: bin_path.display().to_string(),
                message: format!(
                    "expected {} bytes for {} params, found {}",
                    meta.param_count * 4,
                    meta.param_count,
                    bytes.len()
                ),
            });
        }
        let mut model = Model::init(meta.config.clone())?;
        let mut tensors = model.tensors_mut();
        if tensors.len() != meta.tensors.len() {
            return Err(Error::Format {
                path: json_path.display().to_string(),
                message: format!(
                    "checkpoint has {} tensors, model expects {}",
                    meta.tensors.len(),
                    tensors.len()
                ),
            });
        }
        for (slot, tm) in tensors.iter_mut().zip(&meta.tensors) {
            if slot.0 != tm.name || slot.1.len() != tm.len {
                return Err(Error::Format {
                    path: json_path.display().to_string(),
                    message: format!(
                        "tensor mismatch: checkpoint has `{}` ({} values), model expects `{}` ({})",
                        tm.name,
                        tm.len,
                        slot.0,
                        slot.1.len()
                    ),
                });
            }
            let start = tm.offset * 4;
            let end = start + tm.len * 4;
            if end > bytes.len() {
                return Err(Error::Format {
                    path: bin_path.display().to_string(),
                    message: format!("tensor `{}` extends past end of file", tm.name),
                });
            }
            for (i, chunk) in bytes[start..end].chunks_exact(4).enumerate() {
                slot.1[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
        }
        drop(tensors);
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, CorpusConfig};

    fn tiny_cfg(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: 3,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            max_seq_len: 48,
            vocab_size,
            init_std: 0.02,
            seed: 5,
        }
    }

    fn tiny_corpus() -> (CorpusConfig, crate::corpus::CorpusManifest) {
        let cfg = CorpusConfig {
            classes: 4,
            lengths: vec![2, 4],
            per_cell: 2,
            master_seed: 3,
            ..CorpusConfig::default()
        };
        let manifest = build_corpus(&cfg).unwrap();
        (cfg, manifest)
    }

    fn tiny_model() -> (Model, crate::corpus::CorpusManifest) {
        let (_, manifest) = tiny_corpus();
        let model = Model::init(tiny_cfg(manifest.vocab_size)).unwrap();
        (model, manifest)
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let a = Model::init(tiny_cfg(100)).unwrap();
        let b = Model::init(tiny_cfg(100)).unwrap();
        assert_eq!(a.tok_emb, b.tok_emb);
        assert_eq!(a.blocks[1].w1, b.blocks[1].w1);
        let mut bad = tiny_cfg(100);
        bad.heads = 3; // 16 % 3 != 0
        assert!(Model::init(bad).is_err());
    }

    #[test]
    fn trace_has_layers_plus_one_hidden_entries() {
        let (model, manifest) = tiny_model();
        let trial = &manifest.trials[0];
        let (_, trace) = model.eval_trial(trial, &ForwardOptions::capture()).unwrap();
        assert_eq!(trace.hidden.len(), model.cfg.layers + 1);
        assert_eq!(trace.attention.len(), model.cfg.layers);
        assert_eq!(trace.attention[0].len(), model.cfg.heads);
        assert_eq!(trace.attention[0][0].len(), trial.tokens.len());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (model, manifest) = tiny_model();
        for trial in manifest.trials.iter().take(6) {
            let (_, trace) = model.eval_trial(trial, &ForwardOptions::capture()).unwrap();
            for layer in &trace.attention {
                for head_row in layer {
                    let sum: f32 = head_row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-5, "row sums to {sum}");
                }
            }
        }
    }

    #[test]
    fn causal_mask_is_exact() {
        // Scores for future keys are never computed; check via the score dump
        // that every (q, k > q) entry stays at the -inf sentinel, and that
        // intermediate-row attention over future keys is exactly zero by
        // construction (rows are length q+1 before padding).
        let (model, manifest) = tiny_model();
        let trial = &manifest.trials[1];
        let opts = ForwardOptions {
            capture: true,
            capture_scores: true,
            ..Default::default()
        };
        let (_, trace) = model.eval_trial(trial, &opts).unwrap();
        let scores = trace.scores.as_ref().unwrap();
        for layer in scores {
            for head in layer {
                for (qi, row) in head.iter().enumerate() {
                    for (ki, &s) in row.iter().enumerate() {
                        if ki > qi {
                            assert_eq!(s, f32::NEG_INFINITY);
                        } else {
                            assert!(s.is_finite());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn prediction_tie_breaks_to_lowest_index() {
        // Force exact ties by scoring the same option token four times.
        let (model, manifest) = tiny_model();
        let trial = &manifest.trials[0];
        let same = [trial.options[0]; 4];
        let trace = model
            .forward(&trial.tokens, &same, &ForwardOptions::default())
            .unwrap();
        assert_eq!(trace.predicted_option, 0);
        assert_eq!(trace.option_logits[0], trace.option_logits[3]);
    }

    #[test]
    fn identity_patch_is_bitwise_noop() {
        let (model, manifest) = tiny_model();
        for layer in 0..model.cfg.layers {
            let trial = &manifest.trials[2];
            let (_, clean) = model.eval_trial(trial, &ForwardOptions::capture()).unwrap();
            let patch = PatchSpec {
                layer,
                vector: clean.hidden[layer].clone(),
                donor_trial: trial.trial_id.clone(),
                donor_layer: layer,
            };
            let opts = ForwardOptions {
                patch: Some(patch),
                capture: true,
                ..Default::default()
            };
            let (_, patched) = model.eval_trial(trial, &opts).unwrap();
            assert_eq!(clean.option_logits, patched.option_logits, "layer {layer}");
            assert_eq!(clean.hidden, patched.hidden, "layer {layer}");
            for (a, b) in clean.attention.iter().zip(&patched.attention) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn patch_layers_below_unchanged_and_patched_layer_equals_donor() {
        let (model, manifest) = tiny_model();
        let target = &manifest.trials[0];
        let donor_trial = &manifest.trials[4];
        let (_, donor_trace) = model
            .eval_trial(donor_trial, &ForwardOptions::capture())
            .unwrap();
        let patch_layer = 1usize;
        let donor_vec = donor_trace.hidden[2].clone();
        let (_, clean) = model.eval_trial(target, &ForwardOptions::capture()).unwrap();
        let opts = ForwardOptions {
            patch: Some(PatchSpec {
                layer: patch_layer,
                vector: donor_vec.clone(),
                donor_trial: donor_trial.trial_id.clone(),
                donor_layer: 2,
            }),
            capture: true,
            ..Default::default()
        };
        let (_, patched) = model.eval_trial(target, &opts).unwrap();
        for l in 0..patch_layer {
            assert_eq!(clean.hidden[l], patched.hidden[l], "layer {l} changed");
        }
        assert_eq!(patched.hidden[patch_layer], donor_vec);
        assert_ne!(clean.hidden[patch_layer + 1], patched.hidden[patch_layer + 1]);
    }

    #[test]
    fn patch_validation_errors() {
        let (model, manifest) = tiny_model();
        let trial = &manifest.trials[0];
        let mk = |layer: usize, vector: Vec<f32>| ForwardOptions {
            patch: Some(PatchSpec {
                layer,
                vector,
                donor_trial: String::new(),
                donor_layer: 0,
            }),
            ..Default::default()
        };
        // Layer out of range ([0, L)).
        let bad = mk(model.cfg.layers, vec![0.0; model.cfg.width]);
        assert!(model.forward(&trial.tokens, &trial.options, &bad).is_err());
        // Wrong width.
        let bad = mk(0, vec![0.0; model.cfg.width + 1]);
        assert!(model.forward(&trial.tokens, &trial.options, &bad).is_err());
        // Non-finite.
        let bad = mk(0, vec![f32::NAN; model.cfg.width]);
        assert!(model.forward(&trial.tokens, &trial.options, &bad).is_err());
    }

    #[test]
    fn mask_multiplier_one_is_bitwise_noop() {
        let (model, manifest) = tiny_model();
        let trial = &manifest.trials[3];
        let (a, b) = trial.anchor_span();
        let edit = MaskEdit::from_multiplier(model.cfg.layers - 1, (a, b), 1.0).unwrap();
        assert_eq!(edit.additive, 0.0);
        let (_, clean) = model.eval_trial(trial, &ForwardOptions::capture()).unwrap();
        let opts = ForwardOptions {
            mask_edits: vec![edit],
            capture: true,
            ..Default::default()
        };
        let (_, edited) = model.eval_trial(trial, &opts).unwrap();
        assert_eq!(clean.option_logits, edited.option_logits);
        assert_eq!(clean.hidden, edited.hidden);
        assert_eq!(clean.attention, edited.attention);
    }

    #[test]
    fn mask_zero_multiplier_suppresses_span() {
        let (model, manifest) = tiny_model();
        let trial = manifest
            .trials
            .iter()
            .find(|t| t.n_turns == 4)
            .unwrap();
        let (a, b) = trial.anchor_span();
        let edit = MaskEdit::from_multiplier(0, (a, b), 0.0).unwrap();
        assert_eq!(edit.additive, MASK_NEG);
        let opts = ForwardOptions {
            mask_edits: vec![edit],
            capture: true,
            ..Default::default()
        };
        let (_, trace) = model.eval_trial(trial, &opts).unwrap();
        for head_row in &trace.attention[0] {
            let span_mass: f32 = head_row[a..b].iter().sum();
            assert!(span_mass < 1e-6, "span mass {span_mass}");
            let total: f32 = head_row.iter().sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn mask_edits_touch_only_declared_coordinates() {
        // Pre-softmax scores must differ from the clean run exactly on the
        // final query row of the edited layer, inside the span, by the
        // additive, and nowhere else.
        let (model, manifest) = tiny_model();
        let trial = manifest.trials.iter().find(|t| t.n_turns == 4).unwrap();
        let (a, b) = trial.anchor_span();
        let layer = 1usize;
        let additive = (4.0f64).ln() as f32;
        let opts_clean = ForwardOptions {
            capture_scores: true,
            ..Default::default()
        };
        let (_, clean) = model.eval_trial(trial, &opts_clean).unwrap();
        let opts_edit = ForwardOptions {
            mask_edits: vec![MaskEdit {
                layer,
                span: (a, b),
                additive,
            }],
            capture_scores: true,
            ..Default::default()
        };
        let (_, edited) = model.eval_trial(trial, &opts_edit).unwrap();
        let cs = clean.scores.as_ref().unwrap();
        let es = edited.scores.as_ref().unwrap();
        let t_last = trial.tokens.len() - 1;
        for l in 0..model.cfg.layers {
            for h in 0..model.cfg.heads {
                for q in 0..trial.tokens.len() {
                    for k in 0..=q {
                        let c = cs[l][h][q][k];
                        let e = es[l][h][q][k];
                        let in_edit = l == layer && q == t_last && k >= a && k < b;
                        if in_edit {
                            assert_eq!(e, c + additive);
                        } else if l <= layer {
                            // Layers at or below the edit, outside the edited
                            // coordinates, are bitwise identical (the edit
                            // only propagates downstream of its layer).
                            assert_eq!(e, c, "({l},{h},{q},{k})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mask_span_validation() {
        let (model, manifest) = tiny_model();
        let trial = &manifest.trials[0];
        let t = trial.tokens.len();
        let bad = ForwardOptions {
            mask_edits: vec![MaskEdit {
                layer: 0,
                span: (t, t + 1),
                additive: 1.0,
            }],
            ..Default::default()
        };
        assert!(model.forward(&trial.tokens, &trial.options, &bad).is_err());
        assert!(MaskEdit::from_multiplier(0, (0, 1), -1.0).is_err());
        assert!(MaskEdit::from_multiplier(0, (0, 1), f64::NAN).is_err());
    }

    #[test]
    fn batch_eval_empty_and_order() {
        let (model, manifest) = tiny_model();
        assert!(batch_eval(&model, &[]).unwrap().is_empty());
        let outcomes = batch_eval(&model, &manifest.trials).unwrap();
        assert_eq!(outcomes.len(), manifest.trials.len());
        for (o, t) in outcomes.iter().zip(&manifest.trials) {
            assert_eq!(o.trial_id, t.trial_id);
            assert_eq!(o.correct, o.predicted_option == t.correct_option);
        }
        // Serial evaluation gives the identical result.
        let serial: Vec<TrialOutcome> = manifest
            .trials
            .iter()
            .map(|t| model.eval_trial(t, &ForwardOptions::default()).unwrap().0)
            .collect();
        for (a, b) in outcomes.iter().zip(&serial) {
            assert_eq!(a.option_logits, b.option_logits);
            assert_eq!(a.predicted_option, b.predicted_option);
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let (model, manifest) = tiny_model();
        let trial = &manifest.trials[0];
        // Token out of range.
        let mut toks = trial.tokens.clone();
        toks[0] = model.cfg.vocab_size as Token;
        assert!(model
            .forward(&toks, &trial.options, &ForwardOptions::default())
            .is_err());
        // Over-long sequence.
        let long = vec![1 as Token; model.cfg.max_seq_len + 1];
        assert!(model
            .forward(&long, &trial.options, &ForwardOptions::default())
            .is_err());
        // Empty.
        assert!(model
            .forward(&[], &trial.options, &ForwardOptions::default())
            .is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let (model, manifest) = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        model.save(&stem).unwrap();
        let loaded = Model::load(&stem).unwrap();
        assert_eq!(model, loaded);
        // And it evaluates identically.
        let t = &manifest.trials[0];
        let a = model.forward(&t.tokens, &t.options, &ForwardOptions::default()).unwrap();
        let b = loaded.forward(&t.tokens, &t.options, &ForwardOptions::default()).unwrap();
        assert_eq!(a.option_logits, b.option_logits);
    }

    #[test]
    fn checkpoint_shape_mismatch_detected() {
        let (model, _) = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        model.save(&stem).unwrap();
        // Truncate the binary: loader must notice.
        let bin = stem.with_extension("bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        match Model::load(&stem) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_checkpoint_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        match Model::load(&dir.path().join("absent")) {
            Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "train"),
            other => panic!("expected missing artifact, got {other:?}"),
        }
    }
}
