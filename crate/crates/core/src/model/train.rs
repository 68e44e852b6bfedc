//! Training loop: full-sequence backprop, AdamW, and a length-skewed
//! sampling mixture.
//!
//! The loss is cross-entropy over the full vocabulary at the final position,
//! with the correct option token as the target. Batches are drawn from the
//! training split with per-length weights (`length_weights`), which is the
//! knob that starves long contexts and induces the long-context acoustic
//! failures the analyses study.
//!
//! Determinism: batch composition comes from a per-step derived stream, and
//! gradient accumulation over the batch is sequential in batch order, so a
//! training run is bitwise reproducible on any thread count.

use serde::{Deserialize, Serialize};

use super::math;
use super::{Block, Model};
use crate::corpus::{CorpusManifest, ProbeKind, Trial};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_table, AccuracyTable, OutcomeRow};
use crate::rng;
use crate::vocab::Token;
use rand::Rng;

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Decoupled weight decay, applied to matrices only.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup steps before the constant learning rate.
    pub warmup_steps: usize,
    pub seed: u64,
    /// Sampling weight per context length; the batch mixture over N follows
    /// these weights regardless of per-cell counts. A weight of 0.0 excludes
    /// the length from training (it is still evaluated).
    pub length_weights: Vec<(usize, f64)>,
    /// Per-kind overrides of `length_weights`. Lengths listed here replace
    /// the shared weight for that probe kind only; this skew is the knob
    /// that induces long-context failures for one kind while the other
    /// keeps full-length supervision.
    pub acoustic_length_weights: Option<Vec<(usize, f64)>>,
    pub semantic_length_weights: Option<Vec<(usize, f64)>>,
    /// Templates per (class, N) cell held out of training for evaluation.
    pub eval_per_cell: usize,
    /// Record a loss-curve point every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 600,
            batch_size: 16,
            lr: 1.5e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            warmup_steps: 60,
            seed: 0,
            length_weights: vec![(2, 0.50), (4, 0.25), (8, 0.15), (16, 0.10)],
            acoustic_length_weights: Some(vec![(2, 0.50), (4, 0.0), (8, 0.0), (16, 0.0)]),
            semantic_length_weights: None,
            eval_per_cell: 4,
            log_every: 50,
        }
    }
}

/// Summary of a completed run: held-out accuracy per (kind, N) plus the loss
/// trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub train_examples: usize,
    pub eval_trials: usize,
    pub final_loss: f64,
    pub loss_curve: Vec<(usize, f64)>,
    pub heldout: AccuracyTable,
    pub config: TrainConfig,
}

// ---------------------------------------------------------------------------
// Tensor-order bookkeeping (must mirror Model::tensors()).
// ---------------------------------------------------------------------------

const PER_BLOCK: usize = 16;
const T_TOK: usize = 0;
const T_POS: usize = 1;
const B_LN1G: usize = 0;
const B_LN1B: usize = 1;
const B_WQ: usize = 2;
const B_BQ: usize = 3;
const B_WK: usize = 4;
const B_BK: usize = 5;
const B_WV: usize = 6;
const B_BV: usize = 7;
const B_WO: usize = 8;
const B_BO: usize = 9;
const B_LN2G: usize = 10;
const B_LN2B: usize = 11;
const B_W1: usize = 12;
const B_B1: usize = 13;
const B_W2: usize = 14;
const B_B2: usize = 15;

fn block_slot(layer: usize, which: usize) -> usize {
    2 + layer * PER_BLOCK + which
}

fn lnf_gain_slot(layers: usize) -> usize {
    2 + layers * PER_BLOCK
}

fn unembed_slot(layers: usize) -> usize {
    lnf_gain_slot(layers) + 2
}

/// Gradient (or moment) buffers in canonical tensor order.
struct Buffers {
    data: Vec<Vec<f32>>,
}

impl Buffers {
    fn zeros_like(model: &Model) -> Buffers {
        Buffers {
            data: model
                .tensors()
                .iter()
                .map(|(_, t)| vec![0.0f32; t.len()])
                .collect(),
        }
    }

    fn zero(&mut self) {
        for t in &mut self.data {
            for v in t.iter_mut() {
                *v = 0.0;
            }
        }
    }

    /// Mutable views of a weight slot and its bias slot (always adjacent).
    fn weight_bias_mut(&mut self, w_slot: usize, b_slot: usize) -> (&mut [f32], &mut [f32]) {
        debug_assert_eq!(b_slot, w_slot + 1);
        let (head, tail) = self.data.split_at_mut(b_slot);
        (&mut head[w_slot], &mut tail[0])
    }
}

/// Per-sequence activation storage for backward.
struct Tape {
    t_len: usize,
    // Per block:
    x_in: Vec<Vec<f32>>,     // input residual (T*d)
    ln1_out: Vec<Vec<f32>>,  // (T*d)
    ln1_mean: Vec<Vec<f32>>, // (T)
    ln1_rstd: Vec<Vec<f32>>,
    q: Vec<Vec<f32>>,
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    probs: Vec<Vec<f32>>, // (H*T*T) post-softmax, row-major [h][q][k]
    attn_cat: Vec<Vec<f32>>,
    x_mid: Vec<Vec<f32>>, // residual after attention (T*d)
    ln2_out: Vec<Vec<f32>>,
    ln2_mean: Vec<Vec<f32>>,
    ln2_rstd: Vec<Vec<f32>>,
    mlp_pre: Vec<Vec<f32>>, // (T*m)
    mlp_act: Vec<Vec<f32>>,
    // Final:
    x_out: Vec<f32>,  // (T*d) output of last block
    lnf_out: Vec<f32>, // (d) at last position
    lnf_mean: f32,
    lnf_rstd: f32,
    logits: Vec<f32>, // (V)
    probs_out: Vec<f32>,
}

/// Forward pass that records everything backward needs. The arithmetic is
/// kept in the exact op order of `Model::forward` so that the two paths are
/// bit-identical (asserted in tests).
fn forward_tape(model: &Model, tokens: &[Token]) -> Tape {
    let cfg = &model.cfg;
    let d = cfg.width;
    let h = cfg.heads;
    let dh = cfg.head_dim();
    let m = cfg.mlp_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let t_len = tokens.len();
    let l = cfg.layers;

    let mut x = vec![0.0f32; t_len * d];
    for t in 0..t_len {
        let tok = tokens[t] as usize;
        for i in 0..d {
            x[t * d + i] = model.tok_emb[tok * d + i] + model.pos_emb[t * d + i];
        }
    }

    let mut tape = Tape {
        t_len,
        x_in: Vec::with_capacity(l),
        ln1_out: Vec::with_capacity(l),
        ln1_mean: Vec::with_capacity(l),
        ln1_rstd: Vec::with_capacity(l),
        q: Vec::with_capacity(l),
        k: Vec::with_capacity(l),
        v: Vec::with_capacity(l),
        probs: Vec::with_capacity(l),
        attn_cat: Vec::with_capacity(l),
        x_mid: Vec::with_capacity(l),
        ln2_out: Vec::with_capacity(l),
        ln2_mean: Vec::with_capacity(l),
        ln2_rstd: Vec::with_capacity(l),
        mlp_pre: Vec::with_capacity(l),
        mlp_act: Vec::with_capacity(l),
        x_out: Vec::new(),
        lnf_out: vec![0.0; d],
        lnf_mean: 0.0,
        lnf_rstd: 0.0,
        logits: vec![0.0; cfg.vocab_size],
        probs_out: vec![0.0; cfg.vocab_size],
    };

    for blk in &model.blocks {
        tape.x_in.push(x.clone());
        let mut ln1_out = vec![0.0f32; t_len * d];
        let mut ln1_mean = vec![0.0f32; t_len];
        let mut ln1_rstd = vec![0.0f32; t_len];
        for t in 0..t_len {
            let (mu, rs) = math::layernorm(
                &x[t * d..(t + 1) * d],
                &blk.ln1.gain,
                &blk.ln1.bias,
                &mut ln1_out[t * d..(t + 1) * d],
            );
            ln1_mean[t] = mu;
            ln1_rstd[t] = rs;
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

        let mut probs = vec![0.0f32; h * t_len * t_len];
        let mut attn_cat = vec![0.0f32; t_len * d];
        let mut row = vec![0.0f32; t_len];
        for head in 0..h {
            let off = head * dh;
            for t in 0..t_len {
                let qv = &q[t * d + off..t * d + off + dh];
                for key in 0..=t {
                    let kv = &k[key * d + off..key * d + off + dh];
                    row[key] = math::dot(qv, kv) * scale;
                }
                math::softmax_inplace(&mut row[..=t]);
                let prow = &mut probs[(head * t_len + t) * t_len..(head * t_len + t + 1) * t_len];
                prow[..=t].copy_from_slice(&row[..=t]);
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
            for i in 0..d {
                x[t * d + i] += proj[i];
            }
        }
        tape.x_mid.push(x.clone());

        let mut ln2_out = vec![0.0f32; t_len * d];
        let mut ln2_mean = vec![0.0f32; t_len];
        let mut ln2_rstd = vec![0.0f32; t_len];
        let mut mlp_pre = vec![0.0f32; t_len * m];
        let mut mlp_act = vec![0.0f32; t_len * m];
        let mut mlp_out = vec![0.0f32; d];
        for t in 0..t_len {
            let (mu, rs) = math::layernorm(
                &x[t * d..(t + 1) * d],
                &blk.ln2.gain,
                &blk.ln2.bias,
                &mut ln2_out[t * d..(t + 1) * d],
            );
            ln2_mean[t] = mu;
            ln2_rstd[t] = rs;
            math::affine(
                &blk.w1,
                &blk.b1,
                &ln2_out[t * d..(t + 1) * d],
                &mut mlp_pre[t * m..(t + 1) * m],
            );
            for i in 0..m {
                mlp_act[t * m + i] = math::gelu(mlp_pre[t * m + i]);
            }
            math::affine(&blk.w2, &blk.b2, &mlp_act[t * m..(t + 1) * m], &mut mlp_out);
            for i in 0..d {
                x[t * d + i] += mlp_out[i];
            }
        }

        tape.ln1_out.push(ln1_out);
        tape.ln1_mean.push(ln1_mean);
        tape.ln1_rstd.push(ln1_rstd);
        tape.q.push(q);
        tape.k.push(k);
        tape.v.push(v);
        tape.probs.push(probs);
        tape.attn_cat.push(attn_cat);
        tape.ln2_out.push(ln2_out);
        tape.ln2_mean.push(ln2_mean);
        tape.ln2_rstd.push(ln2_rstd);
        tape.mlp_pre.push(mlp_pre);
        tape.mlp_act.push(mlp_act);
    }

    let last = t_len - 1;
    let (mu, rs) = math::layernorm(
        &x[last * d..(last + 1) * d],
        &model.ln_f.gain,
        &model.ln_f.bias,
        &mut tape.lnf_out,
    );
    tape.lnf_mean = mu;
    tape.lnf_rstd = rs;
    for vtok in 0..cfg.vocab_size {
        tape.logits[vtok] = math::dot(&model.unembed[vtok * d..(vtok + 1) * d], &tape.lnf_out);
    }
    tape.probs_out.copy_from_slice(&tape.logits);
    math::softmax_inplace(&mut tape.probs_out);
    tape.x_out = x;
    tape
}

/// Backward pass for one sequence; accumulates gradients into `grads` and
/// returns the cross-entropy loss.
fn backward_tape(
    model: &Model,
    tokens: &[Token],
    target: Token,
    tape: &Tape,
    grads: &mut Buffers,
) -> f64 {
    let cfg = &model.cfg;
    let d = cfg.width;
    let h = cfg.heads;
    let dh = cfg.head_dim();
    let m = cfg.mlp_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let t_len = tape.t_len;
    let last = t_len - 1;
    let l = cfg.layers;

    let p_target = tape.probs_out[target as usize].max(1e-30);
    let loss = -(p_target as f64).ln();

    // d logits
    let mut dlogits = tape.probs_out.clone();
    dlogits[target as usize] -= 1.0;

    // Unembed backward.
    let mut dlnf = vec![0.0f32; d];
    {
        let gu = &mut grads.data[unembed_slot(l)];
        for vtok in 0..cfg.vocab_size {
            let g = dlogits[vtok];
            if g == 0.0 {
                continue;
            }
            let wrow = &model.unembed[vtok * d..(vtok + 1) * d];
            let grow = &mut gu[vtok * d..(vtok + 1) * d];
            for i in 0..d {
                grow[i] += g * tape.lnf_out[i];
                dlnf[i] += g * wrow[i];
            }
        }
    }

    // Final layernorm backward (only the last position has gradient).
    let mut dx = vec![0.0f32; t_len * d];
    {
        let (g_slot, b_slot) = (lnf_gain_slot(l), lnf_gain_slot(l) + 1);
        let mut dgain = std::mem::take(&mut grads.data[g_slot]);
        let mut dbias = std::mem::take(&mut grads.data[b_slot]);
        let mut dxl = vec![0.0f32; d];
        math::layernorm_backward(
            &tape.x_out[last * d..(last + 1) * d],
            &model.ln_f.gain,
            tape.lnf_mean,
            tape.lnf_rstd,
            &dlnf,
            &mut dgain,
            &mut dbias,
            &mut dxl,
        );
        dx[last * d..(last + 1) * d].copy_from_slice(&dxl);
        grads.data[g_slot] = dgain;
        grads.data[b_slot] = dbias;
    }

    // Blocks in reverse.
    let mut dtmp = vec![0.0f32; d];
    for li in (0..l).rev() {
        let blk: &Block = &model.blocks[li];

        // --- MLP branch ---
        let mut dxmid = dx.clone(); // residual passthrough
        {
            let mut dact = vec![0.0f32; m];
            let mut dpre = vec![0.0f32; m];
            let mut dln2 = vec![0.0f32; d];
            for t in 0..t_len {
                let dxt = &dx[t * d..(t + 1) * d];
                if dxt.iter().all(|&g| g == 0.0) {
                    continue;
                }
                // dL/d mlp_out = dxt; backward through W2.
                {
                    let (gw2, gb2) = grads.weight_bias_mut(block_slot(li, B_W2), block_slot(li, B_B2));
                    math::affine_backward(
                        &blk.w2,
                        &tape.mlp_act[li][t * m..(t + 1) * m],
                        dxt,
                        gw2,
                        gb2,
                        &mut dact,
                    );
                }
                for i in 0..m {
                    dpre[i] = dact[i] * math::gelu_grad(tape.mlp_pre[li][t * m + i]);
                }
                {
                    let (gw1, gb1) = grads.weight_bias_mut(block_slot(li, B_W1), block_slot(li, B_B1));
                    math::affine_backward(
                        &blk.w1,
                        &tape.ln2_out[li][t * d..(t + 1) * d],
                        &dpre,
                        gw1,
                        gb1,
                        &mut dln2,
                    );
                }
                {
                    let g_slot = block_slot(li, B_LN2G);
                    let b_slot = block_slot(li, B_LN2B);
                    let mut dgain = std::mem::take(&mut grads.data[g_slot]);
                    let mut dbias = std::mem::take(&mut grads.data[b_slot]);
                    math::layernorm_backward(
                        &tape.x_mid[li][t * d..(t + 1) * d],
                        &blk.ln2.gain,
                        tape.ln2_mean[li][t],
                        tape.ln2_rstd[li][t],
                        &dln2,
                        &mut dgain,
                        &mut dbias,
                        &mut dtmp,
                    );
                    grads.data[g_slot] = dgain;
                    grads.data[b_slot] = dbias;
                }
                let dxm = &mut dxmid[t * d..(t + 1) * d];
                for i in 0..d {
                    dxm[i] += dtmp[i];
                }
            }
        }

        // --- Attention branch ---
        let mut dxin = dxmid.clone(); // residual passthrough
        {
            // dL/d attn_cat via Wo.
            let mut dcat = vec![0.0f32; t_len * d];
            {
                let (gwo, gbo) = grads.weight_bias_mut(block_slot(li, B_WO), block_slot(li, B_BO));
                let mut dct = vec![0.0f32; d];
                for t in 0..t_len {
                    let dy = &dxmid[t * d..(t + 1) * d];
                    if dy.iter().all(|&g| g == 0.0) {
                        continue;
                    }
                    math::affine_backward(
                        &blk.wo,
                        &tape.attn_cat[li][t * d..(t + 1) * d],
                        dy,
                        gwo,
                        gbo,
                        &mut dct,
                    );
                    dcat[t * d..(t + 1) * d].copy_from_slice(&dct);
                }
            }

            let q = &tape.q[li];
            let k = &tape.k[li];
            let v = &tape.v[li];
            let probs = &tape.probs[li];
            let mut dq = vec![0.0f32; t_len * d];
            let mut dk = vec![0.0f32; t_len * d];
            let mut dv = vec![0.0f32; t_len * d];
            let mut dprow = vec![0.0f32; t_len];
            let mut dsrow = vec![0.0f32; t_len];
            for head in 0..h {
                let off = head * dh;
                for t in 0..t_len {
                    let dctx = &dcat[t * d + off..t * d + off + dh];
                    if dctx.iter().all(|&g| g == 0.0) {
                        continue;
                    }
                    let prow = &probs[(head * t_len + t) * t_len..(head * t_len + t) * t_len + t_len];
                    // d probs and d v.
                    for key in 0..=t {
                        let vv = &v[key * d + off..key * d + off + dh];
                        dprow[key] = math::dot(dctx, vv);
                        let p = prow[key];
                        let dvk = &mut dv[key * d + off..key * d + off + dh];
                        for i in 0..dh {
                            dvk[i] += p * dctx[i];
                        }
                    }
                    // Softmax backward on the row.
                    let mut inner = 0.0f32;
                    for key in 0..=t {
                        inner += prow[key] * dprow[key];
                    }
                    for key in 0..=t {
                        dsrow[key] = prow[key] * (dprow[key] - inner);
                    }
                    // Scores backward.
                    let qv = &q[t * d + off..t * d + off + dh];
                    let dqv = &mut dq[t * d + off..t * d + off + dh];
                    for key in 0..=t {
                        let ds = dsrow[key] * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kv = &k[key * d + off..key * d + off + dh];
                        let dkv = &mut dk[key * d + off..key * d + off + dh];
                        for i in 0..dh {
                            dqv[i] += ds * kv[i];
                            dkv[i] += ds * qv[i];
                        }
                    }
                }
            }

            // Backward through the QKV projections into ln1.
            let mut dln1 = vec![0.0f32; t_len * d];
            {
                let mut dtmp_row = vec![0.0f32; d];
                for t in 0..t_len {
                    let ln = &tape.ln1_out[li][t * d..(t + 1) * d];
                    let apply = |w: &[f32],
                                     dy: &[f32],
                                     gw_slot: usize,
                                     gb_slot: usize,
                                     dln_row: &mut [f32],
                                     dtmp_row: &mut [f32],
                                     grads: &mut Buffers| {
                        if dy.iter().all(|&gg| gg == 0.0) {
                            return;
                        }
                        let mut gw = std::mem::take(&mut grads.data[gw_slot]);
                        let mut gb = std::mem::take(&mut grads.data[gb_slot]);
                        math::affine_backward(w, ln, dy, &mut gw, &mut gb, dtmp_row);
                        grads.data[gw_slot] = gw;
                        grads.data[gb_slot] = gb;
                        for i in 0..dln_row.len() {
                            dln_row[i] += dtmp_row[i];
                        }
                    };
                    let dln_row_buf = &mut dln1[t * d..(t + 1) * d];
                    apply(
                        &blk.wq,
                        &dq[t * d..(t + 1) * d],
                        block_slot(li, B_WQ),
                        block_slot(li, B_BQ),
                        dln_row_buf,
                        &mut dtmp_row,
                        grads,
                    );
                    apply(
                        &blk.wk,
                        &dk[t * d..(t + 1) * d],
                        block_slot(li, B_WK),
                        block_slot(li, B_BK),
                        dln_row_buf,
                        &mut dtmp_row,
                        grads,
                    );
                    apply(
                        &blk.wv,
                        &dv[t * d..(t + 1) * d],
                        block_slot(li, B_WV),
                        block_slot(li, B_BV),
                        dln_row_buf,
                        &mut dtmp_row,
                        grads,
                    );
                }
            }
            // ln1 backward into the block input.
            {
                let g_slot = block_slot(li, B_LN1G);
                let b_slot = block_slot(li, B_LN1B);
                let mut dgain = std::mem::take(&mut grads.data[g_slot]);
                let mut dbias = std::mem::take(&mut grads.data[b_slot]);
                for t in 0..t_len {
                    let dy = &dln1[t * d..(t + 1) * d];
                    if dy.iter().all(|&g| g == 0.0) {
                        continue;
                    }
                    math::layernorm_backward(
                        &tape.x_in[li][t * d..(t + 1) * d],
                        &blk.ln1.gain,
                        tape.ln1_mean[li][t],
                        tape.ln1_rstd[li][t],
                        dy,
                        &mut dgain,
                        &mut dbias,
                        &mut dtmp,
                    );
                    let dxi = &mut dxin[t * d..(t + 1) * d];
                    for i in 0..d {
                        dxi[i] += dtmp[i];
                    }
                }
                grads.data[g_slot] = dgain;
                grads.data[b_slot] = dbias;
            }
        }
        dx = dxin;
    }

    // Embedding backward.
    {
        let (gtok_slot, gpos_slot) = (T_TOK, T_POS);
        for t in 0..t_len {
            let dy = &dx[t * d..(t + 1) * d];
            let tok = tokens[t] as usize;
            {
                let gtok = &mut grads.data[gtok_slot];
                for i in 0..d {
                    gtok[tok * d + i] += dy[i];
                }
            }
            {
                let gpos = &mut grads.data[gpos_slot];
                for i in 0..d {
                    gpos[t * d + i] += dy[i];
                }
            }
        }
    }

    loss
}

/// Training split: per (class, N) cell, the lexicographically last
/// `eval_per_cell` template ids are held out.
pub fn split_templates(
    manifest: &CorpusManifest,
    eval_per_cell: usize,
) -> Result<(Vec<&Trial>, Vec<&Trial>)> {
    let cfg = &manifest.config;
    if eval_per_cell >= cfg.per_cell {
        return Err(Error::config(format!(
            "eval_per_cell {} must be below per_cell {}",
            eval_per_cell, cfg.per_cell
        )));
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for class in 0..cfg.classes {
        for &n in &cfg.lengths {
            let mut ids: Vec<&str> = manifest
                .trials
                .iter()
                .filter(|t| t.anchor_class == class && t.n_turns == n)
                .map(|t| t.template_id.as_str())
                .collect();
            ids.sort_unstable();
            ids.dedup();
            let cut = ids.len().saturating_sub(eval_per_cell);
            let eval_ids: std::collections::BTreeSet<&str> = ids[cut..].iter().copied().collect();
            for t in manifest
                .trials
                .iter()
                .filter(|t| t.anchor_class == class && t.n_turns == n)
            {
                if eval_ids.contains(t.template_id.as_str()) {
                    eval.push(t);
                } else {
                    train.push(t);
                }
            }
        }
    }
    Ok((train, eval))
}

/// Trains `model` in place on the training split of `manifest`.
pub fn train(model: &mut Model, manifest: &CorpusManifest, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::config("steps and batch_size must be nonzero"));
    }
    let (train_trials, eval_trials) = split_templates(manifest, cfg.eval_per_cell)?;
    if train_trials.is_empty() {
        return Err(Error::config("training split is empty"));
    }

    // Per-example sampling weights: the batch mixture over (kind, N) follows
    // the length weights, with optional per-kind overrides.
    let weight_of = |kind: ProbeKind, n: usize| -> Result<f64> {
        let overrides = match kind {
            ProbeKind::Acoustic => cfg.acoustic_length_weights.as_ref(),
            ProbeKind::Semantic => cfg.semantic_length_weights.as_ref(),
        };
        if let Some(list) = overrides {
            if let Some((_, w)) = list.iter().find(|(ln, _)| *ln == n) {
                return Ok(*w);
            }
        }
        cfg.length_weights
            .iter()
            .find(|(ln, _)| *ln == n)
            .map(|(_, w)| *w)
            .ok_or_else(|| Error::config(format!("no length weight for {} N={n}", kind.tag())))
    };
    let mut count_by_cell: Vec<(ProbeKind, usize, usize)> = Vec::new();
    for t in &train_trials {
        match count_by_cell
            .iter_mut()
            .find(|(k, n, _)| *k == t.probe_kind && *n == t.n_turns)
        {
            Some((_, _, c)) => *c += 1,
            None => count_by_cell.push((t.probe_kind, t.n_turns, 1)),
        }
    }
    let mut cumulative = Vec::with_capacity(train_trials.len());
    let mut total = 0.0f64;
    for t in &train_trials {
        let cell_count = count_by_cell
            .iter()
            .find(|(k, n, _)| *k == t.probe_kind && *n == t.n_turns)
            .map(|(_, _, c)| *c)
            .unwrap_or(1);
        total += weight_of(t.probe_kind, t.n_turns)? / cell_count as f64;
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::config(
            "all sampling weights are zero; nothing to train on",
        ));
    }

    let mut grads = Buffers::zeros_like(model);
    let mut m1 = Buffers::zeros_like(model);
    let mut m2 = Buffers::zeros_like(model);
    let decay_mask: Vec<bool> = model
        .tensors()
        .iter()
        .map(|(name, _)| {
            // Decay matrices only: no biases, no layer norms.
            !(name.contains("ln") || name.contains(".b"))
        })
        .collect();

    let mut loss_curve = Vec::new();
    let mut last_loss = f64::NAN;
    for step in 0..cfg.steps {
        let mut batch_rng = rng::stream(cfg.seed, "train.batch", &[step as u64]);
        grads.zero();
        let mut batch_loss = 0.0f64;
        for _ in 0..cfg.batch_size {
            let u: f64 = batch_rng.gen_range(0.0..total);
            let idx = cumulative.partition_point(|&c| c <= u).min(train_trials.len() - 1);
            let trial = train_trials[idx];
            let tape = forward_tape(model, &trial.tokens);
            batch_loss += backward_tape(
                model,
                &trial.tokens,
                trial.correct_token(),
                &tape,
                &mut grads,
            );
        }
        batch_loss /= cfg.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite training loss at step {step}"
            )));
        }
        last_loss = batch_loss;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            loss_curve.push((step, batch_loss));
        }

        // AdamW update.
        let lr = if step < cfg.warmup_steps {
            cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64
        } else {
            cfg.lr
        };
        let tstep = (step + 1) as f64;
        let bc1 = 1.0 - cfg.beta1.powf(tstep);
        let bc2 = 1.0 - cfg.beta2.powf(tstep);
        let scale = 1.0 / cfg.batch_size as f32;
        let mut tensors = model.tensors_mut();
        for (slot, (_, param)) in tensors.iter_mut().enumerate() {
            let g = &grads.data[slot];
            let m = &mut m1.data[slot];
            let v = &mut m2.data[slot];
            let decay = if decay_mask[slot] {
                cfg.weight_decay as f32
            } else {
                0.0
            };
            let b1 = cfg.beta1 as f32;
            let b2 = cfg.beta2 as f32;
            let lr32 = lr as f32;
            let eps = cfg.eps as f32;
            let bc1 = bc1 as f32;
            let bc2 = bc2 as f32;
            for i in 0..param.len() {
                let gi = g[i] * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param[i] -= lr32 * (mhat / (vhat.sqrt() + eps) + decay * param[i]);
            }
        }
    }

    // Held-out evaluation.
    let eval_owned: Vec<Trial> = eval_trials.iter().map(|t| (*t).clone()).collect();
    let outcomes = super::batch_eval(model, &eval_owned)?;
    let rows: Vec<OutcomeRow> = outcomes
        .iter()
        .map(|o| OutcomeRow {
            kind: o.probe_kind,
            n_turns: o.n_turns,
            correct: o.correct,
        })
        .collect();
    let heldout = accuracy_table(&rows)?;

    Ok(TrainReport {
        steps: cfg.steps,
        train_examples: train_trials.len(),
        eval_trials: eval_owned.len(),
        final_loss: last_loss,
        loss_curve,
        heldout,
        config: cfg.clone(),
    })
}

/// Loss of `model` on one example (used by tests and sanity checks).
#[cfg(test)]
pub(crate) fn example_loss(model: &Model, tokens: &[Token], target: Token) -> f64 {
    let tape = forward_tape(model, tokens);
    -((tape.probs_out[target as usize].max(1e-30) as f64).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, CorpusConfig};
    use crate::model::{ForwardOptions, Model, ModelConfig};

    fn small_setup() -> (Model, crate::corpus::CorpusManifest) {
        let ccfg = CorpusConfig {
            classes: 4,
            lengths: vec![2, 4],
            per_cell: 6,
            master_seed: 13,
            ..CorpusConfig::default()
        };
        let manifest = build_corpus(&ccfg).unwrap();
        let mcfg = ModelConfig {
            layers: 2,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            max_seq_len: 48,
            vocab_size: manifest.vocab_size,
            init_std: 0.02,
            seed: 9,
        };
        (Model::init(mcfg).unwrap(), manifest)
    }

    #[test]
    fn tensor_slots_match_canonical_order() {
        let (model, _) = small_setup();
        let names: Vec<String> = model.tensors().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names[T_TOK], "tok_emb");
        assert_eq!(names[T_POS], "pos_emb");
        assert_eq!(names[block_slot(0, B_WQ)], "block0.wq");
        assert_eq!(names[block_slot(1, B_B2)], "block1.b2");
        assert_eq!(names[lnf_gain_slot(2)], "ln_f.gain");
        assert_eq!(names[unembed_slot(2)], "unembed");
    }

    #[test]
    fn tape_forward_matches_eval_forward_bitwise() {
        let (model, manifest) = small_setup();
        for trial in manifest.trials.iter().take(4) {
            let tape = forward_tape(&model, &trial.tokens);
            let trace = model
                .forward(&trial.tokens, &trial.options, &ForwardOptions::default())
                .unwrap();
            for (i, &opt) in trial.options.iter().enumerate() {
                assert_eq!(trace.option_logits[i], tape.logits[opt as usize]);
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_difference() {
        // Spot-check dL/dtheta on a handful of coordinates in every tensor
        // family. f32 limits precision; 2e-2 relative agreement is the bar.
        let (model, manifest) = small_setup();
        let trial = &manifest.trials[3];
        let target = trial.correct_token();
        let tape = forward_tape(&model, &trial.tokens);
        let mut grads = Buffers::zeros_like(&model);
        backward_tape(&model, &trial.tokens, target, &tape, &mut grads);

        // In each tensor family, check the coordinate with the largest
        // gradient; tiny gradients drown in f32 round-off under central
        // differences, so require a floor before comparing.
        let slots = vec![
            T_TOK,
            T_POS,
            block_slot(0, B_WQ),
            block_slot(0, B_WK),
            block_slot(0, B_WV),
            block_slot(0, B_W1),
            block_slot(1, B_WO),
            block_slot(1, B_W2),
            block_slot(1, B_LN1G),
            block_slot(1, B_LN2G),
            lnf_gain_slot(2),
            unembed_slot(2),
        ];
        let h = 5e-3f32;
        let mut checked = 0;
        for slot in slots {
            let (idx, analytic) = grads.data[slot]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .map(|(i, &g)| (i, g as f64))
                .unwrap();
            if analytic.abs() < 1e-3 {
                continue;
            }
            let mut perturbed = model.clone();
            {
                let mut t = perturbed.tensors_mut();
                t[slot].1[idx] += h;
            }
            let lp = example_loss(&perturbed, &trial.tokens, target);
            {
                let mut t = perturbed.tensors_mut();
                t[slot].1[idx] -= 2.0 * h;
            }
            let lm = example_loss(&perturbed, &trial.tokens, target);
            let numeric = (lp - lm) / (2.0 * h as f64);
            let denom = analytic.abs().max(numeric.abs());
            assert!(
                (analytic - numeric).abs() / denom < 6e-2,
                "slot {slot} idx {idx}: analytic {analytic} vs numeric {numeric}"
            );
            checked += 1;
        }
        assert!(checked >= 6, "only {checked} tensors had usable gradients");
    }

    #[test]
    fn one_step_reduces_batch_loss() {
        let (mut model, manifest) = small_setup();
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 8,
            lr: 5e-3,
            warmup_steps: 1,
            eval_per_cell: 1,
            length_weights: vec![(2, 0.5), (4, 0.5)],
            acoustic_length_weights: None,
            ..TrainConfig::default()
        };
        // Loss of the step-0 batch before and after the update.
        let (train_trials, _) = split_templates(&manifest, 1).unwrap();
        let mut batch_rng = rng::stream(cfg.seed, "train.batch", &[0]);
        // Reconstruct the same batch the trainer draws at step 0.
        let weight_of = |n: usize| cfg.length_weights.iter().find(|(l, _)| *l == n).unwrap().1;
        let mut count_by_cell: Vec<(ProbeKind, usize, usize)> = Vec::new();
        for t in &train_trials {
            match count_by_cell
                .iter_mut()
                .find(|(k, n, _)| *k == t.probe_kind && *n == t.n_turns)
            {
                Some((_, _, c)) => *c += 1,
                None => count_by_cell.push((t.probe_kind, t.n_turns, 1)),
            }
        }
        let mut cumulative = Vec::new();
        let mut total = 0.0;
        for t in &train_trials {
            let c = count_by_cell
                .iter()
                .find(|(k, n, _)| *k == t.probe_kind && *n == t.n_turns)
                .unwrap()
                .2;
            total += weight_of(t.n_turns) / c as f64;
            cumulative.push(total);
        }
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| {
                let u: f64 = batch_rng.gen_range(0.0..total);
                cumulative.partition_point(|&c| c <= u).min(train_trials.len() - 1)
            })
            .collect();
        let loss_of = |m: &Model| -> f64 {
            batch
                .iter()
                .map(|&i| {
                    let t = train_trials[i];
                    example_loss(m, &t.tokens, t.correct_token())
                })
                .sum::<f64>()
                / batch.len() as f64
        };
        let before = loss_of(&model);
        train(&mut model, &manifest, &cfg).unwrap();
        let after = loss_of(&model);
        assert!(
            after < before,
            "loss did not decrease: {before} -> {after}"
        );
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let (model, manifest) = small_setup();
        let outcomes = crate::model::batch_eval(&model, &manifest.trials).unwrap();
        let acc = outcomes.iter().filter(|o| o.correct).count() as f64 / outcomes.len() as f64;
        // 4 options -> chance 0.25; an untrained model should sit near it.
        assert!((acc - 0.25).abs() < 0.15, "untrained accuracy {acc}");
    }

    #[test]
    fn training_is_reproducible() {
        let (model0, manifest) = small_setup();
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 4,
            eval_per_cell: 1,
            length_weights: vec![(2, 0.6), (4, 0.4)],
            ..TrainConfig::default()
        };
        let mut a = model0.clone();
        let mut b = model0.clone();
        let ra = train(&mut a, &manifest, &cfg).unwrap();
        let rb = train(&mut b, &manifest, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.final_loss, rb.final_loss);
        assert_eq!(ra.loss_curve, rb.loss_curve);
    }

    #[test]
    fn split_is_disjoint_and_within_cells() {
        let (_, manifest) = small_setup();
        let (train_trials, eval_trials) = split_templates(&manifest, 2).unwrap();
        assert_eq!(
            train_trials.len() + eval_trials.len(),
            manifest.trials.len()
        );
        let train_ids: std::collections::BTreeSet<&str> =
            train_trials.iter().map(|t| t.template_id.as_str()).collect();
        for e in &eval_trials {
            assert!(!train_ids.contains(e.template_id.as_str()));
        }
        // Every cell keeps exactly eval_per_cell * 2 sibling trials out.
        for class in 0..manifest.config.classes {
            for &n in &manifest.config.lengths {
                let c = eval_trials
                    .iter()
                    .filter(|t| t.anchor_class == class && t.n_turns == n)
                    .count();
                assert_eq!(c, 4, "class {class} n {n}");
            }
        }
    }

    #[test]
    fn kind_overrides_allow_zero_weight_but_not_all_zero() {
        let (mut model, manifest) = small_setup();
        // Excluding one (kind, N) cell is allowed.
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 4,
            eval_per_cell: 1,
            length_weights: vec![(2, 0.5), (4, 0.5)],
            acoustic_length_weights: Some(vec![(2, 1.0), (4, 0.0)]),
            ..TrainConfig::default()
        };
        train(&mut model, &manifest, &cfg).unwrap();
        // Zeroing every cell is a config error.
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 4,
            eval_per_cell: 1,
            length_weights: vec![(2, 0.0), (4, 0.0)],
            acoustic_length_weights: None,
            ..TrainConfig::default()
        };
        let err = train(&mut model, &manifest, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn train_errors_on_bad_config() {
        let (mut model, manifest) = small_setup();
        let cfg = TrainConfig {
            eval_per_cell: 99,
            ..TrainConfig::default()
        };
        assert!(train(&mut model, &manifest, &cfg).is_err());
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(train(&mut model, &manifest, &cfg).is_err());
        // Missing length weight.
        let cfg = TrainConfig {
            length_weights: vec![(2, 1.0)],
            eval_per_cell: 1,
            steps: 1,
            ..TrainConfig::default()
        };
        assert!(train(&mut model, &manifest, &cfg).is_err());
    }
}
