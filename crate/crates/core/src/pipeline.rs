//! Inference over long token streams: split the context into
//! fixed-length segments, compress each independently into memory KV
//! blocks, then generate token by token against the combined cache,
//! re-compressing the raw-token window whenever it fills up.
//!
//! Also hosts the auto-encoding task (compress one segment, reconstruct
//! it from memory alone) and an analytic FLOP counter kept deliberately
//! separate from the implementation.

use crate::nets::ToyTransformer;
use crate::opt::{LrSchedule, Optimizer};
use crate::params::{GradReport, ParamSet};
use crate::rng::{seed_rng, split};
use crate::tape::{Tape, TapeError, TapeResult, TensorId};

use rand::seq::SliceRandom as _;

/// A long input split into full segments plus a short tail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextPlan {
    pub segments: Vec<Vec<usize>>,
    /// Remaining tokens, always shorter than the segment length.
    pub residual: Vec<usize>,
}

impl ContextPlan {
    pub fn reassemble(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.segments.iter().flatten().copied().collect();
        out.extend_from_slice(&self.residual);
        out
    }
}

pub fn split_context(tokens: &[usize], seg_len: usize) -> ContextPlan {
    assert!(seg_len >= 1);
    let full = tokens.len() / seg_len;
    ContextPlan {
        segments: (0..full)
            .map(|i| tokens[i * seg_len..(i + 1) * seg_len].to_vec())
            .collect(),
        residual: tokens[full * seg_len..].to_vec(),
    }
}

/// One segment's memory, already projected to decoder rows:
/// per layer a (K, V) pair of `[k_mem, d_model]` row-major matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct MemKv {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

/// The decoder-side cache: memory blocks in segment order followed by
/// the raw residual tokens. Positions run contiguously from 0 across
/// the whole assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct KvAssembly {
    pub memory_kv: Vec<MemKv>,
    pub residual: Vec<usize>,
    pub position_base: usize,
}

impl KvAssembly {
    /// Cached decoder rows per layer for a given raw-token window.
    pub fn kv_rows(&self, k_mem: usize, window_len: usize) -> usize {
        self.memory_kv.len() * k_mem + window_len
    }
}

/// Encode one full segment and project it through the transfer head,
/// entirely on a private tape.
pub fn encode_to_kv(
    model: &ToyTransformer,
    params: &ParamSet,
    tokens: &[usize],
) -> TapeResult<MemKv> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mem = model.encode_segment(&mut tape, &bound, tokens)?;
    let transferred = model.transfer_memories(&mut tape, &bound, mem)?;
    Ok(MemKv {
        layers: transferred
            .into_iter()
            .map(|(k, v)| (tape.values(k).to_vec(), tape.values(v).to_vec()))
            .collect(),
    })
}

pub fn prefill(
    model: &ToyTransformer,
    params: &ParamSet,
    plan: &ContextPlan,
) -> TapeResult<KvAssembly> {
    let order: Vec<usize> = (0..plan.segments.len()).collect();
    prefill_in_order(model, params, plan, &order)
}

/// Prefill with an explicit encode order. Segments are independent, so
/// any permutation produces a bitwise-identical assembly.
pub fn prefill_in_order(
    model: &ToyTransformer,
    params: &ParamSet,
    plan: &ContextPlan,
    order: &[usize],
) -> TapeResult<KvAssembly> {
    assert_eq!(order.len(), plan.segments.len());
    let mut blocks: Vec<Option<MemKv>> = vec![None; plan.segments.len()];
    for &i in order {
        blocks[i] = Some(encode_to_kv(model, params, &plan.segments[i])?);
    }
    Ok(KvAssembly {
        memory_kv: blocks.into_iter().map(Option::unwrap).collect(),
        residual: plan.residual.clone(),
        position_base: 0,
    })
}

/// Raw-token window state during generation.
#[derive(Debug, Clone)]
pub struct GenState {
    /// Context residual still sitting in the window (first window only).
    pub residual: Vec<usize>,
    /// Tokens generated into the current window.
    pub generated: Vec<usize>,
    /// Query seed for an empty window: the final token of the last
    /// compressed window. Its KV is never cached — it is already part
    /// of the memory block covering it — so the row bound holds.
    pub last_token: Option<usize>,
    pub total_generated: usize,
}

impl GenState {
    pub fn start(plan: &ContextPlan) -> Self {
        GenState {
            residual: plan.residual.clone(),
            generated: Vec::new(),
            last_token: plan.segments.last().and_then(|s| s.last().copied()),
            total_generated: 0,
        }
    }

    pub fn window_len(&self) -> usize {
        self.residual.len() + self.generated.len()
    }

    fn window(&self) -> Vec<usize> {
        let mut w = self.residual.clone();
        w.extend_from_slice(&self.generated);
        w
    }
}

fn load_blocks(tape: &mut Tape, model: &ToyTransformer, assembly: &KvAssembly) -> Vec<Vec<(TensorId, TensorId)>> {
    let (k_mem, d) = (model.cfg.k_mem, model.cfg.d_model);
    assembly
        .memory_kv
        .iter()
        .map(|block| {
            block
                .layers
                .iter()
                .map(|(k, v)| {
                    (
                        tape.constant(k.clone(), vec![k_mem, d]),
                        tape.constant(v.clone(), vec![k_mem, d]),
                    )
                })
                .collect()
        })
        .collect()
}

fn argmax_token(row: &[f64], vocab: usize) -> usize {
    let mut best = 0;
    for t in 1..vocab {
        if row[t] > row[best] {
            best = t;
        }
    }
    best
}

/// Greedily generate one token against `[memory blocks, window]` and
/// append it to the window, compressing the window when it reaches the
/// segment length.
pub fn generate_step(
    model: &ToyTransformer,
    params: &ParamSet,
    assembly: &mut KvAssembly,
    state: &mut GenState,
) -> TapeResult<usize> {
    let window = state.window();
    let query = if window.is_empty() {
        vec![state.last_token.ok_or_else(|| TapeError::Invalid {
            op: "generate_step",
            msg: "cannot generate from an empty context".into(),
        })?]
    } else {
        window
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let transferred = load_blocks(&mut tape, model, assembly);
    let logits = model.decode_logits(&mut tape, &bound, &query, &transferred)?;
    let vocab = model.cfg.vocab;
    let last_row = &tape.values(logits)[(query.len() - 1) * model.cfg.table_rows()..];
    let next = argmax_token(last_row, vocab);

    state.generated.push(next);
    state.total_generated += 1;
    if state.window_len() == model.cfg.seg_len {
        evict_and_compress(model, params, assembly, state)?;
    }
    Ok(next)
}

/// Compress the full window into a fresh memory block and drop its raw
/// KV rows. The window must hold exactly one segment's worth of tokens.
pub fn evict_and_compress(
    model: &ToyTransformer,
    params: &ParamSet,
    assembly: &mut KvAssembly,
    state: &mut GenState,
) -> TapeResult<()> {
    if state.window_len() != model.cfg.seg_len {
        return Err(TapeError::Invalid {
            op: "evict_and_compress",
            msg: format!(
                "window holds {} tokens, eviction requires exactly {}",
                state.window_len(),
                model.cfg.seg_len
            ),
        });
    }
    let window = state.window();
    assembly.memory_kv.push(encode_to_kv(model, params, &window)?);
    assembly.residual.clear();
    state.last_token = window.last().copied();
    state.residual.clear();
    state.generated.clear();
    Ok(())
}

// ── auto-encoding task ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct AutoEncodeReport {
    pub train_steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Exact-token reconstruction accuracy on the held-out set.
    pub accuracy: f64,
}

/// Reconstruction loss for one sample: compress it, then teacher-force
/// the decoder over `[marker, sample]` conditioned on the memory alone.
/// Encoder, transfer head, and decoder share one differentiable graph.
fn reconstruction_loss(
    model: &ToyTransformer,
    tape: &mut Tape,
    bound: &crate::params::BoundParams,
    sample: &[usize],
) -> TapeResult<TensorId> {
    let mem = model.encode_segment(tape, bound, sample)?;
    let transferred = model.transfer_memories(tape, bound, mem)?;
    let mut input = Vec::with_capacity(sample.len() + 1);
    input.push(model.cfg.marker_token());
    input.extend_from_slice(sample);
    model.decode_loss(tape, bound, &input, &[transferred])
}

/// Free-running greedy reconstruction of one sample from its memory.
pub fn reconstruct(
    model: &ToyTransformer,
    params: &ParamSet,
    sample: &[usize],
) -> TapeResult<Vec<usize>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mem = model.encode_segment(&mut tape, &bound, sample)?;
    let transferred = model.transfer_memories(&mut tape, &bound, mem)?;
    let mut input = vec![model.cfg.marker_token()];
    let rows = model.cfg.table_rows();
    for _ in 0..sample.len() {
        let logits = model.decode_logits(&mut tape, &bound, &input, &[transferred.clone()])?;
        let last = &tape.values(logits)[(input.len() - 1) * rows..];
        input.push(argmax_token(last, model.cfg.vocab));
    }
    Ok(input[1..].to_vec())
}

/// Per-token accuracy of free-running reconstruction over `samples`.
pub fn auto_encode_accuracy(
    model: &ToyTransformer,
    params: &ParamSet,
    samples: &[Vec<usize>],
) -> TapeResult<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for sample in samples {
        let decoded = reconstruct(model, params, sample)?;
        hit += decoded.iter().zip(sample).filter(|(a, b)| a == b).count();
        total += sample.len();
    }
    Ok(hit as f64 / total as f64)
}

/// Train on teacher-forced reconstruction, then score free-running
/// reconstruction on the held-out set.
pub fn auto_encode_run(
    model: &ToyTransformer,
    params: &mut ParamSet,
    train: &[Vec<usize>],
    held_out: &[Vec<usize>],
    train_steps: usize,
    batch: usize,
    learning_rate: f64,
    seed: u64,
) -> TapeResult<AutoEncodeReport> {
    assert!(!train.is_empty() && batch >= 1);
    let mut rng = seed_rng(split(seed, 0xae));
    let mut opt = Optimizer::adam(learning_rate, LrSchedule::Constant);
    let mut first_loss = 0.0;
    let mut final_loss = 0.0;
    for step in 0..train_steps {
        let mut grads = GradReport::zeros_like(params);
        let mut mean_loss = 0.0;
        for _ in 0..batch {
            let sample = train.choose(&mut rng).unwrap();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let loss = reconstruction_loss(model, &mut tape, &bound, sample)?;
            mean_loss += tape.values(loss)[0] / batch as f64;
            tape.backward(loss, None, false)?;
            grads.add_scaled(&GradReport::collect(&tape, params, &bound), 1.0 / batch as f64);
        }
        if step == 0 {
            first_loss = mean_loss;
        }
        final_loss = mean_loss;
        opt.step(params, &grads);
    }
    Ok(AutoEncodeReport {
        train_steps,
        first_loss,
        final_loss,
        accuracy: auto_encode_accuracy(model, params, held_out)?,
    })
}

// ── analytic FLOP model ─────────────────────────────────────────────
//
// Counts 2*m*k*n per [m,k]x[k,n] matmul; element-wise work is ignored.
// Nothing here instruments the implementation — it is an independent
// model used for scaling assertions.

fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (k as u64) * (n as u64)
}

use crate::nets::TransformerConfig;

/// Low-rank adapter path for `rows` inputs: `(x A) B` plus the base matmul.
fn lora_matmul_flops(cfg: &TransformerConfig, rows: usize) -> u64 {
    let (d, r) = (cfg.d_model, cfg.lora_rank);
    matmul_flops(rows, d, d) + matmul_flops(rows, d, r) + matmul_flops(rows, r, d)
}

/// One encoder pass over a full segment plus its memory tokens.
pub fn encode_flops(cfg: &TransformerConfig) -> u64 {
    let seq = cfg.seg_len + cfg.k_mem;
    let d = cfg.d_model;
    let per_layer = 2 * lora_matmul_flops(cfg, seq)     // adapted Q, V
        + 2 * matmul_flops(seq, d, d)                   // K, output
        + 2 * matmul_flops(seq, d, seq)                 // scores, probs*V
        + matmul_flops(seq, d, cfg.ffn_mult * d)
        + matmul_flops(seq, cfg.ffn_mult * d, d);
    cfg.n_layers as u64 * per_layer
}

/// Projecting one memory block through the transfer head.
pub fn transfer_flops(cfg: &TransformerConfig) -> u64 {
    cfg.n_layers as u64 * 2 * lora_matmul_flops(cfg, cfg.k_mem)
}

/// One decoder pass with `n_queries` tokens over `mem_cols` cached rows.
pub fn decode_flops(cfg: &TransformerConfig, n_queries: usize, mem_cols: usize) -> u64 {
    if n_queries == 0 {
        return 0;
    }
    let d = cfg.d_model;
    let total = mem_cols + n_queries;
    let per_layer = 4 * matmul_flops(n_queries, d, d)
        + 2 * matmul_flops(n_queries, d, total)
        + matmul_flops(n_queries, d, cfg.ffn_mult * d)
        + matmul_flops(n_queries, cfg.ffn_mult * d, d);
    cfg.n_layers as u64 * per_layer + matmul_flops(n_queries, d, cfg.table_rows())
}

/// Prefill cost: independent segment compressions plus the residual's
/// decoder pass. Linear in the segment count at fixed segment length.
pub fn prefill_flops(cfg: &TransformerConfig, k_segments: usize, residual_len: usize) -> u64 {
    k_segments as u64 * (encode_flops(cfg) + transfer_flops(cfg))
        + decode_flops(cfg, residual_len, k_segments * cfg.k_mem)
}

/// Total cost of generating `n` tokens from scratch: per-token decoder
/// passes over the growing window plus one compression per filled window.
pub fn generation_flops(cfg: &TransformerConfig, n: usize) -> u64 {
    let mut flops = 0;
    let mut window = 0usize;
    let mut blocks = 0usize;
    for _ in 0..n {
        flops += decode_flops(cfg, window.max(1), blocks * cfg.k_mem);
        window += 1;
        if window == cfg.seg_len {
            flops += encode_flops(cfg) + transfer_flops(cfg);
            blocks += 1;
            window = 0;
        }
    }
    flops
}
