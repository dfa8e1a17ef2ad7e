//! Memory-enhanced mini-transformer.
//!
//! One weight set is shared by the encoder and decoder paths. The
//! encoder runs attention over `[segment tokens, memory tokens]` with
//! low-rank adapters on the query/value projections and keeps the
//! per-layer activations at the memory positions as the segment's
//! memory. A separate adapter pair (the transfer head) projects those
//! activations into decoder key/value rows. The decoder path uses the
//! base weights only and attends causally over
//! `[all memory KV, segment tokens]`.

use rand_distr::{Distribution, Normal};

use crate::nets::{SegmentModel, StepOutput};
use crate::params::{BoundParams, ParamSet};
use crate::rng::seed_rng;
use crate::tape::{Tape, TapeError, TapeResult, TensorId};

const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerConfig {
    /// Data tokens are `0..vocab`; id `vocab` is the reserved
    /// begin-reconstruction marker.
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Segment length l.
    pub seg_len: usize,
    /// Memory tokens per segment; compression ratio is `seg_len / k_mem`.
    pub k_mem: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// FFN hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// Capacity of the learned absolute position table.
    pub max_pos: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            vocab: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            seg_len: 16,
            k_mem: 4,
            lora_rank: 4,
            lora_alpha: 16.0,
            ffn_mult: 4,
            max_pos: 1024,
        }
    }
}

impl TransformerConfig {
    pub fn marker_token(&self) -> usize {
        self.vocab
    }

    pub fn table_rows(&self) -> usize {
        self.vocab + 1
    }

    pub fn compression_ratio(&self) -> usize {
        self.seg_len / self.k_mem
    }

    /// Memory rows per segment across all layers.
    pub fn mem_rows(&self) -> usize {
        self.n_layers * self.k_mem
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ToyTransformer {
    pub cfg: TransformerConfig,
}

impl ToyTransformer {
    pub fn new(cfg: TransformerConfig) -> Self {
        ToyTransformer { cfg }
    }

    /// `x (W + (alpha/r) A B)` through the fused adapter projection.
    fn lora_matmul(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: TensorId,
        base: &str,
        adapter: &str,
    ) -> TapeResult<TensorId> {
        tape.lora_matmul(
            x,
            bound.id(base),
            bound.id(&format!("{adapter}.a")),
            bound.id(&format!("{adapter}.b")),
            self.cfg.lora_alpha / self.cfg.lora_rank as f64,
        )
    }

    /// Multi-head attention: `probs(q k^T / sqrt(dh) + mask) v`, heads
    /// split along columns, output re-concatenated (pre output projection).
    fn attention(
        &self,
        tape: &mut Tape,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        mask: TensorId,
    ) -> TapeResult<TensorId> {
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let kht = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kht)?;
            let scaled = tape.scale(raw, inv_sqrt);
            let masked = tape.add(scaled, mask)?;
            let probs = tape.row_softmax(masked);
            outs.push(tape.matmul(probs, vh)?);
        }
        tape.concat(&outs, 1)
    }

    fn causal_mask(&self, tape: &mut Tape, n: usize) -> TensorId {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                m[i * n + j] = MASKED;
            }
        }
        tape.constant(m, vec![n, n])
    }

    /// Mask for `n` queries over `mem_cols` always-visible memory columns
    /// followed by `n` causal token columns.
    fn decoder_mask(&self, tape: &mut Tape, n: usize, mem_cols: usize) -> TensorId {
        let total = mem_cols + n;
        let mut m = vec![0.0; n * total];
        for i in 0..n {
            for j in (i + 1)..n {
                m[i * total + mem_cols + j] = MASKED;
            }
        }
        tape.constant(m, vec![n, total])
    }

    fn positions(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        base: usize,
        n: usize,
    ) -> TapeResult<TensorId> {
        if base + n > self.cfg.max_pos {
            return Err(TapeError::Invalid {
                op: "positions",
                msg: format!(
                    "positions {base}..{} exceed max_pos {}",
                    base + n,
                    self.cfg.max_pos
                ),
            });
        }
        let idx: Vec<usize> = (base..base + n).collect();
        tape.embedding(bound.id("embed.pos"), &idx)
    }

    fn ffn(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        layer: usize,
        h: TensorId,
    ) -> TapeResult<TensorId> {
        let x = tape.layer_norm(h);
        let pre = tape.matmul(x, bound.id(&format!("layer{layer}.ffn.w1")))?;
        let act = tape.tanh(pre);
        let out = tape.matmul(act, bound.id(&format!("layer{layer}.ffn.w2")))?;
        tape.add(h, out)
    }

    /// Compress a segment into its memory: the per-layer activations at
    /// the memory-token positions, stacked layer-major into
    /// `[n_layers * k_mem, d_model]`. No past memory participates.
    pub fn encode_segment(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        tokens: &[usize],
    ) -> TapeResult<TensorId> {
        let (l, k, d) = (self.cfg.seg_len, self.cfg.k_mem, self.cfg.d_model);
        if tokens.len() != l {
            return Err(TapeError::Invalid {
                op: "encode_segment",
                msg: format!("segment length {} != {l}", tokens.len()),
            });
        }
        let tok = tape.embedding(bound.id("embed.tok"), tokens)?;
        let tok_pos = self.positions(tape, bound, 0, l)?;
        let tok_part = tape.add(tok, tok_pos)?;
        let mem_pos = self.positions(tape, bound, l, k)?;
        let mem_part = tape.add(bound.id("embed.mem"), mem_pos)?;
        let mut h = tape.concat(&[tok_part, mem_part], 0)?;

        let mask = self.causal_mask(tape, l + k);
        let mut mem_acts = Vec::with_capacity(self.cfg.n_layers);
        for layer in 0..self.cfg.n_layers {
            mem_acts.push(tape.slice(h, 0, l, k)?);
            let x = tape.layer_norm(h);
            let q = self.lora_matmul(
                tape,
                bound,
                x,
                &format!("layer{layer}.wq"),
                &format!("layer{layer}.enc_lora.q"),
            )?;
            let kk = tape.matmul(x, bound.id(&format!("layer{layer}.wk")))?;
            let v = self.lora_matmul(
                tape,
                bound,
                x,
                &format!("layer{layer}.wv"),
                &format!("layer{layer}.enc_lora.v"),
            )?;
            let attn = self.attention(tape, q, kk, v, mask)?;
            let proj = tape.matmul(attn, bound.id(&format!("layer{layer}.wo")))?;
            h = tape.add(h, proj)?;
            h = self.ffn(tape, bound, layer, h)?;
        }
        debug_assert_eq!(tape.shape(mem_acts[0]), &[k, d]);
        tape.concat(&mem_acts, 0)
    }

    /// Project a memory into per-layer decoder (K, V) rows through the
    /// transfer-head adapters.
    pub fn transfer_memories(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        memory: TensorId,
    ) -> TapeResult<Vec<(TensorId, TensorId)>> {
        let k_mem = self.cfg.k_mem;
        let normed = tape.layer_norm(memory);
        let mut out = Vec::with_capacity(self.cfg.n_layers);
        for layer in 0..self.cfg.n_layers {
            let x = tape.slice(normed, 0, layer * k_mem, k_mem)?;
            let k = self.lora_matmul(
                tape,
                bound,
                x,
                &format!("layer{layer}.wk"),
                &format!("layer{layer}.xfer_lora.k"),
            )?;
            let v = self.lora_matmul(
                tape,
                bound,
                x,
                &format!("layer{layer}.wv"),
                &format!("layer{layer}.xfer_lora.v"),
            )?;
            out.push((k, v));
        }
        Ok(out)
    }

    /// Decoder forward over `tokens` with prior memory KV blocks
    /// (`transferred[step][layer]`) fully visible; returns logits.
    /// Token positions start after all memory rows.
    pub fn decode_logits(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        tokens: &[usize],
        transferred: &[Vec<(TensorId, TensorId)>],
    ) -> TapeResult<TensorId> {
        if tokens.is_empty() {
            return Err(TapeError::Invalid {
                op: "decode_logits",
                msg: "empty segment".into(),
            });
        }
        let n = tokens.len();
        let mem_cols = transferred.len() * self.cfg.k_mem;
        let tok = tape.embedding(bound.id("embed.tok"), tokens)?;
        let pos = self.positions(tape, bound, mem_cols, n)?;
        let mut h = tape.add(tok, pos)?;

        let mask = self.decoder_mask(tape, n, mem_cols);
        for layer in 0..self.cfg.n_layers {
            let x = tape.layer_norm(h);
            let q = tape.matmul(x, bound.id(&format!("layer{layer}.wq")))?;
            let k_seg = tape.matmul(x, bound.id(&format!("layer{layer}.wk")))?;
            let v_seg = tape.matmul(x, bound.id(&format!("layer{layer}.wv")))?;
            let (k_all, v_all) = if transferred.is_empty() {
                (k_seg, v_seg)
            } else {
                let mut ks: Vec<TensorId> = transferred.iter().map(|t| t[layer].0).collect();
                let mut vs: Vec<TensorId> = transferred.iter().map(|t| t[layer].1).collect();
                ks.push(k_seg);
                vs.push(v_seg);
                (tape.concat(&ks, 0)?, tape.concat(&vs, 0)?)
            };
            let attn = self.attention(tape, q, k_all, v_all, mask)?;
            let proj = tape.matmul(attn, bound.id(&format!("layer{layer}.wo")))?;
            h = tape.add(h, proj)?;
            h = self.ffn(tape, bound, layer, h)?;
        }
        let x = tape.layer_norm(h);
        tape.matmul(x, bound.id("unembed"))
    }

    /// Mean next-token cross-entropy over the segment's predictable
    /// positions (each token predicts its successor).
    pub fn decode_loss(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        tokens: &[usize],
        transferred: &[Vec<(TensorId, TensorId)>],
    ) -> TapeResult<TensorId> {
        if tokens.len() < 2 {
            return Err(TapeError::Invalid {
                op: "decode_loss",
                msg: format!("segment of length {} has no predictable positions", tokens.len()),
            });
        }
        let logits = self.decode_logits(tape, bound, tokens, transferred)?;
        let predictable = tape.slice(logits, 0, 0, tokens.len() - 1)?;
        tape.cross_entropy_logits(predictable, &tokens[1..])
    }
}

impl SegmentModel for ToyTransformer {
    type Input = Vec<usize>;

    fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        input: &Self::Input,
        memories: &[Vec<TensorId>],
    ) -> TapeResult<StepOutput> {
        let transferred: Vec<Vec<(TensorId, TensorId)>> = memories
            .iter()
            .map(|kv| kv.chunks(2).map(|c| (c[0], c[1])).collect())
            .collect();
        let loss = self.decode_loss(tape, bound, input, &transferred)?;
        let memory = self.encode_segment(tape, bound, input)?;
        Ok(StepOutput { loss, memory })
    }

    /// The transfer head runs once per memory; every later step reuses
    /// the projected `[k, v]` pairs (flattened layer-major).
    fn prepare_memory(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        leaf: TensorId,
    ) -> TapeResult<Vec<TensorId>> {
        let transferred = self.transfer_memories(tape, bound, leaf)?;
        Ok(transferred.into_iter().flat_map(|(k, v)| [k, v]).collect())
    }

    fn init_params(&self, seed: u64) -> ParamSet {
        let cfg = &self.cfg;
        let mut rng = seed_rng(seed);
        let d = cfg.d_model;
        let hidden = cfg.ffn_mult * d;
        let w_std = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        let e_std = Normal::new(0.0, 0.5).unwrap();
        let a_std = Normal::new(0.0, 0.1).unwrap();
        let draw = |n: usize, dist: &Normal<f64>, rng: &mut crate::rng::Rng| -> Vec<f64> {
            (0..n).map(|_| dist.sample(rng)).collect()
        };

        let mut params = ParamSet::new();
        let tok = draw(cfg.table_rows() * d, &e_std, &mut rng);
        params.insert("embed.tok", tok, vec![cfg.table_rows(), d], false);
        let pos = draw(cfg.max_pos * d, &e_std, &mut rng);
        params.insert("embed.pos", pos, vec![cfg.max_pos, d], false);
        let mem = draw(cfg.k_mem * d, &e_std, &mut rng);
        params.insert("embed.mem", mem, vec![cfg.k_mem, d], true);

        for layer in 0..cfg.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                let vals = draw(d * d, &w_std, &mut rng);
                params.insert(&format!("layer{layer}.{w}"), vals, vec![d, d], false);
            }
            let w1 = draw(d * hidden, &w_std, &mut rng);
            params.insert(&format!("layer{layer}.ffn.w1"), w1, vec![d, hidden], false);
            let w2 = draw(hidden * d, &w_std, &mut rng);
            params.insert(&format!("layer{layer}.ffn.w2"), w2, vec![hidden, d], false);
            for head in ["enc_lora.q", "enc_lora.v", "xfer_lora.k", "xfer_lora.v"] {
                let a = draw(d * cfg.lora_rank, &a_std, &mut rng);
                params.insert(
                    &format!("layer{layer}.{head}.a"),
                    a,
                    vec![d, cfg.lora_rank],
                    true,
                );
                // B starts at zero so the adapters begin as an identity delta.
                params.insert(
                    &format!("layer{layer}.{head}.b"),
                    vec![0.0; cfg.lora_rank * d],
                    vec![cfg.lora_rank, d],
                    true,
                );
            }
        }
        let unembed = draw(d * cfg.table_rows(), &w_std, &mut rng);
        params.insert("unembed", unembed, vec![d, cfg.table_rows()], false);
        params
    }
}
