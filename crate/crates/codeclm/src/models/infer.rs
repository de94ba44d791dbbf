//! Forward-only decoding for the causal network with a plain append-only
//! key/value cache. Bulk forwards (the encoder, the non-causal model) reuse
//! the graph path; only incremental causal decoding needs this hand-rolled
//! loop. Both paths share the same kernels, so their outputs agree
//! bit-for-bit.

use super::Networks;
use crate::error::{Error, Result};
use crate::neuralcore::kernels as kn;
use crate::neuralcore::{Graph, ParamStore, Scalar};

/// Which continuous prefix a decoding session starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixKind {
    /// The encoded instruction.
    Conditional,
    /// The learned text-mask row repeated over the instruction length
    /// (the unconditional branch of classifier-free guidance).
    TextMasked,
}

struct LayerKv<F> {
    k: Vec<F>,
    v: Vec<F>,
}

/// An incremental causal decoding session over one conditioning variant.
pub struct ArDecoder<'a, F: Scalar> {
    store: &'a ParamStore<F>,
    nets: &'a Networks,
    kv: Vec<LayerKv<F>>,
    len: usize,
    last_hidden: Vec<F>,
}

impl<'a, F: Scalar> ArDecoder<'a, F> {
    /// Builds the instruction prefix (running the encoder unless the text
    /// condition is dropped) and primes the cache with it.
    pub fn new(
        store: &'a ParamStore<F>,
        nets: &'a Networks,
        tokens: &[u32],
        kind: PrefixKind,
    ) -> Result<Self> {
        let mut g = Graph::new(store);
        let prefix = nets.ar.prefix_rows(
            &mut g,
            &nets.vocab,
            tokens,
            matches!(kind, PrefixKind::TextMasked),
        )?;
        let rows = g.value(prefix).clone();
        drop(g);
        let layers = nets.ar.stack.layers.len();
        let mut dec = ArDecoder {
            store,
            nets,
            kv: (0..layers).map(|_| LayerKv { k: Vec::new(), v: Vec::new() }).collect(),
            len: 0,
            last_hidden: Vec::new(),
        };
        dec.advance(rows.data(), rows.rows());
        Ok(dec)
    }

    /// Number of cached positions.
    pub fn position(&self) -> usize {
        self.len
    }

    /// Logits predicting the next id after everything appended so far.
    pub fn next_logits(&self) -> Vec<F> {
        self.logits(&self.last_hidden)
    }

    /// Embeds and appends decoder-input ids (extended id space); returns the
    /// final-normed hidden rows for the appended positions.
    pub fn append_ids(&mut self, ids: &[u32]) -> Result<Vec<F>> {
        let table = self.store.get(self.nets.ar.input_table);
        let d = table.cols();
        let mut x = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= self.nets.vocab.extended_size() {
                return Err(Error::VocabRange {
                    id,
                    vocab: "decoder input",
                    size: self.nets.vocab.extended_size(),
                });
            }
            x.extend_from_slice(table.row(id as usize));
        }
        Ok(self.advance(&x, ids.len()))
    }

    /// Unified-vocabulary logits for a hidden row.
    pub fn logits(&self, hidden_row: &[F]) -> Vec<F> {
        let head = self.store.get(self.nets.ar.head);
        kn::matmul(hidden_row, head.data(), 1, head.rows(), head.cols())
    }

    fn advance(&mut self, x: &[F], rows: usize) -> Vec<F> {
        let stack = &self.nets.ar.stack;
        let cfg = &stack.config;
        let d = cfg.model_dim;
        let heads = cfg.heads;
        let head_dim = d / heads;
        let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
        let positions: Vec<usize> = (self.len..self.len + rows).collect();

        let mut h = x.to_vec();
        for (li, layer) in stack.layers.iter().enumerate() {
            let gain = self.store.get(layer.attn_norm);
            let (a_in, _) = kn::rmsnorm_rows(&h, gain.data(), rows, d);
            let wq = self.store.get(layer.wq);
            let q = kn::matmul(&a_in, wq.data(), rows, d, d);
            let wk = self.store.get(layer.wk);
            let k = kn::matmul(&a_in, wk.data(), rows, d, d);
            let wv = self.store.get(layer.wv);
            let v = kn::matmul(&a_in, wv.data(), rows, d, d);
            let q = kn::rope_rows(&q, &positions, heads, cfg.rope_base, 1.0);
            let k = kn::rope_rows(&k, &positions, heads, cfg.rope_base, 1.0);

            let cache = &mut self.kv[li];
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);

            let mut attn = vec![F::zero(); rows * d];
            let mut scores = vec![F::zero(); self.len + rows];
            for hi in 0..heads {
                let off = hi * head_dim;
                for r in 0..rows {
                    let p = self.len + r;
                    let qi = &q[r * d + off..r * d + off + head_dim];
                    for (j, score) in scores[..=p].iter_mut().enumerate() {
                        let kj = &cache.k[j * d + off..j * d + off + head_dim];
                        let mut dot = F::zero();
                        for (&a, &b) in qi.iter().zip(kj) {
                            dot += a * b;
                        }
                        *score = dot * scale;
                    }
                    kn::softmax_in_place(&mut scores[..=p]);
                    let out_row = &mut attn[r * d + off..r * d + off + head_dim];
                    for (j, &pj) in scores[..=p].iter().enumerate() {
                        if pj == F::zero() {
                            continue;
                        }
                        let vj = &cache.v[j * d + off..j * d + off + head_dim];
                        for (o, &vv) in out_row.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
            }
            let wo = self.store.get(layer.wo);
            let attn_out = kn::matmul(&attn, wo.data(), rows, d, d);
            for (a, &b) in h.iter_mut().zip(&attn_out) {
                *a += b;
            }

            let gain = self.store.get(layer.ffn_norm);
            let (f_in, _) = kn::rmsnorm_rows(&h, gain.data(), rows, d);
            let w_gate = self.store.get(layer.w_gate);
            let f = cfg.ffn_dim;
            let mut gate = kn::matmul(&f_in, w_gate.data(), rows, d, f);
            for g_v in gate.iter_mut() {
                *g_v = kn::silu(*g_v);
            }
            let w_up = self.store.get(layer.w_up);
            let up = kn::matmul(&f_in, w_up.data(), rows, d, f);
            for (g_v, &u) in gate.iter_mut().zip(&up) {
                *g_v *= u;
            }
            let w_down = self.store.get(layer.w_down);
            let ffn_out = kn::matmul(&gate, w_down.data(), rows, f, d);
            for (a, &b) in h.iter_mut().zip(&ffn_out) {
                *a += b;
            }
        }
        let gain = self.store.get(stack.final_norm);
        let (out, _) = kn::rmsnorm_rows(&h, gain.data(), rows, d);
        self.len += rows;
        self.last_hidden = out[(rows - 1) * d..].to_vec();
        out
    }
}
