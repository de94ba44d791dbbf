//! The causal decoder: instruction embeddings as a continuous prefix,
//! then the concatenated target stream `l → S → S_eos → A1 → A_eos` through
//! a causal stack and a single unified-vocabulary head.

use rand::Rng;

use super::encoder::EncoderModel;
use super::{ModelConfig, Networks};
use crate::error::{Error, Result};
use crate::neuralcore::{
    init_stack, normal_tensor, stack_forward, AttnMask, Gradients, Graph, NodeId, ParamId,
    ParamStore, Scalar, StackParams, Tensor, INIT_STD,
};
use crate::seqlayout::{validate_segment_order, ArTrainingExample, VocabMap};

#[derive(Debug, Clone)]
pub struct ArModel {
    pub encoder: EncoderModel,
    /// Projects encoder vectors into the decoder width.
    pub enc_proj: ParamId,
    /// Learned replacement for the whole text prefix under condition dropout.
    pub mask_text: ParamId,
    /// Decoder-input embeddings over the extended id space.
    pub input_table: ParamId,
    pub stack: StackParams,
    /// `[model_dim, unified_size]` output head.
    pub head: ParamId,
    pub use_semantic: bool,
}

impl ArModel {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        vocab: &VocabMap,
        config: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let encoder =
            EncoderModel::init(store, "ar.encoder", vocab, &config.encoder, config.lora_rank, rng)?;
        let d = config.decoder.model_dim;
        let enc_proj = store.add(
            "ar.enc_proj",
            normal_tensor(rng, vec![config.encoder.model_dim, d], INIT_STD),
        );
        let mask_text =
            store.add("ar.mask_text", normal_tensor(rng, vec![config.encoder.model_dim], INIT_STD));
        let input_table = store.add(
            "ar.input_table",
            normal_tensor(rng, vec![vocab.extended_size() as usize, d], INIT_STD),
        );
        let stack = init_stack(store, "ar.decoder", &config.decoder, None, rng)?;
        let head = store.add(
            "ar.head",
            normal_tensor(rng, vec![d, vocab.unified_size as usize], INIT_STD),
        );
        Ok(ArModel {
            encoder,
            enc_proj,
            mask_text,
            input_table,
            stack,
            head,
            use_semantic: config.use_semantic,
        })
    }

    /// The continuous instruction prefix: encoder output (or the learned
    /// mask row when the text condition is dropped) projected to decoder
    /// width.
    pub fn prefix_rows<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        vocab: &VocabMap,
        tokens: &[u32],
        drop_text: bool,
    ) -> Result<NodeId> {
        let raw = if drop_text {
            let row = g.param(self.mask_text);
            g.broadcast_rows(row, tokens.len())?
        } else {
            self.encoder.encode(g, vocab, tokens)?
        };
        let proj = g.param(self.enc_proj);
        g.matmul(raw, proj)
    }

    /// Causal forward over `<prefix, targets[..-1]>`; returns logits aligned
    /// with `targets` (`targets.len() × unified_size`).
    pub fn logits_for_example<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        vocab: &VocabMap,
        ex: &ArTrainingExample,
    ) -> Result<NodeId> {
        if self.use_semantic {
            validate_segment_order(vocab, &ex.targets)?;
        } else {
            validate_ablated_order(vocab, &ex.targets)?;
        }
        let m = ex.prefix_len;
        let prefix = self.prefix_rows(g, vocab, &ex.instruction_tokens, ex.drop_text)?;
        let ids = ex.input_ids(vocab);
        let table = g.param(self.input_table);
        let emb = g.gather(table, &ids)?;
        let x = g.concat_rows(prefix, emb)?;
        let positions: Vec<usize> = (0..m + ids.len()).collect();
        let h = stack_forward(g, &self.stack, x, &positions, &AttnMask::Causal)?;
        let h_targets = g.slice_rows(h, m - 1, ex.targets.len())?;
        let head = g.param(self.head);
        g.matmul(h_targets, head)
    }
}

/// Segment order for the no-semantic ablation: `l → A1.. → A_eos`.
fn validate_ablated_order(vocab: &VocabMap, ids: &[u32]) -> Result<()> {
    let err = |position: usize, reason: &str| {
        Err(Error::SegmentOrder { position, reason: reason.to_string() })
    };
    let mut done = false;
    for (position, &id) in ids.iter().enumerate() {
        if position == 0 {
            if vocab.language_of_label(id).is_none() {
                return err(position, "expected a language label first");
            }
        } else if done {
            return err(position, "ids after A_eos");
        } else if id == vocab.a_eos {
            done = true;
        } else if vocab.unified_to_acoustic(id).is_none() {
            return err(position, "expected an acoustic id or A_eos");
        }
    }
    Ok(())
}

/// Teacher-forced logits for an example, one row per target position.
pub fn ar_logits<F: Scalar>(
    store: &ParamStore<F>,
    nets: &Networks,
    ex: &ArTrainingExample,
) -> Result<Tensor<F>> {
    let mut g = Graph::new(store);
    let logits = nets.ar.logits_for_example(&mut g, &nets.vocab, ex)?;
    Ok(g.value(logits).clone())
}

/// Mean cross-entropy over the positions the example's loss mask selects.
pub fn ar_loss<F: Scalar>(
    store: &ParamStore<F>,
    nets: &Networks,
    ex: &ArTrainingExample,
) -> Result<F> {
    let mut g = Graph::new(store);
    let logits = nets.ar.logits_for_example(&mut g, &nets.vocab, ex)?;
    let loss = g.masked_cross_entropy(logits, &ex.targets, &ex.loss_mask)?;
    Ok(g.value(loss).item())
}

pub fn ar_loss_and_grad<F: Scalar>(
    store: &ParamStore<F>,
    nets: &Networks,
    ex: &ArTrainingExample,
) -> Result<(F, Gradients<F>)> {
    let mut g = Graph::new(store);
    let logits = nets.ar.logits_for_example(&mut g, &nets.vocab, ex)?;
    let loss = g.masked_cross_entropy(logits, &ex.targets, &ex.loss_mask)?;
    Ok((g.value(loss).item(), g.backward(loss)))
}
