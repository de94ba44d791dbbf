//! Bidirectional instruction encoder: token embedding through a non-causal
//! block stack, with low-rank adapters on the query/value projections.

use rand::Rng;

use crate::error::{Error, Result};
use crate::neuralcore::{
    init_stack, normal_tensor, stack_forward, AttnMask, BlockConfig, Graph, NodeId, ParamId,
    ParamStore, Scalar, INIT_STD,
};
use crate::seqlayout::VocabMap;

#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub embedding: ParamId,
    pub stack: crate::neuralcore::StackParams,
}

impl EncoderModel {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        vocab: &VocabMap,
        config: &BlockConfig,
        lora_rank: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let embedding = store.add(
            format!("{prefix}.embedding"),
            normal_tensor(rng, vec![vocab.instruction_size as usize, config.model_dim], INIT_STD),
        );
        let stack = init_stack(store, prefix, config, Some(lora_rank), rng)?;
        Ok(EncoderModel { embedding, stack })
    }

    pub fn dim(&self) -> usize {
        self.stack.config.model_dim
    }

    /// Embeds and encodes instruction tokens into `m × dim` vectors.
    pub fn encode<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        vocab: &VocabMap,
        tokens: &[u32],
    ) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::InvalidConfig("cannot encode an empty instruction".into()));
        }
        for &t in tokens {
            if t >= vocab.instruction_size {
                return Err(Error::VocabRange {
                    id: t,
                    vocab: "instruction",
                    size: vocab.instruction_size,
                });
            }
        }
        let table = g.param(self.embedding);
        let x = g.gather(table, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        stack_forward(g, &self.stack, x, &positions, &AttnMask::Full)
    }
}

/// Standalone encode: runs a one-off graph and returns the vectors.
pub fn encode_instruction<F: Scalar>(
    store: &ParamStore<F>,
    encoder: &EncoderModel,
    vocab: &VocabMap,
    tokens: &[u32],
) -> Result<crate::neuralcore::Tensor<F>> {
    let mut g = Graph::new(store);
    let enc = encoder.encode(&mut g, vocab, tokens)?;
    Ok(g.value(enc).clone())
}
