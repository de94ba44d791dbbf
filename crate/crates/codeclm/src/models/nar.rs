//! The non-causal residual-layer model. One network serves every residual
//! layer: frame inputs sum the embeddings of the layers below the target,
//! the target layer's kept tokens (or its mask embedding), and a learned
//! layer-index embedding; prompt frames carry all layers. Conditioning
//! (instruction vectors, language label, semantic ids) is prefixed and the
//! whole sequence attends bidirectionally.

use rand::Rng;

use super::encoder::EncoderModel;
use super::{ModelConfig, Networks};
use crate::error::{Error, Result};
use crate::neuralcore::{
    init_stack, normal_tensor, stack_forward, AttnMask, Gradients, Graph, NodeId, ParamId,
    ParamStore, Scalar, StackParams, Tensor, INIT_STD,
};
use crate::seqlayout::{NarTrainingExample, VocabMap};
use crate::toyworld::GRID_LAYERS;

#[derive(Debug, Clone)]
pub struct NarModel {
    pub encoder: EncoderModel,
    pub enc_proj: ParamId,
    /// Embeddings for the conditioning ids (language label, semantic ids).
    pub cond_table: ParamId,
    /// One table per grid layer, `[V_a + 1, d]`; the extra row is that
    /// layer's mask embedding.
    pub acoustic_tables: Vec<ParamId>,
    /// Target-layer embedding, row `i - 2` for layer i.
    pub layer_embed: ParamId,
    pub stack: StackParams,
    /// Per-layer output heads `[d, V_a]`, index `i - 2`.
    pub heads: Vec<ParamId>,
}

impl NarModel {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        vocab: &VocabMap,
        config: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let encoder =
            EncoderModel::init(store, "nar.encoder", vocab, &config.encoder, config.lora_rank, rng)?;
        let d = config.nar.model_dim;
        let enc_proj =
            store.add("nar.enc_proj", normal_tensor(rng, vec![config.encoder.model_dim, d], INIT_STD));
        let cond_table = store.add(
            "nar.cond_table",
            normal_tensor(rng, vec![vocab.unified_size as usize, d], INIT_STD),
        );
        let rows = vocab.acoustic_ids as usize + 1;
        let acoustic_tables = (0..GRID_LAYERS)
            .map(|j| {
                store.add(format!("nar.acoustic{j}"), normal_tensor(rng, vec![rows, d], INIT_STD))
            })
            .collect();
        let layer_embed = store
            .add("nar.layer_embed", normal_tensor(rng, vec![GRID_LAYERS - 1, d], INIT_STD));
        let stack = init_stack(store, "nar.body", &config.nar, None, rng)?;
        let heads = (2..=GRID_LAYERS)
            .map(|i| {
                store.add(
                    format!("nar.head{i}"),
                    normal_tensor(rng, vec![d, vocab.acoustic_ids as usize], INIT_STD),
                )
            })
            .collect();
        Ok(NarModel {
            encoder,
            enc_proj,
            cond_table,
            acoustic_tables,
            layer_embed,
            stack,
            heads,
        })
    }
}

/// What the model sees of the grid when predicting one layer: every layer's
/// id column, which suffix positions of the target layer are masked, the
/// prompt length, and the 1-based target layer.
#[derive(Debug, Clone)]
pub struct NarFrameState {
    pub layers: Vec<Vec<u32>>,
    pub masked: Vec<bool>,
    pub prompt_len: usize,
    pub target_layer: usize,
}

impl NarFrameState {
    pub fn from_example(ex: &NarTrainingExample) -> Self {
        let frames = ex.grid.frames();
        let layers = (0..ex.grid.layers()).map(|j| ex.grid.column(j)).collect();
        let mut masked = vec![false; frames];
        for &p in &ex.masked_positions {
            masked[p] = true;
        }
        NarFrameState { layers, masked, prompt_len: ex.prompt_len, target_layer: ex.target_layer }
    }

    pub fn frames(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    fn validate(&self, grid_layers: usize) -> Result<()> {
        if self.target_layer < 2 || self.target_layer > grid_layers {
            return Err(Error::LayerRange { layer: self.target_layer, layers: grid_layers });
        }
        if self.layers.len() != grid_layers {
            return Err(Error::PromptLayers { prompt: self.layers.len(), expected: grid_layers });
        }
        let frames = self.frames();
        if frames == 0 {
            return Err(Error::EmptyGrid);
        }
        if self.layers.iter().any(|c| c.len() != frames) || self.masked.len() != frames {
            return Err(Error::ShapeMismatch {
                expected: vec![frames],
                actual: vec![self.masked.len()],
            });
        }
        if self.prompt_len >= frames && self.prompt_len != 0 {
            return Err(Error::PromptTooLong { prompt: self.prompt_len, limit: frames });
        }
        if self.masked[..self.prompt_len].iter().any(|&b| b) {
            return Err(Error::InvalidConfig("masked position inside the prompt".into()));
        }
        Ok(())
    }
}

impl NarModel {
    /// Bidirectional forward; returns `frames × V_a` logits for the target
    /// layer.
    pub fn logits_for_state<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        vocab: &VocabMap,
        tokens: &[u32],
        language_label: u32,
        semantic_ids: &[u32],
        state: &NarFrameState,
    ) -> Result<NodeId> {
        state.validate(self.acoustic_tables.len())?;
        let frames = state.frames();
        let target = state.target_layer;
        let d = self.stack.config.model_dim;

        let enc = self.encoder.encode(g, vocab, tokens)?;
        let proj = g.param(self.enc_proj);
        let text = g.matmul(enc, proj)?;
        let mut cond_ids = Vec::with_capacity(1 + semantic_ids.len());
        cond_ids.push(language_label);
        cond_ids.extend_from_slice(semantic_ids);
        let cond_table = g.param(self.cond_table);
        let cond = g.gather(cond_table, &cond_ids)?;
        let prefix = g.concat_rows(text, cond)?;
        let prefix_rows = tokens.len() + cond_ids.len();

        let mask_row = vocab.acoustic_ids;
        let mut frame_sum: Option<NodeId> = None;
        for (j, column) in state.layers.iter().enumerate() {
            let contribution = if j + 1 == target {
                // Target layer: kept tokens as-is, masked suffix positions
                // through the layer's mask embedding.
                let ids: Vec<u32> = column
                    .iter()
                    .enumerate()
                    .map(|(t, &v)| if state.masked[t] { mask_row } else { v })
                    .collect();
                let table = g.param(self.acoustic_tables[j]);
                Some(g.gather(table, &ids)?)
            } else if j + 1 < target {
                let table = g.param(self.acoustic_tables[j]);
                Some(g.gather(table, column)?)
            } else if state.prompt_len > 0 {
                // Layers above the target are visible only inside the prompt.
                let table = g.param(self.acoustic_tables[j]);
                let emb = g.gather(table, column)?;
                let mut keep = vec![F::zero(); frames * d];
                keep[..state.prompt_len * d].fill(F::one());
                let keep = g.input(Tensor::from_vec(vec![frames, d], keep)?);
                Some(g.mul(emb, keep)?)
            } else {
                None
            };
            if let Some(c) = contribution {
                frame_sum = Some(match frame_sum {
                    Some(acc) => g.add(acc, c)?,
                    None => c,
                });
            }
        }
        let layer_table = g.param(self.layer_embed);
        let layer_row = g.gather(layer_table, &[(target - 2) as u32])?;
        let layer_rows = g.broadcast_rows(layer_row, frames)?;
        let frame_in = match frame_sum {
            Some(acc) => g.add(acc, layer_rows)?,
            None => layer_rows,
        };

        let x = g.concat_rows(prefix, frame_in)?;
        let positions: Vec<usize> = (0..prefix_rows + frames).collect();
        let h = stack_forward(g, &self.stack, x, &positions, &AttnMask::Full)?;
        let h_frames = g.slice_rows(h, prefix_rows, frames)?;
        let head = g.param(self.heads[target - 2]);
        g.matmul(h_frames, head)
    }
}

/// Forward logits for an arbitrary frame state (used by iterative decoding).
pub fn nar_logits<F: Scalar>(
    store: &ParamStore<F>,
    nets: &Networks,
    tokens: &[u32],
    language_label: u32,
    semantic_ids: &[u32],
    state: &NarFrameState,
) -> Result<Tensor<F>> {
    let mut g = Graph::new(store);
    let logits =
        nets.nar.logits_for_state(&mut g, &nets.vocab, tokens, language_label, semantic_ids, state)?;
    Ok(g.value(logits).clone())
}

/// Mean cross-entropy over the masked positions of the target layer. An
/// empty masked set is defined as zero loss with no gradient.
pub fn nar_loss<F: Scalar>(
    store: &ParamStore<F>,
    nets: &Networks,
    ex: &NarTrainingExample,
) -> Result<F> {
    Ok(nar_loss_and_grad(store, nets, ex)?.0)
}

pub fn nar_loss_and_grad<F: Scalar>(
    store: &ParamStore<F>,
    nets: &Networks,
    ex: &NarTrainingExample,
) -> Result<(F, Gradients<F>)> {
    if ex.masked_positions.is_empty() {
        return Ok((F::zero(), Gradients::zeros(store.len())));
    }
    let state = NarFrameState::from_example(ex);
    let mut g = Graph::new(store);
    let logits = nets.nar.logits_for_state(
        &mut g,
        &nets.vocab,
        &ex.instruction_tokens,
        ex.language_label,
        &ex.semantic_ids,
        &state,
    )?;
    let targets = &state.layers[ex.target_layer - 1];
    let loss = g.masked_cross_entropy(logits, targets, &state.masked)?;
    Ok((g.value(loss).item(), g.backward(loss)))
}
