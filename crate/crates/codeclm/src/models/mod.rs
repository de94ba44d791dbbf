//! The three networks: a bidirectional instruction encoder (with low-rank
//! adapters), a causal decoder over the unified vocabulary, and a non-causal
//! residual-layer model. The two generation networks share nothing — each
//! carries its own instruction encoder — so they can be optimized as fully
//! independent processes.

mod ar;
mod encoder;
mod infer;
mod nar;
#[cfg(test)]
mod tests;

pub use ar::{ar_logits, ar_loss, ar_loss_and_grad, ArModel};
pub use encoder::{encode_instruction, EncoderModel};
pub use infer::{ArDecoder, PrefixKind};
pub use nar::{nar_logits, nar_loss, nar_loss_and_grad, NarFrameState, NarModel};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::neuralcore::{BlockConfig, ParamId, ParamStore, Scalar};
use crate::seqlayout::VocabMap;
use crate::toyworld::mix2;

/// Block configurations and adapter rank for every network in a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: BlockConfig,
    pub decoder: BlockConfig,
    pub nar: BlockConfig,
    pub lora_rank: usize,
    /// When false, the decoder is trained without the semantic stage
    /// (ablation variant).
    pub use_semantic: bool,
}

impl ModelConfig {
    pub fn desk_default() -> Self {
        ModelConfig {
            encoder: BlockConfig {
                layers: 2,
                model_dim: 80,
                ffn_dim: 216,
                heads: 4,
                rope_base: 10_000.0,
            },
            decoder: BlockConfig::desk_default(),
            nar: BlockConfig::desk_default(),
            lora_rank: 4,
            use_semantic: true,
        }
    }

    /// A miniature config for gradient checks and fast unit tests.
    pub fn tiny() -> Self {
        let tiny_block =
            BlockConfig { layers: 1, model_dim: 16, ffn_dim: 24, heads: 2, rope_base: 10_000.0 };
        ModelConfig {
            encoder: tiny_block.clone(),
            decoder: tiny_block.clone(),
            nar: tiny_block,
            lora_rank: 2,
            use_semantic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.nar.validate()?;
        if self.lora_rank == 0 {
            return Err(crate::Error::InvalidConfig("lora_rank must be at least 1".into()));
        }
        Ok(())
    }
}

/// Immutable wiring of both networks: parameter ids plus vocabulary.
/// Separated from the [`ParamStore`] so gradient checking and optimization
/// can mutate values while the wiring stays borrowed.
#[derive(Debug, Clone)]
pub struct Networks {
    pub vocab: VocabMap,
    pub config: ModelConfig,
    pub ar: ArModel,
    pub nar: NarModel,
    ar_range: (usize, usize),
    nar_range: (usize, usize),
}

impl Networks {
    pub fn ar_params(&self) -> Vec<ParamId> {
        (self.ar_range.0..self.ar_range.1).map(ParamId).collect()
    }

    pub fn nar_params(&self) -> Vec<ParamId> {
        (self.nar_range.0..self.nar_range.1).map(ParamId).collect()
    }
}

/// Parameters plus wiring for the whole system.
#[derive(Debug, Clone)]
pub struct ModelBundle<F> {
    pub store: ParamStore<F>,
    pub nets: Networks,
}

impl<F: Scalar> ModelBundle<F> {
    /// Deterministically initializes every network from `seed`.
    pub fn new(seed: u64, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let vocab = VocabMap::new();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix2(0x6d6f_64656c, seed));

        let ar_start = store.len();
        let ar = ArModel::init(&mut store, &vocab, config, &mut rng)?;
        let ar_end = store.len();
        let nar = NarModel::init(&mut store, &vocab, config, &mut rng)?;
        let nar_end = store.len();

        Ok(ModelBundle {
            store,
            nets: Networks {
                vocab,
                config: config.clone(),
                ar,
                nar,
                ar_range: (ar_start, ar_end),
                nar_range: (ar_end, nar_end),
            },
        })
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.store.total_values()
    }
}
