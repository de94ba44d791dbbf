//! Vocabulary layout, special ids, duplicate removal, and the exact assembly
//! of autoregressive and non-autoregressive training examples.
//!
//! The decoder emits into one unified vocabulary so a single softmax covers
//! every generation segment:
//!
//! ```text
//! [0, 32)    semantic ids            [33, 129)  acoustic ids (value + 33)
//! 32         S_EOS                   129        A_EOS
//! 130, 131   language labels L0, L1
//! ```
//!
//! Ids 132..136 (`MASK_ST`, `MASK_AT`, `MASK_TEXT`, `PAD`) exist only on the
//! input side, for condition dropout and batching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toyworld::{mix2, AcousticGrid, Instruction, Language, ACOUSTIC_VOCAB, CONTENT_SYMBOLS};

/// Generation segments of the unified vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Lang,
    Semantic,
    Coarse,
}

/// Sizes and special ids of every vocabulary in the system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabMap {
    pub instruction_size: u32,
    pub semantic_ids: u32,
    pub acoustic_ids: u32,
    pub s_eos: u32,
    pub acoustic_base: u32,
    pub a_eos: u32,
    pub lang_base: u32,
    pub unified_size: u32,
    pub mask_st: u32,
    pub mask_at: u32,
    pub mask_text: u32,
    pub pad: u32,
}

impl Default for VocabMap {
    fn default() -> Self {
        Self::new()
    }
}

impl VocabMap {
    pub fn new() -> Self {
        let semantic_ids = CONTENT_SYMBOLS;
        let s_eos = semantic_ids;
        let acoustic_base = s_eos + 1;
        let a_eos = acoustic_base + ACOUSTIC_VOCAB;
        let lang_base = a_eos + 1;
        let unified_size = lang_base + 2;
        VocabMap {
            instruction_size: crate::toyworld::instoken::SIZE,
            semantic_ids,
            acoustic_ids: ACOUSTIC_VOCAB,
            s_eos,
            acoustic_base,
            a_eos,
            lang_base,
            unified_size,
            mask_st: unified_size,
            mask_at: unified_size + 1,
            mask_text: unified_size + 2,
            pad: unified_size + 3,
        }
    }

    /// Size of the decoder-input embedding table (unified ids plus the
    /// input-only specials).
    pub fn extended_size(&self) -> u32 {
        self.pad + 1
    }

    pub fn lang_label(&self, language: Language) -> u32 {
        self.lang_base + language.index()
    }

    pub fn language_of_label(&self, id: u32) -> Option<Language> {
        Language::from_index(id.checked_sub(self.lang_base)?)
    }

    pub fn acoustic_to_unified(&self, value: u32) -> u32 {
        debug_assert!(value < self.acoustic_ids);
        self.acoustic_base + value
    }

    pub fn unified_to_acoustic(&self, id: u32) -> Option<u32> {
        (id >= self.acoustic_base && id < self.a_eos).then(|| id - self.acoustic_base)
    }

    pub fn is_semantic(&self, id: u32) -> bool {
        id < self.semantic_ids
    }

    pub fn segment_of(&self, id: u32) -> Option<Segment> {
        if id <= self.s_eos {
            Some(Segment::Semantic)
        } else if id <= self.a_eos {
            Some(Segment::Coarse)
        } else if id < self.unified_size {
            Some(Segment::Lang)
        } else {
            None
        }
    }

    /// Boolean mask over the unified vocabulary admitting exactly the ids
    /// that may be sampled inside `segment` (terminators included).
    pub fn legality_mask(&self, segment: Segment) -> Vec<bool> {
        (0..self.unified_size)
            .map(|id| self.segment_of(id) == Some(segment))
            .collect()
    }
}

/// Language label plus deduplicated semantic ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticSequence {
    /// Language label id in the unified vocabulary.
    pub language: u32,
    /// Deduplicated semantic ids (length T').
    pub ids: Vec<u32>,
    /// Whether generation reached the terminator (always true for oracle
    /// sequences).
    pub terminated: bool,
}

impl SemanticSequence {
    /// Oracle-side constructor: dedups the raw stream and attaches the label.
    pub fn from_raw(vocab: &VocabMap, language: Language, raw: &[u32]) -> Self {
        SemanticSequence {
            language: vocab.lang_label(language),
            ids: dedup(raw),
            terminated: true,
        }
    }
}

/// Collapses maximal runs of equal ids to a single id. Order-preserving and
/// idempotent.
pub fn dedup(raw: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(raw.len());
    for &id in raw {
        if out.last() != Some(&id) {
            out.push(id);
        }
    }
    out
}

/// One supervised step for the causal decoder: the concatenated target
/// sequence with its loss mask and condition-dropout flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArTrainingExample {
    pub instruction_tokens: Vec<u32>,
    /// Embedded-prefix length m (= instruction token count).
    pub prefix_len: usize,
    /// `[l, S.., S_eos, A1.., A_eos]` in unified ids.
    pub targets: Vec<u32>,
    /// Same length as `targets`; positions with `false` carry no loss.
    pub loss_mask: Vec<bool>,
    pub drop_text: bool,
    pub drop_st: bool,
}

impl ArTrainingExample {
    /// Number of semantic ids in the target (T').
    pub fn semantic_len(&self) -> usize {
        let vocab = VocabMap::new();
        self.targets.iter().filter(|&&id| vocab.is_semantic(id)).count()
    }

    pub fn coarse_len(&self) -> usize {
        let vocab = VocabMap::new();
        self.targets
            .iter()
            .filter(|&&id| vocab.unified_to_acoustic(id).is_some())
            .count()
    }

    /// Decoder-input ids: every target except the last, with the semantic
    /// segment (ids and terminator) replaced by `MASK_ST` when `drop_st`.
    pub fn input_ids(&self, vocab: &VocabMap) -> Vec<u32> {
        let mut ids: Vec<u32> = self.targets[..self.targets.len() - 1].to_vec();
        if self.drop_st {
            for id in ids.iter_mut() {
                if *id <= vocab.s_eos {
                    *id = vocab.mask_st;
                }
            }
        }
        ids
    }
}

/// Builds the concatenated AR example `<E_ins, l, S, A(:,1)>` with loss over
/// `[l, S, S_eos, A1, A_eos]`. With `drop_text` the instruction embeddings
/// are flagged for replacement by the learned text-mask vector; with
/// `drop_st` the semantic inputs are masked and semantic targets drop out of
/// the loss (predicting them through masks would be ill-posed).
pub fn build_ar_example(
    vocab: &VocabMap,
    inst: &Instruction,
    sem: &SemanticSequence,
    coarse: &[u32],
    drop_text: bool,
    drop_st: bool,
) -> Result<ArTrainingExample> {
    if coarse.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let t_sem = sem.ids.len();
    let mut targets = Vec::with_capacity(t_sem + coarse.len() + 3);
    targets.push(sem.language);
    targets.extend_from_slice(&sem.ids);
    targets.push(vocab.s_eos);
    targets.extend(coarse.iter().map(|&v| vocab.acoustic_to_unified(v)));
    targets.push(vocab.a_eos);

    let mut loss_mask = vec![true; targets.len()];
    if drop_st {
        for k in 1..=t_sem + 1 {
            loss_mask[k] = false;
        }
    }

    Ok(ArTrainingExample {
        instruction_tokens: inst.tokens.clone(),
        prefix_len: inst.tokens.len(),
        targets,
        loss_mask,
        drop_text,
        drop_st,
    })
}

/// Ablation variant with the semantic stage removed: targets are
/// `[l, A1.., A_eos]` and only text dropout applies.
pub fn build_ar_example_no_semantic(
    vocab: &VocabMap,
    inst: &Instruction,
    language: Language,
    coarse: &[u32],
    drop_text: bool,
) -> Result<ArTrainingExample> {
    if coarse.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut targets = Vec::with_capacity(coarse.len() + 2);
    targets.push(vocab.lang_label(language));
    targets.extend(coarse.iter().map(|&v| vocab.acoustic_to_unified(v)));
    targets.push(vocab.a_eos);
    let loss_mask = vec![true; targets.len()];
    Ok(ArTrainingExample {
        instruction_tokens: inst.tokens.clone(),
        prefix_len: inst.tokens.len(),
        targets,
        loss_mask,
        drop_text,
        drop_st: false,
    })
}

/// One supervised step for the non-causal model: a target residual layer,
/// an optional prompt prefix, and the masked suffix positions to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NarTrainingExample {
    pub instruction_tokens: Vec<u32>,
    pub language_label: u32,
    pub semantic_ids: Vec<u32>,
    pub grid: AcousticGrid,
    /// Target layer index i, 1-based in 2..=n.
    pub target_layer: usize,
    /// Prompt prefix length u; prompt frames are never masked.
    pub prompt_len: usize,
    /// Sorted masked positions, all in `[prompt_len, frames)`.
    pub masked_positions: Vec<usize>,
}

/// Number of suffix positions masked for a mask-schedule draw `v ∈ (0, 1]`:
/// `⌈cos(π·v/2)·suffix⌉`. `v → 0⁺` masks everything, `v = 1` masks nothing
/// (cos(π/2) is a hair above zero in floats, so pin that endpoint).
pub fn mask_count(suffix: usize, v: f64) -> usize {
    if v >= 1.0 {
        return 0;
    }
    let rho = (std::f64::consts::PI * v / 2.0).cos();
    (rho * suffix as f64).ceil() as usize
}

/// Draws layer, prompt length, and masked set for one NAR step:
/// `i ~ U{2..n}`; with probability 0.7 a prompt of `round(f·T)` frames,
/// `f ~ U[0.2, 0.5]` (clamped below T), else no prompt; mask ratio from the
/// cosine schedule over the suffix. Deterministic per `rng_seed`.
pub fn build_nar_example(
    vocab: &VocabMap,
    inst: &Instruction,
    sem: &SemanticSequence,
    grid: &AcousticGrid,
    rng_seed: u64,
) -> Result<NarTrainingExample> {
    build_nar_example_with(vocab, inst, sem, grid, rng_seed, 0.3)
}

/// [`build_nar_example`] with a configurable prompt-omission probability.
pub fn build_nar_example_with(
    vocab: &VocabMap,
    inst: &Instruction,
    sem: &SemanticSequence,
    grid: &AcousticGrid,
    rng_seed: u64,
    p_no_prompt: f64,
) -> Result<NarTrainingExample> {
    if grid.layers() < 2 {
        return Err(Error::LayerRange { layer: 2, layers: grid.layers() });
    }
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    debug_assert_eq!(sem.language, vocab.lang_label(inst.attributes.language));

    let mut rng = ChaCha8Rng::seed_from_u64(mix2(0x4e41_52, rng_seed));
    let frames = grid.frames();

    let target_layer = rng.gen_range(2..=grid.layers());
    let prompt_len = if rng.gen_bool(1.0 - p_no_prompt) {
        let f = rng.gen_range(0.2..=0.5);
        ((f * frames as f64).round() as usize).min(frames - 1)
    } else {
        0
    };

    let v = 1.0 - rng.gen::<f64>(); // (0, 1]
    let suffix = frames - prompt_len;
    let count = mask_count(suffix, v);
    let mut masked_positions: Vec<usize> = rand::seq::index::sample(&mut rng, suffix, count)
        .into_iter()
        .map(|k| prompt_len + k)
        .collect();
    masked_positions.sort_unstable();

    Ok(NarTrainingExample {
        instruction_tokens: inst.tokens.clone(),
        language_label: sem.language,
        semantic_ids: sem.ids.clone(),
        grid: grid.clone(),
        target_layer,
        prompt_len,
        masked_positions,
    })
}

/// Checks that a decoder id sequence follows the fixed segment order
/// `l → S.. → S_eos → A1.. → A_eos` (prefixes of it are fine).
pub fn validate_segment_order(vocab: &VocabMap, ids: &[u32]) -> Result<()> {
    #[derive(PartialEq, PartialOrd)]
    enum Stage {
        Lang,
        Semantic,
        Coarse,
        Done,
    }
    let mut stage = Stage::Lang;
    for (position, &id) in ids.iter().enumerate() {
        let err = |reason: &str| {
            Err(Error::SegmentOrder { position, reason: reason.to_string() })
        };
        if id >= vocab.unified_size {
            return err("id outside unified vocabulary");
        }
        match stage {
            Stage::Lang => {
                if vocab.language_of_label(id).is_none() {
                    return err("expected a language label first");
                }
                stage = Stage::Semantic;
            }
            Stage::Semantic => {
                if id == vocab.s_eos {
                    stage = Stage::Coarse;
                } else if !vocab.is_semantic(id) {
                    return err("expected a semantic id or S_eos");
                }
            }
            Stage::Coarse => {
                if id == vocab.a_eos {
                    stage = Stage::Done;
                } else if vocab.unified_to_acoustic(id).is_none() {
                    return err("expected an acoustic id or A_eos");
                }
            }
            Stage::Done => return err("ids after A_eos"),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{oracle_acoustic, oracle_semantic_raw, sample_instruction};
    use proptest::prelude::*;

    fn vocab() -> VocabMap {
        VocabMap::new()
    }

    fn oracle_parts(seed: u64) -> (Instruction, SemanticSequence, Vec<u32>) {
        let inst = sample_instruction(seed, Language::L0);
        let sem = SemanticSequence::from_raw(&vocab(), Language::L0, &oracle_semantic_raw(&inst));
        let coarse = oracle_acoustic(&inst).coarse();
        (inst, sem, coarse)
    }

    #[test]
    fn dedup_collapses_runs() {
        assert_eq!(dedup(&[7, 7, 3, 3, 3, 7]), vec![7, 3, 7]);
        assert_eq!(dedup(&[]), Vec::<u32>::new());
        assert_eq!(dedup(&[5]), vec![5]);
    }

    proptest! {
        #[test]
        fn dedup_idempotent_and_subsequence(raw in proptest::collection::vec(0u32..8, 0..64)) {
            let once = dedup(&raw);
            prop_assert_eq!(&dedup(&once), &once);
            prop_assert!(once.windows(2).all(|w| w[0] != w[1]));
            // Subsequence check.
            let mut it = raw.iter();
            for id in &once {
                prop_assert!(it.any(|r| r == id));
            }
        }
    }

    #[test]
    fn vocab_ids_are_disjoint_and_cover() {
        let v = vocab();
        assert_eq!(v.unified_size, 132);
        assert_eq!(v.extended_size(), 136);
        let lang = v.legality_mask(Segment::Lang);
        let sem = v.legality_mask(Segment::Semantic);
        let coarse = v.legality_mask(Segment::Coarse);
        assert_eq!(lang.iter().filter(|&&b| b).count(), 2);
        assert_eq!(sem.iter().filter(|&&b| b).count(), 33);
        assert_eq!(coarse.iter().filter(|&&b| b).count(), 97);
        for id in 0..v.unified_size as usize {
            let hits = usize::from(lang[id]) + usize::from(sem[id]) + usize::from(coarse[id]);
            assert_eq!(hits, 1, "id {id} covered {hits} times");
        }
    }

    #[test]
    fn ar_example_loss_mask_counts() {
        let (inst, sem, coarse) = oracle_parts(7);
        let ex = build_ar_example(&vocab(), &inst, &sem, &coarse, false, false).unwrap();
        let expected = 1 + sem.ids.len() + 1 + coarse.len() + 1;
        assert_eq!(ex.targets.len(), expected);
        assert_eq!(ex.loss_mask.iter().filter(|&&b| b).count(), expected);
        assert_eq!(ex.semantic_len(), sem.ids.len());
        assert_eq!(ex.coarse_len(), coarse.len());
        validate_segment_order(&vocab(), &ex.targets).unwrap();
    }

    #[test]
    fn ar_example_drop_st_masks_semantic_loss() {
        let (inst, sem, coarse) = oracle_parts(9);
        let ex = build_ar_example(&vocab(), &inst, &sem, &coarse, false, true).unwrap();
        let t_sem = sem.ids.len();
        assert!(ex.loss_mask[0]);
        for k in 1..=t_sem + 1 {
            assert!(!ex.loss_mask[k], "semantic target {k} still carries loss");
        }
        for k in t_sem + 2..ex.targets.len() {
            assert!(ex.loss_mask[k]);
        }
        let v = vocab();
        let inputs = ex.input_ids(&v);
        for k in 1..=t_sem + 1 {
            assert_eq!(inputs[k], v.mask_st);
        }
        assert_eq!(inputs[0], ex.targets[0]);
    }

    #[test]
    fn ar_example_is_deterministic() {
        let (inst, sem, coarse) = oracle_parts(11);
        let a = build_ar_example(&vocab(), &inst, &sem, &coarse, true, false).unwrap();
        let b = build_ar_example(&vocab(), &inst, &sem, &coarse, true, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ar_example_rejects_empty_coarse() {
        let (inst, sem, _) = oracle_parts(3);
        assert!(build_ar_example(&vocab(), &inst, &sem, &[], false, false).is_err());
    }

    #[test]
    fn ablated_example_has_no_semantic_segment() {
        let (inst, _, coarse) = oracle_parts(5);
        let ex =
            build_ar_example_no_semantic(&vocab(), &inst, Language::L0, &coarse, false).unwrap();
        assert_eq!(ex.targets.len(), coarse.len() + 2);
        assert!(!ex.targets.iter().any(|&id| vocab().is_semantic(id) || id == vocab().s_eos));
    }

    #[test]
    fn mask_count_schedule_endpoints() {
        assert_eq!(mask_count(10, 1e-12), 10); // v -> 0+ masks everything
        assert_eq!(mask_count(10, 1.0), 0); // v = 1 masks nothing
        assert_eq!(mask_count(0, 0.5), 0);
    }

    #[test]
    fn nar_example_respects_prompt_and_count() {
        let v = vocab();
        for seed in 0..300u64 {
            let inst = sample_instruction(seed, Language::L1);
            let sem = SemanticSequence::from_raw(&v, Language::L1, &oracle_semantic_raw(&inst));
            let grid = oracle_acoustic(&inst);
            let ex = build_nar_example(&v, &inst, &sem, &grid, seed).unwrap();
            assert!((2..=grid.layers()).contains(&ex.target_layer));
            assert!(ex.prompt_len < grid.frames());
            assert!(ex.masked_positions.iter().all(|&p| p >= ex.prompt_len && p < grid.frames()));
            let mut unique = ex.masked_positions.clone();
            unique.dedup();
            assert_eq!(unique.len(), ex.masked_positions.len());
        }
    }

    #[test]
    fn nar_prompt_omission_rate_is_point_three() {
        let v = vocab();
        let inst = sample_instruction(0, Language::L0);
        let sem = SemanticSequence::from_raw(&v, Language::L0, &oracle_semantic_raw(&inst));
        let grid = oracle_acoustic(&inst);
        let omitted = (0..10_000u64)
            .filter(|&s| build_nar_example(&v, &inst, &sem, &grid, s).unwrap().prompt_len == 0)
            .count();
        let frac = omitted as f64 / 10_000.0;
        assert!((0.28..=0.32).contains(&frac), "prompt omission rate {frac}");
    }

    #[test]
    fn nar_example_rejects_flat_grids() {
        let v = vocab();
        let inst = sample_instruction(1, Language::L0);
        let sem = SemanticSequence::from_raw(&v, Language::L0, &oracle_semantic_raw(&inst));
        let flat = AcousticGrid::new(4, 1, vec![0; 4]).unwrap();
        assert!(build_nar_example(&v, &inst, &sem, &flat, 0).is_err());
    }

    #[test]
    fn segment_order_validation() {
        let v = vocab();
        validate_segment_order(&v, &[v.lang_base, 3, 5, v.s_eos, v.acoustic_base, v.a_eos])
            .unwrap();
        validate_segment_order(&v, &[v.lang_base + 1, 3]).unwrap();
        assert!(validate_segment_order(&v, &[3]).is_err());
        assert!(validate_segment_order(&v, &[v.lang_base, v.acoustic_base]).is_err());
        assert!(validate_segment_order(&v, &[v.lang_base, v.s_eos, 3]).is_err());
        assert!(
            validate_segment_order(&v, &[v.lang_base, v.s_eos, v.a_eos, v.acoustic_base]).is_err()
        );
    }
}
