//! Objective metrics over the toy world: token error rate, attribute
//! accuracy, speaker similarity, and the evaluation report generator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Networks;
use crate::neuralcore::ParamStore;
use crate::sampler::{synthesize, DecodePolicy, GuidanceWeights};
use crate::toyworld::{
    mix2, oracle_classify, oracle_decode_content, oracle_speaker_embed, AcousticGrid,
    DatasetExample, Instruction,
};

/// Levenshtein distance over the reference, normalized by reference length.
/// May exceed 1 when the hypothesis is much longer.
pub fn toy_wer(reference: &[u32], hypothesis: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidConfig("empty reference".into()));
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

fn levenshtein(a: &[u32], b: &[u32]) -> usize {
    // Two-row DP.
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, &av) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &bv) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(av != bv);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Cosine similarity of the speaker embeddings of two grids, in [0, 1].
pub fn toy_secs(a: &AcousticGrid, b: &AcousticGrid) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let ea = oracle_speaker_embed(a)?;
    let eb = oracle_speaker_embed(b)?;
    Ok(ea.cosine(&eb))
}

/// Per-attribute exact-match rates over paired (instruction, grid) lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeAccuracy {
    pub pitch: f64,
    pub speed: f64,
    pub energy: f64,
    pub emotion: f64,
    /// Mean of the four global attributes above.
    pub mean: f64,
    /// Per-word stress detection accuracy (every content position counts).
    pub stress_word: f64,
    /// Per-sentence stress accuracy (the predicted index must match).
    pub stress_sentence: f64,
}

/// Classifies each grid with the oracle and counts exact matches against
/// each instruction's attributes. A grid that cannot be classified (empty)
/// counts as wrong everywhere.
pub fn attr_accuracy(pairs: &[(&Instruction, &AcousticGrid)]) -> Result<AttributeAccuracy> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("no evaluation pairs".into()));
    }
    let n = pairs.len() as f64;
    let mut hits = [0usize; 4];
    let mut stress_sentence = 0usize;
    let mut word_hits = 0usize;
    let mut word_total = 0usize;
    for &(inst, grid) in pairs {
        let want = &inst.attributes;
        word_total += inst.content.len();
        let Ok(got) = oracle_classify(grid) else { continue };
        hits[0] += usize::from(got.pitch == want.pitch);
        hits[1] += usize::from(got.speed == want.speed);
        hits[2] += usize::from(got.energy == want.energy);
        hits[3] += usize::from(got.emotion == want.emotion);
        stress_sentence += usize::from(got.stress_index == want.stress_index);
        for k in 0..inst.content.len() {
            let predicted = got.stress_index == Some(k);
            let actual = want.stress_index == Some(k);
            word_hits += usize::from(predicted == actual);
        }
    }
    let pitch = hits[0] as f64 / n;
    let speed = hits[1] as f64 / n;
    let energy = hits[2] as f64 / n;
    let emotion = hits[3] as f64 / n;
    Ok(AttributeAccuracy {
        pitch,
        speed,
        energy,
        emotion,
        mean: (pitch + speed + energy + emotion) / 4.0,
        stress_word: if word_total == 0 { 1.0 } else { word_hits as f64 / word_total as f64 },
        stress_sentence: stress_sentence as f64 / n,
    })
}

/// Aggregated objective metrics for one (checkpoint, guidance, policy)
/// setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub toy_wer: f64,
    pub attr_accuracy: AttributeAccuracy,
    pub toy_secs: Option<f64>,
    pub sample_count: usize,
    pub failures: usize,
    pub guidance: GuidanceWeights,
    pub policy: DecodePolicy,
    pub checkpoint_id: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Synthesizes every instruction in `eval_set` (no speech prompt), then
/// scores content recovery and attribute control against the oracles. A
/// sample whose generation or classification fails is counted as fully
/// wrong (error rate 1, no attribute matches) and logged in `failures`,
/// never fatal. Per-sample seeds derive from `policy.seed` and the sample
/// index, so reports are deterministic.
pub fn run_eval(
    store: &ParamStore<f32>,
    nets: &Networks,
    eval_set: &[DatasetExample],
    gw: &GuidanceWeights,
    policy: &DecodePolicy,
    checkpoint_id: &str,
) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation set".into()));
    }
    let outputs: Vec<(f64, Option<AcousticGrid>)> = eval_set
        .par_iter()
        .enumerate()
        .map(|(i, example)| {
            let sample_policy =
                DecodePolicy { seed: mix2(policy.seed, i as u64), ..policy.clone() };
            match synthesize(store, nets, &example.instruction.tokens, gw, &sample_policy, None, None)
            {
                Ok((grid, _report)) => {
                    let decoded = oracle_decode_content(&grid);
                    let wer = toy_wer(&example.instruction.content, &decoded)
                        .unwrap_or(1.0)
                        .min(4.0);
                    (wer, Some(grid))
                }
                Err(_) => (1.0, None),
            }
        })
        .collect();

    let failures = outputs
        .iter()
        .filter(|(_, grid)| grid.as_ref().map_or(true, |g| oracle_classify(g).is_err()))
        .count();
    let toy_wer_mean = outputs.iter().map(|(w, _)| w).sum::<f64>() / outputs.len() as f64;

    let empty = AcousticGrid::empty(crate::toyworld::GRID_LAYERS);
    let pairs: Vec<(&Instruction, &AcousticGrid)> = eval_set
        .iter()
        .zip(&outputs)
        .map(|(example, (_, grid))| (&example.instruction, grid.as_ref().unwrap_or(&empty)))
        .collect();
    let attr = attr_accuracy(&pairs)?;

    Ok(EvalReport {
        toy_wer: toy_wer_mean,
        attr_accuracy: attr,
        toy_secs: None,
        sample_count: eval_set.len(),
        failures,
        guidance: *gw,
        policy: policy.clone(),
        checkpoint_id: checkpoint_id.to_string(),
    })
}

/// The four-row guidance sweep used by the ablation table: no guidance,
/// then each strength raised to 2 on its own.
pub fn ablation_sweep() -> Vec<GuidanceWeights> {
    vec![
        GuidanceWeights::disabled(),
        GuidanceWeights { gamma: 2.0, alpha: 1.0, beta: 1.0 },
        GuidanceWeights { gamma: 1.0, alpha: 2.0, beta: 1.0 },
        GuidanceWeights { gamma: 1.0, alpha: 1.0, beta: 2.0 },
    ]
}
