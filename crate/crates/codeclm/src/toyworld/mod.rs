//! A deterministic synthetic universe standing in for speech.
//!
//! Instructions are token sequences mixing attribute-description tokens with
//! a quoted content span. Every instruction maps through pure oracles to a
//! ground-truth semantic token sequence and a T×n acoustic grid, and oracle
//! decoders recover content, attributes, and speaker identity from any grid.
//!
//! The laws of the world:
//!
//! * raw semantic ids repeat each content symbol `1 + (hash(symbol, speaker)
//!   mod 3)` times, so the deduplicated sequence has exactly one id per
//!   symbol and is independent of prosody;
//! * the coarse acoustic column encodes content and pitch (`symbol*3 +
//!   pitch`), duration encodes speed (6/4/2 frames per symbol);
//! * the second column encodes energy, emotion, and a per-symbol stress bit
//!   (`energy*8 + emotion*2 + stressed`);
//! * residual columns i ∈ {3..n} encode the speaker as
//!   `(speaker_seed + i*(frame mod 4)) mod V_a`. The period keeps an
//!   utterance's code histogram independent of its length, so one speaker
//!   produces the same signature at any duration.

mod dataset;

pub use dataset::{read_records, write_records, DatasetExample, Record, RECORD_VERSION};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of content symbols per language. Alphabets are disjoint.
pub const SYMBOLS_PER_LANGUAGE: u32 = 16;
/// Total content symbols across both languages.
pub const CONTENT_SYMBOLS: u32 = 2 * SYMBOLS_PER_LANGUAGE;
/// Content span length bounds (inclusive).
pub const MIN_CONTENT_LEN: usize = 1;
pub const MAX_CONTENT_LEN: usize = 12;
/// Acoustic codebook size V_a, shared by every grid layer.
pub const ACOUSTIC_VOCAB: u32 = 96;
/// Grid layer count n: one coarse column plus n-1 residual columns.
pub const GRID_LAYERS: usize = 4;
/// Probability that a sampled instruction carries a stress mark.
pub const STRESS_PROBABILITY: f64 = 0.25;
/// Frame period of the residual speaker code.
pub const SPEAKER_PERIOD: u64 = 4;

/// Instruction-vocabulary layout. Content symbols come first so a content id
/// doubles as its instruction token id.
pub mod instoken {
    use super::CONTENT_SYMBOLS;

    pub const OPEN_QUOTE: u32 = CONTENT_SYMBOLS;
    pub const CLOSE_QUOTE: u32 = CONTENT_SYMBOLS + 1;
    pub const PITCH_BASE: u32 = CONTENT_SYMBOLS + 2;
    pub const SPEED_BASE: u32 = PITCH_BASE + 3;
    pub const ENERGY_BASE: u32 = SPEED_BASE + 3;
    pub const EMOTION_BASE: u32 = ENERGY_BASE + 3;
    pub const STRESS_BASE: u32 = EMOTION_BASE + 4;
    /// Total instruction-vocabulary size.
    pub const SIZE: u32 = STRESS_BASE + super::MAX_CONTENT_LEN as u32;

    /// True for any token describing style rather than content.
    pub fn is_attribute(token: u32) -> bool {
        (PITCH_BASE..SIZE).contains(&token)
    }

    /// True for a fine-grained stress position token.
    pub fn is_stress(token: u32) -> bool {
        (STRESS_BASE..SIZE).contains(&token)
    }
}

macro_rules! three_way_enum {
    ($name:ident { $a:ident, $b:ident, $c:ident }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $a,
            $b,
            $c,
        }

        impl $name {
            pub const ALL: [$name; 3] = [$name::$a, $name::$b, $name::$c];

            pub fn index(self) -> u32 {
                self as u32
            }

            pub fn from_index(i: u32) -> Option<Self> {
                Self::ALL.get(i as usize).copied()
            }
        }
    };
}

three_way_enum!(Pitch { Low, Mid, High });
three_way_enum!(Speed { Slow, Mid, Fast });
three_way_enum!(Energy { Low, Mid, High });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Emotion {
    Neutral,
    Happy,
    Sad,
    Angry,
}

impl Emotion {
    pub const ALL: [Emotion; 4] = [Emotion::Neutral, Emotion::Happy, Emotion::Sad, Emotion::Angry];

    pub fn index(self) -> u32 {
        self as u32
    }

    pub fn from_index(i: u32) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Language {
    L0,
    L1,
}

impl Language {
    pub fn index(self) -> u32 {
        self as u32
    }

    pub fn from_index(i: u32) -> Option<Self> {
        match i {
            0 => Some(Language::L0),
            1 => Some(Language::L1),
            _ => None,
        }
    }

    /// First content symbol of this language's alphabet.
    pub fn symbol_offset(self) -> u32 {
        self.index() * SYMBOLS_PER_LANGUAGE
    }
}

impl Speed {
    /// Frames emitted per content symbol.
    pub fn frames_per_symbol(self) -> usize {
        match self {
            Speed::Slow => 6,
            Speed::Mid => 4,
            Speed::Fast => 2,
        }
    }
}

/// Which parts of an instruction a dataset phase spells out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Content only: the quoted span with no description tokens.
    Pretrain,
    /// Content plus the four global attribute tokens.
    Instruct,
    /// Content, global attributes, and stress position tokens.
    Stress,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Instruct => "instruct",
            Phase::Stress => "stress",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSet {
    pub pitch: Pitch,
    pub speed: Speed,
    pub energy: Energy,
    pub emotion: Emotion,
    pub stress_index: Option<usize>,
    pub language: Language,
}

/// Attributes as recovered from a grid; language is not encoded acoustically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecoveredAttributes {
    pub pitch: Pitch,
    pub speed: Speed,
    pub energy: Energy,
    pub emotion: Emotion,
    pub stress_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    /// Token sequence over the instruction vocabulary.
    pub tokens: Vec<u32>,
    pub attributes: AttributeSet,
    /// Content symbol ids (global across languages).
    pub content: Vec<u32>,
    pub speaker_seed: u64,
}

impl Instruction {
    /// Checks the structural invariants: exactly one quote pair enclosing
    /// exactly the content, symbols within the language alphabet, no
    /// immediate symbol repetition, stress index inside the span.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::InvalidConfig(format!("invalid instruction: {reason}")));
        if self.content.is_empty() || self.content.len() > MAX_CONTENT_LEN {
            return bad("content length out of range");
        }
        let offset = self.attributes.language.symbol_offset();
        for &c in &self.content {
            if c < offset || c >= offset + SYMBOLS_PER_LANGUAGE {
                return bad("content symbol outside language alphabet");
            }
        }
        if self.content.windows(2).any(|w| w[0] == w[1]) {
            return bad("immediate content repetition");
        }
        if let Some(k) = self.attributes.stress_index {
            if k >= self.content.len() {
                return bad("stress index beyond content");
            }
        }
        let open: Vec<usize> = positions(&self.tokens, instoken::OPEN_QUOTE);
        let close: Vec<usize> = positions(&self.tokens, instoken::CLOSE_QUOTE);
        if open.len() != 1 || close.len() != 1 || open[0] >= close[0] {
            return bad("quote delimiters malformed");
        }
        let span = &self.tokens[open[0] + 1..close[0]];
        if span != self.content.as_slice() {
            return bad("quoted span does not equal content");
        }
        for (i, &t) in self.tokens.iter().enumerate() {
            let inside = i > open[0] && i < close[0];
            if !inside && i != open[0] && i != close[0] && !instoken::is_attribute(t) {
                return bad("content symbol outside the quoted span");
            }
            if t >= instoken::SIZE {
                return bad("token outside instruction vocabulary");
            }
        }
        Ok(())
    }
}

fn positions(tokens: &[u32], needle: u32) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter_map(|(i, &t)| (t == needle).then_some(i))
        .collect()
}

/// Utterance-level speaker signature: a normalized histogram over the
/// residual-layer codes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub values: Vec<f64>,
}

impl SpeakerEmbedding {
    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        let na: f64 = self.values.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = other.values.iter().map(|b| b * b).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

/// T×n grid of discrete codec ids, row-major by frame. Column 0 is the
/// coarse layer; columns 1..n-1 carry residual detail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcousticGrid {
    frames: usize,
    layers: usize,
    values: Vec<u32>,
}

impl AcousticGrid {
    pub fn new(frames: usize, layers: usize, values: Vec<u32>) -> Result<Self> {
        if values.len() != frames * layers {
            return Err(Error::ShapeMismatch {
                expected: vec![frames, layers],
                actual: vec![values.len()],
            });
        }
        Ok(Self { frames, layers, values })
    }

    pub fn empty(layers: usize) -> Self {
        Self { frames: 0, layers, values: Vec::new() }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    /// Value at frame `t`, zero-based layer `layer`.
    pub fn get(&self, t: usize, layer: usize) -> u32 {
        self.values[t * self.layers + layer]
    }

    pub fn set(&mut self, t: usize, layer: usize, value: u32) {
        self.values[t * self.layers + layer] = value;
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    /// The coarse column (layer 0) as a vector.
    pub fn coarse(&self) -> Vec<u32> {
        (0..self.frames).map(|t| self.get(t, 0)).collect()
    }

    pub fn column(&self, layer: usize) -> Vec<u32> {
        (0..self.frames).map(|t| self.get(t, layer)).collect()
    }

    /// A copy of the first `frames` rows, used as a speech-prompt prefix.
    pub fn prefix(&self, frames: usize) -> AcousticGrid {
        let frames = frames.min(self.frames);
        AcousticGrid {
            frames,
            layers: self.layers,
            values: self.values[..frames * self.layers].to_vec(),
        }
    }
}

/// Stable 64-bit mix used everywhere a deterministic hash is needed.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn mix2(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b)
}

/// How many times a content symbol's semantic id repeats before dedup.
pub fn duplication_count(symbol: u32, speaker_seed: u64) -> usize {
    1 + (mix2(symbol as u64, speaker_seed) % 3) as usize
}

/// Draws a full instruction: uniform attributes, content length 1..=12 with
/// no immediate repetition, stress with probability 0.25, and one of three
/// ordering templates (description before, after, or split around the span).
/// Deterministic for a fixed (seed, language).
pub fn sample_instruction(seed: u64, language: Language) -> Instruction {
    sample_instruction_for_phase(seed, language, Phase::Stress)
}

/// Phase-aware variant: all phases share the same attribute draw for a given
/// seed; the phase only controls how much of it the tokens spell out.
/// `Pretrain` keeps just the quoted span (and clears stress), `Instruct`
/// spells out the four global attributes (and clears stress), `Stress`
/// additionally includes the stress position token when present.
pub fn sample_instruction_for_phase(seed: u64, language: Language, phase: Phase) -> Instruction {
    let mut rng = ChaCha8Rng::seed_from_u64(mix2(seed, language.index() as u64));

    let pitch = Pitch::ALL[rng.gen_range(0..3)];
    let speed = Speed::ALL[rng.gen_range(0..3)];
    let energy = Energy::ALL[rng.gen_range(0..3)];
    let emotion = Emotion::ALL[rng.gen_range(0..4)];

    let len = rng.gen_range(MIN_CONTENT_LEN..=MAX_CONTENT_LEN);
    let offset = language.symbol_offset();
    let mut content = Vec::with_capacity(len);
    for i in 0..len {
        let symbol = if i == 0 {
            offset + rng.gen_range(0..SYMBOLS_PER_LANGUAGE)
        } else {
            // Exclude the previous symbol so dedup preserves length.
            let prev = content[i - 1] - offset;
            let draw = rng.gen_range(0..SYMBOLS_PER_LANGUAGE - 1);
            offset + if draw >= prev { draw + 1 } else { draw }
        };
        content.push(symbol);
    }

    let speaker_seed = rng.gen::<u64>();

    let stress_index = if rng.gen_bool(STRESS_PROBABILITY) {
        Some(rng.gen_range(0..len))
    } else {
        None
    };

    let stress_index = match phase {
        Phase::Pretrain | Phase::Instruct => None,
        Phase::Stress => stress_index,
    };

    let attributes = AttributeSet { pitch, speed, energy, emotion, stress_index, language };

    let mut attr_tokens: Vec<u32> = match phase {
        Phase::Pretrain => Vec::new(),
        Phase::Instruct | Phase::Stress => vec![
            instoken::PITCH_BASE + pitch.index(),
            instoken::SPEED_BASE + speed.index(),
            instoken::ENERGY_BASE + energy.index(),
            instoken::EMOTION_BASE + emotion.index(),
        ],
    };
    if let Some(k) = stress_index {
        attr_tokens.push(instoken::STRESS_BASE + k as u32);
    }
    attr_tokens.shuffle(&mut rng);

    let mut span = Vec::with_capacity(content.len() + 2);
    span.push(instoken::OPEN_QUOTE);
    span.extend_from_slice(&content);
    span.push(instoken::CLOSE_QUOTE);

    let template = rng.gen_range(0..3u32);
    let tokens = if attr_tokens.is_empty() {
        span
    } else {
        match template {
            0 => attr_tokens.iter().copied().chain(span).collect(),
            1 => span.into_iter().chain(attr_tokens).collect(),
            _ => {
                let cut = if attr_tokens.len() > 1 {
                    rng.gen_range(1..attr_tokens.len())
                } else {
                    1
                };
                let mut t: Vec<u32> = attr_tokens[..cut.min(attr_tokens.len())].to_vec();
                t.extend(span);
                t.extend_from_slice(&attr_tokens[cut.min(attr_tokens.len())..]);
                t
            }
        }
    };

    Instruction { tokens, attributes, content, speaker_seed }
}

/// Ground-truth semantic ids before duplicate removal: each content symbol
/// repeats `duplication_count` times. Independent of every prosodic
/// attribute by construction.
pub fn oracle_semantic_raw(inst: &Instruction) -> Vec<u32> {
    let mut out = Vec::new();
    for &c in &inst.content {
        let r = duplication_count(c, inst.speaker_seed);
        out.extend(std::iter::repeat(c).take(r));
    }
    out
}

/// Ground-truth acoustic grid for an instruction.
pub fn oracle_acoustic(inst: &Instruction) -> AcousticGrid {
    let d = inst.attributes.speed.frames_per_symbol();
    let frames = inst.content.len() * d;
    let mut values = Vec::with_capacity(frames * GRID_LAYERS);
    let mut t = 0u64;
    for (k, &c) in inst.content.iter().enumerate() {
        let coarse = c * 3 + inst.attributes.pitch.index();
        let stressed = u32::from(inst.attributes.stress_index == Some(k));
        let detail =
            inst.attributes.energy.index() * 8 + inst.attributes.emotion.index() * 2 + stressed;
        for _ in 0..d {
            values.push(coarse);
            values.push(detail);
            for layer in 3..=GRID_LAYERS as u64 {
                let code = inst.speaker_seed.wrapping_add(layer * (t % SPEAKER_PERIOD));
                values.push((code % ACOUSTIC_VOCAB as u64) as u32);
            }
            t += 1;
        }
    }
    AcousticGrid { frames, layers: GRID_LAYERS, values }
}

/// Groups consecutive frames with equal coarse value; each group decodes to
/// `value / 3`. Works on any grid, not just oracle output; an empty grid
/// decodes to an empty sequence.
pub fn oracle_decode_content(grid: &AcousticGrid) -> Vec<u32> {
    coarse_groups(grid).into_iter().map(|(value, _)| value / 3).collect()
}

/// (coarse value, group length) for each maximal run of equal coarse values.
fn coarse_groups(grid: &AcousticGrid) -> Vec<(u32, usize)> {
    let mut groups: Vec<(u32, usize)> = Vec::new();
    for t in 0..grid.frames() {
        let v = grid.get(t, 0);
        match groups.last_mut() {
            Some((value, len)) if *value == v => *len += 1,
            _ => groups.push((v, 1)),
        }
    }
    groups
}

/// Most frequent value; ties resolve to the smallest value.
fn mode(values: impl Iterator<Item = u32>) -> u32 {
    let mut counts: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
    for v in values {
        *counts.entry(v).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(v, _)| v)
        .unwrap_or(0)
}

/// Recovers attributes from any non-empty grid. Pitch is the mode of
/// `coarse mod 3`; speed is the duration class nearest to the mean group
/// length (ties resolve toward the slower class); energy and emotion are
/// modes over the detail column, with energy clamped into its enum range
/// for non-oracle grids; stress is the first group where a strict majority
/// of detail values is odd.
pub fn oracle_classify(grid: &AcousticGrid) -> Result<RecoveredAttributes> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let coarse_mod = mode((0..grid.frames()).map(|t| grid.get(t, 0) % 3));
    let pitch = Pitch::from_index(coarse_mod).expect("mod 3 in range");

    let groups = coarse_groups(grid);
    let mean_len = groups.iter().map(|&(_, l)| l).sum::<usize>() as f64 / groups.len() as f64;
    let mut speed = Speed::Slow;
    let mut best = f64::INFINITY;
    for s in Speed::ALL {
        let dist = (mean_len - s.frames_per_symbol() as f64).abs();
        if dist < best {
            best = dist;
            speed = s;
        }
    }

    let energy_idx = mode((0..grid.frames()).map(|t| grid.get(t, 1) / 8)).min(2);
    let energy = Energy::from_index(energy_idx).expect("clamped");
    let emotion_idx = mode((0..grid.frames()).map(|t| (grid.get(t, 1) % 8) / 2));
    let emotion = Emotion::from_index(emotion_idx).expect("mod 8 / 2 in range");

    let mut stress_index = None;
    let mut frame = 0usize;
    for (k, &(_, len)) in groups.iter().enumerate() {
        let odd = (frame..frame + len).filter(|&t| grid.get(t, 1) % 2 == 1).count();
        if 2 * odd > len {
            stress_index = Some(k);
            break;
        }
        frame += len;
    }

    Ok(RecoveredAttributes { pitch, speed, energy, emotion, stress_index })
}

/// Normalized histogram of the residual-layer codes (1-based columns 3..n).
pub fn oracle_speaker_embed(grid: &AcousticGrid) -> Result<SpeakerEmbedding> {
    if grid.layers() < 3 {
        return Err(Error::NoResidualLayers { layers: grid.layers() });
    }
    let mut hist = vec![0.0f64; ACOUSTIC_VOCAB as usize];
    let mut total = 0.0f64;
    for t in 0..grid.frames() {
        for layer in 2..grid.layers() {
            let v = (grid.get(t, layer) as usize).min(ACOUSTIC_VOCAB as usize - 1);
            hist[v] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        for h in &mut hist {
            *h /= total;
        }
    }
    Ok(SpeakerEmbedding { values: hist })
}

#[cfg(test)]
mod tests;
