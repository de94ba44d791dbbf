//! Inference: the three-strength classifier-free guidance composition,
//! autoregressive generation of `⟨l, S, A1⟩`, and confidence-ranked
//! iterative parallel decoding of the residual layers, with optional
//! speech-prompt conditioning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ArDecoder, NarFrameState, Networks, PrefixKind};
use crate::neuralcore::ParamStore;
use crate::seqlayout::{Segment, SemanticSequence};
use crate::toyworld::{mix2, AcousticGrid, Language, GRID_LAYERS};

/// The three guidance strengths: `gamma` sharpens text conditioning during
/// semantic generation, `alpha` and `beta` sharpen text and semantic
/// conditioning during coarse acoustic generation. 1.0 disables a term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceWeights {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl GuidanceWeights {
    /// Guidance off everywhere (the pure-conditional fast path).
    pub fn disabled() -> Self {
        GuidanceWeights { gamma: 1.0, alpha: 1.0, beta: 1.0 }
    }
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        GuidanceWeights { gamma: 2.0, alpha: 2.0, beta: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceRule {
    /// Probability of the sampled id.
    Prob,
    /// Probability plus Gumbel noise in log space.
    ProbGumbel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodePolicy {
    pub temperature: f64,
    pub top_k: usize,
    pub max_semantic: usize,
    pub max_frames: usize,
    pub nar_iterations: usize,
    pub confidence: ConfidenceRule,
    pub seed: u64,
    /// Debugging aid: compute every guidance variant even at strength 1
    /// (the result must not change).
    pub force_all_variants: bool,
}

impl Default for DecodePolicy {
    fn default() -> Self {
        DecodePolicy {
            temperature: 1.0,
            top_k: 16,
            max_semantic: 16,
            max_frames: 96,
            nar_iterations: 4,
            confidence: ConfidenceRule::Prob,
            seed: 0,
            force_all_variants: false,
        }
    }
}

impl DecodePolicy {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.temperature <= 0.0 {
            return err("temperature must be positive");
        }
        if self.top_k == 0 {
            return err("top_k must be at least 1");
        }
        if self.nar_iterations == 0 {
            return err("nar_iterations must be at least 1");
        }
        if self.max_semantic == 0 || self.max_frames == 0 {
            return err("length caps must be positive");
        }
        Ok(())
    }
}

/// `uncond + γ·(cond − uncond)`. Strength 1 returns the conditional logits
/// bit-exactly.
pub fn cfg_semantic(cond: &[f32], uncond: &[f32], gamma: f64) -> Result<Vec<f32>> {
    if cond.len() != uncond.len() {
        return Err(Error::ShapeMismatch { expected: vec![cond.len()], actual: vec![uncond.len()] });
    }
    if gamma == 1.0 {
        return Ok(cond.to_vec());
    }
    let g = gamma as f32;
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| u + g * (c - u)).collect())
}

/// Nested two-knob guidance over the four conditioning variants:
/// `Â(S) = noText + α(full − noText)`, `Â(∅) = noBoth + α(noST − noBoth)`,
/// result `= Â(∅) + β(Â(S) − Â(∅))`. The identity collapses at `α = β = 1`
/// and at `β = 1` hold bit-exactly.
pub fn cfg_acoustic(
    full: &[f32],
    no_text: &[f32],
    no_st: &[f32],
    no_both: &[f32],
    alpha: f64,
    beta: f64,
) -> Result<Vec<f32>> {
    for other in [no_text, no_st, no_both] {
        if other.len() != full.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![full.len()],
                actual: vec![other.len()],
            });
        }
    }
    if alpha == 1.0 && beta == 1.0 {
        return Ok(full.to_vec());
    }
    let (a, b) = (alpha as f32, beta as f32);
    if beta == 1.0 {
        return Ok(full.iter().zip(no_text).map(|(&f, &nt)| nt + a * (f - nt)).collect());
    }
    Ok(full
        .iter()
        .zip(no_text)
        .zip(no_st.iter().zip(no_both))
        .map(|((&f, &nt), (&ns, &nb))| {
            let guided_s = nt + a * (f - nt);
            let guided_0 = nb + a * (ns - nb);
            guided_0 + b * (guided_s - guided_0)
        })
        .collect())
}

/// Temperature + top-k draw over the legal ids. Returns the sampled id and
/// its probability under the temperature-scaled softmax over all legal ids
/// (the confidence score used by iterative decoding).
pub fn sample_from_logits(
    logits: &[f32],
    legal: &[bool],
    temperature: f64,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> (u32, f64) {
    debug_assert_eq!(logits.len(), legal.len());
    let mut scaled: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| legal[i])
        .map(|(i, &v)| (i, v as f64 / temperature))
        .collect();
    debug_assert!(!scaled.is_empty(), "no legal ids to sample");

    let max = scaled.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = scaled.iter().map(|&(_, v)| (v - max).exp()).sum();

    // (value desc, id asc) puts ties in a fixed order.
    scaled.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    scaled.truncate(top_k);
    let top_total: f64 = scaled.iter().map(|&(_, v)| (v - max).exp()).sum();

    let draw = rng.gen::<f64>() * top_total;
    let mut acc = 0.0;
    let mut chosen = scaled[scaled.len() - 1].0;
    for &(i, v) in &scaled {
        acc += (v - max).exp();
        if draw < acc {
            chosen = i;
            break;
        }
    }
    let confidence = ((logits[chosen] as f64 / temperature) - max).exp() / total;
    (chosen as u32, confidence)
}

/// Cumulative keep targets for iterative decoding: after iteration k of K,
/// `⌈suffix·(1 − cos(π·k/(2K)))⌉` positions are kept; everything is kept at
/// k = K.
pub fn kept_schedule(suffix: usize, iterations: usize) -> Vec<usize> {
    (1..=iterations)
        .map(|k| {
            if k == iterations {
                suffix
            } else {
                let frac =
                    1.0 - (std::f64::consts::PI * k as f64 / (2.0 * iterations as f64)).cos();
                ((suffix as f64 * frac).ceil() as usize).min(suffix)
            }
        })
        .collect()
}

/// Deterministic rng for one layer/iteration of parallel decoding.
pub fn nar_iteration_rng(seed: u64, layer: usize, iteration: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix2(mix2(seed, 0x4e47), mix2(layer as u64, iteration as u64)))
}

fn ar_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix2(seed, 0xa7_67656e))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ArLog {
    pub semantic_len: usize,
    pub coarse_len: usize,
    pub truncated_semantic: bool,
    pub truncated_coarse: bool,
}

#[derive(Debug, Clone)]
pub struct ArGeneration {
    pub language: Language,
    pub semantic: SemanticSequence,
    /// Full coarse column, prompt prefix included.
    pub coarse: Vec<u32>,
    pub log: ArLog,
}

struct Variants<'a> {
    full: ArDecoder<'a, f32>,
    no_text: Option<ArDecoder<'a, f32>>,
    no_st: Option<ArDecoder<'a, f32>>,
    no_both: Option<ArDecoder<'a, f32>>,
}

impl Variants<'_> {
    fn append_all(&mut self, id: u32) -> Result<()> {
        self.full.append_ids(&[id])?;
        for v in [&mut self.no_text, &mut self.no_st, &mut self.no_both].into_iter().flatten() {
            v.append_ids(&[id])?;
        }
        Ok(())
    }
}

/// Text-guided logits for the label/semantic stage.
fn combine_st(variants: &Variants<'_>, gamma: f64) -> Result<Vec<f32>> {
    let cond = variants.full.next_logits();
    match &variants.no_text {
        Some(unc) => cfg_semantic(&cond, &unc.next_logits(), gamma),
        None => Ok(cond),
    }
}

/// Generates the language label, the semantic sequence, and the coarse
/// acoustic column, with guidance combined per stage. `coarse_prompt` ids
/// (a speech prompt's first layer) are fed as forced context before coarse
/// sampling. Deterministic per policy seed.
pub fn ar_generate(
    store: &ParamStore<f32>,
    nets: &Networks,
    inst_tokens: &[u32],
    gw: &GuidanceWeights,
    policy: &DecodePolicy,
    forced_language: Option<Language>,
    coarse_prompt: &[u32],
) -> Result<ArGeneration> {
    policy.validate()?;
    let vocab = &nets.vocab;
    let use_semantic = nets.config.use_semantic;
    let mut rng = ar_rng(policy.seed);

    let need_no_text = gw.gamma != 1.0 || gw.alpha != 1.0 || policy.force_all_variants;
    let need_st_variants = use_semantic && (gw.beta != 1.0 || policy.force_all_variants);

    let mut variants = Variants {
        full: ArDecoder::new(store, nets, inst_tokens, PrefixKind::Conditional)?,
        no_text: if need_no_text {
            Some(ArDecoder::new(store, nets, inst_tokens, PrefixKind::TextMasked)?)
        } else {
            None
        },
        no_st: None,
        no_both: None,
    };

    let lang_mask = vocab.legality_mask(Segment::Lang);
    let sem_mask = vocab.legality_mask(Segment::Semantic);
    let coarse_mask = vocab.legality_mask(Segment::Coarse);

    // Language label.
    let label = if let Some(language) = forced_language {
        vocab.lang_label(language)
    } else {
        let logits = combine_st(&variants, gw.gamma)?;
        sample_from_logits(&logits, &lang_mask, policy.temperature, policy.top_k, &mut rng).0
    };
    let language = vocab
        .language_of_label(label)
        .ok_or_else(|| Error::InvalidConfig("label outside language range".into()))?;
    variants.append_all(label)?;

    // Semantic tokens.
    let mut semantic_ids = Vec::new();
    let mut truncated_semantic = false;
    if use_semantic {
        loop {
            let logits = combine_st(&variants, gw.gamma)?;
            let (id, _) =
                sample_from_logits(&logits, &sem_mask, policy.temperature, policy.top_k, &mut rng);
            if id == vocab.s_eos {
                variants.append_all(vocab.s_eos)?;
                break;
            }
            semantic_ids.push(id);
            variants.append_all(id)?;
            if semantic_ids.len() >= policy.max_semantic {
                truncated_semantic = true;
                // Close the segment so coarse decoding sees a well-formed
                // boundary.
                variants.append_all(vocab.s_eos)?;
                break;
            }
        }

        // The semantic-dropped variants replay the stream with the whole
        // semantic segment masked, mirroring the training-side dropout.
        if need_st_variants {
            let masked_len = semantic_ids.len() + 1;
            let mut replay: Vec<u32> = Vec::with_capacity(1 + masked_len);
            replay.push(label);
            replay.extend(std::iter::repeat(vocab.mask_st).take(masked_len));
            let mut no_st = ArDecoder::new(store, nets, inst_tokens, PrefixKind::Conditional)?;
            no_st.append_ids(&replay)?;
            let mut no_both = ArDecoder::new(store, nets, inst_tokens, PrefixKind::TextMasked)?;
            no_both.append_ids(&replay)?;
            variants.no_st = Some(no_st);
            variants.no_both = Some(no_both);
        }
    }

    // Speech-prompt coarse ids enter as forced context.
    for &value in coarse_prompt {
        variants.append_all(vocab.acoustic_to_unified(value))?;
    }

    // Coarse acoustic tokens.
    let fast_at = gw.alpha == 1.0 && gw.beta == 1.0 && !policy.force_all_variants;
    let mut coarse: Vec<u32> = coarse_prompt.to_vec();
    let mut truncated_coarse = false;
    loop {
        if coarse.len() >= policy.max_frames {
            truncated_coarse = true;
            break;
        }
        let logits = if fast_at {
            variants.full.next_logits()
        } else if let (Some(no_st), Some(no_both)) = (&variants.no_st, &variants.no_both) {
            let full = variants.full.next_logits();
            let no_text =
                variants.no_text.as_ref().map(|v| v.next_logits()).unwrap_or_else(|| full.clone());
            cfg_acoustic(
                &full,
                &no_text,
                &no_st.next_logits(),
                &no_both.next_logits(),
                gw.alpha,
                gw.beta,
            )?
        } else {
            // β = 1 (or no semantic stage): only text guidance applies.
            let full = variants.full.next_logits();
            match &variants.no_text {
                Some(unc) => cfg_semantic(&full, &unc.next_logits(), gw.alpha)?,
                None => full,
            }
        };
        let (id, _) =
            sample_from_logits(&logits, &coarse_mask, policy.temperature, policy.top_k, &mut rng);
        if id == vocab.a_eos {
            break;
        }
        coarse.push(vocab.unified_to_acoustic(id).expect("legality mask admits acoustics"));
        variants.append_all(id)?;
    }

    let log = ArLog {
        semantic_len: semantic_ids.len(),
        coarse_len: coarse.len(),
        truncated_semantic,
        truncated_coarse,
    };
    Ok(ArGeneration {
        language,
        semantic: SemanticSequence {
            language: label,
            ids: semantic_ids,
            terminated: !truncated_semantic,
        },
        coarse,
        log,
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NarLog {
    /// Cumulative kept counts per iteration, one vector per residual layer.
    pub kept_per_iteration: Vec<Vec<usize>>,
}

/// Fills residual layers 2..n by iterative parallel decoding: start fully
/// masked beyond the prompt, sample every masked position, keep the most
/// confident predictions per the cosine schedule, repeat. Prompt frames pass
/// through untouched.
#[allow(clippy::too_many_arguments)]
pub fn nar_generate(
    store: &ParamStore<f32>,
    nets: &Networks,
    inst_tokens: &[u32],
    language_label: u32,
    semantic_ids: &[u32],
    coarse: &[u32],
    prompt: Option<&AcousticGrid>,
    policy: &DecodePolicy,
) -> Result<(AcousticGrid, NarLog)> {
    policy.validate()?;
    let frames = coarse.len();
    if frames == 0 {
        return Err(Error::EmptyGrid);
    }
    let layers = GRID_LAYERS;
    let prompt_len = prompt.map_or(0, AcousticGrid::frames);
    if let Some(p) = prompt {
        if p.layers() != layers {
            return Err(Error::PromptLayers { prompt: p.layers(), expected: layers });
        }
        if prompt_len > frames {
            return Err(Error::PromptTooLong { prompt: prompt_len, limit: frames });
        }
        for t in 0..prompt_len {
            if p.get(t, 0) != coarse[t] {
                return Err(Error::InvalidConfig("coarse column does not extend the prompt".into()));
            }
        }
    }

    let mut columns: Vec<Vec<u32>> = vec![vec![0; frames]; layers];
    columns[0].copy_from_slice(coarse);
    if let Some(p) = prompt {
        for (layer, column) in columns.iter_mut().enumerate().skip(1) {
            for (t, slot) in column.iter_mut().take(prompt_len).enumerate() {
                *slot = p.get(t, layer);
            }
        }
    }

    let all_legal = vec![true; nets.vocab.acoustic_ids as usize];
    let suffix = frames - prompt_len;
    let mut log = NarLog::default();

    for target in 2..=layers {
        let mut kept_counts = Vec::with_capacity(policy.nar_iterations);
        if suffix == 0 {
            log.kept_per_iteration.push(kept_counts);
            continue;
        }
        let schedule = kept_schedule(suffix, policy.nar_iterations);
        let mut kept = vec![false; frames];
        let mut kept_count = 0usize;
        for (iter_idx, &target_kept) in schedule.iter().enumerate() {
            let iteration = iter_idx + 1;
            if kept_count >= suffix {
                kept_counts.push(kept_count);
                continue;
            }
            let state = NarFrameState {
                layers: columns.clone(),
                masked: (0..frames).map(|t| t >= prompt_len && !kept[t]).collect(),
                prompt_len,
                target_layer: target,
            };
            let logits = crate::models::nar_logits(
                store,
                nets,
                inst_tokens,
                language_label,
                semantic_ids,
                &state,
            )?;
            let mut rng = nar_iteration_rng(policy.seed, target, iteration);
            let mut candidates: Vec<(usize, u32, f64)> = Vec::with_capacity(suffix - kept_count);
            for t in prompt_len..frames {
                if kept[t] {
                    continue;
                }
                let (id, prob) = sample_from_logits(
                    logits.row(t),
                    &all_legal,
                    policy.temperature,
                    policy.top_k,
                    &mut rng,
                );
                let confidence = match policy.confidence {
                    ConfidenceRule::Prob => prob,
                    ConfidenceRule::ProbGumbel => {
                        let u: f64 = 1.0 - rng.gen::<f64>();
                        prob.max(1e-300).ln() - (-u.ln()).ln()
                    }
                };
                candidates.push((t, id, confidence));
            }
            candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
            let promote = target_kept.saturating_sub(kept_count).min(candidates.len());
            for &(t, id, _) in candidates.iter().take(promote) {
                columns[target - 1][t] = id;
                kept[t] = true;
            }
            kept_count += promote;
            kept_counts.push(kept_count);
        }
        log.kept_per_iteration.push(kept_counts);
    }

    let mut values = Vec::with_capacity(frames * layers);
    for t in 0..frames {
        for column in columns.iter() {
            values.push(column[t]);
        }
    }
    Ok((AcousticGrid::new(frames, layers, values)?, log))
}

/// One full generation run and its report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationReport {
    pub seed: u64,
    pub guidance: GuidanceWeights,
    pub language: Language,
    pub prompt_len: usize,
    pub semantic_len: usize,
    /// The generated (deduplicated) semantic sequence.
    pub semantic_ids: Vec<u32>,
    pub frames: usize,
    pub truncated_semantic: bool,
    pub truncated_coarse: bool,
    pub nar: NarLog,
}

/// Instruction (plus optional speech prompt) to acoustic grid: the causal
/// stage produces `⟨l, S, A1⟩` with the prompt's coarse ids prepended, then
/// iterative decoding fills the residual layers with the prompt grid as an
/// untouched prefix.
pub fn synthesize(
    store: &ParamStore<f32>,
    nets: &Networks,
    inst_tokens: &[u32],
    gw: &GuidanceWeights,
    policy: &DecodePolicy,
    prompt: Option<&AcousticGrid>,
    forced_language: Option<Language>,
) -> Result<(AcousticGrid, GenerationReport)> {
    policy.validate()?;
    if let Some(p) = prompt {
        if p.layers() != GRID_LAYERS {
            return Err(Error::PromptLayers { prompt: p.layers(), expected: GRID_LAYERS });
        }
        if p.frames() >= policy.max_frames {
            return Err(Error::PromptTooLong { prompt: p.frames(), limit: policy.max_frames });
        }
    }
    let coarse_prompt: Vec<u32> = prompt.map_or_else(Vec::new, AcousticGrid::coarse);
    let ar = ar_generate(store, nets, inst_tokens, gw, policy, forced_language, &coarse_prompt)?;

    let (grid, nar_log) = if ar.coarse.is_empty() {
        (AcousticGrid::empty(GRID_LAYERS), NarLog::default())
    } else {
        nar_generate(
            store,
            nets,
            inst_tokens,
            ar.semantic.language,
            &ar.semantic.ids,
            &ar.coarse,
            prompt,
            policy,
        )?
    };

    let report = GenerationReport {
        seed: policy.seed,
        guidance: *gw,
        language: ar.language,
        prompt_len: prompt.map_or(0, AcousticGrid::frames),
        semantic_len: ar.log.semantic_len,
        semantic_ids: ar.semantic.ids,
        frames: grid.frames(),
        truncated_semantic: ar.log.truncated_semantic,
        truncated_coarse: ar.log.truncated_coarse,
        nar: nar_log,
    };
    Ok((grid, report))
}

#[cfg(test)]
mod tests;
