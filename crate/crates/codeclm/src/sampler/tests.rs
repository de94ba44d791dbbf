use super::*;
use crate::models::{nar_logits, ModelBundle, ModelConfig, NarFrameState};
use crate::seqlayout::VocabMap;
use crate::toyworld::{oracle_acoustic, sample_instruction, sample_instruction_for_phase, Phase};

fn tiny_bundle(seed: u64) -> ModelBundle<f32> {
    ModelBundle::new(seed, &ModelConfig::tiny()).unwrap()
}

#[test]
fn cfg_semantic_identity_and_zero() {
    let cond = vec![0.3f32, -1.5, 2.0];
    let uncond = vec![0.1f32, 0.2, -0.7];
    assert_eq!(cfg_semantic(&cond, &uncond, 1.0).unwrap(), cond);
    assert_eq!(cfg_semantic(&cond, &uncond, 0.0).unwrap(), uncond);
}

#[test]
fn cfg_semantic_worked_example() {
    let out = cfg_semantic(&[1.0, 0.0], &[0.0, 0.0], 2.0).unwrap();
    assert_eq!(out, vec![2.0, 0.0]);
}

#[test]
fn cfg_semantic_shape_mismatch() {
    assert!(cfg_semantic(&[1.0], &[1.0, 2.0], 2.0).is_err());
}

#[test]
fn cfg_acoustic_identity_collapses() {
    let full = vec![0.5f32, -0.25, 3.0];
    let no_text = vec![1.0f32, 0.0, 0.0];
    let no_st = vec![0.0f32, 1.0, 0.0];
    let no_both = vec![0.0f32, 0.0, 1.0];
    assert_eq!(cfg_acoustic(&full, &no_text, &no_st, &no_both, 1.0, 1.0).unwrap(), full);
    // Beta = 1 collapses to the alpha-guided branch, ignoring the last two.
    let expect: Vec<f32> =
        full.iter().zip(&no_text).map(|(&f, &nt)| nt + 2.0 * (f - nt)).collect();
    let got = cfg_acoustic(&full, &no_text, &[9.0, 9.0, 9.0], &[7.0, 7.0, 7.0], 2.0, 1.0).unwrap();
    assert_eq!(got, expect);
}

#[test]
fn cfg_acoustic_worked_example() {
    let out =
        cfg_acoustic(&[1.0, 1.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 0.0], 2.0, 2.0).unwrap();
    assert_eq!(out, vec![2.0, 2.0]);
}

#[test]
fn cfg_monotone_sharpening() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let n = 8;
        let cond: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() * 4.0 - 2.0).collect();
        let uncond: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() * 4.0 - 2.0).collect();
        let g1 = 1.0 + rng.gen::<f64>() * 2.0;
        let g2 = g1 + 0.5 + rng.gen::<f64>();
        let o1 = cfg_semantic(&cond, &uncond, g1).unwrap();
        let o2 = cfg_semantic(&cond, &uncond, g2).unwrap();
        for j in 0..n {
            if cond[j] - uncond[j] > 1e-3 {
                assert!(o2[j] > o1[j], "not increasing in gamma at {j}");
            }
        }
    }
}

#[test]
fn cfg_argmax_shift_invariance() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let argmax = |v: &[f32]| {
        v.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
    };
    for _ in 0..200 {
        let n = 6;
        let cond: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() * 4.0 - 2.0).collect();
        let uncond: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() * 4.0 - 2.0).collect();
        let shift = rng.gen::<f32>() * 10.0 - 5.0;
        let base = cfg_semantic(&cond, &uncond, 1.7).unwrap();
        let shifted = cfg_semantic(
            &cond.iter().map(|&c| c + shift).collect::<Vec<_>>(),
            &uncond.iter().map(|&u| u + shift).collect::<Vec<_>>(),
            1.7,
        )
        .unwrap();
        assert_eq!(argmax(&base), argmax(&shifted));
    }
}

#[test]
fn kept_schedule_matches_arithmetic_oracle() {
    assert_eq!(kept_schedule(10, 4), vec![1, 3, 7, 10]);
    assert_eq!(kept_schedule(7, 3), vec![1, 4, 7]);
    assert_eq!(kept_schedule(1, 1), vec![1]);
    for (suffix, k) in [(5usize, 2usize), (96, 4), (17, 7)] {
        let s = kept_schedule(suffix, k);
        assert!(s.windows(2).all(|w| w[0] <= w[1]), "schedule not monotone: {s:?}");
        assert_eq!(*s.last().unwrap(), suffix);
    }
}

#[test]
fn sampling_respects_legality_and_top_one_is_argmax() {
    let logits: Vec<f32> = vec![0.1, 5.0, -2.0, 3.0, 4.9];
    let legal = vec![true, false, true, true, true];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..500 {
        let (id, conf) = sample_from_logits(&logits, &legal, 1.0, 16, &mut rng);
        assert!(legal[id as usize], "sampled an illegal id");
        assert!(conf > 0.0 && conf <= 1.0);
    }
    let (greedy, _) = sample_from_logits(&logits, &legal, 1.0, 1, &mut rng);
    assert_eq!(greedy, 4); // highest legal logit
}

#[test]
fn ar_generation_is_deterministic_and_legal() {
    let bundle = tiny_bundle(0);
    let inst = sample_instruction(3, Language::L0);
    let gw = GuidanceWeights::default();
    let policy = DecodePolicy { max_frames: 24, ..DecodePolicy::default() };
    let run = || {
        ar_generate(&bundle.store, &bundle.nets, &inst.tokens, &gw, &policy, None, &[]).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.semantic.ids, b.semantic.ids);
    assert_eq!(a.coarse, b.coarse);
    let vocab = VocabMap::new();
    assert!(a.semantic.ids.iter().all(|&id| vocab.is_semantic(id)));
    assert!(a.coarse.iter().all(|&v| v < vocab.acoustic_ids));

    let other_policy = DecodePolicy { seed: 99, max_frames: 24, ..DecodePolicy::default() };
    let c = ar_generate(&bundle.store, &bundle.nets, &inst.tokens, &gw, &other_policy, None, &[])
        .unwrap();
    assert!(c.semantic.ids != a.semantic.ids || c.coarse != a.coarse);
}

#[test]
fn disabled_guidance_fast_path_equals_forced_variants() {
    let bundle = tiny_bundle(1);
    let inst = sample_instruction(5, Language::L1);
    let gw = GuidanceWeights::disabled();
    let fast = DecodePolicy { max_frames: 24, ..DecodePolicy::default() };
    let slow = DecodePolicy { max_frames: 24, force_all_variants: true, ..DecodePolicy::default() };
    let a = ar_generate(&bundle.store, &bundle.nets, &inst.tokens, &gw, &fast, None, &[]).unwrap();
    let b = ar_generate(&bundle.store, &bundle.nets, &inst.tokens, &gw, &slow, None, &[]).unwrap();
    assert_eq!(a.semantic.ids, b.semantic.ids);
    assert_eq!(a.coarse, b.coarse);
    assert_eq!(a.language, b.language);
}

#[test]
fn forced_language_is_respected() {
    let bundle = tiny_bundle(2);
    let inst = sample_instruction(7, Language::L1);
    let policy = DecodePolicy { max_frames: 12, ..DecodePolicy::default() };
    for language in [Language::L0, Language::L1] {
        let out = ar_generate(
            &bundle.store,
            &bundle.nets,
            &inst.tokens,
            &GuidanceWeights::disabled(),
            &policy,
            Some(language),
            &[],
        )
        .unwrap();
        assert_eq!(out.language, language);
    }
}

#[test]
fn nar_one_iteration_equals_one_shot_sampling() {
    let bundle = tiny_bundle(3);
    let inst = sample_instruction(9, Language::L0);
    let vocab = VocabMap::new();
    let label = vocab.lang_label(Language::L0);
    let sem: Vec<u32> = inst.content.clone();
    let coarse: Vec<u32> = (0..9u32).map(|t| (t * 7) % 96).collect();
    let policy = DecodePolicy { nar_iterations: 1, ..DecodePolicy::default() };
    let (grid, log) = nar_generate(
        &bundle.store,
        &bundle.nets,
        &inst.tokens,
        label,
        &sem,
        &coarse,
        None,
        &policy,
    )
    .unwrap();
    assert_eq!(log.kept_per_iteration, vec![vec![9]; 3]);

    // Reference: a single parallel sampling pass per layer.
    let frames = coarse.len();
    let mut columns: Vec<Vec<u32>> = vec![vec![0; frames]; GRID_LAYERS];
    columns[0].copy_from_slice(&coarse);
    let all_legal = vec![true; 96];
    for target in 2..=GRID_LAYERS {
        let state = NarFrameState {
            layers: columns.clone(),
            masked: vec![true; frames],
            prompt_len: 0,
            target_layer: target,
        };
        let logits =
            nar_logits(&bundle.store, &bundle.nets, &inst.tokens, label, &sem, &state).unwrap();
        let mut rng = nar_iteration_rng(policy.seed, target, 1);
        for t in 0..frames {
            let (id, _) =
                sample_from_logits(logits.row(t), &all_legal, policy.temperature, policy.top_k, &mut rng);
            columns[target - 1][t] = id;
        }
    }
    for t in 0..frames {
        for (layer, column) in columns.iter().enumerate() {
            assert_eq!(grid.get(t, layer), column[t], "frame {t} layer {layer}");
        }
    }
}

#[test]
fn nar_prompt_frames_pass_through_bit_exactly() {
    let bundle = tiny_bundle(4);
    let inst = sample_instruction(11, Language::L0);
    let vocab = VocabMap::new();
    let label = vocab.lang_label(Language::L0);
    let full = oracle_acoustic(&inst);
    let prompt = full.prefix(full.frames() / 2);
    let mut coarse = prompt.coarse();
    coarse.extend((0..6u32).map(|t| (t * 5) % 96));
    let (grid, _) = nar_generate(
        &bundle.store,
        &bundle.nets,
        &inst.tokens,
        label,
        &inst.content,
        &coarse,
        Some(&prompt),
        &DecodePolicy::default(),
    )
    .unwrap();
    for t in 0..prompt.frames() {
        for layer in 0..GRID_LAYERS {
            assert_eq!(grid.get(t, layer), prompt.get(t, layer));
        }
    }
}

#[test]
fn nar_rejects_wide_prompt_and_mismatched_coarse() {
    let bundle = tiny_bundle(5);
    let inst = sample_instruction(13, Language::L0);
    let vocab = VocabMap::new();
    let label = vocab.lang_label(Language::L0);
    let wide = crate::toyworld::AcousticGrid::new(2, 5, vec![0; 10]).unwrap();
    let err = nar_generate(
        &bundle.store,
        &bundle.nets,
        &inst.tokens,
        label,
        &inst.content,
        &[1, 2, 3],
        Some(&wide),
        &DecodePolicy::default(),
    );
    assert!(matches!(err, Err(crate::Error::PromptLayers { prompt: 5, expected: 4 })));

    let prompt = oracle_acoustic(&inst).prefix(2);
    let mut coarse = prompt.coarse();
    coarse[0] = (coarse[0] + 1) % 96;
    coarse.push(5);
    let err = nar_generate(
        &bundle.store,
        &bundle.nets,
        &inst.tokens,
        label,
        &inst.content,
        &coarse,
        Some(&prompt),
        &DecodePolicy::default(),
    );
    assert!(err.is_err());
}

#[test]
fn synthesize_reports_prompt_and_lengths() {
    let bundle = tiny_bundle(6);
    let inst = sample_instruction_for_phase(15, Language::L0, Phase::Pretrain);
    let policy = DecodePolicy { max_frames: 20, max_semantic: 8, ..DecodePolicy::default() };
    let (grid, report) = synthesize(
        &bundle.store,
        &bundle.nets,
        &inst.tokens,
        &GuidanceWeights::disabled(),
        &policy,
        None,
        Some(Language::L0),
    )
    .unwrap();
    assert_eq!(report.prompt_len, 0);
    assert_eq!(report.frames, grid.frames());
    if grid.frames() > 0 {
        assert_eq!(report.nar.kept_per_iteration.len(), GRID_LAYERS - 1);
    }

    let donor = oracle_acoustic(&sample_instruction(16, Language::L0));
    let prompt = donor.prefix(4);
    let (grid2, report2) = synthesize(
        &bundle.store,
        &bundle.nets,
        &inst.tokens,
        &GuidanceWeights::default(),
        &policy,
        Some(&prompt),
        Some(Language::L0),
    )
    .unwrap();
    assert_eq!(report2.prompt_len, prompt.frames());
    for t in 0..prompt.frames() {
        for layer in 0..GRID_LAYERS {
            assert_eq!(grid2.get(t, layer), prompt.get(t, layer));
        }
    }
}

#[test]
fn synthesize_same_instruction_different_seeds_diverge() {
    let bundle = tiny_bundle(7);
    let inst = sample_instruction(17, Language::L1);
    let base = DecodePolicy { max_frames: 20, ..DecodePolicy::default() };
    let p1 = DecodePolicy { seed: 1, ..base.clone() };
    let p2 = DecodePolicy { seed: 2, ..base };
    let g1 = synthesize(
        &bundle.store,
        &bundle.nets,
        &inst.tokens,
        &GuidanceWeights::default(),
        &p1,
        None,
        None,
    )
    .unwrap()
    .0;
    let g2 = synthesize(
        &bundle.store,
        &bundle.nets,
        &inst.tokens,
        &GuidanceWeights::default(),
        &p2,
        None,
        None,
    )
    .unwrap()
    .0;
    assert!(g1.values() != g2.values() || g1.frames() != g2.frames());
}
