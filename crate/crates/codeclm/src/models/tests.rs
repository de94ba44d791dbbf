use super::*;
use crate::neuralcore::{grad_check, GRAD_CHECK_MAX_COORDS, GRAD_CHECK_STEP};
use crate::seqlayout::{
    build_ar_example, build_nar_example, ArTrainingExample, NarTrainingExample, SemanticSequence,
};
use crate::toyworld::{
    instoken, oracle_acoustic, oracle_semantic_raw, sample_instruction, Instruction, Language,
};

fn oracle_ar_example(seed: u64, drop_text: bool, drop_st: bool) -> ArTrainingExample {
    let vocab = crate::seqlayout::VocabMap::new();
    let inst = sample_instruction(seed, Language::L0);
    let sem = SemanticSequence::from_raw(&vocab, Language::L0, &oracle_semantic_raw(&inst));
    let coarse = oracle_acoustic(&inst).coarse();
    build_ar_example(&vocab, &inst, &sem, &coarse, drop_text, drop_st).unwrap()
}

fn oracle_nar_example(seed: u64, rng_seed: u64) -> NarTrainingExample {
    let vocab = crate::seqlayout::VocabMap::new();
    let inst = sample_instruction(seed, Language::L0);
    let sem = SemanticSequence::from_raw(&vocab, Language::L0, &oracle_semantic_raw(&inst));
    let grid = oracle_acoustic(&inst);
    build_nar_example(&vocab, &inst, &sem, &grid, rng_seed).unwrap()
}

#[test]
fn encoder_output_has_one_row_per_token() {
    let bundle = ModelBundle::<f32>::new(0, &ModelConfig::tiny()).unwrap();
    for seed in 0..100u64 {
        let inst = sample_instruction(seed, Language::L1);
        let enc = encode_instruction(
            &bundle.store,
            &bundle.nets.ar.encoder,
            &bundle.nets.vocab,
            &inst.tokens,
        )
        .unwrap();
        assert_eq!(enc.shape(), &[inst.tokens.len(), 16]);
        assert!(enc.all_finite());
    }
}

#[test]
fn encoder_is_position_sensitive() {
    let bundle = ModelBundle::<f32>::new(1, &ModelConfig::tiny()).unwrap();
    // Two attribute tokens up front; swapping them must change the encoding.
    let tokens = vec![
        instoken::PITCH_BASE,
        instoken::SPEED_BASE + 2,
        instoken::OPEN_QUOTE,
        4,
        instoken::CLOSE_QUOTE,
    ];
    let mut swapped = tokens.clone();
    swapped.swap(0, 1);
    let nets = &bundle.nets;
    let a = encode_instruction(&bundle.store, &nets.ar.encoder, &nets.vocab, &tokens).unwrap();
    let b = encode_instruction(&bundle.store, &nets.ar.encoder, &nets.vocab, &swapped).unwrap();
    assert_ne!(a.data(), b.data());
}

#[test]
fn encoder_lora_starts_as_identity() {
    let bundle = ModelBundle::<f64>::new(2, &ModelConfig::tiny()).unwrap();
    let tokens = sample_instruction(5, Language::L0).tokens;
    let nets = &bundle.nets;
    let before =
        encode_instruction(&bundle.store, &nets.ar.encoder, &nets.vocab, &tokens).unwrap();
    // Scrambling every adapter A matrix must not change anything while B = 0.
    let mut scrambled = bundle.clone();
    for layer in &nets.ar.encoder.stack.layers {
        for lora in [layer.lora_q.as_ref().unwrap(), layer.lora_v.as_ref().unwrap()] {
            for v in scrambled.store.get_mut(lora.a).data_mut() {
                *v += 7.5;
            }
        }
    }
    let after =
        encode_instruction(&scrambled.store, &nets.ar.encoder, &nets.vocab, &tokens).unwrap();
    assert_eq!(before.data(), after.data());
}

#[test]
fn encoder_rejects_unknown_ids() {
    let bundle = ModelBundle::<f32>::new(3, &ModelConfig::tiny()).unwrap();
    let nets = &bundle.nets;
    let bad = vec![instoken::OPEN_QUOTE, 2, instoken::CLOSE_QUOTE, 999];
    assert!(matches!(
        encode_instruction(&bundle.store, &nets.ar.encoder, &nets.vocab, &bad),
        Err(crate::Error::VocabRange { .. })
    ));
}

#[test]
fn ar_logits_shape_and_loss_near_uniform() {
    let bundle = ModelBundle::<f32>::new(4, &ModelConfig::tiny()).unwrap();
    let ex = oracle_ar_example(0, false, false);
    let logits = ar_logits(&bundle.store, &bundle.nets, &ex).unwrap();
    assert_eq!(logits.shape(), &[ex.targets.len(), 132]);
    let loss = ar_loss(&bundle.store, &bundle.nets, &ex).unwrap() as f64;
    let uniform = (132f64).ln();
    assert!((loss - uniform).abs() / uniform < 0.05, "loss {loss} vs ln|V| {uniform}");
}

#[test]
fn ar_is_causal_in_the_target_stream() {
    let bundle = ModelBundle::<f32>::new(5, &ModelConfig::tiny()).unwrap();
    let ex = oracle_ar_example(1, false, false);
    let logits = ar_logits(&bundle.store, &bundle.nets, &ex).unwrap();
    // Perturb a late acoustic target (an input to later positions only).
    let vocab = &bundle.nets.vocab;
    let j0 = ex.targets.len() - 3;
    assert!(vocab.unified_to_acoustic(ex.targets[j0]).is_some());
    let mut perturbed = ex.clone();
    perturbed.targets[j0] =
        vocab.acoustic_to_unified((vocab.unified_to_acoustic(ex.targets[j0]).unwrap() + 1) % 96);
    let plogits = ar_logits(&bundle.store, &bundle.nets, &perturbed).unwrap();
    let v = 132;
    assert_eq!(&logits.data()[..(j0 + 1) * v], &plogits.data()[..(j0 + 1) * v]);
    assert_ne!(&logits.data()[(j0 + 1) * v..], &plogits.data()[(j0 + 1) * v..]);
}

#[test]
fn ar_rejects_malformed_segment_order() {
    let bundle = ModelBundle::<f32>::new(6, &ModelConfig::tiny()).unwrap();
    let mut ex = oracle_ar_example(2, false, false);
    ex.targets.swap(0, 1); // semantic id before the language label
    assert!(matches!(
        ar_logits(&bundle.store, &bundle.nets, &ex),
        Err(crate::Error::SegmentOrder { .. })
    ));
}

#[test]
fn ar_drop_st_loss_matches_hand_resummation() {
    let bundle = ModelBundle::<f64>::new(7, &ModelConfig::tiny()).unwrap();
    let ex = oracle_ar_example(3, false, true);
    let logits = ar_logits(&bundle.store, &bundle.nets, &ex).unwrap();
    let loss = ar_loss(&bundle.store, &bundle.nets, &ex).unwrap();
    let v = 132;
    let mut sum = 0.0;
    let mut count = 0;
    for (j, (&target, &keep)) in ex.targets.iter().zip(&ex.loss_mask).enumerate() {
        if !keep {
            continue;
        }
        let row = &logits.data()[j * v..(j + 1) * v];
        let lse = crate::neuralcore::kernels::logsumexp(row);
        sum += lse - row[target as usize];
        count += 1;
    }
    let expected = sum / count as f64;
    assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
    // The semantic targets really are excluded.
    assert_eq!(count, ex.targets.len() - ex.semantic_len() - 1);
}

#[test]
fn nar_logits_shape_and_loss_near_uniform() {
    let bundle = ModelBundle::<f32>::new(8, &ModelConfig::tiny()).unwrap();
    let ex = oracle_nar_example(4, 11);
    let state = NarFrameState::from_example(&ex);
    let logits = nar_logits(
        &bundle.store,
        &bundle.nets,
        &ex.instruction_tokens,
        ex.language_label,
        &ex.semantic_ids,
        &state,
    )
    .unwrap();
    assert_eq!(logits.shape(), &[ex.grid.frames(), 96]);
    if !ex.masked_positions.is_empty() {
        let loss = nar_loss(&bundle.store, &bundle.nets, &ex).unwrap() as f64;
        let uniform = (96f64).ln();
        assert!((loss - uniform).abs() / uniform < 0.05, "loss {loss} vs ln V_a {uniform}");
    }
}

#[test]
fn nar_attends_bidirectionally() {
    let bundle = ModelBundle::<f32>::new(9, &ModelConfig::tiny()).unwrap();
    let ex = oracle_nar_example(5, 3);
    let state = NarFrameState::from_example(&ex);
    let logits = |s: &NarFrameState| {
        nar_logits(
            &bundle.store,
            &bundle.nets,
            &ex.instruction_tokens,
            ex.language_label,
            &ex.semantic_ids,
            s,
        )
        .unwrap()
    };
    let base = logits(&state);
    let mut perturbed = state.clone();
    let last = perturbed.frames() - 1;
    perturbed.layers[0][last] = (perturbed.layers[0][last] + 1) % 96;
    let after = logits(&perturbed);
    // Logits at frame 0 must already feel a change at the last frame.
    assert_ne!(&base.data()[..96], &after.data()[..96]);
}

#[test]
fn nar_prompt_positions_carry_no_loss() {
    let bundle = ModelBundle::<f64>::new(10, &ModelConfig::tiny()).unwrap();
    // Find an example with both a prompt and masked positions.
    let ex = (0..100)
        .map(|s| oracle_nar_example(6, s))
        .find(|e| e.prompt_len > 0 && !e.masked_positions.is_empty())
        .unwrap();
    let state = NarFrameState::from_example(&ex);
    let logits = nar_logits(
        &bundle.store,
        &bundle.nets,
        &ex.instruction_tokens,
        ex.language_label,
        &ex.semantic_ids,
        &state,
    )
    .unwrap();
    let loss = nar_loss(&bundle.store, &bundle.nets, &ex).unwrap();
    let targets = &state.layers[ex.target_layer - 1];
    let mut sum = 0.0;
    for &p in &ex.masked_positions {
        assert!(p >= ex.prompt_len);
        let row = logits.row(p);
        sum += crate::neuralcore::kernels::logsumexp(row) - row[targets[p] as usize];
    }
    let expected = sum / ex.masked_positions.len() as f64;
    assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
}

#[test]
fn nar_single_masked_position_is_its_cross_entropy() {
    let bundle = ModelBundle::<f64>::new(11, &ModelConfig::tiny()).unwrap();
    let mut ex = oracle_nar_example(7, 1);
    let t = ex.grid.frames() - 1;
    ex.prompt_len = 0;
    ex.masked_positions = vec![t];
    let state = NarFrameState::from_example(&ex);
    let logits = nar_logits(
        &bundle.store,
        &bundle.nets,
        &ex.instruction_tokens,
        ex.language_label,
        &ex.semantic_ids,
        &state,
    )
    .unwrap();
    let loss = nar_loss(&bundle.store, &bundle.nets, &ex).unwrap();
    let row = logits.row(t);
    let want = crate::neuralcore::kernels::logsumexp(row)
        - row[state.layers[ex.target_layer - 1][t] as usize];
    assert!((loss - want).abs() < 1e-9);
}

#[test]
fn nar_empty_mask_is_zero_loss_without_gradient() {
    let bundle = ModelBundle::<f32>::new(12, &ModelConfig::tiny()).unwrap();
    let mut ex = oracle_nar_example(8, 2);
    ex.masked_positions.clear();
    let (loss, grads) = nar_loss_and_grad(&bundle.store, &bundle.nets, &ex).unwrap();
    assert_eq!(loss, 0.0);
    assert!(bundle.nets.nar_params().iter().all(|&p| grads.get(p).is_none()));
}

#[test]
fn nar_rejects_out_of_range_layer() {
    let bundle = ModelBundle::<f32>::new(13, &ModelConfig::tiny()).unwrap();
    let mut ex = oracle_nar_example(9, 4);
    ex.target_layer = 7;
    assert!(matches!(
        nar_loss(&bundle.store, &bundle.nets, &ex),
        Err(crate::Error::LayerRange { .. })
    ));
}

#[test]
fn ar_loss_grad_check_at_tiny_dims() {
    let mut bundle = ModelBundle::<f64>::new(14, &ModelConfig::tiny()).unwrap();
    let ex = oracle_ar_example(10, false, false);
    let nets = bundle.nets.clone();
    let params = nets.ar_params();
    let report = grad_check(
        &mut bundle.store,
        &params,
        |store| ar_loss_and_grad(store, &nets, &ex),
        GRAD_CHECK_STEP,
        GRAD_CHECK_MAX_COORDS,
        0,
    )
    .unwrap();
    assert_eq!(report.checked_coords, GRAD_CHECK_MAX_COORDS);
    assert!(report.max_rel_error <= 1e-4, "rel error {}", report.max_rel_error);
}

#[test]
fn nar_loss_grad_check_at_tiny_dims() {
    let mut bundle = ModelBundle::<f64>::new(15, &ModelConfig::tiny()).unwrap();
    let ex = (0..100)
        .map(|s| oracle_nar_example(11, s))
        .find(|e| !e.masked_positions.is_empty() && e.prompt_len > 0)
        .unwrap();
    let nets = bundle.nets.clone();
    let params = nets.nar_params();
    let report = grad_check(
        &mut bundle.store,
        &params,
        |store| nar_loss_and_grad(store, &nets, &ex),
        GRAD_CHECK_STEP,
        GRAD_CHECK_MAX_COORDS,
        1,
    )
    .unwrap();
    assert_eq!(report.checked_coords, GRAD_CHECK_MAX_COORDS);
    assert!(report.max_rel_error <= 1e-4, "rel error {}", report.max_rel_error);
}

#[test]
fn desk_bundle_parameter_budget() {
    let bundle = ModelBundle::<f32>::new(0, &ModelConfig::desk_default()).unwrap();
    let count = bundle.param_count();
    assert!(
        (500_000..=3_000_000).contains(&count),
        "desk bundle has {count} parameters, outside [0.5M, 3M]"
    );
}

#[test]
fn networks_share_no_parameters() {
    let bundle = ModelBundle::<f32>::new(16, &ModelConfig::tiny()).unwrap();
    let ar = bundle.nets.ar_params();
    let nar = bundle.nets.nar_params();
    assert!(ar.iter().all(|p| !nar.contains(p)));
    assert_eq!(ar.len() + nar.len(), bundle.store.len());
}

#[test]
fn cached_decoder_matches_graph_forward_bitwise() {
    let bundle = ModelBundle::<f32>::new(17, &ModelConfig::tiny()).unwrap();
    let ex = oracle_ar_example(12, false, false);
    let graph_logits = ar_logits(&bundle.store, &bundle.nets, &ex).unwrap();
    let v = 132;

    let mut dec = ArDecoder::new(
        &bundle.store,
        &bundle.nets,
        &ex.instruction_tokens,
        PrefixKind::Conditional,
    )
    .unwrap();
    let ids = ex.input_ids(&bundle.nets.vocab);
    // First prediction comes straight from the primed prefix.
    assert_eq!(dec.next_logits(), &graph_logits.data()[..v]);
    // Feed targets one at a time and compare every step.
    for (j, &id) in ids.iter().enumerate() {
        dec.append_ids(&[id]).unwrap();
        let want = &graph_logits.data()[(j + 1) * v..(j + 2) * v];
        assert_eq!(dec.next_logits(), want, "logits diverge at step {}", j + 1);
    }
}

#[test]
fn cached_decoder_bulk_append_matches_stepwise() {
    let bundle = ModelBundle::<f32>::new(18, &ModelConfig::tiny()).unwrap();
    let inst: Instruction = sample_instruction(13, Language::L0);
    let ids: Vec<u32> = vec![130, 3, 5, 32, 40, 41];
    let bulk = {
        let mut dec = ArDecoder::new(
            &bundle.store,
            &bundle.nets,
            &inst.tokens,
            PrefixKind::TextMasked,
        )
        .unwrap();
        dec.append_ids(&ids).unwrap();
        dec.next_logits()
    };
    let stepwise = {
        let mut dec = ArDecoder::new(
            &bundle.store,
            &bundle.nets,
            &inst.tokens,
            PrefixKind::TextMasked,
        )
        .unwrap();
        for &id in &ids {
            dec.append_ids(&[id]).unwrap();
        }
        dec.next_logits()
    };
    assert_eq!(bulk, stepwise);
}
