use std::collections::HashSet;

use super::*;

/// Independent re-statement of the duplication hash so the oracle law is
/// pinned by something other than the implementation it checks.
fn reference_duplication(symbol: u32, speaker: u64) -> usize {
    fn sm64(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        z
    }
    1 + (sm64(sm64(symbol as u64) ^ speaker) % 3) as usize
}

fn fixed_instruction() -> Instruction {
    Instruction {
        tokens: vec![
            instoken::PITCH_BASE + 2,
            instoken::OPEN_QUOTE,
            3,
            7,
            1,
            instoken::CLOSE_QUOTE,
            instoken::SPEED_BASE,
            instoken::ENERGY_BASE + 1,
            instoken::EMOTION_BASE + 3,
        ],
        attributes: AttributeSet {
            pitch: Pitch::High,
            speed: Speed::Slow,
            energy: Energy::Mid,
            emotion: Emotion::Angry,
            stress_index: Some(1),
            language: Language::L0,
        },
        content: vec![3, 7, 1],
        speaker_seed: 42,
    }
}

#[test]
fn sample_is_deterministic() {
    let a = sample_instruction(0, Language::L0);
    let b = sample_instruction(0, Language::L0);
    assert_eq!(a, b);
}

#[test]
fn samples_are_distinct_across_seeds() {
    let mut seen = HashSet::new();
    for seed in 0..100u64 {
        seen.insert(sample_instruction(seed, Language::L0).tokens);
    }
    assert!(seen.len() >= 95, "only {} distinct token sequences", seen.len());
}

#[test]
fn sampled_instructions_are_valid() {
    for seed in 0..500u64 {
        for language in [Language::L0, Language::L1] {
            for phase in [Phase::Pretrain, Phase::Instruct, Phase::Stress] {
                let inst = sample_instruction_for_phase(seed, language, phase);
                inst.validate().unwrap();
                if phase == Phase::Pretrain {
                    assert_eq!(inst.tokens.len(), inst.content.len() + 2);
                }
                if phase != Phase::Stress {
                    assert_eq!(inst.attributes.stress_index, None);
                    assert!(!inst.tokens.iter().any(|&t| instoken::is_stress(t)));
                }
            }
        }
    }
}

#[test]
fn pitch_classes_are_roughly_uniform() {
    let mut counts = [0usize; 3];
    const N: usize = 10_000;
    for seed in 0..N as u64 {
        counts[sample_instruction(seed, Language::L0).attributes.pitch.index() as usize] += 1;
    }
    for c in counts {
        let frac = c as f64 / N as f64;
        assert!((0.30..=0.37).contains(&frac), "pitch frequency {frac}");
    }
}

#[test]
fn stress_frequency_matches_probability() {
    const N: usize = 10_000;
    let stressed = (0..N as u64)
        .filter(|&s| sample_instruction(s, Language::L1).attributes.stress_index.is_some())
        .count();
    let frac = stressed as f64 / N as f64;
    assert!((0.22..=0.28).contains(&frac), "stress frequency {frac}");
}

#[test]
fn raw_semantic_follows_duplication_hash() {
    let mut inst = fixed_instruction();
    inst.content = vec![3];
    let r = reference_duplication(3, inst.speaker_seed);
    assert_eq!(oracle_semantic_raw(&inst), vec![3; r]);

    let inst = fixed_instruction();
    let expected: Vec<u32> = inst
        .content
        .iter()
        .flat_map(|&c| std::iter::repeat(c).take(reference_duplication(c, inst.speaker_seed)))
        .collect();
    assert_eq!(oracle_semantic_raw(&inst), expected);
}

#[test]
fn dedup_of_raw_semantic_has_content_length() {
    for seed in 0..200u64 {
        let inst = sample_instruction(seed, Language::L0);
        let raw = oracle_semantic_raw(&inst);
        let deduped = crate::seqlayout::dedup(&raw);
        assert_eq!(deduped.len(), inst.content.len());
        assert_eq!(deduped, inst.content);
    }
}

#[test]
fn raw_semantic_ignores_prosody() {
    let mut a = fixed_instruction();
    let mut b = fixed_instruction();
    a.attributes.speed = Speed::Slow;
    b.attributes.speed = Speed::Fast;
    b.attributes.pitch = Pitch::Low;
    b.attributes.energy = Energy::High;
    b.attributes.emotion = Emotion::Happy;
    b.attributes.stress_index = None;
    assert_eq!(oracle_semantic_raw(&a), oracle_semantic_raw(&b));
}

#[test]
fn grid_duration_law() {
    let mut inst = fixed_instruction();
    inst.attributes.speed = Speed::Fast;
    assert_eq!(oracle_acoustic(&inst).frames(), 3 * 2);
    inst.attributes.speed = Speed::Slow;
    assert_eq!(oracle_acoustic(&inst).frames(), 3 * 6);
    for seed in 0..100u64 {
        let inst = sample_instruction(seed, Language::L1);
        let expect = inst.content.len() * inst.attributes.speed.frames_per_symbol();
        assert_eq!(oracle_acoustic(&inst).frames(), expect);
    }
}

#[test]
fn pitch_shifts_coarse_column_by_two() {
    let mut low = fixed_instruction();
    low.attributes.pitch = Pitch::Low;
    let mut high = fixed_instruction();
    high.attributes.pitch = Pitch::High;
    let (gl, gh) = (oracle_acoustic(&low), oracle_acoustic(&high));
    assert_eq!(gl.frames(), gh.frames());
    for t in 0..gl.frames() {
        assert_eq!(gh.get(t, 0), gl.get(t, 0) + 2);
    }
}

#[test]
fn content_round_trip() {
    for seed in 0..1000u64 {
        let language = if seed % 2 == 0 { Language::L0 } else { Language::L1 };
        let inst = sample_instruction(seed, language);
        let grid = oracle_acoustic(&inst);
        assert_eq!(oracle_decode_content(&grid), inst.content, "seed {seed}");
    }
}

#[test]
fn decode_handles_tiny_grids() {
    assert_eq!(oracle_decode_content(&AcousticGrid::empty(GRID_LAYERS)), Vec::<u32>::new());
    let single = AcousticGrid::new(1, GRID_LAYERS, vec![10, 0, 0, 0]).unwrap();
    assert_eq!(oracle_decode_content(&single), vec![3]);
}

#[test]
fn corrupted_frame_costs_at_most_two_edits() {
    let inst = fixed_instruction();
    let mut grid = oracle_acoustic(&inst);
    // Corrupt one frame in the middle of the second group.
    let t = inst.attributes.speed.frames_per_symbol() + 2;
    grid.set(t, 0, grid.get(t, 0) + 1);
    let decoded = oracle_decode_content(&grid);
    let wer = crate::evalkit::toy_wer(&inst.content, &decoded).unwrap();
    assert!(wer <= 2.0 / inst.content.len() as f64, "wer {wer}");
}

#[test]
fn attribute_round_trip() {
    for seed in 0..1000u64 {
        let language = if seed % 3 == 0 { Language::L1 } else { Language::L0 };
        let inst = sample_instruction(seed, language);
        let got = oracle_classify(&oracle_acoustic(&inst)).unwrap();
        let want = inst.attributes;
        assert_eq!(got.pitch, want.pitch, "seed {seed}");
        assert_eq!(got.speed, want.speed, "seed {seed}");
        assert_eq!(got.energy, want.energy, "seed {seed}");
        assert_eq!(got.emotion, want.emotion, "seed {seed}");
        assert_eq!(got.stress_index, want.stress_index, "seed {seed}");
    }
}

#[test]
fn classify_zero_grid_gives_lowest_classes() {
    let grid = AcousticGrid::new(4, GRID_LAYERS, vec![0; 4 * GRID_LAYERS]).unwrap();
    let got = oracle_classify(&grid).unwrap();
    assert_eq!(got.pitch, Pitch::Low);
    assert_eq!(got.energy, Energy::Low);
    assert_eq!(got.emotion, Emotion::Neutral);
    assert_eq!(got.stress_index, None);
}

#[test]
fn classify_speed_uses_nearest_duration() {
    // Nine groups of lengths summing to 46 frames: mean 5.11 -> slow.
    let mut values = Vec::new();
    let lengths = [6, 5, 5, 5, 5, 5, 5, 5, 5];
    for (i, &len) in lengths.iter().enumerate() {
        for _ in 0..len {
            values.extend_from_slice(&[(i as u32) * 3, 0, 0, 0]);
        }
    }
    let grid = AcousticGrid::new(values.len() / 4, GRID_LAYERS, values).unwrap();
    assert_eq!(oracle_classify(&grid).unwrap().speed, Speed::Slow);
}

#[test]
fn classify_empty_grid_errors() {
    assert!(matches!(
        oracle_classify(&AcousticGrid::empty(GRID_LAYERS)),
        Err(crate::Error::EmptyGrid)
    ));
}

#[test]
fn speaker_embedding_same_speaker_high_cosine() {
    let mut same = Vec::new();
    for pair in 0..100u64 {
        let mut a = sample_instruction(pair * 2, Language::L0);
        let mut b = sample_instruction(pair * 2 + 1, Language::L0);
        b.speaker_seed = a.speaker_seed;
        a.attributes.stress_index = None;
        b.attributes.stress_index = None;
        let ea = oracle_speaker_embed(&oracle_acoustic(&a)).unwrap();
        let eb = oracle_speaker_embed(&oracle_acoustic(&b)).unwrap();
        same.push(ea.cosine(&eb));
    }
    let mean_same = same.iter().sum::<f64>() / same.len() as f64;
    assert!(mean_same >= 0.9, "same-speaker mean cosine {mean_same}");

    let embeddings: Vec<_> = (0..100u64)
        .map(|s| oracle_speaker_embed(&oracle_acoustic(&sample_instruction(s, Language::L0))).unwrap())
        .collect();
    let mut cross = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            cross.push(embeddings[i].cosine(&embeddings[j]));
        }
    }
    let mean_cross = cross.iter().sum::<f64>() / cross.len() as f64;
    assert!(mean_cross < mean_same, "cross {mean_cross} vs same {mean_same}");
}

#[test]
fn speaker_embedding_identity_and_errors() {
    let grid = oracle_acoustic(&fixed_instruction());
    let e = oracle_speaker_embed(&grid).unwrap();
    assert!((e.cosine(&e) - 1.0).abs() < 1e-12);
    let sum: f64 = e.values.iter().sum();
    assert!((sum - 1.0).abs() < 1e-9);
    assert!(e.values.iter().all(|&v| v >= 0.0));

    let two_layers = AcousticGrid::new(2, 2, vec![0, 1, 2, 3]).unwrap();
    assert!(matches!(
        oracle_speaker_embed(&two_layers),
        Err(crate::Error::NoResidualLayers { layers: 2 })
    ));
}

#[test]
fn record_round_trip() {
    let dir = std::env::temp_dir().join(format!("codeclm-ds-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("sample.jsonl");
    let records: Vec<Record> = (0..20u64)
        .map(|s| Record::from_instruction(s, &sample_instruction(s, Language::L0)))
        .collect();
    write_records(&path, &records).unwrap();
    let back = read_records(&path).unwrap();
    assert_eq!(back, records);
    let example = back[3].example().unwrap();
    assert_eq!(example.instruction, sample_instruction(3, Language::L0));
    assert_eq!(example.grid, oracle_acoustic(&example.instruction));
    std::fs::remove_dir_all(&dir).ok();
}
