//! Rough training/inference timing and learnability probe used to size the
//! acceptance-run budgets. Run with `cargo run --example bench_steps`.

use std::time::Instant;

use codeclm::evalkit::run_eval;
use codeclm::models::{ar_logits, ModelBundle, ModelConfig};
use codeclm::sampler::{synthesize, DecodePolicy, GuidanceWeights};
use codeclm::seqlayout::{build_ar_example, SemanticSequence, VocabMap};
use codeclm::toyworld::{
    oracle_decode_content, sample_instruction_for_phase, Language, Phase, Record,
};
use codeclm::trainer::{train_phase, TrainConfig, TrainerState};

fn dataset(phase: Phase, count: u64, seed0: u64) -> Vec<codeclm::toyworld::DatasetExample> {
    (0..count)
        .map(|i| {
            let s = seed0 + i;
            let language = if s % 2 == 0 { Language::L0 } else { Language::L1 };
            Record::from_instruction(s, &sample_instruction_for_phase(s, language, phase))
                .example()
                .unwrap()
        })
        .collect()
}

fn main() {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let data = dataset(Phase::Instruct, 64, 0);
    let bundle = ModelBundle::<f32>::new(0, &ModelConfig::desk_default()).unwrap();
    println!("params: {}", bundle.param_count());
    let mut state = TrainerState::new(bundle);
    let mut cfg = TrainConfig::desk_default(Phase::Instruct);
    cfg.ar_steps = 3000;
    cfg.nar_steps = 1500;
    cfg.warmup = 100;
    cfg.peak_lr = 5e-4;
    cfg.seed = 0;

    let t0 = Instant::now();
    let report = pool.install(|| train_phase(&mut state, &data, &cfg).unwrap());
    println!(
        "train {} ar + {} nar steps: {:.1}s; ar loss {:.3}->{:.4}, nar loss {:.3}->{:.4}",
        cfg.ar_steps,
        cfg.nar_steps,
        t0.elapsed().as_secs_f64(),
        report.ar_losses[0],
        report.ar_losses.last().unwrap(),
        report.nar_losses[0],
        report.nar_losses.last().unwrap(),
    );

    // Teacher-forced next-token accuracy over the corpus.
    let vocab = VocabMap::new();
    let (mut hits, mut total) = (0usize, 0usize);
    for ex in &data {
        let sem = SemanticSequence::from_raw(
            &vocab,
            ex.instruction.attributes.language,
            &ex.semantic_raw,
        );
        let are =
            build_ar_example(&vocab, &ex.instruction, &sem, &ex.grid.coarse(), false, false)
                .unwrap();
        let logits = ar_logits(&state.bundle.store, &state.bundle.nets, &are).unwrap();
        for (j, &target) in are.targets.iter().enumerate() {
            let row = logits.row(j);
            let argmax =
                row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            hits += usize::from(argmax == target as usize);
            total += 1;
        }
    }
    println!("teacher-forced accuracy: {:.4} ({hits}/{total})", hits as f64 / total as f64);

    // End-to-end on a few training instructions.
    let t1 = Instant::now();
    let policy = DecodePolicy::default();
    let gw = GuidanceWeights::disabled();
    let mut wer_sum = 0.0;
    for (i, ex) in data.iter().take(16).enumerate() {
        let p = DecodePolicy { seed: i as u64, ..policy.clone() };
        let (grid, _) = pool
            .install(|| {
                synthesize(
                    &state.bundle.store,
                    &state.bundle.nets,
                    &ex.instruction.tokens,
                    &gw,
                    &p,
                    None,
                    None,
                )
            })
            .unwrap();
        let decoded = oracle_decode_content(&grid);
        let wer = codeclm::evalkit::toy_wer(&ex.instruction.content, &decoded).unwrap();
        wer_sum += wer;
    }
    println!(
        "16 syntheses (no cfg): {:.1}s, mean toy-wer {:.4}",
        t1.elapsed().as_secs_f64(),
        wer_sum / 16.0
    );

    let t2 = Instant::now();
    let eval = pool
        .install(|| {
            run_eval(
                &state.bundle.store,
                &state.bundle.nets,
                &data[..16],
                &GuidanceWeights::default(),
                &policy,
                "bench",
            )
        })
        .unwrap();
    println!(
        "16-sample eval at 2/2/2: {:.1}s, wer {:.4}, mean attr {:.4} (pitch {:.3} speed {:.3} energy {:.3} emotion {:.3})",
        t2.elapsed().as_secs_f64(),
        eval.toy_wer,
        eval.attr_accuracy.mean,
        eval.attr_accuracy.pitch,
        eval.attr_accuracy.speed,
        eval.attr_accuracy.energy,
        eval.attr_accuracy.emotion,
    );
}
