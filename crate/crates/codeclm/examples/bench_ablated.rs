//! No-semantic-stage variant probe for the ablation trend.

use std::time::Instant;

use codeclm::evalkit::run_eval;
use codeclm::models::{ModelBundle, ModelConfig};
use codeclm::sampler::{DecodePolicy, GuidanceWeights};
use codeclm::toyworld::{sample_instruction_for_phase, Language, Phase, Record};
use codeclm::trainer::{train_phase, TrainConfig, TrainerState};

fn dataset(count: u64, seed0: u64) -> Vec<codeclm::toyworld::DatasetExample> {
    (0..count)
        .map(|i| {
            let s = seed0 + i;
            let language = if s % 2 == 0 { Language::L0 } else { Language::L1 };
            Record::from_instruction(s, &sample_instruction_for_phase(s, language, Phase::Instruct))
                .example()
                .unwrap()
        })
        .collect()
}

fn main() {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let train = dataset(4096, 0);
    let held_out = dataset(256, 1_000_000);
    let config = ModelConfig { use_semantic: false, ..ModelConfig::desk_default() };
    let mut state = TrainerState::new(ModelBundle::<f32>::new(0, &config).unwrap());
    let mut cfg = TrainConfig::desk_default(Phase::Instruct);
    cfg.ar_steps = 3000;
    cfg.nar_steps = 1500;
    cfg.batch_size = 16;
    cfg.warmup = 200;
    cfg.peak_lr = 5e-4;
    cfg.seed = 0;

    let t0 = Instant::now();
    let report = pool.install(|| train_phase(&mut state, &train, &cfg).unwrap());
    println!(
        "ablated train: {:.0}s, ar {:.3}->{:.4}",
        t0.elapsed().as_secs_f64(),
        report.ar_losses[0],
        report.ar_losses.last().unwrap()
    );
    let eval = pool
        .install(|| {
            run_eval(
                &state.bundle.store,
                &state.bundle.nets,
                &held_out,
                &GuidanceWeights::disabled(),
                &DecodePolicy::default(),
                "ablated",
            )
        })
        .unwrap();
    println!(
        "ablated 1/1/1: wer {:.4} mean {:.4} fail {}",
        eval.toy_wer, eval.attr_accuracy.mean, eval.failures
    );
}
