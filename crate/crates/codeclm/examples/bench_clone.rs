//! Voice-cloning probe: transcript-only training, then prompt-conditioned
//! generation for unseen speakers.

use std::time::Instant;

use codeclm::evalkit::toy_secs;
use codeclm::models::{ModelBundle, ModelConfig};
use codeclm::sampler::{synthesize, DecodePolicy, GuidanceWeights};
use codeclm::toyworld::{
    oracle_acoustic, sample_instruction, sample_instruction_for_phase, Language, Phase, Record,
};
use codeclm::trainer::{train_phase, TrainConfig, TrainerState};

fn main() {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let data: Vec<_> = (0..512u64)
        .map(|i| {
            let s = 50_000 + i;
            let language = if s % 2 == 0 { Language::L0 } else { Language::L1 };
            Record::from_instruction(s, &sample_instruction_for_phase(s, language, Phase::Pretrain))
                .example()
                .unwrap()
        })
        .collect();
    let mut state = TrainerState::new(ModelBundle::<f32>::new(7, &ModelConfig::desk_default()).unwrap());
    let mut cfg = TrainConfig::desk_default(Phase::Pretrain);
    cfg.ar_steps = 1500;
    cfg.nar_steps = 2000;
    cfg.batch_size = 8;
    cfg.warmup = 100;
    cfg.peak_lr = 5e-4;
    cfg.seed = 1;
    let t0 = Instant::now();
    pool.install(|| train_phase(&mut state, &data, &cfg).unwrap());
    println!("clone train: {:.0}s", t0.elapsed().as_secs_f64());

    let mut values = Vec::new();
    let mut min = f64::INFINITY;
    for i in 0..24u64 {
        let inst = sample_instruction_for_phase(900_000 + i, Language::L0, Phase::Pretrain);
        let donor = sample_instruction(950_000 + i, Language::L1);
        let donor_grid = oracle_acoustic(&donor);
        let prompt = donor_grid.prefix((donor_grid.frames() / 2).max(4));
        let policy = DecodePolicy { seed: i, ..DecodePolicy::default() };
        let (grid, _) = pool
            .install(|| {
                synthesize(
                    &state.bundle.store,
                    &state.bundle.nets,
                    &inst.tokens,
                    &GuidanceWeights::disabled(),
                    &policy,
                    Some(&prompt),
                    None,
                )
            })
            .unwrap();
        let s = toy_secs(&grid, &prompt).unwrap();
        min = min.min(s);
        values.push(s);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    println!("clone toy-secs mean {:.4} min {:.4}", mean, min);
}
