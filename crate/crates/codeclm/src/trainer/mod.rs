//! Optimization: the learning-rate schedule, bias-corrected moment updates
//! with a global-norm cap, condition-dropout wiring, the per-phase training
//! loop for both networks, and checkpoint persistence.
//!
//! Every random draw is keyed on `(seed, network, step)` rather than a
//! mutable rng, so an interrupted run resumed from a checkpoint replays the
//! exact same batches, dropouts, and masks.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, TrainerState, CHECKPOINT_FORMAT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ar_loss_and_grad, nar_loss_and_grad, Networks};
use crate::neuralcore::{Gradients, ParamId, ParamStore, Tensor};
use crate::seqlayout::{
    build_ar_example, build_ar_example_no_semantic, build_nar_example_with, SemanticSequence,
};
use crate::toyworld::{instoken, mix2, DatasetExample, Phase};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;
pub const GRAD_CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayShape {
    Linear,
    InverseSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub ar_steps: usize,
    pub nar_steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub decay: DecayShape,
    pub p_drop_text: f64,
    pub p_drop_st: f64,
    pub p_no_prompt: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults; steps follow the three-phase curriculum
    /// (3000 / 2000 / 500 per network).
    pub fn desk_default(phase: Phase) -> Self {
        let steps = match phase {
            Phase::Pretrain => 3000,
            Phase::Instruct => 2000,
            Phase::Stress => 500,
        };
        TrainConfig {
            phase,
            ar_steps: steps,
            nar_steps: steps,
            batch_size: 8,
            peak_lr: 3e-4,
            warmup: 200,
            decay: DecayShape::Linear,
            p_drop_text: 0.1,
            p_drop_st: 0.1,
            p_no_prompt: 0.3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if self.warmup > self.ar_steps.max(self.nar_steps) {
            return err("warmup exceeds the step budget");
        }
        for (name, p) in [
            ("p_drop_text", self.p_drop_text),
            ("p_drop_st", self.p_drop_st),
            ("p_no_prompt", self.p_no_prompt),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1]")));
            }
        }
        if self.peak_lr <= 0.0 {
            return err("peak_lr must be positive");
        }
        Ok(())
    }
}

/// Warmup/decay parameters for one optimization loop.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total_steps: usize,
    pub decay: DecayShape,
}

impl LrSchedule {
    pub fn from_config(cfg: &TrainConfig, total_steps: usize) -> Self {
        LrSchedule { peak: cfg.peak_lr, warmup: cfg.warmup, total_steps, decay: cfg.decay }
    }
}

/// Linear ramp to the peak over the warmup, then the chosen decay down to
/// 10% of the peak at `total_steps` (flat floor afterwards).
pub fn lr_at(step: usize, schedule: &LrSchedule) -> f64 {
    let LrSchedule { peak, warmup, total_steps, decay } = *schedule;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total_steps <= warmup || step >= total_steps {
        return if step == warmup { peak } else { 0.1 * peak };
    }
    match decay {
        DecayShape::Linear => {
            let frac = (step - warmup) as f64 / (total_steps - warmup) as f64;
            peak * (1.0 - 0.9 * frac)
        }
        DecayShape::InverseSqrt => {
            // sqrt((warmup + b) / (step + b)) hits 1 at the warmup boundary
            // and 0.1 at total_steps.
            let w = warmup as f64;
            let t = total_steps as f64;
            let b = (0.01 * t - w) / 0.99;
            peak * ((w + b) / (step as f64 + b)).sqrt()
        }
    }
}

/// Bias-corrected first/second-moment state for one parameter subset.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub params: Vec<ParamId>,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    /// Completed update count (doubles as the schedule step).
    pub step: usize,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>, params: Vec<ParamId>) -> Self {
        let m = params.iter().map(|&p| Tensor::zeros(store.get(p).shape().to_vec())).collect();
        let v = params.iter().map(|&p| Tensor::zeros(store.get(p).shape().to_vec())).collect();
        AdamState { params, m, v, step: 0 }
    }
}

/// One moment update at learning rate `lr`. Missing gradients count as zero
/// (moments still decay). Non-finite gradients abort with the step index.
pub fn optimizer_step(
    store: &mut ParamStore<f32>,
    grads: &Gradients<f32>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
    for (slot, &pid) in state.params.iter().enumerate() {
        let zero;
        let g = match grads.get(pid) {
            Some(g) => {
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient {
                        step: state.step,
                        tensor: store.name(pid).to_string(),
                    });
                }
                g
            }
            None => {
                zero = Tensor::zeros(store.get(pid).shape().to_vec());
                &zero
            }
        };
        let m = state.m[slot].data_mut();
        let v = state.v[slot].data_mut();
        let p = store.get_mut(pid).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] as f64 / bc1;
            let v_hat = v[i] as f64 / bc2;
            p[i] -= (lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
        }
    }
    Ok(())
}

/// Scales gradients so their global norm is at most [`GRAD_CLIP_NORM`].
pub fn clip_gradients(grads: &mut Gradients<f32>) {
    let norm = grads.global_norm();
    if norm > GRAD_CLIP_NORM {
        grads.scale((GRAD_CLIP_NORM / norm) as f32);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    Ar,
    Nar,
}

impl Network {
    pub fn name(self) -> &'static str {
        match self {
            Network::Ar => "ar",
            Network::Nar => "nar",
        }
    }
}

/// One metrics-log row, emitted every 100 steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub phase: Phase,
    pub network: Network,
    pub loss: f64,
    pub lr: f64,
}

/// What a phase run did: the per-100-step rows, full loss traces, and
/// condition-dropout bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub rows: Vec<MetricRow>,
    pub ar_losses: Vec<f64>,
    pub nar_losses: Vec<f64>,
    pub ar_examples: usize,
    pub text_dropped: usize,
    pub st_dropped: usize,
    pub nar_examples: usize,
    pub prompts_omitted: usize,
}

/// Dataset items with the oracle pieces the examples are assembled from.
struct TrainItem {
    example: DatasetExample,
    sem: SemanticSequence,
    coarse: Vec<u32>,
}

fn prepare_items(nets: &Networks, dataset: &[DatasetExample]) -> Vec<TrainItem> {
    dataset
        .iter()
        .map(|ex| {
            let sem = SemanticSequence::from_raw(
                &nets.vocab,
                ex.instruction.attributes.language,
                &ex.semantic_raw,
            );
            let coarse = ex.grid.coarse();
            TrainItem { example: ex.clone(), sem, coarse }
        })
        .collect()
}

/// Structural check that the dataset richness matches the phase.
pub fn validate_dataset_phase(dataset: &[DatasetExample], phase: Phase) -> Result<()> {
    let mismatch = |reason: &str| {
        Err(Error::DatasetPhaseMismatch { phase: phase.name().into(), reason: reason.into() })
    };
    if dataset.is_empty() {
        return mismatch("dataset is empty");
    }
    for ex in dataset {
        let has_attr = ex.instruction.tokens.iter().any(|&t| instoken::is_attribute(t));
        let has_stress = ex.instruction.tokens.iter().any(|&t| instoken::is_stress(t));
        match phase {
            Phase::Pretrain if has_attr => {
                return mismatch("pretrain data must contain only the quoted span")
            }
            Phase::Instruct if !has_attr => {
                return mismatch("instruct data must describe attributes")
            }
            Phase::Instruct if has_stress => {
                return mismatch("instruct data must not carry stress marks")
            }
            Phase::Stress if !has_attr => {
                return mismatch("stress-phase data must describe attributes")
            }
            _ => {}
        }
    }
    Ok(())
}

fn step_rng(seed: u64, network: Network, step: usize) -> ChaCha8Rng {
    let tag = match network {
        Network::Ar => 0xa5,
        Network::Nar => 0x5a,
    };
    ChaCha8Rng::seed_from_u64(mix2(mix2(seed, tag), step as u64))
}

/// Optional interruption point for [`train_phase_until`]: stop once each
/// network's step counter reaches the given value (the schedule still runs
/// against the config totals, so a later resume continues identically).
#[derive(Debug, Clone, Copy)]
pub struct StepLimits {
    pub ar: usize,
    pub nar: usize,
}

/// Runs the remaining AR and NAR steps of `cfg` on `state`, continuing from
/// the step counters in the optimizer state (so a loaded checkpoint resumes
/// exactly). Deterministic for a fixed `(seed, config, dataset)`.
pub fn train_phase(
    state: &mut TrainerState,
    dataset: &[DatasetExample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_phase_until(state, dataset, cfg, None)
}

pub fn train_phase_until(
    state: &mut TrainerState,
    dataset: &[DatasetExample],
    cfg: &TrainConfig,
    limits: Option<StepLimits>,
) -> Result<TrainReport> {
    cfg.validate()?;
    validate_dataset_phase(dataset, cfg.phase)?;
    let items = prepare_items(&state.bundle.nets, dataset);
    let mut report = TrainReport::default();

    run_network(state, &items, cfg, Network::Ar, limits, &mut report)?;
    run_network(state, &items, cfg, Network::Nar, limits, &mut report)?;
    Ok(report)
}

fn run_network(
    state: &mut TrainerState,
    items: &[TrainItem],
    cfg: &TrainConfig,
    network: Network,
    limits: Option<StepLimits>,
    report: &mut TrainReport,
) -> Result<()> {
    let total_steps = match network {
        Network::Ar => cfg.ar_steps,
        Network::Nar => cfg.nar_steps,
    };
    let stop_at = match (network, limits) {
        (Network::Ar, Some(l)) => total_steps.min(l.ar),
        (Network::Nar, Some(l)) => total_steps.min(l.nar),
        (_, None) => total_steps,
    };
    let schedule = LrSchedule::from_config(cfg, total_steps);
    let use_semantic = state.bundle.nets.config.use_semantic;

    loop {
        let done = match network {
            Network::Ar => state.adam_ar.step,
            Network::Nar => state.adam_nar.step,
        };
        if done >= stop_at {
            break;
        }
        let step = done; // 0-based index of the step being taken
        let mut rng = step_rng(cfg.seed, network, step);

        // Per-example plans drawn up-front so parallel workers stay
        // deterministic.
        let picks: Vec<(usize, bool, bool, u64)> = (0..cfg.batch_size)
            .map(|_| {
                let idx = rng.gen_range(0..items.len());
                let drop_text = rng.gen_bool(cfg.p_drop_text);
                let drop_st = rng.gen_bool(cfg.p_drop_st);
                let nar_seed = rng.gen::<u64>();
                (idx, drop_text, drop_st, nar_seed)
            })
            .collect();

        let nets = &state.bundle.nets;
        let store = &state.bundle.store;
        let results: Vec<Result<(f32, Gradients<f32>, bool)>> = picks
            .par_iter()
            .map(|&(idx, drop_text, drop_st, nar_seed)| {
                let item = &items[idx];
                match network {
                    Network::Ar => {
                        let ex = if use_semantic {
                            build_ar_example(
                                &nets.vocab,
                                &item.example.instruction,
                                &item.sem,
                                &item.coarse,
                                drop_text,
                                drop_st,
                            )?
                        } else {
                            build_ar_example_no_semantic(
                                &nets.vocab,
                                &item.example.instruction,
                                item.example.instruction.attributes.language,
                                &item.coarse,
                                drop_text,
                            )?
                        };
                        let (loss, grads) = ar_loss_and_grad(store, nets, &ex)?;
                        Ok((loss, grads, false))
                    }
                    Network::Nar => {
                        let sem = if use_semantic {
                            item.sem.clone()
                        } else {
                            SemanticSequence {
                                language: item.sem.language,
                                ids: Vec::new(),
                                terminated: true,
                            }
                        };
                        let ex = build_nar_example_with(
                            &nets.vocab,
                            &item.example.instruction,
                            &sem,
                            &item.example.grid,
                            nar_seed,
                            cfg.p_no_prompt,
                        )?;
                        let (loss, grads) = nar_loss_and_grad(store, nets, &ex)?;
                        Ok((loss, grads, ex.prompt_len == 0))
                    }
                }
            })
            .collect();

        let mut grads = Gradients::zeros(state.bundle.store.len());
        let mut loss_sum = 0.0f64;
        let mut omitted = 0usize;
        for r in results {
            let (loss, g, no_prompt) = r?;
            loss_sum += loss as f64;
            omitted += usize::from(no_prompt);
            grads.accumulate(&g);
        }
        grads.scale(1.0 / cfg.batch_size as f32);
        let loss = loss_sum / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        clip_gradients(&mut grads);

        // Dropout bookkeeping.
        match network {
            Network::Ar => {
                report.ar_examples += cfg.batch_size;
                report.text_dropped += picks.iter().filter(|p| p.1).count();
                report.st_dropped += picks.iter().filter(|p| p.2).count();
                report.ar_losses.push(loss);
            }
            Network::Nar => {
                report.nar_examples += cfg.batch_size;
                report.prompts_omitted += omitted;
                report.nar_losses.push(loss);
            }
        }

        let lr = lr_at(step, &schedule);
        let adam = match network {
            Network::Ar => &mut state.adam_ar,
            Network::Nar => &mut state.adam_nar,
        };
        optimizer_step(&mut state.bundle.store, &grads, adam, lr)?;

        let completed = step + 1;
        if completed % 100 == 0 || completed == total_steps {
            report.rows.push(MetricRow { step: completed, phase: cfg.phase, network, loss, lr });
        }
    }
    Ok(())
}

/// Appends rows to the metrics CSV, writing the header when the file is new.
pub fn write_metrics_csv(path: &std::path::Path, rows: &[MetricRow]) -> Result<()> {
    use std::io::Write;
    let new = !path.exists();
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(file, "step,phase,network,loss,lr")?;
    }
    for row in rows {
        writeln!(
            file,
            "{},{},{},{},{}",
            row.step,
            row.phase.name(),
            row.network.name(),
            row.loss,
            row.lr
        )?;
    }
    Ok(())
}
