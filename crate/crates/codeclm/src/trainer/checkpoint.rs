//! Checkpoint layout: a directory holding `header.json` (human-readable
//! metadata plus an offset table with per-tensor checksums) and
//! `tensors.bin` (little-endian f32 payloads, parameters first, then both
//! optimizers' moment tensors). Round-trips are bit-exact, so a resumed run
//! continues from the same floats the interrupted one saved.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, MetricRow, TrainConfig};
use crate::error::{Error, Result};
use crate::models::{ModelBundle, ModelConfig};
use crate::neuralcore::Tensor;
use crate::seqlayout::VocabMap;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Everything training mutates: parameters plus optimizer state for both
/// networks.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub bundle: ModelBundle<f32>,
    pub adam_ar: AdamState,
    pub adam_nar: AdamState,
    /// Last train config, echoed into the header for provenance.
    pub config_echo: Option<TrainConfig>,
    /// Metric rows accumulated so far (persisted).
    pub metric_rows: Vec<MetricRow>,
}

impl TrainerState {
    pub fn new(bundle: ModelBundle<f32>) -> Self {
        let adam_ar = AdamState::new(&bundle.store, bundle.nets.ar_params());
        let adam_nar = AdamState::new(&bundle.store, bundle.nets.nar_params());
        TrainerState { bundle, adam_ar, adam_nar, config_echo: None, metric_rows: Vec::new() }
    }

    /// Fresh optimizer state over the same parameters (phase hand-off:
    /// warm-start weights, cold optimizer).
    pub fn reset_optimizer(&mut self) {
        self.adam_ar = AdamState::new(&self.bundle.store, self.bundle.nets.ar_params());
        self.adam_nar = AdamState::new(&self.bundle.store, self.bundle.nets.nar_params());
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
    checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    vocab: VocabMap,
    ar_step: usize,
    nar_step: usize,
    train_config: Option<TrainConfig>,
    metric_rows: Vec<MetricRow>,
    tensors: Vec<TensorEntry>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn tensor_from_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(bytes.len() / 4);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().expect("chunk of 4")));
    }
    Tensor::from_vec(shape, data)
}

/// Ordered (name, tensor) pairs covering parameters and optimizer moments.
fn all_tensors(state: &TrainerState) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    let store = &state.bundle.store;
    for (_, param) in store.iter() {
        out.push((format!("param.{}", param.name), &param.value));
    }
    for (label, adam) in [("ar", &state.adam_ar), ("nar", &state.adam_nar)] {
        for (slot, &pid) in adam.params.iter().enumerate() {
            out.push((format!("adam.{label}.m.{}", store.name(pid)), &adam.m[slot]));
            out.push((format!("adam.{label}.v.{}", store.name(pid)), &adam.v[slot]));
        }
    }
    out
}

pub fn save_checkpoint(state: &TrainerState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut payload: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (name, tensor) in all_tensors(state) {
        let bytes = tensor_bytes(tensor);
        entries.push(TensorEntry {
            name,
            shape: tensor.shape().to_vec(),
            offset: payload.len(),
            len: bytes.len(),
            checksum: format!("{:016x}", fnv1a64(&bytes)),
        });
        payload.extend_from_slice(&bytes);
    }
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model_config: state.bundle.nets.config.clone(),
        vocab: state.bundle.nets.vocab.clone(),
        ar_step: state.adam_ar.step,
        nar_step: state.adam_nar.step,
        train_config: state.config_echo.clone(),
        metric_rows: state.metric_rows.clone(),
        tensors: entries,
    };
    let mut header_file = std::fs::File::create(dir.join("header.json"))?;
    serde_json::to_writer_pretty(&mut header_file, &header)?;
    header_file.write_all(b"\n")?;
    std::fs::File::create(dir.join("tensors.bin"))?.write_all(&payload)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainerState> {
    let header_text = std::fs::read_to_string(dir.join("header.json"))?;
    let header: Header = serde_json::from_str(&header_text)?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: header.format_version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    if header.vocab != VocabMap::new() {
        return Err(Error::Checkpoint("vocabulary tables do not match this build".into()));
    }

    let mut payload = Vec::new();
    std::fs::File::open(dir.join("tensors.bin"))?.read_to_end(&mut payload)?;

    // Rebuild the wiring, then overwrite every tensor from the payload.
    let bundle = ModelBundle::<f32>::new(0, &header.model_config)?;
    let mut state = TrainerState::new(bundle);
    state.adam_ar.step = header.ar_step;
    state.adam_nar.step = header.nar_step;
    state.config_echo = header.train_config.clone();
    state.metric_rows = header.metric_rows.clone();

    let mut by_name: std::collections::BTreeMap<&str, &TensorEntry> =
        header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut read_tensor = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let entry = by_name
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let end = entry.offset + entry.len;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("tensor {name} extends past the payload")));
        }
        let bytes = &payload[entry.offset..end];
        if format!("{:016x}", fnv1a64(bytes)) != entry.checksum {
            return Err(Error::ChecksumMismatch { name: name.to_string() });
        }
        if entry.shape != shape {
            return Err(Error::Checkpoint(format!("tensor {name} has the wrong shape")));
        }
        tensor_from_bytes(entry.shape.clone(), bytes)
    };

    let param_ids: Vec<_> = state.bundle.store.iter().map(|(id, _)| id).collect();
    for pid in param_ids {
        let name = format!("param.{}", state.bundle.store.name(pid));
        let shape = state.bundle.store.get(pid).shape().to_vec();
        *state.bundle.store.get_mut(pid) = read_tensor(&name, &shape)?;
    }
    for label in ["ar", "nar"] {
        let params =
            if label == "ar" { state.adam_ar.params.clone() } else { state.adam_nar.params.clone() };
        for (slot, &pid) in params.iter().enumerate() {
            let pname = state.bundle.store.name(pid).to_string();
            let shape = state.bundle.store.get(pid).shape().to_vec();
            let m = read_tensor(&format!("adam.{label}.m.{pname}"), &shape)?;
            let v = read_tensor(&format!("adam.{label}.v.{pname}"), &shape)?;
            let adam = if label == "ar" { &mut state.adam_ar } else { &mut state.adam_nar };
            adam.m[slot] = m;
            adam.v[slot] = v;
        }
    }
    if !by_name.is_empty() {
        return Err(Error::Checkpoint(format!("{} unexpected tensors in header", by_name.len())));
    }
    Ok(state)
}
