//! Line-delimited dataset records: one instruction per line, together with
//! its oracle semantic ids and acoustic grid. The same record carries
//! generated grids (sampler output, speech prompts), so one parser serves
//! every grid file in the project. Field names are fixed in FORMATS.md.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    oracle_acoustic, oracle_semantic_raw, AcousticGrid, AttributeSet, Emotion, Energy,
    Instruction, Language, Pitch, Speed,
};
use crate::error::{Error, Result};

pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub version: u32,
    pub seed: u64,
    pub language: u32,
    pub pitch: u32,
    pub speed: u32,
    pub energy: u32,
    pub emotion: u32,
    pub stress: Option<usize>,
    pub speaker: u64,
    pub content: Vec<u32>,
    pub tokens: Vec<u32>,
    /// Absent in hand-written records (e.g. `--literal` instructions).
    #[serde(default)]
    pub semantic_raw: Vec<u32>,
    #[serde(default)]
    pub grid_frames: usize,
    #[serde(default)]
    pub grid_layers: usize,
    #[serde(default)]
    pub grid: Vec<u32>,
}

impl Record {
    /// Builds a record from an instruction by running the oracles.
    pub fn from_instruction(seed: u64, inst: &Instruction) -> Record {
        let grid = oracle_acoustic(inst);
        Record::from_parts(seed, inst, oracle_semantic_raw(inst), &grid)
    }

    /// Builds a record around an externally produced grid (e.g. generation
    /// output); `semantic_raw` then holds whatever sequence drove the grid.
    pub fn from_parts(
        seed: u64,
        inst: &Instruction,
        semantic_raw: Vec<u32>,
        grid: &AcousticGrid,
    ) -> Record {
        let a = &inst.attributes;
        Record {
            version: RECORD_VERSION,
            seed,
            language: a.language.index(),
            pitch: a.pitch.index(),
            speed: a.speed.index(),
            energy: a.energy.index(),
            emotion: a.emotion.index(),
            stress: a.stress_index,
            speaker: inst.speaker_seed,
            content: inst.content.clone(),
            tokens: inst.tokens.clone(),
            semantic_raw,
            grid_frames: grid.frames(),
            grid_layers: grid.layers(),
            grid: grid.values().to_vec(),
        }
    }

    pub fn attributes(&self) -> Result<AttributeSet> {
        let field = |name: &str| Error::InvalidConfig(format!("record field {name} out of range"));
        Ok(AttributeSet {
            pitch: Pitch::from_index(self.pitch).ok_or_else(|| field("pitch"))?,
            speed: Speed::from_index(self.speed).ok_or_else(|| field("speed"))?,
            energy: Energy::from_index(self.energy).ok_or_else(|| field("energy"))?,
            emotion: Emotion::from_index(self.emotion).ok_or_else(|| field("emotion"))?,
            stress_index: self.stress,
            language: Language::from_index(self.language).ok_or_else(|| field("language"))?,
        })
    }

    pub fn instruction(&self) -> Result<Instruction> {
        Ok(Instruction {
            tokens: self.tokens.clone(),
            attributes: self.attributes()?,
            content: self.content.clone(),
            speaker_seed: self.speaker,
        })
    }

    pub fn acoustic_grid(&self) -> Result<AcousticGrid> {
        AcousticGrid::new(self.grid_frames, self.grid_layers, self.grid.clone())
    }

    /// Fully decoded view used by training and evaluation.
    pub fn example(&self) -> Result<DatasetExample> {
        Ok(DatasetExample {
            instruction: self.instruction()?,
            semantic_raw: self.semantic_raw.clone(),
            grid: self.acoustic_grid()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DatasetExample {
    pub instruction: Instruction,
    pub semantic_raw: Vec<u32>,
    pub grid: AcousticGrid,
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::DatasetRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if record.version != RECORD_VERSION {
            return Err(Error::DatasetRecord {
                line: i + 1,
                reason: format!("version {} unsupported", record.version),
            });
        }
        if record.grid.len() != record.grid_frames * record.grid_layers {
            return Err(Error::DatasetRecord {
                line: i + 1,
                reason: "grid values do not match dimensions".into(),
            });
        }
        records.push(record);
    }
    Ok(records)
}
