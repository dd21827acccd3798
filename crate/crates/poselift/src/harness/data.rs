//! Dataset plumbing: synthetic generation with derived per-sequence seeds,
//! and directory persistence as paired JSONL pose files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::rng::derive_seed;
use crate::skeleton::io::{read_pose2d_file, read_pose3d_file, write_pose2d_file, write_pose3d_file};
use crate::skeleton::{synth_sequence, JointSequence2D, JointSequence3D, SynthConfig};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub sequences: Vec<(JointSequence2D, JointSequence3D)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let Some((x0, y0)) = self.sequences.first() else {
            return Err(Error::Config("dataset is empty".into()));
        };
        let (n, j) = (x0.frames(), x0.joints());
        for (i, (x, y)) in self.sequences.iter().enumerate() {
            if x.frames() != n || x.joints() != j || y.frames() != n || y.joints() != j {
                return Err(Error::Dimension(format!(
                    "sequence {} geometry differs from sequence 0 ({}x{})",
                    i, n, j
                )));
            }
        }
        let _ = y0;
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.sequences.first().map(|(x, _)| x.frames()).unwrap_or(0)
    }

    pub fn joints(&self) -> usize {
        self.sequences.first().map(|(x, _)| x.joints()).unwrap_or(0)
    }
}

/// Generates `count` sequences with per-sequence seeds derived from
/// `(master_seed, purpose, index)`, so train and test sets never overlap.
pub fn generate(count: usize, synth: &SynthConfig, master_seed: u64, purpose: &str) -> Result<Dataset> {
    let mut sequences = Vec::with_capacity(count);
    for i in 0..count {
        let seed = derive_seed(master_seed, purpose, i as u64);
        let (y3, x2) = synth_sequence(synth, seed)?;
        sequences.push((x2, y3));
    }
    let ds = Dataset { sequences };
    ds.validate()?;
    Ok(ds)
}

/// Writes `seq_#####.2d.jsonl` / `seq_#####.3d.jsonl` pairs into `dir`.
pub fn save_dir(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, (x2, y3)) in ds.sequences.iter().enumerate() {
        write_pose2d_file(dir.join(format!("seq_{:05}.2d.jsonl", i)), x2)?;
        write_pose3d_file(dir.join(format!("seq_{:05}.3d.jsonl", i)), y3)?;
    }
    Ok(())
}

/// Loads every `seq_*.2d.jsonl` / `seq_*.3d.jsonl` pair from `dir`.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut stems: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".2d.jsonl").map(|s| s.to_string())
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Config(format!("no pose sequences found in {}", dir.display())));
    }
    let mut sequences = Vec::with_capacity(stems.len());
    for stem in stems {
        let x2 = read_pose2d_file(dir.join(format!("{stem}.2d.jsonl")))?;
        let y3 = read_pose3d_file(dir.join(format!("{stem}.3d.jsonl")))?;
        if x2.frames() != y3.frames() || x2.joints() != y3.joints() {
            return Err(Error::Format(format!("sequence '{}' has mismatched 2D/3D geometry", stem)));
        }
        sequences.push((x2, y3));
    }
    let ds = Dataset { sequences };
    ds.validate()?;
    Ok(ds)
}
