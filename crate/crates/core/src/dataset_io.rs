//! Dataset file format.
//!
//! One self-describing binary file per dataset: a magic header, the JSON
//! config echo, then the raw samples (features and audio as little-endian
//! f64, labels as u16). Writing the same dataset twice yields identical
//! bytes.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::synth::DatasetConfig;
use crate::types::{AVSample, ClassId, GridDims, SampleId};

pub const DATASET_MAGIC: &[u8] = b"CAVS-DS v1\n";

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic header; not a CAVS-DS v1 file")]
    BadMagic,
    #[error("config block is not valid JSON: {0}")]
    BadConfig(#[from] serde_json::Error),
    #[error("file truncated or field out of range: {0}")]
    Corrupt(&'static str),
}

/// A dataset parsed back from disk: the config echo plus the samples.
#[derive(Debug, Clone)]
pub struct DatasetFile {
    pub config: DatasetConfig,
    pub samples: Vec<AVSample>,
}

pub fn write_dataset(
    path: &Path,
    config: &DatasetConfig,
    samples: &[AVSample],
) -> Result<(), DatasetIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    let cfg = serde_json::to_vec(config)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    for s in samples {
        w.write_all(&s.id.0.to_le_bytes())?;
        w.write_all(&(s.dims.h as u16).to_le_bytes())?;
        w.write_all(&(s.dims.w as u16).to_le_bytes())?;
        w.write_all(&(s.frames.len() as u16).to_le_bytes())?;
        w.write_all(&(s.visual_dim as u16).to_le_bytes())?;
        w.write_all(&(s.audio.len() as u16).to_le_bytes())?;
        w.write_all(&(s.sounding.len() as u16).to_le_bytes())?;
        for c in &s.sounding {
            w.write_all(&c.0.to_le_bytes())?;
        }
        for frame in &s.frames {
            for v in frame {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for grid in &s.labels {
            for c in grid {
                w.write_all(&c.0.to_le_bytes())?;
            }
        }
        for v in &s.audio {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<DatasetFile, DatasetIoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = vec![0u8; DATASET_MAGIC.len()];
    r.read_exact(&mut magic).map_err(|_| DatasetIoError::BadMagic)?;
    if magic != DATASET_MAGIC {
        return Err(DatasetIoError::BadMagic);
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)?;
    let config: DatasetConfig = serde_json::from_slice(&cfg_buf)?;
    let n = read_u32(&mut r)? as usize;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let id = SampleId(read_u32(&mut r)?);
        let h = read_u16(&mut r)? as usize;
        let w = read_u16(&mut r)? as usize;
        let t = read_u16(&mut r)? as usize;
        let d_v = read_u16(&mut r)? as usize;
        let d_a = read_u16(&mut r)? as usize;
        let n_sounding = read_u16(&mut r)? as usize;
        let mut sounding = BTreeSet::new();
        for _ in 0..n_sounding {
            sounding.insert(ClassId(read_u16(&mut r)?));
        }
        let px = h * w;
        let mut frames = Vec::with_capacity(t);
        for _ in 0..t {
            let mut f = Vec::with_capacity(px * d_v);
            for _ in 0..px * d_v {
                f.push(read_f64(&mut r)?);
            }
            frames.push(f);
        }
        let mut labels = Vec::with_capacity(t);
        for _ in 0..t {
            let mut g = Vec::with_capacity(px);
            for _ in 0..px {
                g.push(ClassId(read_u16(&mut r)?));
            }
            labels.push(g);
        }
        let mut audio = Vec::with_capacity(d_a);
        for _ in 0..d_a {
            audio.push(read_f64(&mut r)?);
        }
        samples.push(AVSample {
            id,
            dims: GridDims::new(h, w),
            visual_dim: d_v,
            frames,
            labels,
            audio,
            sounding,
        });
    }
    Ok(DatasetFile { config, samples })
}

fn read_u32(r: &mut impl Read) -> Result<u32, DatasetIoError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| DatasetIoError::Corrupt("u32"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> Result<u16, DatasetIoError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| DatasetIoError::Corrupt("u16"))?;
    Ok(u16::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, DatasetIoError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| DatasetIoError::Corrupt("f64"))?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_universe, generate_dataset, CoOccurrenceSpec, UniverseSpec};

    fn small_config(seed: u64) -> DatasetConfig {
        let spec = UniverseSpec {
            n_classes: 3,
            visual_dim: 4,
            audio_dim: 4,
            visual_noise_std: 0.2,
            audio_gain: 1.0,
            visual_shared_weight: 0.0,
            ambiguous_pairs: vec![],
            prototype_seed: 3,
        };
        DatasetConfig {
            universe: build_universe(&spec),
            co_occ: CoOccurrenceSpec {
                pair_probability: vec![(ClassId(1), ClassId(2), 0.5)],
                objects_per_frame: (1, 2),
            },
            n_samples: 6,
            grid: GridDims::new(6, 6),
            frames_per_clip: 2,
            audio_noise_std: 0.05,
            object_side: (2, 3),
            seed,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = small_config(21);
        let samples = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        write_dataset(&path, &cfg, &samples).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.samples, samples);
    }

    #[test]
    fn serialization_is_byte_deterministic() {
        let cfg = small_config(8);
        let samples = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        write_dataset(&p1, &cfg, &samples).unwrap();
        let again = generate_dataset(&cfg).unwrap();
        write_dataset(&p2, &cfg, &again).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOT-A-DATASET").unwrap();
        assert!(matches!(read_dataset(&path), Err(DatasetIoError::BadMagic)));
    }
}
