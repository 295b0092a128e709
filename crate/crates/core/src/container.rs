//! Dataset directories.
//!
//! A dataset directory holds `manifest.json` plus one `<condition>_<label>.bin`
//! file per (condition, class). Each `.bin` file is three tensor records in
//! modality order (vibration, current, acoustic). A record is a 16-byte header
//! followed by little-endian `f32` payload in row-major order:
//!
//! ```text
//! bytes 0..4    magic  b"MMDG"
//! bytes 4..6    rank   u16 LE (1..=5)
//! bytes 6..16   dims   5 x u16 LE, unused trailing dims are 0
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::PreparedSample;
use crate::synthgen::{self, ConditionSpec, FaultClass, RawMultiModalSample};
use crate::{Modality, NUM_CLASSES};

pub const MAGIC: [u8; 4] = *b"MMDG";
pub const HEADER_LEN: usize = 16;
pub const MAX_RANK: usize = 5;
pub const MANIFEST: &str = "manifest.json";

pub fn write_record<W: Write>(w: &mut W, dims: &[usize], data: &[f32]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::Format(format!("rank {} outside 1..={MAX_RANK}", dims.len())));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::Format("payload length does not match dims".into()));
    }
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(&MAGIC);
    header[4..6].copy_from_slice(&(dims.len() as u16).to_le_bytes());
    for (i, &d) in dims.iter().enumerate() {
        let d = u16::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u16")))?;
        header[6 + 2 * i..8 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_record<R: Read>(r: &mut R) -> Result<ArrayD<f32>> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    if header[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let rank = u16::from_le_bytes([header[4], header[5]]) as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u16::from_le_bytes([header[6 + 2 * i], header[7 + 2 * i]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Raw,
    Prepared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub label: u8,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: DatasetKind,
    pub seed: u64,
    pub conditions: Vec<ConditionSpec>,
    pub classes: Vec<ClassEntry>,
    /// condition id -> class label -> sample count
    pub counts: BTreeMap<String, BTreeMap<u8, usize>>,
    /// per-sample tensor shape for each modality, keyed by modality name
    pub shapes: BTreeMap<String, Vec<usize>>,
    /// Hz, keyed by modality name
    pub sample_rates: BTreeMap<String, f64>,
    pub files: Vec<String>,
    #[serde(default)]
    pub recipes: Option<Vec<FaultClass>>,
}

impl Manifest {
    pub fn new(kind: DatasetKind, seed: u64, conditions: Vec<ConditionSpec>, classes: &[FaultClass]) -> Self {
        let shapes = match kind {
            DatasetKind::Raw => Modality::ALL
                .iter()
                .map(|m| (m.to_string(), vec![synthgen::segment_len(*m), synthgen::channels(*m)]))
                .collect(),
            DatasetKind::Prepared => crate::preprocess::prepared_shapes()
                .into_iter()
                .map(|(m, s)| (m.to_string(), s))
                .collect(),
        };
        Manifest {
            kind,
            seed,
            conditions,
            classes: classes.iter().map(|c| ClassEntry { label: c.label, name: c.name.clone() }).collect(),
            counts: BTreeMap::new(),
            shapes,
            sample_rates: Modality::ALL.iter().map(|m| (m.to_string(), synthgen::sample_rate(*m))).collect(),
            files: Vec::new(),
            recipes: Some(classes.to_vec()),
        }
    }

    pub fn condition_ids(&self) -> Vec<String> {
        self.counts.keys().cloned().collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let f = File::create(dir.join(MANIFEST))?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let f = File::open(dir.join(MANIFEST))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }
}

pub fn block_file(condition: &str, label: u8) -> String {
    format!("{condition}_{label}.bin")
}

fn stack(items: &[&ndarray::ArrayD<f32>]) -> (Vec<usize>, Vec<f32>) {
    let mut dims = vec![items.len()];
    dims.extend_from_slice(items[0].shape());
    let mut data = Vec::with_capacity(dims.iter().product());
    for it in items {
        data.extend(it.iter().copied());
    }
    (dims, data)
}

fn write_block(path: &Path, records: [(Vec<usize>, Vec<f32>); 3]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (dims, data) in &records {
        write_record(&mut w, dims, data)?;
    }
    w.flush()?;
    Ok(())
}

fn read_block(path: &Path) -> Result<[ArrayD<f32>; 3]> {
    let mut r = BufReader::new(File::open(path)?);
    Ok([read_record(&mut r)?, read_record(&mut r)?, read_record(&mut r)?])
}

fn check_block(block: &[ArrayD<f32>; 3], shapes: &BTreeMap<String, Vec<usize>>, n: usize) -> Result<()> {
    for (m, rec) in Modality::ALL.iter().zip(block) {
        let want = shapes
            .get(&m.to_string())
            .ok_or_else(|| Error::Format(format!("manifest lacks shape for {m}")))?;
        if rec.shape()[0] != n || &rec.shape()[1..] != want.as_slice() {
            return Err(Error::Format(format!("{m} record shape {:?} disagrees with manifest", rec.shape())));
        }
    }
    Ok(())
}

fn split_rows(a: ArrayD<f32>) -> Vec<ArrayD<f32>> {
    a.outer_iter().map(|v| v.to_owned()).collect()
}

pub fn write_raw_block(dir: &Path, manifest: &mut Manifest, samples: &[RawMultiModalSample]) -> Result<()> {
    let Some(first) = samples.first() else { return Ok(()) };
    let (cond, label) = (first.domain.clone(), first.label);
    let dyns: Vec<[ArrayD<f32>; 3]> = samples
        .iter()
        .map(|s| [s.vibration.clone().into_dyn(), s.current.clone().into_dyn(), s.acoustic.clone().into_dyn()])
        .collect();
    let recs = [0, 1, 2].map(|m| stack(&dyns.iter().map(|d| &d[m]).collect::<Vec<_>>()));
    let name = block_file(&cond, label);
    write_block(&dir.join(&name), recs)?;
    manifest.counts.entry(cond).or_default().insert(label, samples.len());
    manifest.files.push(name);
    Ok(())
}

pub fn write_prepared_block(dir: &Path, manifest: &mut Manifest, samples: &[PreparedSample]) -> Result<()> {
    let Some(first) = samples.first() else { return Ok(()) };
    let (cond, label) = (first.domain.clone(), first.label);
    let dyns: Vec<[ArrayD<f32>; 3]> = samples
        .iter()
        .map(|s| [s.vib_tf.clone().into_dyn(), s.cur_wave.clone().into_dyn(), s.aco_mel.clone().into_dyn()])
        .collect();
    let recs = [0, 1, 2].map(|m| stack(&dyns.iter().map(|d| &d[m]).collect::<Vec<_>>()));
    let name = block_file(&cond, label);
    write_block(&dir.join(&name), recs)?;
    manifest.counts.entry(cond).or_default().insert(label, samples.len());
    manifest.files.push(name);
    Ok(())
}

fn block_path(dir: &Path, cond: &str, label: u8) -> PathBuf {
    dir.join(block_file(cond, label))
}

pub fn read_raw_block(dir: &Path, manifest: &Manifest, cond: &str, label: u8) -> Result<Vec<RawMultiModalSample>> {
    let n = expected_count(manifest, cond, label)?;
    let block = read_block(&block_path(dir, cond, label))?;
    check_block(&block, &manifest.shapes, n)?;
    let [v, c, a] = block;
    let to2 = |x: ArrayD<f32>| x.into_dimensionality::<ndarray::Ix2>().expect("rank checked");
    Ok(split_rows(v)
        .into_iter()
        .zip(split_rows(c))
        .zip(split_rows(a))
        .map(|((v, c), a)| RawMultiModalSample {
            vibration: to2(v),
            current: to2(c),
            acoustic: to2(a),
            label,
            domain: cond.to_string(),
        })
        .collect())
}

pub fn read_prepared_block(dir: &Path, manifest: &Manifest, cond: &str, label: u8) -> Result<Vec<PreparedSample>> {
    let n = expected_count(manifest, cond, label)?;
    let block = read_block(&block_path(dir, cond, label))?;
    check_block(&block, &manifest.shapes, n)?;
    let [v, c, a] = block;
    let to3 = |x: ArrayD<f32>| x.into_dimensionality::<ndarray::Ix3>().expect("rank checked");
    let to2 = |x: ArrayD<f32>| x.into_dimensionality::<ndarray::Ix2>().expect("rank checked");
    Ok(split_rows(v)
        .into_iter()
        .zip(split_rows(c))
        .zip(split_rows(a))
        .map(|((v, c), a)| PreparedSample {
            vib_tf: to3(v),
            cur_wave: to2(c),
            aco_mel: to3(a),
            label,
            domain: cond.to_string(),
        })
        .collect())
}

fn expected_count(manifest: &Manifest, cond: &str, label: u8) -> Result<usize> {
    manifest
        .counts
        .get(cond)
        .and_then(|m| m.get(&label))
        .copied()
        .ok_or_else(|| Error::Format(format!("manifest has no block for {cond}/{label}")))
}

/// Reads every prepared block of the given conditions, ordered by condition then label.
pub fn read_prepared_conditions(dir: &Path, manifest: &Manifest, conditions: &[String]) -> Result<Vec<PreparedSample>> {
    let mut out = Vec::new();
    for cond in conditions {
        for label in 1..=NUM_CLASSES as u8 {
            if manifest.counts.get(cond).is_some_and(|m| m.contains_key(&label)) {
                out.extend(read_prepared_block(dir, manifest, cond, label)?);
            }
        }
    }
    Ok(out)
}
