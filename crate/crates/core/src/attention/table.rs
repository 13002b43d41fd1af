//! Per-sample filter weights and the `DATT` cache file.
//!
//! Little-endian layout: magic `DATT`, `u32` version, 32-byte dataset hash,
//! 32-byte checkpoint hash, `u32` tap count, per tap `u32` layer and `u32`
//! filter count, `u32` sample count, then one row of `f64` weights per
//! sample (taps concatenated in order).

use std::fs;
use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::TapInfo;

const MAGIC: &[u8; 4] = b"DATT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTable {
    taps: Vec<TapInfo>,
    dataset_hash: [u8; 32],
    checkpoint_hash: [u8; 32],
    rows: Vec<Vec<f64>>,
}

impl AttentionTable {
    pub fn new(
        taps: Vec<TapInfo>,
        dataset_hash: [u8; 32],
        checkpoint_hash: [u8; 32],
        rows: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let width: usize = taps.iter().map(|t| t.channels).sum();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
            return Err(Error::shape(format!(
                "attention row {i} has {} weights, taps need {width}",
                r.len()
            )));
        }
        Ok(Self {
            taps,
            dataset_hash,
            checkpoint_hash,
            rows,
        })
    }

    /// `1/N` for every filter of every tap.
    pub fn uniform(taps: Vec<TapInfo>, samples: usize) -> Self {
        let row: Vec<f64> = taps
            .iter()
            .flat_map(|t| std::iter::repeat_n(1.0 / t.channels as f64, t.channels))
            .collect();
        Self {
            taps,
            dataset_hash: [0; 32],
            checkpoint_hash: [0; 32],
            rows: vec![row; samples],
        }
    }

    pub fn taps(&self) -> &[TapInfo] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dataset_hash(&self) -> [u8; 32] {
        self.dataset_hash
    }

    pub fn checkpoint_hash(&self) -> [u8; 32] {
        self.checkpoint_hash
    }

    /// All weights of `sample`, taps concatenated.
    pub fn row(&self, sample: usize) -> Result<&[f64]> {
        self.rows
            .get(sample)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("no attention row for sample {sample}")))
    }

    /// Weights of `sample` at tapped conv layer `layer`.
    pub fn weights(&self, sample: usize, layer: usize) -> Result<&[f64]> {
        let mut offset = 0;
        for t in &self.taps {
            if t.layer == layer {
                return Ok(&self.row(sample)?[offset..offset + t.channels]);
            }
            offset += t.channels;
        }
        Err(Error::Lookup(format!("attention table has no tap at layer {layer}")))
    }

    /// Rows for `indices`, in that order. Hashes are cleared since the
    /// result no longer describes the dataset it was built from.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let rows = indices
            .iter()
            .map(|&i| self.row(i).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            taps: self.taps.clone(),
            dataset_hash: [0; 32],
            checkpoint_hash: [0; 32],
            rows,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.bytes(&self.dataset_hash);
        w.bytes(&self.checkpoint_hash);
        w.len32(self.taps.len())?;
        for t in &self.taps {
            w.len32(t.layer)?;
            w.len32(t.channels)?;
        }
        w.len32(self.rows.len())?;
        for r in &self.rows {
            w.f64s(r);
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let dataset_hash = r.array32("dataset hash")?;
        let checkpoint_hash = r.array32("checkpoint hash")?;
        let n_taps = r.usize("tap count")?;
        let mut taps = Vec::with_capacity(n_taps.min(1024));
        for _ in 0..n_taps {
            let layer = r.usize("tap layer")?;
            let channels = r.usize("tap channels")?;
            if channels == 0 {
                return Err(r.error(format!("tap at layer {layer} has no filters")));
            }
            taps.push(TapInfo { layer, channels });
        }
        let width: usize = taps.iter().map(|t| t.channels).sum();
        let n = r.usize("sample count")?;
        let mut rows = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            rows.push(r.f64s(width, "weight row")?);
        }
        r.finish()?;
        Self::new(taps, dataset_hash, checkpoint_hash, rows)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
