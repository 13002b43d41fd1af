//! `DLTA` checkpoint container.
//!
//! Layout (little-endian): magic `DLTA`, `u32` version, `u32`-prefixed JSON
//! model spec, `u32` parameter count, then per parameter: `u32`-prefixed
//! name, `u32` layer index, `u8` flags (bit 0 head, bit 1 source snapshot
//! present), `u32` rank, `u32` extents, raw `f64` values, and the raw `f64`
//! source snapshot when flagged.

use std::fs;
use std::path::Path;

use crate::binio::{sha256, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ConvNetModel, ModelSpec, Param};

const MAGIC: &[u8; 4] = b"DLTA";
const VERSION: u32 = 1;
const FLAG_HEAD: u8 = 1;
const FLAG_REFERENCE: u8 = 2;

pub fn write_checkpoint(model: &ConvNetModel) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.string(&serde_json::to_string(model.spec())?)?;
    w.len32(model.params().len())?;
    for p in model.params() {
        w.string(&p.name)?;
        w.len32(p.layer)?;
        let mut flags = 0;
        if p.head {
            flags |= FLAG_HEAD;
        }
        if p.reference.is_some() {
            flags |= FLAG_REFERENCE;
        }
        w.u8(flags);
        w.len32(p.value.ndim())?;
        for &d in p.value.shape() {
            w.len32(d)?;
        }
        w.f64s(p.value.data());
        if let Some(r) = &p.reference {
            w.f64s(r.data());
        }
    }
    Ok(w.into_inner())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ConvNetModel> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let spec_at = r.offset();
    let spec: ModelSpec = serde_json::from_str(&r.string("model spec")?)
        .map_err(|e| Error::parse(spec_at, format!("model spec: {e}")))?;
    let count = r.usize("parameter count")?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let layer = r.usize("layer index")?;
        let flags = r.u8("flags")?;
        if flags & !(FLAG_HEAD | FLAG_REFERENCE) != 0 {
            return Err(r.error(format!("unknown flag bits {flags:#04x}")));
        }
        let rank = r.usize("rank")?;
        if rank == 0 || rank > 8 {
            return Err(r.error(format!("implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.usize("extent")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.error("extent product overflows"))?;
        let at = r.offset();
        let value =
            Tensor::new(shape.clone(), r.f64s(numel, "values")?).map_err(|e| Error::parse(at, e.to_string()))?;
        let reference = if flags & FLAG_REFERENCE != 0 {
            Some(Tensor::from_parts(shape, r.f64s(numel, "source values")?))
        } else {
            None
        };
        params.push(Param {
            name,
            layer,
            value,
            head: flags & FLAG_HEAD != 0,
            reference,
        });
    }
    r.finish()?;
    ConvNetModel::from_parts(spec, params)
}

pub fn save_checkpoint(model: &ConvNetModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ConvNetModel> {
    read_checkpoint(&fs::read(path)?)
}

/// SHA-256 of the serialized checkpoint.
pub fn checkpoint_hash(model: &ConvNetModel) -> Result<[u8; 32]> {
    Ok(sha256(&write_checkpoint(model)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn model() -> ConvNetModel {
        let spec = ModelSpec::reference([3, 8, 8], [2, 3, 4], 3);
        ConvNetModel::build(spec, 1).unwrap().replace_head(4, 2).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut m = model();
        m.params_mut()[0].value.data_mut()[0] = -0.0;
        m.params_mut()[1].value.data_mut()[0] = f64::MIN_POSITIVE / 3.0;
        let bytes = write_checkpoint(&m).unwrap();
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(write_checkpoint(&back).unwrap(), bytes);
        for (a, b) in m.params().iter().zip(back.params()) {
            assert!(a.value.bitwise_eq(&b.value));
            assert_eq!(a.head, b.head);
            assert_eq!(a.reference.is_some(), b.reference.is_some());
        }
    }

    #[test]
    fn corrupt_input_reports_offset() {
        let bytes = write_checkpoint(&model()).unwrap();
        match read_checkpoint(&bytes[..bytes.len() - 3]) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad), Err(Error::Parse { offset: 0, .. })));
    }
}
