//! `DIMG` dataset container.
//!
//! Little-endian layout: magic `DIMG`, `u32` version, `u32` class count K,
//! `u32` sample count, then per sample `u32` label, `u32` C, H, W and
//! `C*H*W` raw `f64` pixels.

use std::fs;
use std::path::{Path, PathBuf};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Sample, Split};

const MAGIC: &[u8; 4] = b"DIMG";
const VERSION: u32 = 1;

pub fn write_dimg(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.len32(ds.num_classes())?;
    w.len32(ds.len())?;
    for s in ds.samples() {
        w.len32(s.label)?;
        for &d in s.image.shape() {
            w.len32(d)?;
        }
        w.f64s(s.image.data());
    }
    Ok(w.into_inner())
}

pub fn read_dimg(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let k = r.usize("class count")?;
    let n = r.usize("sample count")?;
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let label = r.usize("label")?;
        if label >= k {
            return Err(Error::Validation(format!(
                "sample {i} has label {label} but the file declares {k} classes"
            )));
        }
        let (c, h, w) = (r.usize("channels")?, r.usize("height")?, r.usize("width")?);
        if c == 0 || h == 0 || w == 0 {
            return Err(r.error(format!("sample {i} has empty extent {c}x{h}x{w}")));
        }
        let numel = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| r.error("image extent overflows"))?;
        let pixels = r.f64s(numel, "pixels")?;
        samples.push(Sample {
            image: Tensor::from_parts(vec![c, h, w], pixels),
            label,
        });
    }
    r.finish()?;
    Dataset::new(samples, k, Split::Train)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_dimg(ds)?)?;
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads a `DIMG` file, or a directory `root/<class>/<sample>.dimg` where
/// class indices follow the lexicographic order of the class directories
/// and each file's labels must match its directory.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    if !path.is_dir() {
        return read_dimg(&fs::read(path)?);
    }
    let classes: Vec<PathBuf> = sorted_entries(path)?.into_iter().filter(|p| p.is_dir()).collect();
    let k = classes.len();
    let mut samples = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        let files = sorted_entries(class_dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "dimg"));
        for file in files {
            let part = read_dimg(&fs::read(&file)?)?;
            if part.num_classes() != k {
                return Err(Error::Validation(format!(
                    "{} declares {} classes, directory tree has {k}",
                    file.display(),
                    part.num_classes()
                )));
            }
            for s in part.samples() {
                if s.label != label {
                    return Err(Error::Validation(format!(
                        "{} holds label {} but lives under class {label} ({})",
                        file.display(),
                        s.label,
                        class_dir.display()
                    )));
                }
            }
            samples.extend(part.samples().iter().cloned());
        }
    }
    Dataset::new(samples, k, Split::Train)
}
