//! Parameter checkpoints: a named-array binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic          b"CPK1"
//! u32            array count
//! per array, sorted by name:
//!   u32          name byte length, then that many UTF-8 bytes
//!   u32          rank, then rank u32 dimensions
//!   f64 x prod   element data, row-major
//! ```
//!
//! Values are stored as raw f64 bits, so a read of a written file
//! reproduces the parameter set bit for bit, NaNs included.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use cadport_core::diffcomp::{Array, ParamSet};

const MAGIC: &[u8; 4] = b"CPK1";

pub fn to_bytes(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(params.arrays.len()).context("too many arrays")?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, array) in &params.arrays {
        let expected: usize = array.shape.iter().product();
        if expected != array.data.len() {
            bail!(
                "array '{name}' holds {} values for shape {:?}",
                array.data.len(),
                array.shape
            );
        }
        let name_len = u32::try_from(name.len()).context("name too long")?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u32::try_from(array.shape.len()).context("rank too large")?;
        out.extend_from_slice(&rank.to_le_bytes());
        for dim in &array.shape {
            let dim = u32::try_from(*dim).with_context(|| format!("dimension of '{name}'"))?;
            out.extend_from_slice(&dim.to_le_bytes());
        }
        for v in &array.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        bail!("not a checkpoint: bad magic {magic:?}");
    }
    let count = r.u32()? as usize;
    let mut params = ParamSet::default();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(name_len)?)
            .context("array name is not UTF-8")?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d)).with_context(
            || format!("shape {shape:?} of '{name}' overflows"),
        )?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
        }
        if params.arrays.insert(name.clone(), Array { shape, data }).is_some() {
            bail!("duplicate array '{name}'");
        }
    }
    if r.at != bytes.len() {
        bail!("{} trailing bytes after the last array", bytes.len() - r.at);
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    let bytes = to_bytes(params)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating directory {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing checkpoint {}", path.display()))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let bytes =
        fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    from_bytes(&bytes).with_context(|| format!("in checkpoint {}", path.display()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            bail!("truncated checkpoint: needed {n} bytes at offset {}", self.at);
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::default();
        p.arrays.insert(
            "l0.w".into(),
            Array { shape: vec![2, 3], data: vec![1.5, -2.25, 0.0, f64::NAN, 1e-300, 7.0] },
        );
        p.arrays.insert("l0.b".into(), Array { shape: vec![3], data: vec![0.0, -0.0, 3.5] });
        p.arrays.insert("l1.w".into(), Array { shape: vec![], data: vec![42.0] });
        p
    }

    #[test]
    fn round_trips_bit_exactly() {
        let p = sample();
        let back = from_bytes(&to_bytes(&p).unwrap()).unwrap();
        assert_eq!(p.arrays.len(), back.arrays.len());
        for (name, a) in &p.arrays {
            let b = &back.arrays[name];
            assert_eq!(a.shape, b.shape);
            let bits = |xs: &[f64]| xs.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
            assert_eq!(bits(&a.data), bits(&b.data), "array {name}");
        }
    }

    #[test]
    fn empty_set_round_trips() {
        let p = ParamSet::default();
        let bytes = to_bytes(&p).unwrap();
        assert_eq!(bytes.len(), 8);
        assert_eq!(from_bytes(&bytes).unwrap(), p);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let good = to_bytes(&sample()).unwrap();
        assert!(from_bytes(&good[..good.len() - 1]).is_err());
        assert!(from_bytes(b"NOPE").is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(from_bytes(&trailing).is_err());
        let mut bad_magic = good;
        bad_magic[0] = b'X';
        assert!(from_bytes(&bad_magic).is_err());
    }

    #[test]
    fn shape_data_mismatch_is_rejected_on_write() {
        let mut p = ParamSet::default();
        p.arrays.insert("w".into(), Array { shape: vec![4], data: vec![1.0] });
        assert!(to_bytes(&p).is_err());
    }
}
