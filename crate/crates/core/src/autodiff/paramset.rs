//! Named tensor collections and their `S2I1` binary encoding.
//!
//! Layout (all integers u32 little-endian):
//! `"S2I1"`, tensor count, then per tensor: name byte length, UTF-8 name,
//! rank, each dimension, and the `f32` little-endian values in row-major order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"S2I1";

/// Named `f32` tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, ArrayD<f32>>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, t: ArrayD<f32>) -> Option<ArrayD<f32>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.tensors.get(name).map(|t| t.shape())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.as_standard_layout().iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut cur, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(
                "parameter file does not start with S2I1".into(),
            ));
        }
        let count = read_u32(&mut cur)? as usize;
        let mut set = ParamSet::default();
        for _ in 0..count {
            let name_len = read_u32(&mut cur)? as usize;
            if name_len > cur.len() {
                return Err(Error::Format("truncated tensor name".into()));
            }
            let mut name = vec![0u8; name_len];
            read_exact(&mut cur, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut cur)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut cur)? as usize);
            }
            let n: usize = dims.iter().product();
            if n.checked_mul(4).is_none_or(|b| b > cur.len()) {
                return Err(Error::Format(format!("truncated data for tensor '{name}'")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 4];
                read_exact(&mut cur, &mut b)?;
                data.push(f32::from_le_bytes(b));
            }
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length checked");
            if set.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor '{name}'")));
            }
        }
        if !cur.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", cur.len())));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(cur: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf)
        .map_err(|_| Error::Format("unexpected end of parameter file".into()))
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(
            dims in proptest::collection::vec(1usize..4, 0..3),
            seed in any::<u64>(),
            name in "[a-z.]{1,12}",
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((i as u64 ^ seed) % 1000) as f32 * 0.37 - 100.0).collect();
            let mut set = ParamSet::default();
            set.insert(name, ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap());
            set.insert("zz.bias", ArrayD::zeros(IxDyn(&[3])));
            let back = ParamSet::from_bytes(&set.to_bytes()).unwrap();
            prop_assert_eq!(back, set);
        }
    }

    #[test]
    fn header_layout() {
        let mut set = ParamSet::default();
        set.insert(
            "w",
            ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, -2.0]).unwrap(),
        );
        let b = set.to_bytes();
        assert_eq!(&b[..4], b"S2I1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(b[12], b'w');
        assert_eq!(u32::from_le_bytes(b[13..17].try_into().unwrap()), 2);
        assert_eq!(b.len(), 4 + 4 + 4 + 1 + 4 + 8 + 8);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(ParamSet::from_bytes(b"NOPE\0\0\0\0").is_err());
        let mut set = ParamSet::default();
        set.insert("w", ArrayD::zeros(IxDyn(&[4])));
        let b = set.to_bytes();
        assert!(ParamSet::from_bytes(&b[..b.len() - 1]).is_err());
    }
}
