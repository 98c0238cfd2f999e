//! The `SUSN` named-tensor container.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! "SUSN" | version | count | count x (name_len | name utf-8 | n | c | h | w) | payloads
//! ```
//!
//! The payloads follow the header in entry order. The version doubles as the
//! element type: 1 = f32, 2 = f64, 3 = u8 (label planes).

use std::fs;
use std::path::Path;

use super::{Scalar, Shape, Tensor4};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SUSN";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U8 = 3,
}

impl DType {
    fn from_version(v: u32) -> Result<Self> {
        match v {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            3 => Ok(DType::U8),
            other => Err(Error::Format(format!("unsupported SUSN version {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    /// The float container matching a scalar type.
    pub fn of<T: Scalar>() -> Self {
        if T::NAME == "f64" {
            DType::F64
        } else {
            DType::F32
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Values {
    fn dtype(&self) -> DType {
        match self {
            Values::F32(_) => DType::F32,
            Values::F64(_) => DType::F64,
            Values::U8(_) => DType::U8,
        }
    }

    fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
            Values::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Shape,
    pub values: Values,
}

impl Entry {
    pub fn tensor<T: Scalar>(name: impl Into<String>, t: &Tensor4<T>, dtype: DType) -> Self {
        let values = match dtype {
            DType::F64 => Values::F64(t.data().iter().map(|v| v.as_f64()).collect()),
            _ => Values::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
        };
        Self {
            name: name.into(),
            shape: t.shape(),
            values,
        }
    }

    pub fn labels(name: impl Into<String>, shape: Shape, labels: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            shape,
            values: Values::U8(labels),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor4<T>> {
        let data: Vec<T> = match &self.values {
            Values::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            Values::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
            Values::U8(_) => {
                return Err(Error::Format(format!(
                    "entry {} holds labels, not reals",
                    self.name
                )))
            }
        };
        Tensor4::from_vec(self.shape, data)
    }

    pub fn as_labels(&self) -> Result<&[u8]> {
        match &self.values {
            Values::U8(v) => Ok(v),
            _ => Err(Error::Format(format!("entry {} is not a label plane", self.name))),
        }
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let dtype = entries.first().map_or(DType::F32, |e| e.values.dtype());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dtype as u32).to_le_bytes());
    out.extend_from_slice(&u32::try_from(entries.len()).map_err(fmt_err)?.to_le_bytes());
    for e in entries {
        if e.values.dtype() != dtype {
            return Err(Error::Format(format!(
                "entry {} has element type {:?}, file holds {:?}",
                e.name,
                e.values.dtype(),
                dtype
            )));
        }
        if e.values.len() != e.shape.len() {
            return Err(Error::Format(format!(
                "entry {} has {} values for shape {}",
                e.name,
                e.values.len(),
                e.shape
            )));
        }
        let name = e.name.as_bytes();
        out.extend_from_slice(&u32::try_from(name.len()).map_err(fmt_err)?.to_le_bytes());
        out.extend_from_slice(name);
        for d in e.shape.0 {
            out.extend_from_slice(&u32::try_from(d).map_err(fmt_err)?.to_le_bytes());
        }
    }
    for e in entries {
        match &e.values {
            Values::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Values::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Values::U8(v) => out.extend_from_slice(v),
        }
    }
    Ok(out)
}

fn fmt_err(e: impl std::fmt::Display) -> Error {
    Error::Format(e.to_string())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated SUSN data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("missing SUSN magic".into()));
    }
    let dtype = DType::from_version(cur.u32()?)?;
    let count = cur.u32()? as usize;
    let mut headers = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(fmt_err)?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = cur.u32()? as usize;
        }
        headers.push((name, Shape(dims)));
    }
    let mut entries = Vec::with_capacity(headers.len());
    for (name, shape) in headers {
        let n = shape.len();
        let bytes = cur.take(n.checked_mul(dtype.width()).ok_or_else(|| fmt_err("size overflow"))?)?;
        let values = match dtype {
            DType::F32 => Values::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F64 => Values::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
            DType::U8 => Values::U8(bytes.to_vec()),
        };
        entries.push(Entry {
            name,
            shape,
            values,
        });
    }
    if cur.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after SUSN payload",
            buf.len() - cur.pos
        )));
    }
    Ok(entries)
}

pub fn save(path: impl AsRef<Path>, entries: &[Entry]) -> Result<()> {
    fs::write(path, encode(entries)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Entry>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor4::from_vec(Shape::new(1, 1, 1, 2), vec![1.0f32, -2.5]).unwrap();
        let bytes = encode(&[Entry::tensor("ab", &t, DType::F32)]).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"SUSN");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        for d in [1u32, 1, 1, 2] {
            want.extend_from_slice(&d.to_le_bytes());
        }
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor4::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let bytes = encode(&[Entry::tensor("x", &t, DType::F32)]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn mixed_types_rejected() {
        let t = Tensor4::<f32>::zeros(Shape::new(1, 1, 1, 1));
        let e = [
            Entry::tensor("x", &t, DType::F32),
            Entry::labels("m", Shape::new(1, 1, 1, 1), vec![3]),
        ];
        assert!(encode(&e).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(
            vals in proptest::collection::vec(-1e6f64..1e6, 1..40),
            name in "[a-zA-Z0-9_.]{0,24}",
            wide in any::<bool>(),
        ) {
            let t = Tensor4::from_vec(Shape::new(1, 1, 1, vals.len()), vals).unwrap();
            let dtype = if wide { DType::F64 } else { DType::F32 };
            let e = Entry::tensor(name, &t, dtype);
            let back = decode(&encode(std::slice::from_ref(&e)).unwrap()).unwrap();
            prop_assert_eq!(back, vec![e]);
        }
    }
}
