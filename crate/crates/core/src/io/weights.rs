//! Binary weights file.
//!
//! Layout (little-endian): `b"IAVF"`, `u32` version, `u32` entry count, then
//! per entry a `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32`
//! dims and the `f32` payload.

use crate::error::{Error, Result};
use crate::params::Parameterized;

pub const MAGIC: &[u8; 4] = b"IAVF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

pub fn entries_of(params: &impl Parameterized) -> Vec<WeightEntry> {
    let mut out = Vec::new();
    params.visit("", &mut |name, dims, data| {
        out.push(WeightEntry {
            name,
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: data.iter().map(|&v| v as f32).collect(),
        })
    });
    out
}

pub fn encode_entries(entries: &[WeightEntry]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::format("weights", format!("name too long: {}", e.name)))?;
        let rank = u8::try_from(e.dims.len()).map_err(|_| Error::format("weights", format!("rank too high for {}", e.name)))?;
        let count: u64 = e.dims.iter().map(|&d| d as u64).product();
        if count != e.data.len() as u64 {
            return Err(Error::format(
                "weights",
                format!("{}: dims {:?} but {} values", e.name, e.dims, e.data.len()),
            ));
        }
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(rank);
        for d in &e.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn encode(params: &impl Parameterized) -> Result<Vec<u8>> {
    encode_entries(&entries_of(params))
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format("weights", format!("truncated while reading {what} at byte {}", self.at))
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<WeightEntry>> {
    let mut r = Reader { buf, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("weights", "bad magic, expected IAVF"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format("weights", format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format("weights", "entry name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")?;
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d as usize))
            .ok_or_else(|| Error::format("weights", format!("{name}: dims overflow")))?;
        let bytes = r.take(n.checked_mul(4).unwrap_or(usize::MAX), "payload")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(WeightEntry { name, dims, data });
    }
    if r.at != buf.len() {
        return Err(Error::format("weights", format!("{} trailing bytes", buf.len() - r.at)));
    }
    Ok(out)
}

/// Copies `entries` into `params`, requiring the same names, order and dims.
pub fn load_into(params: &mut impl Parameterized, entries: &[WeightEntry]) -> Result<()> {
    let expected = entries_of(params);
    if expected.len() != entries.len() {
        return Err(Error::format(
            "weights",
            format!("{} entries, model expects {}", entries.len(), expected.len()),
        ));
    }
    for (e, x) in entries.iter().zip(&expected) {
        if e.name != x.name || e.dims != x.dims {
            return Err(Error::format(
                "weights",
                format!("entry {} {:?} does not match expected {} {:?}", e.name, e.dims, x.name, x.dims),
            ));
        }
        if let Some(v) = e.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::format("weights", format!("{}: non-finite value {v}", e.name)));
        }
    }
    let mut i = 0;
    params.visit_mut("", &mut |_, d| {
        d.iter_mut().zip(&entries[i].data).for_each(|(a, b)| *a = *b as f64);
        i += 1;
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::KernelSet;

    #[test]
    fn byte_layout() {
        let k = KernelSet::new(1, 1, 1, vec![1.5], vec![-2.0]).unwrap();
        let b = encode(&k).unwrap();
        let mut expect = b"IAVF".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(6u16.to_le_bytes());
        expect.extend(b"weight");
        expect.push(4);
        for _ in 0..4 {
            expect.extend(1u32.to_le_bytes());
        }
        expect.extend(1.5f32.to_le_bytes());
        expect.extend(4u16.to_le_bytes());
        expect.extend(b"bias");
        expect.push(1);
        expect.extend(1u32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn round_trip_and_errors() {
        let k = KernelSet::new(2, 1, 3, (0..18).map(|i| i as f64 * 0.25).collect(), vec![0.5, -0.5]).unwrap();
        let b = encode(&k).unwrap();
        let mut z = k.zeros_like();
        load_into(&mut z, &decode(&b).unwrap()).unwrap();
        assert_eq!(z, k);
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut other = KernelSet::zeros(2, 1, 5);
        assert!(load_into(&mut other, &decode(&b).unwrap()).is_err());
    }
}
