//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `MGPT`, u32 version, u32 config length, config UTF-8, u32 record count,
//! then per record: u32 name length, name UTF-8, u8 dtype, u8 rank,
//! u32 dims × rank, raw element data.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{DType, Element, Tensor, MAX_RANK};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MGPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    /// Little-endian element bytes.
    pub data: Vec<u8>,
}

impl Record {
    pub fn from_tensor<T: Element>(name: &str, t: &Tensor<T>) -> Record {
        let mut data = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for v in t.data() {
            match T::DTYPE {
                DType::F32 => data.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes()),
                DType::F64 => data.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
        Record {
            name: name.to_string(),
            dtype: T::DTYPE,
            dims: t.shape().to_vec(),
            data,
        }
    }

    /// Decoded values, converted to `T` (exact when the dtypes agree).
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let values: Vec<T> = match self.dtype {
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => self
                .data
                .chunks_exact(8)
                .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect(),
        };
        Tensor::new(&self.dims, values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Config snapshot the artifact was trained under.
    pub config: String,
    pub records: Vec<Record>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(len, what)?.to_vec())
            .map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Checkpoint {
            config: config.into(),
            records: Vec::new(),
        }
    }

    pub fn push<T: Element>(&mut self, name: &str, t: &Tensor<T>) {
        self.records.push(Record::from_tensor(name, t));
    }

    pub fn with_tensors<T: Element>(config: impl Into<String>, named: &[(String, Tensor<T>)]) -> Self {
        let mut c = Checkpoint::new(config);
        for (n, t) in named {
            c.push(n, t);
        }
        c
    }

    pub fn tensors<T: Element>(&self) -> Result<Vec<(String, Tensor<T>)>> {
        self.records
            .iter()
            .map(|r| Ok((r.name.clone(), r.to_tensor()?)))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.config.len())?;
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.records.len())?;
        for r in &self.records {
            put_u32(&mut out, r.name.len())?;
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dtype.code());
            out.push(r.dims.len() as u8);
            for &d in &r.dims {
                put_u32(&mut out, d)?;
            }
            out.extend_from_slice(&r.data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").ok() != Some(&MAGIC[..]) {
            return Err(Error::Format("bad magic, not an MGPT checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION as usize {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads version {VERSION}"
            )));
        }
        let len = r.u32("config length")?;
        let config = r.string(len, "config")?;
        let count = r.u32("record count")?;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32("name length")?;
            let name = r.string(len, "record name")?;
            let code = r.u8("dtype")?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Format(format!("unknown dtype code {code} in {name}")))?;
            let rank = r.u8("rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::Format(format!("rank {rank} of {name} exceeds {MAX_RANK}")));
            }
            let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("size of {name} overflows")))?;
            let data = r.take(n, "tensor data")?.to_vec();
            records.push(Record {
                name,
                dtype,
                dims,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Checkpoint { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}
