//! Binary checkpoint: versioned magic header, string metadata, named
//! parameters with shapes, and optional Adam state. All integers and values
//! are little-endian.
//!
//! ```text
//! "DEOECKPT" u32:version u8:dtype-bytes
//! u32:n_meta  { str:key str:value }*
//! u32:n_param { str:name u32:ndim u32:dim* value* }*
//! u8:has_adam [ u64:step f64:lr f64:beta1 f64:beta2 f64:eps { m* v* }* ]
//! str = u32:len utf8-bytes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DEOECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub meta: Vec<(String, String)>,
    pub params: ParamStore<F>,
    pub adam: Option<Adam<F>>,
}

impl<F: Real> Checkpoint<F> {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(F::BYTES as u8);
        put_u32(&mut out, self.meta.len());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.params.len());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                for x in [a.lr, a.beta1, a.beta2, a.eps] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                for (m, v) in a.m.iter().zip(&a.v) {
                    for &x in m.iter().chain(v) {
                        x.write_le(&mut out);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let width = r.take(1)?[0] as usize;
        if width != F::BYTES {
            return Err(NnError::Checkpoint(format!(
                "checkpoint holds {width}-byte values, expected {}",
                F::BYTES
            )));
        }
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            meta.push((r.string()?, r.string()?));
        }
        let n_param = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n_param {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.values::<F>(n)?;
            params.add(name, Tensor::new(&shape, data)?)?;
        }
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let mut hyper = [0.0; 4];
                for h in &mut hyper {
                    *h = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                }
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for t in params.tensors() {
                    m.push(r.values::<F>(t.numel())?);
                    v.push(r.values::<F>(t.numel())?);
                }
                Some(Adam {
                    lr: hyper[0],
                    beta1: hyper[1],
                    beta2: hyper[2],
                    eps: hyper[3],
                    step,
                    m,
                    v,
                })
            }
            other => return Err(NnError::Checkpoint(format!("bad adam flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(NnError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| NnError::Checkpoint(format!("invalid utf-8 before byte {}", self.pos)))
    }

    fn values<F: Real>(&mut self, n: usize) -> Result<Vec<F>> {
        let raw = self.take(n * F::BYTES)?;
        Ok(raw.chunks_exact(F::BYTES).map(F::read_le).collect())
    }
}
