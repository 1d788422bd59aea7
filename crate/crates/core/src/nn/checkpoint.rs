//! The "NDCK" parameter checkpoint file.
//!
//! Layout (little-endian): magic `NDCK`, `u16` version, `u8` architecture
//! tag, `u32` length plus UTF-8 JSON model configuration, `u32` parameter
//! count, then per parameter: `u16` name length, name, `u8` role tag, `u8`
//! trainable flag, `u8` rank, `u32` dims, `f32` values. An optional
//! optimizer section follows: `u8` presence flag, `u64` step, and the first
//! and second moment tensors in parameter order.

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamRole, ParameterStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NDCK";
pub const VERSION: u16 = 1;

/// Adam moment estimates, one tensor per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub arch_tag: u8,
    pub config_json: String,
    pub params: ParameterStore<f32>,
    pub optimizer: Option<OptimizerState>,
}

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_values(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u16(&mut buf, VERSION);
        buf.push(self.arch_tag);
        put_u32(&mut buf, self.config_json.len() as u32);
        buf.extend_from_slice(self.config_json.as_bytes());
        put_u32(&mut buf, self.params.len() as u32);
        for (_, p) in self.params.iter() {
            put_u16(&mut buf, p.name.len() as u16);
            buf.extend_from_slice(p.name.as_bytes());
            buf.push(p.role.tag());
            buf.push(p.trainable as u8);
            buf.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                put_u32(&mut buf, d as u32);
            }
            put_values(&mut buf, &p.value);
        }
        match &self.optimizer {
            None => buf.push(0),
            Some(opt) => {
                buf.push(1);
                buf.extend_from_slice(&opt.step.to_le_bytes());
                for t in opt.m.iter().chain(&opt.v) {
                    put_values(&mut buf, t);
                }
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(Error::format(origin, "not an NDCK checkpoint"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let arch_tag = r.u8()?;
        let len = r.u32()? as usize;
        let config_json = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format(origin, "config is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut params = ParameterStore::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::format(origin, "parameter name is not UTF-8"))?;
            let role = ParamRole::from_tag(r.u8()?)
                .ok_or_else(|| Error::format(origin, format!("bad role tag for {name}")))?;
            let trainable = r.u8()? != 0;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let value = r.tensor(&shape)?;
            if params.by_name(&name).is_some() {
                return Err(Error::format(origin, format!("duplicate parameter {name}")));
            }
            let id = params.add(name, role, value);
            params.get_mut(id).trainable = trainable;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let shapes: Vec<Vec<usize>> = params.iter().map(|(_, p)| p.value.shape().to_vec()).collect();
                let m = shapes.iter().map(|s| r.tensor(s)).collect::<Result<Vec<_>>>()?;
                let v = shapes.iter().map(|s| r.tensor(s)).collect::<Result<Vec<_>>>()?;
                Some(OptimizerState { step, m, v })
            }
            f => return Err(Error::format(origin, format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            arch_tag,
            config_json,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::new(shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParameterStore::new();
        params.add("a.weight", ParamRole::Weight, Tensor::new(&[2, 1, 1, 1], vec![0.5, -1.25]));
        let id = params.add("a.bias", ParamRole::Bias, Tensor::new(&[2], vec![0.0, 3.0]));
        params.get_mut(id).trainable = false;
        params.add("bn.running_var", ParamRole::RunningVar, Tensor::new(&[1], vec![1.0]));
        Checkpoint {
            arch_tag: 3,
            config_json: "{\"k\":1}".into(),
            optimizer: Some(OptimizerState {
                step: 7,
                m: params.iter().map(|(_, p)| p.value.map(|v| v * 0.1)).collect(),
                v: params.iter().map(|(_, p)| p.value.map(|v| v * v)).collect(),
            }),
            params,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back.arch_tag, 3);
        assert_eq!(back.config_json, ck.config_json);
        assert_eq!(back.optimizer, ck.optimizer);
        for ((_, a), (_, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.role, b.role);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, Path::new("x")), Err(Error::Format { .. })));
    }
}
