//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `GFCK`, version `u32`, role tag (4 bytes),
//! parameter count `u32`, then per parameter a `u16` name length, the UTF-8
//! name, rank `u8`, `u32` dims and `f32` values. Optional tagged sections
//! follow: `MOMS` (optimizer step `u64`, entry count `u32`, entries in the
//! parameter layout named `m.<param>` / `v.<param>`) and `CONF` (`u32`
//! length + UTF-8 key=value text).

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::optim::OptimizerState;
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GFCK";

/// Four-byte role marker, e.g. `TCHR` or `DIFU`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoleTag(pub [u8; 4]);

impl RoleTag {
    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).unwrap_or("????")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: RoleTag,
    pub params: ParameterSet<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub config: Option<String>,
}

fn write_entry<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> Result<()> {
    let nb = name.as_bytes();
    let len = u16::try_from(nb.len()).map_err(|_| TensorError::Format(format!("name too long: {name}")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(nb)?;
    let rank = u8::try_from(t.rank()).map_err(|_| TensorError::Format("rank > 255".into()))?;
    w.write_all(&[rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| TensorError::Format("dimension exceeds u32".into()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, ck: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&ck.role.0)?;
    w.write_all(&(ck.params.len() as u32).to_le_bytes())?;
    for (name, t) in ck.params.iter() {
        write_entry(w, name, t)?;
    }
    if let Some(opt) = &ck.optimizer {
        w.write_all(b"MOMS")?;
        w.write_all(&opt.step.to_le_bytes())?;
        w.write_all(&((opt.m.len() + opt.v.len()) as u32).to_le_bytes())?;
        for ((name, _), m) in ck.params.iter().zip(&opt.m) {
            write_entry(w, &format!("m.{name}"), m)?;
        }
        for ((name, _), v) in ck.params.iter().zip(&opt.v) {
            write_entry(w, &format!("v.{name}"), v)?;
        }
    }
    if let Some(cfg) = &ck.config {
        w.write_all(b"CONF")?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Format(format!(
                "truncated checkpoint: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn entry(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| TensorError::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::from_vec(&shape, data)?))
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(TensorError::Format("bad magic, expected GFCK".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let role = RoleTag(c.take(4)?.try_into().unwrap());
    let count = c.u32()? as usize;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let (name, t) = c.entry()?;
        params.insert(name, t)?;
    }
    let mut ck = Checkpoint {
        role,
        params,
        optimizer: None,
        config: None,
    };
    while c.pos < buf.len() {
        match c.take(4)? {
            b"MOMS" => {
                let step = c.u64()?;
                let n = c.u32()? as usize;
                if n != 2 * count {
                    return Err(TensorError::Format(format!(
                        "MOMS section has {n} entries for {count} parameters"
                    )));
                }
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for i in 0..n {
                    let (name, t) = c.entry()?;
                    let (prefix, dst) = if i < count { ("m.", &mut m) } else { ("v.", &mut v) };
                    let pname = ck.params.name_of(crate::params::ParamId(i % count));
                    if name != format!("{prefix}{pname}") {
                        return Err(TensorError::Format(format!("unexpected moment entry {name}")));
                    }
                    dst.push(t);
                }
                ck.optimizer = Some(OptimizerState { m, v, step });
            }
            b"CONF" => {
                let n = c.u32()? as usize;
                let text = std::str::from_utf8(c.take(n)?)
                    .map_err(|_| TensorError::Format("config section is not UTF-8".into()))?;
                ck.config = Some(text.to_string());
            }
            tag => {
                return Err(TensorError::Format(format!(
                    "unknown section {:?}",
                    String::from_utf8_lossy(tag)
                )))
            }
        }
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParameterSet::new();
        params
            .insert("a.w", Tensor::from_vec(&[2, 3], vec![1., -2., 3.5, 0., 1e-9, 7.]).unwrap())
            .unwrap();
        params.insert("a.b", Tensor::scalar(0.25)).unwrap();
        let mut opt = OptimizerState::new(&params);
        opt.step = 12;
        opt.m[0].data_mut()[4] = 0.5;
        Checkpoint {
            role: RoleTag(*b"DIFU"),
            params,
            optimizer: Some(opt),
            config: Some("model.width=64\n".into()),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ck).unwrap();
        let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn header_layout() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample()).unwrap();
        assert_eq!(&bytes[0..4], b"GFCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(&bytes[8..12], b"DIFU");
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        // first entry: name length, name, rank, dims
        assert_eq!(u16::from_le_bytes(bytes[16..18].try_into().unwrap()), 3);
        assert_eq!(&bytes[18..21], b"a.w");
        assert_eq!(bytes[21], 2);
    }

    #[test]
    fn corrupt_inputs_are_errors() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
        let short = &bytes[..bytes.len() - 3];
        assert!(read_checkpoint(&mut &short[..]).is_err());
    }
}
