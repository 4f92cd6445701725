//! Binary checkpoint layout (little endian):
//!
//! ```text
//! magic    8 bytes  "PRODERCK"
//! version  u32
//! input    u32
//! hidden   u32
//! classes  u32
//! dropout  f64
//! 8 × { len u64, len × f32 }   parameters in BiGruClassifier::params order
//! ```

use std::io::{Read, Write};

use super::{BiGruClassifier, GruParams, Mode};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PRODERCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<W: Write>(model: &BiGruClassifier<f32>, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + 4 * model.parameter_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [model.input_size, model.hidden, model.classes] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&model.dropout_p.to_le_bytes());
    for p in model.params() {
        buf.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for x in p {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, expected: usize) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(Error::Checkpoint(format!("parameter length {n}, expected {expected}")));
        }
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<BiGruClassifier<f32>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut rd = Reader { buf, pos: 0 };
    if rd.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = rd.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let input = rd.u32()? as usize;
    let hidden = rd.u32()? as usize;
    let classes = rd.u32()? as usize;
    let dropout_p = f64::from_le_bytes(rd.take(8)?.try_into().unwrap());
    let g3 = 3 * hidden;
    let mut gru = || -> Result<GruParams<f32>> {
        Ok(GruParams {
            w_input: rd.f32s(input * g3)?,
            w_hidden: rd.f32s(hidden * g3)?,
            bias: rd.f32s(g3)?,
        })
    };
    let fwd = gru()?;
    let bwd = gru()?;
    let head_w = rd.f32s(classes * 2 * hidden)?;
    let head_b = rd.f32s(classes)?;
    if rd.pos != rd.buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(BiGruClassifier {
        input_size: input,
        hidden,
        dropout_p,
        fwd,
        bwd,
        head_w,
        head_b,
        classes,
        mode: Mode::Eval,
        head_locked: false,
    })
}
