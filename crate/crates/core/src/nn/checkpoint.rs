//! Binary checkpoint: `SSLF` magic, u32 version, u32 tensor count, then per
//! tensor (u32 name length, name, u32 rank, u64 dims, f64 payload), then a
//! u64-length-prefixed UTF-8 JSON echo of the model config. Little-endian.

use std::fs;
use std::path::Path;

use super::model::{Dense, ModelConfig, ModelParams, ProjectionHead};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SSLF";
pub const VERSION: u32 = 1;

pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let tensors = params.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&params.config)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "tensor {name} holds non-finite values"
            )));
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let json_len = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after config".into()));
    }
    assemble(config, tensors)
}

fn assemble(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<ModelParams> {
    config.backbone.validate()?;
    // Shapes are checked against a freshly initialized model of the same config.
    let template = super::model::init_params(&config.backbone, config.head, 0)?;
    let expected = template.named_tensors();
    if expected.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    for ((want_name, want), (name, t)) in expected.iter().zip(&tensors) {
        if want_name != name || want.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {:?} does not match expected {want_name} {:?}",
                t.shape(),
                want.shape()
            )));
        }
    }
    let mut it = tensors.into_iter().map(|(_, t)| t);
    let mut pair = || Dense {
        weight: it.next().expect("checked count"),
        bias: it.next().expect("checked count"),
    };
    let convs = (0..template.convs.len()).map(|_| pair()).collect();
    let fc = pair();
    let layers = (0..template.head.layers.len()).map(|_| pair()).collect();
    Ok(ModelParams {
        head: ProjectionHead {
            kind: config.head,
            layers,
        },
        config,
        convs,
        fc,
    })
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{init_params, ConvNetConfig, HeadKind};

    #[test]
    fn roundtrip_and_header() {
        let p = init_params(&ConvNetConfig::default(), HeadKind::NonLinear, 4).unwrap();
        let bytes = to_bytes(&p).unwrap();
        assert_eq!(&bytes[..4], b"SSLF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(from_bytes(&bytes).unwrap(), p);
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let p = init_params(&ConvNetConfig::default(), HeadKind::Linear, 4).unwrap();
        let bytes = to_bytes(&p).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
