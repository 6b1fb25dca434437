//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "FATM"  u32 version  u32 donor_count
//! repeated until EOF:
//!     u32 name_len  name (UTF-8)  u32 rank  u32 dims[rank]  f32 data[prod(dims)]
//! ```
//!
//! Encoder tensors are named `encoder.<layer>.<kind>`, decoder tensors
//! `decoder.<donor>.<layer>.<kind>`. Donors appear in model order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DecoderParams, EncoderParams, FatmConfig, FatmModel, ParamGroup};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FATM";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: u32 = 8;
const MAX_NAME: u32 = 4096;

pub fn save_checkpoint(model: &FatmModel<f32>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(model, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<FatmModel<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

pub fn write_checkpoint(model: &FatmModel<f32>, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(model.decoders().len() as u32).to_le_bytes())?;
    write_group(w, "encoder", model.encoder())?;
    for (id, dec) in model.decoders() {
        write_group(w, &format!("decoder.{id}"), dec)?;
    }
    Ok(())
}

fn write_group(w: &mut impl Write, prefix: &str, group: &ParamGroup<f32>) -> std::io::Result<()> {
    for (name, t) in group.names().iter().zip(group.tensors()) {
        write_record(w, &format!("{prefix}.{name}"), t)?;
    }
    Ok(())
}

pub(crate) fn write_record(w: &mut impl Write, name: &str, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Little-endian cursor that reports running off the end as truncation.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32("record name length")?;
        if len == 0 || len > MAX_NAME {
            return Err(Error::MalformedCheckpoint(format!("record name length {len}")));
        }
        let name = std::str::from_utf8(self.take(len as usize, "record name")?)
            .map_err(|_| Error::MalformedCheckpoint("record name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32("tensor rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::MalformedCheckpoint(format!("`{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(self.u32("tensor dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("`{name}` has shape {shape:?}")))?;
        let bytes = self.take(n.checked_mul(4).unwrap_or(usize::MAX), &format!("data of `{name}`"))?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<FatmModel<f32>> {
    if bytes.len() < 4 {
        return Err(Error::CorruptHeader(format!("{} bytes is too short for a header", bytes.len())));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptHeader(format!("bad magic {:?}", &bytes[..4])));
    }
    let mut cur = Cursor::new(&bytes[4..]);
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let donor_count = cur.u32("donor count")? as usize;

    let mut encoder: Vec<(String, Tensor<f32>)> = Vec::new();
    let mut decoders: Vec<(String, Vec<(String, Tensor<f32>)>)> = Vec::new();
    while !cur.at_end() {
        let (name, t) = cur.record()?;
        if let Some(rest) = name.strip_prefix("encoder.") {
            encoder.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix("decoder.") {
            let mut parts = rest.rsplitn(3, '.');
            let (kind, layer, id) = (parts.next(), parts.next(), parts.next());
            let (Some(kind), Some(layer), Some(id)) = (kind, layer, id) else {
                return Err(Error::MalformedCheckpoint(format!("bad decoder tensor name `{name}`")));
            };
            let local = format!("{layer}.{kind}");
            match decoders.iter_mut().find(|(d, _)| d == id) {
                Some((_, recs)) => recs.push((local, t)),
                None => decoders.push((id.to_string(), vec![(local, t)])),
            }
        } else {
            return Err(Error::MalformedCheckpoint(format!("unexpected tensor `{name}`")));
        }
    }
    if decoders.len() != donor_count {
        return Err(Error::MalformedCheckpoint(format!(
            "header declares {donor_count} donors, found {}",
            decoders.len()
        )));
    }

    let config = infer_config(&encoder, decoders.first().map(|(_, r)| r.as_slice()))?;
    config.validate().map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    let encoder: EncoderParams<f32> = assemble(config.encoder_shapes(), encoder, "encoder")?;
    let decoders = decoders
        .into_iter()
        .map(|(id, recs)| {
            let g: DecoderParams<f32> = assemble(config.decoder_shapes(), recs, &format!("decoder {id}"))?;
            Ok((id, g))
        })
        .collect::<Result<Vec<_>>>()?;
    FatmModel::from_parts(config, encoder, decoders).map_err(|e| Error::MalformedCheckpoint(e.to_string()))
}

fn find<'a>(recs: &'a [(String, Tensor<f32>)], name: &str) -> Result<&'a [usize]> {
    recs.iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.shape())
        .ok_or_else(|| Error::MalformedCheckpoint(format!("missing tensor `{name}`")))
}

fn last_dim(recs: &[(String, Tensor<f32>)], name: &str) -> Result<usize> {
    Ok(*find(recs, name)?.last().unwrap())
}

fn infer_config(enc: &[(String, Tensor<f32>)], dec: Option<&[(String, Tensor<f32>)]>) -> Result<FatmConfig> {
    let dec = dec.ok_or_else(|| Error::MalformedCheckpoint("no decoders".into()))?;
    let mut encoder_channels = [0; 4];
    let mut decoder_channels = [0; 4];
    for i in 0..4 {
        encoder_channels[i] = last_dim(enc, &format!("conv{}.kernel", i + 1))?;
        let up = last_dim(dec, &format!("upscale{}.kernel", i + 1))?;
        if up % 4 != 0 {
            return Err(Error::MalformedCheckpoint(format!("upscale{} has {up} channels", i + 1)));
        }
        decoder_channels[i] = up / 4;
    }
    Ok(FatmConfig {
        encoder_channels,
        dense_units: last_dim(enc, "fc1.weight")?,
        decoder_channels,
    })
}

fn assemble(expected: Vec<(String, Vec<usize>)>, mut recs: Vec<(String, Tensor<f32>)>, what: &str) -> Result<ParamGroup<f32>> {
    if recs.len() != expected.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{what}: expected {} tensors, found {}",
            expected.len(),
            recs.len()
        )));
    }
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in expected {
        let i = recs
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("{what}: missing `{name}`")))?;
        let (_, t) = recs.swap_remove(i);
        if t.shape() != shape.as_slice() {
            return Err(Error::MalformedCheckpoint(format!(
                "{what}: `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        names.push(name);
        tensors.push(t);
    }
    Ok(ParamGroup::from_parts(names, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> FatmModel<f32> {
        FatmModel::new(FatmConfig::narrowed(32).unwrap(), &["zeta", "alpha.two"], 11).unwrap()
    }

    fn bytes(m: &FatmModel<f32>) -> Vec<u8> {
        let mut v = Vec::new();
        write_checkpoint(m, &mut v).unwrap();
        v
    }

    #[test]
    fn roundtrip_is_bit_exact_and_keeps_donor_order() {
        let m = model();
        let back = read_checkpoint(&bytes(&m)).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.donor_ids().collect::<Vec<_>>(), ["zeta", "alpha.two"]);
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn header_errors_are_distinct() {
        let good = bytes(&model());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad), Err(Error::CorruptHeader(_))));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(read_checkpoint(&v2), Err(Error::UnsupportedVersion(2))));
        assert!(matches!(read_checkpoint(&good[..good.len() - 3]), Err(Error::Truncated(_))));
        assert!(matches!(read_checkpoint(&good[..10]), Err(Error::Truncated(_))));
        let mut count = good;
        count[8] = 3;
        assert!(matches!(read_checkpoint(&count), Err(Error::MalformedCheckpoint(_))));
    }

    #[test]
    fn file_roundtrip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.fatm");
        save_checkpoint(&m, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), m);
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
