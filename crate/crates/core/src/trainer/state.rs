//! Optimizer sidecar stored next to a checkpoint as `<checkpoint>.state`.
//!
//! Layout: magic `FATS`, version (u32), completed iterations (u64), pair
//! count (u32), then per encoder/decoder pair its step count (u64) followed
//! by one checkpoint-style record per first and second moment, named
//! `<donor>/m/<param>` and `<donor>/v/<param>`.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fatm::checkpoint::{write_record, Cursor};
use crate::fatm::FatmModel;
use crate::tensor::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const STATE_MAGIC: [u8; 4] = *b"FATS";
pub const STATE_VERSION: u32 = 1;

pub fn state_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".state");
    PathBuf::from(s)
}

fn pair_shapes(model: &FatmModel<f32>, donor: &str) -> Result<Vec<(String, Vec<usize>)>> {
    let enc = model.encoder();
    let dec = model.decoder(donor)?;
    let named = |prefix: &str, g: &crate::fatm::ParamGroup<f32>| -> Vec<(String, Vec<usize>)> {
        g.names().iter().zip(g.tensors()).map(|(n, t)| (format!("{prefix}.{n}"), t.shape().to_vec())).collect()
    };
    let mut v = named("encoder", enc);
    v.extend(named("decoder", dec));
    Ok(v)
}

pub fn save_state(path: &Path, iteration: u64, model: &FatmModel<f32>, optimizers: &[AdamState<f32>]) -> Result<()> {
    let donors: Vec<&str> = model.donor_ids().collect();
    if donors.len() != optimizers.len() {
        return Err(Error::Contract(format!("{} donors but {} optimizer states", donors.len(), optimizers.len())));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&STATE_MAGIC);
    buf.extend_from_slice(&STATE_VERSION.to_le_bytes());
    buf.extend_from_slice(&iteration.to_le_bytes());
    buf.extend_from_slice(&(donors.len() as u32).to_le_bytes());
    for (donor, opt) in donors.iter().zip(optimizers) {
        let shapes = pair_shapes(model, donor)?;
        if shapes.len() != opt.param_count() {
            return Err(Error::Contract(format!("optimizer for `{donor}` tracks {} tensors", opt.param_count())));
        }
        buf.extend_from_slice(&opt.step.to_le_bytes());
        for (kind, moments) in [("m", &opt.m), ("v", &opt.v)] {
            for ((name, shape), data) in shapes.iter().zip(moments) {
                let t = Tensor::new(shape, data.clone())?;
                write_record(&mut buf, &format!("{donor}/{kind}/{name}"), &t).map_err(|e| Error::io(path, e))?;
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads the sidecar for `model`, checking every name and shape.
pub fn load_state(path: &Path, model: &FatmModel<f32>, config: AdamConfig) -> Result<(u64, Vec<AdamState<f32>>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor::new(&bytes);
    if c.take(4, "magic")? != STATE_MAGIC {
        return Err(Error::CorruptHeader("optimizer state magic mismatch".into()));
    }
    let version = c.u32("version")?;
    if version != STATE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let iteration = c.u64("iteration")?;
    let pairs = c.u32("pair count")? as usize;
    let donors: Vec<&str> = model.donor_ids().collect();
    if pairs != donors.len() {
        return Err(Error::MalformedCheckpoint(format!("state has {pairs} pairs, model {} donors", donors.len())));
    }
    let mut out = Vec::with_capacity(pairs);
    for donor in donors {
        let shapes = pair_shapes(model, donor)?;
        let step = c.u64("step count")?;
        let mut moments = [Vec::new(), Vec::new()];
        for (k, kind) in ["m", "v"].iter().enumerate() {
            for (name, shape) in &shapes {
                let (got, t) = c.record()?;
                let want = format!("{donor}/{kind}/{name}");
                if got != want || t.shape() != shape.as_slice() {
                    return Err(Error::MalformedCheckpoint(format!(
                        "expected `{want}` {shape:?}, found `{got}` {:?}",
                        t.shape()
                    )));
                }
                moments[k].push(t.into_data());
            }
        }
        let [m, v] = moments;
        out.push(AdamState { config, step, m, v });
    }
    if !c.at_end() {
        return Err(Error::MalformedCheckpoint("trailing bytes after optimizer state".into()));
    }
    Ok((iteration, out))
}
