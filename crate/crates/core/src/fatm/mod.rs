//! The facial attribute transfer model: one shared encoder and one decoder
//! per donor identity.
//!
//! Encoder: four 5x5/stride-2 convolutions (128, 256, 512, 1024 kernels) with
//! leaky-ReLU, then dense 16384 -> 1024 (leaky-ReLU) and 1024 -> 16384. The
//! 16384-vector is the code. Decoder: the code viewed as 4x4x1024, four
//! upscale blocks (3x3 convolution to 4C channels, leaky-ReLU, 2x pixel
//! shuffle) with C = 512, 256, 128, 64, then a 5x5 convolution to RGB and a
//! sigmoid.

pub(crate) mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Side of the square network input and output.
pub const FACE_SIZE: usize = 64;
pub const CODE_LEN: usize = 16384;
/// Trainable values in the full-width encoder.
pub const ENCODER_PARAM_COUNT: usize = 50_786_560;
/// Trainable values in one full-width decoder.
pub const DECODER_PARAM_COUNT: usize = 25_076_163;

const ENCODER_KERNEL: usize = 5;
const UPSCALE_KERNEL: usize = 3;
const OUTPUT_KERNEL: usize = 5;

/// Layer widths. [`FatmConfig::full`] is the reference architecture; the
/// narrower variants keep the same topology and spatial chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FatmConfig {
    pub encoder_channels: [usize; 4],
    pub dense_units: usize,
    pub decoder_channels: [usize; 4],
}

impl Default for FatmConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl FatmConfig {
    pub const fn full() -> Self {
        FatmConfig {
            encoder_channels: [128, 256, 512, 1024],
            dense_units: 1024,
            decoder_channels: [512, 256, 128, 64],
        }
    }

    /// Every width divided by `divisor`.
    pub fn narrowed(divisor: usize) -> Result<Self> {
        let full = Self::full();
        if divisor == 0 || full.decoder_channels[3] % divisor != 0 {
            return Err(Error::InvalidConfig(format!(
                "width divisor must be a power of two up to 64, got {divisor}"
            )));
        }
        Ok(FatmConfig {
            encoder_channels: full.encoder_channels.map(|c| c / divisor),
            dense_units: full.dense_units / divisor,
            decoder_channels: full.decoder_channels.map(|c| c / divisor),
        })
    }

    /// Side of the code grid fed to the decoder.
    pub const fn code_grid(&self) -> usize {
        FACE_SIZE / 16
    }

    pub const fn code_len(&self) -> usize {
        self.code_grid() * self.code_grid() * self.encoder_channels[3]
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.encoder_channels.iter().chain(&self.decoder_channels).chain([&self.dense_units]);
        if all.into_iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig(format!("zero-width layer in {self:?}")));
        }
        Ok(())
    }

    fn encoder_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            out.push((format!("conv{}.kernel", i + 1), vec![ENCODER_KERNEL, ENCODER_KERNEL, cin, c]));
            out.push((format!("conv{}.bias", i + 1), vec![c]));
            cin = c;
        }
        out.push(("fc1.weight".into(), vec![self.code_len(), self.dense_units]));
        out.push(("fc1.bias".into(), vec![self.dense_units]));
        out.push(("fc2.weight".into(), vec![self.dense_units, self.code_len()]));
        out.push(("fc2.bias".into(), vec![self.code_len()]));
        out
    }

    fn decoder_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.encoder_channels[3];
        for (i, &c) in self.decoder_channels.iter().enumerate() {
            out.push((format!("upscale{}.kernel", i + 1), vec![UPSCALE_KERNEL, UPSCALE_KERNEL, cin, 4 * c]));
            out.push((format!("upscale{}.bias", i + 1), vec![4 * c]));
            cin = c;
        }
        out.push(("output.kernel".into(), vec![OUTPUT_KERNEL, OUTPUT_KERNEL, cin, 3]));
        out.push(("output.bias".into(), vec![3]));
        out
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn decoder_param_count(&self) -> usize {
        self.decoder_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Parameters held in a fixed order; the tensor names are checkpoint keys.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamGroup<T> {
    fn init(shapes: Vec<(String, Vec<usize>)>, seed: u64, scope: &str) -> Self {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in shapes {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                // He-uniform over the fan-in (all dims but the last).
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut r = rng::stream(seed, &[rng::name_key(scope), rng::name_key(&name)]);
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| T::lit(r.gen_range(-bound..bound))).collect();
                Tensor::new(&shape, data).expect("shape from config")
            };
            names.push(name);
            tensors.push(t.with_grad());
        }
        ParamGroup { names, tensors }
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        ParamGroup {
            names,
            tensors: tensors.into_iter().map(Tensor::with_grad).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors.iter_mut().collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for t in &self.tensors {
            for v in t.data() {
                let bits = v.to_f64().unwrap().to_bits();
                h = (h ^ bits).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Var,
    /// Parameter leaves, in [`ParamGroup`] order.
    pub params: Vec<Var>,
    /// Activations after each stage.
    pub stages: Vec<Var>,
}

pub type EncoderParams<T> = ParamGroup<T>;
pub type DecoderParams<T> = ParamGroup<T>;

pub(crate) fn encoder_forward<'a, T: Scalar>(enc: &'a EncoderParams<T>, tape: &mut Tape<'a, T>, x: Var) -> Result<Forward> {
    let p = enc.bind(tape);
    let mut stages = Vec::new();
    let mut h = x;
    for i in 0..4 {
        h = tape.conv2d(h, p[2 * i], p[2 * i + 1], 2, 2)?;
        h = tape.leaky_relu(h);
        stages.push(h);
    }
    let batch = batch_of(tape.shape(x));
    let flat = tape.value(h).len() / batch;
    h = tape.reshape(h, &[batch, flat])?;
    h = tape.fully_connected(h, p[8], p[9])?;
    h = tape.leaky_relu(h);
    stages.push(h);
    h = tape.fully_connected(h, p[10], p[11])?;
    stages.push(h);
    Ok(Forward { output: h, params: p, stages })
}

pub(crate) fn decoder_forward<'a, T: Scalar>(
    dec: &'a DecoderParams<T>,
    config: &FatmConfig,
    tape: &mut Tape<'a, T>,
    code: Var,
) -> Result<Forward> {
    let p = dec.bind(tape);
    let batch = batch_of(tape.shape(code));
    let g = config.code_grid();
    let mut h = tape.reshape(code, &[batch, g, g, config.encoder_channels[3]])?;
    let mut stages = vec![h];
    for i in 0..4 {
        h = tape.conv2d(h, p[2 * i], p[2 * i + 1], 1, 1)?;
        h = tape.leaky_relu(h);
        h = tape.pixel_shuffle(h)?;
        stages.push(h);
    }
    h = tape.conv2d(h, p[8], p[9], 1, 2)?;
    h = tape.sigmoid(h);
    stages.push(h);
    Ok(Forward { output: h, params: p, stages })
}

fn batch_of(shape: &[usize]) -> usize {
    match shape.len() {
        4 => shape[0],
        2 => shape[0],
        _ => 1,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FatmModel<T> {
    config: FatmConfig,
    encoder: EncoderParams<T>,
    decoders: Vec<(String, DecoderParams<T>)>,
}

impl<T: Scalar> FatmModel<T> {
    /// Freshly initialized model with one decoder per donor id.
    pub fn new(config: FatmConfig, donor_ids: &[&str], seed: u64) -> Result<Self> {
        config.validate()?;
        check_donor_ids(donor_ids.iter().copied())?;
        let encoder = ParamGroup::init(config.encoder_shapes(), seed, "encoder");
        let decoders = donor_ids
            .iter()
            .map(|id| (id.to_string(), ParamGroup::init(config.decoder_shapes(), seed, &format!("decoder.{id}"))))
            .collect();
        Ok(FatmModel {
            config,
            encoder,
            decoders,
        })
    }

    pub(crate) fn from_parts(config: FatmConfig, encoder: EncoderParams<T>, decoders: Vec<(String, DecoderParams<T>)>) -> Result<Self> {
        check_donor_ids(decoders.iter().map(|(id, _)| id.as_str()))?;
        Ok(FatmModel {
            config,
            encoder,
            decoders,
        })
    }

    pub fn config(&self) -> &FatmConfig {
        &self.config
    }

    pub fn encoder(&self) -> &EncoderParams<T> {
        &self.encoder
    }

    pub fn donor_ids(&self) -> impl Iterator<Item = &str> {
        self.decoders.iter().map(|(id, _)| id.as_str())
    }

    pub fn has_donor(&self, id: &str) -> bool {
        self.decoders.iter().any(|(d, _)| d == id)
    }

    pub fn decoder(&self, id: &str) -> Result<&DecoderParams<T>> {
        self.decoders
            .iter()
            .find(|(d, _)| d == id)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::MissingDonor(id.to_string()))
    }

    pub(crate) fn decoders(&self) -> &[(String, DecoderParams<T>)] {
        &self.decoders
    }

    /// Mutable access to the encoder and one decoder at once.
    pub fn encoder_and_decoder_mut(&mut self, id: &str) -> Result<(&mut EncoderParams<T>, &mut DecoderParams<T>)> {
        let dec = self
            .decoders
            .iter_mut()
            .find(|(d, _)| d == id)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::MissingDonor(id.to_string()))?;
        Ok((&mut self.encoder, dec))
    }

    fn check_faces(&self, shape: &[usize]) -> Result<()> {
        let ok = matches!(shape, [FACE_SIZE, FACE_SIZE, 3] | [_, FACE_SIZE, FACE_SIZE, 3]);
        if !ok {
            return Err(Error::InvalidShape(format!(
                "expected [{FACE_SIZE}, {FACE_SIZE}, 3] faces (optionally batched), got {shape:?}"
            )));
        }
        Ok(())
    }

    /// `[64, 64, 3] -> [16384]`, or batched `[N, 64, 64, 3] -> [N, 16384]`.
    pub fn encode(&self, face: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.encode_traced(face)?.0)
    }

    /// Code plus the shape after every encoder stage.
    pub fn encode_traced(&self, face: &Tensor<T>) -> Result<(Tensor<T>, Vec<Vec<usize>>)> {
        self.check_faces(face.shape())?;
        let mut tape = Tape::new();
        let x = tape.leaf(face);
        let fwd = encoder_forward(&self.encoder, &mut tape, x)?;
        let shapes = fwd.stages.iter().map(|&v| strip_unit_batch(tape.shape(v), face.shape().len() == 3)).collect();
        let code = tape.to_tensor(fwd.output);
        let code = if face.shape().len() == 3 { code.reshape(&[self.config.code_len()])? } else { code };
        Ok((code, shapes))
    }

    /// `[16384] -> [64, 64, 3]`, or batched `[N, 16384] -> [N, 64, 64, 3]`.
    pub fn decode(&self, code: &Tensor<T>, donor_id: &str) -> Result<Tensor<T>> {
        Ok(self.decode_traced(code, donor_id)?.0)
    }

    pub fn decode_traced(&self, code: &Tensor<T>, donor_id: &str) -> Result<(Tensor<T>, Vec<Vec<usize>>)> {
        let dec = self.decoder(donor_id)?;
        let single = code.shape().len() == 1;
        let ok = match *code.shape() {
            [n] => n == self.config.code_len(),
            [_, n] => n == self.config.code_len(),
            _ => false,
        };
        if !ok {
            return Err(Error::InvalidShape(format!(
                "expected code of length {}, got {:?}",
                self.config.code_len(),
                code.shape()
            )));
        }
        let mut tape = Tape::new();
        let c = tape.leaf(code);
        let fwd = decoder_forward(dec, &self.config, &mut tape, c)?;
        let shapes = fwd.stages.iter().map(|&v| strip_unit_batch(tape.shape(v), single)).collect();
        let out = tape.to_tensor(fwd.output);
        let out = if single { out.reshape(&[FACE_SIZE, FACE_SIZE, 3])? } else { out };
        Ok((out, shapes))
    }

    /// Mean L1 between `target` and the reconstruction of `input` through the
    /// encoder and decoder `donor_id`. Adds the gradients of both parameter
    /// groups into their buffers and returns the loss.
    pub fn accumulate_reconstruction_grads(&mut self, input: &Tensor<T>, target: &Tensor<T>, donor_id: &str) -> Result<T> {
        self.check_faces(input.shape())?;
        if input.shape() != target.shape() {
            return Err(Error::InvalidShape(format!(
                "input {:?} and target {:?} differ",
                input.shape(),
                target.shape()
            )));
        }
        let di = self
            .decoders
            .iter()
            .position(|(d, _)| d == donor_id)
            .ok_or_else(|| Error::MissingDonor(donor_id.to_string()))?;
        let (loss, grads, enc_vars, dec_vars) = {
            let mut tape = Tape::new();
            let x = tape.leaf(input);
            let y = tape.leaf(target);
            let e = encoder_forward(&self.encoder, &mut tape, x)?;
            let d = decoder_forward(&self.decoders[di].1, &self.config, &mut tape, e.output)?;
            let pred = tape.reshape(d.output, target.shape())?;
            let loss = tape.l1_loss(pred, y)?;
            let grads = tape.backward(loss)?;
            (tape.value(loss)[0], grads, e.params, d.params)
        };
        for (v, t) in enc_vars.iter().zip(self.encoder.tensors.iter_mut()) {
            grads.accumulate_into(*v, t)?;
        }
        for (v, t) in dec_vars.iter().zip(self.decoders[di].1.tensors.iter_mut()) {
            grads.accumulate_into(*v, t)?;
        }
        Ok(loss)
    }

    /// Encode with the shared encoder, decode as `donor_id`.
    pub fn transfer(&self, face: &Tensor<T>, donor_id: &str) -> Result<Tensor<T>> {
        self.decoder(donor_id)?;
        let code = self.encode(face)?;
        self.decode(&code, donor_id)
    }
}

fn strip_unit_batch(shape: &[usize], single: bool) -> Vec<usize> {
    if single && shape.len() > 1 && shape[0] == 1 {
        shape[1..].to_vec()
    } else {
        shape.to_vec()
    }
}

fn check_donor_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen: Vec<&str> = Vec::new();
    for id in ids {
        if id.is_empty() {
            return Err(Error::InvalidConfig("empty donor id".into()));
        }
        if seen.contains(&id) {
            return Err(Error::InvalidConfig(format!("duplicate donor id `{id}`")));
        }
        seen.push(id);
    }
    if seen.is_empty() {
        return Err(Error::InvalidConfig("model needs at least one decoder".into()));
    }
    Ok(())
}
