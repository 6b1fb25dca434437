//! Central finite differences against the tape, in f64.

use deid_core::fatm::{FatmConfig, FatmModel};
use deid_core::rng::{self, Rng};
use deid_core::tensor::ops::{conv2d, leaky_relu};
use deid_core::tensor::{Tape, Tensor, Var};
use rand::Rng as _;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// The whole network has thousands of leaky-ReLU kinks within reach of a
/// 1e-3 probe, so the end-to-end check uses a finer step. Even then about a
/// quarter of sampled coordinates sit within a step of some kink.
pub const MODEL_STEP: f64 = 1e-4;
pub const MODEL_MAX_SKIPS: f64 = 0.4;
const SAMPLES_PER_TENSOR: usize = 6;

#[derive(Clone, Copy, Debug, Default)]
pub struct Report {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose one-sided slopes disagree, i.e. a kink lies within
    /// one step; the derivative is undefined there.
    pub skipped: usize,
}

impl Report {
    pub fn merge(&mut self, o: Report) {
        self.max_rel = self.max_rel.max(o.max_rel);
        self.checked += o.checked;
        self.skipped += o.skipped;
    }

    pub fn ok(&self) -> bool {
        self.ok_with_skips(0.1)
    }

    pub fn ok_with_skips(&self, max_fraction: f64) -> bool {
        let total = (self.checked + self.skipped) as f64;
        self.max_rel < TOLERANCE && self.checked > 0 && self.skipped as f64 <= max_fraction * total
    }
}

pub fn random(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng::uniform(r, lo, hi)).collect()).unwrap()
}

/// Values in `[-hi, -lo] ∪ [lo, hi]`.
pub fn away_from_zero(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut t = random(r, shape, lo, hi);
    for v in t.data_mut() {
        if r.gen::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Central difference at `step`, or `None` when the estimates at `step` and
/// `step / 2` disagree beyond what smooth curvature allows: a kink lies
/// within the probe interval.
fn central(step: f64, fp: f64, fm: f64, fp2: f64, fm2: f64) -> Option<f64> {
    let d1 = (fp - fm) / (2.0 * step);
    let d2 = (fp2 - fm2) / step;
    if (d1 - d2).abs() > 2e-5 * d1.abs().max(d2.abs()) + 1e-11 {
        return None;
    }
    Some(d1)
}

fn relative(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

type Graph<'f> = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Var + 'f;

fn eval(inputs: &[Tensor<f64>], graph: &Graph) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = graph(&mut tape, &vars);
    tape.value(loss)[0]
}

/// Compares analytic and numeric gradients of a scalar graph with respect to
/// every input. `samples` limits the coordinates tested per input.
pub fn check(inputs: &[Tensor<f64>], graph: &Graph, samples: Option<usize>, r: &mut Rng) -> Report {
    let inputs: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = graph(&mut tape, &vars);
        let g = tape.backward(loss).unwrap();
        vars.iter().map(|&v| g.get(v).unwrap().to_vec()).collect()
    };
    let mut rep = Report::default();
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let coords: Vec<usize> = match samples {
            Some(k) if k < n => (0..k).map(|_| r.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let mut probe = inputs.clone();
            let x = probe[i].data()[j];
            let mut at = |d: f64| {
                probe[i].data_mut()[j] = x + d;
                eval(&probe, graph)
            };
            let (fp, fm, fp2, fm2) = (at(STEP), at(-STEP), at(STEP / 2.0), at(-STEP / 2.0));
            match central(STEP, fp, fm, fp2, fm2) {
                Some(n) => {
                    rep.max_rel = rep.max_rel.max(relative(analytic[i][j], n));
                    rep.checked += 1;
                }
                None => rep.skipped += 1,
            }
        }
    }
    rep
}

/// Wraps `forward` in an L1 loss against a target pushed well away from the
/// unperturbed output, so the loss is smooth in the neighbourhood and weights
/// outputs by random signs. The target is frozen before any probing.
fn with_l1_head<'f>(
    inputs: &[Tensor<f64>],
    forward: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Var + 'f,
    seed: u64,
) -> Box<Graph<'f>> {
    let (shape, values) = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = forward(&mut tape, &vars);
        (tape.shape(out).to_vec(), tape.value(out).to_vec())
    };
    let mut r = rng::stream(seed, &[0xface]);
    let data: Vec<f64> = values
        .iter()
        .map(|&v| {
            let off = rng::uniform(&mut r, 0.3, 1.0);
            if r.gen::<bool>() { v + off } else { v - off }
        })
        .collect();
    let target = Tensor::new(&shape, data).unwrap();
    Box::new(move |t: &mut Tape<'_, f64>, v: &[Var]| {
        let out = forward(t, v);
        let y = t.leaf_owned(target.clone(), false);
        t.l1_loss(out, y).unwrap()
    })
}

/// One named check per op (plus composed graphs) for a single seed.
pub fn op_suite(seed: u64) -> Vec<(&'static str, Report)> {
    let mut r = rng::stream(seed, &[0x67c4]);
    let mut out = Vec::new();

    let x = random(&mut r, &[2, 5, 6, 3], -1.0, 1.0);
    let k = random(&mut r, &[3, 3, 3, 4], -0.5, 0.5);
    let b = random(&mut r, &[4], -0.5, 0.5);
    let ins = [x, k, b];
    let g = with_l1_head(&ins, |t, v| t.conv2d(v[0], v[1], v[2], 1, 1).unwrap(), seed);
    out.push(("conv2d 3x3/1", check(&ins, &*g, None, &mut r)));

    let x = random(&mut r, &[8, 8, 2], -1.0, 1.0);
    let k = random(&mut r, &[5, 5, 2, 3], -0.5, 0.5);
    let b = random(&mut r, &[3], -0.5, 0.5);
    let ins = [x, k, b];
    let g = with_l1_head(&ins, |t, v| t.conv2d(v[0], v[1], v[2], 2, 2).unwrap(), seed);
    out.push(("conv2d 5x5/2", check(&ins, &*g, None, &mut r)));

    let x = random(&mut r, &[3, 7], -1.0, 1.0);
    let w = random(&mut r, &[7, 5], -0.5, 0.5);
    let b = random(&mut r, &[5], -0.5, 0.5);
    let ins = [x, w, b];
    let g = with_l1_head(&ins, |t, v| t.fully_connected(v[0], v[1], v[2]).unwrap(), seed);
    out.push(("fully_connected", check(&ins, &*g, None, &mut r)));

    let x = away_from_zero(&mut r, &[4, 4, 3], 0.05, 2.0);
    let ins = [x];
    let g = with_l1_head(&ins, |t, v| t.leaky_relu(v[0]), seed);
    out.push(("leaky_relu", check(&ins, &*g, None, &mut r)));

    let x = random(&mut r, &[4, 4, 3], -4.0, 4.0);
    let ins = [x];
    let g = with_l1_head(&ins, |t, v| t.sigmoid(v[0]), seed);
    out.push(("sigmoid", check(&ins, &*g, None, &mut r)));

    let x = random(&mut r, &[2, 3, 3, 8], -1.0, 1.0);
    let ins = [x];
    let g = with_l1_head(&ins, |t, v| t.pixel_shuffle(v[0]).unwrap(), seed);
    out.push(("pixel_shuffle", check(&ins, &*g, None, &mut r)));

    let x = random(&mut r, &[2, 3, 4], -1.0, 1.0);
    let ins = [x];
    let g = with_l1_head(&ins, |t, v| t.reshape(v[0], &[6, 4]).unwrap(), seed);
    out.push(("reshape", check(&ins, &*g, None, &mut r)));

    let p = random(&mut r, &[5, 3], -1.0, 1.0);
    let mut q = away_from_zero(&mut r, &[5, 3], 0.05, 1.0);
    q.data_mut().iter_mut().zip(p.data()).for_each(|(d, &pv)| *d += pv);
    let g = |t: &mut Tape<'_, f64>, v: &[Var]| t.l1_loss(v[0], v[1]).unwrap();
    out.push(("l1_loss", check(&[p, q], &g, None, &mut r)));

    let x = random(&mut r, &[3, 4], -1.0, 1.0);
    let g = |t: &mut Tape<'_, f64>, v: &[Var]| t.sum(v[0]);
    out.push(("sum", check(&[x], &g, None, &mut r)));

    // conv -> leaky -> l1 against a fixed target, resampled until no
    // pre-activation or residual lies within reach of a probe step
    let (x, k, b, y) = loop {
        let x = random(&mut r, &[6, 6, 2], 0.0, 1.0);
        let k = random(&mut r, &[3, 3, 2, 3], -0.5, 0.5);
        let b = random(&mut r, &[3], -0.2, 0.2);
        let y = random(&mut r, &[6, 6, 3], -0.5, 0.5);
        let pre = conv2d(&x, &k, &b, 1, 1).unwrap();
        let act = leaky_relu(&pre);
        let margin = 4.0 * STEP;
        let clear = pre.data().iter().all(|v| v.abs() > margin)
            && act.data().iter().zip(y.data()).all(|(a, t)| (a - t).abs() > margin);
        if clear {
            break (x, k, b, y);
        }
    };
    let g = |t: &mut Tape<'_, f64>, v: &[Var]| {
        let h = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
        let h = t.leaky_relu(h);
        t.l1_loss(h, v[3]).unwrap()
    };
    out.push(("conv-leaky-l1", check(&[x, k, b, y], &g, None, &mut r)));

    out.push(("fatm reconstruction", model_check(seed, &mut r)));
    out
}

/// Reconstruction loss of a narrow model, sampled over every parameter
/// tensor and probed with [`MODEL_STEP`]. Error is norm-wise per tensor:
/// many individual gradients sit near the f64 difference noise floor.
pub fn model_check(seed: u64, r: &mut Rng) -> Report {
    let model = FatmModel::<f64>::new(FatmConfig::narrowed(64).unwrap(), &["d"], seed).unwrap();
    let face = random(r, &[64, 64, 3], 0.0, 1.0);
    // outside the sigmoid range, so no residual changes sign
    let target: Vec<f64> = (0..64 * 64 * 3)
        .map(|_| if r.gen::<bool>() { rng::uniform(r, 1.0, 1.5) } else { rng::uniform(r, -0.5, 0.0) })
        .collect();
    let target = Tensor::new(&[64, 64, 3], target).unwrap();

    let mut analytic = model.clone();
    analytic.accumulate_reconstruction_grads(&face, &target, "d").unwrap();
    let loss = |m: &FatmModel<f64>| {
        let out = m.transfer(&face, "d").unwrap();
        out.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / out.len() as f64
    };
    let groups = |m: &FatmModel<f64>| -> Vec<Tensor<f64>> {
        let mut v = m.encoder().tensors().to_vec();
        v.extend_from_slice(m.decoder("d").unwrap().tensors());
        v
    };
    let grads = groups(&analytic);
    let params = groups(&model);
    let mut rep = Report::default();
    for (ti, t) in params.iter().enumerate() {
        let (mut diff, mut norm) = (0.0, 0.0);
        for _ in 0..SAMPLES_PER_TENSOR {
            let j = r.gen_range(0..t.len());
            let perturbed = |delta: f64| {
                let mut m = model.clone();
                set_param(&mut m, ti, j, t.data()[j] + delta);
                loss(&m)
            };
            let h = MODEL_STEP;
            match central(h, perturbed(h), perturbed(-h), perturbed(h / 2.0), perturbed(-h / 2.0)) {
                Some(n) => {
                    let a = grads[ti].grad().unwrap()[j];
                    diff += (a - n).powi(2);
                    norm += a.abs().max(n.abs()).powi(2);
                    rep.checked += 1;
                }
                None => rep.skipped += 1,
            }
        }
        if norm > 0.0 {
            rep.max_rel = rep.max_rel.max((diff / norm).sqrt());
        }
    }
    rep
}

fn set_param(m: &mut FatmModel<f64>, ti: usize, j: usize, value: f64) {
    let (enc, dec) = m.encoder_and_decoder_mut("d").unwrap();
    let mut all = enc.tensors_mut();
    all.extend(dec.tensors_mut());
    all[ti].data_mut()[j] = value;
}
