//! Quality and de-identification scoring.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_RANGE: f64 = 1.0;

/// Normalized 11-tap Gaussian.
pub fn ssim_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(j, a)| a * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM of the luma planes.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::InvalidInput(format!("ssim of {:?} and {:?}", a.dims(), b.dims())));
    }
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!("{w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    ssim_planes(&a.luma(), &b.luma(), w, h)
}

/// SSIM of two single-channel planes.
pub fn ssim_planes(x: &[f64], y: &[f64], w: usize, h: usize) -> Result<f64> {
    let map = ssim_map(x, y, w, h)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Local SSIM for every window position, row-major over
/// `(w - 10) x (h - 10)`.
pub fn ssim_map(x: &[f64], y: &[f64], w: usize, h: usize) -> Result<Vec<f64>> {
    if x.len() != w * h || y.len() != w * h || w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!("planes of {} and {} values for {w}x{h}", x.len(), y.len())));
    }
    let k = ssim_window();
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).collect::<Vec<_>>();
    let mx = filter_valid(x, w, h, &k);
    let my = filter_valid(y, w, h, &k);
    let sxx = filter_valid(&prod(x, x), w, h, &k);
    let syy = filter_valid(&prod(y, y), w, h, &k);
    let sxy = filter_valid(&prod(x, y), w, h, &k);
    Ok((0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect())
}

/// A verification decision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub same: bool,
    /// Similarity in `[0, 1]`.
    pub score: f64,
}

/// Decides whether two face images show the same person.
pub trait FaceVerifier {
    fn verify(&self, a: &Image, b: &Image) -> Result<Verdict>;
}

pub const TOY_FEATURE_SIDE: usize = 16;

/// Area-averaged resample of the luma plane to `side x side`.
pub fn downsample_luma(img: &Image, side: usize) -> Vec<f64> {
    let (w, h) = img.dims();
    let luma = img.luma();
    let (sx, sy) = (w as f64 / side as f64, h as f64 / side as f64);
    let mut out = vec![0.0; side * side];
    for oy in 0..side {
        let (y0, y1) = (oy as f64 * sy, (oy + 1) as f64 * sy);
        for ox in 0..side {
            let (x0, x1) = (ox as f64 * sx, (ox + 1) as f64 * sx);
            let mut acc = 0.0;
            for y in y0.floor() as usize..(y1.ceil() as usize).min(h) {
                let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                for x in x0.floor() as usize..(x1.ceil() as usize).min(w) {
                    let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                    acc += wx * wy * luma[y * w + x];
                }
            }
            out[oy * side + ox] = acc / (sx * sy);
        }
    }
    out
}

/// 16x16 luma, shifted to zero mean and scaled to unit variance. Flat
/// images map to the zero vector.
pub fn toy_features(img: &Image) -> Vec<f64> {
    let mut f = downsample_luma(img, TOY_FEATURE_SIDE);
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    f.iter_mut().for_each(|v| *v = if sd > 1e-9 { (*v - mean) / sd } else { 0.0 });
    f
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Nearest-centroid verifier over [`toy_features`].
///
/// An image is assigned to its nearest identity centroid when it lies within
/// `tau` of it and is unknown otherwise. Two images match when both are
/// assigned to the same identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyVerifier {
    pub labels: Vec<String>,
    pub centroids: Vec<Vec<f64>>,
    pub tau: f64,
}

/// Calibration slack applied to the largest in-class distance.
pub const TAU_MARGIN: f64 = 1.25;

impl ToyVerifier {
    /// Centroids from labeled images; `tau` is [`TAU_MARGIN`] times the
    /// largest distance of a training image to its own centroid.
    pub fn fit(identities: &[(String, Vec<Image>)]) -> Result<Self> {
        if identities.len() < 2 {
            return Err(Error::Verifier("need at least two identities".into()));
        }
        let mut labels = Vec::new();
        let mut centroids = Vec::new();
        let mut tau: f64 = 0.0;
        for (label, images) in identities {
            if images.is_empty() {
                return Err(Error::Verifier(format!("identity `{label}` has no images")));
            }
            if labels.contains(label) {
                return Err(Error::Verifier(format!("duplicate identity `{label}`")));
            }
            let feats: Vec<Vec<f64>> = images.iter().map(toy_features).collect();
            let mut c = vec![0.0; feats[0].len()];
            for f in &feats {
                c.iter_mut().zip(f).for_each(|(a, b)| *a += b);
            }
            c.iter_mut().for_each(|v| *v /= feats.len() as f64);
            tau = feats.iter().map(|f| euclid(f, &c)).fold(tau, f64::max);
            labels.push(label.clone());
            centroids.push(c);
        }
        if !(tau > 0.0) {
            return Err(Error::Verifier("degenerate calibration set".into()));
        }
        Ok(ToyVerifier {
            labels,
            centroids,
            tau: tau * TAU_MARGIN,
        })
    }

    /// Nearest identity and its distance.
    pub fn nearest(&self, img: &Image) -> (usize, f64) {
        let f = toy_features(img);
        self.centroids
            .iter()
            .map(|c| euclid(&f, c))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least two centroids")
    }

    /// Assigned identity, or `None` when farther than `tau` from every
    /// centroid.
    pub fn identify(&self, img: &Image) -> Option<&str> {
        let (i, d) = self.nearest(img);
        (d <= self.tau).then(|| self.labels[i].as_str())
    }
}

impl FaceVerifier for ToyVerifier {
    fn verify(&self, a: &Image, b: &Image) -> Result<Verdict> {
        if a.width() < TOY_FEATURE_SIDE || a.height() < TOY_FEATURE_SIDE || b.width() < TOY_FEATURE_SIDE || b.height() < TOY_FEATURE_SIDE {
            return Err(Error::Verifier(format!("images {:?} and {:?} are below 16x16", a.dims(), b.dims())));
        }
        let (ia, da) = self.nearest(a);
        let (ib, db) = self.nearest(b);
        let same = ia == ib && da <= self.tau && db <= self.tau;
        let d = euclid(&toy_features(a), &toy_features(b));
        Ok(Verdict {
            same,
            score: 1.0 / (1.0 + d / self.tau),
        })
    }
}

/// Outcome for one evaluated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDecision {
    pub index: usize,
    pub before_same: bool,
    pub before_score: f64,
    pub after_same: bool,
    pub after_score: f64,
    /// SSIM of the de-identified image against its original.
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub index: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_pairs: usize,
    pub n_failed: usize,
    pub pre_deid_same_rate: f64,
    pub post_deid_same_rate: f64,
    pub effective_rate: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub pairs: Vec<PairDecision>,
    pub failures: Vec<PairFailure>,
}

impl EvalReport {
    /// Summary statistics computed from per-pair decisions.
    pub fn from_pairs(pairs: Vec<PairDecision>, failures: Vec<PairFailure>) -> Self {
        let n = pairs.len();
        let rate = |f: fn(&PairDecision) -> bool| if n == 0 { 0.0 } else { pairs.iter().filter(|p| f(p)).count() as f64 / n as f64 };
        let pre = rate(|p| p.before_same);
        let post = rate(|p| p.after_same);
        let (mean, std) = if n == 0 {
            (0.0, 0.0)
        } else {
            let m = pairs.iter().map(|p| p.ssim).sum::<f64>() / n as f64;
            let v = pairs.iter().map(|p| (p.ssim - m).powi(2)).sum::<f64>() / n as f64;
            (m, v.sqrt())
        };
        EvalReport {
            n_pairs: n,
            n_failed: failures.len(),
            pre_deid_same_rate: pre,
            post_deid_same_rate: post,
            effective_rate: 1.0 - post,
            ssim_mean: mean,
            ssim_std: std,
            pairs,
            failures,
        }
    }

    /// Whether the summary matches its per-pair decisions exactly.
    pub fn is_consistent(&self) -> bool {
        let again = EvalReport::from_pairs(self.pairs.clone(), self.failures.clone());
        again == *self
    }

    pub fn write_pairs_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "index,before_same,before_score,after_same,after_score,ssim")?;
        for p in &self.pairs {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                p.index, p.before_same, p.before_score, p.after_same, p.after_score, p.ssim
            )?;
        }
        Ok(())
    }
}

/// Verification rates before and after de-identifying the first image of
/// each pair. Pairs whose de-identification or verification fails are
/// recorded and excluded.
pub fn deid_effective_rate(
    pairs: &[(Image, Image)],
    mut deid: impl FnMut(&Image) -> Result<Image>,
    verifier: &dyn FaceVerifier,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no pairs to evaluate".into()));
    }
    let mut done = Vec::with_capacity(pairs.len());
    let mut failures = Vec::new();
    for (index, (a, b)) in pairs.iter().enumerate() {
        let outcome = (|| -> Result<PairDecision> {
            let before = verifier.verify(a, b)?;
            let d = deid(a)?;
            let after = verifier.verify(&d, b)?;
            Ok(PairDecision {
                index,
                before_same: before.same,
                before_score: before.score,
                after_same: after.same,
                after_score: after.score,
                ssim: ssim(a, &d)?,
            })
        })();
        match outcome {
            Ok(p) => done.push(p),
            Err(e) => failures.push(PairFailure {
                index,
                message: e.to_string(),
            }),
        }
    }
    Ok(EvalReport::from_pairs(done, failures))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u32, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| {
            let v = ((x as u32 * 31 + y as u32 * 17 + seed * 7) % 23) as f32 / 23.0;
            [v, 1.0 - v, (v * 3.0) % 1.0]
        })
    }

    #[test]
    fn ssim_identity_symmetry_and_errors() {
        let (a, b) = (img(1, 20, 17), img(2, 20, 17));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&a, &img(1, 20, 16)).is_err());
        assert!(ssim(&img(1, 10, 30), &img(2, 10, 30)).is_err());
    }

    #[test]
    fn downsample_of_constant_is_constant() {
        let f = downsample_luma(&Image::filled(37, 23, [0.4; 3]), 16);
        assert!(f.iter().all(|v| (v - 0.4).abs() < 1e-6));
        assert!(toy_features(&Image::filled(64, 64, [0.5; 3])).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn report_recomputes_and_serializes() {
        let pairs = vec![
            PairDecision {
                index: 0,
                before_same: true,
                before_score: 0.9,
                after_same: false,
                after_score: 0.2,
                ssim: 0.95,
            },
            PairDecision {
                index: 2,
                before_same: true,
                before_score: 0.8,
                after_same: true,
                after_score: 0.7,
                ssim: 0.97,
            },
        ];
        let r = EvalReport::from_pairs(
            pairs,
            vec![PairFailure {
                index: 1,
                message: "x".into(),
            }],
        );
        assert_eq!((r.n_pairs, r.n_failed), (2, 1));
        assert_eq!(r.effective_rate, 0.5);
        assert!(r.is_consistent());
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        let mut csv = Vec::new();
        r.write_pairs_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }
}
