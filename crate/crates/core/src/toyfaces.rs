//! Procedural cartoon faces with analytic landmarks and identity labels.
//!
//! A face lives in normalized coordinates `(u, w)`: `u` spans the head
//! width (`-1..1`) and `w` the head height (`-1..1`), and image offsets from
//! the face center are `scale * R(rotation) * (u, aspect * w)`. Every
//! identity feature is placed in `(u, w)`, so the aspect ratio is a pure
//! affine stretch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facegeom::{self, AffineTransform, LandmarkSet, Point, CANONICAL_SIZE, LANDMARK_COUNT};
use crate::image::Image;
use crate::rng;
use crate::trainer::FaceSet;

pub const ASPECT_RANGE: (f64, f64) = (1.15, 1.35);
pub const EYE_SPACING_RANGE: (f64, f64) = (0.355, 0.385);
pub const BROW_THICKNESS_RANGE: (f64, f64) = (0.03, 0.10);
pub const NOSE_LENGTH_RANGE: (f64, f64) = (0.39, 0.43);
pub const SKIN_RANGE: [(f64, f64); 3] = [(0.45, 0.95), (0.30, 0.80), (0.20, 0.70)];

pub const EXPRESSION_RANGE: (f64, f64) = (-1.0, 1.0);
pub const ROTATION_RANGE: (f64, f64) = (-15.0, 15.0);
pub const ILLUMINATION_RANGE: (f64, f64) = (0.7, 1.3);
pub const JITTER_RANGE: (f64, f64) = (-0.1, 0.1);
pub const SCALE_RANGE: (f64, f64) = (0.85, 1.15);

/// Frame size used when generating training sets.
pub const RENDER_SIZE: usize = 128;
/// Head half-width in pixels per unit of frame size, at scale 1.
const UNIT_PER_SIZE: f64 = 0.22;
const SUPERSAMPLE: usize = 4;

const EYE_W: f64 = -0.22;
const EYE_RX: f64 = 0.13;
const EYE_RW: f64 = 0.045;
const IRIS_R: f64 = 0.045;
const BROW_W: f64 = -0.38;
const BROW_ARCH: f64 = 0.04;
const BROW_HALF: f64 = 0.2;
const MOUTH_W: f64 = 0.42;
const MOUTH_HALF: f64 = 0.3;
const MOUTH_INNER_HALF: f64 = 0.22;
const LIP_UPPER: f64 = 0.05;
const LIP_LOWER: f64 = 0.07;
const LIP_INNER: f64 = 0.012;
const SMILE: f64 = 0.025;
const HAIR_LINE: f64 = -0.6;

/// Identity-bearing shape and color parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub skin: [f64; 3],
    /// Head height over head width.
    pub aspect: f64,
    /// Eye center offset from the midline, in head half-widths.
    pub eye_spacing: f64,
    pub brow_thickness: f64,
    pub nose_length: f64,
}

/// Non-identity attributes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeParams {
    /// Mouth curvature, positive raises the corners.
    pub expression: f64,
    pub rotation_deg: f64,
    pub illumination: f64,
    /// Face center offset in head half-widths.
    pub jitter: [f64; 2],
    pub scale: f64,
}

fn check(name: &str, v: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo..=hi).contains(&v) {
        return Err(Error::InvalidParameter(format!("{name} = {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

fn fraction(v: f64, (lo, hi): (f64, f64)) -> f64 {
    (v - lo) / (hi - lo)
}

impl IdentityParams {
    const PRESETS: [IdentityParams; 4] = [
        IdentityParams {
            skin: [0.85, 0.66, 0.52],
            aspect: 1.17,
            eye_spacing: 0.357,
            brow_thickness: 0.035,
            nose_length: 0.392,
        },
        IdentityParams {
            skin: [0.62, 0.45, 0.33],
            aspect: 1.33,
            eye_spacing: 0.383,
            brow_thickness: 0.095,
            nose_length: 0.428,
        },
        IdentityParams {
            skin: [0.92, 0.76, 0.64],
            aspect: 1.30,
            eye_spacing: 0.36,
            brow_thickness: 0.07,
            nose_length: 0.43,
        },
        IdentityParams {
            skin: [0.72, 0.52, 0.40],
            aspect: 1.2,
            eye_spacing: 0.381,
            brow_thickness: 0.06,
            nose_length: 0.395,
        },
    ];

    /// Mid-range face used to derive the canonical template.
    pub const REFERENCE: IdentityParams = IdentityParams {
        skin: [0.7, 0.55, 0.45],
        aspect: 1.25,
        eye_spacing: 0.37,
        brow_thickness: 0.065,
        nose_length: 0.41,
    };

    pub const fn preset_count() -> usize {
        Self::PRESETS.len()
    }

    /// Fixed, mutually separable identities.
    pub fn preset(i: usize) -> Result<IdentityParams> {
        Self::PRESETS
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidParameter(format!("no identity preset {i}")))
    }

    pub fn validate(&self) -> Result<()> {
        for (c, (&v, &r)) in self.skin.iter().zip(&SKIN_RANGE).enumerate() {
            check(&format!("skin[{c}]"), v, r)?;
        }
        check("aspect", self.aspect, ASPECT_RANGE)?;
        check("eye_spacing", self.eye_spacing, EYE_SPACING_RANGE)?;
        check("brow_thickness", self.brow_thickness, BROW_THICKNESS_RANGE)?;
        check("nose_length", self.nose_length, NOSE_LENGTH_RANGE)
    }

    pub fn sample(r: &mut rng::Rng) -> IdentityParams {
        IdentityParams {
            skin: SKIN_RANGE.map(|(lo, hi)| rng::uniform(r, lo, hi)),
            aspect: rng::uniform(r, ASPECT_RANGE.0, ASPECT_RANGE.1),
            eye_spacing: rng::uniform(r, EYE_SPACING_RANGE.0, EYE_SPACING_RANGE.1),
            brow_thickness: rng::uniform(r, BROW_THICKNESS_RANGE.0, BROW_THICKNESS_RANGE.1),
            nose_length: rng::uniform(r, NOSE_LENGTH_RANGE.0, NOSE_LENGTH_RANGE.1),
        }
    }

    /// Parameters (skin channels counted separately) whose values differ
    /// by at least `min_fraction` of their range.
    pub fn distinct_parameters(&self, other: &IdentityParams, min_fraction: f64) -> usize {
        let mut pairs: Vec<(f64, f64, (f64, f64))> = (0..3).map(|c| (self.skin[c], other.skin[c], SKIN_RANGE[c])).collect();
        pairs.push((self.aspect, other.aspect, ASPECT_RANGE));
        pairs.push((self.eye_spacing, other.eye_spacing, EYE_SPACING_RANGE));
        pairs.push((self.brow_thickness, other.brow_thickness, BROW_THICKNESS_RANGE));
        pairs.push((self.nose_length, other.nose_length, NOSE_LENGTH_RANGE));
        pairs
            .into_iter()
            .filter(|&(a, b, r)| (fraction(a, r) - fraction(b, r)).abs() >= min_fraction)
            .count()
    }

    /// Whether the pair meets the separability guarantee: at least two
    /// parameters apart by 20% of their range.
    pub fn separable_from(&self, other: &IdentityParams) -> bool {
        self.distinct_parameters(other, 0.2) >= 2
    }
}

impl Default for AttributeParams {
    fn default() -> Self {
        Self::FRONTAL
    }
}

impl AttributeParams {
    pub const FRONTAL: AttributeParams = AttributeParams {
        expression: 0.0,
        rotation_deg: 0.0,
        illumination: 1.0,
        jitter: [0.0, 0.0],
        scale: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        check("expression", self.expression, EXPRESSION_RANGE)?;
        check("rotation_deg", self.rotation_deg, ROTATION_RANGE)?;
        check("illumination", self.illumination, ILLUMINATION_RANGE)?;
        check("jitter[0]", self.jitter[0], JITTER_RANGE)?;
        check("jitter[1]", self.jitter[1], JITTER_RANGE)?;
        check("scale", self.scale, SCALE_RANGE)
    }

    /// Uniform over every range.
    pub fn sample(r: &mut rng::Rng) -> AttributeParams {
        AttributeParams {
            expression: rng::uniform(r, EXPRESSION_RANGE.0, EXPRESSION_RANGE.1),
            rotation_deg: rng::uniform(r, ROTATION_RANGE.0, ROTATION_RANGE.1),
            illumination: rng::uniform(r, ILLUMINATION_RANGE.0, ILLUMINATION_RANGE.1),
            jitter: [
                rng::uniform(r, JITTER_RANGE.0, JITTER_RANGE.1),
                rng::uniform(r, JITTER_RANGE.0, JITTER_RANGE.1),
            ],
            scale: rng::uniform(r, SCALE_RANGE.0, SCALE_RANGE.1),
        }
    }
}

fn smile(expression: f64, u: f64) -> f64 {
    -SMILE * expression * (u / MOUTH_HALF).powi(2)
}

fn bulge(u: f64, half: f64) -> f64 {
    (1.0 - (u / half).powi(2)).max(0.0)
}

fn upper_outer(e: f64, u: f64) -> f64 {
    MOUTH_W - LIP_UPPER * bulge(u, MOUTH_HALF) + smile(e, u)
}

fn lower_outer(e: f64, u: f64) -> f64 {
    MOUTH_W + LIP_LOWER * bulge(u, MOUTH_HALF) + smile(e, u)
}

fn upper_inner(e: f64, u: f64) -> f64 {
    MOUTH_W - LIP_INNER * bulge(u, MOUTH_INNER_HALF) + smile(e, u)
}

fn lower_inner(e: f64, u: f64) -> f64 {
    MOUTH_W + LIP_INNER * bulge(u, MOUTH_INNER_HALF) + smile(e, u)
}

fn brow_point(id: &IdentityParams, side: f64, j: usize) -> Point {
    let t = j as f64 / 2.0 - 1.0;
    let u = side * id.eye_spacing + BROW_HALF * t;
    [u, BROW_W - BROW_ARCH * (1.0 - t * t)]
}

fn eye_point(id: &IdentityParams, side: f64, degrees: f64) -> Point {
    let (s, c) = degrees.to_radians().sin_cos();
    [side * id.eye_spacing + EYE_RX * c, EYE_W - EYE_RW * s]
}

/// The 68 landmarks in normalized `(u, w)` coordinates.
pub fn normalized_landmarks(id: &IdentityParams, expression: f64) -> Vec<Point> {
    let mut p = Vec::with_capacity(LANDMARK_COUNT);
    for k in 0..17 {
        let t = std::f64::consts::PI * k as f64 / 16.0;
        p.push([-t.cos(), t.sin()]);
    }
    for j in 0..5 {
        p.push(brow_point(id, -1.0, j));
    }
    for j in 0..5 {
        p.push(brow_point(id, 1.0, j));
    }
    let nostril = EYE_W + id.nose_length;
    for i in 0..4 {
        p.push([0.0, EYE_W + id.nose_length * i as f64 / 4.0]);
    }
    for (u, dw) in [(-0.12, -0.02), (-0.06, 0.005), (0.0, 0.015), (0.06, 0.005), (0.12, -0.02)] {
        p.push([u, nostril + dw]);
    }
    for deg in [180.0, 120.0, 60.0, 0.0, 300.0, 240.0] {
        p.push(eye_point(id, -1.0, deg));
    }
    for deg in [180.0, 120.0, 60.0, 0.0, 300.0, 240.0] {
        p.push(eye_point(id, 1.0, deg));
    }
    let e = expression;
    for i in 0..7 {
        let u = MOUTH_HALF * (i as f64 / 3.0 - 1.0);
        let w = if i == 0 || i == 6 { MOUTH_W + smile(e, u) } else { upper_outer(e, u) };
        p.push([u, w]);
    }
    for u in [0.2, 0.1, 0.0, -0.1, -0.2] {
        p.push([u, lower_outer(e, u)]);
    }
    for i in 0..5 {
        let u = MOUTH_INNER_HALF * (i as f64 / 2.0 - 1.0);
        let w = if i == 0 || i == 4 { MOUTH_W + smile(e, u) } else { upper_inner(e, u) };
        p.push([u, w]);
    }
    for u in [MOUTH_INNER_HALF / 2.0, 0.0, -MOUTH_INNER_HALF / 2.0] {
        p.push([u, lower_inner(e, u)]);
    }
    p
}

/// Maps normalized face coordinates to image pixels.
fn face_to_image(id: &IdentityParams, attr: &AttributeParams, size: usize) -> AffineTransform {
    let s = size as f64 * UNIT_PER_SIZE * attr.scale;
    let mid = (size as f64 - 1.0) / 2.0;
    let center = [mid + attr.jitter[0] * s, mid + attr.jitter[1] * s];
    let stretch = AffineTransform {
        m: [[s, 0.0, center[0]], [0.0, s * id.aspect, center[1]]],
    };
    AffineTransform::rotation_about(center, attr.rotation_deg, 1.0).compose(&stretch)
}

pub fn landmarks(id: &IdentityParams, attr: &AttributeParams, size: usize) -> LandmarkSet {
    let t = face_to_image(id, attr, size);
    let pts = normalized_landmarks(id, attr.expression).into_iter().map(|p| t.apply(p)).collect();
    LandmarkSet::new(pts).expect("68 finite points by construction")
}

/// Reference landmarks in the canonical frame: 28 px per head half-width,
/// centered on the landmark extent.
pub fn template_landmarks() -> LandmarkSet {
    let id = IdentityParams::REFERENCE;
    let pts = normalized_landmarks(&id, 0.0);
    let (lo, hi) = pts
        .iter()
        .map(|p| p[1] * id.aspect)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let mid = (CANONICAL_SIZE as f64 - 1.0) / 2.0;
    let s = 28.0;
    let off = (lo + hi) / 2.0;
    let pts = pts.into_iter().map(|[u, w]| [mid + s * u, mid + s * (w * id.aspect - off)]).collect();
    LandmarkSet::new(pts).expect("68 finite points by construction")
}

fn dist_to_segment([px, py]: Point, [ax, ay]: Point, [bx, by]: Point) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let t = (((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    (px - ax - t * dx).hypot(py - ay - t * dy)
}

fn near_polyline(p: Point, line: &[Point], half_width: f64) -> bool {
    line.windows(2).any(|s| dist_to_segment(p, s[0], s[1]) <= half_width)
}

struct Painter {
    id: IdentityParams,
    expression: f64,
    brows: [[Point; 5]; 2],
    bridge: [Point; 4],
    nostrils: [Point; 5],
}

const HAIR: [f64; 3] = [0.24, 0.16, 0.1];
const BROW: [f64; 3] = [0.16, 0.11, 0.08];
const SCLERA: [f64; 3] = [0.95, 0.95, 0.93];
const IRIS: [f64; 3] = [0.22, 0.16, 0.1];
const LIPS: [f64; 3] = [0.72, 0.27, 0.27];
const MOUTH: [f64; 3] = [0.25, 0.05, 0.06];

fn shade(c: [f64; 3], k: f64) -> [f64; 3] {
    c.map(|v| v * k)
}

impl Painter {
    fn new(id: &IdentityParams, expression: f64) -> Self {
        let lm = normalized_landmarks(id, expression);
        let take = |start: usize| -> [Point; 5] { std::array::from_fn(|i| lm[start + i]) };
        Painter {
            id: *id,
            expression,
            brows: [take(17), take(22)],
            bridge: std::array::from_fn(|i| lm[27 + i]),
            nostrils: take(31),
        }
    }

    /// Color at normalized point `(u, w)`; `None` is background.
    fn color(&self, u: f64, w: f64) -> Option<[f64; 3]> {
        let skin = self.id.skin;
        let head = u * u + w * w <= 1.0;
        if !head {
            return (w > 0.55 && u.abs() < 0.42).then(|| shade(skin, 0.85));
        }
        if w < HAIR_LINE + 0.15 * u * u {
            return Some(HAIR);
        }
        let bt = self.id.brow_thickness / 2.0;
        if (BROW_W - BROW_ARCH - bt - 0.01..=BROW_W + bt + 0.01).contains(&w) && self.brows.iter().any(|b| near_polyline([u, w], b, bt)) {
            return Some(BROW);
        }
        for side in [-1.0, 1.0] {
            let cx = side * self.id.eye_spacing;
            let (du, dw) = (u - cx, w - EYE_W);
            if (du / EYE_RX).powi(2) + (dw / EYE_RW).powi(2) <= 1.0 {
                return Some(if du * du + (dw * 1.6).powi(2) <= IRIS_R * IRIS_R { IRIS } else { SCLERA });
            }
        }
        if u.abs() <= MOUTH_HALF {
            let e = self.expression;
            if u.abs() <= MOUTH_INNER_HALF && w >= upper_inner(e, u) && w <= lower_inner(e, u) {
                return Some(MOUTH);
            }
            if w >= upper_outer(e, u) && w <= lower_outer(e, u) {
                return Some(LIPS);
            }
        }
        if u.abs() < 0.16 && near_polyline([u, w], &self.nostrils, 0.012) {
            return Some(shade(skin, 0.62));
        }
        if u.abs() < 0.03 && near_polyline([u, w], &self.bridge, 0.012) {
            return Some(shade(skin, 0.8));
        }
        Some(skin)
    }
}

fn background(y: f64, size: usize) -> [f64; 3] {
    let t = y / size as f64;
    [0.36 - 0.1 * t, 0.44 - 0.12 * t, 0.52 - 0.1 * t]
}

/// Renders a `size x size` frame and its landmarks.
pub fn render_face(id: &IdentityParams, attr: &AttributeParams, size: usize) -> Result<(Image, LandmarkSet)> {
    id.validate()?;
    attr.validate()?;
    if size < 16 {
        return Err(Error::InvalidParameter(format!("frame size {size} below 16")));
    }
    let to_face = face_to_image(id, attr, size).inverse()?;
    let painter = Painter::new(id, attr.expression);
    let n = SUPERSAMPLE as f64;
    let inv = 1.0 / (n * n);
    let gain = attr.illumination;
    let img = Image::from_fn(size, size, |x, y| {
        let mut acc = [0.0f64; 3];
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let px = x as f64 + (sx as f64 + 0.5) / n - 0.5;
                let py = y as f64 + (sy as f64 + 0.5) / n - 0.5;
                let [u, w] = to_face.apply([px, py]);
                let c = painter.color(u, w).unwrap_or_else(|| background(py, size));
                acc.iter_mut().zip(c).for_each(|(a, v)| *a += v);
            }
        }
        acc.map(|v| (v * inv * gain).clamp(0.0, 1.0) as f32)
    });
    Ok((img, landmarks(id, attr, size)))
}

/// One rendered frame with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub identity: usize,
    pub attributes: AttributeParams,
    pub image: Image,
    pub landmarks: LandmarkSet,
}

/// `n` frames of identity preset `identity`, attributes drawn per index
/// from `seed`.
pub fn render_samples(identity: usize, n: usize, seed: u64, size: usize) -> Result<Vec<ToySample>> {
    let id = IdentityParams::preset(identity)?;
    render_samples_for(&id, identity, n, seed, size)
}

pub fn render_samples_for(id: &IdentityParams, label: usize, n: usize, seed: u64, size: usize) -> Result<Vec<ToySample>> {
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, &[rng::name_key("toyfaces"), i as u64]);
            let attributes = AttributeParams::sample(&mut r);
            let (image, landmarks) = render_face(id, &attributes, size)?;
            Ok(ToySample {
                identity: label,
                attributes,
                image,
                landmarks,
            })
        })
        .collect()
}

/// `n` aligned 80x80 faces of one identity.
pub fn generate_face_set(id: &IdentityParams, subject_id: &str, n: usize, seed: u64) -> Result<FaceSet> {
    if n == 0 {
        return Err(Error::InvalidParameter("face set needs at least one image".into()));
    }
    let mut faces = Vec::with_capacity(n);
    let mut marks = Vec::with_capacity(n);
    for s in render_samples_for(id, 0, n, seed, RENDER_SIZE)? {
        let (aligned, _) = facegeom::align_face(&s.image, &s.landmarks)?;
        faces.push(aligned);
        marks.push(s.landmarks);
    }
    FaceSet::new(subject_id, faces, marks)
}

/// Random identity pairs rejected until separable.
pub fn sample_separable_identities(count: usize, seed: u64) -> Vec<IdentityParams> {
    let mut r = rng::stream(seed, &[rng::name_key("identities")]);
    let mut out: Vec<IdentityParams> = Vec::with_capacity(count);
    while out.len() < count {
        let cand = IdentityParams::sample(&mut r);
        if out.iter().all(|o| o.separable_from(&cand)) {
            out.push(cand);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facegeom::CanonicalTemplate;

    #[test]
    fn presets_are_valid_and_pairwise_separable() {
        let n = IdentityParams::preset_count();
        for i in 0..n {
            IdentityParams::preset(i).unwrap().validate().unwrap();
            for j in 0..i {
                assert!(IdentityParams::preset(i).unwrap().separable_from(&IdentityParams::preset(j).unwrap()));
            }
        }
        IdentityParams::REFERENCE.validate().unwrap();
        assert!(IdentityParams::preset(n).is_err());
    }

    #[test]
    fn bundled_template_matches_the_reference_face() {
        let bundled = &CanonicalTemplate::standard().points;
        assert!(bundled.max_deviation(&template_landmarks()) < 1e-9);
    }

    #[test]
    fn frontal_landmarks_are_symmetric() {
        for i in 0..IdentityParams::preset_count() {
            let id = IdentityParams::preset(i).unwrap();
            let lm = landmarks(&id, &AttributeParams::FRONTAL, 128);
            assert!(lm.mirrored(127.0).max_deviation(&lm) < 1e-6);
        }
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let mut id = IdentityParams::preset(0).unwrap();
        id.aspect = 2.0;
        assert!(matches!(render_face(&id, &AttributeParams::FRONTAL, 64), Err(Error::InvalidParameter(_))));
        let attr = AttributeParams {
            rotation_deg: 20.0,
            ..AttributeParams::FRONTAL
        };
        assert!(render_face(&IdentityParams::preset(0).unwrap(), &attr, 64).is_err());
    }

    #[test]
    fn separable_sampling() {
        let ids = sample_separable_identities(5, 3);
        for i in 0..5 {
            ids[i].validate().unwrap();
            for j in 0..i {
                assert!(ids[i].separable_from(&ids[j]));
            }
        }
    }
}
