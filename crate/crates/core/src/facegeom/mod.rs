//! Landmark-driven alignment into the 80x80 canonical frame and back.
//!
//! Coordinates are continuous pixel coordinates with pixel centers at
//! integers. The network sees the centered 64x64 crop of the canonical frame.

mod io;

pub use io::{read_landmark_file, read_landmark_jsonl, write_landmark_file, write_landmark_jsonl, LandmarkRecord};

use std::sync::OnceLock;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const LANDMARK_COUNT: usize = 68;
pub const CANONICAL_SIZE: usize = 80;
pub const CROP_SIZE: usize = 64;
/// Offset of the network crop inside the canonical frame.
pub const CROP_OFFSET: usize = (CANONICAL_SIZE - CROP_SIZE) / 2;

const MAX_CONDITION: f64 = 1e12;
const MIN_DETERMINANT: f64 = 1e-12;

/// iBUG index of the left/right counterpart of landmark `i`.
pub const fn mirror_index(i: usize) -> usize {
    match i {
        0..=16 => 16 - i,
        17..=26 => 43 - i,
        27..=30 => i,
        31..=35 => 66 - i,
        36..=39 => 81 - i,
        40 | 41 => 87 - i,
        42..=45 => 81 - i,
        46 | 47 => 87 - i,
        48..=54 => 102 - i,
        55..=59 => 114 - i,
        60..=64 => 124 - i,
        65..=67 => 132 - i,
        _ => i,
    }
}

pub type Point = [f64; 2];

/// 68 points in iBUG order: 0-16 jaw, 17-26 brows, 27-35 nose, 36-47 eyes,
/// 48-67 mouth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl TryFrom<Vec<Point>> for LandmarkSet {
    type Error = Error;

    fn try_from(points: Vec<Point>) -> Result<Self> {
        LandmarkSet::new(points)
    }
}

impl From<LandmarkSet> for Vec<Point> {
    fn from(l: LandmarkSet) -> Self {
        l.points
    }
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::InvalidInput(format!(
                "expected {LANDMARK_COUNT} landmarks, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite landmark coordinate".into()));
        }
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point {
        self.points[i]
    }

    pub fn transformed(&self, t: &AffineTransform) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|&p| t.apply(p)).collect(),
        }
    }

    /// Reflection `x -> axis2 - x` with left/right indices swapped, so a
    /// frontal face symmetric about `x = axis2 / 2` maps to itself.
    pub fn mirrored(&self, axis2: f64) -> LandmarkSet {
        LandmarkSet {
            points: (0..LANDMARK_COUNT)
                .map(|i| {
                    let [x, y] = self.points[mirror_index(i)];
                    [axis2 - x, y]
                })
                .collect(),
        }
    }

    /// Jaw extent, points 0 to 16.
    pub fn face_width(&self) -> f64 {
        distance(self.points[0], self.points[16])
    }

    pub fn max_deviation(&self, other: &LandmarkSet) -> f64 {
        self.points.iter().zip(&other.points).map(|(&a, &b)| distance(a, b)).fold(0.0, f64::max)
    }

    pub fn rms_deviation(&self, other: &LandmarkSet) -> f64 {
        let ss: f64 = self.points.iter().zip(&other.points).map(|(&a, &b)| distance(a, b).powi(2)).sum();
        (ss / LANDMARK_COUNT as f64).sqrt()
    }
}

pub fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// `[a b tx; c d ty]`, mapping `(x, y)` to `(a x + b y + tx, c x + d y + ty)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub const fn identity() -> Self {
        AffineTransform {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub const fn translation(tx: f64, ty: f64) -> Self {
        AffineTransform {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    /// Counter-clockwise on screen (y down) by `degrees` about `center`,
    /// then scaled by `scale` about the same point.
    pub fn rotation_about(center: Point, degrees: f64, scale: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let (a, b, cc, d) = (scale * c, scale * s, -scale * s, scale * c);
        let [x, y] = center;
        AffineTransform {
            m: [[a, b, x - a * x - b * y], [cc, d, y - cc * x - d * y]],
        }
    }

    pub fn apply(&self, [x, y]: Point) -> Point {
        let m = &self.m;
        [m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2]]
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if !(det.abs() >= MIN_DETERMINANT) {
            return Err(Error::DegenerateTransform(det));
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(AffineTransform {
            m: [[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]],
        })
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &AffineTransform) -> Self {
        let [[a, b, tx], [c, d, ty]] = self.m;
        let [[e, f, ux], [g, h, uy]] = first.m;
        AffineTransform {
            m: [
                [a * e + b * g, a * f + b * h, a * ux + b * uy + tx],
                [c * e + d * g, c * f + d * h, c * ux + d * uy + ty],
            ],
        }
    }

    pub fn max_coefficient_error(&self, other: &AffineTransform) -> f64 {
        self.m.iter().flatten().zip(other.m.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Translation to the centroid and isotropic scaling to mean distance
/// sqrt(2), which keeps the normal equations well conditioned.
fn normalizer(points: &[Point]) -> AffineTransform {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean = points.iter().map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / n;
    let s = if mean > 0.0 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    AffineTransform {
        m: [[s, 0.0, -s * cx], [0.0, s, -s * cy]],
    }
}

/// Least-squares affine map taking `src[i]` to `dst[i]`.
pub fn estimate_affine_points(src: &[Point], dst: &[Point]) -> Result<AffineTransform> {
    if src.len() != dst.len() {
        return Err(Error::InvalidInput(format!(
            "{} source points for {} destination points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::DegenerateLandmarks(format!("{} points cannot fix an affine map", src.len())));
    }
    let (ns, nd) = (normalizer(src), normalizer(dst));
    let mut normal = Matrix3::<f64>::zeros();
    let mut rhs_x = Vector3::<f64>::zeros();
    let mut rhs_y = Vector3::<f64>::zeros();
    for (&p, &q) in src.iter().zip(dst) {
        let [x, y] = ns.apply(p);
        let [u, v] = nd.apply(q);
        let row = Vector3::new(x, y, 1.0);
        normal += row * row.transpose();
        rhs_x += row * u;
        rhs_y += row * v;
    }
    let eig = SymmetricEigen::new(normal).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::DegenerateLandmarks(format!(
            "source points are collinear or coincident (normal matrix eigenvalues {lo:e}, {hi:e})"
        )));
    }
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::DegenerateLandmarks("normal matrix is not positive definite".into()))?;
    let (rx, ry) = (chol.solve(&rhs_x), chol.solve(&rhs_y));
    let fitted = AffineTransform {
        m: [[rx[0], rx[1], rx[2]], [ry[0], ry[1], ry[2]]],
    };
    Ok(nd.inverse()?.compose(&fitted.compose(&ns)))
}

pub fn estimate_affine(src: &LandmarkSet, dst: &LandmarkSet) -> Result<AffineTransform> {
    estimate_affine_points(&src.points, &dst.points)
}

/// Output pixel `p` takes the bilinear sample of `img` at `transform⁻¹(p)`.
pub fn warp_image(img: &Image, transform: &AffineTransform, out_w: usize, out_h: usize) -> Result<Image> {
    let inv = transform.inverse()?;
    Ok(Image::from_fn(out_w, out_h, |x, y| {
        let [sx, sy] = inv.apply([x as f64, y as f64]);
        img.sample_bilinear(sx, sy)
    }))
}

/// Frontal reference landmarks in the canonical frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalTemplate {
    pub version: u32,
    pub size: usize,
    pub points: LandmarkSet,
}

impl CanonicalTemplate {
    pub fn standard() -> &'static CanonicalTemplate {
        static TEMPLATE: OnceLock<CanonicalTemplate> = OnceLock::new();
        TEMPLATE.get_or_init(|| {
            serde_json::from_str(include_str!("canonical_template.json")).expect("bundled template is valid")
        })
    }
}

/// Warps a face into the canonical frame; the returned transform maps
/// image coordinates to canonical coordinates.
pub fn align_face(img: &Image, landmarks: &LandmarkSet) -> Result<(Image, AffineTransform)> {
    let t = estimate_affine(landmarks, &CanonicalTemplate::standard().points)?;
    let aligned = warp_image(img, &t, CANONICAL_SIZE, CANONICAL_SIZE)?;
    Ok((aligned, t))
}

/// The central 64x64 crop of the aligned face, as fed to the network.
pub fn aligned_crop(img: &Image, landmarks: &LandmarkSet) -> Result<(Image, AffineTransform)> {
    let (aligned, t) = align_face(img, landmarks)?;
    Ok((aligned.crop(CROP_OFFSET, CROP_OFFSET, CROP_SIZE, CROP_SIZE)?, t))
}

/// A network-sized face placed back onto the original canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct UnwarpedFace {
    pub image: Image,
    /// Row-major; false outside the warped crop quad.
    pub valid: Vec<bool>,
}

/// Inverse of [`align_face`] followed by the center crop: canvas pixel `p`
/// samples `face64` at `transform(p) - CROP_OFFSET`, and is valid when that
/// lands inside the crop's pixel area `[-0.5, 63.5]²`.
pub fn unwarp_face(face64: &Image, transform: &AffineTransform, orig_w: usize, orig_h: usize) -> Result<UnwarpedFace> {
    if face64.dims() != (CROP_SIZE, CROP_SIZE) {
        return Err(Error::InvalidShape(format!(
            "unwarp expects a {CROP_SIZE}x{CROP_SIZE} face, got {:?}",
            face64.dims()
        )));
    }
    transform.inverse()?;
    let to_crop = AffineTransform::translation(-(CROP_OFFSET as f64), -(CROP_OFFSET as f64)).compose(transform);
    let lim = CROP_SIZE as f64 - 0.5;
    let mut valid = Vec::with_capacity(orig_w * orig_h);
    let image = Image::from_fn(orig_w, orig_h, |x, y| {
        let [cx, cy] = to_crop.apply([x as f64, y as f64]);
        let inside = (-0.5..=lim).contains(&cx) && (-0.5..=lim).contains(&cy);
        valid.push(inside);
        if inside {
            face64.sample_bilinear(cx, cy)
        } else {
            [0.0; 3]
        }
    });
    Ok(UnwarpedFace { image, valid })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_points() -> Vec<Point> {
        (0..68).map(|i| [(i % 9) as f64 * 3.0 + 0.1 * i as f64, (i / 9) as f64 * 4.0 - 0.05 * (i * i % 7) as f64]).collect()
    }

    #[test]
    fn mirror_index_is_an_involution_over_the_ibug_pairs() {
        for i in 0..68 {
            assert_eq!(mirror_index(mirror_index(i)), i);
        }
        for (a, b) in [(0, 16), (17, 26), (21, 22), (31, 35), (36, 45), (39, 42), (40, 47), (41, 46), (48, 54), (55, 59), (60, 64), (65, 67)] {
            assert_eq!(mirror_index(a), b);
        }
        for fixed in [8, 27, 30, 33, 51, 57, 62, 66] {
            assert_eq!(mirror_index(fixed), fixed);
        }
    }

    #[test]
    fn identity_and_translation_fits() {
        let p = LandmarkSet::new(grid_points()).unwrap();
        let t = estimate_affine(&p, &p).unwrap();
        assert!(t.max_coefficient_error(&AffineTransform::identity()) < 1e-9);
        let moved = p.transformed(&AffineTransform::translation(5.0, -3.0));
        let t = estimate_affine(&p, &moved).unwrap();
        assert!(t.max_coefficient_error(&AffineTransform::translation(5.0, -3.0)) < 1e-9);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let line: Vec<Point> = (0..68).map(|i| [i as f64, 2.0 * i as f64 + 1.0]).collect();
        let p = LandmarkSet::new(line).unwrap();
        assert!(matches!(estimate_affine(&p, &p), Err(Error::DegenerateLandmarks(_))));
        let same = vec![[3.0, 3.0]; 68];
        let p = LandmarkSet::new(same).unwrap();
        assert!(matches!(estimate_affine(&p, &p), Err(Error::DegenerateLandmarks(_))));
    }

    #[test]
    fn landmark_count_and_finiteness() {
        assert!(LandmarkSet::new(vec![[0.0, 0.0]; 67]).is_err());
        let mut pts = vec![[0.0, 0.0]; 68];
        pts[3][1] = f64::NAN;
        assert!(LandmarkSet::new(pts).is_err());
    }

    #[test]
    fn inverse_and_compose() {
        let t = AffineTransform {
            m: [[1.2, 0.3, 4.0], [-0.2, 0.9, -7.0]],
        };
        let round = t.inverse().unwrap().compose(&t);
        assert!(round.max_coefficient_error(&AffineTransform::identity()) < 1e-12);
        let singular = AffineTransform {
            m: [[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]],
        };
        assert!(matches!(singular.inverse(), Err(Error::DegenerateTransform(_))));
    }

    #[test]
    fn warp_identity_and_integer_shift() {
        let img = Image::from_fn(9, 7, |x, y| [x as f32 * 0.1, y as f32 * 0.1, ((x * y) % 5) as f32 * 0.2]);
        assert_eq!(warp_image(&img, &AffineTransform::identity(), 9, 7).unwrap(), img);
        let shifted = warp_image(&img, &AffineTransform::translation(1.0, 0.0), 9, 7).unwrap();
        for y in 0..7 {
            for x in 1..9 {
                assert_eq!(shifted.pixel(x, y), img.pixel(x - 1, y));
            }
            assert_eq!(shifted.pixel(0, y), img.pixel(0, y));
        }
    }

    #[test]
    fn warp_preserves_constants() {
        let img = Image::filled(20, 20, [0.3, 0.6, 0.9]);
        let t = AffineTransform::rotation_about([10.0, 10.0], 23.0, 1.3);
        let out = warp_image(&img, &t, 31, 17).unwrap();
        assert!(out.data().chunks(3).all(|p| p == [0.3, 0.6, 0.9]));
    }

    #[test]
    fn template_is_symmetric_and_inside_the_crop() {
        let t = CanonicalTemplate::standard();
        assert_eq!(t.size, CANONICAL_SIZE);
        let axis2 = (CANONICAL_SIZE - 1) as f64;
        assert!(t.points.mirrored(axis2).max_deviation(&t.points) < 1e-6);
        let lo = CROP_OFFSET as f64;
        let hi = (CROP_OFFSET + CROP_SIZE - 1) as f64;
        for &[x, y] in t.points.points() {
            assert!((lo..=hi).contains(&x) && (lo..=hi).contains(&y), "({x}, {y})");
        }
    }

    #[test]
    fn identity_unwarp_centers_the_face_on_an_80_canvas() {
        let face = Image::filled(64, 64, [1.0, 0.5, 0.25]);
        let u = unwarp_face(&face, &AffineTransform::identity(), 80, 80).unwrap();
        for y in 0..80 {
            for x in 0..80 {
                let inside = (8..72).contains(&x) && (8..72).contains(&y);
                assert_eq!(u.valid[y * 80 + x], inside, "({x}, {y})");
                assert_eq!(u.image.pixel(x, y), if inside { [1.0, 0.5, 0.25] } else { [0.0; 3] });
            }
        }
    }
}
