//! Face masks from landmarks, boundary feathering and splicing.
//!
//! The mask is the convex hull of the brows, the lower outer lip and four
//! interpolated points on each side of the face between the outer brow end
//! and the mouth corner. Side points follow
//! `x_i = x_{i-1} + i/15 (x_5 - x_0)`, `y_i = y_0 + i/5 (y_5 - y_0)`, so
//! they bow outward toward the cheeks. They are evaluated exactly in rational
//! arithmetic and rounded once.

use std::io::BufWriter;
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;

use crate::error::{Error, Result};
use crate::facegeom::{LandmarkSet, Point};
use crate::image::{Image, CHANNELS};

/// Brow landmarks.
pub const BROW_POINTS: std::ops::RangeInclusive<usize> = 17..=26;
/// Mouth corners and the lower outer lip.
pub const MOUTH_BOTTOM_POINTS: [usize; 7] = [48, 54, 55, 56, 57, 58, 59];
/// `(p0, p5)` landmark pairs of the left and right face sides.
pub const SIDE_ENDPOINTS: [(usize, usize); 2] = [(17, 48), (26, 54)];
/// Feather sigma per pixel of face width.
pub const FEATHER_FRACTION: f64 = 0.02;
pub const MIN_FEATHER_SIGMA: f64 = 1.0;
/// Kernel support radius in sigmas.
pub const FEATHER_RADIUS: f64 = 3.0;

fn exact(v: f64) -> Result<BigRational> {
    BigRational::from_float(v).ok_or_else(|| Error::InvalidInput(format!("non-finite coordinate {v}")))
}

fn round(v: &BigRational) -> f64 {
    v.to_f64().expect("finite rational")
}

/// The four interior side points between `p0` and `p5`.
///
/// ```
/// use deid_core::maskblend::interpolate_side;
/// let p = interpolate_side([10.0, 20.0], [25.0, 45.0]).unwrap();
/// assert_eq!(p, [[11.0, 25.0], [13.0, 30.0], [16.0, 35.0], [20.0, 40.0]]);
/// ```
pub fn interpolate_side(p0: Point, p5: Point) -> Result<[Point; 4]> {
    let (x0, y0) = (exact(p0[0])?, exact(p0[1])?);
    let (dx, dy) = (exact(p5[0])? - &x0, exact(p5[1])? - &y0);
    let mut out = [[0.0; 2]; 4];
    let mut x = x0;
    for (i, p) in (1i64..=4).zip(out.iter_mut()) {
        x += &dx * BigRational::new(BigInt::from(i), BigInt::from(15));
        let y = &y0 + &dy * BigRational::new(BigInt::from(i), BigInt::from(5));
        *p = [round(&x), round(&y)];
    }
    Ok(out)
}

/// Side endpoints plus interpolated points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryPoints {
    pub p0: Point,
    pub p5: Point,
    pub interior: [Point; 4],
}

impl BoundaryPoints {
    pub fn new(p0: Point, p5: Point) -> Result<Self> {
        Ok(BoundaryPoints {
            p0,
            p5,
            interior: interpolate_side(p0, p5)?,
        })
    }
}

/// Points whose convex hull is the face mask.
pub fn mask_points(lm: &LandmarkSet) -> Result<Vec<Point>> {
    let mut pts: Vec<Point> = BROW_POINTS.map(|i| lm.point(i)).collect();
    pts.extend(MOUTH_BOTTOM_POINTS.iter().map(|&i| lm.point(i)));
    for (a, b) in SIDE_ENDPOINTS {
        pts.extend(interpolate_side(lm.point(a), lm.point(b))?);
    }
    Ok(pts)
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise hull (in y-up terms) without collinear vertices.
pub fn convex_hull(points: &[Point]) -> Result<Vec<Point>> {
    let mut p: Vec<Point> = points.to_vec();
    if p.iter().any(|q| !q[0].is_finite() || !q[1].is_finite()) {
        return Err(Error::InvalidInput("hull point is not finite".into()));
    }
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return Err(Error::DegenerateMask(format!("{} distinct hull points", p.len())));
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 { Box::new(p.iter()) } else { Box::new(p.iter().rev()) };
        for &q in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    if hull.len() < 3 || polygon_area(&hull) <= 1e-9 {
        return Err(Error::DegenerateMask("hull points are collinear".into()));
    }
    Ok(hull)
}

pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Distance from `p` to a convex polygon; zero inside.
pub fn distance_to_polygon(p: Point, poly: &[Point]) -> f64 {
    let n = poly.len();
    let mut inside = true;
    let mut best = f64::INFINITY;
    let sign = if (0..n).map(|i| cross(poly[i], poly[(i + 1) % n], poly[(i + 2) % n])).sum::<f64>() >= 0.0 {
        1.0
    } else {
        -1.0
    };
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if sign * cross(a, b, p) < 0.0 {
            inside = false;
        }
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
        best = best.min((p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy));
    }
    if inside {
        0.0
    } else {
        best
    }
}

/// Per-pixel alpha in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceMask {
    width: usize,
    height: usize,
    alpha: Vec<f32>,
}

impl FaceMask {
    pub fn new(width: usize, height: usize, alpha: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || alpha.len() != width * height {
            return Err(Error::InvalidShape(format!("{} alpha values for {width}x{height}", alpha.len())));
        }
        if let Some(a) = alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidInput(format!("alpha {a} outside [0, 1]")));
        }
        Ok(FaceMask { width, height, alpha })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        FaceMask::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn alpha(&self) -> &[f32] {
        &self.alpha
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.alpha[y * self.width + x]
    }

    /// Sum of alpha.
    pub fn mass(&self) -> f64 {
        self.alpha.iter().map(|&a| a as f64).sum()
    }

    /// 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self.alpha.iter().map(|&a| (a * 255.0).round() as u8).collect();
        enc.write_header()
            .and_then(|mut w| w.write_image_data(&bytes))
            .map_err(|e| Error::format(path, e))
    }
}

/// Binary mask of pixels whose centers `(x, y)` fall inside `poly`.
///
/// Each row `y` is filled over `[x_left, x_right)`, with edges counted on
/// the half-open interval `[y_min, y_max)`.
pub fn rasterize_polygon(poly: &[Point], width: usize, height: usize) -> Result<FaceMask> {
    let mut alpha = vec![0.0f32; width * height];
    let n = poly.len();
    let mut xs = Vec::with_capacity(n);
    for y in 0..height {
        let yc = y as f64;
        xs.clear();
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            if (a[1] <= yc && yc < b[1]) || (b[1] <= yc && yc < a[1]) {
                xs.push(a[0] + (yc - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            let lo = span[0].ceil().max(0.0);
            let hi = span[1].ceil().min(width as f64);
            if hi > lo {
                let row = y * width;
                alpha[row + lo as usize..row + hi as usize].fill(1.0);
            }
        }
    }
    FaceMask::new(width, height, alpha)
}

/// Binary face mask for an image of `width x height`.
pub fn build_mask(lm: &LandmarkSet, width: usize, height: usize) -> Result<FaceMask> {
    let hull = convex_hull(&mask_points(lm)?)?;
    rasterize_polygon(&hull, width, height)
}

/// Convex hull used by [`build_mask`].
pub fn mask_hull(lm: &LandmarkSet) -> Result<Vec<Point>> {
    convex_hull(&mask_points(lm)?)
}

pub fn feather_sigma(face_width_px: f64) -> f64 {
    (FEATHER_FRACTION * face_width_px).max(MIN_FEATHER_SIGMA)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Normalized kernel taps `(dx, dy, weight)`: the Gaussian integrated over
/// each pixel along each axis, restricted to a disk of radius `3 sigma`.
pub fn feather_kernel(sigma: f64) -> Vec<(isize, isize, f64)> {
    let radius = FEATHER_RADIUS * sigma;
    let r = radius.floor() as isize;
    let axis: Vec<f64> = (-r..=r)
        .map(|k| normal_cdf((k as f64 + 0.5) / sigma) - normal_cdf((k as f64 - 0.5) / sigma))
        .collect();
    let mut taps = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= radius * radius {
                taps.push((dx, dy, axis[(dx + r) as usize] * axis[(dy + r) as usize]));
            }
        }
    }
    let total: f64 = taps.iter().map(|t| t.2).sum();
    taps.iter_mut().for_each(|t| t.2 /= total);
    taps
}

/// Gaussian-feathered mask with `sigma = max(1, 0.02 * face_width_px)`.
pub fn feather(mask: &FaceMask, face_width_px: f64) -> FaceMask {
    feather_with_sigma(mask, feather_sigma(face_width_px))
}

/// Pixels outside the image count as zero; alpha stays exactly zero farther
/// than `3 sigma` from the support.
pub fn feather_with_sigma(mask: &FaceMask, sigma: f64) -> FaceMask {
    let (w, h) = (mask.width, mask.height);
    let taps = feather_kernel(sigma);
    let r = (FEATHER_RADIUS * sigma).floor() as usize;
    let mut out = vec![0.0f32; w * h];
    let support = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| mask.get(x, y) != 0.0);
    let Some((x0, y0, x1, y1)) = support.fold(None, |acc: Option<(usize, usize, usize, usize)>, (x, y)| {
        Some(match acc {
            None => (x, y, x, y),
            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
        })
    }) else {
        return FaceMask::new(w, h, out).expect("valid");
    };
    for y in y0.saturating_sub(r)..(y1 + r + 1).min(h) {
        for x in x0.saturating_sub(r)..(x1 + r + 1).min(w) {
            let mut acc = 0.0;
            for &(dx, dy, wt) in &taps {
                let (sx, sy) = (x as isize + dx, y as isize + dy);
                if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                    acc += wt * mask.alpha[sy as usize * w + sx as usize] as f64;
                }
            }
            out[y * w + x] = acc.clamp(0.0, 1.0) as f32;
        }
    }
    FaceMask::new(w, h, out).expect("values clamped to [0, 1]")
}

/// `alpha * synthesized + (1 - alpha) * original`.
pub fn splice(original: &Image, synthesized: &Image, mask: &FaceMask) -> Result<Image> {
    if original.dims() != synthesized.dims() || original.dims() != (mask.width, mask.height) {
        return Err(Error::InvalidShape(format!(
            "splice of {:?} into {:?} with mask {}x{}",
            synthesized.dims(),
            original.dims(),
            mask.width,
            mask.height
        )));
    }
    let data = original
        .data()
        .chunks_exact(CHANNELS)
        .zip(synthesized.data().chunks_exact(CHANNELS))
        .zip(&mask.alpha)
        .flat_map(|((o, s), &a)| {
            let blend = move |c: usize| {
                if a == 0.0 {
                    o[c]
                } else if a == 1.0 {
                    s[c]
                } else {
                    a * s[c] + (1.0 - a) * o[c]
                }
            };
            [blend(0), blend(1), blend(2)]
        })
        .collect();
    Image::from_raw(original.width(), original.height(), data)
}
