use proptest::prelude::*;

use deid_core::evalkit::ssim;
use deid_core::facegeom::{estimate_affine_points, mirror_index, warp_image, AffineTransform, Point};
use deid_core::image::Image;
use deid_core::maskblend::{feather_with_sigma, interpolate_side, rasterize_polygon, splice, FaceMask};
use deid_core::rng;
use deid_core::tensor::{Tape, Tensor};
use deid_core::trainer::{augment, AugmentConfig};

fn coord() -> impl Strategy<Value = f64> {
    -1e4f64..1e4
}

fn image(w: usize, h: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(0.0f32..=1.0, w * h * 3).prop_map(move |d| Image::from_raw(w, h, d).unwrap())
}

fn monotone(v: &[f64]) -> bool {
    let up = v[v.len() - 1] >= v[0];
    v.windows(2).all(|w| if up { w[0] <= w[1] } else { w[0] >= w[1] })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn side_points_are_monotone(x0 in coord(), y0 in coord(), x5 in coord(), y5 in coord()) {
        let p = interpolate_side([x0, y0], [x5, y5]).unwrap();
        let xs = [x0, p[0][0], p[1][0], p[2][0], p[3][0], x5];
        let ys = [y0, p[0][1], p[1][1], p[2][1], p[3][1], y5];
        prop_assert!(xs.iter().chain(&ys).all(|v| v.is_finite()));
        prop_assert!(monotone(&xs) && monotone(&ys));
    }

    #[test]
    fn mirror_index_is_an_involution(i in 0usize..68) {
        prop_assert_eq!(mirror_index(mirror_index(i)), i);
    }

    #[test]
    fn affine_fit_is_exact_on_consistent_points(
        pts in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..30),
        a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, d in -3.0f64..3.0,
        tx in -100.0f64..100.0, ty in -100.0f64..100.0,
    ) {
        let src: Vec<Point> = pts.iter().map(|&(x, y)| [x, y]).collect();
        let t = AffineTransform { m: [[a, b, tx], [c, d, ty]] };
        let dst: Vec<Point> = src.iter().map(|&p| t.apply(p)).collect();
        if let Ok(est) = estimate_affine_points(&src, &dst) {
            prop_assert!(est.max_coefficient_error(&t) <= 1e-6);
        }
    }

    #[test]
    fn warping_preserves_constant_images(r in 0.0f32..=1.0, g in 0.0f32..=1.0, deg in -40.0f64..40.0, s in 0.5f64..2.0) {
        let img = Image::filled(20, 17, [r, g, 0.25]);
        let t = AffineTransform::rotation_about([9.5, 8.0], deg, s);
        let out = warp_image(&img, &t, 23, 19).unwrap();
        prop_assert!(out.data().chunks(3).all(|p| p == [r, g, 0.25]));
    }

    #[test]
    fn ssim_is_symmetric_and_reflexive(a in image(16, 14), b in image(16, 14)) {
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
    }

    #[test]
    fn splice_stays_between_its_inputs(a in image(6, 5), b in image(6, 5), alpha in proptest::collection::vec(0.0f32..=1.0, 30)) {
        let m = FaceMask::new(6, 5, alpha.clone()).unwrap();
        let out = splice(&a, &b, &m).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            let (x, y) = (a.data()[i], b.data()[i]);
            prop_assert!(*v >= x.min(y) - 1e-6 && *v <= x.max(y) + 1e-6);
            if alpha[i / 3] == 0.0 {
                prop_assert_eq!(v.to_bits(), x.to_bits());
            }
        }
    }

    #[test]
    fn feathered_alpha_is_bounded_and_local(
        cx in 10.0f64..30.0, cy in 10.0f64..30.0, r in 2.0f64..8.0, sigma in 1.0f64..3.0,
    ) {
        let poly: Vec<Point> = (0..7).map(|k| {
            let t = k as f64 / 7.0 * std::f64::consts::TAU;
            [cx + r * t.cos(), cy + r * t.sin()]
        }).collect();
        let m = rasterize_polygon(&poly, 40, 40).unwrap();
        let f = feather_with_sigma(&m, sigma);
        prop_assert!(f.alpha().iter().all(|a| (0.0..=1.0).contains(a)));
        for y in 0..40 {
            for x in 0..40 {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                if d > r + 3.0 * sigma + 1e-9 {
                    prop_assert_eq!(f.get(x, y), 0.0);
                }
            }
        }
    }

    #[test]
    fn augmentation_output_is_in_range(seed in any::<u64>()) {
        let face = Image::from_fn(80, 80, |x, y| [((x * 7 + y) % 11) as f32 / 10.0, (y % 3) as f32 / 2.0, 1.0]);
        let out = augment(&face, &AugmentConfig::default(), &mut rng::stream(seed, &[]));
        prop_assert_eq!(out.dims(), (64, 64));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pixel_shuffle_permutes_values(vals in proptest::collection::vec(-5.0f64..5.0, 2 * 3 * 2 * 8)) {
        let t = Tensor::new(&[2, 3, 2, 8], vals.clone()).unwrap().with_grad();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t);
        let y = tape.pixel_shuffle(x).unwrap();
        prop_assert_eq!(tape.shape(y), &[2, 6, 4, 2][..]);
        let mut a = vals.clone();
        let mut b = tape.value(y).to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        prop_assert!(g.get(x).unwrap().iter().all(|&v| v == 1.0));
    }
}
