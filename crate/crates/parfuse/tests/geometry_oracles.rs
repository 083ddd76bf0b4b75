//! Oracle and property tests for the geometry layer.

mod common;

use common::{monte_carlo_iou, random_box};
use parfuse::geometry::{relative_pose, rotated_iou, warp_feature, GridSpec, Pose2D, RotatedBox};
use parfuse::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[test]
fn iou_matches_monte_carlo_on_100_random_pairs() {
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    for i in 0..100 {
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let exact = rotated_iou(&a, &b);
        let mc = monte_carlo_iou(&a, &b, 1_000_000, 5000 + i);
        assert!(
            (exact - mc).abs() < 0.01,
            "pair {i}: clipped {exact:.5} vs monte-carlo {mc:.5}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_exactly_symmetric(seed in 0u64..10_000) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let ab = rotated_iou(&a, &b);
        let ba = rotated_iou(&b, &a);
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn iou_is_rotation_invariant(seed in 0u64..10_000, angle in -3.1f64..3.1) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let base = rotated_iou(&a, &b);

        let rotate = |r: &RotatedBox| {
            let (s, c) = angle.sin_cos();
            RotatedBox::new(
                c * r.cx - s * r.cy,
                s * r.cx + c * r.cy,
                r.cz,
                r.w,
                r.l,
                r.h,
                r.yaw + angle,
            )
            .unwrap()
        };
        let turned = rotated_iou(&rotate(&a), &rotate(&b));
        prop_assert!((base - turned).abs() < 1e-9, "{base} vs {turned}");
    }

    #[test]
    fn relative_pose_invariant_under_common_rigid_transform(
        seed in 0u64..10_000,
        tx in -50.0f64..50.0,
        ty in -50.0f64..50.0,
        phi in -3.1f64..3.1,
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut pose = || Pose2D::new(
            rng.gen_range(-20.0..20.0),
            rng.gen_range(-20.0..20.0),
            rng.gen_range(-3.1..3.1),
        );
        let ego = pose();
        let aux = pose();
        let (d0, t0) = relative_pose(&ego, &aux);

        let transform = |p: &Pose2D| {
            let (s, c) = phi.sin_cos();
            Pose2D::new(c * p.x - s * p.y + tx, s * p.x + c * p.y + ty, p.yaw + phi)
        };
        let (d1, t1) = relative_pose(&transform(&ego), &transform(&aux));
        prop_assert!((d0 - d1).abs() <= 1e-9 * d0.max(1.0), "distance {d0} vs {d1}");
        let dt = parfuse::geometry::normalize_angle(t0 - t1).abs();
        prop_assert!(dt < 1e-12, "bearing {t0} vs {t1}");
    }
}

/// Low-frequency random field sampled at grid cell centers.
fn smooth_field(grid: &GridSpec, seed: u64) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(-0.25..0.25), // kx, wavelength >= ~25 m
                rng.gen_range(-0.25..0.25), // ky
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.2..0.5),
            )
        })
        .collect();
    let mut data = Vec::with_capacity(grid.h * grid.w);
    for r in 0..grid.h {
        for c in 0..grid.w {
            let (x, y) = grid.cell_center(r, c);
            let v: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (kx * x + ky * y + ph).sin())
                .sum();
            data.push(v);
        }
    }
    Tensor::from_vec(vec![grid.h, grid.w, 1], data).unwrap()
}

#[test]
fn warp_roundtrip_recovers_interior_of_smooth_fields() {
    let grid = GridSpec::new((-12.8, 12.8), (-6.4, 6.4), 0.4).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(77);
    for trial in 0..8 {
        let src = smooth_field(&grid, 100 + trial);
        let a = Pose2D::new(0.0, 0.0, 0.0);
        let b = Pose2D::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-0.25..0.25),
        );
        let (fwd, mask_fwd) = warp_feature(&src, &a, &b, &grid).unwrap();
        let (back, mask_back) = warp_feature(&fwd, &b, &a, &grid).unwrap();

        // Trust only cells whose round trip had full bilinear support: warp
        // the forward coverage mask backwards and require it to stay 1.
        let mask_t = Tensor::from_vec(vec![grid.h, grid.w, 1], mask_fwd.clone()).unwrap();
        let (trust, _) = warp_feature(&mask_t, &b, &a, &grid).unwrap();

        let mut checked = 0usize;
        for i in 0..grid.h * grid.w {
            if mask_back[i] == 1.0 && trust.data()[i] > 0.999 {
                let err = (back.data()[i] - src.data()[i]).abs();
                assert!(err < 0.02, "trial {trial}, cell {i}: error {err}");
                checked += 1;
            }
        }
        assert!(
            checked > grid.h * grid.w / 2,
            "round trip covered too little interior ({checked} cells)"
        );
    }
}
