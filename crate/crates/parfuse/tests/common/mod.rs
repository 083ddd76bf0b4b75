//! Shared test oracles.

use parfuse::tensor::nn::Parameter;
use parfuse::tensor::{Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Central finite differences (h = 1e-5, f64) against the taped gradient.
///
/// `f` must build a scalar loss from the given tensor using taped ops only.
/// Checks every coordinate when the input is small, otherwise a seeded random
/// subset of 64. `tol` is the maximum allowed relative error per coordinate.
pub fn check_gradient<F>(label: &str, shape: &[usize], seed: u64, tol: f64, f: F)
where
    F: Fn(&Tensor) -> Tensor,
{
    let n: usize = shape.iter().product();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    check_gradient_at(label, shape, &x0, seed ^ 0x5eed, tol, f);
}

/// Same as [`check_gradient`] but at a caller-chosen evaluation point.
pub fn check_gradient_at<F>(
    label: &str,
    shape: &[usize],
    x0: &[f64],
    coord_seed: u64,
    tol: f64,
    f: F,
) where
    F: Fn(&Tensor) -> Tensor,
{
    let n = x0.len();
    let h = 1e-5;

    let tape = Tape::new();
    let param = Parameter::new(
        "gradcheck.x",
        Tensor::from_vec(shape.to_vec(), x0.to_vec()).unwrap(),
    );
    let loss = f(&param.leaf(Some(&tape)));
    assert_eq!(loss.len(), 1, "{label}: loss must be scalar");
    let grads = tape.backward(&loss).unwrap();
    let analytic = param.grad_from(&tape, &grads);

    let eval = |x: &[f64]| -> f64 {
        let t = Tensor::from_vec(shape.to_vec(), x.to_vec()).unwrap();
        f(&t).item().unwrap()
    };

    let coords: Vec<usize> = if n <= 64 {
        (0..n).collect()
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(coord_seed);
        (0..64).map(|_| rng.gen_range(0..n)).collect()
    };

    let mut worst = 0.0f64;
    for &i in &coords {
        let mut xp = x0.to_vec();
        xp[i] += h;
        let mut xm = x0.to_vec();
        xm[i] -= h;
        let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
        let rel = (fd - analytic[i]).abs() / denom;
        worst = worst.max(rel);
        assert!(
            rel < tol,
            "{label}: coord {i} fd {fd:.9e} vs taped {:.9e} (rel {rel:.3e} > {tol:.1e})",
            analytic[i]
        );
    }
    let _ = worst;
}

/// Random projection loss: `sum(out * w)` with a fixed seeded weight tensor,
/// so every output element contributes with a distinct coefficient.
pub fn projection_loss(out: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = Tensor::from_vec(out.shape().to_vec(), w).unwrap();
    out.mul(&w).unwrap().sum_all().unwrap()
}

/// Monte-Carlo IoU oracle: uniform point sampling over the joint bounding box
/// of both footprints.
pub fn monte_carlo_iou(
    a: &parfuse::geometry::RotatedBox,
    b: &parfuse::geometry::RotatedBox,
    samples: usize,
    seed: u64,
) -> f64 {
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for corner in a.corners().iter().chain(b.corners().iter()) {
        lo.0 = lo.0.min(corner.0);
        lo.1 = lo.1.min(corner.1);
        hi.0 = hi.0.max(corner.0);
        hi.1 = hi.1.max(corner.1);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut inter = 0u64;
    let mut union = 0u64;
    for _ in 0..samples {
        let p = (rng.gen_range(lo.0..hi.0), rng.gen_range(lo.1..hi.1));
        let ina = a.contains(p);
        let inb = b.contains(p);
        if ina && inb {
            inter += 1;
        }
        if ina || inb {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Seeded random box with moderate extents near the origin.
pub fn random_box(rng: &mut ChaCha12Rng) -> parfuse::geometry::RotatedBox {
    parfuse::geometry::RotatedBox::new(
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(0.5..2.5),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .unwrap()
}
