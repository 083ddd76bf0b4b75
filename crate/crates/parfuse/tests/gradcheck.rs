//! Finite-difference gradient checks for every differentiable op.

mod common;

use common::{check_gradient, projection_loss};
use parfuse::tensor::nn::{BatchNorm2d, Fwd, ParamRegistry};
use parfuse::tensor::Tensor;

const TOL: f64 = 1e-6;
const TOL_COMPOSITE: f64 = 1e-4;

fn fixed(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

#[test]
fn grad_matmul_wrt_lhs_sum_loss() {
    // 4x3 * 3x5, gradient of sum(output) w.r.t. the left operand.
    let b = fixed(&[3, 5], 11);
    check_gradient("matmul lhs", &[4, 3], 1, TOL, |a| {
        a.matmul(&b).unwrap().sum_all().unwrap()
    });
}

#[test]
fn grad_matmul_wrt_rhs() {
    let a = fixed(&[4, 3], 12);
    check_gradient("matmul rhs", &[3, 5], 2, TOL, |b| {
        projection_loss(&a.matmul(b).unwrap(), 21)
    });
}

#[test]
fn grad_matmul_batched_lhs() {
    let b = fixed(&[3, 4], 13);
    check_gradient("matmul batched", &[2, 5, 3], 3, TOL, |a| {
        projection_loss(&a.matmul(&b).unwrap(), 22)
    });
}

#[test]
fn grad_linear_all_inputs() {
    let w = fixed(&[4, 6], 14);
    let bias = fixed(&[6], 15);
    check_gradient("linear x", &[3, 4], 4, TOL, |x| {
        projection_loss(&x.linear(&w, &bias).unwrap(), 23)
    });
    let x = fixed(&[3, 4], 16);
    check_gradient("linear w", &[4, 6], 5, TOL, |w| {
        projection_loss(&x.linear(w, &bias).unwrap(), 24)
    });
    check_gradient("linear bias", &[6], 6, TOL, |b| {
        projection_loss(&x.linear(&w, b).unwrap(), 25)
    });
}

#[test]
fn grad_bmm_both_sides() {
    let b = fixed(&[2, 3, 4], 17);
    check_gradient("bmm lhs", &[2, 5, 3], 7, TOL, |a| {
        projection_loss(&a.bmm(&b).unwrap(), 26)
    });
    let a = fixed(&[2, 5, 3], 18);
    check_gradient("bmm rhs", &[2, 3, 4], 8, TOL, |b| {
        projection_loss(&a.bmm(b).unwrap(), 27)
    });
}

#[test]
fn grad_bmm_t_both_sides() {
    let b = fixed(&[2, 4, 3], 19);
    check_gradient("bmm_t lhs", &[2, 5, 3], 9, TOL, |a| {
        projection_loss(&a.bmm_t(&b).unwrap(), 28)
    });
    let a = fixed(&[2, 5, 3], 20);
    check_gradient("bmm_t rhs", &[2, 4, 3], 10, TOL, |b| {
        projection_loss(&a.bmm_t(b).unwrap(), 29)
    });
}

#[test]
fn grad_conv2d_all_inputs() {
    // Spec-sized case: 1x5x5x2 input, 3x3x2x3 kernel.
    let w = fixed(&[3, 3, 2, 3], 30);
    let bias = fixed(&[3], 31);
    check_gradient("conv2d x", &[1, 5, 5, 2], 32, TOL, |x| {
        x.conv2d(&w, Some(&bias), 1, 1).unwrap().sum_all().unwrap()
    });
    let x = fixed(&[1, 5, 5, 2], 33);
    check_gradient("conv2d w", &[3, 3, 2, 3], 34, TOL, |w| {
        projection_loss(&x.conv2d(w, Some(&bias), 1, 1).unwrap(), 40)
    });
    check_gradient("conv2d bias", &[3], 35, TOL, |b| {
        projection_loss(&x.conv2d(&w, Some(b), 1, 1).unwrap(), 41)
    });
}

#[test]
fn grad_conv2d_strided() {
    let w = fixed(&[3, 3, 2, 2], 36);
    check_gradient("conv2d stride 2", &[1, 6, 6, 2], 37, TOL, |x| {
        projection_loss(&x.conv2d(&w, None, 1, 2).unwrap(), 42)
    });
}

#[test]
fn grad_softmax() {
    check_gradient("softmax len-7", &[7], 50, TOL, |x| {
        projection_loss(&x.softmax(0).unwrap(), 51)
    });
    check_gradient("softmax axis 1", &[3, 4, 2], 52, TOL, |x| {
        projection_loss(&x.softmax(1).unwrap(), 53)
    });
}

#[test]
fn grad_elementwise_unary() {
    check_gradient("relu", &[17], 60, TOL, |x| {
        projection_loss(&x.relu().unwrap(), 61)
    });
    check_gradient("exp", &[9], 62, TOL, |x| {
        projection_loss(&x.exp().unwrap(), 63)
    });
    check_gradient("sigmoid", &[9], 64, TOL, |x| {
        projection_loss(&x.sigmoid().unwrap(), 65)
    });
    check_gradient("softplus", &[9], 66, TOL, |x| {
        projection_loss(&x.softplus().unwrap(), 67)
    });
    check_gradient("huber", &[9], 68, TOL, |x| {
        projection_loss(&x.huber(0.3).unwrap(), 69)
    });
}

#[test]
fn grad_elementwise_binary() {
    let other = fixed(&[8], 70);
    check_gradient("add", &[8], 71, TOL, |x| {
        projection_loss(&x.add(&other).unwrap(), 72)
    });
    check_gradient("sub", &[8], 73, TOL, |x| {
        projection_loss(&x.sub(&other).unwrap(), 74)
    });
    check_gradient("mul", &[8], 75, TOL, |x| {
        projection_loss(&x.mul(&other).unwrap(), 76)
    });
    check_gradient("mul both sides via square", &[8], 77, TOL, |x| {
        projection_loss(&x.mul(x).unwrap(), 78)
    });
    check_gradient("scale + add_scalar", &[8], 79, TOL, |x| {
        projection_loss(&x.scale(-2.5).unwrap().add_scalar(0.7).unwrap(), 80)
    });
}

#[test]
fn grad_shape_ops() {
    check_gradient("reshape", &[3, 4], 90, TOL, |x| {
        projection_loss(&x.reshape(vec![2, 6]).unwrap(), 91)
    });
    check_gradient("permute", &[2, 3, 4], 92, TOL, |x| {
        projection_loss(&x.permute(&[2, 0, 1]).unwrap(), 93)
    });
    let other = fixed(&[2, 3], 94);
    check_gradient("concat", &[2, 3], 95, TOL, |x| {
        projection_loss(&Tensor::concat(&[x, &other, x], 1).unwrap(), 96)
    });
    check_gradient("select0", &[3, 4], 97, TOL, |x| {
        projection_loss(&x.select0(1).unwrap(), 98)
    });
    check_gradient("stack0", &[2, 3], 99, TOL, |x| {
        projection_loss(&Tensor::stack0(&[x, x]).unwrap(), 100)
    });
}

#[test]
fn grad_reductions() {
    check_gradient("sum_all", &[11], 110, TOL, |x| x.sum_all().unwrap());
    check_gradient("mean_all", &[11], 111, TOL, |x| x.mean_all().unwrap());
}

#[test]
fn grad_bilinear_sample() {
    let coords = vec![
        (0.3, 0.7),
        (1.2, 0.1),
        (2.4, 1.9),
        (-0.4, 0.5), // partially out of bounds
        (0.0, 2.0),
        (1.5, 1.5),
    ];
    check_gradient("bilinear_sample", &[4, 3, 2], 120, TOL, |x| {
        let (out, _) = x.bilinear_sample(&coords, 2, 3).unwrap();
        projection_loss(&out, 121)
    });
}

#[test]
fn grad_batchnorm_train_and_eval() {
    // Composite-tolerance check through batch statistics.
    // Composite tolerance through batch statistics; gamma/beta stay untaped,
    // the input tensor's own tape membership carries through the op.
    check_gradient("batchnorm train", &[2, 3, 3, 4], 130, TOL_COMPOSITE, |x| {
        let mut reg = ParamRegistry::new();
        let bn = BatchNorm2d::new(&mut reg, "bn", 4).unwrap();
        let y = bn
            .forward(
                x,
                &Fwd {
                    tape: None,
                    train: true,
                },
            )
            .unwrap();
        projection_loss(&y, 131)
    });

    check_gradient("batchnorm eval", &[2, 3, 3, 4], 132, TOL, |x| {
        let mut reg = ParamRegistry::new();
        let bn = BatchNorm2d::new(&mut reg, "bn", 4).unwrap();
        bn.running_mean
            .set_data(vec![0.1, -0.2, 0.05, 0.3])
            .unwrap();
        bn.running_var.set_data(vec![1.5, 0.7, 2.0, 1.0]).unwrap();
        let y = bn
            .forward(
                x,
                &Fwd {
                    tape: None,
                    train: false,
                },
            )
            .unwrap();
        projection_loss(&y, 133)
    });
}
