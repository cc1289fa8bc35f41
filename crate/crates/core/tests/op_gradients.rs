//! Finite-difference verification of every differentiable op's backward.

use ndarray::IxDyn;
use radenc_core::gradcheck::check_gradients;
use radenc_core::ops;
use radenc_core::rng::Rng;
use radenc_core::tensor::{Arr, Tensor};

fn rand_arr(shape: &[usize], rng: &mut Rng) -> Arr {
    Arr::from_shape_fn(IxDyn(shape), |_| rng.normal())
}

/// FD-check a scalar-valued graph builder against its analytic gradients.
fn check(build: impl Fn(&[Tensor]) -> Tensor, shapes: &[&[usize]], seed: u64) {
    let mut rng = Rng::seed_from(seed);
    let inputs: Vec<Arr> = shapes.iter().map(|s| rand_arr(s, &mut rng)).collect();

    let vars: Vec<Tensor> = inputs.iter().map(|a| Tensor::var(a.clone())).collect();
    let out = build(&vars);
    out.backward();
    let analytic: Vec<Arr> = vars
        .iter()
        .map(|v| v.grad().expect("missing gradient"))
        .collect();

    let loss = |xs: &[Arr]| {
        let vars: Vec<Tensor> = xs.iter().map(|a| Tensor::lit(a.clone()).requires()).collect();
        build(&vars).item()
    };
    check_gradients(loss, &inputs, &analytic, 24, 1e-5, &mut rng);
}

trait Req {
    fn requires(self) -> Tensor;
}
impl Req for Tensor {
    // Re-wrap a literal as a var so from_op keeps building the graph;
    // gradients of these probes are unused.
    fn requires(self) -> Tensor {
        Tensor::var(self.value().clone())
    }
}

#[test]
fn grad_add_mul_broadcast() {
    check(
        |v| ops::mean_all(&ops::mul(&ops::add(&v[0], &v[1]), &v[2])),
        &[&[2, 3, 4], &[4], &[2, 1, 4]],
        1,
    );
}

#[test]
fn grad_sub_scale() {
    check(
        |v| ops::sum_all(&ops::scale(&ops::sub(&v[0], &v[1]), 0.37)),
        &[&[3, 5], &[3, 5]],
        2,
    );
}

#[test]
fn grad_relu_gelu() {
    check(
        |v| ops::mean_all(&ops::gelu(&ops::relu(&v[0]))),
        &[&[4, 7]],
        3,
    );
}

#[test]
fn grad_matmul_2d() {
    check(
        |v| ops::mean_all(&ops::matmul(&v[0], &v[1])),
        &[&[3, 4], &[4, 5]],
        4,
    );
}

#[test]
fn grad_matmul_batched() {
    check(
        |v| ops::mean_all(&ops::matmul(&v[0], &v[1])),
        &[&[2, 3, 4], &[2, 4, 5]],
        5,
    );
}

#[test]
fn grad_matmul_shared_rhs() {
    check(
        |v| ops::mean_all(&ops::matmul(&v[0], &v[1])),
        &[&[2, 3, 4], &[4, 5]],
        6,
    );
}

#[test]
fn grad_linear() {
    check(
        |v| ops::mean_all(&ops::linear(&v[0], &v[1], Some(&v[2]))),
        &[&[2, 3, 6], &[4, 6], &[4]],
        7,
    );
}

#[test]
fn grad_softmax_weighted() {
    check(
        |v| {
            let y = ops::softmax(&v[0], 1);
            ops::sum_all(&ops::mul(&y, &v[1]))
        },
        &[&[3, 6], &[3, 6]],
        8,
    );
}

#[test]
fn grad_log_softmax_weighted() {
    check(
        |v| {
            let y = ops::log_softmax(&v[0], 1);
            ops::sum_all(&ops::mul(&y, &v[1]))
        },
        &[&[3, 6], &[3, 6]],
        9,
    );
}

#[test]
fn grad_layer_norm() {
    check(
        |v| ops::mean_all(&ops::mul(&ops::layer_norm(&v[0], &v[1], &v[2], 1e-6), &v[3])),
        &[&[2, 3, 8], &[8], &[8], &[2, 3, 8]],
        10,
    );
}

#[test]
fn grad_l2_normalize() {
    check(
        |v| ops::sum_all(&ops::mul(&ops::l2_normalize(&v[0], 1e-12), &v[1])),
        &[&[4, 6], &[4, 6]],
        11,
    );
}

#[test]
fn grad_batch_norm_train() {
    check(
        |v| {
            let (y, _, _) = ops::batch_norm_train(&v[0], &v[1], &v[2], 1e-5);
            ops::mean_all(&ops::mul(&y, &v[3]))
        },
        &[&[3, 2, 4, 4], &[2], &[2], &[3, 2, 4, 4]],
        12,
    );
}

#[test]
fn grad_batch_norm_eval() {
    let mut rng = Rng::seed_from(77);
    let rm = rand_arr(&[2], &mut rng);
    let rv = rand_arr(&[2], &mut rng).mapv(|v| v * v + 0.5);
    check(
        move |v| {
            let y = ops::batch_norm_eval(&v[0], &v[1], &v[2], &rm, &rv, 1e-5);
            ops::mean_all(&ops::mul(&y, &v[3]))
        },
        &[&[2, 2, 3, 3], &[2], &[2], &[2, 2, 3, 3]],
        13,
    );
}

#[test]
fn grad_conv2d_stride2() {
    check(
        |v| ops::mean_all(&ops::mul(&ops::conv2d(&v[0], &v[1], Some(&v[2]), 2, 1), &v[3])),
        &[&[2, 3, 8, 8], &[4, 3, 3, 3], &[4], &[2, 4, 4, 4]],
        14,
    );
}

#[test]
fn grad_conv2d_1x1() {
    check(
        |v| ops::mean_all(&ops::conv2d(&v[0], &v[1], None, 1, 0)),
        &[&[2, 3, 5, 5], &[6, 3, 1, 1]],
        15,
    );
}

#[test]
fn grad_bilinear_resize() {
    check(
        |v| ops::mean_all(&ops::mul(&ops::bilinear2d(&v[0], 7, 9), &v[1])),
        &[&[1, 2, 4, 5], &[1, 2, 7, 9]],
        16,
    );
}

#[test]
fn grad_reshape_permute_narrow_concat() {
    check(
        |v| {
            let a = ops::permute(&v[0], &[0, 2, 1]);
            let b = ops::reshape(&a, &[4, 6]);
            let c = ops::narrow(&b, 0, 1, 2);
            let d = ops::concat(&[c, ops::narrow(&v[1], 0, 0, 2)], 1);
            ops::mean_all(&ops::mul(&d, &d))
        },
        &[&[2, 3, 4], &[3, 2]],
        17,
    );
}

#[test]
fn grad_gather_nll() {
    check(
        |v| {
            let picked = ops::gather_rows(&v[0], &[2, 0, 1]);
            let logp = ops::log_softmax(&picked, 1);
            let s = ops::nll_sum(&logp, &[1, 3, 0], Some(&[true, true, false]));
            ops::scale(&s, 0.5)
        },
        &[&[4, 5]],
        18,
    );
}

#[test]
fn grad_mean_axis() {
    check(
        |v| ops::sum_all(&ops::mul(&ops::mean_axis_keep(&v[0], 1), &v[1])),
        &[&[3, 5, 2], &[3, 1, 2]],
        19,
    );
}

#[test]
fn grad_accumulates_on_reused_tensor() {
    // x used twice: d/dx (x*x sum) = 2x summed through two paths.
    let x = Tensor::var(Arr::from_elem(IxDyn(&[3]), 2.0));
    let y = ops::sum_all(&ops::mul(&x, &x));
    y.backward();
    let g = x.grad().unwrap();
    for v in g.iter() {
        assert!((v - 4.0).abs() < 1e-12);
    }
}

#[test]
fn constants_build_no_tape() {
    let a = Tensor::lit(Arr::zeros(IxDyn(&[2, 2])));
    let b = Tensor::lit(Arr::zeros(IxDyn(&[2, 2])));
    let y = ops::matmul(&a, &b);
    assert!(!y.requires_grad());
}
