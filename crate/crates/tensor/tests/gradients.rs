//! Finite-difference checks of every differentiable primitive, 10 seeds each.

use ac2d_tensor::{grad_check, Conv2dSpec, GradCheckOptions, Graph, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;

fn opts() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-5,
        ..Default::default()
    }
}

/// Weighted sum so that every output element gets a distinct upstream grad.
fn probe<'g>(y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = y.graph().constant(Tensor::randn(&y.shape(), 1.0, &mut rng));
    Ok(y.mul(w)?.sum())
}

fn check<F>(name: &str, tol: f64, make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, f: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>> + Copy,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make_inputs(&mut rng);
        let report = grad_check(
            |g, v| {
                let y = f(g, v)?;
                probe(y, seed)
            },
            &inputs,
            &opts(),
        )
        .unwrap();
        assert!(
            report.max_rel_error < tol,
            "{name} seed {seed}: {report:?}"
        );
    }
}

fn randn(shape: &[usize]) -> impl Fn(&mut ChaCha8Rng) -> Tensor<f64> + '_ {
    move |rng| Tensor::randn(shape, 1.0, rng)
}

#[test]
fn matmul_gradient_of_sum_is_ones_times_b_transposed() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
    let g = Graph::new();
    let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
    let grads = g.backward(va.matmul(vb).unwrap().sum()).unwrap();
    let da = grads.get(va).unwrap();
    // (ones 5x3 * b^T)[i][k] = sum_j b[k][j]
    for i in 0..5 {
        for k in 0..4 {
            let want: f64 = (0..3).map(|j| b.data()[k * 3 + j]).sum();
            assert!((da.data()[i * 4 + k] - want).abs() < 1e-12);
        }
    }
    // and the same against central differences at step 1e-6
    let fd = GradCheckOptions {
        step: 1e-6,
        ..Default::default()
    };
    let report = grad_check(|_, v| Ok(v[0].matmul(v[1])?.sum()), &[a, b], &fd).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn matmul_batched_forms() {
    check("matmul paired", 1e-6, |r| vec![randn(&[2, 3, 4])(r), randn(&[2, 4, 5])(r)], |_, v| v[0].matmul(v[1]));
    check("matmul shared rhs", 1e-6, |r| vec![randn(&[2, 3, 4])(r), randn(&[4, 5])(r)], |_, v| v[0].matmul(v[1]));
    check("matmul shared lhs", 1e-6, |r| vec![randn(&[3, 4])(r), randn(&[2, 4, 5])(r)], |_, v| v[0].matmul(v[1]));
}

#[test]
fn softmax_lastdim() {
    check("softmax", 1e-6, |r| vec![randn(&[3, 5])(r)], |_, v| v[0].softmax_lastdim());
}

#[test]
fn elementwise_primitives() {
    check("add bcast", 1e-6, |r| vec![randn(&[3, 4])(r), randn(&[4])(r)], |_, v| v[0].add(v[1]));
    check("sub", 1e-6, |r| vec![randn(&[3, 4])(r), randn(&[3, 4])(r)], |_, v| v[0].sub(v[1]));
    check("mul bcast", 1e-6, |r| vec![randn(&[2, 3, 4])(r), randn(&[3, 4])(r)], |_, v| v[0].mul(v[1]));
    check(
        "div",
        1e-6,
        |r| vec![randn(&[6])(r), Tensor::rand_uniform(&[6], 0.5, 2.0, r)],
        |_, v| v[0].div(v[1]),
    );
    check("exp", 1e-6, |r| vec![randn(&[7])(r)], |_, v| Ok(v[0].exp()));
    check(
        "ln",
        1e-6,
        |r| vec![Tensor::rand_uniform(&[7], 0.2, 3.0, r)],
        |_, v| Ok(v[0].ln()),
    );
    check("sigmoid", 1e-6, |r| vec![randn(&[7])(r)], |_, v| Ok(v[0].sigmoid()));
    check("gelu", 1e-6, |r| vec![randn(&[9])(r)], |_, v| Ok(v[0].gelu()));
    check("square", 1e-6, |r| vec![randn(&[5])(r)], |_, v| Ok(v[0].square()));
    check("scale/shift", 1e-6, |r| vec![randn(&[5])(r)], |_, v| Ok(v[0].scale(-1.7).add_scalar(0.3).one_minus()));
}

#[test]
fn reductions_and_shapes() {
    check("mean_dim", 1e-6, |r| vec![randn(&[2, 3, 4])(r)], |_, v| v[0].mean_dim(1));
    check("sum_dim last", 1e-6, |r| vec![randn(&[2, 3, 4])(r)], |_, v| v[0].sum_dim(2));
    check("mean", 1e-6, |r| vec![randn(&[2, 3])(r)], |_, v| Ok(v[0].mean()));
    check("permute", 1e-6, |r| vec![randn(&[2, 3, 4, 2])(r)], |_, v| v[0].permute(&[0, 2, 1, 3]));
    check("reshape", 1e-6, |r| vec![randn(&[2, 6])(r)], |_, v| v[0].reshape(&[3, 4]));
}

#[test]
fn layer_norm() {
    check(
        "layer_norm",
        1e-6,
        |r| vec![randn(&[3, 6])(r), randn(&[6])(r), randn(&[6])(r)],
        |_, v| v[0].layer_norm(v[1], v[2], 1e-5),
    );
}

#[test]
fn convolutions() {
    check(
        "conv2d dense stride 2",
        1e-6,
        |r| vec![randn(&[2, 3, 5, 5])(r), randn(&[4, 3, 3, 3])(r), randn(&[4])(r)],
        |_, v| v[0].conv2d(v[1], Some(v[2]), Conv2dSpec::new(2, 1)),
    );
    check(
        "conv2d grouped",
        1e-6,
        |r| vec![randn(&[1, 4, 4, 4])(r), randn(&[4, 2, 3, 3])(r)],
        |_, v| {
            v[0].conv2d(
                v[1],
                None,
                Conv2dSpec {
                    stride: 1,
                    padding: 1,
                    groups: 2,
                },
            )
        },
    );
    check(
        "depthwise x4 multiplier",
        1e-6,
        |r| vec![randn(&[2, 3, 4, 4])(r), randn(&[12, 1, 3, 3])(r), randn(&[12])(r)],
        |_, v| v[0].conv2d(v[1], Some(v[2]), Conv2dSpec::depthwise(1, 1, 3)),
    );
    check(
        "depthwise strided",
        1e-6,
        |r| vec![randn(&[1, 2, 6, 6])(r), randn(&[2, 1, 3, 3])(r)],
        |_, v| v[0].conv2d(v[1], None, Conv2dSpec::depthwise(2, 1, 2)),
    );
    check("pixel_shuffle", 1e-6, |r| vec![randn(&[1, 8, 2, 3])(r)], |_, v| v[0].pixel_shuffle(2));
    check("pixel_unshuffle", 1e-6, |r| vec![randn(&[1, 2, 4, 6])(r)], |_, v| v[0].pixel_unshuffle(2));
}

#[test]
fn composite_attention_block() {
    // softmax(Q K^T / sqrt(d)) V followed by a projection and a residual
    check(
        "attention",
        1e-4,
        |r| {
            vec![
                randn(&[2, 5, 4])(r),
                Tensor::randn(&[4, 4], 0.5, r),
                Tensor::randn(&[4, 4], 0.5, r),
                Tensor::randn(&[4, 4], 0.5, r),
                randn(&[4])(r),
                randn(&[4])(r),
            ]
        },
        |_, v| {
            let x = v[0].layer_norm(v[4], v[5], 1e-5)?;
            let q = x.matmul(v[1])?;
            let k = x.matmul(v[2])?;
            let val = x.matmul(v[3])?;
            let a = q.matmul(k.transpose_last()?)?.scale(0.5).softmax_lastdim()?;
            a.matmul(val)?.gelu().add(v[0])
        },
    );
}
