use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(lo..hi);
            // keep clear of the relu kink
            if v.abs() > 1e-3 {
                break v;
            }
        })
        .collect();
    t(shape, &data)
}

/// Contracts an op output with fixed random weights so every output entry
/// contributes to the scalar.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(y), -1.0, 1.0);
    let m = g.mask(y, &w)?;
    g.sum(m)
}

#[test]
fn row_normalize_example() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[1.0, 3.0, 2.0, 2.0]));
    let y = g.row_normalize(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.25, 0.75, 0.5, 0.5]);
}

#[test]
fn relu_example() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[-1.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3]));
    let y = g.softmax(x).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn zero_sum_normalization_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]));
    assert_eq!(
        g.row_normalize(x),
        Err(DiffError::ZeroNormalizer { op: "row_normalize" })
    );
    let y = g.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
    assert_eq!(
        g.col_normalize(y),
        Err(DiffError::ZeroNormalizer { op: "col_normalize" })
    );
}

#[test]
fn shape_mismatch_names_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
    assert!(err.to_string().contains("[2, 3]"), "{err}");
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.add(a, c).unwrap_err().to_string().starts_with("add"));
}

#[test]
fn tensor_rejects_wrong_value_count() {
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(vec![0, 2], vec![]).is_err());
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.square(x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn relu_gradient_at_negative_input() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(-2.0));
    let y = g.relu(x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.0));
    let y = g.relu(x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0]);
}

#[test]
fn mean_of_squares_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::filled(&[2, 2], 1.0));
    let sq = g.square(x).unwrap();
    let y = g.mean(sq).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.5; 4]);
}

#[test]
fn backward_needs_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(DiffError::NotScalar { .. })));
}

#[test]
fn repeated_backward_accumulates_until_reset() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.square(x).unwrap();
    g.backward(y).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[12.0]);
    g.zero_grad();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_visits_each_node_once() {
    // a chain where every node feeds the next twice: naive recursion would
    // revisit 2^depth paths
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.5));
    let mut cur = x;
    for _ in 0..40 {
        cur = g.mul(cur, cur).unwrap();
        cur = g.scale(cur, 0.5).unwrap();
    }
    let nodes = g.len();
    let visits = g.backward(cur).unwrap();
    assert_eq!(visits, nodes);
}

#[test]
fn quadratic_gradcheck() {
    let err = finite_difference_check(|g, x| g.square(x), &Tensor::scalar(3.0), 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn constant_function_gradcheck_passes() {
    let err = finite_difference_check(
        |g, _x| Ok(g.constant(Tensor::scalar(4.0))),
        &Tensor::filled(&[3], 1.0),
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn gradcheck_rejects_bad_epsilon() {
    assert!(finite_difference_check(|g, x| g.sum(x), &Tensor::scalar(1.0), 0.1).is_err());
}

#[test]
fn gradcheck_reports_non_finite() {
    let r = finite_difference_check(
        |g, x| {
            let big = g.scale(x, 1e6)?;
            let e = g.exp(big)?;
            g.sum(e)
        },
        &Tensor::scalar(1.0),
        1e-5,
    );
    assert!(r.is_err());
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[4, 5], -2.0, 2.0);
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(a.clone());
        let y = g.log_row_normalize(x).unwrap();
        let z = g.log_col_normalize(y).unwrap();
        let e = g.exp(z).unwrap();
        g.value(e).clone()
    };
    assert_eq!(run(), run());
}

type OpFn = fn(&mut Graph, Var, &Tensor) -> Result<Var, DiffError>;

fn op_table() -> Vec<(&'static str, Vec<usize>, (f64, f64), OpFn)> {
    vec![
        ("matmul_left", vec![3, 4], (-2.0, 2.0), |g, x, aux| {
            let b = g.constant(aux.clone().reshaped(&[4, 3]).unwrap());
            g.matmul(x, b)
        }),
        ("matmul_right", vec![4, 3], (-2.0, 2.0), |g, x, aux| {
            let a = g.constant(aux.clone().reshaped(&[3, 4]).unwrap());
            g.matmul(a, x)
        }),
        ("add", vec![3, 4], (-2.0, 2.0), |g, x, aux| {
            let b = g.constant(aux.clone().reshaped(&[3, 4]).unwrap());
            g.add(x, b)
        }),
        ("sub", vec![3, 4], (-2.0, 2.0), |g, x, aux| {
            let b = g.constant(aux.clone().reshaped(&[3, 4]).unwrap());
            g.sub(b, x)
        }),
        ("mul", vec![3, 4], (-2.0, 2.0), |g, x, _| g.mul(x, x)),
        ("add_periodic_bias", vec![4], (-2.0, 2.0), |g, x, aux| {
            let b = g.constant(aux.clone().reshaped(&[3, 4]).unwrap());
            g.add_periodic(b, x)
        }),
        ("add_periodic_rows", vec![2, 2], (-2.0, 2.0), |g, x, aux| {
            let b = g.constant(aux.clone().reshaped(&[6, 2]).unwrap());
            let y = g.add_periodic(b, x)?;
            g.square(y)
        }),
        ("mask", vec![3, 4], (-2.0, 2.0), |g, x, aux| g.mask(x, &aux.clone().reshaped(&[3, 4]).unwrap())),
        ("scale", vec![3, 4], (-2.0, 2.0), |g, x, _| g.scale(x, -1.7)),
        ("relu", vec![3, 4], (-2.0, 2.0), |g, x, _| g.relu(x)),
        ("exp", vec![3, 4], (-2.0, 2.0), |g, x, _| g.exp(x)),
        ("log", vec![3, 4], (0.1, 2.0), |g, x, _| g.log(x)),
        ("square", vec![3, 4], (-2.0, 2.0), |g, x, _| g.square(x)),
        ("sum", vec![3, 4], (-2.0, 2.0), |g, x, _| {
            let s = g.square(x)?;
            g.sum(s)
        }),
        ("mean", vec![3, 4], (-2.0, 2.0), |g, x, _| {
            let s = g.square(x)?;
            g.mean(s)
        }),
        ("row_sum", vec![2, 3, 2], (-2.0, 2.0), |g, x, _| g.row_sum(x)),
        ("col_sum", vec![2, 3, 2], (-2.0, 2.0), |g, x, _| g.col_sum(x)),
        ("row_normalize", vec![2, 3, 2], (0.1, 2.0), |g, x, _| g.row_normalize(x)),
        ("col_normalize", vec![2, 3, 2], (0.1, 2.0), |g, x, _| g.col_normalize(x)),
        ("log_row_normalize", vec![2, 3, 4], (-2.0, 2.0), |g, x, _| g.log_row_normalize(x)),
        ("log_col_normalize", vec![2, 3, 4], (-2.0, 2.0), |g, x, _| g.log_col_normalize(x)),
        ("softmax", vec![3, 4], (-2.0, 2.0), |g, x, _| g.softmax(x)),
        ("reshape", vec![3, 4], (-2.0, 2.0), |g, x, _| {
            let r = g.reshape(x, &[2, 6])?;
            g.square(r)
        }),
        ("repeat_rows", vec![2, 3], (-2.0, 2.0), |g, x, _| g.repeat_rows(x, 3)),
        ("shift_rows", vec![6, 2], (-2.0, 2.0), |g, x, _| g.shift_rows(x, 1, 3)),
    ]
}

#[test]
fn every_op_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, shape, (lo, hi), op) in op_table() {
        for trial in 0..5u64 {
            let point = random(&mut rng, &shape, lo, hi);
            let aux = random(&mut rng, &[12], -2.0, 2.0);
            let err = finite_difference_check(
                |g, x| {
                    let y = op(g, x, &aux)?;
                    weighted_sum(g, y, 100 + trial)
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name} trial {trial}: rel err {err}");
        }
    }
}

#[test]
fn shift_rows_is_causal_within_blocks() {
    let mut g = Graph::new();
    let x = g.constant(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.shift_rows(x, 1, 2).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 0.0, 3.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::scalar(2.0));
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(c, x).unwrap();
    g.backward(y).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap(), &[2.0]);
}
