use super::*;
use crate::gradcheck::{directional_check, CheckReport, FD_STEP};
use rand_distr::{Distribution, Uniform};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let u = Uniform::new(lo, hi).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| u.sample(rng)).collect()).unwrap()
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Gradient check of `build` composed with a random linear read-out.
fn check_op(build: &Build, inputs: &[(Vec<usize>, f64, f64)], seed: u64, trials: usize) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors: Vec<Tensor> = inputs
        .iter()
        .map(|(s, lo, hi)| random_tensor(&mut rng, s, *lo, *hi))
        .collect();
    let sizes: Vec<usize> = tensors.iter().map(|t| t.len()).collect();
    let x0: Vec<f64> = tensors.iter().flat_map(|t| t.data().to_vec()).collect();

    let eval = |x: &[f64], readout: Option<&[f64]>| -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let mut vars = Vec::new();
        let mut off = 0;
        for (tensor, &n) in tensors.iter().zip(&sizes) {
            let v = Tensor::new(tensor.shape().to_vec(), x[off..off + n].to_vec())?;
            vars.push(g.leaf(v, true));
            off += n;
        }
        let out = build(&mut g, &vars)?;
        let len = g.value(out).len();
        let c = match readout {
            Some(c) => c.to_vec(),
            None => (0..len).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect(),
        };
        let root = g.dot_const(out, c)?;
        Ok((g, root, vars))
    };

    let (mut g, root, vars) = eval(&x0, None).unwrap();
    g.backward(root).unwrap();
    let grad: Vec<f64> = vars
        .iter()
        .zip(&sizes)
        .flat_map(|(v, &n)| g.grad(*v).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; n]))
        .collect();
    directional_check(
        |x| {
            let (g, root, _) = eval(x, None)?;
            Ok((g.value(root).item(), g.branch_signature()))
        },
        &x0,
        &grad,
        trials,
        FD_STEP,
        &mut rng,
    )
    .unwrap()
}

fn check_many(name: &str, build: &Build, inputs: &[(Vec<usize>, f64, f64)]) {
    let mut total = CheckReport::default();
    for seed in 0..10 {
        total.merge(check_op(build, inputs, 1000 + seed, 10));
    }
    assert_eq!(total.trials, 100, "{name}: {total:?}");
    assert!(total.passes(1e-4), "{name}: {total:?}");
}

#[test]
fn leaky_relu_definition() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![-1.0, 2.0]));
    let y = g.leaky_relu(x, 0.1);
    assert_eq!(g.value(y).data(), &[-0.1, 2.0]);
}

#[test]
fn leaky_relu_derivative_at_zero_is_negative_slope() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![0.0]), true);
    let y = g.leaky_relu(x, 0.1);
    let r = g.sum(y);
    g.backward(r).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.1]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    for &p in g.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(random_tensor(&mut rng, &[50, 7], -30.0, 30.0));
    let y = g.softmax(x).unwrap();
    for row in g.value(y).rows() {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn max_pool_takes_block_maxima() {
    let data: Vec<f64> = [
        1, 5, 2, 3, //
        4, 0, 8, 6, //
        9, 10, 7, 15, //
        11, 12, 13, 14,
    ]
    .iter()
    .map(|&v| v as f64)
    .collect();
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 4, 4], &data));
    let y = g.max_pool2x2(x).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[5.0, 8.0, 12.0, 15.0]);
}

#[test]
fn max_pool_routes_gradient_to_lowest_tied_index() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 2, 2], &[3.0, 3.0, 3.0, 3.0]), true);
    let y = g.max_pool2x2(x).unwrap();
    let r = g.sum(y);
    g.backward(r).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn square_sum_gradient() {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    let sq = g.mul(w, w).unwrap();
    let r = g.sum(sq);
    g.backward(r).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn constant_root_has_no_gradients() {
    let mut g = Graph::new();
    let w = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let r = g.sum(w);
    g.backward(r).unwrap();
    assert!(g.grad(w).is_none());
    assert!(g.grad(r).is_none());
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    assert!(matches!(g.backward(w), Err(Error::Shape { .. }) | Err(Error::NonScalarRoot(_))));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    let w = g.constant(Tensor::zeros(&[4, 5]));
    assert!(g.dense(a, w, None).unwrap_err().to_string().contains("dense"));
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![3.0]), true);
    let a = g.scale(x, 2.0);
    let b = g.scale(x, 5.0);
    let s = g.add(a, b).unwrap();
    let r = g.sum(s);
    g.backward(r).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
}

#[test]
fn gradcheck_conv2d() {
    for pad in [0, 1] {
        check_many(
            "conv2d",
            &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), pad),
            &[(vec![2, 2, 5, 4], -1.0, 1.0), (vec![3, 2, 3, 3], -1.0, 1.0), (vec![3], -1.0, 1.0)],
        );
    }
    check_many(
        "conv2d_1x1",
        &|g, v| g.conv2d(v[0], v[1], None, 0),
        &[(vec![2, 3, 3, 3], -1.0, 1.0), (vec![2, 3, 1, 1], -1.0, 1.0)],
    );
}

#[test]
fn gradcheck_batch_norm() {
    check_many(
        "batch_norm_batch",
        &|g, v| Ok(g.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0),
        &[(vec![3, 2, 2, 2], -1.0, 1.0), (vec![2], 0.5, 1.5), (vec![2], -1.0, 1.0)],
    );
    check_many(
        "batch_norm_dense",
        &|g, v| Ok(g.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0),
        &[(vec![4, 3], -1.0, 1.0), (vec![3], 0.5, 1.5), (vec![3], -1.0, 1.0)],
    );
    let stats = ChannelStats {
        mean: vec![0.2, -0.1],
        std: vec![0.7, 1.3],
    };
    check_many(
        "batch_norm_running",
        &move |g, v| Ok(g.batch_norm(v[0], v[1], v[2], Some(&stats), 1e-5)?.0),
        &[(vec![3, 2, 2, 2], -1.0, 1.0), (vec![2], 0.5, 1.5), (vec![2], -1.0, 1.0)],
    );
}

#[test]
fn gradcheck_pointwise_and_pooling() {
    check_many("leaky_relu", &|g, v| Ok(g.leaky_relu(v[0], 0.1)), &[(vec![2, 3, 4], -1.0, 1.0)]);
    check_many("max_pool", &|g, v| g.max_pool2x2(v[0]), &[(vec![2, 2, 4, 4], -1.0, 1.0)]);
    check_many("dropout", &|g, v| g.dropout(v[0], 0.5, 42), &[(vec![2, 2, 3, 3], -1.0, 1.0)]);
    check_many("gap", &|g, v| g.global_avg_pool(v[0]), &[(vec![2, 3, 3, 2], -1.0, 1.0)]);
    check_many("clamp", &|g, v| Ok(g.clamp(v[0], -0.5, 0.5)), &[(vec![20], -1.0, 1.0)]);
    check_many("log", &|g, v| Ok(g.log(v[0], 1e-12)), &[(vec![10], 0.05, 1.0)]);
    check_many("xlogx", &|g, v| Ok(g.xlogx(v[0])), &[(vec![10], 0.05, 1.0)]);
    check_many(
        "scale_add",
        &|g, v| {
            let s = g.scale(v[0], -1.7);
            let s = g.add_scalar(s, 0.3);
            g.add(s, v[1])
        },
        &[(vec![6], -1.0, 1.0), (vec![6], -1.0, 1.0)],
    );
    check_many(
        "mul_const",
        &|g, v| g.mul_const(v[0], vec![0.5, -2.0, 1.0, 0.0]),
        &[(vec![2, 2], -1.0, 1.0)],
    );
}

#[test]
fn gradcheck_dense_softmax_and_weight_norm() {
    check_many(
        "dense",
        &|g, v| g.dense(v[0], v[1], Some(v[2])),
        &[(vec![3, 4], -1.0, 1.0), (vec![2, 4], -1.0, 1.0), (vec![2], -1.0, 1.0)],
    );
    check_many("softmax", &|g, v| g.softmax(v[0]), &[(vec![3, 5], -2.0, 2.0)]);
    check_many(
        "weight_norm",
        &|g, v| g.weight_norm(v[0], v[1]),
        &[(vec![3, 2, 2, 2], -1.0, 1.0), (vec![3], 0.5, 2.0)],
    );
    check_many(
        "row_sum_append",
        &|g, v| {
            let s = g.row_sum(v[0])?;
            g.append_column(v[0], s)
        },
        &[(vec![3, 4], -1.0, 1.0)],
    );
}

#[test]
fn gradcheck_five_layer_composition() {
    // conv -> bn -> lrelu -> pool -> gap -> dense -> softmax -> log read-out
    let build: &Build = &|g, v| {
        let w = g.weight_norm(v[1], v[2])?;
        let h = g.conv2d(v[0], w, Some(v[3]), 1)?;
        let (h, _) = g.batch_norm(h, v[4], v[5], None, 1e-5)?;
        let h = g.leaky_relu(h, 0.1);
        let h = g.max_pool2x2(h)?;
        let h = g.global_avg_pool(h)?;
        let h = g.dense(h, v[6], Some(v[7]))?;
        let p = g.softmax(h)?;
        Ok(g.log(p, 1e-12))
    };
    let inputs = [
        (vec![3, 2, 4, 4], -1.0, 1.0),
        (vec![3, 2, 3, 3], -1.0, 1.0),
        (vec![3], 0.5, 1.5),
        (vec![3], -0.1, 0.1),
        (vec![3], 0.5, 1.5),
        (vec![3], -0.5, 0.5),
        (vec![4, 3], -1.0, 1.0),
        (vec![4], -0.5, 0.5),
    ];
    let mut total = CheckReport::default();
    for seed in 0..20 {
        total.merge(check_op(build, &inputs, 77 + seed, 5));
    }
    assert_eq!(total.trials, 100);
    assert!(total.passes(1e-4), "{total:?}");
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.leaf(random_tensor(&mut rng, &[3, 2, 6, 6], -1.0, 1.0), true);
        let w = g.leaf(random_tensor(&mut rng, &[4, 2, 3, 3], -1.0, 1.0), true);
        let h = g.conv2d(x, w, None, 1).unwrap();
        let h = g.dropout(h, 0.5, 11).unwrap();
        let h = g.max_pool2x2(h).unwrap();
        let r = g.sum(h);
        g.backward(r).unwrap();
        (g.grad(x).unwrap().clone(), g.grad(w).unwrap().clone())
    };
    let (a, b) = run();
    let (c, d) = run();
    assert!(a.data().iter().zip(c.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(b.data().iter().zip(d.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn dropout_masks_are_reproducible_per_seed() {
    assert_eq!(dropout_mask(100, 0.5, 5), dropout_mask(100, 0.5, 5));
    assert_ne!(dropout_mask(100, 0.5, 5), dropout_mask(100, 0.5, 6));
    let kept = dropout_mask(10_000, 0.5, 1).iter().filter(|&&m| m > 0.0).count();
    assert!((4500..5500).contains(&kept));
}
