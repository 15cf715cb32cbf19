//! Finite-difference verification of every differentiable layer kind, run
//! through the recorded tape in 64-bit mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use veinseg::tensor::{
    finite_difference_check, ConvGeometry, Gradients, ParamSet, Tape, Tensor,
};

const FD_STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Fixed random weights turn a tensor output into a scalar so single-number
/// finite differences can probe every coordinate.
fn rand_probe(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn weighted_sum(t: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
    t.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

/// Check d(probe . op(x, params)) / dx and /dparams against central
/// differences. `forward` must rebuild the tape from scratch each call.
fn check_op<F>(label: &str, x0: Tensor<f64>, params: ParamSet<f64>, forward: F)
where
    F: Fn(&Tensor<f64>, &ParamSet<f64>, &mut Tape<f64>) -> veinseg::Result<veinseg::tensor::NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0xbeef);
    let mut tape = Tape::new();
    let params_fwd = params.clone();
    let out = forward(&x0, &params_fwd, &mut tape).unwrap_or_else(|e| panic!("{label}: {e}"));
    // The closure registered the graded input as node 0.
    let input = veinseg::tensor::NodeId(0);
    let probe = rand_probe(tape.value(out).shape(), &mut rng);
    let grads = tape
        .backward(out, probe.clone(), &params_fwd)
        .unwrap_or_else(|e| panic!("{label} backward: {e}"));

    // Input gradient.
    let analytic_in = grads.by_input.get(&input.0).expect("input gradient");
    let err = finite_difference_check(
        |probe_x| {
            let mut t = Tape::new();
            let out = forward(probe_x, &params_fwd, &mut t)?;
            Ok(weighted_sum(t.value(out), &probe))
        },
        &x0,
        analytic_in,
        FD_STEP,
    )
    .unwrap();
    assert!(err <= TOL, "{label}: input gradient rel err {err}");

    // Parameter gradients, one parameter tensor at a time.
    for (id, entry) in params.iter() {
        if !entry.trainable {
            continue;
        }
        let analytic = grads.param(id).clone();
        let base = entry.value.clone();
        let err = finite_difference_check(
            |probe_p| {
                let mut p2 = params_fwd.clone();
                p2.get_mut(id).data_mut().copy_from_slice(probe_p.data());
                let mut t = Tape::new();
                let out = forward(&x0, &p2, &mut t)?;
                Ok(weighted_sum(t.value(out), &probe))
            },
            &base,
            &analytic,
            FD_STEP,
        )
        .unwrap();
        assert!(err <= TOL, "{label}: param {} rel err {err}", entry.name);
    }
}

fn conv_params(
    rng: &mut ChaCha8Rng,
    wshape: Vec<usize>,
    cout: usize,
) -> (ParamSet<f64>, veinseg::tensor::ParamId, veinseg::tensor::ParamId) {
    let mut params = ParamSet::new();
    let w = params.add("w", rand_tensor(wshape, rng), true);
    let b = params.add("b", rand_tensor(vec![cout], rng), true);
    (params, w, b)
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..4 {
        let (stride, pad, groups) = [(1, 1, 1), (2, 1, 1), (1, 0, 2), (2, 1, 3)][case];
        let cin = 6;
        let cout = 6;
        let x = rand_tensor(vec![2, cin, 6, 6], &mut rng);
        let (params, w, b) = conv_params(&mut rng, vec![cout, cin / groups, 3, 3], cout);
        let geom = ConvGeometry::new((3, 3), stride, pad, groups);
        check_op(
            &format!("conv2d s{stride} p{pad} g{groups}"),
            x,
            params,
            move |x, p, tape| {
                let i = tape.input_with_grad(x.clone());
                tape.conv2d(p, i, w, Some(b), geom)
            },
        );
    }
}

#[test]
fn conv2d_random_small_instance_matches_fd() {
    // The 1x2x6x6 case: analytic vs central differences at step 1e-5.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(vec![1, 2, 6, 6], &mut rng);
    let (params, w, b) = conv_params(&mut rng, vec![3, 2, 3, 3], 3);
    let geom = ConvGeometry::new((3, 3), 1, 1, 1);
    check_op("conv2d 1x2x6x6", x, params, move |x, p, tape| {
        let i = tape.input_with_grad(x.clone());
        tape.conv2d(p, i, w, Some(b), geom)
    });
}

#[test]
fn conv_transpose2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for &(stride, groups) in &[(2usize, 1usize), (1, 1), (2, 2)] {
        let cin = 4;
        let cout = 4;
        let x = rand_tensor(vec![2, cin, 4, 4], &mut rng);
        let mut params = ParamSet::new();
        let w = params.add(
            "w",
            rand_tensor(vec![cin, cout / groups, 3, 3], &mut rng),
            true,
        );
        let b = params.add("b", rand_tensor(vec![cout], &mut rng), true);
        let geom = ConvGeometry::new((3, 3), stride, 1, groups);
        check_op(
            &format!("conv_transpose2d s{stride} g{groups}"),
            x,
            params,
            move |x, p, tape| {
                let i = tape.input_with_grad(x.clone());
                tape.conv_transpose2d(p, i, w, Some(b), geom)
            },
        );
    }
}

#[test]
fn maxpool_relu_softmax_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    // Offsets keep probes away from relu kinks and pooling ties.
    let x = Tensor::from_fn(vec![2, 3, 6, 6], |i| {
        let base: f64 = rng.gen_range(-1.0..1.0);
        base + (i % 7) as f64 * 0.013
    });
    let geom = ConvGeometry::new((3, 3), 2, 1, 1);
    check_op("maxpool2d", x.clone(), ParamSet::new(), move |x, _, tape| {
        let i = tape.input_with_grad(x.clone());
        tape.maxpool2d(i, geom)
    });
    check_op("relu", x.clone(), ParamSet::new(), |x, _, tape| {
        let i = tape.input_with_grad(x.clone());
        Ok(tape.relu(i))
    });
    check_op("softmax_channels", x, ParamSet::new(), |x, _, tape| {
        let i = tape.input_with_grad(x.clone());
        tape.softmax_channels(i)
    });
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let c = 3;
    let x = rand_tensor(vec![2, c, 4, 4], &mut rng);
    let mut params = ParamSet::new();
    let gamma = params.add("gamma", rand_tensor(vec![c], &mut rng), true);
    let beta = params.add("beta", rand_tensor(vec![c], &mut rng), true);
    let rm = params.add("rm", rand_tensor(vec![c], &mut rng), false);
    let rv = params.add(
        "rv",
        Tensor::from_fn(vec![c], |_| rng.gen_range(0.5..1.5)),
        false,
    );

    check_op("batchnorm2d train", x.clone(), params.clone(), move |x, p, tape| {
        let i = tape.input_with_grad(x.clone());
        // Clone so running-stat updates never leak into the probed set.
        let mut p2 = p.clone();
        tape.batchnorm2d_train(&mut p2, i, gamma, beta, rm, rv)
    });
    check_op("batchnorm2d eval", x, params, move |x, p, tape| {
        let i = tape.input_with_grad(x.clone());
        tape.batchnorm2d_eval(p, i, gamma, beta, rm, rv)
    });
}

#[test]
fn concat_and_add_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    // Route one tensor through both arms so a single input covers the op.
    let x = rand_tensor(vec![1, 2, 4, 4], &mut rng);
    check_op("channel_concat", x.clone(), ParamSet::new(), |x, _, tape| {
        let i = tape.input_with_grad(x.clone());
        let r = tape.relu(i);
        tape.channel_concat(i, r)
    });
    check_op("add", x, ParamSet::new(), |x, _, tape| {
        let i = tape.input_with_grad(x.clone());
        let r = tape.relu(i);
        tape.add(i, r)
    });
}

#[test]
fn backward_examples_from_linear_regions() {
    // sum(relu(x)) with all x > 0 has an all-ones gradient.
    let x = Tensor::<f64>::filled(vec![1, 1, 3, 3], 0.7);
    let mut tape = Tape::new();
    let i = tape.input_with_grad(x.clone());
    let r = tape.relu(i);
    let params = ParamSet::<f64>::new();
    let grads = tape
        .backward(r, Tensor::filled(vec![1, 1, 3, 3], 1.0), &params)
        .unwrap();
    let gi = grads.by_input.get(&i.0).unwrap();
    assert!(gi.data().iter().all(|&v| v == 1.0));
}

#[test]
fn zero_output_gradient_gives_zero_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(vec![1, 2, 4, 4], &mut rng);
    let mut params = ParamSet::new();
    let w = params.add("w", rand_tensor(vec![3, 2, 3, 3], &mut rng), true);
    let b = params.add("b", rand_tensor(vec![3], &mut rng), true);
    let mut tape = Tape::new();
    let i = tape.input(x);
    let out = tape
        .conv2d(&params, i, w, Some(b), ConvGeometry::new((3, 3), 1, 1, 1))
        .unwrap();
    let zero = Tensor::zeros(tape.value(out).shape().to_vec());
    let grads = tape.backward(out, zero, &params).unwrap();
    for g in &grads.by_param {
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn unused_parameters_receive_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = rand_tensor(vec![1, 2, 4, 4], &mut rng);
    let mut params = ParamSet::new();
    let w = params.add("w", rand_tensor(vec![2, 2, 3, 3], &mut rng), true);
    let _unused = params.add("unused", rand_tensor(vec![7], &mut rng), true);
    let mut tape = Tape::new();
    let i = tape.input(x);
    let out = tape
        .conv2d(&params, i, w, None, ConvGeometry::new((3, 3), 1, 1, 1))
        .unwrap();
    let ones = Tensor::filled(tape.value(out).shape().to_vec(), 1.0);
    let grads: Gradients<f64> = tape.backward(out, ones, &params).unwrap();
    assert_eq!(grads.by_param.len(), 2);
    assert!(grads.by_param[1].data().iter().all(|&v| v == 0.0));
    assert!(grads.by_param[0].data().iter().any(|&v| v != 0.0));
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for case in 0..6 {
        let logits = rand_tensor(vec![1, 2, 3, 3], &mut rng);
        let target = Tensor::from_fn(vec![1, 3, 3], |_| {
            if rng.gen_bool(0.4) {
                1.0
            } else {
                0.0
            }
        });
        let (gamma, alpha) = [(0.0, 1.0), (2.0, 0.25), (2.0, 1.0), (1.0, 0.5), (0.5, 0.9), (3.0, 0.75)]
            [case];
        let (_, analytic) =
            veinseg::losses::focal_loss_with_grad(&logits, &target, gamma, alpha).unwrap();
        let err = finite_difference_check(
            |z| veinseg::losses::focal_loss(z, &target, gamma, alpha),
            &logits,
            &analytic,
            FD_STEP,
        )
        .unwrap();
        assert!(err <= TOL, "focal g{gamma} a{alpha} rel err {err}");
    }

    // BCE gradient.
    let logits = rand_tensor(vec![2, 2, 3, 3], &mut rng);
    let target = Tensor::from_fn(vec![2, 3, 3], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
    let (_, analytic) = veinseg::losses::bce_loss_with_grad(&logits, &target).unwrap();
    let err = finite_difference_check(
        |z| veinseg::losses::bce_loss(z, &target),
        &logits,
        &analytic,
        FD_STEP,
    )
    .unwrap();
    assert!(err <= TOL, "bce rel err {err}");

    // Consistency MSE through the student softmax.
    let student = rand_tensor(vec![1, 2, 4, 4], &mut rng);
    let teacher_logits = rand_tensor(vec![1, 2, 4, 4], &mut rng);
    let teacher = veinseg::tensor::softmax_channels_forward(&teacher_logits).unwrap();
    let (_, analytic) =
        veinseg::losses::consistency_mse_with_logit_grad(&student, &teacher).unwrap();
    let err = finite_difference_check(
        |z| {
            let p = veinseg::tensor::softmax_channels_forward(z)?;
            veinseg::losses::consistency_mse(&p, &teacher)
        },
        &student,
        &analytic,
        FD_STEP,
    )
    .unwrap();
    assert!(err <= TOL, "consistency rel err {err}");
}

#[test]
fn focal_loss_of_single_logit_passes_fd_oracle() {
    // Focal loss as a function of one logit coordinate at a random point.
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let logits = rand_tensor(vec![1, 2, 1, 1], &mut rng);
    let target = Tensor::filled(vec![1, 1, 1], 1.0);
    let (_, analytic) = veinseg::losses::focal_loss_with_grad(&logits, &target, 2.0, 0.25).unwrap();
    let err = finite_difference_check(
        |z| veinseg::losses::focal_loss(z, &target, 2.0, 0.25),
        &logits,
        &analytic,
        FD_STEP,
    )
    .unwrap();
    assert!(err <= TOL, "rel err {err}");
}

#[test]
fn conv_scalar_sum_at_4x4_passes_fd_oracle() {
    // Conv layer reduced to a scalar by summation over a random 4x4 input.
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let x = rand_tensor(vec![1, 1, 4, 4], &mut rng);
    let mut params = ParamSet::new();
    let w = params.add("w", rand_tensor(vec![2, 1, 3, 3], &mut rng), true);
    let geom = ConvGeometry::new((3, 3), 1, 1, 1);

    let mut tape = Tape::new();
    let i = tape.input_with_grad(x.clone());
    let out = tape.conv2d(&params, i, w, None, geom).unwrap();
    let ones = Tensor::filled(tape.value(out).shape().to_vec(), 1.0);
    let grads = tape.backward(out, ones, &params).unwrap();

    let err = finite_difference_check(
        |probe| {
            let mut t = Tape::new();
            let i = t.input(probe.clone());
            let out = t.conv2d(&params, i, w, None, geom)?;
            Ok(t.value(out).sum())
        },
        &x,
        grads.by_input.get(&i.0).unwrap(),
        FD_STEP,
    )
    .unwrap();
    assert!(err <= TOL, "rel err {err}");
}

#[test]
fn backward_rejects_missing_tape_and_bad_shapes() {
    let params = ParamSet::<f64>::new();
    let tape = Tape::<f64>::new();
    assert!(tape
        .backward(veinseg::tensor::NodeId(0), Tensor::scalar(1.0), &params)
        .is_err());

    let mut tape = Tape::new();
    let i = tape.input(Tensor::<f64>::zeros(vec![1, 1, 2, 2]));
    let r = tape.relu(i);
    let wrong = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
    assert!(tape.backward(r, wrong, &params).is_err());
}
