//! Central finite differences against reverse-mode gradients for every built-in op (f64).

use fs2ffpe_autograd::check::{directional_fd, rel_err};
use fs2ffpe_autograd::ops::ReflectPad;
use fs2ffpe_autograd::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Checks d/dt <f(x + t v), u> for each input separately.
fn check(shapes: &[&[usize]], build: &Build, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let y = build(&mut tape, &vars);
        tape.value(y).shape().to_vec()
    };
    let u = random(&out_shape, &mut rng);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = build(&mut tape, &vars);
    let uv = tape.constant(u.clone());
    let l = tape.dot(y, uv).unwrap();
    let grads = tape.backward(l).unwrap();

    for (i, input) in inputs.iter().enumerate() {
        let dir = random(input.shape(), &mut rng);
        let g = grads.get_or_zeros(vars[i], input);
        let analytic: f64 = g.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
        let mut f = |xi: &[f64]| {
            let mut tape = Tape::no_grad();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if j == i {
                        tape.constant(Tensor::from_vec(t.shape(), xi.to_vec()).unwrap())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect();
            let y = build(&mut tape, &vars);
            tape.value(y).data().iter().zip(u.data()).map(|(a, b)| a * b).sum()
        };
        let numeric = directional_fd(&mut f, input.data(), dir.data(), 1e-6);
        let err = rel_err(analytic, numeric, 1e-8);
        assert!(err < 1e-6, "input {i}: analytic {analytic} numeric {numeric} rel {err}");
    }
}

#[test]
fn conv2d_gradients() {
    check(&[&[2, 7, 6], &[3, 2, 3, 3], &[3]], &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap(), 1);
    check(&[&[2, 8, 8], &[4, 2, 4, 4], &[4]], &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap(), 2);
    check(&[&[3, 5, 5], &[2, 3, 1, 1]], &|t, v| t.conv2d(v[0], v[1], None, 1, 0).unwrap(), 3);
}

#[test]
fn conv_transpose_gradients() {
    check(&[&[3, 4, 5], &[3, 2, 3, 3], &[2]], &|t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1).unwrap(), 4);
}

#[test]
fn conv_transpose_doubles_spatial_size() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[4, 7, 9]));
    let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
    let y = tape.conv_transpose2d(x, w, None, 2, 1, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 14, 18]);
}

#[test]
fn pointwise_gradients() {
    check(&[&[2, 3, 4]], &|t, v| t.tanh(v[0]).unwrap(), 5);
    check(&[&[2, 3, 4]], &|t, v| t.relu(v[0]).unwrap(), 6);
    check(&[&[2, 3, 4]], &|t, v| t.leaky_relu(v[0], 0.2).unwrap(), 7);
    check(&[&[2, 3, 4]], &|t, v| t.atanh_clamped(v[0], 0.999).unwrap(), 8);
    check(&[&[2, 3, 4]], &|t, v| t.affine(v[0], -1.7, 0.3).unwrap(), 9);
    check(&[&[2, 3, 4], &[2, 3, 4]], &|t, v| t.mul(v[0], v[1]).unwrap(), 10);
    check(&[&[2, 3, 4], &[2, 3, 4]], &|t, v| t.sub(v[0], v[1]).unwrap(), 11);
}

#[test]
fn instance_norm_gradients() {
    check(&[&[3, 4, 5]], &|t, v| t.instance_norm(v[0], 1e-5).unwrap(), 12);
}

#[test]
fn spatial_gradients() {
    let pad = ReflectPad { top: 1, bottom: 2, left: 3, right: 0 };
    check(&[&[2, 5, 6]], &move |t, v| t.reflect_pad(v[0], pad).unwrap(), 13);
    check(&[&[2, 6, 6]], &|t, v| t.crop(v[0], 1, 2, 3, 4).unwrap(), 14);
    check(&[&[5, 3, 3]], &|t, v| t.channel_slice(v[0], 1, 3).unwrap(), 15);
    check(&[&[2, 3, 3], &[1, 3, 3]], &|t, v| t.concat_channels(&[v[0], v[1]]).unwrap(), 16);
}

#[test]
fn reduction_gradients() {
    check(&[&[3, 4], &[3, 4]], &|t, v| t.mean_abs_diff(v[0], v[1]).unwrap(), 17);
    check(&[&[3, 4]], &|t, v| t.mean_squared_to(v[0], 1.0).unwrap(), 18);
    check(&[&[3, 4]], &|t, v| t.bce_with_logits_to(v[0], 1.0).unwrap(), 19);
    check(&[&[1], &[1], &[1]], &|t, v| t.weighted_sum(v, &[0.5, 2.0, -1.0]).unwrap(), 20);
}

#[test]
fn matrix_gradients() {
    for (i, &(ta, tb)) in [(false, false), (true, false), (false, true), (true, true)].iter().enumerate() {
        let a: &[usize] = if ta { &[4, 3] } else { &[3, 4] };
        let b: &[usize] = if tb { &[5, 4] } else { &[4, 5] };
        check(&[a, b], &move |t, v| t.matmul(v[0], v[1], ta, tb).unwrap(), 21 + i as u64);
    }
    check(&[&[3, 4], &[4]], &|t, v| t.add_row_bias(v[0], v[1]).unwrap(), 30);
    check(&[&[3, 4]], &|t, v| t.l2_normalize_rows(v[0], 1e-7).unwrap(), 31);
    check(&[&[3, 3, 4]], &|t, v| t.gather_locations(v[0], vec![0, 5, 11, 5]).unwrap(), 32);
    check(&[&[4, 4]], &|t, v| t.diagonal_cross_entropy(v[0]).unwrap(), 33);
}

#[test]
fn no_grad_tape_yields_no_gradients() {
    let mut tape = Tape::<f64>::no_grad();
    let x = tape.param(Tensor::scalar(2.0));
    let y = tape.mean_squared_to(x, 0.0).unwrap();
    let g = tape.backward(y).unwrap();
    assert!(g.get(x).is_none());
}

#[test]
fn detach_cuts_gradient_path() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(2.0));
    let d = tape.detach(x);
    let s = tape.mul(x, d).unwrap();
    let g = tape.backward(s).unwrap();
    // d(x * stopgrad(x))/dx = stopgrad(x)
    assert_eq!(g.get(x).unwrap().item(), 2.0);
}

#[test]
fn first_non_finite_names_the_node() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    tape.set_label(x, "input");
    let y = tape.atanh_clamped(x, 2.0).unwrap();
    tape.set_label(y, "atanh");
    let msg = tape.first_non_finite().unwrap();
    assert!(msg.contains("atanh"), "{msg}");
}
