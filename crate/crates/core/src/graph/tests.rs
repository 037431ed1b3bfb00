use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Random values bounded away from zero so ReLU kinks are never crossed.
fn rand_vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Reduce a tensor to a scalar with fixed random +-1 weights: `mean |x - c|`
/// with each `c_i = +-10`, far from any value the tested ops produce.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x);
    let c: Vec<f64> = (0..numel(&shape)).map(|_| if rng.random_bool(0.5) { 10.0 } else { -10.0 }).collect();
    let cv = g.constant(shape, c);
    g.mean_abs_diff(x, cv)
}

/// Compare reverse-mode gradients of `build` with central differences.
fn check(inputs: &[(Shape, Vec<f64>)], build: &Build) {
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().zip(vals).map(|((s, _), v)| g.param(*s, v.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, v)| g.param(*s, v.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward(out);
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let h = 1e-6;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("gradient reaches every input");
        for i in 0..base[k].len() {
            let mut plus = base.clone();
            plus[k][i] += h;
            let mut minus = base.clone();
            minus[k][i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
            assert!(err < 1e-4, "input {k} element {i}: analytic {} numeric {numeric}", analytic[i]);
        }
    }
}

fn inputs(seed: u64, shapes: &[Shape]) -> Vec<(Shape, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| (*s, rand_vals(&mut rng, numel(s)))).collect()
}

#[test]
fn conv2d_gradients() {
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        check(&inputs(1, &[[2, 2, 5, 5], [3, 2, 3, 3], [1, 3, 1, 1]]), &move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(g, y, 11)
        });
    }
}

#[test]
fn conv_transpose2d_gradients() {
    check(&inputs(2, &[[2, 3, 3, 3], [3, 2, 4, 4], [1, 2, 1, 1]]), &|g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
        assert_eq!(g.shape(y), [2, 2, 6, 6]);
        project(g, y, 12)
    });
}

#[test]
fn spectral_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = rand_vals(&mut rng, 3);
    let vv = rand_vals(&mut rng, 8);
    // A weight with positive u^T W v keeps sigma off the floor.
    let mut w = rand_vals(&mut rng, 24);
    for i in 0..3 {
        for j in 0..8 {
            w[i * 8 + j] += 2.0 * u[i] * vv[j];
        }
    }
    check(&[([3, 2, 2, 2], w)], &move |g, v| {
        let y = g.spectral_norm(v[0], &u, &vv)?;
        project(g, y, 13)
    });
}

#[test]
fn instance_norm_gradients() {
    check(&inputs(4, &[[2, 3, 3, 4], [1, 3, 1, 1], [1, 3, 1, 1]]), &|g, v| {
        let y = g.instance_norm(v[0], v[1], v[2], 1e-5)?;
        project(g, y, 14)
    });
}

#[test]
fn pointwise_gradients() {
    let shape = [1, 2, 3, 3];
    check(&inputs(5, &[shape]), &|g, v| {
        let a = g.relu(v[0]);
        let b = g.leaky_relu(v[0], 0.2);
        let c = g.tanh(v[0]);
        let d = g.sigmoid(v[0]);
        let e = g.affine(v[0], -1.5, 0.25);
        let s = g.add(a, b)?;
        let s = g.add(s, c)?;
        let s = g.add(s, d)?;
        let s = g.add(s, e)?;
        project(g, s, 15)
    });
}

#[test]
fn scale_and_concat_gradients() {
    check(&inputs(6, &[[2, 1, 2, 2], [2, 2, 2, 2], [1, 1, 1, 1]]), &|g, v| {
        let c = g.concat_channels(v[0], v[1])?;
        let y = g.scale_by(c, v[2])?;
        project(g, y, 16)
    });
}

#[test]
fn softmax_gradients() {
    check(&inputs(7, &[[2, 3, 2, 3]]), &|g, v| {
        let y = g.softmax_channels(v[0]);
        project(g, y, 17)
    });
}

#[test]
fn attention_gradients() {
    check(&inputs(8, &[[2, 2, 2, 3], [2, 2, 2, 3], [2, 3, 2, 3]]), &|g, v| {
        let y = g.attention(v[0], v[1], v[2])?;
        project(g, y, 18)
    });
}

#[test]
fn loss_gradients() {
    let labels: Vec<u8> = vec![0, 1, 2, 255, 1, 0, 2, 2, 255, 0, 1, 1];
    check(&inputs(9, &[[2, 3, 2, 3], [2, 3, 2, 3]]), &move |g, v| {
        let p = g.softmax_channels(v[0]);
        let ce = g.masked_cross_entropy(p, &labels)?;
        let s = g.sigmoid(v[1]);
        let real = g.mean_log(s, false);
        let fake = g.mean_log(s, true);
        let l1 = project(g, v[1], 19)?;
        g.weighted_sum(&[(ce, 1.5), (real, -1.0), (fake, -0.5), (l1, 10.0)])
    });
}

#[test]
fn mean_abs_diff_gradient_is_signed() {
    let mut g = Graph::<f64>::new();
    let a = g.param([1, 1, 1, 2], vec![0.5, 0.2]);
    let b = g.constant([1, 1, 1, 2], vec![0.1, 0.6]);
    let l = g.mean_abs_diff(a, b).unwrap();
    assert!((g.scalar(l) - 0.4).abs() < 1e-12);
    let grads = g.backward(l);
    assert_eq!(grads.get(a).unwrap(), &[0.5, -0.5]);
}

#[test]
fn masked_cross_entropy_ignores_out_of_range_labels() {
    let mut g = Graph::<f64>::new();
    let p = g.param([1, 3, 1, 2], vec![0.2, 0.5, 0.3, 0.25, 0.5, 0.25]);
    let ce = g.masked_cross_entropy(p, &[2, 255]).unwrap();
    assert!((g.scalar(ce) + 0.5f64.ln()).abs() < 1e-12);
    let none = g.masked_cross_entropy(p, &[255, 255]).unwrap();
    assert_eq!(g.scalar(none), 0.0);
    assert!(g.masked_cross_entropy(p, &[0]).is_err());
}

#[test]
fn log_clamp_keeps_saturated_scores_finite() {
    let mut g = Graph::<f64>::new();
    let x = g.param([1, 1, 1, 2], vec![0.0, 1.0]);
    let a = g.mean_log(x, false);
    let b = g.mean_log(x, true);
    let l = g.weighted_sum(&[(a, -1.0), (b, -1.0)]).unwrap();
    assert!(g.scalar(l).is_finite());
    assert!((g.scalar(l) - (-LOG_EPS.ln())).abs() < 1e-9);
    assert!(g.backward(l).get(x).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.constant([1, 1, 1, 2], vec![1.0, 2.0]);
    let p = g.param([1, 1, 1, 2], vec![0.5, 0.5]);
    let s = g.add(c, p).unwrap();
    let l = g.mean_abs_diff(s, c).unwrap();
    let grads = g.backward(l);
    assert!(grads.get(c).is_none());
    assert!(grads.get(p).is_some());

    let mut g = Graph::<f64>::new();
    let c = g.constant([1, 1, 1, 1], vec![0.3]);
    let l = g.mean_log(c, false);
    assert!(!g.requires_grad(l));
    assert!(g.backward(l).get(c).is_none());
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f64>::new();
    let a = g.constant([1, 1, 2, 2], vec![0.0; 4]);
    let b = g.constant([1, 1, 2, 3], vec![0.0; 6]);
    assert!(g.add(a, b).is_err());
    assert!(g.mean_abs_diff(a, b).is_err());
    assert!(g.scale_by(a, b).is_err());
    let c = g.constant([2, 1, 2, 2], vec![0.0; 8]);
    assert!(g.concat_channels(a, c).is_err());
    let w = g.constant([1, 2, 3, 3], vec![0.0; 18]);
    assert!(g.conv2d(a, w, None, 1, 1).is_err());
}

#[test]
fn softmax_rows_are_normalized() {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = g.constant([2, 4, 3, 3], (0..72).map(|_| rng.random_range(-30.0..30.0)).collect());
    let p = g.softmax_channels(x);
    let v = g.value(p);
    for s in 0..2 {
        for pix in 0..9 {
            let sum: f64 = (0..4).map(|c| v[(s * 4 + c) * 9 + pix]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
