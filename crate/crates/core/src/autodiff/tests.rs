use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()).unwrap()
}

/// Checks reverse-mode gradients of `f` against central differences for
/// every input element. `f` must reduce to a scalar.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let h = 1e-6;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("gradient for every input");
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
            assert!(err < 1e-6, "input {i} element {j}: analytic {a} numeric {numeric}");
        }
    }
}

/// Weighted sum with fixed pseudo-random weights so each output element
/// contributes a distinct coefficient.
fn probe_sum(g: &mut Graph<f64>, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::from_vec(&shape, (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect()).unwrap();
    let w = g.constant(w);
    let m = g.mul(v, w);
    g.sum_all(m)
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3], &mut rng, 1.0);
    let b = random(&[2, 3], &mut rng, 1.0);
    check(vec![a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let k = g.scale(m, 1.7);
        let c = g.add_scalar(k, 0.3);
        let w = g.weighted_sum(&[(c, 2.0), (v[0], -0.5)]);
        let sw = g.swish(w);
        probe_sum(g, sw)
    });
}

#[test]
fn clamp_passes_gradient_only_inside_range() {
    let t = Tensor::from_vec(&[4], vec![-3.0, -0.5, 0.5, 3.0]).unwrap();
    let mut g = Graph::new();
    let x = g.param(t);
    let c = g.clamp(x, -1.0, 1.0);
    let s = g.sum_all(c);
    let grads = g.backward(s);
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(k, stride, pad) in &[(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0)] {
        let x = random(&[2, 3, 6, 4], &mut rng, 1.0);
        let w = random(&[2, 3, k, k], &mut rng, 0.5);
        let b = random(&[2], &mut rng, 0.5);
        check(vec![x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad);
            probe_sum(g, y)
        });
    }
}

#[test]
fn depthwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 5, 4], &mut rng, 1.0);
    let w = random(&[3, 1, 5, 5], &mut rng, 0.5);
    let b = random(&[3], &mut rng, 0.5);
    check(vec![x, w, b], |g, v| {
        let y = g.depthwise(v[0], v[1], Some(v[2]));
        probe_sum(g, y)
    });
}

#[test]
fn instance_norm_and_affine_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 3, 4, 3], &mut rng, 1.0);
    let gamma = random(&[2, 3], &mut rng, 1.0);
    let beta = random(&[2, 3], &mut rng, 1.0);
    check(vec![x, gamma, beta], |g, v| {
        let n = g.instance_norm(v[0], 1e-5);
        let y = g.channel_affine(n, v[1], v[2]);
        probe_sum(g, y)
    });
}

#[test]
fn instance_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[1, 2, 8, 5], &mut rng, 3.0);
    let mut g = Graph::new();
    let v = g.constant(x);
    let n = g.instance_norm(v, 1e-8);
    let out = g.value(n);
    for c in 0..2 {
        let plane = &out.data()[c * 40..(c + 1) * 40];
        let mean: f64 = plane.iter().sum::<f64>() / 40.0;
        let var: f64 = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 40.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn structural_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[2, 2, 2, 3], &mut rng, 1.0);
    let b = random(&[2, 3, 2, 3], &mut rng, 1.0);
    let c = random(&[1, 3, 2, 3], &mut rng, 1.0);
    check(vec![a, b, c], |g, v| {
        let cat = g.concat1(&[v[0], v[1]]);
        let nar = g.narrow1(cat, 1, 3);
        let rep = g.repeat_batch(v[2], 2);
        let s = g.add(nar, rep);
        let up = g.upsample2x(s);
        let r = g.reshape(up, &[2, 72]);
        probe_sum(g, r)
    });
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[3, 4], &mut rng, 1.0);
    let w = random(&[4, 5], &mut rng, 1.0);
    let b = random(&[5], &mut rng, 1.0);
    check(vec![x, w, b], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]));
        probe_sum(g, y)
    });
}

#[test]
fn gaussian_term_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shape = [2, 2, 3, 2];
    let qm = random(&shape, &mut rng, 1.0);
    let qlv = random(&shape, &mut rng, 1.0);
    let pm = random(&shape, &mut rng, 1.0);
    let plv = random(&shape, &mut rng, 1.0);
    let eps = random(&shape, &mut rng, 1.0);
    let target = random(&shape, &mut rng, 1.0);
    check(vec![qm, qlv, pm, plv], move |g, v| {
        let kl = g.kl_gaussian(v[0], v[1], v[2], v[3]);
        let z = g.reparam(v[0], v[1], eps.clone());
        let nll = g.gaussian_nll(z, target.clone(), -0.3);
        let tot = g.weighted_sum(&[(kl, 0.7), (nll, 1.0)]);
        g.mean_batch(tot)
    });
}

#[test]
fn kl_of_identical_gaussians_is_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = random(&[3, 7], &mut rng, 5.0);
    let lv = random(&[3, 7], &mut rng, 4.0);
    let mut g = Graph::new();
    let (a, b) = (g.constant(m.clone()), g.constant(lv.clone()));
    let (c, d) = (g.constant(m), g.constant(lv));
    let kl = g.kl_gaussian(a, b, c, d);
    assert!(g.value(kl).data().iter().all(|&v| v == 0.0));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(&[2], 1.0));
    let p = g.param(Tensor::full(&[2], 2.0));
    let m = g.mul(c, p);
    let s = g.sum_all(m);
    let grads = g.backward(s);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0]);
}
