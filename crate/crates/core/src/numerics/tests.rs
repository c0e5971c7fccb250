use rand::Rng as _;
use rand_distr::StandardNormal;

use super::*;
use crate::error::{EnkiError, Result};
use crate::rng::rng_from_seed;

fn randn(shape: &[usize], rng: &mut crate::rng::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Central finite differences at step 1e-5 against the tape, per input tensor,
/// using the norm-relative error ‖fd − ad‖ / max(‖fd‖, ‖ad‖).
fn gradcheck<F>(inputs: &[Tensor], build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    g.backward(loss).unwrap();

    let h = 1e-5;
    for (k, var) in vars.iter().enumerate() {
        let ad = g.grad(*var).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut fd = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            fd[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff: f64 = fd.iter().zip(ad.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = ad.l2_norm().max(fd.iter().map(|v| v * v).sum::<f64>().sqrt());
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        assert!(rel < 1e-4, "input {k}: relative error {rel:e}");
    }
}

/// Contract an arbitrary-shaped output with fixed random weights so every
/// output element contributes a distinct gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = rng_from_seed(seed ^ 0xABCD);
    let w = randn(g.shape(out), &mut rng);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

const SEEDS: u64 = 20;

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let id = g.constant(Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap());
    let m = g.constant(Tensor::new(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap());
    let p = g.matmul(id, m).unwrap();
    assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap());
    let b = g.constant(Tensor::new(vec![3.0, 4.0], &[2, 1]).unwrap());
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);
    assert_eq!(g.shape(p), &[1, 1]);

    let err = g.matmul(a, a).unwrap_err();
    match err {
        EnkiError::Shape { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![1, 2]);
            assert_eq!(rhs, vec![1, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    let mut rng = rng_from_seed(1);
    let a = randn(&[5, 7], &mut rng);
    let b = randn(&[7, 3], &mut rng);
    let mut g = Graph::new();
    let va = g.param(a.clone());
    let vb = g.constant(b.clone());
    let c = g.matmul(va, vb).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    let ga = g.grad(va).unwrap();
    for i in 0..5 {
        for l in 0..7 {
            let expected: f64 = (0..3).map(|j| b.data()[l * 3 + j]).sum();
            assert!((ga.data()[i * 7 + l] - expected).abs() < 1e-12);
        }
    }
    gradcheck(&[a, b], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        Ok(g.sum(c))
    });
}

#[test]
fn gradcheck_matmul_variants() {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(seed);
        let a = randn(&[2, 3, 4], &mut rng);
        let shared = randn(&[4, 5], &mut rng);
        let batched = randn(&[2, 4, 5], &mut rng);
        gradcheck(&[a.clone(), shared], |g, v| {
            let c = g.matmul(v[0], v[1])?;
            project(g, c, seed)
        });
        gradcheck(&[a.clone(), batched], |g, v| {
            let c = g.matmul(v[0], v[1])?;
            project(g, c, seed)
        });
        // same tensor on both sides
        let sq = randn(&[3, 3], &mut rng);
        gradcheck(&[sq], |g, v| {
            let c = g.matmul(v[0], v[0])?;
            project(g, c, seed)
        });
    }
}

#[test]
fn gradcheck_elementwise() {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(100 + seed);
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[3, 4], &mut rng);
        let row = randn(&[4], &mut rng);
        gradcheck(&[a.clone(), b.clone()], |g, v| {
            let c = g.add(v[0], v[1])?;
            project(g, c, seed)
        });
        gradcheck(&[a.clone(), b.clone()], |g, v| {
            let c = g.sub(v[0], v[1])?;
            project(g, c, seed)
        });
        gradcheck(&[a.clone(), b.clone()], |g, v| {
            let c = g.mul(v[0], v[1])?;
            project(g, c, seed)
        });
        gradcheck(&[a.clone(), row.clone()], |g, v| {
            let c = g.add(v[0], v[1])?;
            project(g, c, seed)
        });
        gradcheck(&[row.clone(), a.clone()], |g, v| {
            let c = g.sub(v[0], v[1])?;
            project(g, c, seed)
        });
        gradcheck(&[a.clone(), row.clone()], |g, v| {
            let c = g.mul(v[0], v[1])?;
            project(g, c, seed)
        });
        gradcheck(std::slice::from_ref(&a), |g, v| {
            let c = g.scale(v[0], -2.5);
            project(g, c, seed)
        });
        gradcheck(std::slice::from_ref(&a), |g, v| {
            let c = g.gelu(v[0]);
            project(g, c, seed)
        });
    }
}

#[test]
fn gradcheck_layout_ops() {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(200 + seed);
        let x = randn(&[2, 3, 4], &mut rng);
        let y = randn(&[2, 2, 4], &mut rng);
        gradcheck(std::slice::from_ref(&x), |g, v| {
            let c = g.transpose(v[0])?;
            project(g, c, seed)
        });
        gradcheck(std::slice::from_ref(&x), |g, v| {
            let c = g.permute(v[0], &[2, 0, 1])?;
            project(g, c, seed)
        });
        gradcheck(std::slice::from_ref(&x), |g, v| {
            let c = g.reshape(v[0], &[6, 4])?;
            project(g, c, seed)
        });
        gradcheck(&[x.clone(), y.clone()], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            project(g, c, seed)
        });
        gradcheck(&[x.clone(), x.clone()], |g, v| {
            let c = g.concat(&[v[0], v[1]], 2)?;
            project(g, c, seed)
        });
        // gather with a repeated index, scatter with a partial index
        gradcheck(std::slice::from_ref(&x), |g, v| {
            let c = g.gather(v[0], &[2, 0, 2, 1, 1, 0, 2, 2], 4)?;
            project(g, c, seed)
        });
        gradcheck(std::slice::from_ref(&y), |g, v| {
            let c = g.scatter(v[0], &[3, 1, 0, 4], 5)?;
            project(g, c, seed)
        });
        gradcheck(std::slice::from_ref(&x), |g, v| g.mean(v[0]));
        gradcheck(std::slice::from_ref(&x), |g, v| Ok(g.sum(v[0])));
    }
}

#[test]
fn gradcheck_softmax_layer_norm() {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(300 + seed);
        let x = randn(&[3, 6], &mut rng);
        let gain = randn(&[6], &mut rng);
        let shift = randn(&[6], &mut rng);
        gradcheck(std::slice::from_ref(&x), |g, v| {
            let c = g.softmax(v[0])?;
            project(g, c, seed)
        });
        gradcheck(&[x, gain, shift], |g, v| {
            let c = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
            project(g, c, seed)
        });
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let one = g.constant(Tensor::full(&[2], 1.0));
    let zero = g.constant(Tensor::zeros(&[2]));
    let c = g.constant(Tensor::full(&[3, 2], 4.2));
    let out = g.layer_norm(c, one, zero, 1e-6).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::new(vec![1.0, 3.0], &[2]).unwrap());
    let out = g.layer_norm(x, one, zero, 1e-12).unwrap();
    let d = g.value(out).data();
    assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

    let mut rng = rng_from_seed(9);
    // row variance ≫ eps so the eps bias stays below 1e-6
    let mut wide = randn(&[4, 8], &mut rng);
    wide.data_mut().iter_mut().for_each(|v| *v *= 10.0);
    let x = g.constant(wide);
    let one8 = g.constant(Tensor::full(&[8], 1.0));
    let zero8 = g.constant(Tensor::zeros(&[8]));
    let out = g.layer_norm(x, one8, zero8, 1e-6).unwrap();
    for row in g.value(out).data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3]));
    let y = g.softmax(x).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::new(vec![1000.0, 0.0], &[2]).unwrap());
    let y = g.softmax(x).unwrap();
    let d = g.value(y).data();
    assert_eq!(d[0], 1.0);
    assert!(d[1] >= 0.0 && d[1] < 1e-300);

    let mut rng = rng_from_seed(3);
    let x = g.constant(randn(&[6], &mut rng));
    let y = g.softmax(x).unwrap();
    let s: f64 = g.value(y).data().iter().sum();
    assert!((s - 1.0).abs() < 1e-12);
    assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
}

#[test]
fn gelu_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![0.0, 10.0, -10.0, 0.5], &[4]).unwrap());
    let y = g.gelu(x);
    let d = g.value(y).data().to_vec();
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 10.0).abs() < 1e-12);
    assert!(d[2].abs() < 1e-12);

    // gradient at 0.5 against a central difference
    let f = |v: f64| v * 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
    let h = 1e-5;
    let fd = (f(0.5 + h) - f(0.5 - h)) / (2.0 * h);
    let s = g.sum(y);
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap();
    assert!((grad.data()[3] - fd).abs() < 1e-6);
}

#[test]
fn backward_examples_and_errors() {
    let mut rng = rng_from_seed(4);
    let w0 = randn(&[5], &mut rng);
    let mut g = Graph::new();
    let w = g.param(w0.clone());
    let s = g.sum(w);
    g.backward(s).unwrap();
    assert!(g.grad(w).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(matches!(g.backward(s), Err(EnkiError::BackwardTwice)));
    g.reset_grads();
    g.backward(s).unwrap();

    let mut g = Graph::new();
    let w = g.param(w0.clone());
    let sq = g.mul(w, w).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    for (gv, wv) in g.grad(w).unwrap().data().iter().zip(w0.data()) {
        assert_eq!(*gv, 2.0 * wv);
    }

    let mut g = Graph::new();
    let w = g.param(w0.clone());
    assert!(matches!(g.backward(w), Err(EnkiError::Shape { .. })));
    let c = g.constant(w0);
    let s = g.sum(c);
    assert!(matches!(g.backward(s), Err(EnkiError::DetachedGraph)));
}

#[test]
fn scatter_inverts_gather_for_permutations() {
    use rand::seq::SliceRandom;
    let mut rng = rng_from_seed(11);
    for _ in 0..20 {
        let x = randn(&[3, 7, 2], &mut rng);
        let mut index = Vec::new();
        for _ in 0..3 {
            let mut p: Vec<usize> = (0..7).collect();
            p.shuffle(&mut rng);
            index.extend(p);
        }
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let gathered = g.gather(v, &index, 7).unwrap();
        let back = g.scatter(gathered, &index, 7).unwrap();
        assert_eq!(g.value(back), &x);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = rng_from_seed(21);
        let mut g = Graph::new();
        let a = g.constant(randn(&[4, 16, 8], &mut rng));
        let w = g.constant(randn(&[8, 8], &mut rng));
        let h = g.matmul(a, w).unwrap();
        let s = g.softmax(h).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run(), run());
}
