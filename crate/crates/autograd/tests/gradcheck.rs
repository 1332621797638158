use hoi_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Compares analytic gradients of `f` with central differences at `inputs`.
fn check(inputs: &[Tensor], f: impl Fn(&Graph, &[Var]) -> Var) {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out);
    let h = 1e-5;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
        for i in 0..t.len() {
            let eval = |delta: f64| {
                let g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, u)| {
                        let mut u = u.clone();
                        if j == k {
                            u.data_mut()[i] += delta;
                        }
                        g.param(u)
                    })
                    .collect();
                let out = f(&g, &vars);
                let v = g.value(out).item();
                v
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()),
                "input {k} element {i}: finite difference {fd}, analytic {an}"
            );
        }
    }
}

/// Weighted sum so every output element contributes a distinct gradient.
fn reduce(g: &Graph, v: Var, seed: u64) -> Var {
    let (r, c) = g.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&mut rng, r, c));
    let p = g.mul(v, w);
    g.sum(p)
}

#[test]
fn matmul_transpose_add_sub() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ins = [random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 3, 2)];
    check(&ins, |g, v| {
        let m = g.matmul(v[0], v[1]);
        let s = g.sub(m, v[2]);
        let t = g.transpose(s);
        let a = g.add(t, t);
        reduce(g, a, 7)
    });
}

#[test]
fn elementwise_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ins = [random(&mut rng, 3, 5), random(&mut rng, 1, 5), random(&mut rng, 3, 5)];
    check(&ins, |g, v| {
        let a = g.add_row(v[0], v[1]);
        let b = g.mul(a, v[2]);
        let c = g.gelu(b);
        let d = g.sigmoid(c);
        let e = g.scale(d, 1.7);
        let f = g.shift(e, &Tensor::filled(3, 5, 0.3));
        reduce(g, f, 8)
    });
}

#[test]
fn softmax_with_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ins = [random(&mut rng, 4, 4)];
    let mut mask = Tensor::zeros(4, 4);
    for r in 0..4 {
        for c in r + 1..4 {
            mask.set(r, c, f64::NEG_INFINITY);
        }
    }
    check(&ins, |g, v| {
        let m = g.shift(v[0], &mask);
        let s = g.softmax_rows(m);
        reduce(g, s, 9)
    });
}

#[test]
fn layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ins = [random(&mut rng, 3, 6), random(&mut rng, 1, 6), random(&mut rng, 1, 6)];
    check(&ins, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
        reduce(g, y, 10)
    });
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ins = [random(&mut rng, 2, 3), random(&mut rng, 3, 3), random(&mut rng, 5, 2)];
    check(&ins, |g, v| {
        let r = g.concat_rows(&[v[0], v[1]]);
        let c = g.concat_cols(&[r, v[2]]);
        let s = g.slice_cols(c, 1, 3);
        let gathered = g.gather_rows(s, &[4, 0, 0, 2]);
        let re = g.reshape(gathered, 2, 6);
        reduce(g, re, 11)
    });
}

#[test]
fn cosine_clamp_focal_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ins = [random(&mut rng, 4, 5), random(&mut rng, 1, 5)];
    check(&ins, |g, v| {
        let c = g.cosine_rows(v[0], v[1]);
        let c = g.clamp(c, 0.0, 1.0);
        let c = g.clamp(c, 1e-3, 1.0);
        let p = g.scale(c, 0.98);
        let l = g.focal_bce(p, &[1.0, 0.0, 1.0, 0.0], 0.25, 2.0);
        g.mean(l)
    });
}

#[test]
fn clamp_is_straight_through_inside_only() {
    let g = Graph::new();
    let x = g.param(Tensor::row_vector(vec![-0.5, 0.0, 0.4, 1.0, 1.5]));
    let c = g.clamp(x, 0.0, 1.0);
    let s = g.sum(c);
    let grads = g.backward(s);
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::new();
    let a = g.constant(Tensor::filled(2, 2, 1.0));
    let b = g.param(Tensor::filled(2, 2, 2.0));
    let m = g.mul(a, b);
    let s = g.sum(m);
    let grads = g.backward(s);
    assert!(grads.get(a).is_none());
    assert_eq!(grads.get(b).unwrap().data(), &[1.0; 4]);
}

#[test]
fn matmul_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random(&mut rng, 7, 5);
    let b = random(&mut rng, 5, 3);
    let c = a.matmul(&b);
    for i in 0..7 {
        for j in 0..3 {
            let naive: f64 = (0..5).map(|k| a.get(i, k) * b.get(k, j)).sum();
            assert!((naive - c.get(i, j)).abs() < 1e-12);
        }
    }
}
