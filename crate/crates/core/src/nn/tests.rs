use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::uniform(r, c, 1.0, rng)
}

/// Compare tape gradients of `build` with central differences over every
/// parameter entry.
fn check_grad<F>(params: Vec<Tensor>, build: F)
where
    F: for<'p> Fn(&mut Graph<'p>, &[Var]) -> Var,
{
    let eval = |ps: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
        let l = build(&mut g, &vars);
        g.value(l).get(0, 0)
    };
    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
        let l = build(&mut g, &vars);
        g.param_grads(l, params.len())
    };
    let h = 1e-6;
    let mut ps = params.clone();
    for pi in 0..ps.len() {
        for e in 0..ps[pi].len() {
            let orig = ps[pi].data()[e];
            ps[pi].data_mut()[e] = orig + h;
            let fp = eval(&ps);
            ps[pi].data_mut()[e] = orig - h;
            let fm = eval(&ps);
            ps[pi].data_mut()[e] = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = analytic[pi].data()[e];
            let tol = 1e-6 * (1.0 + num.abs());
            assert!(
                (num - ana).abs() <= tol,
                "param {pi} entry {e}: analytic {ana} numeric {num}"
            );
        }
    }
}

fn target(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    rand_t(rng, r, c)
}

#[test]
fn gemm_matches_naive_product_with_transposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_t(&mut rng, 4, 3);
    let b = rand_t(&mut rng, 3, 5);
    let c = matmul(&a, &b);
    for i in 0..4 {
        for j in 0..5 {
            let s: f64 = (0..3).map(|k| a.get(i, k) * b.get(k, j)).sum();
            assert!((c.get(i, j) - s).abs() < 1e-14);
        }
    }
    let mut ct = Tensor::zeros(4, 5);
    tensor::gemm(1.0, &a.transpose(), true, &b.transpose(), true, 0.0, &mut ct);
    assert_eq!(c, ct);
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = target(&mut rng, 5, 3);
    let ps = vec![rand_t(&mut rng, 5, 4), rand_t(&mut rng, 4, 3), rand_t(&mut rng, 1, 3)];
    check_grad(ps, move |g, v| {
        let y = g.linear(v[0], v[1], v[2]);
        g.mse(y, t.clone())
    });
}

#[test]
fn matmul_add_mul_scale_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = target(&mut rng, 3, 2);
    let ps = vec![rand_t(&mut rng, 3, 4), rand_t(&mut rng, 4, 2), rand_t(&mut rng, 3, 2)];
    check_grad(ps, move |g, v| {
        let m = g.matmul(v[0], v[1]);
        let a = g.add(m, v[2]);
        let p = g.mul(a, v[2]);
        let s = g.scale(p, -1.7);
        let c = g.scale_cols(s, vec![0.5, 3.0]);
        g.mse(c, t.clone())
    });
}

#[test]
fn activation_and_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = target(&mut rng, 4, 6);
    let ps = vec![rand_t(&mut rng, 4, 6)];
    check_grad(ps, move |g, v| {
        let a = g.silu(v[0]);
        let b = g.layer_norm(a);
        let c = g.tanh(b);
        g.mse(c, t.clone())
    });
}

#[test]
fn layout_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = target(&mut rng, 6, 5);
    let ps = vec![rand_t(&mut rng, 2, 2), rand_t(&mut rng, 3, 3), rand_t(&mut rng, 6, 5)];
    check_grad(ps, move |g, v| {
        let r = g.repeat_rows(v[0], 3); // 6x2
        let tl = g.tile_rows(v[1], 2); // 6x3
        let c = g.concat_cols(&[r, tl]); // 6x5
        let s = g.group_shift(c, 3, 1);
        let s2 = g.group_shift(v[2], 3, -1);
        let a = g.add(s, s2);
        let rs = g.reshape(a, 5, 6);
        let back = g.reshape(rs, 6, 5);
        g.mse(back, t.clone())
    });
}

#[test]
fn group_max_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = target(&mut rng, 2, 3);
    let ps = vec![rand_t(&mut rng, 8, 3)];
    check_grad(ps, move |g, v| {
        let m = g.group_max(v[0], 4);
        g.mse(m, t.clone())
    });
}

#[test]
fn group_max_picks_column_maxima() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(4, 2, vec![1.0, 8.0, 5.0, 2.0, -1.0, 0.0, 3.0, -4.0]));
    let m = g.group_max(x, 2);
    assert_eq!(g.value(m).data(), &[5.0, 8.0, 3.0, 0.0]);
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = target(&mut rng, 2 * 3, 4);
    let ps = vec![
        rand_t(&mut rng, 2 * 3, 5),
        rand_t(&mut rng, 2 * 2, 5),
        rand_t(&mut rng, 2 * 2, 4),
    ];
    check_grad(ps, move |g, v| {
        let o = g.attention(v[0], v[1], v[2], 3, 2);
        g.mse(o, t.clone())
    });
}

#[test]
fn attention_rows_are_convex_combinations_of_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let q = g.input(rand_t(&mut rng, 3, 4));
    let k = g.input(rand_t(&mut rng, 5, 4));
    let vals = Tensor::from_vec(5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    let v = g.input(vals);
    let o = g.attention(q, k, v, 3, 5);
    for r in 0..3 {
        let x = g.value(o).get(r, 0);
        assert!((1.0..=5.0).contains(&x));
    }
}

#[test]
fn shared_parameter_gradients_accumulate() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = target(&mut rng, 3, 3);
    let ps = vec![rand_t(&mut rng, 3, 3)];
    check_grad(ps, move |g, v| {
        let a = g.matmul(v[0], v[0]);
        let b = g.add(a, v[0]);
        g.mse(b, t.clone())
    });
}

#[test]
fn inputs_receive_no_gradient_work() {
    let mut g = Graph::new();
    let w = Tensor::filled(2, 2, 1.0);
    let x = g.input(Tensor::filled(3, 2, 1.0));
    let wv = g.param(0, &w);
    let y = g.matmul(x, wv);
    let l = g.mse(y, Tensor::zeros(3, 2));
    let grads = g.param_grads(l, 2);
    assert_eq!(grads[0].shape(), (2, 2));
    assert_eq!(grads[1].shape(), (0, 0));
    assert!(grads[0].data().iter().all(|v| *v > 0.0));
}

#[test]
fn adamw_first_step_moves_by_lr_against_gradient_sign() {
    let mut params = vec![Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5])];
    let grads = vec![Tensor::from_vec(1, 3, vec![0.3, -4.0, 1e-3])];
    let mut opt = AdamW::new(&params, 1e-2, 0.0);
    opt.step(&mut params, &grads);
    let expect = [1.0 - 1e-2, -2.0 + 1e-2, 0.5 - 1e-2];
    for (p, e) in params[0].data().iter().zip(expect) {
        assert!((p - e).abs() < 1e-7, "{p} vs {e}");
    }
}

#[test]
fn adamw_weight_decay_shrinks_without_gradient() {
    let mut params = vec![Tensor::from_vec(1, 1, vec![2.0])];
    let grads = vec![Tensor::zeros(1, 1)];
    let mut opt = AdamW::new(&params, 0.1, 0.5);
    opt.step(&mut params, &grads);
    assert!((params[0].get(0, 0) - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
}

#[test]
fn sgd_minimizes_quadratic() {
    let mut params = vec![Tensor::from_vec(1, 2, vec![3.0, -1.0])];
    let mut opt = Sgd::new(&params, 0.1, 0.9);
    for _ in 0..300 {
        let grads = vec![params[0].clone()];
        opt.step(&mut params, &grads);
    }
    assert!(params[0].norm() < 1e-6);
}

#[test]
fn clip_grad_norm_caps_global_norm() {
    let mut gs = vec![Tensor::filled(2, 2, 3.0), Tensor::filled(1, 1, 4.0)];
    let before = clip_grad_norm(&mut gs, 1.0);
    assert!((before - (36.0f64 + 16.0).sqrt()).abs() < 1e-12);
    assert!((global_norm(&gs) - 1.0).abs() < 1e-12);
}

#[test]
fn init_linear_respects_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (w, b) = init_linear(16, 8, &mut rng);
    assert_eq!(w.shape(), (16, 8));
    assert_eq!(b.shape(), (1, 8));
    assert!(w.data().iter().chain(b.data()).all(|v| v.abs() <= 0.25));
}
