//! Central-difference gradient checks for every differentiable tape op.

use owcod_core::tensor::{AdamW, AdamWConfig, CosineSchedule, Graph, ParamStore, SeededRng, Tensor, Var};

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn random(shape: &[usize], rng: &mut SeededRng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.range(lo, hi)).trainable()
}

/// Compare tape gradients of `f` against central differences at every coordinate.
fn check(inputs: &[Tensor], f: &Build) {
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars);
        g.item(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).expect("input reached").to_vec();
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let tol = 1e-6 * (1.0 + numeric.abs());
            assert!(
                (numeric - analytic[i]).abs() <= tol,
                "input {k} coord {i}: numeric {numeric} analytic {}",
                analytic[i]
            );
        }
    }
}

fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let n: usize = g.shape(x).iter().product();
    let shape = g.shape(x).to_vec();
    let mut rng = SeededRng::new(seed);
    let w = g.constant(shape, (0..n).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap();
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

#[test]
fn matmul_and_transpose() {
    let mut rng = SeededRng::new(1);
    let a = random(&[3, 4], &mut rng, -1.0, 1.0);
    let b = random(&[4, 2], &mut rng, -1.0, 1.0);
    check(&[a, b], &|g, v| {
        let m = g.matmul(v[0], v[1]).unwrap();
        let t = g.transpose(m).unwrap();
        weighted_sum(g, t, 7)
    });
}

#[test]
fn elementwise_binary_with_broadcast() {
    let mut rng = SeededRng::new(2);
    let a = random(&[3, 4], &mut rng, 0.5, 1.5);
    let row = random(&[1, 4], &mut rng, 0.5, 1.5);
    let s = random(&[1, 1], &mut rng, 0.5, 1.5);
    check(&[a, row, s], &|g, v| {
        let x = g.add(v[0], v[1]).unwrap();
        let y = g.sub(x, v[2]).unwrap();
        let z = g.mul(y, v[1]).unwrap();
        let q = g.div(z, v[0]).unwrap();
        let r = g.div(q, v[2]).unwrap();
        weighted_sum(g, r, 3)
    });
}

#[test]
fn unary_nonlinearities() {
    let mut rng = SeededRng::new(3);
    // Keep values away from the relu / abs kink at zero.
    let a = Tensor::from_fn([2, 5], |i| {
        let v = rng.range(0.1, 2.0);
        if i % 2 == 0 { v } else { -v }
    })
    .trainable();
    check(&[a], &|g, v| {
        let r = g.relu(v[0]);
        let ge = g.gelu(v[0]);
        let s = g.sigmoid(v[0]);
        let ab = g.abs(v[0]).unwrap();
        let l = g.log(ab).unwrap();
        let sc = g.scale(s, 1.7);
        let off = g.offset(sc, 0.3).unwrap();
        let mut acc = g.add(r, ge).unwrap();
        acc = g.add(acc, off).unwrap();
        acc = g.add(acc, l).unwrap();
        weighted_sum(g, acc, 11)
    });
}

#[test]
fn softmax_layer_norm_and_l2() {
    let mut rng = SeededRng::new(4);
    let a = random(&[3, 5], &mut rng, -2.0, 2.0);
    check(&[a], &|g, v| {
        let s = g.softmax(v[0]);
        let n = g.layer_norm(v[0], 1e-5);
        let u = g.l2_normalize(v[0], 1e-9);
        let x = g.add(s, n).unwrap();
        let y = g.add(x, u).unwrap();
        weighted_sum(g, y, 5)
    });
}

#[test]
fn min_max_reductions_and_layout() {
    let mut rng = SeededRng::new(5);
    let a = random(&[4, 3], &mut rng, -1.0, 1.0);
    let b = random(&[4, 3], &mut rng, -1.0, 1.0);
    check(&[a, b], &|g, v| {
        let mx = g.maximum(v[0], v[1]).unwrap();
        let mn = g.minimum(v[0], v[1]).unwrap();
        let c = g.concat(&[mx, mn], 1).unwrap();
        let s = g.slice(c, 1, 1, 5).unwrap();
        let r = g.concat(&[s, s], 0).unwrap();
        let sa = g.sum_axis(r, 0).unwrap();
        let ma = g.mean_axis(r, 1).unwrap();
        let m = g.mean(ma);
        let w = weighted_sum(g, sa, 9);
        g.add(w, m).unwrap()
    });
}

#[test]
fn adamw_first_step_matches_hand_computation() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new([1, 2], vec![1.0, -2.0]).unwrap().trainable()).unwrap();
    store
        .get_mut("w")
        .unwrap()
        .set_grad(Some(vec![0.5, -0.25]))
        .unwrap();
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.01,
        horizon: 0,
        ..Default::default()
    };
    let mut opt = AdamW::new(cfg);
    opt.step(&mut store).unwrap();
    // First step: m_hat = g, v_hat = g^2, so the update is lr * sign(g) up to eps.
    let expect = |x: f64, gr: f64| x * (1.0 - 0.1 * 0.01) - 0.1 * gr / (gr.abs() + cfg.eps);
    let w = store.get("w").unwrap().data().to_vec();
    assert!((w[0] - expect(1.0, 0.5)).abs() < 1e-12);
    assert!((w[1] - expect(-2.0, -0.25)).abs() < 1e-12);
}

#[test]
fn cosine_schedule_endpoints() {
    let s = CosineSchedule { base: 0.4, horizon: 10 };
    assert_eq!(s.lr_at(0), 0.4);
    assert!((s.lr_at(5) - 0.2).abs() < 1e-15);
    assert!(s.lr_at(10).abs() < 1e-15);
    assert!(s.lr_at(20).abs() < 1e-15);
}
