//! Random-shape checks of reverse-mode gradients against central differences
//! computed here, independently of the library's own checker.

use aratts::autodiff::{Graph, Var};
use aratts::rng;
use aratts::tensor::Tensor;
use proptest::prelude::*;

type Build = dyn Fn(&Graph, &[Var]) -> Var;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape, |_| rng::normal(&mut r, scale))
}

/// Scalar objective `Σ f(x) ⊙ p` for a fixed random projection `p`.
fn objective(build: &Build, inputs: &[Tensor], projection_seed: u64, g: &Graph) -> (Var, Vec<Var>) {
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(g, &vars);
    let p = g.constant(random(&g.shape(out), projection_seed, 1.0));
    let loss = g.sum(g.mul(out, p).unwrap()).unwrap();
    (loss, vars)
}

fn max_rel_error(build: &Build, inputs: Vec<Tensor>, seed: u64) -> f64 {
    let g = Graph::new();
    let (loss, vars) = objective(build, &inputs, seed, &g);
    let grads = g.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&g, *v);
        for i in 0..inputs[k].len() {
            let eval = |delta: f64| {
                let mut xs = inputs.clone();
                xs[k].data_mut()[i] += delta;
                let g = Graph::inference();
                let (l, _) = objective(build, &xs, seed, &g);
                g.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul(m in 1usize..5, k in 1usize..5, n in 1usize..5, batch in 0usize..3, seed in 0u64..1000) {
        let a_shape: Vec<usize> = if batch == 0 { vec![m, k] } else { vec![batch, m, k] };
        let b_shape: Vec<usize> = if batch == 0 { vec![k, n] } else { vec![batch, k, n] };
        let err = max_rel_error(&|g, x| g.matmul(x[0], x[1]).unwrap(), vec![random(&a_shape, seed, 1.0), random(&b_shape, seed + 1, 1.0)], seed);
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv1d(b in 1usize..3, cin in 1usize..4, cout in 1usize..4, t in 1usize..7, half in 0usize..3, dilation in 1usize..3, seed in 0u64..1000) {
        let kernel = 2 * half + 1;
        let inputs = vec![random(&[b, cin, t], seed, 1.0), random(&[cout, cin, kernel], seed + 1, 0.5), random(&[cout], seed + 2, 0.5)];
        let err = max_rel_error(&move |g, x| g.conv1d(x[0], x[1], Some(x[2]), dilation).unwrap(), inputs, seed);
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn masked_softmax(rows in 1usize..4, cols in 2usize..7, seed in 0u64..1000) {
        let mask: Vec<bool> = (0..rows * cols).map(|i| i % cols == 0 || (i * 7 + seed as usize) % 3 != 0).collect();
        let build = move |g: &Graph, x: &[Var]| g.softmax(x[0], 1, Some(&mask)).unwrap();
        let err = max_rel_error(&build, vec![random(&[rows, cols], seed, 2.0)], seed);
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn lstm_cell(b in 1usize..3, h in 1usize..4, seed in 0u64..1000) {
        let inputs = vec![random(&[b, 4 * h], seed, 1.0), random(&[b, h], seed + 1, 1.0)];
        let err = max_rel_error(&|g, x| g.lstm_pointwise(x[0], x[1]).unwrap(), inputs, seed);
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn tanh_of_linear_with_broadcast_mul(b in 1usize..4, i in 1usize..5, o in 1usize..5, seed in 0u64..1000) {
        let inputs = vec![random(&[b, i], seed, 1.0), random(&[o, i], seed + 1, 0.7), random(&[o], seed + 2, 0.3)];
        let build = |g: &Graph, x: &[Var]| {
            let y = g.linear(x[0], x[1], Some(x[2])).unwrap();
            let y = g.tanh(y).unwrap();
            g.mul(y, x[2]).unwrap()
        };
        let err = max_rel_error(&build, inputs, seed);
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn softmax_rows_are_on_the_simplex(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..60.0, seed in 0u64..1000) {
        let g = Graph::inference();
        let s = g.softmax(g.constant(random(&[rows, cols], seed, scale)), 1, None).unwrap();
        let v = g.value(s);
        for r in 0..rows {
            let row = &v.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_norm_standardizes_each_channel(b in 2usize..5, c in 1usize..4, t in 1usize..6, seed in 0u64..1000) {
        let g = Graph::inference();
        let x = g.constant(random(&[b, c, t], seed, 3.0).map(|v| v + 5.0));
        let (y, _, _) = g.batch_norm_train(x, g.constant(Tensor::ones(&[c])), g.constant(Tensor::zeros(&[c])), 1e-12).unwrap();
        let y = g.value(y);
        for ch in 0..c {
            let vals: Vec<f64> = (0..b).flat_map(|i| (0..t).map(move |k| (i, k))).map(|(i, k)| y.data()[(i * c + ch) * t + k]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let run = || {
        let g = Graph::new();
        let x = g.leaf(random(&[2, 3, 6], 1, 1.0));
        let w = g.leaf(random(&[4, 3, 3], 2, 0.5));
        let y = g.conv1d(x, w, None, 2).unwrap();
        let mut r = rng::seeded(9);
        let y = g.dropout(y, 0.3, &mut r).unwrap();
        let y = g.tanh(y).unwrap();
        let loss = g.mean(g.mul(y, y).unwrap()).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(loss).item().to_bits(), grads.wrt(&g, x).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
