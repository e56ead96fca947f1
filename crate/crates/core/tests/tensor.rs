use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use capctl_core::tensor::nn::{gru_cell, lstm_cell, GruIds, LstmIds};
use capctl_core::tensor::{
    clip_grad_norm, concat, finite_diff_check, Adam, AdamConfig, Graph, ParamSet, Tensor,
};

const TOL: f64 = 1e-4;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

fn matrix(r: usize, c: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    values(r * c).prop_map(move |v| (r, c, v))
}

fn set(entries: &[(&str, Vec<usize>, &[f64])]) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (name, shape, data) in entries {
        p.insert(
            *name,
            Tensor::new(shape.clone(), data.to_vec())
                .unwrap()
                .with_grad(true),
        )
        .unwrap();
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn softmax_rows_are_distributions((r, c, v) in (1usize..5, 1usize..7).prop_flat_map(|(r, c)| matrix(r, c)), shift in -50.0..50.0f64) {
        let g = Graph::<f64>::new();
        let x = g.constant_from(vec![r, c], v.clone()).unwrap();
        let y = x.softmax(1).unwrap().to_vec();
        let shifted = g.constant_from(vec![r, c], v.iter().map(|a| a + shift).collect()).unwrap();
        let z = shifted.softmax(1).unwrap().to_vec();
        for (row, zrow) in y.chunks(c).zip(z.chunks(c)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p > 0.0));
            for (a, b) in row.iter().zip(zrow) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_gradients_check((r, k, c) in (1usize..4, 1usize..4, 1usize..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..r * k).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * c).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let w: Vec<f64> = (0..r * c).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let p = set(&[("a", vec![r, k], &a), ("b", vec![k, c], &b)]);
        let ids = (p.require("a").unwrap(), p.require("b").unwrap());
        let check = finite_diff_check(&p, 1e-5, |g, p| {
            let y = g.param(p, ids.0).matmul(&g.param(p, ids.1))?;
            Ok(y.mul(&g.constant_from(vec![r, c], w.clone())?)?.sum())
        }).unwrap();
        prop_assert!(check.passes(TOL), "{check:?}");
    }

    #[test]
    fn softmax_and_concat_gradients_check((r, c, v) in (1usize..4, 2usize..5).prop_flat_map(|(r, c)| matrix(r, c)), w in values(24)) {
        let p = set(&[("x", vec![r, c], &v), ("y", vec![r, 2], &w[..2 * r])]);
        let ids = (p.require("x").unwrap(), p.require("y").unwrap());
        let weights: Vec<f64> = w[..r * (c + 2)].iter().map(|x| x + 0.5).collect();
        let check = finite_diff_check(&p, 1e-5, |g, p| {
            let s = g.param(p, ids.0).softmax(1)?;
            let joined = concat(&[s, g.param(p, ids.1)], 1)?;
            Ok(joined.mul(&g.constant_from(vec![r, c + 2], weights.clone())?)?.sum())
        }).unwrap();
        prop_assert!(check.passes(TOL), "{check:?}");
    }

    #[test]
    fn recurrent_cells_gradients_check(n in 1usize..3, input in 1usize..4, hidden in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::<f64>::new();
        let lstm = LstmIds::register(&mut p, "lstm", input, hidden, &mut rng).unwrap();
        let gru = GruIds::register(&mut p, "gru", input, hidden, &mut rng).unwrap();
        let mut data = |len: usize| -> Vec<f64> { (0..len).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect() };
        let x = data(n * input);
        let h = data(n * hidden);
        let c = data(n * hidden);
        let check = finite_diff_check(&p, 1e-5, |g, p| {
            let xv = g.constant_from(vec![n, input], x.clone())?;
            let hv = g.constant_from(vec![n, hidden], h.clone())?;
            let cv = g.constant_from(vec![n, hidden], c.clone())?;
            let (h1, c1) = lstm_cell(&xv, &hv, &cv, &lstm.bind(g, p))?;
            let h2 = gru_cell(&xv, &h1, &gru.bind(g, p))?;
            Ok(h2.add(&c1)?.tanh().sum())
        }).unwrap();
        prop_assert!(check.passes(TOL), "{check:?}");
    }

    #[test]
    fn fan_out_gradients_add(v in values(4), k in 1usize..5) {
        let p = set(&[("x", vec![4], &v)]);
        let id = p.require("x").unwrap();
        let g = Graph::new();
        let x = g.param(&p, id);
        let mut total = x.sum();
        for _ in 1..k {
            total = total.add(&x.sum()).unwrap();
        }
        g.backward(total).unwrap();
        let grad = x.grad().unwrap();
        prop_assert!(grad.data().iter().all(|d| (*d - k as f64).abs() < 1e-12));
    }

    #[test]
    fn adam_ignores_zero_gradients(v in values(6), steps in 1usize..5) {
        let mut p = set(&[("x", vec![6], &v)]);
        let id = p.require("x").unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..steps {
            p.get_mut(id).set_grad(Some(vec![0.0; 6]));
            adam.step(&mut p).unwrap();
        }
        prop_assert_eq!(p.by_name("x").unwrap().data(), v.as_slice());
    }

    #[test]
    fn clipping_bounds_the_norm(v in values(6), max in 0.01..3.0f64) {
        let mut p = set(&[("x", vec![6], &v)]);
        let id = p.require("x").unwrap();
        p.get_mut(id).set_grad(Some(v.clone()));
        let before = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let reported = clip_grad_norm(&mut p, max);
        prop_assert!((reported - before).abs() < 1e-9);
        let after = p.get(id).grad().unwrap().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(after <= max + 1e-9);
        if before <= max {
            prop_assert_eq!(p.get(id).grad().unwrap(), v.as_slice());
        }
    }
}

#[test]
fn identity_has_unit_gradient() {
    let p = set(&[("x", vec![5], &[0.3, -1.0, 2.0, 0.0, 7.5])]);
    let id = p.require("x").unwrap();
    let g = Graph::new();
    let x = g.param(&p, id);
    g.backward(x.sum()).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.0; 5]);
}

#[test]
fn same_seed_same_parameters() {
    let build = |seed| {
        let mut p = ParamSet::<f32>::new();
        LstmIds::register(&mut p, "l", 3, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        p.iter()
            .flat_map(|(_, _, t)| t.data().to_vec())
            .collect::<Vec<_>>()
    };
    assert_eq!(build(4), build(4));
    assert_ne!(build(4), build(5));
}
