use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::finite_diff_check;

fn tiny(project: bool) -> MatcherConfig {
    MatcherConfig {
        vocab_size: 6,
        feat_dim: 3,
        embed_dim: 2,
        hidden: if project { 4 } else { 3 },
        project,
        margin: 0.2,
        tau: 9.0,
    }
}

fn regions(seed: u64, k: usize) -> RegionFeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RegionFeatureSet {
        scene_id: seed,
        features: (0..k)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect(),
    }
}

fn biased(mut m: Matcher<f64>) -> Matcher<f64> {
    let names: Vec<String> = m.params().iter().map(|(_, n, _)| n.to_string()).collect();
    for name in names
        .iter()
        .filter(|n| n.contains("b_") || n.ends_with("bias"))
    {
        let id = m.params().require(name).unwrap();
        for (j, x) in m.params_mut().get_mut(id).data_mut().iter_mut().enumerate() {
            *x = 0.1 * ((j % 3) as f64 - 1.0);
        }
    }
    m
}

#[test]
fn identical_unit_vectors_score_one() {
    let b = similarity(&[vec![0.6, 0.8]], &[vec![0.6, 0.8]], 9.0).unwrap();
    assert!((b.s[0][0] - 1.0).abs() < 1e-12);
    assert!((b.alpha[0][0] - 1.0).abs() < 1e-12);
    assert!((b.r[0] - 1.0).abs() < 1e-12);
    assert!((b.score - 1.0).abs() < 1e-12);
}

#[test]
fn orthogonal_regions_score_zero() {
    let b = similarity(
        &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
        &[vec![0.0, 0.0, 2.0]],
        9.0,
    )
    .unwrap();
    assert_eq!(b.s_bar, vec![vec![0.0], vec![0.0]]);
    assert_eq!(b.score, 0.0);
    let z = similarity(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]], 9.0).unwrap();
    assert_eq!(z.score, 0.0);
}

#[test]
fn attention_follows_temperature_softmax() {
    // region 0 aligned with the word, region 1 orthogonal: s̄ column (1, 0)
    let b = similarity(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0]], 9.0).unwrap();
    let e9 = 9f64.exp();
    assert!((b.alpha[0][0] - e9 / (e9 + 1.0)).abs() < 1e-12);
    assert!((b.alpha[1][0] - 1.0 / (e9 + 1.0)).abs() < 1e-12);
}

#[test]
fn s_bar_normalizes_over_words() {
    let b = similarity(
        &[vec![1.0, 1.0]],
        &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
        4.0,
    )
    .unwrap();
    let row = &b.s_bar[0];
    assert!((row.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(row[2], 0.0);
}

#[test]
fn triplet_examples() {
    assert!((triplet_loss(0.5, 0.45, 0.2) - 0.15).abs() < 1e-12);
    assert_eq!(triplet_loss(0.3, 0.3, 0.2), 0.2);
    assert_eq!(triplet_loss(0.9, 0.3, 0.2), 0.0);
}

#[test]
fn zero_gru_weights_give_zero_words() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = Matcher::<f64>::new(tiny(false), &mut rng).unwrap();
    let ids: Vec<_> = m
        .params()
        .iter()
        .filter(|(_, n, _)| n.contains("gru"))
        .map(|(i, _, _)| i)
        .collect();
    for id in ids {
        m.params_mut()
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
    }
    let g = Graph::new();
    let w = m.bind(&g);
    let e = m.encode_text(&g, &w, &[1, 4, 5]).unwrap();
    assert!(e.to_vec().iter().all(|&x| x == 0.0));
}

#[test]
fn single_token_averages_both_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = biased(Matcher::<f64>::new(tiny(false), &mut rng).unwrap());
    let g = Graph::new();
    let w = m.bind(&g);
    let e = m.encode_text(&g, &w, &[4]).unwrap().to_vec();
    let x = w.embed.gather_rows(&[4]).unwrap();
    let h0 = g.constant_from(vec![1, 3], vec![0.0; 3]).unwrap();
    let f = w.gru_f.step(&x, &h0).unwrap().to_vec();
    let b = w.gru_b.step(&x, &h0).unwrap().to_vec();
    for i in 0..3 {
        assert!((e[i] - (f[i] + b[i]) / 2.0).abs() < 1e-15);
    }
    assert!(m.encode_text(&g, &w, &[]).is_err());
}

#[test]
fn selection_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = Matcher::<f64>::new(tiny(false), &mut rng).unwrap();
    let f = regions(4, 3);
    assert_eq!(m.select_caption(&f, &[&[1, 2]]).unwrap().0, 0);
    assert_eq!(m.select_caption(&f, &[&[1, 2], &[1, 2]]).unwrap().0, 0);
    assert!(m.select_caption(&f, &[]).is_err());
    assert_eq!(argmax_first(&[0.1, 0.5, 0.5]), Some(1));
}

#[test]
fn aligned_candidate_is_selected() {
    // embed = hidden = regions = 3; update gate forced shut so e_t ≈ tanh(x_t)
    let cfg = MatcherConfig {
        embed_dim: 3,
        ..tiny(false)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = Matcher::<f64>::new(cfg, &mut rng).unwrap();
    let set = |m: &mut Matcher<f64>, name: &str, f: &dyn Fn(usize, usize) -> f64| {
        let id = m.params().require(name).unwrap();
        let cols = m.params().get(id).shape().last().copied().unwrap();
        for (i, x) in m.params_mut().get_mut(id).data_mut().iter_mut().enumerate() {
            *x = f(i / cols, i % cols);
        }
    };
    for d in ["gru_f", "gru_b"] {
        set(&mut m, &format!("matcher/{d}/w_ih"), &|r, c| {
            if c >= 6 && c - 6 == r {
                1.0
            } else {
                0.0
            }
        });
        set(&mut m, &format!("matcher/{d}/w_hh"), &|_, _| 0.0);
        set(&mut m, &format!("matcher/{d}/b_ih"), &|_, c| {
            if (3..6).contains(&c) {
                -30.0
            } else {
                0.0
            }
        });
        set(&mut m, &format!("matcher/{d}/b_hh"), &|_, _| 0.0);
    }
    // tokens 1, 2 point along the regions; tokens 3, 4 are orthogonal
    set(&mut m, "matcher/embed", &|r, c| match (r, c) {
        (1, 0) | (2, 0) => 1.0,
        (3, 1) | (4, 2) => 1.0,
        _ => 0.0,
    });
    let f = RegionFeatureSet {
        scene_id: 0,
        features: vec![vec![2.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]],
    };
    let a: &[TokenId] = &[3, 4];
    let b: &[TokenId] = &[1, 2];
    let (idx, scores) = m.select_caption(&f, &[a, b]).unwrap();
    assert_eq!(idx, 1, "{scores:?}");
    assert!(scores[0].abs() < 1e-9 && (scores[1] - 1.0).abs() < 1e-9);
}

#[test]
fn alpha_columns_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = biased(Matcher::<f64>::new(tiny(true), &mut rng).unwrap());
    let b = m.breakdown(&regions(7, 4), &[1, 3, 5, 2]).unwrap();
    for t in 0..4 {
        let s: f64 = b.alpha.iter().map(|row| row[t]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert!(b.r.iter().all(|r| (-1.0 - 1e-12..=1.0 + 1e-12).contains(r)));
    assert!((b.score - b.r.iter().sum::<f64>() / 4.0).abs() < 1e-12);
}

#[test]
fn encoding_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = biased(Matcher::<f64>::new(tiny(false), &mut rng).unwrap());
    let report = finite_diff_check(m.params(), 1e-5, |g, p| {
        let m = Matcher::from_parts(m.config().clone(), p.clone())?;
        let w = m.bind(g);
        let e = m.encode_text(g, &w, &[1, 4, 2])?;
        Ok(e.mul(&e)?.sum())
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn triplet_gradients_match_finite_differences() {
    for project in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = biased(Matcher::<f64>::new(tiny(project), &mut rng).unwrap());
        let (f1, f2) = (regions(10, 3), regions(11, 2));
        let report = finite_diff_check(m.params(), 1e-5, |g, p| {
            let mut m = Matcher::from_parts(m.config().clone(), p.clone())?;
            // a wide margin keeps every hinge active
            m.config.margin = 5.0;
            let w = m.bind(g);
            m.triplet_batch(
                g,
                &w,
                &[(&f1, &[1, 2, 3], &[4, 5]), (&f2, &[2, 2], &[5, 1, 3])],
            )
        })
        .unwrap();
        assert!(report.passes(1e-4), "{project}: {report:?}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = Matcher::<f32>::new(tiny(true), &mut rng).unwrap();
    let bytes = m.to_checkpoint(5).unwrap().to_bytes();
    let back = Matcher::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.to_checkpoint(5).unwrap().to_bytes(), bytes);
    assert_eq!(back.config().hidden, 4);
    assert!(back.config().project);
}

#[test]
fn width_rule_enforced() {
    let mut c = tiny(false);
    c.hidden = 5;
    assert!(c.validate().is_err());
    c.project = true;
    assert!(c.validate().is_ok());
}
