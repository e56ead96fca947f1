//! Finite-difference gradient suite over every kernel and both full models.

use rand::{Rng, SeedableRng};

use crate::captioner::{Captioner, CaptionerConfig, Direction};
use crate::corpus::{Control, RegionFeatureSet};
use crate::error::Result;
use crate::matcher::{Matcher, MatcherConfig};
use crate::rng::{stream, Rng as StreamRng};
use crate::tensor::nn::{lstm_cell, GruIds, LstmIds};
use crate::tensor::{
    concat, finite_diff_check_scaled, GradCheck, Graph, ParamId, ParamSet, Tensor,
};

/// Relative error every check must stay under.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
// the recurrent model has gradients near 1e-7 where a small step is lost to roundoff
const MODEL_STEP: f64 = 1e-4;

/// One row of the gradient suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub name: &'static str,
    pub report: GradCheck,
}

impl SuiteRow {
    pub fn passes(&self) -> bool {
        self.report.passes(GRAD_TOLERANCE)
    }
}

fn random(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("positive extents")
}

fn regions(rng: &mut StreamRng, k: usize, d: usize) -> RegionFeatureSet {
    RegionFeatureSet {
        scene_id: 0,
        features: (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect(),
    }
}

/// Randomizes every bias so no gate sits at a symmetric point.
fn jitter(params: &mut ParamSet<f64>, rng: &mut StreamRng) {
    let ids: Vec<ParamId> = params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        params
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x += rng.random_range(-0.1..0.1));
    }
}

/// Runs every check; `analytic_scale` other than 1 corrupts the analytic
/// gradients to confirm that failures are caught.
pub fn grad_suite(seed: u64, analytic_scale: f64) -> Result<Vec<SuiteRow>> {
    let mut rng = stream(seed, "grad-check");
    let mut rows = Vec::new();
    let mut check = |name: &'static str,
                     step: f64,
                     params: &ParamSet<f64>,
                     f: &dyn for<'g> Fn(
        &'g Graph<f64>,
        &ParamSet<f64>,
    ) -> Result<crate::tensor::Var<'g, f64>>|
     -> Result<()> {
        let report = finite_diff_check_scaled(params, step, analytic_scale, f)?;
        rows.push(SuiteRow { name, report });
        Ok(())
    };

    let mut p = ParamSet::new();
    p.insert("a", random(&mut rng, &[3, 4]))?;
    p.insert("b", random(&mut rng, &[4, 2]))?;
    check("matmul", STEP, &p, &|g, p| {
        Ok(g.param(p, ParamId(0))
            .matmul(&g.param(p, ParamId(1)))?
            .sum())
    })?;

    let mut p = ParamSet::new();
    p.insert("x", random(&mut rng, &[3, 5]))?;
    let wts = random(&mut rng, &[3, 5]);
    check("softmax", STEP, &p, &|g, p| {
        let w = g.constant(&wts);
        Ok(g.param(p, ParamId(0)).softmax(1)?.mul(&w)?.sum())
    })?;

    let mut p = ParamSet::new();
    p.insert("x", random(&mut rng, &[2, 3]))?;
    p.insert("h", random(&mut rng, &[2, 4]))?;
    p.insert("c", random(&mut rng, &[2, 4]))?;
    let lstm = LstmIds::register(&mut p, "lstm", 3, 4, &mut rng)?;
    jitter(&mut p, &mut rng);
    check("lstm_cell", STEP, &p, &|g, p| {
        let cell = lstm.bind(g, p);
        let (x, h, c) = (
            g.param(p, ParamId(0)),
            g.param(p, ParamId(1)),
            g.param(p, ParamId(2)),
        );
        let (h1, c1) = lstm_cell(&x, &h, &c, &cell)?;
        let (h2, c2) = lstm_cell(&x, &h1, &c1, &cell)?;
        h2.sum().add(&c2.scale(0.5).sum())
    })?;

    let mut p = ParamSet::new();
    p.insert("x", random(&mut rng, &[2, 3]))?;
    p.insert("h", random(&mut rng, &[2, 4]))?;
    let gru = GruIds::register(&mut p, "gru", 3, 4, &mut rng)?;
    jitter(&mut p, &mut rng);
    check("gru_cell", STEP, &p, &|g, p| {
        let cell = gru.bind(g, p);
        let (x, h) = (g.param(p, ParamId(0)), g.param(p, ParamId(1)));
        let h1 = cell.step(&x, &h)?;
        Ok(cell.step(&x, &h1)?.sum())
    })?;

    let mut p = ParamSet::new();
    p.insert("a", random(&mut rng, &[2, 3]))?;
    p.insert("b", random(&mut rng, &[2, 2]))?;
    let wts = random(&mut rng, &[2, 5]);
    check("concat", STEP, &p, &|g, p| {
        let c = concat(&[g.param(p, ParamId(0)), g.param(p, ParamId(1))], 1)?;
        Ok(c.mul(&g.constant(&wts))?.sum())
    })?;

    let cap_cfg = CaptionerConfig {
        feat_dim: 3,
        proj_dim: 4,
        embed_dim: 3,
        hidden: 4,
        att_dim: 3,
        vocab_size: 8,
        control: Control::Multi,
        direction: Direction::Forward,
        max_len: 6,
    };
    let mut init = StreamRng::seed_from_u64(rng.random());
    let mut cap = Captioner::<f64>::new(cap_cfg.clone(), &mut init)?;
    jitter(cap.params_mut(), &mut rng);
    let (f1, f2) = (regions(&mut rng, 3, 3), regions(&mut rng, 2, 3));
    check("captioner_xe", MODEL_STEP, cap.params(), &|g, p| {
        let m = Captioner::from_parts(cap_cfg.clone(), p.clone())?;
        let w = m.bind(g)?;
        let (loss, _) = m.xe_loss_batch(
            g,
            &w,
            &[&f1, &f2],
            &[&[2.0, 5.0, 3.0, 2.0], &[0.5, 3.0, 1.0, 3.0]],
            &[&[4, 5, 6], &[7, 4]],
        )?;
        Ok(loss)
    })?;

    let m_cfg = MatcherConfig {
        vocab_size: 8,
        feat_dim: 3,
        embed_dim: 2,
        hidden: 3,
        project: false,
        margin: 5.0,
        tau: 9.0,
    };
    let mut matcher = Matcher::<f64>::new(m_cfg.clone(), &mut init)?;
    jitter(matcher.params_mut(), &mut rng);
    check("matcher_triplet", STEP, matcher.params(), &|g, p| {
        let m = Matcher::from_parts(m_cfg.clone(), p.clone())?;
        let w = m.bind(g);
        m.triplet_batch(
            g,
            &w,
            &[(&f1, &[4, 5, 6], &[7, 3]), (&f2, &[5, 5], &[6, 4, 3])],
        )
    })?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_detects_corruption() {
        let rows = grad_suite(1, 1.0).unwrap();
        assert_eq!(rows.len(), 7);
        for r in &rows {
            assert!(r.passes(), "{}: {:?}", r.name, r.report);
        }
        let bad = grad_suite(1, 1.05).unwrap();
        assert!(bad.iter().all(|r| !r.passes()));
    }
}
