//! Recurrent cells and small layers built from graph primitives.

use rand::Rng;

use super::graph::concat;
use super::{xavier_uniform, Graph, ParamId, ParamSet, Real, Tensor, Var};
use crate::error::{dim_err, Result};

/// Parameter ids of a linear layer `y = x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearIds {
    pub fn register<F: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<F>,
        prefix: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.insert(
            format!("{prefix}/weight"),
            xavier_uniform(input, output, rng),
        )?;
        let bias = if bias {
            Some(params.insert(format!("{prefix}/bias"), Tensor::zeros(&[output]))?)
        } else {
            None
        };
        Ok(LinearIds { weight, bias })
    }

    pub fn bind<'g, F: Real>(&self, g: &'g Graph<F>, params: &ParamSet<F>) -> Linear<'g, F> {
        Linear {
            weight: g.param(params, self.weight),
            bias: self.bias.map(|b| g.param(params, b)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear<'g, F: Real> {
    pub weight: Var<'g, F>,
    pub bias: Option<Var<'g, F>>,
}

impl<'g, F: Real> Linear<'g, F> {
    pub fn forward(&self, x: &Var<'g, F>) -> Result<Var<'g, F>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }
}

/// Parameter ids of an LSTM cell. Gate blocks are ordered input, forget,
/// candidate, output along the `4·hidden` axis.
#[derive(Clone, Copy, Debug)]
pub struct LstmIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmIds {
    pub fn register<F: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<F>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(LstmIds {
            w_ih: params.insert(
                format!("{prefix}/w_ih"),
                xavier_uniform(input, 4 * hidden, rng),
            )?,
            w_hh: params.insert(
                format!("{prefix}/w_hh"),
                xavier_uniform(hidden, 4 * hidden, rng),
            )?,
            bias: params.insert(format!("{prefix}/bias"), Tensor::zeros(&[4 * hidden]))?,
            input,
            hidden,
        })
    }

    pub fn bind<'g, F: Real>(&self, g: &'g Graph<F>, params: &ParamSet<F>) -> LstmCell<'g, F> {
        LstmCell {
            w_ih: g.param(params, self.w_ih),
            w_hh: g.param(params, self.w_hh),
            bias: g.param(params, self.bias),
            input: self.input,
            hidden: self.hidden,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmCell<'g, F: Real> {
    pub w_ih: Var<'g, F>,
    pub w_hh: Var<'g, F>,
    pub bias: Var<'g, F>,
    pub input: usize,
    pub hidden: usize,
}

impl<'g, F: Real> LstmCell<'g, F> {
    /// One step on a batch: returns `(h, c)`.
    pub fn step(
        &self,
        x: &Var<'g, F>,
        h_prev: &Var<'g, F>,
        c_prev: &Var<'g, F>,
    ) -> Result<(Var<'g, F>, Var<'g, F>)> {
        lstm_cell(x, h_prev, c_prev, self)
    }
}

fn check_width<F: Real>(v: &Var<'_, F>, width: usize, what: &str) -> Result<usize> {
    let s = v.shape();
    if s.len() != 2 || s[1] != width {
        return dim_err(format!("{what}: expected [batch, {width}], got {s:?}"));
    }
    Ok(s[0])
}

/// `c = f ⊙ c_prev + i ⊙ g`, `h = o ⊙ tanh(c)` with sigmoid gates.
pub fn lstm_cell<'g, F: Real>(
    x: &Var<'g, F>,
    h_prev: &Var<'g, F>,
    c_prev: &Var<'g, F>,
    cell: &LstmCell<'g, F>,
) -> Result<(Var<'g, F>, Var<'g, F>)> {
    let hd = cell.hidden;
    let b = check_width(x, cell.input, "lstm input")?;
    if check_width(h_prev, hd, "lstm hidden")? != b || check_width(c_prev, hd, "lstm cell")? != b {
        return dim_err("lstm: batch sizes differ");
    }
    let gates = x
        .matmul(&cell.w_ih)?
        .add(&h_prev.matmul(&cell.w_hh)?)?
        .add_row(&cell.bias)?;
    lstm_activate(&gates, c_prev, hd)
}

/// LSTM update from pre-activation gates `[batch, 4·hidden]`.
pub fn lstm_activate<'g, F: Real>(
    gates: &Var<'g, F>,
    c_prev: &Var<'g, F>,
    hd: usize,
) -> Result<(Var<'g, F>, Var<'g, F>)> {
    let i = gates.narrow(1, 0, hd)?.sigmoid();
    let f = gates.narrow(1, hd, hd)?.sigmoid();
    let g = gates.narrow(1, 2 * hd, hd)?.tanh();
    let o = gates.narrow(1, 3 * hd, hd)?.sigmoid();
    let c = f.mul(c_prev)?.add(&i.mul(&g)?)?;
    let h = o.mul(&c.tanh())?;
    Ok((h, c))
}

/// Parameter ids of a GRU cell. Gate blocks are ordered reset, update,
/// candidate along the `3·hidden` axis.
#[derive(Clone, Copy, Debug)]
pub struct GruIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruIds {
    pub fn register<F: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<F>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GruIds {
            w_ih: params.insert(
                format!("{prefix}/w_ih"),
                xavier_uniform(input, 3 * hidden, rng),
            )?,
            w_hh: params.insert(
                format!("{prefix}/w_hh"),
                xavier_uniform(hidden, 3 * hidden, rng),
            )?,
            b_ih: params.insert(format!("{prefix}/b_ih"), Tensor::zeros(&[3 * hidden]))?,
            b_hh: params.insert(format!("{prefix}/b_hh"), Tensor::zeros(&[3 * hidden]))?,
            input,
            hidden,
        })
    }

    pub fn bind<'g, F: Real>(&self, g: &'g Graph<F>, params: &ParamSet<F>) -> GruCell<'g, F> {
        GruCell {
            w_ih: g.param(params, self.w_ih),
            w_hh: g.param(params, self.w_hh),
            b_ih: g.param(params, self.b_ih),
            b_hh: g.param(params, self.b_hh),
            input: self.input,
            hidden: self.hidden,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruCell<'g, F: Real> {
    pub w_ih: Var<'g, F>,
    pub w_hh: Var<'g, F>,
    pub b_ih: Var<'g, F>,
    pub b_hh: Var<'g, F>,
    pub input: usize,
    pub hidden: usize,
}

impl<'g, F: Real> GruCell<'g, F> {
    pub fn step(&self, x: &Var<'g, F>, h_prev: &Var<'g, F>) -> Result<Var<'g, F>> {
        gru_cell(x, h_prev, self)
    }
}

/// `r = σ(..)`, `z = σ(..)`, `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`,
/// `h = (1 - z) ⊙ n + z ⊙ h_prev`.
pub fn gru_cell<'g, F: Real>(
    x: &Var<'g, F>,
    h_prev: &Var<'g, F>,
    cell: &GruCell<'g, F>,
) -> Result<Var<'g, F>> {
    let hd = cell.hidden;
    let b = check_width(x, cell.input, "gru input")?;
    if check_width(h_prev, hd, "gru hidden")? != b {
        return dim_err("gru: batch sizes differ");
    }
    let gi = x.matmul(&cell.w_ih)?.add_row(&cell.b_ih)?;
    let gh = h_prev.matmul(&cell.w_hh)?.add_row(&cell.b_hh)?;
    let r = gi.narrow(1, 0, hd)?.add(&gh.narrow(1, 0, hd)?)?.sigmoid();
    let z = gi.narrow(1, hd, hd)?.add(&gh.narrow(1, hd, hd)?)?.sigmoid();
    let n = gi
        .narrow(1, 2 * hd, hd)?
        .add(&r.mul(&gh.narrow(1, 2 * hd, hd)?)?)?
        .tanh();
    z.one_minus().mul(&n)?.add(&z.mul(h_prev)?)
}

/// Concatenates along the feature axis of `[batch, width]` operands.
pub fn concat_features<'g, F: Real>(parts: &[Var<'g, F>]) -> Result<Var<'g, F>> {
    concat(parts, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn lstm_zero_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::<f64>::new();
        let ids = LstmIds::register(&mut p, "l", 3, 2, &mut rng).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = Graph::new();
        let cell = ids.bind(&g, &p);
        let x = g.constant(&Tensor::zeros(&[1, 3]));
        let h0 = g.constant(&Tensor::zeros(&[1, 2]));
        let (h, c) = cell.step(&x, &h0, &h0).unwrap();
        assert_eq!(h.to_vec(), vec![0.0, 0.0]);
        assert_eq!(c.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn lstm_scalar_hand_evaluation() {
        // Scalar cell: gate pre-activations a_k = w_k x + u_k h + b_k.
        let (w, u, bias) = (
            [0.5, -0.3, 0.8, 0.1],
            [0.2, 0.4, -0.6, 0.9],
            [0.1, 0.2, -0.1, 0.05],
        );
        let (x, h_prev, c_prev) = (1.5, -0.4, 0.3);
        let mut p = ParamSet::<f64>::new();
        let ids = LstmIds {
            w_ih: p
                .insert("w_ih", Tensor::new(vec![1, 4], w.to_vec()).unwrap())
                .unwrap(),
            w_hh: p
                .insert("w_hh", Tensor::new(vec![1, 4], u.to_vec()).unwrap())
                .unwrap(),
            bias: p
                .insert("bias", Tensor::new(vec![4], bias.to_vec()).unwrap())
                .unwrap(),
            input: 1,
            hidden: 1,
        };
        let g = Graph::new();
        let cell = ids.bind(&g, &p);
        let xv = g.constant(&Tensor::new(vec![1, 1], vec![x]).unwrap());
        let hv = g.constant(&Tensor::new(vec![1, 1], vec![h_prev]).unwrap());
        let cv = g.constant(&Tensor::new(vec![1, 1], vec![c_prev]).unwrap());
        let (h, c) = cell.step(&xv, &hv, &cv).unwrap();

        let a: Vec<f64> = (0..4).map(|k| w[k] * x + u[k] * h_prev + bias[k]).collect();
        let (i, f, gg, o) = (sigmoid(a[0]), sigmoid(a[1]), a[2].tanh(), sigmoid(a[3]));
        let c_exp = f * c_prev + i * gg;
        let h_exp = o * c_exp.tanh();
        assert!((c.item() - c_exp).abs() < 1e-14);
        assert!((h.item() - h_exp).abs() < 1e-14);
    }

    #[test]
    fn gru_zero_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::<f64>::new();
        let ids = GruIds::register(&mut p, "g", 3, 2, &mut rng).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = Graph::new();
        let cell = ids.bind(&g, &p);
        let x = g.constant(&Tensor::zeros(&[1, 3]));
        let h0 = g.constant(&Tensor::zeros(&[1, 2]));
        assert_eq!(cell.step(&x, &h0).unwrap().to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn gru_scalar_hand_evaluation() {
        let (w, u) = ([0.7, -0.2, 0.4], [0.3, 0.5, -0.8]);
        let (bi, bh) = ([0.05, -0.1, 0.2], [0.0, 0.15, -0.05]);
        let (x, h_prev) = (0.9, 0.6);
        let mut p = ParamSet::<f64>::new();
        let ids = GruIds {
            w_ih: p
                .insert("w_ih", Tensor::new(vec![1, 3], w.to_vec()).unwrap())
                .unwrap(),
            w_hh: p
                .insert("w_hh", Tensor::new(vec![1, 3], u.to_vec()).unwrap())
                .unwrap(),
            b_ih: p
                .insert("b_ih", Tensor::new(vec![3], bi.to_vec()).unwrap())
                .unwrap(),
            b_hh: p
                .insert("b_hh", Tensor::new(vec![3], bh.to_vec()).unwrap())
                .unwrap(),
            input: 1,
            hidden: 1,
        };
        let g = Graph::new();
        let cell = ids.bind(&g, &p);
        let xv = g.constant(&Tensor::new(vec![1, 1], vec![x]).unwrap());
        let hv = g.constant(&Tensor::new(vec![1, 1], vec![h_prev]).unwrap());
        let h = cell.step(&xv, &hv).unwrap();

        let r = sigmoid(w[0] * x + bi[0] + u[0] * h_prev + bh[0]);
        let z = sigmoid(w[1] * x + bi[1] + u[1] * h_prev + bh[1]);
        let n = (w[2] * x + bi[2] + r * (u[2] * h_prev + bh[2])).tanh();
        let expected = (1.0 - z) * n + z * h_prev;
        assert!((h.item() - expected).abs() < 1e-14);
    }

    #[test]
    fn width_mismatch_is_a_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::<f64>::new();
        let ids = LstmIds::register(&mut p, "l", 3, 2, &mut rng).unwrap();
        let g = Graph::new();
        let cell = ids.bind(&g, &p);
        let x = g.constant(&Tensor::zeros(&[1, 4]));
        let h0 = g.constant(&Tensor::zeros(&[1, 2]));
        assert!(matches!(
            cell.step(&x, &h0, &h0),
            Err(crate::Error::Dimension(_))
        ));
    }
}
