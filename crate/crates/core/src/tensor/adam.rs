use super::{ParamSet, Real};
use crate::error::{contract_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, params: &ParamSet<F>) -> Self {
        let zeros = |p: &ParamSet<F>| {
            p.iter()
                .map(|(_, _, t)| vec![F::zero(); t.numel()])
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// Restores saved moments.
    pub fn from_state(config: AdamConfig, step: u64, m: Vec<Vec<F>>, v: Vec<Vec<F>>) -> Self {
        Adam { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<F>], &[Vec<F>]) {
        (&self.m, &self.v)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update in place and clears the gradients.
    pub fn step(&mut self, params: &mut ParamSet<F>) -> Result<()> {
        if params.len() != self.m.len() {
            return contract_err(format!(
                "optimizer tracks {} parameters, set has {}",
                self.m.len(),
                params.len()
            ));
        }
        for (_, name, t) in params.iter() {
            if t.grad().is_none() {
                return contract_err(format!("parameter {name:?} has no gradient"));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (F::from_f64_lossy(beta1), F::from_f64_lossy(beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let (bc1, bc2) = (F::from_f64_lossy(bc1), F::from_f64_lossy(bc2));
        let (lr, eps) = (F::from_f64_lossy(lr), F::from_f64_lossy(eps));

        for ((tensor, m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let grad = tensor.grad().expect("checked above").to_vec();
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(params: &mut ParamSet<F>, max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flat_map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()))
        .sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64_lossy(max_norm / norm);
        for t in params.tensors_mut() {
            if let Some(g) = t.grad() {
                let scaled = g.iter().map(|&x| x * s).collect();
                t.set_grad(Some(scaled));
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::new(vec![1], vec![value]).unwrap())
            .unwrap();
        p
    }

    fn set_grad(p: &mut ParamSet<f64>, g: f64) {
        p.tensors_mut()[0].set_grad(Some(vec![g]));
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = single(0.7);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        set_grad(&mut p, 0.0);
        adam.step(&mut p).unwrap();
        assert_eq!(p.get(super::super::ParamId(0)).data(), &[0.7]);
        assert_eq!(adam.step_count(), 1);
        assert!(p.get(super::super::ParamId(0)).grad().is_none());
    }

    #[test]
    fn unit_gradient_moves_by_lr() {
        let cfg = AdamConfig::default();
        let mut p = single(0.0);
        let mut adam = Adam::new(cfg, &p);
        set_grad(&mut p, 1.0);
        adam.step(&mut p).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = -lr / (1 + eps)
        let expected = -cfg.lr / (1.0 + cfg.eps);
        assert!((p.tensors_mut()[0].data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn moment_recurrences_by_hand() {
        let cfg = AdamConfig::default();
        // Constant gradient: bias correction makes both steps equal.
        let mut p = single(0.0);
        let mut adam = Adam::new(cfg, &p);
        set_grad(&mut p, 1.0);
        adam.step(&mut p).unwrap();
        let first = p.tensors_mut()[0].data()[0];
        set_grad(&mut p, 1.0);
        adam.step(&mut p).unwrap();
        let second = p.tensors_mut()[0].data()[0] - first;
        assert!((second - first).abs() < 1e-15);

        // Gradient 1 then 0: m = 0.09, v = 0.000999 after two steps.
        let mut p = single(0.0);
        let mut adam = Adam::new(cfg, &p);
        set_grad(&mut p, 1.0);
        adam.step(&mut p).unwrap();
        let first = p.tensors_mut()[0].data()[0];
        set_grad(&mut p, 0.0);
        adam.step(&mut p).unwrap();
        let delta = p.tensors_mut()[0].data()[0] - first;
        let m_hat = 0.09 / (1.0 - 0.9f64.powi(2));
        let v_hat = 0.000999 / (1.0 - 0.999f64.powi(2));
        let expected = -cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        assert!((delta - expected).abs() < 1e-15);
        assert!(delta.abs() < first.abs());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = single(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        assert!(adam.step(&mut p).is_err());
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut p = ParamSet::<f64>::new();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        p.tensors_mut()[0].set_grad(Some(vec![30.0, 40.0]));
        let before = clip_grad_norm(&mut p, 5.0);
        assert_eq!(before, 50.0);
        assert_eq!(p.tensors_mut()[0].grad().unwrap(), &[3.0, 4.0]);
    }
}
