use std::collections::HashMap;

use rand::Rng;

use super::{Graph, Real, Tensor};
use crate::error::{contract_err, Result};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor under a unique name; it is marked as requiring grad.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return contract_err(format!("parameter {name:?} registered twice"));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad(true));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| crate::Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Adds the gradients of every parameter leaf of `graph` onto the
    /// matching tensors.
    pub fn accumulate_grads(&mut self, graph: &Graph<F>) {
        for (id, g) in graph.param_grads() {
            let acc = self.tensors[id.0].grad_mut_or_zero();
            acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b);
        }
    }

    /// Gives every parameter without a gradient an all-zero one.
    pub fn fill_missing_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad_mut_or_zero();
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Converts every tensor to another precision (gradients are dropped).
    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast::<G>()).collect(),
            index: self.index.clone(),
        }
    }
}

/// Xavier-uniform initialised matrix: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform<F: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Tensor<F> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| F::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn xavier_bounds_and_seeding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Tensor<f64> = xavier_uniform(10, 20, &mut rng);
        let a = (6.0f64 / 30.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < a));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w2: Tensor<f64> = xavier_uniform(10, 20, &mut rng);
        assert_eq!(w, w2);
    }

    #[test]
    fn grads_flow_back_into_the_set() {
        let mut p = ParamSet::<f64>::new();
        let id = p
            .insert("x", Tensor::new(vec![1], vec![3.0]).unwrap())
            .unwrap();
        for _ in 0..2 {
            let g = Graph::new();
            let x = g.param(&p, id);
            x.mul(&x).unwrap().backward().unwrap();
            p.accumulate_grads(&g);
        }
        assert_eq!(p.get(id).grad().unwrap(), &[12.0]);
    }
}
