use indexmap::IndexMap;
use rand::Rng;

use super::{AutodiffError, Result, Shape, Tape, Var};

/// A plain owned tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if shape.numel() != values.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "tensor",
                reason: format!("{} values for shape {shape}", values.len()),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }
}

/// Initialisation rule for a registered parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
    Zeros,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    value: Tensor,
    grad: Vec<f64>,
}

/// Named trainable tensors in registration order, each with an
/// accumulated gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<R: Rng + ?Sized>(&mut self, name: &str, shape: Shape, init: Init, rng: &mut R) -> Result<()> {
        let n = shape.numel();
        let values = match init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
        };
        self.insert(name, Tensor { shape, values })
    }

    /// Adds a parameter with explicit values.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(AutodiffError::DuplicateParameter(name.to_string()));
        }
        let grad = vec![0.0; value.values.len()];
        self.params.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        self.params
            .get(name)
            .map(|p| p.grad.as_slice())
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub(crate) fn values_and_grads_mut(&mut self) -> impl Iterator<Item = (&mut Vec<f64>, &mut Vec<f64>)> {
        self.params.values_mut().map(|p| (&mut p.value.values, &mut p.grad))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.values.len()).sum()
    }

    /// Copies every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = tape
                    .leaf(p.value.shape.clone(), p.value.values.clone())
                    .expect("stored tensors are shape-consistent");
                (name.clone(), v)
            })
            .collect();
        Binding { vars }
    }

    /// Adds `scale * d(loss)/d(param)` from the last backward on `tape`.
    pub fn accumulate_grads(&mut self, tape: &Tape, binding: &Binding, scale: f64) {
        for (name, &var) in &binding.vars {
            if let (Some(p), Some(g)) = (self.params.get_mut(name), tape.grad_slice(var)) {
                for (acc, gi) in p.grad.iter_mut().zip(g) {
                    *acc += scale * gi;
                }
            }
        }
    }

    /// Snapshot of the gradients in registration order.
    pub fn grads_snapshot(&self) -> Vec<Vec<f64>> {
        self.params.values().map(|p| p.grad.clone()).collect()
    }
}

/// Tape handles of one [`ParamStore`] bound to a tape.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store
            .register("w", Shape::matrix(8, 16), Init::Uniform { fan_in: 16 }, &mut rng)
            .unwrap();
        store.register("b", Shape::vector(8), Init::Zeros, &mut rng).unwrap();
        assert!(store.get("w").unwrap().values.iter().all(|v| v.abs() <= 0.25));
        assert!(store.get("b").unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.register("w", Shape::vector(2), Init::Zeros, &mut rng).unwrap();
        let err = store.register("w", Shape::vector(2), Init::Zeros, &mut rng);
        assert_eq!(err, Err(AutodiffError::DuplicateParameter("w".into())));
    }

    #[test]
    fn grads_accumulate_through_binding_and_reset_keeps_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.register("x", Shape::scalar(), Init::Constant(3.0), &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = b.get("x").unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        store.accumulate_grads(&tape, &b, 0.5);
        assert_eq!(store.grad("x").unwrap(), &[3.0]);
        tape.reset();
        store.zero_grad();
        assert_eq!(store.grad("x").unwrap(), &[0.0]);
        assert_eq!(store.get("x").unwrap().values, vec![3.0]);
    }
}
