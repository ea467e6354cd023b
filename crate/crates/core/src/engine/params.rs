use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// One trainable array with its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered, named parameter set of a model. Names are unique and the
/// insertion order is the serialisation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams<T> {
    params: IndexMap<String, Param<T>>,
}

/// Non-trainable state such as batch-norm running statistics.
pub type Buffers<T> = IndexMap<String, Tensor<T>>;

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, Param { value, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Places every parameter in `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), g.leaf(p.value.clone())))
                .collect(),
        }
    }

    /// Copies gradients out of a graph after `backward`.
    pub fn collect_grads(&mut self, g: &Graph<T>, bound: &Bound) {
        for (name, p) in self.params.iter_mut() {
            let var = bound.vars[name];
            let grad = match g.grad(var) {
                Some(d) => Tensor::new(p.value.shape(), d.to_vec()).expect("same shape"),
                None => Tensor::zeros(p.value.shape()),
            };
            p.grad = Some(grad);
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.as_ref().map(|g| g.cast()),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Shape list in order, used for checkpoint compatibility checks.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.shape().to_vec()))
            .collect()
    }
}

/// Parameter name → graph variable for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }
}

/// Gaussian initialisation with standard deviation `std`.
pub fn init_normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

/// Uniform initialisation on `[-bound, bound]`.
pub fn init_uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_matrix_plus_bias() {
        let mut p = ModelParams::<f32>::new();
        p.insert("w", Tensor::zeros(&[3, 4])).unwrap();
        p.insert("b", Tensor::zeros(&[4])).unwrap();
        assert_eq!(p.count(), 16);
        assert!(p.insert("b", Tensor::zeros(&[1])).is_err());
    }
}
