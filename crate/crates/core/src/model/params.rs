use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Named parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid("params", format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Subset whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        Self {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Put every parameter on `g`. `trainable` decides per name whether the
    /// leaf receives gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    // ---- initialisers -------------------------------------------------------

    /// `name.w: [fan_in, fan_out]` ~ N(0, 1/fan_in), `name.b` zero.
    pub fn init_linear<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let std = (1.0 / fan_in as f64).sqrt();
        self.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
        self.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn init_layer_norm(&mut self, name: &str, dim: usize) {
        self.insert(format!("{name}.g"), Tensor::ones(&[dim]));
        self.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("params", format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// `x · name.w + name.b`.
    pub fn linear<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let w = self.get(&format!("{name}.w"))?;
        let b = self.get(&format!("{name}.b"))?;
        g.linear(x, w, b)
    }

    pub fn layer_norm<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let gamma = self.get(&format!("{name}.g"))?;
        let beta = self.get(&format!("{name}.b"))?;
        g.layer_norm(x, gamma, beta, T::of_f64(1e-5))
    }
}
