use std::collections::HashMap;

use ndarray::Array2;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every learnable tensor of a model, addressable by a stable path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Paths must be unique.
    pub fn add(&mut self, path: impl Into<String>, value: Array2<f64>) -> ParamId {
        let path = path.into();
        assert!(!self.index.contains_key(&path), "duplicate parameter path {path:?}");
        let id = self.values.len();
        self.index.insert(path.clone(), id);
        self.names.push(path);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn by_path(&self, path: &str) -> Option<&Array2<f64>> {
        self.id(path).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Pushes every parameter onto `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.values
                .iter()
                .enumerate()
                .map(|(i, v)| tape.param(i, v.clone()))
                .collect(),
        )
    }

    /// Pushes every parameter as a constant, for gradient-free evaluation.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }

    /// Replaces values from another store with identical layout.
    pub fn copy_from(&mut self, other: &ParameterStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            if a.dim() != b.dim() {
                return Err(Error::Shape("parameter shapes differ".into()));
            }
            a.assign(b);
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Gradient buffers mirroring a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(Vec<Array2<f64>>);

impl Gradients {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Gradients(store.values.iter().map(|v| Array2::zeros(v.dim())).collect())
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.0[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.0.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.0 {
            *g *= k;
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }
}

/// Evaluates `loss_fn` on a fresh tape and returns its value together with
/// `d loss / d θ` for every parameter of `store`. Parameters the loss does
/// not touch get exactly zero gradient.
pub fn grad<F>(store: &ParameterStore, loss_fn: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = loss_fn(&mut tape, &bound)?;
    let value = tape.value(loss)[[0, 0]];
    let mut adj = tape.backward(loss)?;
    let mut grads = Gradients::zeros_like(store);
    let nodes: Vec<(usize, usize)> = adj.param_nodes().to_vec();
    for (p, node) in nodes {
        if let Some(g) = adj.take(node) {
            grads.0[p] += &g;
        }
    }
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sum_of_squares_gradient() {
        let mut store = ParameterStore::new();
        let a = store.add("a", array![[1.0, -2.0], [0.5, 3.0]]);
        let b = store.add("unused", array![[4.0]]);
        let (value, g) = grad(&store, |tape, p| {
            let x = p.var(a);
            let sq = tape.mul(x, x);
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert_eq!(value, 1.0 + 4.0 + 0.25 + 9.0);
        assert_eq!(g.get(a), &(store.get(a) * 2.0));
        assert_eq!(g.get(b), &array![[0.0]]);
    }

    #[test]
    fn non_finite_is_reported_with_op() {
        let mut store = ParameterStore::new();
        let a = store.add("a", array![[1000.0]]);
        let err = grad(&store, |tape, p| {
            let e = tape.exp(p.var(a));
            Ok(tape.sum_all(e))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "exp", .. }), "{err}");
    }

    #[test]
    fn paths_are_stable() {
        let mut store = ParameterStore::new();
        store.add("layer0/w", Array2::zeros((2, 3)));
        let id = store.add("layer0/b", Array2::zeros((1, 3)));
        assert_eq!(store.id("layer0/b"), Some(id));
        assert_eq!(store.name(id), "layer0/b");
        assert_eq!(store.num_scalars(), 9);
    }
}
