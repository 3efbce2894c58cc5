use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use super::{Gradients, Graph, Tensor, Var};

#[derive(Debug, Clone)]
enum Trainable {
    Nothing,
    Only(BTreeSet<String>),
    Everything,
}

/// Binds named parameters into a [`Graph`] once per forward pass and decides
/// which of them require gradients.
#[derive(Debug, Clone)]
pub struct Binder {
    trainable: Trainable,
    vars: HashMap<String, Var>,
}

impl Binder {
    /// All parameters are constants (inference).
    pub fn frozen() -> Self {
        Self {
            trainable: Trainable::Nothing,
            vars: HashMap::new(),
        }
    }

    pub fn training<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            trainable: Trainable::Only(names.into_iter().map(Into::into).collect()),
            vars: HashMap::new(),
        }
    }

    /// Every bound parameter requires a gradient (gradient checking).
    pub fn everything() -> Self {
        Self {
            trainable: Trainable::Everything,
            vars: HashMap::new(),
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        match &self.trainable {
            Trainable::Nothing => false,
            Trainable::Only(set) => set.contains(name),
            Trainable::Everything => true,
        }
    }

    pub fn bind(&mut self, g: &mut Graph, name: &str, value: &Arc<Tensor>) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let v = g.leaf(Arc::clone(value), self.is_trainable(name));
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// Gradients of every bound trainable parameter. Parameters that were
    /// bound but did not influence the loss get an all-zero gradient.
    pub fn gradients(&self, g: &Graph, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(name, _)| self.is_trainable(name))
            .map(|(name, v)| {
                let grad = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(*v).raw_dim()));
                (name.clone(), grad)
            })
            .collect()
    }
}
