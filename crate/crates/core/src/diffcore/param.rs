use std::sync::Arc;

use super::{Error, Gradients, Result, Tape, Tensor};

/// A named learnable array with an optional accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    pub grad: Option<Vec<f64>>,
}

impl Param {
    pub fn value(&self) -> &[f64] {
        &self.value
    }

    /// Mutable view of the values; copies only if a tape still shares them.
    pub fn value_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.value).as_mut_slice()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of parameters. Order is creation order and is what
/// checkpoints and the optimizer iterate over.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape {
                op: "param",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        self.params.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            value: Arc::new(values),
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Result<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Records every parameter on `tape` as a leaf sharing its buffer.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> BoundParams<'t> {
        let tensors = self
            .params
            .iter()
            .map(|p| {
                tape.shared_leaf(&p.shape, Arc::clone(&p.value), requires_grad)
                    .expect("parameter shape checked on insertion")
            })
            .collect();
        BoundParams { tensors }
    }

    /// Adds `scale * d(loss)/d(param)` into each parameter's gradient.
    /// Parameters the loss never reached get an explicit zero gradient.
    pub fn accumulate(&mut self, bound: &BoundParams<'_>, grads: &Gradients, scale: f64) {
        for (p, t) in self.params.iter_mut().zip(&bound.tensors) {
            let acc = p.grad.get_or_insert_with(|| vec![0.0; p.value.len()]);
            if let Some(g) = grads.get(*t) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += scale * v;
                }
            }
        }
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
pub struct BoundParams<'t> {
    tensors: Vec<Tensor<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, id: ParamId) -> Tensor<'t> {
        self.tensors[id.0]
    }
}
