use crate::error::{Error, Result};
use crate::nn::layer::Layer;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Output of [`Stack::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    /// One gradient per parameter tensor, in [`Stack::params`] order.
    pub params: Vec<Tensor>,
    /// Gradient with respect to the stack input.
    pub input: Tensor,
}

/// An ordered sequence of layers evaluated front to back.
///
/// A training-mode forward pass records every intermediate activation so
/// that a following [`Stack::backward`] can run; the record is consumed by
/// the backward pass.
#[derive(Debug, Default)]
pub struct Stack {
    layers: Vec<Layer>,
    tape: Option<Vec<Tensor>>,
}

/// Clones share no recorded activations.
impl Clone for Stack {
    fn clone(&self) -> Self {
        Stack::new(self.layers.clone())
    }
}

impl PartialEq for Stack {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Stack {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers, tape: None }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn push(&mut self, layer: Layer) {
        self.tape = None;
        self.layers.push(layer);
    }

    /// Copy of the layers `[start, end)` as an independent stack.
    pub fn sub_stack(&self, start: usize, end: usize) -> Stack {
        Stack::new(self.layers[start..end].to_vec())
    }

    /// Layers of `self` followed by layers of `other`.
    pub fn then(&self, other: &Stack) -> Stack {
        let mut layers = self.layers.clone();
        layers.extend(other.layers.iter().cloned());
        Stack::new(layers)
    }

    /// Per-sample shape after every layer; element 0 is the input shape.
    pub fn shape_trace(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![input.to_vec()];
        for (index, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|message| Error::Shape { index, message })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(self.shape_trace(input)?.pop().unwrap())
    }

    fn run(&self, x: &Tensor, mut record: Option<&mut Vec<Tensor>>) -> Result<Tensor> {
        let mut current = x.clone();
        for (index, layer) in self.layers.iter().enumerate() {
            let expected = layer
                .output_shape(current.sample_shape())
                .map_err(|message| Error::Shape { index, message })?;
            let next = layer.forward(&current);
            debug_assert_eq!(next.sample_shape(), expected.as_slice());
            next.ensure_finite(&format!("layer {index} ({}) output", layer.kind_name()))?;
            if let Some(tape) = record.as_deref_mut() {
                tape.push(current);
            }
            current = next;
        }
        Ok(current)
    }

    /// Forward pass. With `train` set, intermediates are kept for `backward`.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        if !train {
            self.tape = None;
            return self.run(x, None);
        }
        let mut tape = Vec::with_capacity(self.layers.len() + 1);
        let out = self.run(x, Some(&mut tape))?;
        tape.push(out.clone());
        self.tape = Some(tape);
        Ok(out)
    }

    /// Forward pass that never records; usable on shared references.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, None)
    }

    pub fn has_pending_backward(&self) -> bool {
        self.tape.is_some()
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Gradients> {
        let tape = self.tape.take().ok_or_else(|| {
            Error::ProtocolOrder("backward called without a preceding training forward".into())
        })?;
        let out = tape.last().unwrap();
        if grad_out.shape() != out.shape() {
            return Err(Error::Argument(format!(
                "gradient shape {:?} does not match forward output {:?}",
                grad_out.shape(),
                out.shape()
            )));
        }
        let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        let mut grad = grad_out.clone();
        for (index, layer) in self.layers.iter().enumerate().rev() {
            let (gin, gparams) = layer.backward(&tape[index], &tape[index + 1], &grad);
            gin.ensure_finite(&format!("layer {index} ({}) input gradient", layer.kind_name()))?;
            per_layer.push(gparams);
            grad = gin;
        }
        per_layer.reverse();
        Ok(Gradients {
            params: per_layer.into_iter().flatten().collect(),
            input: grad,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.param_names()
                    .iter()
                    .map(move |n| format!("{i}.{}.{n}", l.kind_name()))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Snapshot of the parameters as a named set.
    pub fn param_set(&self) -> ParamSet {
        ParamSet::from_entries(
            self.param_names()
                .into_iter()
                .zip(self.params().into_iter().cloned())
                .collect(),
        )
    }

    /// Overwrites parameters from a structurally identical set.
    pub fn load_param_set(&mut self, set: &ParamSet) -> Result<()> {
        let names = self.param_names();
        if names.len() != set.len() {
            return Err(Error::Invariant(format!(
                "parameter set has {} tensors, stack has {}",
                set.len(),
                names.len()
            )));
        }
        for ((name, dst), (src_name, src)) in names.iter().zip(self.params_mut()).zip(set.iter()) {
            if name != src_name || dst.shape() != src.shape() {
                return Err(Error::Invariant(format!(
                    "parameter {name}{:?} does not match {src_name}{:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
