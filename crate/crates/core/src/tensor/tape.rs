use super::{ops, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalization uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel statistics of one training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Running mean and variance tracked by batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningMoments<T> {
    pub const MOMENTUM: f64 = 0.9;

    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Blends batch statistics in with momentum 0.9; the stored variance is
    /// the unbiased estimate.
    pub fn update(&mut self, stats: &BatchStats<T>) {
        let keep = T::from_f64(Self::MOMENTUM);
        let take = T::one() - keep;
        let unbias = if stats.count > 1 {
            T::from_f64(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        for (m, &b) in self.mean.iter_mut().zip(&stats.mean) {
            *m = keep * *m + take * b;
        }
        for (v, &b) in self.var.iter_mut().zip(&stats.var) {
            *v = keep * *v + take * b * unbias;
        }
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: usize,
    },
    Relu {
        input: usize,
    },
    Sigmoid {
        input: usize,
    },
    SoftmaxChannels {
        input: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mode: BatchNormMode,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    CrossEntropy {
        logits: usize,
        target: Vec<usize>,
        probs: Vec<T>,
    },
    WeightedSum {
        input: usize,
        coeffs: Vec<T>,
    },
    MeanChannel {
        input: usize,
        channel: usize,
        mask: Option<Vec<bool>>,
        count: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Add { a, b } | Op::Mul { a, b } | Op::Concat { a, b } => vec![*a, *b],
            Op::MaxPool2 { input, .. }
            | Op::Upsample2 { input }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::SoftmaxChannels { input }
            | Op::WeightedSum { input, .. }
            | Op::MeanChannel { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Gradient accumulators, one optional buffer per tape node.
pub(crate) struct GradSlots<'a, T> {
    pub(crate) grads: &'a mut [Option<Vec<T>>],
    pub(crate) requires: &'a [bool],
    pub(crate) values: &'a [Tensor<T>],
}

impl<T: Real> GradSlots<'_, T> {
    pub(crate) fn wants(&self, idx: usize) -> bool {
        self.requires[idx]
    }

    /// Accumulator for node `idx`, allocated as zeros on first use.
    pub(crate) fn slot(&mut self, idx: usize) -> &mut [T] {
        let len = self.values[idx].len();
        self.grads[idx].get_or_insert_with(|| vec![T::zero(); len])
    }
}

/// Linear record of executed operations.
///
/// Each node owns its forward value; gradients live in a parallel table and
/// are filled by [`Tape::backward`], which may run once per tape.
#[derive(Debug)]
pub struct Tape<T = f32> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Records a leaf; it receives a gradient when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires = tensor.requires_grad();
        self.push_raw(tensor, Op::Leaf, requires)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the loss with respect to `v`, available after backward.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires = op.inputs().iter().any(|&i| self.requires[i]);
        self.push_raw(value, op, requires)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        let id = self.values.len();
        self.values.push(value.with_requires_grad(requires));
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(id)
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.values[loss.0].shape();
        if self.values[loss.0].len() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        self.backward_done = true;
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.ops[idx], Op::Leaf) {
                continue;
            }
            let Some(out_grad) = self.grads[idx].take() else {
                continue;
            };
            let mut slots = GradSlots {
                grads: &mut self.grads,
                requires: &self.requires,
                values: &self.values,
            };
            ops::backward(&self.ops[idx], idx, &out_grad, &mut slots);
            self.grads[idx] = Some(out_grad);
        }
        Ok(())
    }
}
