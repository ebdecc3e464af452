//! Dense-tensor numerics with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass (define-by-run); the
//! graph is rebuilt on each pass. [`Tape::backward`] walks the record in
//! reverse and accumulates gradients into every `requires_grad` leaf.
//! Storage is `f32` for training; the same generic ops instantiate at `f64`
//! for finite-difference gradient checking (see [`check::grad_check`]).
//!
//! Tensors are rank-1 or rank-2, row-major. There is no implicit
//! broadcasting beyond scalar-tensor ([`Tape::scale_by`]) and per-row bias
//! ([`Tape::add_row_bias`]). Shape violations are contract errors and panic.

mod backward;
pub mod check;
mod ops;

pub use check::grad_check;
pub use ops::Op;

/// Element type of a tape: `f32` (training) or `f64` (gradient checks).
pub trait Float:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxf(self, o: Self) -> Self;
    fn minf(self, o: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_float {
    ($t:ty) => {
        impl Float for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline(always)]
            fn maxf(self, o: Self) -> Self {
                if self > o {
                    self
                } else {
                    o
                }
            }
            #[inline(always)]
            fn minf(self, o: Self) -> Self {
                if self < o {
                    self
                } else {
                    o
                }
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_float!(f32);
impl_float!(f64);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// One recorded tensor: contiguous row-major values plus the op that
/// produced it.
pub struct Tensor<F: Float> {
    pub data: Vec<F>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
    pub(crate) op: Op,
}

impl<F: Float> Tensor<F> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// The recorded graph: nodes in topological (creation) order.
pub struct Tape<F: Float> {
    pub(crate) nodes: Vec<Tensor<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, data: Vec<F>, shape: Vec<usize>, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            data,
            shape,
            requires_grad: false,
            grad: None,
            op,
        });
        id
    }

    /// Record an input tensor. Gradients accumulate into it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, data: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(
            shape.iter().all(|&d| d > 0) || data.is_empty(),
            "zero dimension with nonempty data"
        );
        let id = self.push(data, shape, Op::Leaf);
        self.nodes[id.0].requires_grad = requires_grad;
        id
    }

    /// Convenience: constant input (no gradient).
    pub fn constant(&mut self, data: Vec<F>, shape: Vec<usize>) -> TensorId {
        self.leaf(data, shape, false)
    }

    /// Constant scalar, shape `[1]`.
    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![F::from_f64(v)], vec![1])
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Read a scalar tensor's value as f64.
    pub fn value(&self, id: TensorId) -> f64 {
        let t = &self.nodes[id.0];
        assert_eq!(t.numel(), 1, "value() on non-scalar shape {:?}", t.shape);
        t.data[0].to_f64()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Ids of every recorded softmax output, oldest first. Lets tests
    /// inspect attention distributions without widening the forward API.
    pub fn softmax_outputs(&self) -> Vec<TensorId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Softmax { .. }))
            .map(|(i, _)| TensorId(i))
            .collect()
    }

    pub(crate) fn rows_cols(&self, id: TensorId) -> (usize, usize) {
        let s = &self.nodes[id.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            r => panic!("expected rank 1 or 2, got rank {r}"),
        }
    }
}
