//! Dense tensors with an optional reverse-mode gradient tape.
//!
//! A [`Tensor`] is an immutable, cheaply clonable value. Operations are issued
//! through a [`Ctx`]: an inference context computes values only, a recording
//! context also appends a node to its [`Tape`] whenever an input is tracked.

mod gemm;
mod ops;
mod optim;
mod rng;
mod store;
mod tape;


use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub(crate) use gemm::{gemm, MatMut, MatRef};
pub use ops::GroupSpan;
pub use optim::{AdamW, AdamWConfig};
pub use rng::SeededRng;
pub use store::{Bound, Parameter, ParameterStore, CHECKPOINT_MAGIC};
pub(crate) use tape::accumulate;
pub use tape::{backward, Ctx, NodeId, Tape};

/// Element type of a tensor. `f32` is the working precision, `f64` backs
/// oracles and finite-difference checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices, and `c` must not
    /// alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[derive(Clone)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    node: Option<NodeId>,
}

impl<S: Scalar> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<S> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &preview)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl<S: Scalar> PartialEq for Tensor<S> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("from_vec", shape, &[data.len()]));
        }
        Ok(Self::raw(shape.to_vec(), data))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Self {
        self.node = Some(node);
        self
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::raw(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: S) -> Self {
        Self::raw(vec![], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        Self::raw(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.data)
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.as_ref().clone()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, cut loose from any tape.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Reinterprets the shape; the tape node (if any) is shared since the
    /// flat layout is unchanged.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            node: self.node,
        })
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim(op, other, &[0, 0])),
        }
    }

    /// Copy of the leading-axis slices `start..end`.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        let outer = *self
            .shape
            .first()
            .ok_or_else(|| Error::dim("slice_outer", &self.shape, &[end]))?;
        if start > end || end > outer {
            return Err(Error::dim("slice_outer", &self.shape, &[start, end]));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self::raw(shape, self.data[start * inner..end * inner].to_vec()))
    }

    /// Concatenates tensors of identical trailing shape along the leading axis.
    pub fn stack_outer(parts: &[Tensor<S>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack_outer of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut outer = 0;
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(Error::dim("stack_outer", &first.shape, &p.shape));
            }
            outer += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Ok(Self::raw(shape, data))
    }

    /// Bytes of the little-endian f32 encoding, for byte-level comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
            .collect()
    }
}
