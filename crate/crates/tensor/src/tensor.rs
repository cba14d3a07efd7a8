use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::real::Real;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`Tensor`]. Gradients are keyed by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// How to fill a freshly created tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    Data(Vec<f64>),
}

/// Dense row-major tensor value.
///
/// A tensor owns its data and carries an identity. Cloning produces a new
/// identity, so two parameter sets built from the same values are never
/// confused on a tape.
#[derive(Debug)]
pub struct Tensor<T> {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Clone> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            id: TensorId::fresh(),
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        }
    }
}

impl<T: PartialEq> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::ZeroExtent(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn create(shape: &[usize], init: Init) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Constant(c) => vec![T::of(c); n],
            Init::Uniform { lo, hi, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                return Ok(Self::uniform(shape, lo, hi, &mut rng));
            }
            Init::Data(values) => {
                if values.len() != n {
                    return Err(TensorError::DataLength {
                        shape: shape.to_vec(),
                        expected: n,
                        actual: values.len(),
                    });
                }
                values.into_iter().map(T::of).collect()
            }
        };
        Ok(Self::raw(shape.to_vec(), data))
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Self::raw(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("zeros: invalid shape");
        Self::raw(shape.to_vec(), vec![T::zero(); n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("full: invalid shape");
        Self::raw(shape.to_vec(), vec![T::of(value); n])
    }

    /// Uniform samples in `[lo, hi)` drawn from `rng` in row-major order.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = check_shape(shape).expect("uniform: invalid shape");
        let data = (0..n).map(|_| T::of(rng.gen_range(lo..hi))).collect();
        Self::raw(shape.to_vec(), data)
    }

    pub fn scalar(value: T) -> Self {
        Self::raw(vec![1], vec![value])
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            id: TensorId::fresh(),
            shape,
            data,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for optimizers. Keeps the identity.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "at: rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "at: index {ix} out of range on axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Copies values into another precision. The result has a fresh identity.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            id: TensorId::fresh(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}
