//! Dense tensors, a reverse-mode tape, and the AdamW optimizer.
//!
//! Everything is generic over [`Float`] so the same model code runs in `f32`
//! for experiments and in `f64` for gradient checks.

mod io;
mod optim;
mod tape;

pub use io::{read_tensor, read_tensor_file, write_tensor, write_tensor_file};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{Tape, Var};

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use crate::error::{Error, Result};

/// Element type stored in the binary tensor format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar type the engine computes in.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + Copy
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    ///
    /// Strides are in elements. All views must stay inside their slices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );

    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows as isize - 1) as usize * rs as usize + (cols as isize - 1) as usize * cs as usize + 1
}

macro_rules! impl_float {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Float for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                assert!(a.1 >= 0 && a.2 >= 0 && b.1 >= 0 && b.2 >= 0 && c.1 >= 0 && c.2 >= 0);
                assert!(span(m, k, a.1, a.2) <= a.0.len(), "gemm: lhs view out of bounds");
                assert!(span(k, n, b.1, b.2) <= b.0.len(), "gemm: rhs view out of bounds");
                assert!(span(m, n, c.1, c.2) <= c.0.len(), "gemm: output view out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view was checked to lie inside its slice above,
                // and `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    );
                }
            }

            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }

            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

impl_float!(f32, DType::F32, matrixmultiply::sgemm);
impl_float!(f64, DType::F64, matrixmultiply::dgemm);

/// Converts a literal into the working precision.
#[inline]
pub fn lit<F: Float>(v: f64) -> F {
    F::from_f64_lossy(v)
}

/// Row-major dense tensor with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("tensor extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        let n = data.len();
        Self {
            shape: vec![n],
            data,
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        F::DTYPE
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<F>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Adds into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, grad: &[F]) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[grad.len()]));
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += *b),
            None => self.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), numel);
        }
        Ok(self)
    }

    /// Rows × last extent view used by row-wise operators.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols.max(1), cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> Option<F> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (*a - *b).abs())
                .fold(F::zero(), F::max),
        )
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| G::from_f64_lossy(v.to_f64_lossy())).collect()),
        }
    }
}

/// A named tensor plus a trainability flag.
#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter and returns its slot.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let slot = self.params.len();
        self.index.insert(name.clone(), slot);
        self.params.push(Parameter {
            name,
            value,
            trainable,
        });
        Ok(slot)
    }

    pub fn slot(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<F>> {
        Ok(&self.params[self.slot(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<F>> {
        let slot = self.slot(name)?;
        Ok(&mut self.params[slot])
    }

    pub fn at(&self, slot: usize) -> &Parameter<F> {
        &self.params[slot]
    }

    pub fn at_mut(&mut self, slot: usize) -> &mut Parameter<F> {
        &mut self.params[slot]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.clear_grad());
    }

    /// Puts every parameter on the tape; trainable ones record gradients.
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), p.trainable))
            .collect()
    }

    /// Copies tape gradients into the gradient slots of trainable parameters.
    ///
    /// `vars` must come from [`ParamStore::bind`] on the same tape.
    pub fn accumulate_grads(&mut self, tape: &Tape<F>, vars: &[Var]) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid("bound variables do not match the parameter store"));
        }
        for (p, v) in self.params.iter_mut().zip(vars) {
            if !p.trainable {
                continue;
            }
            match tape.grad(*v) {
                Some(g) => p.value.accumulate_grad(g)?,
                None => p.value.accumulate_grad(&vec![F::zero(); p.value.numel()])?,
            }
        }
        Ok(())
    }

    /// Like [`ParamStore::accumulate_grads`] for an explicit `(slot, var)`
    /// list; trainable parameters absent from the list are left alone.
    pub fn accumulate_bound(&mut self, tape: &Tape<F>, bound: &[(usize, Var)]) -> Result<()> {
        for &(slot, v) in bound {
            let p = &mut self.params[slot];
            if !p.trainable {
                continue;
            }
            match tape.grad(v) {
                Some(g) => p.value.accumulate_grad(g)?,
                None => p.value.accumulate_grad(&vec![F::zero(); p.value.numel()])?,
            }
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a digest of every name and value bit pattern.
    pub fn digest(&self) -> u64 {
        let mut h = crate::rng::Fnv::new();
        for p in &self.params {
            h.write(p.name.as_bytes());
            let mut bytes = Vec::with_capacity(p.value.numel() * F::DTYPE.size());
            p.value.data().iter().for_each(|v| v.write_le(&mut bytes));
            h.write(&bytes);
        }
        h.finish()
    }
}
