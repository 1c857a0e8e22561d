use std::collections::HashMap;

use rand::Rng;

use super::{Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 || value.len() != numel {
            return Err(Error::InvalidArgument(format!(
                "parameter value of length {} does not fill shape {shape:?}",
                value.len()
            )));
        }
        Ok(ParamTensor {
            name: name.into(),
            shape,
            grad: vec![T::zero(); numel],
            m: vec![T::zero(); numel],
            v: vec![T::zero(); numel],
            value,
        })
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// The value viewed as a rank-4 tensor, padding the shape with leading ones.
    pub fn as_tensor(&self) -> Tensor4<T> {
        assert!(self.shape.len() <= 4, "parameter `{}` has rank > 4", self.name);
        let mut dims = [1usize; 4];
        dims[4 - self.shape.len()..].copy_from_slice(&self.shape);
        Tensor4::from_vec(Shape4::new(dims[0], dims[1], dims[2], dims[3]), self.value.clone())
            .expect("shape and value length agree")
    }
}

/// Named, ordered collection of parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<ParamTensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, param: ParamTensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(&param.name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{}`",
                param.name
            )));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(id)
    }

    /// Insert a parameter drawn from `U(-bound, bound)`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let numel = shape.iter().product();
        let value = (0..numel)
            .map(|_| T::of(rng.gen_range(-bound..=bound)))
            .collect();
        self.insert(ParamTensor::new(name, shape, value)?)
    }

    pub fn insert_const(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: T,
    ) -> Result<ParamId> {
        let numel = shape.iter().product();
        self.insert(ParamTensor::new(name, shape, vec![value; numel])?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total learnable element count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Name -> shape listing, one parameter per line, in store order.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for p in &self.params {
            let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&p.name);
            out.push(' ');
            out.push_str(&dims.join("x"));
            out.push('\n');
        }
        out
    }

    /// FNV-1a over every parameter value's bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for &x in &p.value {
                for b in x.as_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Element type conversion, moments reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let value = p.value.iter().map(|&x| U::of(x.as_f64())).collect();
            out.insert(ParamTensor::new(p.name.clone(), p.shape.clone(), value).unwrap())
                .unwrap();
        }
        out
    }
}
