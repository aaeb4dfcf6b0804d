//! Dense tensors, the parameter store and checkpoint format.
//!
//! A [`Tensor`] is a plain row-major value; gradients live in an optional
//! side buffer so frozen stores stay shareable across threads. The autodiff
//! graph over these values is in [`graph`], finite-difference verification
//! in [`gradcheck`].

pub mod gradcheck;
pub mod graph;

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense n-dimensional array of scalars in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Build from raw parts, rejecting shape/length disagreement and
    /// non-finite values (NaN/Inf is an error state, not a value).
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::contract(format!("zero dimension in shape {shape:?}")));
        }
        let t = Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::from_vec(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<S>) -> Result<Self> {
        let n = data.len();
        Self::from_vec(vec![n], data)
    }

    pub fn scalar(x: S) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![S::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![S::one(); n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init, N(0, std^2), drawn from the given stream.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut StreamRng) -> Self {
        let n = numel(&shape);
        let data = (0..n)
            .map(|_| S::from_f64(rng.next_normal() * std))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Row count for a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count: the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    /// The single element of a 1-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub(crate) fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value produced by {op}")));
        }
        Ok(())
    }

    fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if self.grad.is_some() {
            return Err(Error::contract(
                "gradient already present; zero_grads() before the next backward pass",
            ));
        }
        if grad.len() != self.data.len() {
            return Err(Error::contract("gradient length mismatch"));
        }
        self.grad = Some(grad);
        Ok(())
    }

    fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Named parameters with deterministic (sorted) iteration order.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Tensor<S>>,
    rng_seed: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter '{name}'")));
        }
        self.params.insert(name.to_string(), tensor.with_grad());
        Ok(())
    }

    /// N(0, std^2) init seeded by (store seed, parameter name), so the
    /// result does not depend on insertion order.
    pub fn init_normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> Result<()> {
        let mut rng = StreamRng::new(self.rng_seed, name);
        self.insert(name, Tensor::randn(shape, std, &mut rng))
    }

    pub fn init_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn init_ones(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        self.insert(name, Tensor::ones(shape))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, grad: Vec<S>) -> Result<()> {
        let t = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))?;
        t.set_grad(grad)
            .map_err(|_| Error::contract(format!(
                "parameter '{name}' already has a gradient; zero_grads() before the next backward pass"
            )))
    }

    /// In-place update of one parameter's values (optimizer step).
    pub fn update<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut [S], Option<&[S]>),
    {
        let t = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))?;
        let grad = t.grad.take();
        f(&mut t.data, grad.as_deref());
        t.grad = grad;
        t.check_finite("parameter update")
    }

    pub(crate) fn nudge(&mut self, name: &str, index: usize, value: S) {
        let t = self.params.get_mut(name).expect("known parameter");
        t.data[index] = value;
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SFCP";
const CHECKPOINT_VERSION: u32 = 1;

impl<S: Scalar> ParamStore<S> {
    /// Flat binary checkpoint: (name, shape, values) triples plus seed and
    /// a format version. Values are stored as f64 bits, so round-trips are
    /// bit-exact for f64 and f32 parameters alike.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.rng_seed.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, tensor) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
            for &d in &tensor.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &tensor.data {
                w.write_all(&v.as_f64().to_bits().to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::data(format!("{}: cannot read checkpoint: {e}", path.display())))?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::data(format!("{}: truncated checkpoint", path.display())))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::data(format!(
                "{}: not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let rng_seed = read_u64(&mut r)?;
        let count = read_u64(&mut r)? as usize;

        let mut store = ParamStore::new(rng_seed);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::data("checkpoint parameter name is not utf-8"))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n = numel(&shape);
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(S::from_f64(f64::from_bits(read_u64(&mut r)?)));
            }
            store.insert(&name, Tensor::from_vec(shape, data)?)?;
        }
        Ok(store)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::data("truncated checkpoint"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::data("truncated checkpoint"))?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::<f64>::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn init_is_insertion_order_independent() {
        let mut a = ParamStore::<f64>::new(42);
        a.init_normal("w1", vec![4, 4], 0.02).unwrap();
        a.init_normal("w2", vec![4, 4], 0.02).unwrap();

        let mut b = ParamStore::<f64>::new(42);
        b.init_normal("w2", vec![4, 4], 0.02).unwrap();
        b.init_normal("w1", vec![4, 4], 0.02).unwrap();

        assert_eq!(a.get("w1").unwrap().data(), b.get("w1").unwrap().data());
        assert_eq!(a.get("w2").unwrap().data(), b.get("w2").unwrap().data());
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut s = ParamStore::<f64>::new(1);
        s.init_zeros("w", vec![2]).unwrap();
        assert!(s.init_zeros("w", vec![2]).is_err());
    }

    #[test]
    fn grad_set_twice_is_error() {
        let mut s = ParamStore::<f64>::new(1);
        s.init_zeros("w", vec![2]).unwrap();
        s.accumulate_grad("w", vec![1.0, 2.0]).unwrap();
        let err = s.accumulate_grad("w", vec![1.0, 2.0]).unwrap_err();
        assert!(err.to_string().contains("zero_grads"));
        s.zero_grads();
        s.accumulate_grad("w", vec![1.0, 2.0]).unwrap();
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");

        let mut s = ParamStore::<f64>::new(99);
        s.init_normal("layer.w", vec![3, 5], 0.02).unwrap();
        s.init_normal("layer.b", vec![5], 1.0).unwrap();
        s.save(&path).unwrap();

        let loaded = ParamStore::<f64>::load(&path).unwrap();
        assert_eq!(loaded.rng_seed(), 99);
        assert_eq!(loaded.len(), 2);
        for (name, t) in s.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            let orig: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let back: Vec<u64> = l.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(orig, back);
        }
    }

    #[test]
    fn checkpoint_roundtrip_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt32.bin");

        let mut s = ParamStore::<f32>::new(7);
        s.init_normal("w", vec![4, 4], 0.02).unwrap();
        s.save(&path).unwrap();
        let loaded = ParamStore::<f32>::load(&path).unwrap();
        assert_eq!(loaded.get("w").unwrap().data(), s.get("w").unwrap().data());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        let err = ParamStore::<f64>::load(&path).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
