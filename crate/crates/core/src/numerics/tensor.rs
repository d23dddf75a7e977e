//! Plain dense tensor values (rank 0..=4, row-major).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{real, Real};
use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// A dense row-major array of scalars. Immutable by convention once built;
/// the optimizer mutates parameter tensors through `data_mut`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::dim(
                "tensor",
                format!("rank {} exceeds maximum {MAX_RANK}", shape.len()),
            ));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::dim(
                "tensor",
                format!(
                    "shape {:?} implies {} values, got {}",
                    shape,
                    expect,
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    /// Identity matrix of size n.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    /// Uniform Glorot-style init: U(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(shape, -bound, bound, rng)
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        Self::from_fn(shape, |_| real::<F>(rng.gen_range(lo..hi)))
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Dimension size, counting from the end when `axis` is negative-like
    /// (callers pass usize; this is plain indexing).
    #[inline]
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| G::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[F] {
        debug_assert_eq!(self.rank(), 2);
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    /// Element accessor for rank-2 tensors.
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> F {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise in-place axpy: self += alpha * other. Shapes must match.
    pub fn axpy(&mut self, alpha: F, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }

    /// Stack rank-(r) tensors along a fresh leading axis.
    pub fn stack(parts: &[&Tensor<F>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::dim(
                    "stack",
                    format!("mixed shapes {:?} vs {:?}", first.shape, p.shape),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }
}

impl Tensor<f64> {
    /// Convenience constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            if r.len() != c {
                return Err(Error::dim("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(&[rows.len(), c], data)
    }
}

/// Right-aligned numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::dim(
                "broadcast",
                format!("shapes {a:?} and {b:?} are not broadcast-compatible"),
            ));
        }
    }
    Ok(out)
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides used to read a tensor of `shape` as if broadcast to `target`:
/// broadcast axes get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = target.len() - shape.len();
    let mut out = vec![0usize; target.len()];
    for i in 0..target.len() {
        if i < pad {
            out[i] = 0;
        } else {
            let d = shape[i - pad];
            out[i] = if d == 1 { 0 } else { own[i - pad] };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn rank_capped_at_four() {
        assert!(Tensor::<f64>::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[3, 1], &[2, 1, 4]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shapes(&[3], &[4]).is_err());
    }

    #[test]
    fn eye_is_identity() {
        let i = Tensor::<f64>::eye(3);
        assert_eq!(i.at2(0, 0), 1.0);
        assert_eq!(i.at2(0, 1), 0.0);
    }
}
