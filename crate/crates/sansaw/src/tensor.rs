//! Dense row-major tensors and the elementwise/reduction primitives the rest
//! of the crate builds on.
//!
//! Tensors are rank 1-4 with index order `(n, k, h, w)` fixed by the binary
//! dump format. Model state is `Tensor<f32>`; the gradient-check paths run the
//! same generic code at `f64`. Reductions accumulate in `f64` regardless of
//! the element type so statistics stay accurate on the 32-bit path. There is
//! no general broadcasting: the only broadcast form is a `(N,1,H,W)` map
//! applied over the channels of a `(N,K,H,W)` tensor, which is all the
//! normalization pipeline needs.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use num_traits::Float;

/// Element type for tensors: `f32` for training state, `f64` for the
/// finite-difference mirror path.
pub trait Scalar:
    Float + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64s(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64s(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64s(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn into_f64(self) -> f64 {
        self
    }
}

/// Spatial reduction statistic (population form: divide by H*W).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialStat {
    Mean,
    Std,
}

/// Channel pooling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::Shape {
            dims: dims.to_vec(),
            reason: "rank must be 1-4".into(),
        });
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Shape {
            dims: dims.to_vec(),
            reason: "zero-extent dimension".into(),
        });
    }
    Ok(dims.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let len = check_dims(dims)?;
        Ok(Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); len],
        })
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        let len = check_dims(dims)?;
        Ok(Tensor {
            dims: dims.to_vec(),
            data: vec![T::one(); len],
        })
    }

    pub fn filled(dims: &[usize], value: T) -> Result<Self> {
        let len = check_dims(dims)?;
        Ok(Tensor {
            dims: dims.to_vec(),
            data: vec![value; len],
        })
    }

    /// Uniform fill in [lo, hi); reproducible from the rng seed.
    pub fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Result<Self> {
        let len = check_dims(dims)?;
        let data = (0..len)
            .map(|_| T::from_f64s(rng.uniform(lo, hi)))
            .collect();
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_dims(dims)?;
        if data.len() != len {
            return Err(Error::Shape {
                dims: dims.to_vec(),
                reason: format!("expected {} values, got {}", len, data.len()),
            });
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Shape as (N, K, H, W); errors on non-rank-4 tensors.
    pub fn dim4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.dims.len() != 4 {
            return Err(Error::Shape {
                dims: self.dims.clone(),
                reason: "expected rank 4".into(),
            });
        }
        Ok((self.dims[0], self.dims[1], self.dims[2], self.dims[3]))
    }

    /// Contiguous H*W slice for sample `n`, channel `k` of a rank-4 tensor.
    #[inline]
    pub fn channel(&self, n: usize, k: usize) -> &[T] {
        let (_, kk, h, w) = (self.dims[0], self.dims[1], self.dims[2], self.dims[3]);
        let plane = h * w;
        let off = (n * kk + k) * plane;
        &self.data[off..off + plane]
    }

    #[inline]
    pub fn channel_mut(&mut self, n: usize, k: usize) -> &mut [T] {
        let (_, kk, h, w) = (self.dims[0], self.dims[1], self.dims[2], self.dims[3]);
        let plane = h * w;
        let off = (n * kk + k) * plane;
        &mut self.data[off..off + plane]
    }

    /// Contiguous K*H*W slice for sample `n`.
    #[inline]
    pub fn sample(&self, n: usize) -> &[T] {
        let per = self.dims[1..].iter().product::<usize>();
        &self.data[n * per..(n + 1) * per]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|x| x.into_f64()).collect(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|x| x.into_f64() as f32).collect(),
        }
    }

    fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b, "sub")
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a * b, "mul")
    }

    /// Elementwise division; denominators with magnitude below `epsilon` are
    /// clamped to `epsilon` (keeping their sign) so the result stays finite.
    pub fn div(&self, other: &Self, epsilon: f64) -> Result<Self> {
        let eps = T::from_f64s(epsilon);
        self.zip(
            other,
            |a, b| {
                let d = if b.abs() < eps {
                    if b < T::zero() {
                        -eps
                    } else {
                        eps
                    }
                } else {
                    b
                };
                a / d
            },
            "div",
        )
    }

    fn zip(&self, other: &Self, f: impl Fn(T, T) -> T, what: &str) -> Result<Self> {
        self.same_shape(other, what)?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_scalar(&self, s: f64) -> Self {
        let s = T::from_f64s(s);
        self.map(|x| x + s)
    }

    pub fn scale(&self, s: f64) -> Self {
        let s = T::from_f64s(s);
        self.map(|x| x * s)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(|x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn abs(&self) -> Self {
        self.map(|x| x.abs())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
        Ok(())
    }

    /// Multiply a `(N,1,H,W)` map over every channel of this `(N,K,H,W)`
    /// tensor. The one broadcast form the crate supports.
    pub fn mul_broadcast_map(&self, map: &Self) -> Result<Self> {
        let (n, k, h, w) = self.dim4()?;
        let (mn, mk, mh, mw) = map.dim4()?;
        if (mn, mk, mh, mw) != (n, 1, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "broadcast map must be ({n},1,{h},{w}), got {:?}",
                map.dims
            )));
        }
        let mut out = self.clone();
        let plane = h * w;
        for ni in 0..n {
            let m = map.channel(ni, 0);
            for ki in 0..k {
                let off = (ni * k + ki) * plane;
                let row = &mut out.data[off..off + plane];
                for (o, &mm) in row.iter_mut().zip(m) {
                    *o = *o * mm;
                }
            }
        }
        Ok(out)
    }

    /// Per-(sample, channel) mean or population standard deviation over the
    /// spatial extent. Returns a `(N, K)` tensor.
    pub fn reduce_spatial(&self, stat: SpatialStat, epsilon: f64) -> Result<Self> {
        let (n, k, _, _) = self.dim4()?;
        let _ = epsilon; // std is reported raw; callers add epsilon where Eq. 1 does
        let mut out = Vec::with_capacity(n * k);
        for ni in 0..n {
            for ki in 0..k {
                let chan = self.channel(ni, ki);
                let (mean, std) = mean_std(chan);
                out.push(match stat {
                    SpatialStat::Mean => T::from_f64s(mean),
                    SpatialStat::Std => T::from_f64s(std),
                });
            }
        }
        Tensor::from_vec(&[n, k], out)
    }

    /// Per-location reduction over channels; returns `(N,1,H,W)`.
    pub fn pool_channels(&self, mode: PoolMode) -> Result<Self> {
        let (n, k, h, w) = self.dim4()?;
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, 1, h, w])?;
        for ni in 0..n {
            match mode {
                PoolMode::Avg => {
                    let mut acc = vec![0f64; plane];
                    for ki in 0..k {
                        for (a, &x) in acc.iter_mut().zip(self.channel(ni, ki)) {
                            *a += x.into_f64();
                        }
                    }
                    let inv = 1.0 / k as f64;
                    for (o, a) in out.channel_mut(ni, 0).iter_mut().zip(acc) {
                        *o = T::from_f64s(a * inv);
                    }
                }
                PoolMode::Max => {
                    let dst = out.channel_mut(ni, 0);
                    dst.copy_from_slice(self.channel(ni, 0));
                    for ki in 1..k {
                        for (o, &x) in dst.iter_mut().zip(self.channel(ni, ki)) {
                            if x > *o {
                                *o = x;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Sum of elementwise products with unrolled partial accumulators in the
/// element type; partials combine in f64. The unrolling breaks the
/// floating-point dependency chain so the loop vectorizes.
#[inline]
pub fn dot_unrolled<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let off = i * LANES;
        for l in 0..LANES {
            acc[l] = acc[l] + a[off + l] * b[off + l];
        }
    }
    let mut tail = T::zero();
    for p in chunks * LANES..a.len() {
        tail = tail + a[p] * b[p];
    }
    acc.iter().map(|v| v.into_f64()).sum::<f64>() + tail.into_f64()
}

/// Plain sum with unrolled partial accumulators, combined in f64.
#[inline]
pub fn sum_unrolled<T: Scalar>(a: &[T]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let off = i * LANES;
        for l in 0..LANES {
            acc[l] = acc[l] + a[off + l];
        }
    }
    let mut tail = T::zero();
    for p in chunks * LANES..a.len() {
        tail = tail + a[p];
    }
    acc.iter().map(|v| v.into_f64()).sum::<f64>() + tail.into_f64()
}

/// Mean and population standard deviation of a slice, accumulated in f64.
pub fn mean_std<T: Scalar>(values: &[T]) -> (f64, f64) {
    let n = values.len() as f64;
    let mut sum = 0.0;
    for &v in values {
        sum += v.into_f64();
    }
    let mean = sum / n;
    let mut sq = 0.0;
    for &v in values {
        let d = v.into_f64() - mean;
        sq += d * d;
    }
    (mean, (sq / n).max(0.0).sqrt())
}
