//! Dense NHWC tensors, deterministic Gaussian sampling, and the channel
//! statistics used throughout the crate.
//!
//! Tensors are immutable after construction and carry a dtype tag (`Single` or
//! `Double`). All channel-statistic reductions accumulate in `f64` regardless
//! of the storage dtype; signal-propagation tolerances are tight enough that
//! single-precision accumulation would drift.
//!
//! Weight tensors reuse [`Shape`] with the convention
//! `(out_channels, kh, kw, in_channels_per_group)`.

use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Dtype {
    Single,
    Double,
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::Single => write!(f, "single"),
            Dtype::Double => write!(f, "double"),
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Dtype::Single),
            "double" | "f64" => Ok(Dtype::Double),
            other => Err(Error::invalid(format!("unknown dtype `{other}`"))),
        }
    }
}

/// NHWC extents. `n` is the batch axis, `c` the channel axis.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Shape {
        Shape { n, h, w, c }
    }

    pub fn count(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    #[inline]
    pub fn index(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.h + h) * self.w + w) * self.c + c
    }

    pub fn validate_nonempty(&self) -> Result<()> {
        if self.count() == 0 {
            return Err(Error::invalid(format!("zero-sized shape {self}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.h, self.w, self.c)
    }
}

/// Element type backing a tensor. Conversions route through `f64`.
pub(crate) trait Element: Copy + Send + Sync + 'static {
    const DTYPE: Dtype;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn wrap(data: Vec<Self>) -> Storage;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::Single;
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn wrap(data: Vec<f32>) -> Storage {
        Storage::F32(data)
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::Double;
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    fn wrap(data: Vec<f64>) -> Storage {
        Storage::F64(data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Dense NHWC tensor. Row-major with the channel axis contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    pub(crate) data: Storage,
}

impl Tensor {
    pub fn zeros(shape: Shape, dtype: Dtype) -> Tensor {
        Tensor::filled(shape, 0.0, dtype)
    }

    pub fn filled(shape: Shape, value: f64, dtype: Dtype) -> Tensor {
        assert!(shape.count() > 0, "empty tensor shape {shape}");
        let data = match dtype {
            Dtype::Single => Storage::F32(vec![value as f32; shape.count()]),
            Dtype::Double => Storage::F64(vec![value; shape.count()]),
        };
        Tensor { shape, data }
    }

    pub fn from_f64(shape: Shape, data: Vec<f64>) -> Tensor {
        assert_eq!(shape.count(), data.len(), "data length != shape count");
        assert!(!data.is_empty(), "empty tensor");
        Tensor { shape, data: Storage::F64(data) }
    }

    pub fn from_f32(shape: Shape, data: Vec<f32>) -> Tensor {
        assert_eq!(shape.count(), data.len(), "data length != shape count");
        assert!(!data.is_empty(), "empty tensor");
        Tensor { shape, data: Storage::F32(data) }
    }

    /// Build element-by-element from NHWC coordinates.
    pub fn from_fn(shape: Shape, dtype: Dtype, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Tensor {
        let mut out = Vec::with_capacity(shape.count());
        for n in 0..shape.n {
            for h in 0..shape.h {
                for w in 0..shape.w {
                    for c in 0..shape.c {
                        out.push(f(n, h, w, c));
                    }
                }
            }
        }
        match dtype {
            Dtype::Double => Tensor::from_f64(shape, out),
            Dtype::Single => Tensor::from_f32(shape, out.into_iter().map(|v| v as f32).collect()),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.count()
    }

    pub fn is_empty(&self) -> bool {
        false // construction forbids empty tensors
    }

    pub fn dtype(&self) -> Dtype {
        match &self.data {
            Storage::F32(_) => Dtype::Single,
            Storage::F64(_) => Dtype::Double,
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        match &self.data {
            Storage::F32(v) => v[i] as f64,
            Storage::F64(v) => v[i],
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: f64) {
        match &mut self.data {
            Storage::F32(v) => v[i] = value as f32,
            Storage::F64(v) => v[i] = value,
        }
    }

    #[inline]
    pub fn at(&self, n: usize, h: usize, w: usize, c: usize) -> f64 {
        self.get(self.shape.index(n, h, w, c))
    }

    pub fn set_at(&mut self, n: usize, h: usize, w: usize, c: usize, value: f64) {
        self.set(self.shape.index(n, h, w, c), value)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }

    pub fn to_dtype(&self, dtype: Dtype) -> Tensor {
        if self.dtype() == dtype {
            return self.clone();
        }
        match dtype {
            Dtype::Double => Tensor::from_f64(self.shape, self.to_f64_vec()),
            Dtype::Single => Tensor::from_f32(
                self.shape,
                self.to_f64_vec().into_iter().map(|v| v as f32).collect(),
            ),
        }
    }

    /// Elementwise map computed in `f64`, stored back at this tensor's dtype.
    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Tensor {
        let data = match &self.data {
            Storage::F32(v) => Storage::F32(v.iter().map(|&x| f(x as f64) as f32).collect()),
            Storage::F64(v) => Storage::F64(v.iter().map(|&x| f(x)).collect()),
        };
        Tensor { shape: self.shape, data }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                site: "zip_with",
                expected: self.shape,
                got: other.shape,
            });
        }
        if self.dtype() != other.dtype() {
            return Err(Error::DtypeMismatch {
                site: "zip_with",
                a: self.dtype(),
                b: other.dtype(),
            });
        }
        let data = match (&self.data, &other.data) {
            (Storage::F32(a), Storage::F32(b)) => Storage::F32(
                a.iter().zip(b).map(|(&x, &y)| f(x as f64, y as f64) as f32).collect(),
            ),
            (Storage::F64(a), Storage::F64(b)) => {
                Storage::F64(a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
            }
            _ => unreachable!("dtype checked above"),
        };
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn scale(&self, a: f64) -> Tensor {
        self.map(|v| v * a)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    /// `self + other * a` without forming the intermediate product.
    pub fn add_scaled(&self, other: &Tensor, a: f64) -> Result<Tensor> {
        self.zip_with(other, move |x, y| x + y * a)
    }

    pub fn is_all_finite(&self) -> bool {
        match &self.data {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    pub(crate) fn f32s(&self) -> Option<&[f32]> {
        match &self.data {
            Storage::F32(v) => Some(v),
            _ => None,
        }
    }

    pub(crate) fn f64s(&self) -> Option<&[f64]> {
        match &self.data {
            Storage::F64(v) => Some(v),
            _ => None,
        }
    }
}

pub(crate) fn ensure_finite(t: &Tensor, site: &str) -> Result<()> {
    if t.is_all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { site: site.to_string() })
    }
}

// ---------------------------------------------------------------------------
// Deterministic RNG
// ---------------------------------------------------------------------------

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random stream: ChaCha8 keyed by a 64-bit seed, with Gaussian
/// variates produced by the Box-Muller transform. Identical seed and call
/// sequence give identical samples, bit-exact per dtype (single-precision
/// tensors are filled by rounding the double-precision draw).
///
/// A stream is single-owner. To randomize independent components, derive
/// children with [`RngStream::fork`] instead of sharing one stream.
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
    spare_gaussian: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> RngStream {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare_gaussian: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for lane `lane`; the derivation is pure in (seed, lane).
    pub fn fork(&self, lane: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(lane.wrapping_add(1))))
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw on (0, 1]. The open lower end keeps `ln(u)` finite.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        let bits = self.next_u64() >> 11; // 53 random bits
        1.0 - (bits as f64) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw via Box-Muller; the sine partner is cached.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_gaussian = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Bernoulli draw: true with probability `p` (never true for `p <= 0`).
    pub fn next_bernoulli(&mut self, p: f64) -> bool {
        self.next_uniform() <= p
    }
}

/// iid `N(mean, std^2)` tensor. Deterministic given the stream state.
pub fn gaussian(shape: Shape, mean: f64, std: f64, rng: &mut RngStream, dtype: Dtype) -> Result<Tensor> {
    shape.validate_nonempty()?;
    if std < 0.0 {
        return Err(Error::invalid(format!("negative std {std}")));
    }
    let count = shape.count();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(mean + std * rng.next_gaussian());
    }
    Ok(match dtype {
        Dtype::Double => Tensor::from_f64(shape, data),
        Dtype::Single => Tensor::from_f32(shape, data.into_iter().map(|v| v as f32).collect()),
    })
}

// ---------------------------------------------------------------------------
// Channel statistics
// ---------------------------------------------------------------------------

/// Per-channel sums and sums of squares over the NHW axes, in `f64`.
fn channel_sums(t: &Tensor) -> (Vec<f64>, Vec<f64>, usize) {
    let s = t.shape();
    let per_channel = s.n * s.h * s.w;
    let mut sum = vec![0.0f64; s.c];
    let mut sum_sq = vec![0.0f64; s.c];
    match &t.data {
        Storage::F32(v) => {
            for row in v.chunks_exact(s.c) {
                for (c, &x) in row.iter().enumerate() {
                    let x = x as f64;
                    sum[c] += x;
                    sum_sq[c] += x * x;
                }
            }
        }
        Storage::F64(v) => {
            for row in v.chunks_exact(s.c) {
                for (c, &x) in row.iter().enumerate() {
                    sum[c] += x;
                    sum_sq[c] += x * x;
                }
            }
        }
    }
    (sum, sum_sq, per_channel)
}

/// Square of the per-channel mean over N,H,W, averaged across channels.
///
/// Squaring before the channel average keeps channels with opposite-signed
/// means from cancelling.
pub fn avg_channel_sq_mean(t: &Tensor) -> f64 {
    let (sum, _, m) = channel_sums(t);
    let inv = 1.0 / m as f64;
    sum.iter().map(|&s| (s * inv) * (s * inv)).sum::<f64>() / sum.len() as f64
}

/// Population variance (no Bessel correction) over N,H,W per channel,
/// averaged across channels.
pub fn avg_channel_variance(t: &Tensor) -> f64 {
    let (sum, sum_sq, m) = channel_sums(t);
    let inv = 1.0 / m as f64;
    let c = sum.len() as f64;
    sum.iter()
        .zip(&sum_sq)
        .map(|(&s, &ss)| {
            let mean = s * inv;
            (ss * inv - mean * mean).max(0.0)
        })
        .sum::<f64>()
        / c
}

/// Per-channel means over N,H,W (used by tests and the BatchNorm reference).
pub fn channel_means(t: &Tensor) -> Vec<f64> {
    let (sum, _, m) = channel_sums(t);
    sum.into_iter().map(|s| s / m as f64).collect()
}

/// Per-channel population variances over N,H,W.
pub fn channel_variances(t: &Tensor) -> Vec<f64> {
    let (sum, sum_sq, m) = channel_sums(t);
    let inv = 1.0 / m as f64;
    sum.iter()
        .zip(&sum_sq)
        .map(|(&s, &ss)| {
            let mean = s * inv;
            (ss * inv - mean * mean).max(0.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-12)
    }

    #[test]
    fn gaussian_zero_std_is_constant() {
        let mut rng = RngStream::new(3);
        let t = gaussian(Shape::new(4, 1, 1, 8), 0.0, 0.0, &mut rng, Dtype::Double).unwrap();
        assert!(t.to_f64_vec().iter().all(|&v| v == 0.0));
        let t = gaussian(Shape::new(2, 1, 1, 2), 1.5, 0.0, &mut rng, Dtype::Single).unwrap();
        assert!(t.to_f64_vec().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn gaussian_sample_mean_is_small() {
        // Standard error at 8*32*32*64 samples is ~0.0014, so +-0.01 is a
        // seven-sigma window.
        let mut rng = RngStream::new(0);
        let t = gaussian(Shape::new(8, 32, 32, 64), 0.0, 1.0, &mut rng, Dtype::Double).unwrap();
        let mean = t.to_f64_vec().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.01, "sample mean {mean}");
    }

    #[test]
    fn gaussian_same_seed_identical() {
        for dtype in [Dtype::Single, Dtype::Double] {
            let a = gaussian(Shape::new(3, 4, 5, 6), 0.2, 1.3, &mut RngStream::new(42), dtype).unwrap();
            let b = gaussian(Shape::new(3, 4, 5, 6), 0.2, 1.3, &mut RngStream::new(42), dtype).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gaussian_rejects_bad_args() {
        let mut rng = RngStream::new(0);
        assert!(gaussian(Shape::new(0, 1, 1, 1), 0.0, 1.0, &mut rng, Dtype::Double).is_err());
        assert!(gaussian(Shape::new(1, 1, 1, 1), 0.0, -1.0, &mut rng, Dtype::Double).is_err());
    }

    #[test]
    fn fork_is_deterministic_and_distinct() {
        let root = RngStream::new(9);
        let mut a = root.fork(0);
        let mut b = root.fork(0);
        let mut c = root.fork(1);
        let (x, y, z) = (a.next_gaussian(), b.next_gaussian(), c.next_gaussian());
        assert_eq!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn sq_mean_no_sign_cancellation() {
        // Half the channels sit at +1, half at -1; per-channel squaring must
        // keep the result at 1 rather than cancelling to 0.
        let s = Shape::new(2, 3, 3, 8);
        let t = Tensor::from_fn(s, Dtype::Double, |_, _, _, c| if c < 4 { 1.0 } else { -1.0 });
        assert!((avg_channel_sq_mean(&t) - 1.0).abs() < 1e-12);
        assert_eq!(avg_channel_sq_mean(&Tensor::zeros(s, Dtype::Double)), 0.0);
    }

    #[test]
    fn sq_mean_of_unit_gaussian_matches_chi_square_scale() {
        // Each channel mean is N(0, 1/(8*32*32)); squared and averaged over 64
        // channels the expectation is 1/8192. Averaging estimates over many
        // seeds pins the scale.
        let mut acc = 0.0;
        let seeds = 48;
        for seed in 0..seeds {
            let mut rng = RngStream::new(1000 + seed);
            let t = gaussian(Shape::new(8, 32, 32, 64), 0.0, 1.0, &mut rng, Dtype::Double).unwrap();
            acc += avg_channel_sq_mean(&t);
        }
        let mean = acc / seeds as f64;
        let expected = 1.0 / 8192.0;
        assert!(
            rel_err(mean, expected) < 0.10,
            "mean {mean:.3e} vs {expected:.3e}"
        );
    }

    #[test]
    fn variance_of_constant_and_gaussian() {
        let s = Shape::new(2, 4, 4, 3);
        assert_eq!(avg_channel_variance(&Tensor::filled(s, 2.5, Dtype::Double)), 0.0);

        let mut rng = RngStream::new(7);
        let t = gaussian(Shape::new(8, 32, 32, 64), 0.0, 1.0, &mut rng, Dtype::Double).unwrap();
        let v = avg_channel_variance(&t);
        assert!((v - 1.0).abs() < 0.02, "variance {v}");
    }

    #[test]
    fn variance_scaling_law() {
        let mut rng = RngStream::new(11);
        let t = gaussian(Shape::new(4, 8, 8, 16), 0.0, 1.0, &mut rng, Dtype::Double).unwrap();
        let v = avg_channel_variance(&t);
        let v2 = avg_channel_variance(&t.scale(2.0));
        assert!(rel_err(v2, 4.0 * v) < 1e-10, "{v2} vs {}", 4.0 * v);
    }

    /// Independent triple-loop oracle for both reductions.
    fn naive_stats(t: &Tensor) -> (f64, f64) {
        let s = t.shape();
        let mut sq_mean = 0.0;
        let mut var = 0.0;
        for c in 0..s.c {
            let mut vals = Vec::new();
            for n in 0..s.n {
                for h in 0..s.h {
                    for w in 0..s.w {
                        vals.push(t.at(n, h, w, c));
                    }
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            sq_mean += m * m;
            var += vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
        }
        (sq_mean / s.c as f64, var / s.c as f64)
    }

    #[test]
    fn reductions_match_naive_oracle() {
        for seed in 0..4 {
            let mut rng = RngStream::new(100 + seed);
            let t = gaussian(Shape::new(2, 4, 4, 8), 0.7, 1.9, &mut rng, Dtype::Double).unwrap();
            let (sm, v) = naive_stats(&t);
            assert!(rel_err(avg_channel_sq_mean(&t), sm) < 1e-10);
            assert!(rel_err(avg_channel_variance(&t), v) < 1e-10);
        }
    }

    #[test]
    fn sq_mean_shift_matches_loop_oracle() {
        // Adding a per-channel constant shifts channel means exactly; compare
        // against the naive oracle on the shifted tensor.
        let mut rng = RngStream::new(5);
        let t = gaussian(Shape::new(2, 4, 4, 8), 0.0, 1.0, &mut rng, Dtype::Double).unwrap();
        let shift: Vec<f64> = (0..8).map(|c| 0.3 * c as f64 - 1.0).collect();
        let shifted = Tensor::from_fn(t.shape(), Dtype::Double, |n, h, w, c| t.at(n, h, w, c) + shift[c]);
        let (sm, _) = naive_stats(&shifted);
        assert!(rel_err(avg_channel_sq_mean(&shifted), sm) < 1e-10);
    }
}
