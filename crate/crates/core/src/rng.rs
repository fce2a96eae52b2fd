//! Seeded, labelled random streams.
//!
//! Every source of randomness in a run is an [`RngStream`] identified by
//! `(seed, StreamId, replicate)`. The three parts select a ChaCha8 key and
//! stream number, so streams with different labels never share draws and a
//! fixed triple produces the same sequence on every platform.
//!
//! Gaussian draws use the inverse CDF of one 53-bit uniform per value, so the
//! number of raw draws consumed by a call depends only on its length.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamId {
    DataShuffle,
    NoiseTrain,
    NoiseEval,
    Init,
}

impl StreamId {
    fn code(self) -> u64 {
        match self {
            StreamId::DataShuffle => 1,
            StreamId::NoiseTrain => 2,
            StreamId::NoiseEval => 3,
            StreamId::Init => 4,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    id: StreamId,
    replicate: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        Self::with_replicate(seed, id, 0)
    }

    fn with_replicate(seed: u64, id: StreamId, replicate: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        // Top byte carries the label, the rest the replicate path.
        inner.set_stream((id.code() << 56) | (replicate & 0x00FF_FFFF_FFFF_FFFF));
        Self {
            seed,
            id,
            replicate,
            inner,
        }
    }

    /// Independent child stream `index`, derived from this stream's identity
    /// (not its position), so forking never advances the parent.
    pub fn substream(&self, index: u64) -> Self {
        let replicate = splitmix64(self.replicate ^ splitmix64(index.wrapping_add(1)));
        Self::with_replicate(self.seed, self.id, replicate)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u = self.uniform();
        -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.standard_normal();
        }
    }

    /// +1 or -1 with equal probability.
    pub fn rademacher(&mut self) -> f64 {
        if self.inner.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn standard_laplace(&mut self) -> f64 {
        laplace_inverse_cdf(self.uniform(), 1.0)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Inverse CDF of Laplace(0, scale).
pub fn laplace_inverse_cdf(u: f64, scale: f64) -> f64 {
    let d = u - 0.5;
    if d == 0.0 {
        return 0.0;
    }
    -scale * d.signum() * (1.0 - 2.0 * d.abs()).ln()
}

/// `n` draws from N(mean, std²). `std == 0` returns the constant vector and
/// consumes nothing from `rng`.
pub fn normal_sample(rng: &mut RngStream, n: usize, mean: f64, std: f64) -> Result<DenseTensor> {
    if !(std >= 0.0) {
        return Err(Error::domain(format!("normal std must be >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(DenseTensor::from_vec(vec![mean; n]));
    }
    let data = (0..n).map(|_| mean + std * rng.standard_normal()).collect();
    Ok(DenseTensor::from_vec(data))
}

/// `n` draws from Laplace(0, scale) by inverse CDF. `scale == 0` consumes nothing.
pub fn laplace_sample(rng: &mut RngStream, n: usize, scale: f64) -> Result<DenseTensor> {
    if !(scale >= 0.0) {
        return Err(Error::domain(format!(
            "laplace scale must be >= 0, got {scale}"
        )));
    }
    if scale == 0.0 {
        return Ok(DenseTensor::zeros(vec![n]));
    }
    let data = (0..n)
        .map(|_| laplace_inverse_cdf(rng.uniform(), scale))
        .collect();
    Ok(DenseTensor::from_vec(data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_std(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, var.sqrt())
    }

    #[test]
    fn zero_std_is_constant_and_consumes_nothing() {
        let mut a = RngStream::new(3, StreamId::NoiseTrain);
        let z = normal_sample(&mut a, 5, 0.0, 0.0).unwrap();
        assert_eq!(z.as_slice(), &[0.0; 5]);
        let mut b = RngStream::new(3, StreamId::NoiseTrain);
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn negative_std_is_domain_error() {
        let mut a = RngStream::new(3, StreamId::NoiseTrain);
        assert!(matches!(
            normal_sample(&mut a, 1, 0.0, -1.0),
            Err(Error::Domain(_))
        ));
        assert!(laplace_sample(&mut a, 1, -0.5).is_err());
    }

    #[test]
    fn standard_normal_moments() {
        let mut rng = RngStream::new(2024, StreamId::NoiseEval);
        let v = normal_sample(&mut rng, 1_000_000, 0.0, 1.0).unwrap();
        let (m, s) = mean_std(v.as_slice());
        assert!(m.abs() < 0.005, "mean {m}");
        assert!((s - 1.0).abs() < 0.005, "std {s}");
    }

    #[test]
    fn same_seed_same_draws() {
        let mut a = RngStream::new(9, StreamId::Init);
        let mut b = RngStream::new(9, StreamId::Init);
        assert_eq!(
            normal_sample(&mut a, 64, 1.0, 2.0).unwrap(),
            normal_sample(&mut b, 64, 1.0, 2.0).unwrap()
        );
    }

    #[test]
    fn laplace_variance_and_median() {
        assert_eq!(laplace_inverse_cdf(0.5, 1.0), 0.0);
        let mut rng = RngStream::new(5, StreamId::NoiseEval);
        assert_eq!(laplace_sample(&mut rng, 4, 0.0).unwrap().as_slice(), &[0.0; 4]);
        let v = laplace_sample(&mut rng, 1_000_000, 1.0).unwrap();
        let (_, s) = mean_std(v.as_slice());
        assert!((s * s - 2.0).abs() < 0.02, "var {}", s * s);
    }

    #[test]
    fn streams_are_isolated() {
        let mut shuffle_a = RngStream::new(1, StreamId::DataShuffle);
        let mut noise = RngStream::new(1, StreamId::NoiseTrain);
        for _ in 0..17 {
            noise.next_u64();
        }
        let mut shuffle_b = RngStream::new(1, StreamId::DataShuffle);
        let xs: Vec<u64> = (0..8).map(|_| shuffle_a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| shuffle_b.next_u64()).collect();
        assert_eq!(xs, ys);
        let mut noise0 = RngStream::new(1, StreamId::NoiseTrain);
        assert_ne!(noise0.next_u64(), RngStream::new(1, StreamId::DataShuffle).next_u64());
    }

    #[test]
    fn substreams_differ_and_do_not_advance_parent() {
        let parent = RngStream::new(8, StreamId::NoiseEval);
        let mut a = parent.substream(0);
        let mut b = parent.substream(1);
        assert_ne!(a.next_u64(), b.next_u64());
        let mut a2 = parent.substream(0);
        let mut a3 = parent.substream(0);
        assert_eq!(a2.next_u64(), a3.next_u64());
        let mut p1 = parent.clone();
        let mut p2 = RngStream::new(8, StreamId::NoiseEval);
        assert_eq!(p1.next_u64(), p2.next_u64());
    }
}
