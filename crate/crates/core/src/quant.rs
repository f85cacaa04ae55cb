//! Integer quantization primitives.
//!
//! Symmetric (zero-point 0) signed or unsigned uniform quantization,
//! per-tensor or per-channel, with round-half-to-even. Fake quantization
//! (quantize-then-dequantize) is exposed both as a pure function here and as
//! a graph node with a clipped straight-through gradient in
//! [`crate::graph::ComputeGraph::fake_quant`].

use crate::error::{Error, Result};
use crate::scalar::{round_half_even, Scalar};
use crate::tensor::Tensor;

pub const SCALE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signedness {
    Signed,
    Unsigned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    /// One scale per index along `axis` (e.g. axis 0 for conv kernels
    /// `[C_out, C_in, kH, kW]`).
    PerChannel { axis: usize },
}

/// Quantization parameters for one tensor: bit-width, scale(s), and the
/// representable real range they imply. Zero-point is fixed at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSpec<T: Scalar> {
    bits: u8,
    signedness: Signedness,
    granularity: Granularity,
    scales: Vec<T>,
}

/// Integer tensor produced by [`QuantSpec::quantize`].
#[derive(Debug, Clone, PartialEq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

fn check_bits(bits: u8) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::invalid(format!("bit width {} outside 2..=16", bits)));
    }
    Ok(())
}

impl<T: Scalar> QuantSpec<T> {
    /// Derive a per-tensor spec from a calibrated real range.
    ///
    /// Signed: scale = max(|lo|,|hi|)/(2^(b-1)-1). Unsigned: requires lo = 0,
    /// scale = hi/(2^b-1). A degenerate range floors the scale at 1e-12.
    pub fn make_spec(range_lo: f64, range_hi: f64, bits: u8, signedness: Signedness) -> Result<Self> {
        check_bits(bits)?;
        if range_hi < range_lo {
            return Err(Error::invalid(format!(
                "range_hi {} < range_lo {}",
                range_hi, range_lo
            )));
        }
        let scale = match signedness {
            Signedness::Signed => {
                let qmax = ((1i64 << (bits - 1)) - 1) as f64;
                range_lo.abs().max(range_hi.abs()) / qmax
            }
            Signedness::Unsigned => {
                if range_lo < 0.0 {
                    return Err(Error::invalid(format!(
                        "unsigned quantization requires range_lo = 0, got {}",
                        range_lo
                    )));
                }
                if range_lo != 0.0 {
                    return Err(Error::invalid(format!(
                        "unsigned quantization requires range_lo = 0, got {}",
                        range_lo
                    )));
                }
                let qmax = ((1i64 << bits) - 1) as f64;
                range_hi / qmax
            }
        };
        let scale = scale.max(SCALE_FLOOR);
        Ok(QuantSpec {
            bits,
            signedness,
            granularity: Granularity::PerTensor,
            scales: vec![T::of(scale)],
        })
    }

    /// Per-channel signed symmetric spec from per-channel max-abs values.
    pub fn per_channel_symmetric(max_abs: &[f64], bits: u8, axis: usize) -> Result<Self> {
        check_bits(bits)?;
        if max_abs.is_empty() {
            return Err(Error::invalid("per-channel spec needs at least one channel"));
        }
        let qmax = ((1i64 << (bits - 1)) - 1) as f64;
        let scales = max_abs
            .iter()
            .map(|&m| {
                if m < 0.0 {
                    Err(Error::invalid("negative max-abs for per-channel scale"))
                } else {
                    Ok(T::of((m / qmax).max(SCALE_FLOOR)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QuantSpec {
            bits,
            signedness: Signedness::Signed,
            granularity: Granularity::PerChannel { axis },
            scales,
        })
    }

    /// Fixed-scale spec (e.g. the latent bottleneck's unit grid).
    pub fn fixed_scale(scale: f64, bits: u8, signedness: Signedness) -> Result<Self> {
        check_bits(bits)?;
        if scale <= 0.0 {
            return Err(Error::invalid("scale must be positive"));
        }
        Ok(QuantSpec {
            bits,
            signedness,
            granularity: Granularity::PerTensor,
            scales: vec![T::of(scale)],
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn signedness(&self) -> Signedness {
        self.signedness
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    pub fn qmin(&self) -> i32 {
        match self.signedness {
            Signedness::Signed => -(1i32 << (self.bits - 1)),
            Signedness::Unsigned => 0,
        }
    }

    pub fn qmax(&self) -> i32 {
        match self.signedness {
            Signedness::Signed => (1i32 << (self.bits - 1)) - 1,
            Signedness::Unsigned => (1i32 << self.bits) - 1,
        }
    }

    /// Representable real lower bound for channel `ch`.
    pub fn clip_lo(&self, ch: usize) -> f64 {
        self.scales[ch].to64() * self.qmin() as f64
    }

    /// Representable real upper bound for channel `ch`.
    pub fn clip_hi(&self, ch: usize) -> f64 {
        self.scales[ch].to64() * self.qmax() as f64
    }

    /// Map a flat element index to its scale index for `shape`.
    pub fn channel_of(&self, flat: usize, shape: &[usize]) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel { axis } => {
                let inner: usize = shape[axis + 1..].iter().product();
                (flat / inner) % shape[axis]
            }
        }
    }

    fn check_channels(&self, shape: &[usize]) -> Result<()> {
        if let Granularity::PerChannel { axis } = self.granularity {
            if axis >= shape.len() || shape[axis] != self.scales.len() {
                return Err(Error::shape(
                    "quantize",
                    format!(
                        "per-channel axis {} with {} scales does not fit shape {:?}",
                        axis,
                        self.scales.len(),
                        shape
                    ),
                ));
            }
        }
        Ok(())
    }

    /// q = clamp(round_half_even(x / scale), qmin, qmax).
    pub fn quantize(&self, x: &Tensor<T>) -> Result<IntTensor> {
        self.check_channels(x.shape())?;
        let (qmin, qmax) = (self.qmin() as f64, self.qmax() as f64);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = self.scales[self.channel_of(i, x.shape())].to64();
                round_half_even(v.to64() / s).clamp(qmin, qmax) as i32
            })
            .collect();
        Ok(IntTensor { shape: x.shape().to_vec(), data })
    }

    /// x̂ = q · scale.
    pub fn dequantize(&self, q: &IntTensor) -> Result<Tensor<T>> {
        self.check_channels(&q.shape)?;
        let data = q
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = self.scales[self.channel_of(i, &q.shape)];
                s * T::of(v as f64)
            })
            .collect();
        Tensor::new(q.shape.clone(), data)
    }

    /// Quantize-then-dequantize, staying in real arithmetic.
    pub fn fake_apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_channels(x.shape())?;
        let (qmin, qmax) = (self.qmin() as f64, self.qmax() as f64);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = self.scales[self.channel_of(i, x.shape())];
                let q = round_half_even(v.to64() / s.to64()).clamp(qmin, qmax);
                s * T::of(q)
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// The straight-through gradient mask: 1 inside [clip_lo, clip_hi]
    /// (inclusive), 0 outside.
    pub fn ste_mask(&self, flat: usize, shape: &[usize], x: T) -> bool {
        let ch = self.channel_of(flat, shape);
        let v = x.to64();
        v >= self.clip_lo(ch) && v <= self.clip_hi(ch)
    }
}

/// Mean squared quantization error between `x` and its fake-quantized image.
pub fn msqe<T: Scalar>(x: &Tensor<T>, spec: &QuantSpec<T>) -> Result<f64> {
    let fq = spec.fake_apply(x)?;
    let mut acc = 0.0f64;
    for (a, b) in x.data().iter().zip(fq.data()) {
        let d = a.to64() - b.to64();
        acc += d * d;
    }
    Ok(acc / x.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_spec_examples() {
        let s = QuantSpec::<f64>::make_spec(0.0, 2.55, 8, Signedness::Unsigned).unwrap();
        assert!((s.scales()[0] - 0.01).abs() < 1e-15);
        let s = QuantSpec::<f64>::make_spec(-1.0, 1.0, 8, Signedness::Signed).unwrap();
        assert!((s.scales()[0] - 1.0 / 127.0).abs() < 1e-15);
        // degenerate range floors the scale instead of crashing
        let s = QuantSpec::<f64>::make_spec(0.0, 0.0, 8, Signedness::Unsigned).unwrap();
        assert_eq!(s.scales()[0], SCALE_FLOOR);
    }

    #[test]
    fn unsigned_rejects_negative_lo() {
        assert!(QuantSpec::<f64>::make_spec(-0.1, 1.0, 8, Signedness::Unsigned).is_err());
    }

    #[test]
    fn quantize_examples() {
        let s = QuantSpec::<f64>::fixed_scale(0.1, 8, Signedness::Signed).unwrap();
        let x = Tensor::new(vec![3], vec![0.0, 12.7, 0.25]).unwrap();
        let q = s.quantize(&x).unwrap();
        assert_eq!(q.data[0], 0);
        assert_eq!(q.data[1], 127); // clamped at qmax
        assert_eq!(q.data[2], 2); // 2.5 rounds half-to-even -> 2
    }

    #[test]
    fn dequantize_examples() {
        let s = QuantSpec::<f64>::fixed_scale(0.1, 8, Signedness::Signed).unwrap();
        let q = IntTensor { shape: vec![2], data: vec![0, 5] };
        let x = s.dequantize(&q).unwrap();
        assert_eq!(x.data()[0], 0.0);
        assert!((x.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn round_trip_bound() {
        let s = QuantSpec::<f64>::make_spec(-4.0, 4.0, 8, Signedness::Signed).unwrap();
        let scale = s.scales()[0];
        let mut rng = crate::rng::Rng::new(3);
        for _ in 0..1000 {
            let v = rng.uniform(-6.0, 6.0);
            let x = Tensor::new(vec![1], vec![v]).unwrap();
            let fq = s.fake_apply(&x).unwrap();
            let clamped = v.clamp(s.clip_lo(0), s.clip_hi(0));
            assert!((fq.data()[0] - clamped).abs() <= scale / 2.0 + 1e-12);
        }
    }

    #[test]
    fn per_channel_matches_per_tensor_when_ranges_agree() {
        let x = Tensor::<f64>::from_f64(vec![2, 3], &[0.3, -1.2, 0.7, 1.2, -0.4, 0.9]).unwrap();
        let pt = QuantSpec::<f64>::make_spec(-1.2, 1.2, 8, Signedness::Signed).unwrap();
        let pc = QuantSpec::<f64>::per_channel_symmetric(&[1.2, 1.2], 8, 0).unwrap();
        assert_eq!(pt.fake_apply(&x).unwrap(), pc.fake_apply(&x).unwrap());
    }

    #[test]
    fn msqe_zero_on_grid() {
        let s = QuantSpec::<f64>::fixed_scale(0.25, 8, Signedness::Signed).unwrap();
        let x = Tensor::new(vec![4], vec![0.0, 0.25, -0.5, 1.0]).unwrap();
        assert_eq!(msqe(&x, &s).unwrap(), 0.0);
    }

    #[test]
    fn msqe_uniform_noise_formula() {
        // x uniform on [0,1] quantized unsigned 8-bit: MSQE ~ scale^2/12.
        let s = QuantSpec::<f64>::make_spec(0.0, 1.0, 8, Signedness::Unsigned).unwrap();
        let scale = s.scales()[0];
        let mut rng = crate::rng::Rng::new(11);
        let data: Vec<f64> = (0..200_000).map(|_| rng.uniform01()).collect();
        let x = Tensor::new(vec![data.len()], data).unwrap();
        let m = msqe(&x, &s).unwrap();
        let expected = scale * scale / 12.0;
        assert!((m - expected).abs() < 0.1 * expected, "msqe {} vs {}", m, expected);
    }

    #[test]
    fn clipped_range_beats_minmax_on_heavy_tails() {
        // 99.9% N(0,1) plus 0.1% spikes at +/-50: clipping at mu +/- 4 sigma
        // beats the min-max range at 4 bits (at very high widths the grid is
        // fine enough that clip error on the spikes dominates instead).
        let mut rng = crate::rng::Rng::new(17);
        let mut data = Vec::with_capacity(50_000);
        for i in 0..50_000 {
            if i % 1000 == 0 {
                data.push(if i % 2000 == 0 { 50.0 } else { -50.0 });
            } else {
                data.push(rng.normal());
            }
        }
        let x = Tensor::new(vec![data.len()], data.clone()).unwrap();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        let (lo, hi) = x.min_max();
        let minmax = QuantSpec::<f64>::make_spec(lo, hi, 4, Signedness::Signed).unwrap();
        let r = (mean - 4.0 * sd).abs().max((mean + 4.0 * sd).abs());
        let clipped = QuantSpec::<f64>::make_spec(-r, r, 4, Signedness::Signed).unwrap();
        assert!(msqe(&x, &clipped).unwrap() < msqe(&x, &minmax).unwrap());
    }
}
