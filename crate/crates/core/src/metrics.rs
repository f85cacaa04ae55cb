//! Rate-distortion metrics: PSNR, RD curves, Bjøntegaard delta rate, and
//! per-layer quantization-error tables.

use crate::codec::model::{kernel_max_abs, EvalOptions, LayerKind, Model};
use crate::error::{Error, Result};
use crate::quant::{msqe, QuantSpec, Signedness};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use crate::codec::train::RDPoint;

/// 10·log10(peak²/MSE); identical images yield the +inf sentinel.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    let mut se = 0.0f64;
    for (a, b) in x.data().iter().zip(y.data()) {
        let d = a.to64() - b.to64();
        se += d * d;
    }
    let mse = se / x.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// RD curve: at least four points, strictly increasing in both bpp and PSNR.
#[derive(Debug, Clone)]
pub struct RDCurve {
    points: Vec<RDPoint>,
}

impl RDCurve {
    pub fn new(mut points: Vec<RDPoint>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::invalid(format!(
                "RD curve needs >= 4 points, got {}",
                points.len()
            )));
        }
        points.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).expect("finite bpp"));
        for p in &points {
            if !(p.bpp > 0.0) || !p.psnr.is_finite() {
                return Err(Error::invalid(format!("invalid RD point {:?}", p)));
            }
        }
        for w in points.windows(2) {
            if !(w[1].bpp > w[0].bpp && w[1].psnr > w[0].psnr) {
                return Err(Error::invalid(format!(
                    "RD curve not strictly increasing: {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(RDCurve { points })
    }

    pub fn points(&self) -> &[RDPoint] {
        &self.points
    }

    fn psnr_range(&self) -> (f64, f64) {
        (self.points[0].psnr, self.points[self.points.len() - 1].psnr)
    }
}

/// Least-squares cubic fit of y over x (normal equations with partial
/// pivoting; x is centered for conditioning).
fn cubic_fit(x: &[f64], y: &[f64]) -> [f64; 4] {
    let n = x.len();
    let xm = x.iter().sum::<f64>() / n as f64;
    // moments of centered x up to power 6
    let mut pow_sums = [0.0f64; 7];
    let mut rhs = [0.0f64; 4];
    for i in 0..n {
        let xc = x[i] - xm;
        let mut p = 1.0;
        for (k, slot) in pow_sums.iter_mut().enumerate() {
            if k > 0 {
                p *= xc;
            }
            *slot += p;
        }
        let mut p = 1.0;
        for (k, slot) in rhs.iter_mut().enumerate() {
            if k > 0 {
                p *= xc;
            }
            *slot += y[i] * p;
        }
    }
    let mut a = [[0.0f64; 5]; 4];
    for r in 0..4 {
        for c in 0..4 {
            a[r][c] = pow_sums[r + c];
        }
        a[r][4] = rhs[r];
    }
    // gaussian elimination with partial pivoting
    for col in 0..4 {
        let mut piv = col;
        for r in col + 1..4 {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        a.swap(col, piv);
        let d = a[col][col];
        for c in col..5 {
            a[col][c] /= d;
        }
        for r in 0..4 {
            if r != col {
                let f = a[r][col];
                for c in col..5 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    // coefficients over centered x; shift back to raw x
    let (c0, c1, c2, c3) = (a[0][4], a[1][4], a[2][4], a[3][4]);
    let s = -xm;
    [
        c0 + c1 * s + c2 * s * s + c3 * s * s * s,
        c1 + 2.0 * c2 * s + 3.0 * c3 * s * s,
        c2 + 3.0 * c3 * s,
        c3,
    ]
}

fn poly_integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let f = |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x * x * x / 3.0 + c[3] * x * x * x * x / 4.0;
    f(hi) - f(lo)
}

/// Common PSNR overlap of two curves; errors below 1 dB of overlap.
fn overlap(reference: &RDCurve, test: &RDCurve) -> Result<(f64, f64)> {
    let (r_lo, r_hi) = reference.psnr_range();
    let (t_lo, t_hi) = test.psnr_range();
    let lo = r_lo.max(t_lo);
    let hi = r_hi.min(t_hi);
    if hi - lo < 1.0 {
        return Err(Error::invalid(format!(
            "insufficient PSNR overlap: [{:.3}, {:.3}] is under 1 dB",
            lo, hi
        )));
    }
    Ok((lo, hi))
}

/// Bjøntegaard delta rate in percent: fit log10(bpp) as a cubic in PSNR for
/// each curve, integrate over the common PSNR interval, and convert the mean
/// log-rate difference back to a percentage. Positive means `test` spends
/// more rate than `reference` at equal quality.
pub fn bd_rate(reference: &RDCurve, test: &RDCurve) -> Result<f64> {
    let (lo, hi) = overlap(reference, test)?;
    let fit = |c: &RDCurve| {
        let x: Vec<f64> = c.points().iter().map(|p| p.psnr).collect();
        let y: Vec<f64> = c.points().iter().map(|p| p.bpp.log10()).collect();
        cubic_fit(&x, &y)
    };
    let fr = fit(reference);
    let ft = fit(test);
    let span = hi - lo;
    let avg_diff = (poly_integral(&ft, lo, hi) - poly_integral(&fr, lo, hi)) / span;
    Ok((10f64.powf(avg_diff) - 1.0) * 100.0)
}

/// Per-layer weight and activation mean squared quantization error.
#[derive(Debug, Clone, Default)]
pub struct MsqeReport {
    /// (layer id, weight msqe, activation msqe). Layers without weights or
    /// without a quantized input edge carry `None` in that slot.
    pub rows: Vec<(String, Option<f64>, Option<f64>)>,
}

/// MSQE of every quantized layer over a calibration set: weights against
/// their per-channel specs, input-edge activations against the bound edge
/// specs (including the clip).
pub fn msqe_table<T: Scalar>(model: &Model<T>, calib: &[Tensor<T>]) -> Result<MsqeReport> {
    if calib.is_empty() {
        return Err(Error::invalid("msqe_table needs a nonempty calibration set"));
    }
    if !model.is_calibrated() {
        return Err(Error::NotCalibrated("msqe_table needs bound quantization specs".into()));
    }
    // accumulate squared error across the whole set per edge
    struct Acc {
        se: f64,
        n: f64,
    }
    let mut act: Vec<(String, Acc)> = Vec::new();
    for img in calib {
        let out = model.forward_eval(
            img,
            EvalOptions { quant: true, collect_raw: true, collect_grid: false },
        )?;
        for (layer, raw) in &out.edges_raw {
            let idx = model.layer_index(layer)?;
            let edge = match &model.layers[idx].in_edge {
                Some(e) => e,
                None => continue,
            };
            let spec = edge.spec()?;
            let clipped = match &edge.clip {
                Some(c) => {
                    let (lo, hi) = c.bounds();
                    raw.map(|v| T::of(v.to64().clamp(lo, hi)))
                }
                None => raw.clone(),
            };
            let fq = spec.fake_apply(&clipped)?;
            let slot = match act.iter_mut().find(|(l, _)| l == layer) {
                Some((_, a)) => a,
                None => {
                    act.push((layer.clone(), Acc { se: 0.0, n: 0.0 }));
                    &mut act.last_mut().expect("just pushed").1
                }
            };
            for (a, b) in raw.data().iter().zip(fq.data()) {
                let d = a.to64() - b.to64();
                slot.se += d * d;
                slot.n += 1.0;
            }
        }
    }
    let mut rows = Vec::new();
    for layer in &model.layers {
        let weight = match &layer.kind {
            LayerKind::Conv { w, .. } => {
                let spec = QuantSpec::per_channel_symmetric(&kernel_max_abs(w, 0), layer.w_bits, 0)?;
                Some(msqe(w, &spec)?)
            }
            LayerKind::Tconv { w, .. } => {
                let spec = QuantSpec::per_channel_symmetric(&kernel_max_abs(w, 1), layer.w_bits, 1)?;
                Some(msqe(w, &spec)?)
            }
            LayerKind::Gdn { p, .. } => {
                let gamma = p.gamma();
                let spec =
                    QuantSpec::per_channel_symmetric(&kernel_max_abs(&gamma, 0), layer.w_bits, 0)?;
                Some(msqe(&gamma, &spec)?)
            }
            _ => None,
        };
        let activation = act.iter().find(|(l, _)| l == &layer.id).map(|(_, a)| a.se / a.n);
        if weight.is_some() || activation.is_some() {
            rows.push((layer.id.clone(), weight, activation));
        }
    }
    Ok(MsqeReport { rows })
}

/// Signed symmetric 8-bit MSQE of an arbitrary sample for range studies.
pub fn msqe_for_range(values: &[f64], lo: f64, hi: f64, bits: u8) -> Result<f64> {
    let spec = QuantSpec::<f64>::make_spec(
        -lo.abs().max(hi.abs()),
        lo.abs().max(hi.abs()),
        bits,
        Signedness::Signed,
    )?;
    let t = Tensor::new(vec![values.len()], values.to_vec())?;
    msqe(&t, &spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn psnr_reference_values() {
        let x = Tensor::<f64>::zeros(vec![4]);
        let y = Tensor::<f64>::zeros(vec![4]);
        assert!(psnr(&x, &y, 255.0).unwrap().is_infinite());

        // MSE 1 at peak 255: 48.1308 dB
        let y = Tensor::<f64>::full(vec![4], 1.0);
        let p = psnr(&x, &y, 255.0).unwrap();
        assert!((p - 48.1308).abs() < 1e-3, "{}", p);

        // MSE = peak^2 -> 0 dB
        let y = Tensor::<f64>::full(vec![4], 255.0);
        assert!(psnr(&x, &y, 255.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn psnr_symmetric_and_shape_checked() {
        let mut rng = Rng::new(3);
        let a = Tensor::<f64>::from_f64(vec![10], &(0..10).map(|_| rng.uniform01()).collect::<Vec<_>>()).unwrap();
        let b = Tensor::<f64>::from_f64(vec![10], &(0..10).map(|_| rng.uniform01()).collect::<Vec<_>>()).unwrap();
        assert_eq!(psnr(&a, &b, 255.0).unwrap(), psnr(&b, &a, 255.0).unwrap());
        let c = Tensor::<f64>::zeros(vec![3]);
        assert!(psnr(&a, &c, 255.0).is_err());
    }

    fn synth_curve(c: &[f64; 4], qs: &[f64]) -> RDCurve {
        let pts = qs
            .iter()
            .map(|&q| RDPoint {
                bpp: 10f64.powf(c[0] + c[1] * q + c[2] * q * q + c[3] * q * q * q),
                psnr: q,
            })
            .collect();
        RDCurve::new(pts).unwrap()
    }

    #[test]
    fn identical_curves_give_zero() {
        let qs = [30.0, 32.0, 34.0, 36.0, 38.0];
        let c = synth_curve(&[-2.0, 0.05, 1e-4, 1e-6], &qs);
        let bd = bd_rate(&c, &c).unwrap();
        assert_eq!(bd, 0.0);
    }

    #[test]
    fn constant_rate_shift_recovers_percentage() {
        let qs = [30.0, 32.0, 34.0, 36.0, 38.0];
        let base = [-2.0, 0.05, 2e-4, 1e-6];
        let reference = synth_curve(&base, &qs);
        let shifted = [base[0] + 1.1f64.log10(), base[1], base[2], base[3]];
        let test = synth_curve(&shifted, &qs);
        let bd = bd_rate(&reference, &test).unwrap();
        assert!((bd - 10.0).abs() < 0.05, "bd = {}", bd);
    }

    #[test]
    fn antisymmetry_identity() {
        let qs = [28.0, 30.5, 33.0, 35.5, 38.0];
        let a = synth_curve(&[-2.1, 0.055, 1.5e-4, 2e-6], &qs);
        let b = synth_curve(&[-2.0, 0.050, 1.0e-4, 1e-6], &qs);
        let r = bd_rate(&a, &b).unwrap();
        let s = bd_rate(&b, &a).unwrap();
        let expected = (1.0 / (1.0 + r / 100.0) - 1.0) * 100.0;
        assert!((s - expected).abs() < 0.1, "{} vs {}", s, expected);
    }

    #[test]
    fn insufficient_overlap_rejected() {
        let a = synth_curve(&[-2.0, 0.05, 0.0, 0.0], &[30.0, 31.0, 32.0, 33.0]);
        let b = synth_curve(&[-2.0, 0.05, 0.0, 0.0], &[33.5, 34.5, 35.5, 36.5]);
        assert!(bd_rate(&a, &b).is_err());
    }

    #[test]
    fn curve_invariants_enforced() {
        let p = |bpp: f64, psnr: f64| RDPoint { bpp, psnr };
        assert!(RDCurve::new(vec![p(0.1, 30.0), p(0.2, 31.0), p(0.3, 32.0)]).is_err());
        assert!(RDCurve::new(vec![p(0.1, 30.0), p(0.2, 29.0), p(0.3, 32.0), p(0.4, 33.0)]).is_err());
        assert!(RDCurve::new(vec![p(0.1, 30.0), p(0.2, 31.0), p(0.3, 32.0), p(0.4, 33.0)]).is_ok());
    }

    #[test]
    fn bd_rate_matches_piecewise_cubic_oracle() {
        // oracle: piecewise 4-point Lagrange interpolation of log10(bpp)
        // over PSNR, integrated on a dense grid
        fn interp(points: &[RDPoint], q: f64) -> f64 {
            let xs: Vec<f64> = points.iter().map(|p| p.psnr).collect();
            let ys: Vec<f64> = points.iter().map(|p| p.bpp.log10()).collect();
            let n = xs.len();
            let mut seg = 0usize;
            while seg + 1 < n - 1 && q > xs[seg + 1] {
                seg += 1;
            }
            let start = seg.saturating_sub(1).min(n - 4);
            let (xs, ys) = (&xs[start..start + 4], &ys[start..start + 4]);
            let mut acc = 0.0;
            for i in 0..4 {
                let mut l = ys[i];
                for j in 0..4 {
                    if i != j {
                        l *= (q - xs[j]) / (xs[i] - xs[j]);
                    }
                }
                acc += l;
            }
            acc
        }
        let mut rng = Rng::new(77);
        for case in 0..20 {
            let qs: Vec<f64> = {
                let mut q = 28.0 + rng.uniform(0.0, 2.0);
                let mut v = Vec::new();
                for _ in 0..5 {
                    v.push(q);
                    q += rng.uniform(1.2, 2.5);
                }
                v
            };
            let base = [
                rng.uniform(-2.5, -1.5),
                rng.uniform(0.04, 0.08),
                rng.uniform(-2e-4, 2e-4),
                rng.uniform(-2e-6, 2e-6),
            ];
            let shift = [base[0] + rng.uniform(0.005, 0.05), base[1], base[2], base[3]];
            let reference = synth_curve(&base, &qs);
            let test = synth_curve(&shift, &qs);
            let bd = bd_rate(&reference, &test).unwrap();

            let lo = qs[0];
            let hi = qs[4];
            let steps = 4000;
            let mut ir = 0.0;
            let mut it = 0.0;
            for k in 0..steps {
                let q = lo + (hi - lo) * (k as f64 + 0.5) / steps as f64;
                ir += interp(reference.points(), q);
                it += interp(test.points(), q);
            }
            let avg = (it - ir) / steps as f64;
            let oracle = (10f64.powf(avg) - 1.0) * 100.0;
            assert!(
                (bd - oracle).abs() <= 0.1,
                "case {}: bd {} vs oracle {}",
                case,
                bd,
                oracle
            );
        }
    }
}
