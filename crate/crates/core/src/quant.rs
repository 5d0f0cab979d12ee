//! Sub-byte floating point formats and fake quantization.
//!
//! Quantization is emulated in `f64`: each group of a tensor is scaled so its
//! largest magnitude maps onto the format's largest finite value, rounded onto
//! the format grid, and scaled back.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Which encodings a format reserves for non-finite values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpecialEncoding {
    /// Every bit pattern is finite (MX E2M1).
    AllFinite,
    /// Only the all-ones exponent with all-ones mantissa is NaN (OCP E4M3).
    NanOnly,
    /// The all-ones exponent field is reserved for Inf/NaN (IEEE style).
    Ieee,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FloatFormat {
    exp_bits: u8,
    mantissa_bits: u8,
    special: SpecialEncoding,
}

impl FloatFormat {
    pub fn new(exp_bits: u8, mantissa_bits: u8, special: SpecialEncoding) -> Result<Self> {
        if exp_bits == 0 {
            return Err(invalid("exponent bits must be positive"));
        }
        if 1 + exp_bits as u32 + mantissa_bits as u32 > 8 {
            return Err(invalid(format!(
                "E{exp_bits}M{mantissa_bits} does not fit in a byte"
            )));
        }
        if special == SpecialEncoding::Ieee && exp_bits < 2 {
            return Err(invalid("IEEE-style formats need at least two exponent bits"));
        }
        if special == SpecialEncoding::NanOnly && exp_bits + mantissa_bits < 2 {
            return Err(invalid("format has no finite nonzero values"));
        }
        Ok(Self {
            exp_bits,
            mantissa_bits,
            special,
        })
    }

    /// FP4 following the MX convention: no Inf/NaN, max 6.
    pub fn e2m1() -> Self {
        Self::new(2, 1, SpecialEncoding::AllFinite).unwrap()
    }

    /// FP8 following the OCP convention: max 448.
    pub fn e4m3() -> Self {
        Self::new(4, 3, SpecialEncoding::NanOnly).unwrap()
    }

    pub fn e5m2() -> Self {
        Self::new(5, 2, SpecialEncoding::Ieee).unwrap()
    }

    pub fn e3m4() -> Self {
        Self::new(3, 4, SpecialEncoding::Ieee).unwrap()
    }

    pub fn exp_bits(&self) -> u8 {
        self.exp_bits
    }

    pub fn mantissa_bits(&self) -> u8 {
        self.mantissa_bits
    }

    pub fn special(&self) -> SpecialEncoding {
        self.special
    }

    pub fn name(&self) -> String {
        format!("E{}M{}", self.exp_bits, self.mantissa_bits)
    }

    pub fn bias(&self) -> i32 {
        (1 << (self.exp_bits - 1)) - 1
    }

    fn top_exp_field(&self) -> u32 {
        (1 << self.exp_bits) - 1
    }

    fn decode(&self, exp_field: u32, mantissa: u32) -> f64 {
        let m = self.mantissa_bits as i32;
        let frac = mantissa as f64 / (1u64 << m) as f64;
        if exp_field == 0 {
            frac * 2f64.powi(1 - self.bias())
        } else {
            (1.0 + frac) * 2f64.powi(exp_field as i32 - self.bias())
        }
    }

    fn is_finite_encoding(&self, exp_field: u32, mantissa: u32) -> bool {
        let top = self.top_exp_field();
        let mant_ones = (1u32 << self.mantissa_bits) - 1;
        match self.special {
            SpecialEncoding::AllFinite => true,
            SpecialEncoding::NanOnly => !(exp_field == top && mantissa == mant_ones),
            SpecialEncoding::Ieee => exp_field != top,
        }
    }

    /// Largest finite representable magnitude.
    pub fn max_value(&self) -> f64 {
        let top = self.top_exp_field();
        let mant_ones = (1u32 << self.mantissa_bits) - 1;
        match self.special {
            SpecialEncoding::AllFinite => self.decode(top, mant_ones),
            SpecialEncoding::NanOnly if mant_ones > 0 => self.decode(top, mant_ones - 1),
            SpecialEncoding::NanOnly => self.decode(top - 1, 0),
            SpecialEncoding::Ieee => self.decode(top - 1, mant_ones),
        }
    }

    /// Smallest positive normal magnitude.
    pub fn min_normal(&self) -> f64 {
        2f64.powi(1 - self.bias())
    }

    /// Every finite value the format encodes, including subnormals and both
    /// zeros, sorted ascending (`-0.0` before `+0.0`).
    pub fn representable_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for sign in [1.0, -1.0] {
            for e in 0..=self.top_exp_field() {
                for m in 0..(1u32 << self.mantissa_bits) {
                    if self.is_finite_encoding(e, m) {
                        out.push(sign * self.decode(e, m));
                    }
                }
            }
        }
        out.sort_by(f64::total_cmp);
        out
    }

    /// Grid spacing around magnitude `y` (`0 <= y < max_value`): the distance
    /// between the representable values bracketing `y`.
    fn step_at(&self, y: f64) -> f64 {
        let m = self.mantissa_bits as i32;
        if y < self.min_normal() {
            2f64.powi(1 - self.bias() - m)
        } else {
            let exp = ((y.to_bits() >> 52) & 0x7ff) as i32 - 1023;
            2f64.powi(exp - m)
        }
    }

    /// Half of the local grid step at scaled magnitude `y`, the worst-case
    /// nearest rounding error there.
    pub fn half_step_at(&self, y: f64) -> f64 {
        let y = y.abs().min(self.max_value());
        if y >= self.max_value() {
            return 0.5 * self.step_at(self.max_value() * (1.0 - f64::EPSILON));
        }
        0.5 * self.step_at(y)
    }

    /// Rounds a scaled value onto the grid; `u` is the uniform draw used by
    /// stochastic rounding and ignored otherwise.
    pub fn round(&self, x: f64, rounding: Rounding, u: f64) -> f64 {
        let max = self.max_value();
        let y = x.abs();
        let mag = if y >= max {
            max
        } else {
            let step = self.step_at(y);
            let r = y / step;
            let fl = r.floor();
            let frac = r - fl;
            let up = match rounding {
                Rounding::NearestEven => frac > 0.5 || (frac == 0.5 && fl % 2.0 != 0.0),
                Rounding::Stochastic => u < frac,
            };
            if up {
                (fl + 1.0) * step
            } else {
                fl * step
            }
        };
        mag.copysign(x)
    }
}

impl fmt::Display for FloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for FloatFormat {
    type Err = crate::error::SnipError;

    /// Parses `E<e>M<m>`. E4M3 uses the OCP encoding, E5M2 and E3M4 the IEEE
    /// one, everything else is treated as all-finite (MX style).
    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        let rest = upper
            .strip_prefix('E')
            .ok_or_else(|| invalid(format!("bad format name {s:?}")))?;
        let (e, m) = rest
            .split_once('M')
            .ok_or_else(|| invalid(format!("bad format name {s:?}")))?;
        let e: u8 = e.parse().map_err(|_| invalid(format!("bad format name {s:?}")))?;
        let m: u8 = m.parse().map_err(|_| invalid(format!("bad format name {s:?}")))?;
        let special = match (e, m) {
            (4, 3) => SpecialEncoding::NanOnly,
            (5, 2) | (3, 4) => SpecialEncoding::Ieee,
            _ => SpecialEncoding::AllFinite,
        };
        FloatFormat::new(e, m, special)
    }
}

impl Serialize for FloatFormat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for FloatFormat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Scaling granularity: which entries share one scale factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Granularity {
    Tensorwise,
    Rowwise,
    Columnwise,
    /// `nb × nb` sub-blocks.
    Blockwise { nb: usize },
    /// `1 × nb` contiguous row segments.
    Tilewise { nb: usize },
}

pub const DEFAULT_BLOCK: usize = 128;

/// A rectangular group `[r0, r1) × [c0, c1)` of a matrix view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupRect {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl Granularity {
    pub fn tilewise() -> Self {
        Granularity::Tilewise { nb: DEFAULT_BLOCK }
    }

    pub fn blockwise() -> Self {
        Granularity::Blockwise { nb: DEFAULT_BLOCK }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Granularity::Blockwise { nb } | Granularity::Tilewise { nb } if nb == 0 => {
                Err(invalid("block edge must be at least 1"))
            }
            _ => Ok(()),
        }
    }

    /// Shape of the scale tensor for a `rows × cols` matrix view.
    pub fn scale_shape(&self, rows: usize, cols: usize) -> Vec<usize> {
        match *self {
            Granularity::Tensorwise => vec![1],
            Granularity::Rowwise => vec![rows],
            Granularity::Columnwise => vec![cols],
            Granularity::Blockwise { nb } => vec![rows.div_ceil(nb), cols.div_ceil(nb)],
            Granularity::Tilewise { nb } => vec![rows, cols.div_ceil(nb)],
        }
    }

    /// Groups in row-major order of the scale tensor. Ragged edges form
    /// smaller final groups.
    pub fn groups(&self, rows: usize, cols: usize) -> Vec<GroupRect> {
        let rect = |r0, r1, c0, c1| GroupRect { r0, r1, c0, c1 };
        match *self {
            Granularity::Tensorwise => vec![rect(0, rows, 0, cols)],
            Granularity::Rowwise => (0..rows).map(|r| rect(r, r + 1, 0, cols)).collect(),
            Granularity::Columnwise => (0..cols).map(|c| rect(0, rows, c, c + 1)).collect(),
            Granularity::Blockwise { nb } => {
                let mut out = Vec::new();
                for r0 in (0..rows).step_by(nb) {
                    for c0 in (0..cols).step_by(nb) {
                        out.push(rect(r0, (r0 + nb).min(rows), c0, (c0 + nb).min(cols)));
                    }
                }
                out
            }
            Granularity::Tilewise { nb } => {
                let mut out = Vec::new();
                for r in 0..rows {
                    for c0 in (0..cols).step_by(nb) {
                        out.push(rect(r, r + 1, c0, (c0 + nb).min(cols)));
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    NearestEven,
    /// Round up with probability equal to the normalized distance from the
    /// lower neighbour, which makes the rounding unbiased.
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub format: FloatFormat,
    pub granularity: Granularity,
    pub rounding: Rounding,
}

impl QuantSpec {
    pub fn new(format: FloatFormat, granularity: Granularity, rounding: Rounding) -> Self {
        Self {
            format,
            granularity,
            rounding,
        }
    }

    /// FP8 activations/gradients: E4M3, 1×128 tiles, nearest-even.
    pub fn fp8_tile() -> Self {
        Self::new(FloatFormat::e4m3(), Granularity::tilewise(), Rounding::NearestEven)
    }

    /// FP8 weights: E4M3, 128×128 blocks, nearest-even.
    pub fn fp8_block() -> Self {
        Self::new(FloatFormat::e4m3(), Granularity::blockwise(), Rounding::NearestEven)
    }

    pub fn fp4_tile() -> Self {
        Self::new(FloatFormat::e2m1(), Granularity::tilewise(), Rounding::NearestEven)
    }

    pub fn fp4_block() -> Self {
        Self::new(FloatFormat::e2m1(), Granularity::blockwise(), Rounding::NearestEven)
    }

    /// FP4 output gradients use stochastic rounding.
    pub fn fp4_grad() -> Self {
        Self::new(FloatFormat::e2m1(), Granularity::tilewise(), Rounding::Stochastic)
    }

    pub fn with_block(mut self, nb: usize) -> Self {
        self.granularity = match self.granularity {
            Granularity::Blockwise { .. } => Granularity::Blockwise { nb },
            Granularity::Tilewise { .. } => Granularity::Tilewise { nb },
            g => g,
        };
        self
    }

    pub fn is_fp4(&self) -> bool {
        self.format.exp_bits + self.format.mantissa_bits + 1 <= 4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantResult {
    /// Dequantized values.
    pub tensor: Tensor,
    /// `‖q(x) − x‖_F`.
    pub abs_err_norm: f64,
    /// `abs_err_norm / max(‖x‖_F, tiny)`.
    pub rel_err: f64,
}

const TINY_NORM: f64 = 1e-30;

fn check_finite(x: &Tensor) -> Result<()> {
    if x.is_empty() {
        return Err(invalid("cannot quantize an empty tensor"));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite value in quantization input"));
    }
    Ok(())
}

fn group_amax(x: &Tensor, cols: usize, g: &GroupRect) -> f64 {
    let data = x.data();
    let mut amax = 0.0_f64;
    for r in g.r0..g.r1 {
        for v in &data[r * cols + g.c0..r * cols + g.c1] {
            amax = amax.max(v.abs());
        }
    }
    amax
}

fn scale_for(amax: f64, f: &FloatFormat) -> f64 {
    if amax == 0.0 {
        return 1.0;
    }
    let s = f.max_value() / amax;
    if s.is_finite() {
        s
    } else {
        f64::MAX
    }
}

/// One scale per group: `max_value / amax(group)`, or `1.0` for an all-zero
/// group.
pub fn compute_scales(x: &Tensor, g: Granularity, f: &FloatFormat) -> Result<Tensor> {
    check_finite(x)?;
    g.validate()?;
    let (rows, cols) = x.matrix_dims();
    let scales = g
        .groups(rows, cols)
        .iter()
        .map(|grp| scale_for(group_amax(x, cols, grp), f))
        .collect();
    Ok(Tensor::from_parts(g.scale_shape(rows, cols), scales))
}

/// Quantize-dequantize `x` under `spec`. Stochastic rounding draws from a
/// per-group sub-stream of `rng`, so the output does not depend on group
/// processing order.
pub fn fake_quantize(x: &Tensor, spec: &QuantSpec, rng: &RngStream) -> Result<QuantResult> {
    check_finite(x)?;
    spec.granularity.validate()?;
    let (rows, cols) = x.matrix_dims();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for (gi, grp) in spec.granularity.groups(rows, cols).iter().enumerate() {
        let scale = scale_for(group_amax(x, cols, grp), &spec.format);
        let mut gen = match spec.rounding {
            Rounding::Stochastic => Some(rng.derive(gi as u64).generator()),
            Rounding::NearestEven => None,
        };
        for r in grp.r0..grp.r1 {
            for c in grp.c0..grp.c1 {
                let idx = r * cols + c;
                let u = match gen.as_mut() {
                    Some(g) => g.random::<f64>(),
                    None => 0.0,
                };
                out[idx] = spec.format.round(src[idx] * scale, spec.rounding, u) / scale;
            }
        }
    }
    let err = out
        .iter()
        .zip(src)
        .fold(0.0, |acc, (q, v)| acc + (q - v) * (q - v))
        .sqrt();
    let rel = err / x.norm().max(TINY_NORM);
    Ok(QuantResult {
        tensor: Tensor::from_parts(x.shape().to_vec(), out),
        abs_err_norm: err,
        rel_err: rel,
    })
}

/// `(abs_err_norm, rel_err)` for every spec, each spec drawing from its own
/// sub-stream.
pub fn quant_error_norms(x: &Tensor, specs: &[QuantSpec], rng: &RngStream) -> Result<Vec<(f64, f64)>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| fake_quantize(x, s, &rng.derive(i as u64)).map(|r| (r.abs_err_norm, r.rel_err)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sample_gaussian;
    use proptest::prelude::*;

    /// Brute-force nearest rounding against the enumerated grid.
    fn oracle_round_nearest_even(f: &FloatFormat, x: f64) -> f64 {
        let mut mags: Vec<f64> = f.representable_values().into_iter().filter(|v| *v >= 0.0).collect();
        mags.dedup();
        let y = x.abs().min(f.max_value());
        let mut best = 0usize;
        for (i, m) in mags.iter().enumerate() {
            let d = (m - y).abs();
            let bd = (mags[best] - y).abs();
            // Grid index parity equals mantissa parity.
            if d < bd || (d == bd && i % 2 == 0 && best % 2 == 1) {
                best = i;
            }
        }
        mags[best].copysign(x)
    }

    #[test]
    fn e2m1_values_match_enumeration() {
        let vals = FloatFormat::e2m1().representable_values();
        assert_eq!(vals.len(), 16);
        let expected: [f64; 16] = [
            -6.0, -4.0, -3.0, -2.0, -1.5, -1.0, -0.5, -0.0, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0,
        ];
        for (v, e) in vals.iter().zip(expected) {
            assert_eq!(v.to_bits(), e.to_bits());
        }
        assert_eq!(FloatFormat::e2m1().max_value(), 6.0);
    }

    #[test]
    fn fp8_maxima() {
        let e4m3 = FloatFormat::e4m3();
        assert_eq!(e4m3.max_value(), 448.0);
        assert_eq!(*e4m3.representable_values().last().unwrap(), 448.0);
        assert_eq!(e4m3.representable_values().len(), 254);
        assert_eq!(FloatFormat::e5m2().max_value(), 57344.0);
        assert_eq!(FloatFormat::e3m4().max_value(), 15.5);
    }

    #[test]
    fn single_exponent_bit_format() {
        let f = FloatFormat::new(1, 0, SpecialEncoding::AllFinite).unwrap();
        let vals = f.representable_values();
        assert_eq!(vals.len(), 4);
        for (a, b) in vals.iter().zip(vals.iter().rev()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn format_validation_and_parsing() {
        assert!(FloatFormat::new(5, 3, SpecialEncoding::AllFinite).is_err());
        assert!(FloatFormat::new(0, 3, SpecialEncoding::AllFinite).is_err());
        assert_eq!("E4M3".parse::<FloatFormat>().unwrap(), FloatFormat::e4m3());
        assert_eq!("e2m1".parse::<FloatFormat>().unwrap(), FloatFormat::e2m1());
        assert!("FP8".parse::<FloatFormat>().is_err());
    }

    #[test]
    fn scale_examples() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, -12.0, 3.0, 0.5]).unwrap();
        let s = compute_scales(&x, Granularity::Tensorwise, &FloatFormat::e2m1()).unwrap();
        assert_eq!(s.data(), &[0.5]);

        let z = Tensor::zeros(&[3, 5]);
        let s = compute_scales(&z, Granularity::Rowwise, &FloatFormat::e2m1()).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0));

        let x = sample_gaussian(&[4, 256], 1.0, &RngStream::new(2)).unwrap();
        let f = FloatFormat::e4m3();
        let s = compute_scales(&x, Granularity::Tilewise { nb: 128 }, &f).unwrap();
        assert_eq!(s.shape(), &[4, 2]);
        for r in 0..4 {
            for t in 0..2 {
                let mut amax = 0.0_f64;
                for c in t * 128..(t + 1) * 128 {
                    amax = amax.max(x.get2(r, c).abs());
                }
                assert_eq!(s.get2(r, t), 448.0 / amax);
            }
        }
    }

    #[test]
    fn ragged_groups() {
        let g = Granularity::Blockwise { nb: 4 };
        let groups = g.groups(6, 5);
        assert_eq!(groups.len(), 4);
        assert_eq!(groups[3], GroupRect { r0: 4, r1: 6, c0: 4, c1: 5 });
        assert_eq!(Granularity::Tilewise { nb: 3 }.groups(2, 7).len(), 6);
        assert!(compute_scales(&Tensor::zeros(&[2, 2]), Granularity::Tilewise { nb: 0 }, &FloatFormat::e2m1()).is_err());
    }

    #[test]
    fn on_grid_input_is_exact() {
        let x = Tensor::from_vec(&[1, 4], vec![6.0, -1.5, 0.5, 3.0]).unwrap();
        let spec = QuantSpec::new(FloatFormat::e2m1(), Granularity::Tensorwise, Rounding::NearestEven);
        let r = fake_quantize(&x, &spec, &RngStream::new(0)).unwrap();
        assert_eq!(r.tensor, x);
        assert_eq!(r.abs_err_norm, 0.0);
    }

    #[test]
    fn tie_rounds_to_even_mantissa() {
        let x = Tensor::from_vec(&[1, 2], vec![2.5, 6.0]).unwrap();
        let spec = QuantSpec::new(FloatFormat::e2m1(), Granularity::Tensorwise, Rounding::NearestEven);
        let r = fake_quantize(&x, &spec, &RngStream::new(0)).unwrap();
        assert_eq!(r.tensor.data()[0], 2.0);
        // 1.25 sits between 1.0 (mantissa 0) and 1.5 (mantissa 1).
        assert_eq!(FloatFormat::e2m1().round(1.25, Rounding::NearestEven, 0.0), 1.0);
        assert_eq!(FloatFormat::e2m1().round(1.75, Rounding::NearestEven, 0.0), 2.0);
    }

    #[test]
    fn stochastic_rounding_is_unbiased_at_two_and_a_half() {
        let x = Tensor::from_vec(&[1, 2], vec![2.5, 6.0]).unwrap();
        let spec = QuantSpec::new(FloatFormat::e2m1(), Granularity::Tensorwise, Rounding::Stochastic);
        let n = 100_000;
        let mut sum = 0.0;
        let mut ups = 0;
        for i in 0..n {
            let v = fake_quantize(&x, &spec, &RngStream::with_stream(1, i)).unwrap().tensor.data()[0];
            assert!(v == 2.0 || v == 3.0);
            if v == 3.0 {
                ups += 1;
            }
            sum += v;
        }
        let mean = sum / n as f64;
        assert!((2.49..=2.51).contains(&mean), "{mean}");
        assert!((ups as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn error_norm_examples() {
        let x = sample_gaussian(&[16, 64], 1.0, &RngStream::new(4)).unwrap();
        let wide = QuantSpec::new(
            FloatFormat::new(2, 5, SpecialEncoding::AllFinite).unwrap(),
            Granularity::Tensorwise,
            Rounding::NearestEven,
        );
        let errs = quant_error_norms(&x, &[QuantSpec::fp4_tile(), QuantSpec::fp8_tile(), wide], &RngStream::new(0)).unwrap();
        assert!(errs[0].0 > errs[1].0);
        assert!(errs[1].0 > 0.0);
        for (a, r) in &errs {
            assert!(*a >= 0.0 && *r >= 0.0);
        }

        let z = Tensor::zeros(&[4, 4]);
        let errs = quant_error_norms(&z, &[QuantSpec::fp4_grad(), QuantSpec::fp8_block()], &RngStream::new(0)).unwrap();
        assert_eq!(errs, vec![(0.0, 0.0), (0.0, 0.0)]);
    }

    #[test]
    fn near_lossless_grid() {
        // A tiny integer-valued tensor sits on a 7-bit-mantissa grid exactly.
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 96.0]).unwrap();
        let spec = QuantSpec::new(
            FloatFormat::new(1, 6, SpecialEncoding::AllFinite).unwrap(),
            Granularity::Tensorwise,
            Rounding::NearestEven,
        );
        let r = fake_quantize(&x, &spec, &RngStream::new(0)).unwrap();
        assert!(r.abs_err_norm < 1e-2 * x.norm());
    }

    #[test]
    fn finer_granularity_never_hurts_much_more() {
        let mut worse = 0;
        for seed in 0..100 {
            let base = sample_gaussian(&[8, 512], 1.0, &RngStream::new(seed)).unwrap();
            // Heavy-tailed rows make scaling granularity matter.
            let x = Tensor::from_vec(
                &[8, 512],
                base.data().iter().enumerate().map(|(i, v)| v * (1.0 + (i / 512) as f64 * 3.0)).collect(),
            )
            .unwrap();
            let tile = QuantSpec::new(FloatFormat::e2m1(), Granularity::Tilewise { nb: 128 }, Rounding::NearestEven);
            let tensor = QuantSpec::new(FloatFormat::e2m1(), Granularity::Tensorwise, Rounding::NearestEven);
            let et = fake_quantize(&x, &tile, &RngStream::new(0)).unwrap().abs_err_norm;
            let ew = fake_quantize(&x, &tensor, &RngStream::new(0)).unwrap().abs_err_norm;
            if et > ew {
                worse += 1;
            }
        }
        assert_eq!(worse, 0);
    }

    fn arb_format() -> impl Strategy<Value = FloatFormat> {
        prop_oneof![
            Just(FloatFormat::e2m1()),
            Just(FloatFormat::e4m3()),
            Just(FloatFormat::e5m2()),
            Just(FloatFormat::e3m4()),
        ]
    }

    fn arb_granularity() -> impl Strategy<Value = Granularity> {
        prop_oneof![
            Just(Granularity::Tensorwise),
            Just(Granularity::Rowwise),
            Just(Granularity::Columnwise),
            (1usize..6).prop_map(|nb| Granularity::Blockwise { nb }),
            (1usize..6).prop_map(|nb| Granularity::Tilewise { nb }),
        ]
    }

    fn arb_matrix() -> impl Strategy<Value = Tensor> {
        (1usize..7, 1usize..9).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-100.0..100.0f64, r * c)
                .prop_map(move |d| Tensor::from_vec(&[r, c], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn arithmetic_rounding_matches_grid_oracle(f in arb_format(), x in -1000.0..1000.0f64) {
            let got = f.round(x, Rounding::NearestEven, 0.0);
            prop_assert_eq!(got, oracle_round_nearest_even(&f, x));
        }

        #[test]
        fn stochastic_picks_a_neighbour(f in arb_format(), x in -1000.0..1000.0f64, u in 0.0..1.0f64) {
            let y = x.clamp(-f.max_value(), f.max_value());
            let q = f.round(x, Rounding::Stochastic, u);
            let mags: Vec<f64> = f.representable_values();
            let lo = mags.iter().copied().filter(|v| *v <= y).fold(f64::NEG_INFINITY, f64::max);
            let hi = mags.iter().copied().filter(|v| *v >= y).fold(f64::INFINITY, f64::min);
            prop_assert!(q == lo || q == hi, "{} not in [{}, {}]", q, lo, hi);
        }

        #[test]
        fn nearest_even_idempotent(x in arb_matrix(), f in arb_format(), g in arb_granularity()) {
            let spec = QuantSpec::new(f, g, Rounding::NearestEven);
            let once = fake_quantize(&x, &spec, &RngStream::new(0)).unwrap().tensor;
            let twice = fake_quantize(&once, &spec, &RngStream::new(0)).unwrap().tensor;
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn error_is_bounded_by_local_step(x in arb_matrix(), f in arb_format(), g in arb_granularity(), seed in any::<u64>()) {
            let (rows, cols) = x.matrix_dims();
            let scales = compute_scales(&x, g, &f).unwrap();
            for rounding in [Rounding::NearestEven, Rounding::Stochastic] {
                let spec = QuantSpec::new(f, g, rounding);
                let q = fake_quantize(&x, &spec, &RngStream::new(seed)).unwrap().tensor;
                for (gi, grp) in g.groups(rows, cols).iter().enumerate() {
                    let s = scales.data()[gi];
                    for r in grp.r0..grp.r1 {
                        for c in grp.c0..grp.c1 {
                            let v = x.get2(r, c);
                            let half = f.half_step_at(v * s) / s;
                            let bound = match rounding { Rounding::NearestEven => half, Rounding::Stochastic => 2.0 * half };
                            prop_assert!((q.get2(r, c) - v).abs() <= bound * (1.0 + 1e-12) + 1e-300);
                        }
                    }
                }
            }
        }

        #[test]
        fn monotone_within_group(x in arb_matrix(), f in arb_format(), g in arb_granularity()) {
            let (rows, cols) = x.matrix_dims();
            let spec = QuantSpec::new(f, g, Rounding::NearestEven);
            let q = fake_quantize(&x, &spec, &RngStream::new(0)).unwrap().tensor;
            for grp in g.groups(rows, cols) {
                let mut cells = Vec::new();
                for r in grp.r0..grp.r1 {
                    for c in grp.c0..grp.c1 {
                        cells.push((x.get2(r, c), q.get2(r, c)));
                    }
                }
                for a in &cells {
                    for b in &cells {
                        if a.0 <= b.0 {
                            prop_assert!(a.1 <= b.1);
                        }
                    }
                }
            }
        }

        #[test]
        fn spec_json_round_trip(f in arb_format(), g in arb_granularity(), st in any::<bool>()) {
            let spec = QuantSpec::new(f, g, if st { Rounding::Stochastic } else { Rounding::NearestEven });
            let json = serde_json::to_string(&spec).unwrap();
            let back: QuantSpec = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, spec);
        }
    }

    #[test]
    fn spec_json_layout() {
        let json = serde_json::to_string(&QuantSpec::fp4_grad()).unwrap();
        assert_eq!(json, r#"{"format":"E2M1","granularity":{"kind":"tilewise","nb":128},"rounding":"stochastic"}"#);
    }
}
