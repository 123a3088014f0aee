//! Fake-quantization simulators: quantize then dequantize in `f64`.
//!
//! Bit-width 32 is the identity for every quantizer. Rounding is
//! round-half-to-even throughout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MIN_BITS: u32 = 2;
pub const IDENTITY_BITS: u32 = 32;

pub fn check_bits(bits: u32) -> Result<u32> {
    if (MIN_BITS..=IDENTITY_BITS).contains(&bits) {
        Ok(bits)
    } else {
        Err(Error::InvalidBits(bits))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantKind {
    #[default]
    Linear,
    Logarithmic,
}

impl fmt::Display for QuantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantKind::Linear => "linear",
            QuantKind::Logarithmic => "logarithmic",
        })
    }
}

impl FromStr for QuantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" | "affine" => Ok(QuantKind::Linear),
            "logarithmic" | "log" => Ok(QuantKind::Logarithmic),
            _ => Err(Error::InvalidPreset(s.to_string())),
        }
    }
}

/// Weight/activation bit-widths plus the trigger-separation toggle.
///
/// Serialises as `{"kind", "w_bits", "a_bits", "separate_triggers"}`; also
/// deserialises from a preset string such as `"W8A4"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct QuantSpec {
    pub kind: QuantKind,
    #[serde(rename = "w_bits")]
    pub weight_bits: u32,
    #[serde(rename = "a_bits")]
    pub activation_bits: u32,
    pub separate_triggers: bool,
}

impl QuantSpec {
    pub fn new(
        kind: QuantKind,
        weight_bits: u32,
        activation_bits: u32,
        separate_triggers: bool,
    ) -> Result<Self> {
        Ok(QuantSpec {
            kind,
            weight_bits: check_bits(weight_bits)?,
            activation_bits: check_bits(activation_bits)?,
            separate_triggers,
        })
    }

    /// Linear quantizer with trigger separation enabled.
    pub fn preset(weight_bits: u32, activation_bits: u32) -> Result<Self> {
        QuantSpec::new(QuantKind::Linear, weight_bits, activation_bits, true)
    }

    pub fn full_precision() -> Self {
        QuantSpec {
            kind: QuantKind::Linear,
            weight_bits: IDENTITY_BITS,
            activation_bits: IDENTITY_BITS,
            separate_triggers: true,
        }
    }

    pub fn label(&self) -> String {
        format!("W{}A{}", self.weight_bits, self.activation_bits)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.weight_bits)?;
        check_bits(self.activation_bits)?;
        Ok(())
    }
}

impl Default for QuantSpec {
    fn default() -> Self {
        QuantSpec {
            kind: QuantKind::Linear,
            weight_bits: 8,
            activation_bits: 8,
            separate_triggers: true,
        }
    }
}

impl FromStr for QuantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidPreset(s.to_string());
        let upper = s.trim().to_ascii_uppercase();
        let rest = upper.strip_prefix('W').ok_or_else(bad)?;
        let (w, a) = rest.split_once('A').ok_or_else(bad)?;
        let w: u32 = w.parse().map_err(|_| bad())?;
        let a: u32 = a.parse().map_err(|_| bad())?;
        QuantSpec::preset(w, a)
    }
}

impl<'de> Deserialize<'de> for QuantSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Fields {
            #[serde(default)]
            kind: QuantKind,
            w_bits: u32,
            a_bits: u32,
            #[serde(default = "yes")]
            separate_triggers: bool,
        }
        fn yes() -> bool {
            true
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Preset(String),
            Fields(Fields),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Preset(s) => s.parse().map_err(serde::de::Error::custom),
            Repr::Fields(f) => QuantSpec::new(f.kind, f.w_bits, f.a_bits, f.separate_triggers)
                .map_err(serde::de::Error::custom),
        }
    }
}

/// Min-max affine parameters.
///
/// Reconstruction is `min + q * scale` on the grid anchored at the
/// calibrated minimum; `zero_point` is the integer code closest to real 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i64,
    pub bits: u32,
    pub min: f64,
    pub max: f64,
}

impl QuantParams {
    pub fn levels(&self) -> i64 {
        if self.bits >= IDENTITY_BITS {
            i64::from(u32::MAX)
        } else {
            (1i64 << self.bits) - 1
        }
    }

    pub fn is_identity(&self) -> bool {
        self.bits >= IDENTITY_BITS
    }

    pub fn quantize(&self, x: f64) -> i64 {
        let top = self.levels();
        let q = ((x - self.min) / self.scale).round_ties_even();
        q.clamp(0.0, top as f64) as i64
    }

    pub fn dequantize(&self, q: i64) -> f64 {
        if q >= self.levels() {
            self.max
        } else {
            self.min + q as f64 * self.scale
        }
    }

    pub fn round_trip(&self, x: f64) -> f64 {
        if self.is_identity() {
            x
        } else {
            self.dequantize(self.quantize(x))
        }
    }
}

/// Calibrates asymmetric min-max parameters over `values`.
///
/// A constant input `c` gets `scale = |c|` (or 1 for `c == 0`) so it
/// round-trips exactly.
pub fn calibrate_affine(values: &[f64], bits: u32) -> Result<QuantParams> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(Error::Empty("calibration input"));
    }
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    if bits >= IDENTITY_BITS {
        return Ok(QuantParams {
            scale: 1.0,
            zero_point: 0,
            bits,
            min,
            max,
        });
    }
    let levels = ((1u64 << bits) - 1) as f64;
    if max == min {
        let scale = if min == 0.0 { 1.0 } else { min.abs() };
        // grid anchored one step below a positive constant, at it otherwise
        let anchor = if min > 0.0 { 0.0 } else { min };
        let zero_point = if min > 0.0 {
            0
        } else {
            (-anchor / scale).round_ties_even() as i64
        };
        return Ok(QuantParams {
            scale,
            zero_point,
            bits,
            min: anchor,
            max: anchor + levels * scale,
        });
    }
    let scale = (max - min) / levels;
    let zero_point = (-min / scale).round_ties_even().clamp(0.0, levels) as i64;
    Ok(QuantParams {
        scale,
        zero_point,
        bits,
        min,
        max,
    })
}

pub fn quantize_dequantize_affine(values: &[f64], params: &QuantParams) -> Vec<f64> {
    values.iter().map(|&x| params.round_trip(x)).collect()
}

/// Exponent window of the power-of-two quantizer for a given bit-width.
///
/// One code is reserved for zero and one bit for the sign, leaving
/// `2^(bits-1) - 1` exponent levels ending at `round(log2(max|x|))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogParams {
    pub bits: u32,
    pub e_max: i64,
    pub e_min: i64,
}

pub fn calibrate_log(values: &[f64], bits: u32) -> Result<Option<LogParams>> {
    check_bits(bits)?;
    let max_abs = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max_abs == 0.0 || bits >= IDENTITY_BITS {
        return Ok(None);
    }
    let e_max = max_abs.log2().round_ties_even() as i64;
    let span = (1i64 << (bits - 1)) - 2;
    Ok(Some(LogParams {
        bits,
        e_max,
        e_min: e_max - span,
    }))
}

impl LogParams {
    pub fn round_trip(&self, x: f64) -> f64 {
        if x == 0.0 {
            return 0.0;
        }
        let e = (x.abs().log2().round_ties_even() as i64).clamp(self.e_min, self.e_max);
        x.signum() * (e as f64).exp2()
    }
}

/// Power-of-two quantizer calibrated over `values` itself.
pub fn quantize_dequantize_log(values: &[f64], bits: u32) -> Result<Vec<f64>> {
    if bits >= IDENTITY_BITS {
        check_bits(bits)?;
        return Ok(values.to_vec());
    }
    Ok(match calibrate_log(values, bits)? {
        None => values.iter().map(|_| 0.0).collect(),
        Some(p) => values.iter().map(|&x| p.round_trip(x)).collect(),
    })
}

/// Round-trips `values` with the given quantizer kind, calibrated over the
/// same values. Empty input is returned unchanged.
pub fn quantize_values(values: &[f64], bits: u32, kind: QuantKind) -> Result<Vec<f64>> {
    check_bits(bits)?;
    if values.is_empty() || bits >= IDENTITY_BITS {
        return Ok(values.to_vec());
    }
    match kind {
        QuantKind::Linear => {
            let params = calibrate_affine(values, bits)?;
            Ok(quantize_dequantize_affine(values, &params))
        }
        QuantKind::Logarithmic => quantize_dequantize_log(values, bits),
    }
}

/// Per-tensor round trip of a whole matrix.
pub fn quantize_matrix(m: &Matrix, bits: u32, kind: QuantKind) -> Result<Matrix> {
    let data = quantize_values(m.data(), bits, kind)?;
    Ok(Matrix::from_parts_unchecked(m.rows(), m.cols(), data))
}

/// Round-trips only the elements whose `selected(row, col)` is true,
/// calibrating over exactly those elements. Everything else is copied
/// bit-for-bit.
pub(crate) fn quantize_where(
    m: &Matrix,
    bits: u32,
    kind: QuantKind,
    selected: impl Fn(usize, usize) -> bool,
) -> Result<Matrix> {
    check_bits(bits)?;
    let cols = m.cols();
    let positions: Vec<usize> = (0..m.data().len())
        .filter(|&p| selected(p / cols, p % cols))
        .collect();
    let subset: Vec<f64> = positions.iter().map(|&p| m.data()[p]).collect();
    let quantized = quantize_values(&subset, bits, kind)?;
    let mut out = m.clone();
    let data = out.data_mut();
    for (&p, q) in positions.iter().zip(quantized) {
        data[p] = q;
    }
    Ok(out)
}

/// Quantizes the listed rows jointly, calibrated from those rows alone.
pub fn quantize_rows(
    values: &Matrix,
    row_indices: &[usize],
    bits: u32,
    kind: QuantKind,
) -> Result<Matrix> {
    let mut mask = vec![false; values.rows()];
    for &i in row_indices {
        if i >= values.rows() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: values.rows(),
            });
        }
        mask[i] = true;
    }
    quantize_where(values, bits, kind, |r, _| mask[r])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_scale_for_symmetric_range() {
        let p = calibrate_affine(&[-1.0, 0.25, 1.0], 8).unwrap();
        assert_eq!(p.scale, 2.0 / 255.0);
        assert_eq!(p.zero_point, 128);
    }

    #[test]
    fn affine_hand_value_at_four_bits() {
        let p = calibrate_affine(&[-1.0, 1.0], 4).unwrap();
        assert_eq!(p.quantize(0.5), 11);
        let y = p.round_trip(0.5);
        assert!((y - 7.0 / 15.0).abs() < 1e-15, "{y}");
    }

    #[test]
    fn affine_endpoints_exact() {
        let values = [-0.37, 0.1, 2.9];
        for bits in [2, 4, 8, 16] {
            let p = calibrate_affine(&values, bits).unwrap();
            assert_eq!(p.round_trip(-0.37), -0.37);
            assert_eq!(p.round_trip(2.9), 2.9);
        }
    }

    #[test]
    fn constant_round_trips() {
        for c in [5.0, -3.25, 0.0, 1e-7] {
            let v = [c, c, c];
            for bits in [2, 4, 8] {
                let p = calibrate_affine(&v, bits).unwrap();
                assert_eq!(quantize_dequantize_affine(&v, &p), v.to_vec());
                assert!(p.scale > 0.0);
            }
        }
    }

    #[test]
    fn thirty_two_bits_is_identity() {
        let v = [0.1, -7.3, 1e-9, 123.456];
        let p = calibrate_affine(&v, 32).unwrap();
        assert_eq!(quantize_dequantize_affine(&v, &p), v.to_vec());
        assert_eq!(quantize_dequantize_log(&v, 32).unwrap(), v.to_vec());
    }

    #[test]
    fn empty_and_bad_bits() {
        assert!(matches!(calibrate_affine(&[], 8), Err(Error::Empty(_))));
        assert!(matches!(
            calibrate_affine(&[1.0], 1),
            Err(Error::InvalidBits(1))
        ));
        assert!(matches!(
            calibrate_affine(&[1.0], 33),
            Err(Error::InvalidBits(33))
        ));
    }

    #[test]
    fn log_examples() {
        let v = [3.0, 4.0, -0.5, 0.0];
        let out = quantize_dequantize_log(&v, 4).unwrap();
        assert_eq!(out, vec![4.0, 4.0, -0.5, 0.0]);
        let pow = [8.0, 0.25, -2.0, 1.0];
        assert_eq!(quantize_dequantize_log(&pow, 8).unwrap(), pow.to_vec());
        assert_eq!(
            quantize_dequantize_log(&[0.0, 0.0], 4).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn log_clamps_to_exponent_window() {
        // bits=3: window of 2^(3-1)-1 = 3 exponents ending at e_max = 3
        let v = [8.0, 1.0, 0.01];
        let out = quantize_dequantize_log(&v, 3).unwrap();
        assert_eq!(out, vec![8.0, 2.0, 2.0]);
    }

    #[test]
    fn quantize_rows_examples() {
        let m = Matrix::from_rows(&[vec![0.1, 0.7], vec![-1.3, 0.4], vec![2.2, -0.9]]).unwrap();
        assert_eq!(quantize_rows(&m, &[], 4, QuantKind::Linear).unwrap(), m);
        assert_eq!(
            quantize_rows(&m, &[0, 1, 2], 4, QuantKind::Linear).unwrap(),
            quantize_matrix(&m, 4, QuantKind::Linear).unwrap()
        );
        let q = quantize_rows(&m, &[1], 2, QuantKind::Linear).unwrap();
        assert_eq!(q.row(0), m.row(0));
        assert_eq!(q.row(2), m.row(2));
        assert!(matches!(
            quantize_rows(&m, &[3], 4, QuantKind::Linear),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn spec_json_and_presets() {
        let s: QuantSpec = "W8A8".parse().unwrap();
        assert_eq!((s.weight_bits, s.activation_bits), (8, 8));
        let json = serde_json::to_value(s).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"kind": "linear", "w_bits": 8, "a_bits": 8, "separate_triggers": true})
        );
        let back: QuantSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, s);
        let from_str: QuantSpec = serde_json::from_str("\"w8a4\"").unwrap();
        assert_eq!(from_str.activation_bits, 4);
        let log: QuantSpec = serde_json::from_str(
            r#"{"kind":"logarithmic","w_bits":8,"a_bits":4,"separate_triggers":false}"#,
        )
        .unwrap();
        assert_eq!(log.kind, QuantKind::Logarithmic);
        assert!(!log.separate_triggers);
        assert!("W1A8".parse::<QuantSpec>().is_err());
        assert!("8/8".parse::<QuantSpec>().is_err());
        assert!(serde_json::from_str::<QuantSpec>(r#"{"w_bits":64,"a_bits":8}"#).is_err());
    }
}
