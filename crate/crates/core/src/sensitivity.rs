//! Token-level quantization sensitivity: quantize one token's K/V rows,
//! keep everything else in full precision, and measure how far the
//! attention output moves.

use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttentionBundle};
use crate::error::{Error, Result};
use crate::numerics::{cosine, mean_pool_rows, mse, Matrix};
use crate::par::Execution;
use crate::quantizers::{check_bits, quantize_rows, QuantKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub mse: f64,
    pub cosine_drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSensitivity {
    pub token_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    pub is_trigger: bool,
    pub delta_mse: f64,
    pub delta_cosine_drop: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub trigger_mean_mse: f64,
    pub other_mean_mse: f64,
    pub trigger_mean_cosine_drop: f64,
    pub other_mean_cosine_drop: f64,
}

impl Aggregates {
    pub fn mse_ratio(&self) -> f64 {
        self.trigger_mean_mse / self.other_mean_mse
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub bits: u32,
    pub kind: QuantKind,
    pub per_token: Vec<TokenSensitivity>,
    pub aggregates: Aggregates,
}

/// How a registered multi-token trigger span is probed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanMode {
    /// The whole span is quantized together; every sub-token reports the
    /// span's distortion.
    #[default]
    Unit,
    /// Each sub-token is probed on its own.
    PerSubToken,
}

/// Distortion when the K and V rows of `rows` are quantized (jointly) and
/// everything else, including Q and the attention weights, stays in full
/// precision.
pub fn probe_rows(
    bundle: &AttentionBundle,
    rows: &[usize],
    bits: u32,
    kind: QuantKind,
) -> Result<Delta> {
    check_bits(bits)?;
    let reference = attend(&bundle.q, &bundle.k, &bundle.v)?;
    probe_against(bundle, &reference, rows, bits, kind)
}

fn probe_against(
    bundle: &AttentionBundle,
    reference: &Matrix,
    rows: &[usize],
    bits: u32,
    kind: QuantKind,
) -> Result<Delta> {
    let k = quantize_rows(&bundle.k, rows, bits, kind)?;
    let v = quantize_rows(&bundle.v, rows, bits, kind)?;
    let y = attend(&bundle.q, &k, &v)?;
    let (pooled, pooled_ref) = (mean_pool_rows(&y), mean_pool_rows(reference));
    // identical outputs report an exact zero rather than 1 - cos rounding
    let cosine_drop = if pooled.data() == pooled_ref.data() {
        0.0
    } else {
        1.0 - cosine(&pooled, &pooled_ref)?
    };
    Ok(Delta {
        mse: mse(&y, reference)?,
        cosine_drop,
    })
}

pub fn probe_token(
    bundle: &AttentionBundle,
    token_index: usize,
    bits: u32,
    kind: QuantKind,
) -> Result<Delta> {
    if token_index >= bundle.num_tokens() {
        return Err(Error::IndexOutOfRange {
            index: token_index,
            len: bundle.num_tokens(),
        });
    }
    probe_rows(bundle, &[token_index], bits, kind)
}

pub fn probe_all(
    bundle: &AttentionBundle,
    bits: u32,
    kind: QuantKind,
) -> Result<SensitivityReport> {
    probe_all_with(
        bundle,
        bits,
        kind,
        SpanMode::default(),
        Execution::default(),
    )
}

pub fn probe_all_with(
    bundle: &AttentionBundle,
    bits: u32,
    kind: QuantKind,
    span_mode: SpanMode,
    exec: Execution,
) -> Result<SensitivityReport> {
    check_bits(bits)?;
    bundle.validate()?;
    let triggers = &bundle.trigger_indices;
    let others = bundle.other_indices();
    if triggers.is_empty() {
        return Err(Error::Empty("trigger index set"));
    }
    if others.is_empty() {
        return Err(Error::Empty("non-trigger index set"));
    }
    let reference = attend(&bundle.q, &bundle.k, &bundle.v)?;

    let unit_span = span_mode == SpanMode::Unit && triggers.len() > 1;
    let span_delta = if unit_span {
        Some(probe_against(bundle, &reference, triggers, bits, kind)?)
    } else {
        None
    };

    let deltas: Vec<Result<Delta>> = exec.map_range(bundle.num_tokens(), |i| match span_delta {
        Some(d) if triggers.binary_search(&i).is_ok() => Ok(d),
        _ => probe_against(bundle, &reference, &[i], bits, kind),
    });

    let mut per_token = Vec::with_capacity(deltas.len());
    for (i, d) in deltas.into_iter().enumerate() {
        let d = d?;
        per_token.push(TokenSensitivity {
            token_index: i,
            token: bundle.tokens.as_ref().map(|t| t[i].clone()),
            is_trigger: triggers.binary_search(&i).is_ok(),
            delta_mse: d.mse,
            delta_cosine_drop: d.cosine_drop,
        });
    }

    let mean = |idx: &[usize], f: fn(&TokenSensitivity) -> f64| {
        idx.iter().map(|&i| f(&per_token[i])).sum::<f64>() / idx.len() as f64
    };
    let aggregates = Aggregates {
        trigger_mean_mse: mean(triggers, |t| t.delta_mse),
        other_mean_mse: mean(&others, |t| t.delta_mse),
        trigger_mean_cosine_drop: mean(triggers, |t| t.delta_cosine_drop),
        other_mean_cosine_drop: mean(&others, |t| t.delta_cosine_drop),
    };
    Ok(SensitivityReport {
        bits,
        kind,
        per_token,
        aggregates,
    })
}
