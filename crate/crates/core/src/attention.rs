//! Single-head cross-attention: full-precision reference and the
//! trigger-aware mixed-precision forward.
//!
//! Trigger positions are protected in three places: the rows of K and V and
//! the columns of the attention matrix. Everything else goes through the
//! activation quantizer, calibrated per tensor over the elements it actually
//! quantizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_transposed, softmax_rows, Matrix};
use crate::quantizers::{check_bits, quantize_matrix, quantize_where, QuantKind, QuantSpec};

/// Learned projections that derive Q, K and V from token embeddings.
///
/// `queries` holds the image-side features; when absent the text
/// embeddings are projected for Q as well.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projections {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub embeddings: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<Matrix>,
}

impl Projections {
    fn project(
        &self,
        w_q: &Matrix,
        w_k: &Matrix,
        w_v: &Matrix,
    ) -> Result<(Matrix, Matrix, Matrix)> {
        let q_in = self.queries.as_ref().unwrap_or(&self.embeddings);
        Ok((
            matmul(q_in, w_q)?,
            matmul(&self.embeddings, w_k)?,
            matmul(&self.embeddings, w_v)?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBundle")]
pub struct AttentionBundle {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub trigger_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projections: Option<Projections>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBundle {
    q: Option<Matrix>,
    k: Option<Matrix>,
    v: Option<Matrix>,
    #[serde(default)]
    trigger_indices: Vec<usize>,
    #[serde(default)]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    projections: Option<Projections>,
}

impl TryFrom<RawBundle> for AttentionBundle {
    type Error = Error;

    fn try_from(raw: RawBundle) -> Result<Self> {
        let mut bundle = match (raw.q, raw.k, raw.v, raw.projections) {
            (Some(q), Some(k), Some(v), projections) => AttentionBundle {
                q,
                k,
                v,
                trigger_indices: raw.trigger_indices,
                tokens: raw.tokens,
                projections,
            },
            (None, None, None, Some(p)) => {
                AttentionBundle::from_projections(p, raw.trigger_indices)?
            }
            _ => {
                return Err(Error::InvalidBundle(
                    "provide all of q, k, v or a projections block".into(),
                ))
            }
        };
        bundle.trigger_indices.sort_unstable();
        bundle.validate()?;
        Ok(bundle)
    }
}

impl AttentionBundle {
    pub fn new(q: Matrix, k: Matrix, v: Matrix, trigger_indices: Vec<usize>) -> Result<Self> {
        let mut bundle = AttentionBundle {
            q,
            k,
            v,
            trigger_indices,
            tokens: None,
            projections: None,
        };
        bundle.trigger_indices.sort_unstable();
        bundle.validate()?;
        Ok(bundle)
    }

    /// Derives full-precision Q, K, V from the projections.
    pub fn from_projections(projections: Projections, trigger_indices: Vec<usize>) -> Result<Self> {
        let (q, k, v) =
            projections.project(&projections.w_q, &projections.w_k, &projections.w_v)?;
        let mut bundle = AttentionBundle::new(q, k, v, trigger_indices)?;
        bundle.projections = Some(projections);
        Ok(bundle)
    }

    pub fn with_tokens(mut self, tokens: Vec<String>) -> Result<Self> {
        self.tokens = Some(tokens);
        self.validate()?;
        Ok(self)
    }

    pub fn num_queries(&self) -> usize {
        self.q.rows()
    }

    pub fn num_tokens(&self) -> usize {
        self.k.rows()
    }

    pub fn key_dim(&self) -> usize {
        self.k.cols()
    }

    /// Indices not in the trigger set, ascending.
    pub fn other_indices(&self) -> Vec<usize> {
        (0..self.num_tokens())
            .filter(|i| self.trigger_indices.binary_search(i).is_err())
            .collect()
    }

    pub fn is_contiguous_trigger(&self) -> bool {
        self.trigger_indices.windows(2).all(|w| w[1] == w[0] + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.k.rows();
        if self.v.rows() != t {
            return Err(Error::shape(
                "bundle",
                format!("k has {t} rows, v has {}", self.v.rows()),
            ));
        }
        if self.q.cols() != self.k.cols() {
            return Err(Error::shape(
                "bundle",
                format!("q has {} columns, k has {}", self.q.cols(), self.k.cols()),
            ));
        }
        if let Some(&bad) = self.trigger_indices.iter().find(|&&i| i >= t) {
            return Err(Error::IndexOutOfRange { index: bad, len: t });
        }
        if self.trigger_indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidBundle("duplicate trigger index".into()));
        }
        if let Some(tokens) = &self.tokens {
            if tokens.len() != t {
                return Err(Error::InvalidBundle(format!(
                    "{} token strings for {t} key rows",
                    tokens.len()
                )));
            }
        }
        Ok(())
    }
}

/// Binary trigger masks for a single head and batch: `m_kv` broadcasts over
/// channels, `m_a` over query rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerMasks {
    pub m_kv: Vec<u8>,
    pub m_a: Vec<u8>,
}

impl TriggerMasks {
    pub fn is_trigger(&self, token: usize) -> bool {
        self.m_kv[token] == 1
    }

    pub fn any(&self) -> bool {
        self.m_kv.contains(&1)
    }
}

pub fn build_masks(num_tokens: usize, trigger_indices: &[usize]) -> Result<TriggerMasks> {
    let mut mask = vec![0u8; num_tokens];
    for &i in trigger_indices {
        if i >= num_tokens {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: num_tokens,
            });
        }
        mask[i] = 1;
    }
    Ok(TriggerMasks {
        m_kv: mask.clone(),
        m_a: mask,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionOutput {
    pub y: Matrix,
    pub a_full: Matrix,
    pub a_hat: Matrix,
    pub row_sum_deviation: f64,
}

fn row_sum_deviation(a: &Matrix) -> f64 {
    a.row_iter()
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

pub(crate) fn attention_weights(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    let logits = matmul_transposed(q, k)?;
    let inv_sqrt_d = 1.0 / (k.cols() as f64).sqrt();
    Ok(softmax_rows(&logits.scale(inv_sqrt_d)))
}

/// Plain attention over explicit Q, K, V.
pub fn attend(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    let a = attention_weights(q, k)?;
    matmul(&a, v)
}

pub fn forward_reference(bundle: &AttentionBundle) -> Result<AttentionOutput> {
    bundle.validate()?;
    let a = attention_weights(&bundle.q, &bundle.k)?;
    let y = matmul(&a, &bundle.v)?;
    Ok(AttentionOutput {
        y,
        row_sum_deviation: row_sum_deviation(&a),
        a_hat: a.clone(),
        a_full: a,
    })
}

/// Intermediate tensors of the masked forward, exposed for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct TaqTrace {
    pub masks: TriggerMasks,
    pub q_tilde: Matrix,
    pub k_tilde: Matrix,
    pub v_tilde: Matrix,
    pub output: AttentionOutput,
}

pub fn forward_taq(bundle: &AttentionBundle, spec: &QuantSpec) -> Result<AttentionOutput> {
    forward_taq_traced(bundle, spec).map(|t| t.output)
}

pub fn forward_taq_traced(bundle: &AttentionBundle, spec: &QuantSpec) -> Result<TaqTrace> {
    bundle.validate()?;
    taq_core(
        &bundle.q,
        &bundle.k,
        &bundle.v,
        &bundle.trigger_indices,
        spec,
    )
}

fn taq_core(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    triggers: &[usize],
    spec: &QuantSpec,
) -> Result<TaqTrace> {
    let bits = check_bits(spec.activation_bits)?;
    let kind: QuantKind = spec.kind;
    let protected: &[usize] = if spec.separate_triggers {
        triggers
    } else {
        &[]
    };
    let masks = build_masks(k.rows(), protected)?;

    let k_tilde = quantize_where(k, bits, kind, |r, _| !masks.is_trigger(r))?;
    let v_tilde = quantize_where(v, bits, kind, |r, _| !masks.is_trigger(r))?;
    let q_tilde = quantize_matrix(q, bits, kind)?;

    let a = attention_weights(&q_tilde, &k_tilde)?;
    let a_hat = quantize_where(&a, bits, kind, |_, c| masks.m_a[c] == 0)?;
    let y = matmul(&a_hat, &v_tilde)?;

    Ok(TaqTrace {
        masks,
        q_tilde,
        k_tilde,
        v_tilde,
        output: AttentionOutput {
            y,
            row_sum_deviation: row_sum_deviation(&a_hat),
            a_full: a,
            a_hat,
        },
    })
}

/// Quantizes the projection weights (affine, per tensor) at
/// `spec.weight_bits`, derives Q, K, V from them, then runs the masked
/// forward.
pub fn forward_taq_projected(
    bundle: &AttentionBundle,
    spec: &QuantSpec,
) -> Result<AttentionOutput> {
    let p = bundle
        .projections
        .as_ref()
        .ok_or(Error::MissingProjections)?;
    let wb = check_bits(spec.weight_bits)?;
    let w_q = quantize_matrix(&p.w_q, wb, QuantKind::Linear)?;
    let w_k = quantize_matrix(&p.w_k, wb, QuantKind::Linear)?;
    let w_v = quantize_matrix(&p.w_v, wb, QuantKind::Linear)?;
    let (q, k, v) = p.project(&w_q, &w_k, &w_v)?;
    if k.rows() != bundle.num_tokens() {
        return Err(Error::shape(
            "forward_taq_projected",
            "projected K row count differs from bundle",
        ));
    }
    taq_core(&q, &k, &v, &bundle.trigger_indices, spec).map(|t| t.output)
}

/// Full-precision forward driven by the projections.
pub fn forward_reference_projected(bundle: &AttentionBundle) -> Result<AttentionOutput> {
    let p = bundle
        .projections
        .as_ref()
        .ok_or(Error::MissingProjections)?;
    let derived = AttentionBundle::from_projections(p.clone(), bundle.trigger_indices.clone())?;
    forward_reference(&derived)
}
