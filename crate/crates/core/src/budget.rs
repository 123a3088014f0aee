//! Bit-operation and memory accounting, and memory-constrained serving plans.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizers::{check_bits, QuantSpec, IDENTITY_BITS};
use crate::registry::CheckpointRecord;

/// 32/32 bit-operations of one Stable Diffusion v1.5 generation.
pub const SD15_BOPS_32: f64 = 893e12;
/// 32/32 bit-operations of one SDXL-Turbo generation.
pub const SDXL_TURBO_BOPS_32: f64 = 6930e12;
/// Full-precision size of an SD1.5-like checkpoint.
pub const DEFAULT_CHECKPOINT_BYTES: u64 = 4 << 30;

/// FLOPs implied by a full-precision bit-operation count.
pub fn flops_from_bops32(bops32: f64) -> f64 {
    bops32 / f64::from(IDENTITY_BITS * IDENTITY_BITS)
}

pub fn bops(flops: f64, w_bits: u32, a_bits: u32) -> Result<f64> {
    if flops.is_nan() || flops <= 0.0 || flops.is_infinite() {
        return Err(Error::NonPositiveFlops(flops));
    }
    check_bits(w_bits)?;
    check_bits(a_bits)?;
    Ok(flops * f64::from(w_bits) * f64::from(a_bits))
}

pub fn bops_reduction_factor(w_bits: u32, a_bits: u32) -> f64 {
    f64::from(IDENTITY_BITS * IDENTITY_BITS) / f64::from(w_bits * a_bits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Memory {
    pub fp32: u64,
    pub quant: u64,
}

impl Memory {
    /// fp32 / quant, or 1 when there is nothing to store.
    pub fn factor(&self) -> f64 {
        if self.quant == 0 {
            1.0
        } else {
            self.fp32 as f64 / self.quant as f64
        }
    }
}

pub fn memory(weight_bytes_fp32: u64, w_bits: u32, trigger_overhead_bytes: u64) -> Result<Memory> {
    check_bits(w_bits)?;
    let scaled =
        (u128::from(weight_bytes_fp32) * u128::from(w_bits)).div_ceil(u128::from(IDENTITY_BITS));
    Ok(Memory {
        fp32: weight_bytes_fp32,
        quant: scaled as u64 + trigger_overhead_bytes,
    })
}

/// Full-precision bytes kept for trigger rows across cross-attention
/// layers; zero when the layer count is unknown.
pub fn trigger_overhead_bytes(trigger_rows: usize, dim: usize, layers: Option<usize>) -> u64 {
    layers.map_or(0, |l| (trigger_rows * dim * 4 * l) as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub flops: f64,
    pub w_bits: u32,
    pub a_bits: u32,
    pub bops: f64,
    pub bops_reduction_factor: f64,
    pub memory_bytes_fp32: u64,
    pub memory_bytes_quant: u64,
    pub memory_reduction_factor: f64,
}

pub fn budget_report(
    flops: f64,
    w_bits: u32,
    a_bits: u32,
    weight_bytes_fp32: u64,
    overhead: u64,
) -> Result<BudgetReport> {
    let bops = bops(flops, w_bits, a_bits)?;
    let mem = memory(weight_bytes_fp32, w_bits, overhead)?;
    Ok(BudgetReport {
        flops,
        w_bits,
        a_bits,
        bops,
        bops_reduction_factor: bops_reduction_factor(w_bits, a_bits),
        memory_bytes_fp32: mem.fp32,
        memory_bytes_quant: mem.quant,
        memory_reduction_factor: mem.factor(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServingItem {
    pub id: String,
    pub weight_bytes: u64,
    #[serde(default)]
    pub trigger_overhead_bytes: u64,
}

impl From<&CheckpointRecord> for ServingItem {
    fn from(r: &CheckpointRecord) -> Self {
        ServingItem {
            id: r.id.clone(),
            weight_bytes: r.weight_bytes,
            trigger_overhead_bytes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub id: String,
    pub preset: QuantSpec,
    pub memory_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ServingPlan {
    Feasible {
        assignments: Vec<Assignment>,
        total_bytes: u64,
        budget_bytes: u64,
    },
    Infeasible {
        /// Every record at the lowest preset.
        assignments: Vec<Assignment>,
        total_bytes: u64,
        budget_bytes: u64,
        shortfall_bytes: u64,
    },
}

impl ServingPlan {
    pub fn is_feasible(&self) -> bool {
        matches!(self, ServingPlan::Feasible { .. })
    }

    pub fn assignments(&self) -> &[Assignment] {
        match self {
            ServingPlan::Feasible { assignments, .. }
            | ServingPlan::Infeasible { assignments, .. } => assignments,
        }
    }
}

/// Greedy demotion: start everyone at `presets[0]`; while over budget,
/// move the record using the most memory (ties by id) one preset down.
///
/// The demotion sequence does not depend on the budget, so a larger
/// budget stops at a prefix of it and never demotes more.
pub fn plan_serving(
    items: &[ServingItem],
    budget_bytes: u64,
    presets: &[QuantSpec],
) -> Result<ServingPlan> {
    if items.is_empty() {
        return Err(Error::Empty("serving item list"));
    }
    if presets.is_empty() {
        return Err(Error::Empty("preset list"));
    }
    for p in presets {
        p.validate()?;
    }
    let mut seen = std::collections::BTreeSet::new();
    for item in items {
        if !seen.insert(item.id.as_str()) {
            return Err(Error::DuplicateId(item.id.clone()));
        }
    }

    let cost = |item: &ServingItem, level: usize| -> Result<u64> {
        Ok(memory(
            item.weight_bytes,
            presets[level].weight_bits,
            item.trigger_overhead_bytes,
        )?
        .quant)
    };
    let mut levels = vec![0usize; items.len()];
    let mut costs: Vec<u64> = items.iter().map(|i| cost(i, 0)).collect::<Result<_>>()?;
    let mut total: u64 = costs.iter().sum();

    while total > budget_bytes {
        let pick = (0..items.len())
            .filter(|&i| levels[i] + 1 < presets.len())
            .max_by(|&a, &b| {
                costs[a]
                    .cmp(&costs[b])
                    .then_with(|| items[b].id.cmp(&items[a].id))
            });
        let Some(i) = pick else { break };
        levels[i] += 1;
        let next = cost(&items[i], levels[i])?;
        total = total - costs[i] + next;
        costs[i] = next;
    }

    let assignments = items
        .iter()
        .zip(&levels)
        .zip(&costs)
        .map(|((item, &level), &memory_bytes)| Assignment {
            id: item.id.clone(),
            preset: presets[level],
            memory_bytes,
        })
        .collect();
    Ok(if total <= budget_bytes {
        ServingPlan::Feasible {
            assignments,
            total_bytes: total,
            budget_bytes,
        }
    } else {
        ServingPlan::Infeasible {
            assignments,
            total_bytes: total,
            budget_bytes,
            shortfall_bytes: total - budget_bytes,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: f64 = 1e12;
    const GIB: u64 = 1 << 30;

    #[test]
    fn table_one_bops() {
        let sd = flops_from_bops32(SD15_BOPS_32);
        let xl = flops_from_bops32(SDXL_TURBO_BOPS_32);
        for (flops, w, a, printed) in [
            (sd, 8, 8, 56.0),
            (sd, 8, 4, 28.0),
            (xl, 8, 8, 433.0),
            (xl, 8, 4, 216.0),
        ] {
            let b = bops(flops, w, a).unwrap() / T;
            assert!((b - printed).abs() <= 1.0, "{w}/{a}: {b}");
        }
        assert!((bops(sd, 8, 8).unwrap() / T - 55.8125).abs() < 1e-9);
        assert!((bops(xl, 8, 4).unwrap() / T - 216.5625).abs() < 1e-9);
    }

    #[test]
    fn reduction_identities() {
        assert_eq!(bops_reduction_factor(8, 8), 16.0);
        assert_eq!(bops_reduction_factor(8, 4), 32.0);
        assert_eq!(bops_reduction_factor(32, 32), 1.0);
    }

    #[test]
    fn bops_errors() {
        assert!(matches!(bops(0.0, 8, 8), Err(Error::NonPositiveFlops(_))));
        assert!(matches!(bops(-1.0, 8, 8), Err(Error::NonPositiveFlops(_))));
        assert!(matches!(bops(1.0, 1, 8), Err(Error::InvalidBits(1))));
        assert!(matches!(bops(1.0, 8, 33), Err(Error::InvalidBits(33))));
    }

    #[test]
    fn memory_examples() {
        let m = memory(4 * GIB, 8, 0).unwrap();
        assert_eq!(m.quant, GIB);
        assert_eq!(m.factor(), 4.0);
        assert_eq!(memory(4 * GIB, 32, 0).unwrap().factor(), 1.0);
        assert_eq!(memory(4 * GIB, 4, 0).unwrap().factor(), 8.0);
        assert_eq!(memory(3, 8, 0).unwrap().quant, 1, "rounds up");
        assert_eq!(memory(0, 8, 0).unwrap().factor(), 1.0);
        assert_eq!(memory(32, 8, 10).unwrap().quant, 18);
        assert_eq!(trigger_overhead_bytes(3, 768, Some(16)), 3 * 768 * 4 * 16);
        assert_eq!(trigger_overhead_bytes(3, 768, None), 0);
    }

    #[test]
    fn report_fields() {
        let r = budget_report(flops_from_bops32(SD15_BOPS_32), 8, 4, 4 * GIB, 0).unwrap();
        assert_eq!(r.bops_reduction_factor, 32.0);
        assert_eq!(r.memory_reduction_factor, 4.0);
        assert_eq!(r.bops, r.flops * 32.0);
    }

    fn item(id: &str, bytes: u64) -> ServingItem {
        ServingItem {
            id: id.into(),
            weight_bytes: bytes,
            trigger_overhead_bytes: 0,
        }
    }

    fn presets(names: &[&str]) -> Vec<QuantSpec> {
        names.iter().map(|n| n.parse().unwrap()).collect()
    }

    #[test]
    fn everyone_fits_at_the_top() {
        let p = plan_serving(
            &[item("a", 4 * GIB), item("b", 4 * GIB)],
            2 * GIB,
            &presets(&["W8A8", "W4A4"]),
        )
        .unwrap();
        assert!(p.is_feasible());
        assert!(p.assignments().iter().all(|a| a.preset.label() == "W8A8"));
    }

    #[test]
    fn single_record_demoted_to_w4() {
        let p = plan_serving(
            &[item("a", 4 * GIB)],
            9 * GIB / 10,
            &presets(&["W8A8", "W4A4"]),
        )
        .unwrap();
        assert!(p.is_feasible());
        assert_eq!(p.assignments()[0].preset.label(), "W4A4");
        assert_eq!(p.assignments()[0].memory_bytes, GIB / 2);
    }

    #[test]
    fn identical_records_demote_lowest_id() {
        let p = plan_serving(
            &[item("b", 4 * GIB), item("a", 4 * GIB)],
            GIB + GIB / 2,
            &presets(&["W8A8", "W4A4"]),
        )
        .unwrap();
        let labels: Vec<(String, String)> = p
            .assignments()
            .iter()
            .map(|a| (a.id.clone(), a.preset.label()))
            .collect();
        assert_eq!(
            labels,
            vec![("b".into(), "W8A8".into()), ("a".into(), "W4A4".into())]
        );
    }

    #[test]
    fn infeasible_reports_shortfall() {
        let p = plan_serving(&[item("a", 4 * GIB)], GIB / 4, &presets(&["W8A8", "W4A4"])).unwrap();
        match p {
            ServingPlan::Infeasible {
                shortfall_bytes, ..
            } => assert_eq!(shortfall_bytes, GIB / 4),
            other => panic!("{other:?}"),
        }
        assert!(plan_serving(&[], GIB, &presets(&["W8A8"])).is_err());
    }
}
