//! Confidence-stratified train/val/test partitioning.
//!
//! Split sizes follow the largest-remainder (Hamilton) apportionment of the
//! set size by the ratios. The high-confidence stratum is then apportioned
//! across those split sizes by the same rule, so every split holds its
//! proportional share of high- and low-confidence members to within one
//! sample. Which member lands where is decided by a counter-based key of
//! `(seed, sample_id)`, independent of enumeration order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{canonical_string, write_atomic, Split, SplitAssignment};
use crate::rng;
use crate::scoring::{CornerCaseSet, Member};

pub const DEFAULT_RATIOS: [u32; 3] = [4, 3, 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionPolicy {
    pub ratios: [u32; 3],
    pub stratum_quantile: f64,
    pub seed: u64,
}

impl Default for PartitionPolicy {
    fn default() -> Self {
        PartitionPolicy {
            ratios: DEFAULT_RATIOS,
            stratum_quantile: 0.5,
            seed: 0,
        }
    }
}

impl PartitionPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().all(|&r| r == 0) {
            return Err(Error::InvalidParameter("ratios are all zero".into()));
        }
        check_quantile(self.stratum_quantile)
    }
}

fn check_quantile(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "stratum quantile {q} must lie strictly inside (0, 1)"
        )))
    }
}

/// Parses `a:b:c`.
pub fn parse_ratios(s: &str) -> Result<[u32; 3]> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::InvalidParameter(format!("ratios {s:?} must look like 4:3:3"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0u32; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| bad())?;
    }
    Ok(out)
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile_value(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile of empty set"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Splits members into `C >= quantile value` (high) and the rest (low),
/// preserving input order in each.
pub fn stratify(set: &CornerCaseSet, quantile: f64) -> Result<(Vec<Member>, Vec<Member>)> {
    check_quantile(quantile)?;
    if set.is_empty() {
        return Err(Error::Empty("corner-case set"));
    }
    let values: Vec<f64> = set.members.iter().map(|m| m.confidence).collect();
    let cut = quantile_value(&values, quantile)?;
    Ok(set.members.iter().partition(|m| m.confidence >= cut))
}

/// Largest-remainder apportionment of `total` seats by integer weights.
/// Remainder ties go to the lower index.
pub fn largest_remainder(total: u64, weights: &[u64]) -> Result<Vec<u64>> {
    let sum: u128 = weights.iter().map(|&w| u128::from(w)).sum();
    if sum == 0 {
        return Err(Error::InvalidParameter("weights sum to zero".into()));
    }
    let total128 = u128::from(total);
    let mut seats: Vec<u64> = Vec::with_capacity(weights.len());
    let mut rems: Vec<(u128, usize)> = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let num = total128 * u128::from(w);
        seats.push((num / sum) as u64);
        rems.push((num % sum, i));
    }
    let assigned: u64 = seats.iter().sum();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take((total - assigned) as usize) {
        seats[i] += 1;
    }
    Ok(seats)
}

fn shuffle_key(seed: u64, id: u64) -> u64 {
    rng::key(seed, &[rng::stream::PARTITION, id])
}

fn ordered(seed: u64, members: &[Member]) -> Vec<u64> {
    let mut ids: Vec<(u64, u64)> = members
        .iter()
        .map(|m| (shuffle_key(seed, m.sample_id), m.sample_id))
        .collect();
    ids.sort_unstable();
    ids.into_iter().map(|(_, id)| id).collect()
}

/// Per-split sizes for a set of `n` members under `ratios`.
pub fn split_sizes(n: usize, ratios: [u32; 3]) -> Result<[usize; 3]> {
    let w: Vec<u64> = ratios.iter().map(|&r| u64::from(r)).collect();
    let s = largest_remainder(n as u64, &w)?;
    Ok([s[0] as usize, s[1] as usize, s[2] as usize])
}

pub fn mean_partition(set: &CornerCaseSet, policy: &PartitionPolicy) -> Result<SplitAssignment> {
    policy.validate()?;
    set.validate()?;
    let n = set.len();
    let sizes = split_sizes(n, policy.ratios)?;
    if policy
        .ratios
        .iter()
        .zip(&sizes)
        .any(|(&r, &s)| r > 0 && s == 0)
    {
        return Err(Error::SetTooSmall { size: n });
    }
    let (high, low) = stratify(set, policy.stratum_quantile)?;
    let size_weights: Vec<u64> = sizes.iter().map(|&s| s as u64).collect();
    let high_counts = largest_remainder(high.len() as u64, &size_weights)?;

    let mut assignment = SplitAssignment::new();
    let mut high_ids = ordered(policy.seed, &high).into_iter();
    let mut low_ids = ordered(policy.seed, &low).into_iter();
    for (i, split) in Split::ALL.iter().enumerate() {
        let h = high_counts[i] as usize;
        for id in high_ids.by_ref().take(h) {
            assignment.insert(id, *split);
        }
        for id in low_ids.by_ref().take(sizes[i] - h) {
            assignment.insert(id, *split);
        }
    }
    debug_assert_eq!(assignment.len(), n);
    Ok(assignment)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBalance {
    pub split: Split,
    pub size: usize,
    pub high: usize,
    pub high_fraction: f64,
    /// `round(size * global high fraction)`.
    pub expected_high: usize,
    pub count_deviation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub total: usize,
    pub global_high_fraction: f64,
    pub splits: Vec<SplitBalance>,
    pub max_count_deviation: usize,
    pub max_fraction_deviation: f64,
}

impl BalanceReport {
    pub fn is_balanced(&self) -> bool {
        self.max_count_deviation <= 1
    }
}

pub fn verify_balance(
    set: &CornerCaseSet,
    assignment: &SplitAssignment,
    quantile: f64,
) -> Result<BalanceReport> {
    let (high, _) = stratify(set, quantile)?;
    let high_ids: std::collections::BTreeSet<u64> = high.iter().map(|m| m.sample_id).collect();
    let mut size = [0usize; 3];
    let mut hi = [0usize; 3];
    for m in &set.members {
        let split = assignment
            .get(&m.sample_id)
            .ok_or(Error::Uncovered(m.sample_id))?;
        size[split.index()] += 1;
        if high_ids.contains(&m.sample_id) {
            hi[split.index()] += 1;
        }
    }
    let n = set.len();
    let h = high_ids.len();
    let global = h as f64 / n as f64;
    let splits: Vec<SplitBalance> = Split::ALL
        .iter()
        .map(|&split| {
            let i = split.index();
            // round-half-up of size * h / n in exact integer arithmetic
            let expected = (2 * size[i] * h + n) / (2 * n);
            SplitBalance {
                split,
                size: size[i],
                high: hi[i],
                high_fraction: if size[i] == 0 {
                    0.0
                } else {
                    hi[i] as f64 / size[i] as f64
                },
                expected_high: expected,
                count_deviation: hi[i].abs_diff(expected),
            }
        })
        .collect();
    let max_count_deviation = splits.iter().map(|s| s.count_deviation).max().unwrap_or(0);
    let max_fraction_deviation = splits
        .iter()
        .filter(|s| s.size > 0)
        .map(|s| (s.high_fraction - global).abs())
        .fold(0.0, f64::max);
    Ok(BalanceReport {
        total: n,
        global_high_fraction: global,
        splits,
        max_count_deviation,
        max_fraction_deviation,
    })
}

/// Standalone assignment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentFile {
    pub scenario: String,
    pub seed: u64,
    pub ratios: [u32; 3],
    pub assignment: BTreeMap<String, Split>,
}

impl AssignmentFile {
    pub fn new(scenario: &str, policy: &PartitionPolicy, assignment: &SplitAssignment) -> Self {
        AssignmentFile {
            scenario: scenario.to_string(),
            seed: policy.seed,
            ratios: policy.ratios,
            assignment: assignment
                .iter()
                .map(|(id, s)| (id.to_string(), *s))
                .collect(),
        }
    }

    pub fn assignment(&self) -> Result<SplitAssignment> {
        self.assignment
            .iter()
            .map(|(k, s)| {
                k.parse::<u64>()
                    .map(|id| (id, *s))
                    .map_err(|_| Error::InvalidParameter(format!("assignment key {k:?}")))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, canonical_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::manifest::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}
