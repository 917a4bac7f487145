use std::collections::BTreeMap;

use corecurate::manifest::Split;
use corecurate::partition::{mean_partition, PartitionPolicy};
use corecurate::rng::rng_for;
use corecurate::scoring::{CornerCaseSet, Member};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng;

use crate::Outcome;

const RATIOS: [u32; 3] = [4, 3, 3];

/// Hare quota with the largest remainders, ties to the lower index.
fn largest_remainder(n: u64, ratios: [u32; 3]) -> [u64; 3] {
    let total: u64 = ratios.iter().map(|&r| u64::from(r)).sum();
    let mut seats = [0u64; 3];
    let mut rem = [(0u64, 0usize); 3];
    for i in 0..3 {
        seats[i] = n * u64::from(ratios[i]) / total;
        rem[i] = (n * u64::from(ratios[i]) % total, i);
    }
    let mut left = n - seats.iter().sum::<u64>();
    // Selection by hand: repeatedly take the largest remainder.
    let mut used = [false; 3];
    while left > 0 {
        let mut best: Option<usize> = None;
        for j in 0..3 {
            if used[j] {
                continue;
            }
            match best {
                Some(b) if rem[b].0 >= rem[j].0 => {}
                _ => best = Some(j),
            }
        }
        let b = best.expect("fewer than three leftover seats");
        used[b] = true;
        seats[rem[b].1] += 1;
        left -= 1;
    }
    seats
}

/// Linear-interpolation quantile of the confidences.
fn cut(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn confidences(n: usize, mode: u8, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, &[n as u64, u64::from(mode)]);
    (0..n)
        .map(|_| match mode {
            0 => rng.random::<f64>(),
            1 => [0.2, 0.5, 0.8][rng.random_range(0..3)],
            _ => 0.6,
        })
        .collect()
}

fn check(n: usize, mode: u8, seed: u64, q: f64) -> Result<(), TestCaseError> {
    let conf = confidences(n, mode, seed);
    let set = CornerCaseSet {
        scenario_name: "fog".into(),
        members: conf
            .iter()
            .enumerate()
            .map(|(i, &c)| Member {
                sample_id: (i as u64) * 7 + 3,
                confidence: c,
            })
            .collect(),
        source_manifest: String::new(),
    };
    let policy = PartitionPolicy {
        ratios: RATIOS,
        stratum_quantile: q,
        seed,
    };
    let assignment = mean_partition(&set, &policy).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(assignment.len(), n);
    for m in &set.members {
        prop_assert!(assignment.contains_key(&m.sample_id));
    }

    let expected = largest_remainder(n as u64, RATIOS);
    let mut sizes = [0u64; 3];
    let mut high = [0u64; 3];
    let threshold = cut(&conf, q);
    let conf_of: BTreeMap<u64, f64> = set.members.iter().map(|m| (m.sample_id, m.confidence)).collect();
    for (id, split) in &assignment {
        let s = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        sizes[s] += 1;
        if conf_of[id] >= threshold {
            high[s] += 1;
        }
    }
    prop_assert_eq!(sizes, expected, "n = {}", n);

    let n = n as u64;
    let h_total: u64 = high.iter().sum();
    let l_total = n - h_total;
    for s in 0..3 {
        // |count - total * size / n| <= 1, scaled by n to stay in integers.
        let dev_h = (high[s] * n).abs_diff(h_total * sizes[s]);
        let dev_l = ((sizes[s] - high[s]) * n).abs_diff(l_total * sizes[s]);
        prop_assert!(dev_h <= n, "high stratum off by more than one in split {} (n = {})", s, n);
        prop_assert!(dev_l <= n, "low stratum off by more than one in split {} (n = {})", s, n);
    }
    Ok(())
}

pub fn run() -> Outcome {
    for (n, mode) in [(3, 0), (3, 2), (10_000, 0), (10_000, 1), (10_000, 2)] {
        check(n, mode, 1, 0.5).map_err(|e| e.to_string())?;
    }
    let config = Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let sizes = prop_oneof![4 => 3usize..=300, 1 => 3usize..=10_000];
    let quantile = prop_oneof![Just(0.5), 0.05f64..0.95];
    runner
        .run(&(sizes, 0u8..3, any::<u64>(), quantile), |(n, mode, seed, q)| check(n, mode, seed, q))
        .map_err(|e| e.to_string())?;
    Ok("1000 random instances plus n = 3 and n = 10000 edge cases".into())
}
