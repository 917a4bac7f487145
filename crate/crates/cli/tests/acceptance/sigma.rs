use corecurate::uncertainty::{select_uncertain, sigma, PredictionLabel};

use crate::{ensure, err, Outcome};

const LABELS: [u64; 12] = [5, 0, 17, 3, u64::MAX, 2, 9, 1, 40, 6, 11, 8];

/// Integer partitions of `n`, parts non-increasing.
fn partitions(n: usize, max: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if n == 0 {
        out.push(prefix.clone());
        return;
    }
    for p in (1..=n.min(max)).rev() {
        prefix.push(p);
        partitions(n - p, p, prefix, out);
        prefix.pop();
    }
}

/// The multiset laid out in blocks, in reverse blocks and round-robin.
fn arrangements(parts: &[usize]) -> Vec<Vec<u64>> {
    let blocks: Vec<u64> = parts
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(LABELS[i], c))
        .collect();
    let mut reversed = blocks.clone();
    reversed.reverse();
    let mut left = parts.to_vec();
    let mut round = Vec::with_capacity(blocks.len());
    while left.iter().any(|&c| c > 0) {
        for (i, c) in left.iter_mut().enumerate() {
            if *c > 0 {
                *c -= 1;
                round.push(LABELS[i]);
            }
        }
    }
    vec![blocks, reversed, round]
}

fn brute_force(seq: &[u64]) -> f64 {
    let mut majority = 0usize;
    for &a in seq {
        let count = seq.iter().filter(|&&b| b == a).count();
        majority = majority.max(count);
    }
    1.0 - majority as f64 / seq.len() as f64
}

fn check(seq: &[u64]) -> Result<(), String> {
    let preds: Vec<PredictionLabel> = seq
        .iter()
        .map(|&label| PredictionLabel { sample_id: 77, label })
        .collect();
    let got = sigma(&preds).map_err(err)?.sigma;
    let want = brute_force(seq);
    ensure(got.to_bits() == want.to_bits(), || {
        format!("sigma of {seq:?} is {got:e}, brute force gives {want:e}")
    })
}

pub fn run() -> Outcome {
    let mut checked = 0usize;
    for n in 1..=12 {
        let mut parts = Vec::new();
        partitions(n, n, &mut Vec::new(), &mut parts);
        for p in &parts {
            for seq in arrangements(p) {
                check(&seq)?;
                checked += 1;
            }
        }
        // Every count vector over three labels as well.
        for a in 0..=n {
            for b in 0..=n - a {
                let seq: Vec<u64> = std::iter::repeat_n(LABELS[0], a)
                    .chain(std::iter::repeat_n(LABELS[1], b))
                    .chain(std::iter::repeat_n(LABELS[2], n - a - b))
                    .collect();
                check(&seq)?;
                checked += 1;
            }
        }
    }

    let five = [1u64, 1, 1, 2, 2];
    let labeler = move |_id: u64, i: usize, _n: usize, _seed: u64| -> corecurate::Result<u64> { Ok(five[i - 1]) };
    let s = brute_force(&five);
    ensure(s == 0.4, || format!("sigma of AAABB is {s}, not 0.4"))?;
    let at = select_uncertain(&[3], &labeler, 0.4, 5, 0).map_err(err)?;
    ensure(at.is_empty(), || "AAABB selected at tau = 0.4".into())?;
    let below = select_uncertain(&[3], &labeler, 0.399, 5, 0).map_err(err)?;
    ensure(below.len() == 1, || "AAABB not selected at tau = 0.399".into())?;

    Ok(format!("{checked} multisets bit-exact; AAABB not selected at tau 0.4"))
}
