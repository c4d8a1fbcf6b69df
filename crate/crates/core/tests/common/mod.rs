#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use talknet::align::LogProbLattice;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use talknet::text::{TokenSeq, BLANK_ID};

/// Every best-scoring monotonic CTC path, found by exhaustive enumeration.
pub struct BruteForce {
    pub score: f64,
    pub durations: Vec<Vec<u32>>,
}

pub fn brute_force_align(lattice: &Array2<f32>, states: &[u32]) -> Option<BruteForce> {
    fn walk(lat: &Array2<f32>, states: &[u32], t: usize, s: usize, score: f64, counts: &mut Vec<u32>, best: &mut Option<BruteForce>) {
        let score = score + lat[[t, states[s] as usize]] as f64;
        counts[s] += 1;
        let n = states.len();
        if t + 1 == lat.nrows() {
            if s + 1 == n || s + 2 == n {
                match best {
                    Some(b) if b.score > score => {}
                    Some(b) if b.score == score => b.durations.push(counts.clone()),
                    _ => *best = Some(BruteForce { score, durations: vec![counts.clone()] }),
                }
            }
        } else {
            let mut next = vec![s];
            if s + 1 < n {
                next.push(s + 1);
            }
            if s + 2 < n && states[s + 2] != BLANK_ID && states[s + 2] != states[s] {
                next.push(s + 2);
            }
            for ns in next {
                walk(lat, states, t + 1, ns, score, counts, best);
            }
        }
        counts[s] -= 1;
    }
    let mut best = None;
    let mut counts = vec![0u32; states.len()];
    for start in 0..states.len().min(2) {
        walk(lattice, states, 0, start, 0.0, &mut counts, &mut best);
    }
    best
}

/// A random log-softmax lattice and a blank-interleaved target.
pub fn random_case(seed: u64) -> (LogProbLattice, TokenSeq) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = rng.random_range(1..=6);
    let vocab = rng.random_range(2..=5);
    let graphemes = rng.random_range(1..=3);
    let mut ids = vec![BLANK_ID];
    for _ in 0..graphemes {
        ids.push(rng.random_range(1..vocab as u32));
        ids.push(BLANK_ID);
    }
    let mut values = Array2::<f32>::zeros((frames, vocab));
    for mut row in values.rows_mut() {
        let logits: Vec<f64> = (0..vocab).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        for (v, l) in row.iter_mut().zip(logits) {
            *v = (l - lse) as f32;
        }
    }
    (LogProbLattice::new(values).expect("rows are normalized"), TokenSeq::blanked(ids).expect("interleaved"))
}

/// Outcome of comparing the aligner with brute force on `cases` seeds.
#[derive(Debug, Default)]
pub struct OracleTally {
    pub cases: usize,
    pub feasible: usize,
    pub matched: usize,
    pub sums_ok: usize,
    pub mismatches: Vec<u64>,
}

pub fn run_viterbi_oracle(cases: u64) -> OracleTally {
    let mut tally = OracleTally::default();
    for seed in 0..cases {
        let (lattice, target) = random_case(seed);
        tally.cases += 1;
        let oracle = brute_force_align(lattice.values(), &target.ids);
        match (talknet::viterbi_align(&lattice, &target), oracle) {
            (Ok(r), Some(b)) => {
                tally.feasible += 1;
                if r.durations.total() == lattice.frames() {
                    tally.sums_ok += 1;
                }
                if r.path_logprob == b.score && b.durations.contains(&r.durations.0) {
                    tally.matched += 1;
                } else {
                    tally.mismatches.push(seed);
                }
            }
            (Err(talknet::Error::Infeasible { .. }), None) => tally.matched += 1,
            _ => tally.mismatches.push(seed),
        }
    }
    tally
}
