//! Ground-truth durations from CTC log-probability lattices.
//!
//! The target is the blank-interleaved grapheme sequence `[~, t1, ~, ..., tn, ~]`
//! read as a CTC state graph. [`viterbi_align`] finds the single best
//! monotonic path through it (max-sum forward pass, then traceback) and counts
//! how many frames the path spends in each state.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{jsonl, Tensor};
use crate::text::{DurationSeq, TokenSeq, BLANK_ID};

/// Rows must be log-normalized to within this tolerance.
pub const ROW_TOLERANCE: f64 = 1e-3;

/// `T x V` per-frame log probabilities from an external CTC model.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbLattice {
    values: Array2<f32>,
}

impl LogProbLattice {
    /// Wraps `values` after checking every row is a normalized log distribution.
    pub fn new(values: Array2<f32>) -> Result<Self> {
        let lattice = Self::unchecked(values)?;
        for (t, row) in lattice.values.rows().into_iter().enumerate() {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            if !max.is_finite() {
                return Err(Error::BadLattice(format!("row {t} has no finite entry")));
            }
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            if lse.abs() > ROW_TOLERANCE {
                return Err(Error::BadLattice(format!(
                    "row {t} log-sum-exp is {lse:.6}, expected 0"
                )));
            }
        }
        Ok(lattice)
    }

    /// Wraps arbitrary per-frame scores without the normalization check.
    pub fn unchecked(values: Array2<f32>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::BadLattice("lattice must have at least one frame and one label".into()));
        }
        if values.iter().any(|v| v.is_nan() || *v == f32::INFINITY) {
            return Err(Error::BadLattice("lattice contains NaN or +inf".into()));
        }
        Ok(Self { values })
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.dims.len() != 2 {
            return Err(Error::BadLattice(format!("expected T x V tensor, got dims {:?}", t.dims)));
        }
        Self::new(t.into_array2()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor(Tensor::load(path)?)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_array2(&self.values)
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    /// Synthesizes a lattice from known durations: each frame puts `1 - noise`
    /// on its true label and spreads `noise` evenly over the others.
    pub fn from_durations(target: &TokenSeq, durs: &DurationSeq, vocab_size: usize, noise: f64) -> Result<Self> {
        let frames = crate::text::expand_by_durations(target, durs)?;
        if vocab_size < 2 || !(0.0..1.0).contains(&noise) {
            return Err(Error::BadLattice("need vocab_size >= 2 and noise in [0, 1)".into()));
        }
        let on = (1.0 - noise).ln() as f32;
        let off = if noise > 0.0 {
            (noise / (vocab_size - 1) as f64).ln() as f32
        } else {
            f32::NEG_INFINITY
        };
        let mut values = Array2::from_elem((frames.len(), vocab_size), off);
        for (t, &id) in frames.ids.iter().enumerate() {
            if id as usize >= vocab_size {
                return Err(Error::BadLattice(format!("label {id} outside vocabulary of {vocab_size}")));
            }
            values[[t, id as usize]] = on;
        }
        Self::new(values)
    }
}

/// Best path durations over a blank-interleaved target.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub target: TokenSeq,
    pub durations: DurationSeq,
    pub path_logprob: f64,
}

/// Minimum frame count any path needs: one per grapheme plus a separating
/// blank between each pair of equal adjacent graphemes.
pub fn min_frames(target: &TokenSeq) -> usize {
    let graphemes: Vec<u32> = target.ids.iter().copied().filter(|&id| id != BLANK_ID).collect();
    let repeats = graphemes.windows(2).filter(|w| w[0] == w[1]).count();
    graphemes.len() + repeats
}

/// Whether a path may jump from state `s` to `s + 2`, skipping a blank.
fn can_skip(states: &[u32], s: usize) -> bool {
    s + 2 < states.len() && states[s + 2] != BLANK_ID && states[s + 2] != states[s]
}

const STAY: u8 = 0;
const ADVANCE: u8 = 1;
const SKIP: u8 = 2;

/// Most-probable monotonic CTC path through `lattice` for `target`.
///
/// Paths start in the leading blank or the first grapheme and end in the last
/// grapheme or the trailing blank. On exact score ties the traceback prefers
/// staying, then advancing by one state, then skipping a blank; at the final
/// frame it prefers the trailing blank.
pub fn viterbi_align(lattice: &LogProbLattice, target: &TokenSeq) -> Result<AlignmentResult> {
    if !target.has_blanks {
        return Err(Error::NotBlanked);
    }
    let states = &target.ids;
    let n_states = states.len();
    let frames = lattice.frames();
    if n_states == 0 || n_states % 2 == 0 {
        return Err(Error::NotBlanked);
    }
    if let Some(&id) = states.iter().find(|&&id| id as usize >= lattice.vocab_size()) {
        return Err(Error::BadLattice(format!(
            "target label {id} outside lattice vocabulary of {}",
            lattice.vocab_size()
        )));
    }
    let needed = min_frames(target);
    if frames < needed {
        return Err(Error::Infeasible { needed, frames });
    }

    let lp = |t: usize, s: usize| lattice.values[[t, states[s] as usize]] as f64;
    let mut prev = vec![f64::NEG_INFINITY; n_states];
    let mut cur = vec![f64::NEG_INFINITY; n_states];
    let mut back = Array2::<u8>::from_elem((frames, n_states), STAY);

    prev[0] = lp(0, 0);
    if n_states > 1 {
        prev[1] = lp(0, 1);
    }
    for t in 1..frames {
        for s in 0..n_states {
            let mut best = prev[s];
            let mut how = STAY;
            if s >= 1 && prev[s - 1] > best {
                best = prev[s - 1];
                how = ADVANCE;
            }
            if s >= 2 && can_skip(states, s - 2) && prev[s - 2] > best {
                best = prev[s - 2];
                how = SKIP;
            }
            cur[s] = best + lp(t, s);
            back[[t, s]] = how;
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let last = n_states - 1;
    let mut state = if n_states > 1 && prev[last - 1] > prev[last] { last - 1 } else { last };
    let score = prev[state];
    if score == f64::NEG_INFINITY {
        return Err(Error::Infeasible { needed, frames });
    }

    let mut durations = vec![0u32; n_states];
    for t in (0..frames).rev() {
        durations[state] += 1;
        if t > 0 {
            state -= back[[t, state]] as usize;
        }
    }
    debug_assert!(state <= 1);

    Ok(AlignmentResult {
        target: target.clone(),
        durations: DurationSeq(durations),
        path_logprob: score,
    })
}

/// One utterance's alignment as written to the durations JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationRecord {
    pub id: String,
    pub tokens: Vec<u32>,
    pub durations: Vec<u32>,
    pub score: f64,
}

pub fn alignment_to_records(result: &AlignmentResult, utt_id: &str) -> DurationRecord {
    DurationRecord {
        id: utt_id.to_string(),
        tokens: result.target.ids.clone(),
        durations: result.durations.0.clone(),
        score: result.path_logprob,
    }
}

impl DurationRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization cannot fail")
    }

    pub fn read_all(path: impl AsRef<Path>) -> Result<Vec<Self>> {
        jsonl::read(path)
    }

    pub fn parse_all(text: &str) -> Result<Vec<Self>> {
        jsonl::parse_lines(text.as_bytes())
    }

    pub fn write_all(path: impl AsRef<Path>, records: &[Self]) -> Result<()> {
        jsonl::write(path, records)
    }
}
