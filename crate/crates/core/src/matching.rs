//! Optimal monotone alignment between a reference motion and a trajectory.
//!
//! A matching is a set of index pairs `(u_i, v_i)` with both `u` and `v`
//! strictly increasing. The optimal matching maximises the summed similarity
//! and is found with an `O(H * T)` dynamic program.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::similarity::SimMatrix;

/// Similarity below which matched pairs are discarded after optimisation.
pub const DEFAULT_MIN_SIM: f64 = 0.05;
/// Threshold for the initial-state matching rule.
pub const INITIAL_STATE_THRESHOLD: f64 = 0.5;
/// Largest `(H+1) * (T+1)` accepted by [`brute_force_matching`].
pub const BRUTE_FORCE_LIMIT: usize = 49;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("matrix too large for exhaustive enumeration ({0} cells > {BRUTE_FORCE_LIMIT})")]
    TooLarge(usize),
    #[error("pairs are not strictly increasing at position {0}")]
    NotMonotone(usize),
    #[error("pair ({0}, {1}) out of bounds")]
    OutOfBounds(usize, usize),
    #[error("no episode produced a non-empty matching")]
    NoValidMatching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchSource {
    Dp,
    BruteForce,
    InitialState,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pairs: Vec<(usize, usize)>,
    total_similarity: f64,
    source: MatchSource,
}

impl Matching {
    /// Validates strict double monotonicity.
    pub fn new(pairs: Vec<(usize, usize)>, total_similarity: f64, source: MatchSource) -> Result<Self, MatchingError> {
        for (k, w) in pairs.windows(2).enumerate() {
            if !(w[0].0 < w[1].0 && w[0].1 < w[1].1) {
                return Err(MatchingError::NotMonotone(k + 1));
            }
        }
        Ok(Matching { pairs, total_similarity, source })
    }

    /// Builds a matching from pairs, summing similarities front to back.
    pub fn from_pairs(pairs: Vec<(usize, usize)>, s: &SimMatrix, source: MatchSource) -> Result<Self, MatchingError> {
        for &(u, v) in &pairs {
            if u >= s.rows || v >= s.cols {
                return Err(MatchingError::OutOfBounds(u, v));
            }
        }
        let total = pairs.iter().fold(0.0, |acc, &(u, v)| acc + s.get(u, v));
        Matching::new(pairs, total, source)
    }

    pub fn empty(source: MatchSource) -> Self {
        Matching { pairs: Vec::new(), total_similarity: 0.0, source }
    }

    /// `u_i = v_i = i` for `i < n`.
    pub fn identity(n: usize) -> Self {
        Matching { pairs: (0..n).map(|i| (i, i)).collect(), total_similarity: 0.0, source: MatchSource::Identity }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn total_similarity(&self) -> f64 {
        self.total_similarity
    }

    pub fn source(&self) -> MatchSource {
        self.source
    }

    /// Reference index matched to trajectory step `t`, if any.
    pub fn reference_for(&self, t: usize) -> Option<usize> {
        self.pairs.binary_search_by_key(&t, |p| p.1).ok().map(|k| self.pairs[k].0)
    }

    /// First pair whose trajectory index is `>= t`.
    pub fn next_pair_from(&self, t: usize) -> Option<(usize, usize)> {
        let k = self.pairs.partition_point(|p| p.1 < t);
        self.pairs.get(k).copied()
    }

    /// Drops pairs whose similarity is below `min_sim` and re-sums.
    pub fn filtered(&self, s: &SimMatrix, min_sim: f64) -> Matching {
        let pairs: Vec<_> = self.pairs.iter().copied().filter(|&(u, v)| s.get(u, v) >= min_sim).collect();
        let total = pairs.iter().fold(0.0, |acc, &(u, v)| acc + s.get(u, v));
        Matching { pairs, total_similarity: total, source: self.source }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matching serialisation cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let m: Matching = serde_json::from_str(text)?;
        Matching::new(m.pairs, m.total_similarity, m.source).map_err(serde::de::Error::custom)
    }
}

/// Suffix table `g[i][j]`: best total using pairs with `u >= i`, `v >= j`.
/// This is the usual prefix recurrence
/// `f[i][j] = max(f[i-1][j], f[i][j-1], f[i-1][j-1] + S[i][j])`
/// run over the reversed matrix, which lets the reconstruction walk forward
/// and pick the lexicographically smallest optimal pair list.
fn suffix_table(s: &SimMatrix) -> Vec<f64> {
    let (h, t) = (s.rows, s.cols);
    let w = t + 1;
    let mut g = vec![0.0; (h + 1) * w];
    for i in (0..h).rev() {
        for j in (0..t).rev() {
            let skip_u = g[(i + 1) * w + j];
            let skip_v = g[i * w + j + 1];
            let take = s.get(i, j) + g[(i + 1) * w + j + 1];
            g[i * w + j] = skip_u.max(skip_v).max(take);
        }
    }
    g
}

/// Optimal matching without the post-hoc similarity filter.
pub fn dp_optimal_matching_unfiltered(s: &SimMatrix) -> Matching {
    if s.rows == 0 || s.cols == 0 {
        return Matching::empty(MatchSource::Dp);
    }
    let g = suffix_table(s);
    let w = s.cols + 1;
    let mut pairs = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    while i < s.rows && j < s.cols {
        let target = g[i * w + j];
        // an empty tail is the smallest continuation
        if target <= 0.0 {
            break;
        }
        let mut found = None;
        'rows: for u in i..s.rows {
            if g[u * w + j] < target {
                break;
            }
            for v in j..s.cols {
                if g[u * w + v] < target {
                    break;
                }
                if s.get(u, v) + g[(u + 1) * w + v + 1] == target {
                    found = Some((u, v));
                    break 'rows;
                }
            }
        }
        let Some((u, v)) = found else { break };
        pairs.push((u, v));
        i = u + 1;
        j = v + 1;
    }
    Matching::from_pairs(pairs, s, MatchSource::Dp).expect("dp reconstruction is monotone")
}

/// Optimal matching, then drops pairs with similarity below `min_sim`.
pub fn dp_optimal_matching(s: &SimMatrix, min_sim: f64) -> Matching {
    dp_optimal_matching_unfiltered(s).filtered(s, min_sim)
}

/// Exhaustive search over every strictly increasing pair list. Ties go to
/// the lexicographically smallest list.
pub fn brute_force_matching(s: &SimMatrix) -> Result<Matching, MatchingError> {
    let cells = s.rows * s.cols;
    if cells > BRUTE_FORCE_LIMIT {
        return Err(MatchingError::TooLarge(cells));
    }
    let mut best: (f64, Vec<(usize, usize)>) = (0.0, Vec::new());
    let mut cur = Vec::new();
    // depth-first in lexicographic order, so the first list reaching a total
    // is the lexicographically smallest one with that total
    fn rec(
        s: &SimMatrix,
        i: usize,
        j: usize,
        cur: &mut Vec<(usize, usize)>,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        let total = cur.iter().fold(0.0, |acc, &(u, v)| acc + s.get(u, v));
        if total > best.0 {
            *best = (total, cur.clone());
        }
        for u in i..s.rows {
            for v in j..s.cols {
                cur.push((u, v));
                rec(s, u + 1, v + 1, cur, best);
                cur.pop();
            }
        }
    }
    rec(s, 0, 0, &mut cur, &mut best);
    Matching::from_pairs(best.1, s, MatchSource::BruteForce)
}

/// Matched state-error reward at trajectory step `t`.
pub fn matched_reward(t: usize, m: &Matching, s: &SimMatrix) -> f64 {
    m.pairs.iter().find(|p| p.1 == t).map_or(0.0, |&(u, v)| s.get(u, v))
}

/// Aligns the reference start with the first trajectory step whose
/// similarity to the first reference frame reaches the threshold.
///
/// `sims_to_first[t]` is `Sim(y_0, s_t)`; `ref_len` is `H + 1`.
pub fn initial_state_matching(ref_len: usize, sims_to_first: &[f64]) -> Matching {
    initial_state_matching_with(ref_len, sims_to_first, INITIAL_STATE_THRESHOLD)
}

pub fn initial_state_matching_with(ref_len: usize, sims_to_first: &[f64], threshold: f64) -> Matching {
    let Some(t0) = sims_to_first.iter().position(|&x| x >= threshold) else {
        return Matching::empty(MatchSource::InitialState);
    };
    let traj_len = sims_to_first.len();
    let n = ref_len.min(traj_len - t0);
    Matching {
        pairs: (0..n).map(|i| (i, i + t0)).collect(),
        total_similarity: 0.0,
        source: MatchSource::InitialState,
    }
}

/// Picks the candidate with the most pairs (ties: highest total, then the
/// earliest candidate). Fails when every candidate is empty.
pub fn select_best_matching(candidates: &[Matching]) -> Result<Matching, MatchingError> {
    let mut best: Option<&Matching> = None;
    for c in candidates.iter().filter(|c| !c.is_empty()) {
        best = match best {
            None => Some(c),
            Some(b) if c.len() > b.len() || (c.len() == b.len() && c.total_similarity > b.total_similarity) => Some(c),
            keep => keep,
        };
    }
    best.cloned().ok_or(MatchingError::NoValidMatching)
}

/// Multi-line ASCII plot: rows are reference frames, columns trajectory
/// steps, `#` marks matched cells and `.` the rest.
pub fn ascii_alignment(m: &Matching, rows: usize, cols: usize) -> String {
    let mut grid = vec![vec!['.'; cols]; rows];
    for &(u, v) in &m.pairs {
        if u < rows && v < cols {
            grid[u][v] = '#';
        }
    }
    let mut out = String::with_capacity(rows * (cols + 1));
    for row in grid {
        out.extend(row);
        out.push('\n');
    }
    out
}
