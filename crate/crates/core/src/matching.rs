//! Segmentation-query matching: `k` class-agnostic candidate masks are
//! scored against `T` targets with a weighted BCE + Dice cost and assigned by
//! minimum-cost bipartite matching. A single candidate for a single target is
//! used directly without evaluating any cost.
//!
//! Every pair-cost evaluation goes through [`Matcher`], which counts them so
//! the cost of the matching step can be measured independently of wall time.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{bce_loss, dice_loss, LossError, DEFAULT_DICE_SMOOTH};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchError {
    #[error("{targets} targets but only {candidates} candidates")]
    TooFewCandidates { targets: usize, candidates: usize },
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("target set is empty")]
    NoTargets,
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("cost entry ({row}, {col}) is not finite and non-negative: {value}")]
    InvalidCost { row: usize, col: usize, value: f64 },
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// `k` probability maps of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    height: usize,
    width: usize,
    masks: Vec<Vec<f64>>,
}

impl CandidateSet {
    pub fn new(height: usize, width: usize, masks: Vec<Vec<f64>>) -> Result<Self, MatchError> {
        if masks.is_empty() {
            return Err(MatchError::NoCandidates);
        }
        for m in &masks {
            if m.len() != height * width {
                return Err(MatchError::ShapeMismatch {
                    left: (height, width),
                    right: (m.len(), 1),
                });
            }
            if let Some((index, &value)) = m.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
                return Err(LossError::OutOfRange { index, value }.into());
            }
        }
        Ok(Self {
            height,
            width,
            masks,
        })
    }

    /// Binary masks as saturated probability maps.
    pub fn from_binary(masks: &[BinaryMask]) -> Result<Self, MatchError> {
        let first = masks.first().ok_or(MatchError::NoCandidates)?;
        let (h, w) = first.shape();
        Self::new(
            h,
            w,
            masks
                .iter()
                .map(|m| m.data().iter().map(|&v| v as f64).collect())
                .collect(),
        )
    }

    pub fn k(&self) -> usize {
        self.masks.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn masks(&self) -> &[Vec<f64>] {
        &self.masks
    }

    /// Reorders candidates so that new index `i` holds old index `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            height: self.height,
            width: self.width,
            masks: order.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    masks: Vec<BinaryMask>,
}

impl TargetSet {
    pub fn new(masks: Vec<BinaryMask>) -> Result<Self, MatchError> {
        let first = masks.first().ok_or(MatchError::NoTargets)?;
        if let Some(bad) = masks.iter().find(|m| m.shape() != first.shape()) {
            return Err(MatchError::ShapeMismatch {
                left: first.shape(),
                right: bad.shape(),
            });
        }
        Ok(Self { masks })
    }

    pub fn t(&self) -> usize {
        self.masks.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.masks[0].shape()
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub w_bce: f64,
    pub w_dice: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_bce: 5.0,
            w_dice: 5.0,
        }
    }
}

pub const PROB_CLAMP: f64 = 1e-6;

/// `w_bce · BCE(logit(clamp(p)), target) + w_dice · Dice(p, target)`.
pub fn pair_cost(candidate: &[f64], target: &BinaryMask, weights: CostWeights) -> Result<f64, MatchError> {
    let targets: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
    if candidate.len() != targets.len() {
        return Err(MatchError::ShapeMismatch {
            left: (candidate.len(), 1),
            right: target.shape(),
        });
    }
    let logits: Vec<f64> = candidate
        .iter()
        .map(|&p| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            (p / (1.0 - p)).ln()
        })
        .collect();
    let bce = bce_loss(&logits, &targets)?;
    let dice = dice_loss(candidate, &targets, DEFAULT_DICE_SMOOTH)?;
    Ok(weights.w_bce * bce + weights.w_dice * dice)
}

/// `T × k` matrix; entry `(i, j)` is the cost of giving candidate `j` to
/// target `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub weights: Option<CostWeights>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatchError> {
        if rows == 0 {
            return Err(MatchError::NoTargets);
        }
        if cols == 0 {
            return Err(MatchError::NoCandidates);
        }
        if rows > cols {
            return Err(MatchError::TooFewCandidates {
                targets: rows,
                candidates: cols,
            });
        }
        if data.len() != rows * cols {
            return Err(MatchError::ShapeMismatch {
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        for (i, &value) in data.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(MatchError::InvalidCost {
                    row: i / cols,
                    col: i % cols,
                    value,
                });
            }
        }
        Ok(Self {
            rows,
            cols,
            data,
            weights: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatchError> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// `(target, candidate)` sorted by target.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
    pub cost_evaluations: u64,
    pub bypassed: bool,
}

/// Cost evaluator with an evaluation counter shared across threads.
#[derive(Debug, Default)]
pub struct Matcher {
    weights: CostWeights,
    evaluations: AtomicU64,
}

impl Matcher {
    pub fn new(weights: CostWeights) -> Self {
        Self {
            weights,
            evaluations: AtomicU64::new(0),
        }
    }

    pub fn weights(&self) -> CostWeights {
        self.weights
    }

    /// Total pair-cost evaluations performed so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn pair_cost(&self, candidate: &[f64], target: &BinaryMask) -> Result<f64, MatchError> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        pair_cost(candidate, target, self.weights)
    }

    pub fn cost_matrix(&self, candidates: &CandidateSet, targets: &TargetSet) -> Result<CostMatrix, MatchError> {
        check_sets(candidates, targets)?;
        let (t, k) = (targets.t(), candidates.k());
        let rows: Vec<Vec<f64>> = targets
            .masks()
            .par_iter()
            .map(|target| {
                candidates
                    .masks()
                    .iter()
                    .map(|cand| self.pair_cost(cand, target))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        let mut m = CostMatrix::new(t, k, rows.concat())?;
        m.weights = Some(self.weights);
        Ok(m)
    }

    /// Picks a candidate for every target. With one candidate and one target
    /// the candidate is returned as-is and no cost is evaluated.
    pub fn select_masks(&self, candidates: &CandidateSet, targets: &TargetSet) -> Result<AssignmentResult, MatchError> {
        check_sets(candidates, targets)?;
        if candidates.k() == 1 && targets.t() == 1 {
            return Ok(AssignmentResult {
                pairs: vec![(0, 0)],
                total_cost: 0.0,
                cost_evaluations: 0,
                bypassed: true,
            });
        }
        let before = self.evaluations();
        let matrix = self.cost_matrix(candidates, targets)?;
        let mut result = hungarian(&matrix);
        result.cost_evaluations = self.evaluations() - before;
        Ok(result)
    }
}

fn check_sets(candidates: &CandidateSet, targets: &TargetSet) -> Result<(), MatchError> {
    if candidates.shape() != targets.shape() {
        return Err(MatchError::ShapeMismatch {
            left: candidates.shape(),
            right: targets.shape(),
        });
    }
    if targets.t() > candidates.k() {
        return Err(MatchError::TooFewCandidates {
            targets: targets.t(),
            candidates: candidates.k(),
        });
    }
    Ok(())
}

pub fn cost_matrix(candidates: &CandidateSet, targets: &TargetSet) -> Result<CostMatrix, MatchError> {
    Matcher::default().cost_matrix(candidates, targets)
}

pub fn select_masks(candidates: &CandidateSet, targets: &TargetSet) -> Result<AssignmentResult, MatchError> {
    Matcher::default().select_masks(candidates, targets)
}

/// Minimum-cost assignment of rows to columns (rows ≤ cols) by shortest
/// augmenting paths with potentials, `O(rows² · cols)`. Restricted to the
/// columns flagged in `allowed` and rows `from..`.
fn solve(m: &CostMatrix, from: usize, allowed: &[bool]) -> Option<Vec<usize>> {
    let rows = m.rows - from;
    let cols: Vec<usize> = (0..m.cols).filter(|&j| allowed[j]).collect();
    let n = cols.len();
    if rows > n {
        return None;
    }
    if rows == 0 {
        return Some(Vec::new());
    }
    // 1-based arrays; index 0 is the virtual root
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = m.at(from + i0 - 1, cols[j - 1]) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; rows];
    for j in 1..=n {
        if owner[j] != 0 {
            assign[owner[j] - 1] = cols[j - 1];
        }
    }
    Some(assign)
}

fn assignment_cost(m: &CostMatrix, from: usize, assign: &[usize]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(i, &j)| m.at(from + i, j))
        .sum()
}

/// Relative tolerance used to decide that two assignment totals tie.
const TIE_TOLERANCE: f64 = 1e-12;

/// Optimal assignment of every target to a distinct candidate. Among
/// assignments whose total ties with the optimum, the one with the
/// lexicographically smallest candidate sequence (in target order) wins.
pub fn hungarian(m: &CostMatrix) -> AssignmentResult {
    let mut allowed = vec![true; m.cols];
    let best = solve(m, 0, &allowed).expect("rows <= cols is a CostMatrix invariant");
    let optimum = assignment_cost(m, 0, &best);
    let tol = TIE_TOLERANCE * optimum.abs().max(1.0);

    // Fix targets one at a time to the smallest candidate that still admits an
    // optimal completion.
    let mut chosen = Vec::with_capacity(m.rows);
    let mut prefix = 0.0;
    let mut current = best;
    for row in 0..m.rows {
        let incumbent = current[0];
        let mut pick = (incumbent, current[1..].to_vec());
        for j in 0..incumbent {
            if !allowed[j] {
                continue;
            }
            allowed[j] = false;
            if let Some(rest) = solve(m, row + 1, &allowed) {
                let total = prefix + m.at(row, j) + assignment_cost(m, row + 1, &rest);
                if total <= optimum + tol {
                    allowed[j] = true;
                    pick = (j, rest);
                    break;
                }
            }
            allowed[j] = true;
        }
        let (j, rest) = pick;
        allowed[j] = false;
        prefix += m.at(row, j);
        chosen.push(j);
        current = rest;
    }

    let pairs: Vec<(usize, usize)> = chosen.into_iter().enumerate().collect();
    let total_cost = pairs.iter().map(|&(i, j)| m.at(i, j)).sum();
    AssignmentResult {
        pairs,
        total_cost,
        cost_evaluations: 0,
        bypassed: false,
    }
}

/// Default query counts swept when measuring the matching cost.
pub const DEFAULT_SWEEP_KS: [usize; 7] = [100, 75, 50, 25, 10, 3, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub cost_evaluations: u64,
    pub wall_time_ms: f64,
    pub bypassed: bool,
    pub total_cost: f64,
}

/// Runs [`Matcher::select_masks`] once per `k`, using `generate(k)` to build
/// the candidate set.
pub fn sweep_queries<F>(
    mut generate: F,
    targets: &TargetSet,
    ks: &[usize],
    weights: CostWeights,
) -> Result<Vec<SweepRow>, MatchError>
where
    F: FnMut(usize) -> Result<CandidateSet, MatchError>,
{
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let candidates = generate(k)?;
        let matcher = Matcher::new(weights);
        let start = Instant::now();
        let result = matcher.select_masks(&candidates, targets)?;
        let elapsed = start.elapsed();
        rows.push(SweepRow {
            k,
            cost_evaluations: result.cost_evaluations,
            wall_time_ms: elapsed.as_secs_f64() * 1e3,
            bypassed: result.bypassed,
            total_cost: result.total_cost,
        });
    }
    Ok(rows)
}
