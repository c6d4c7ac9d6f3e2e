//! Training-loss components: autoregressive token cross-entropy, per-pixel
//! BCE on logits, Dice on probabilities, and the spatial attention
//! supervision term that separates `[SEG]`-token attention on foreground
//! cells from the mean background attention.
//!
//! Every differentiable term exposes an analytic gradient next to its value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("shape mismatch: expected {expected} elements, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("attention stack needs at least one map")]
    EmptyStack,
    #[error("ground-truth grid has no background cell")]
    NoBackground,
    #[error("ground-truth grid has no foreground cell; spatial loss skipped")]
    SkipNoForeground,
    #[error("ground-truth grid has no background cell; spatial loss skipped")]
    SkipNoBackground,
    #[error("value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("every target position is ignored")]
    EmptyAfterIgnore,
    #[error("target id {target} at position {position} is outside vocabulary of size {vocab}")]
    TargetOutOfVocab {
        position: usize,
        target: i64,
        vocab: usize,
    },
    #[error("negative attention score {value} at index {index}")]
    NegativeAttention { index: usize, value: f64 },
    #[error("grid cell {index} is {value}, expected 0 or 1")]
    NonBinaryGrid { index: usize, value: u8 },
    #[error("loss component {name} is not finite ({value})")]
    NonFiniteComponent { name: &'static str, value: f64 },
    #[error("loss weight {name} is negative ({value})")]
    NegativeWeight { name: &'static str, value: f64 },
}

impl LossError {
    /// True for the two degenerate-grid signals that mean "drop the spatial
    /// term for this sample" rather than "abort".
    pub fn is_skip(&self) -> bool {
        matches!(self, LossError::SkipNoForeground | LossError::SkipNoBackground)
    }
}

/// `d×d` binary grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthGrid {
    d: usize,
    cells: Vec<u8>,
}

impl GroundTruthGrid {
    pub fn new(d: usize, cells: Vec<u8>) -> Result<Self, LossError> {
        if cells.len() != d * d {
            return Err(LossError::ShapeMismatch {
                expected: d * d,
                actual: cells.len(),
            });
        }
        if let Some((index, &value)) = cells.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(LossError::NonBinaryGrid { index, value });
        }
        Ok(Self { d, cells })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn foreground_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    pub fn background_count(&self) -> usize {
        self.cells.len() - self.foreground_count()
    }
}

/// `M` blocks × `N` heads of `d×d` non-negative attention grids, stored
/// contiguously: map `(m, n)` occupies `[(m*N + n) * d*d ..][.. d*d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    blocks: usize,
    heads: usize,
    d: usize,
    data: Vec<f64>,
}

impl AttentionStack {
    pub fn new(blocks: usize, heads: usize, d: usize, data: Vec<f64>) -> Result<Self, LossError> {
        if blocks * heads == 0 || d == 0 {
            return Err(LossError::EmptyStack);
        }
        let expected = blocks * heads * d * d;
        if data.len() != expected {
            return Err(LossError::ShapeMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(LossError::NegativeAttention { index, value });
        }
        Ok(Self {
            blocks,
            heads,
            d,
            data,
        })
    }

    /// Builds a stack from `blocks * heads` separate maps, all of which must
    /// share the first map's size.
    pub fn from_maps(blocks: usize, heads: usize, maps: Vec<Vec<f64>>) -> Result<Self, LossError> {
        let first = maps.first().ok_or(LossError::EmptyStack)?.len();
        let d = (first as f64).sqrt().round() as usize;
        if d * d != first {
            return Err(LossError::ShapeMismatch {
                expected: d * d,
                actual: first,
            });
        }
        if maps.len() != blocks * heads {
            return Err(LossError::ShapeMismatch {
                expected: blocks * heads,
                actual: maps.len(),
            });
        }
        if let Some(bad) = maps.iter().find(|m| m.len() != first) {
            return Err(LossError::ShapeMismatch {
                expected: first,
                actual: bad.len(),
            });
        }
        Self::new(blocks, heads, d, maps.concat())
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn map_count(&self) -> usize {
        self.blocks * self.heads
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn map(&self, block: usize, head: usize) -> &[f64] {
        let cells = self.d * self.d;
        let start = (block * self.heads + head) * cells;
        &self.data[start..start + cells]
    }
}

/// Aggregated `d×d` attention grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSummary {
    d: usize,
    grid: Vec<f64>,
}

impl AttentionSummary {
    pub fn new(d: usize, grid: Vec<f64>) -> Result<Self, LossError> {
        if grid.len() != d * d {
            return Err(LossError::ShapeMismatch {
                expected: d * d,
                actual: grid.len(),
            });
        }
        Ok(Self { d, grid })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }
}

/// Elementwise mean over all `M·N` maps.
pub fn aggregate_attention(stack: &AttentionStack) -> AttentionSummary {
    let cells = stack.d * stack.d;
    let mut grid = vec![0.0; cells];
    for map in stack.data.chunks_exact(cells) {
        for (g, v) in grid.iter_mut().zip(map) {
            *g += v;
        }
    }
    let k = stack.map_count() as f64;
    grid.iter_mut().for_each(|g| *g /= k);
    AttentionSummary { d: stack.d, grid }
}

/// Mean aggregated attention over background cells.
pub fn background_mean(summary: &AttentionSummary, gt: &GroundTruthGrid) -> Result<f64, LossError> {
    if summary.d != gt.d {
        return Err(LossError::ShapeMismatch {
            expected: summary.grid.len(),
            actual: gt.cells.len(),
        });
    }
    let (sum, count) = summary
        .grid
        .iter()
        .zip(&gt.cells)
        .filter(|(_, &g)| g == 0)
        .fold((0.0, 0usize), |(s, n), (a, _)| (s + a, n + 1));
    if count == 0 {
        return Err(LossError::NoBackground);
    }
    Ok(sum / count as f64)
}

pub const DEFAULT_EPSILON_LOG: f64 = 1e-8;

/// Value and gradient of the spatial attention term for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialLoss {
    pub value: f64,
    /// Same layout as the input stack.
    pub gradient: Vec<f64>,
    pub background_mean: f64,
    /// Mean squared foreground deviation from the background mean, before the
    /// log clamp.
    pub separation: f64,
    /// Set when `separation <= eps`; the gradient is zero in that case.
    pub clamped: bool,
}

/// `-ln(max(F, eps))` with `F` the mean over foreground cells of
/// `(A_S - a)^2` and `a` the background mean of the aggregated map.
///
/// Degenerate grids return [`LossError::SkipNoForeground`] or
/// [`LossError::SkipNoBackground`].
pub fn spatial_attention_loss(
    stack: &AttentionStack,
    gt: &GroundTruthGrid,
    eps: f64,
) -> Result<SpatialLoss, LossError> {
    if stack.d != gt.d {
        return Err(LossError::ShapeMismatch {
            expected: stack.d * stack.d,
            actual: gt.cells.len(),
        });
    }
    let n_fg = gt.foreground_count();
    let n_bg = gt.background_count();
    if n_fg == 0 {
        return Err(LossError::SkipNoForeground);
    }
    if n_bg == 0 {
        return Err(LossError::SkipNoBackground);
    }
    let summary = aggregate_attention(stack);
    let a = background_mean(&summary, gt)?;

    let mut separation = 0.0;
    let mut fg_dev_sum = 0.0;
    for (&s, &g) in summary.grid.iter().zip(&gt.cells) {
        if g == 1 {
            let dev = s - a;
            separation += dev * dev;
            fg_dev_sum += dev;
        }
    }
    separation /= n_fg as f64;

    let clamped = !(separation > eps);
    let value = -separation.max(eps).ln();

    // dL/dF = -1/F; zero on the clamped branch
    let dl_df = if clamped { 0.0 } else { -1.0 / separation };
    // dF/dA_S(i): foreground 2(A_S(i) - a)/n_fg; background through a only,
    // dF/da * da/dA_S(j) = (-2/n_fg * sum_fg(A_S - a)) / n_bg
    let bg_grad = dl_df * (-2.0 * fg_dev_sum / n_fg as f64) / n_bg as f64;
    let k = stack.map_count() as f64;
    let grad_summary: Vec<f64> = summary
        .grid
        .iter()
        .zip(&gt.cells)
        .map(|(&s, &g)| {
            let d_summary = if g == 1 {
                dl_df * 2.0 * (s - a) / n_fg as f64
            } else {
                bg_grad
            };
            d_summary / k
        })
        .collect();
    let gradient = grad_summary
        .iter()
        .copied()
        .cycle()
        .take(stack.data.len())
        .collect();

    Ok(SpatialLoss {
        value,
        gradient,
        background_mean: a,
        separation,
        clamped,
    })
}

fn check_len(expected: usize, actual: usize) -> Result<(), LossError> {
    if expected != actual {
        return Err(LossError::ShapeMismatch { expected, actual });
    }
    Ok(())
}

#[inline]
fn bce_term(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on logits, log-sum-exp stable.
pub fn bce_loss(logits: &[f64], targets: &[f64]) -> Result<f64, LossError> {
    check_len(logits.len(), targets.len())?;
    if logits.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| bce_term(x, y))
        .sum();
    Ok(sum / logits.len() as f64)
}

/// Gradient of [`bce_loss`] with respect to the logits.
pub fn bce_grad(logits: &[f64], targets: &[f64]) -> Result<Vec<f64>, LossError> {
    check_len(logits.len(), targets.len())?;
    let n = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| (sigmoid(x) - y) / n)
        .collect())
}

pub const DEFAULT_DICE_SMOOTH: f64 = 1.0;

fn check_probs(probs: &[f64]) -> Result<(), LossError> {
    if let Some((index, &value)) = probs
        .iter()
        .enumerate()
        .find(|(_, p)| !(0.0..=1.0).contains(*p))
    {
        return Err(LossError::OutOfRange { index, value });
    }
    Ok(())
}

/// `1 - (2·Σpg + smooth) / (Σp + Σg + smooth)`.
pub fn dice_loss(probs: &[f64], targets: &[f64], smooth: f64) -> Result<f64, LossError> {
    check_len(probs.len(), targets.len())?;
    check_probs(probs)?;
    let (inter, sp, sg) = dice_sums(probs, targets);
    Ok(1.0 - (2.0 * inter + smooth) / (sp + sg + smooth))
}

fn dice_sums(probs: &[f64], targets: &[f64]) -> (f64, f64, f64) {
    probs
        .iter()
        .zip(targets)
        .fold((0.0, 0.0, 0.0), |(i, p, g), (&pv, &gv)| {
            (i + pv * gv, p + pv, g + gv)
        })
}

/// Gradient of [`dice_loss`] with respect to the probabilities.
pub fn dice_grad(probs: &[f64], targets: &[f64], smooth: f64) -> Result<Vec<f64>, LossError> {
    check_len(probs.len(), targets.len())?;
    check_probs(probs)?;
    let (inter, sp, sg) = dice_sums(probs, targets);
    let num = 2.0 * inter + smooth;
    let den = sp + sg + smooth;
    Ok(targets
        .iter()
        .map(|&g| -(2.0 * g * den - num) / (den * den))
        .collect())
}

/// Mean `-log softmax(row)[target]` over non-ignored positions. `logits` is
/// `targets.len()` rows of `vocab` entries.
pub fn token_ce(logits: &[f64], vocab: usize, targets: &[i64], ignore_id: i64) -> Result<f64, LossError> {
    check_len(targets.len() * vocab, logits.len())?;
    let mut total = 0.0;
    let mut used = 0usize;
    for (position, (&target, row)) in targets.iter().zip(logits.chunks_exact(vocab.max(1))).enumerate() {
        if target == ignore_id {
            continue;
        }
        if target < 0 || target as usize >= vocab {
            return Err(LossError::TargetOutOfVocab {
                position,
                target,
                vocab,
            });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[target as usize];
        used += 1;
    }
    if used == 0 {
        return Err(LossError::EmptyAfterIgnore);
    }
    Ok(total / used as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_text: f64,
    pub w_bce: f64,
    pub w_dice: f64,
    pub lambda_s: f64,
    pub epsilon_log: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_text: 1.0,
            w_bce: 1.0,
            w_dice: 1.0,
            lambda_s: 0.01,
            epsilon_log: DEFAULT_EPSILON_LOG,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [
            ("w_text", self.w_text),
            ("w_bce", self.w_bce),
            ("w_dice", self.w_dice),
            ("lambda_s", self.lambda_s),
            ("epsilon_log", self.epsilon_log),
        ] {
            if !(value >= 0.0) {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Unweighted loss components for one sample. `l_spatial = None` means the
/// spatial term was skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub l_text: f64,
    pub l_bce: f64,
    pub l_dice: f64,
    pub l_spatial: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_text: f64,
    pub l_bce: f64,
    pub l_dice: f64,
    pub l_spatial: f64,
    pub total: f64,
    pub skipped_spatial: bool,
}

pub fn total_loss(parts: LossParts, weights: &LossWeights) -> Result<LossReport, LossError> {
    weights.validate()?;
    let spatial = parts.l_spatial.unwrap_or(0.0);
    for (name, value) in [
        ("l_text", parts.l_text),
        ("l_bce", parts.l_bce),
        ("l_dice", parts.l_dice),
        ("l_spatial", spatial),
    ] {
        if !value.is_finite() {
            return Err(LossError::NonFiniteComponent { name, value });
        }
    }
    let total = weights.w_text * parts.l_text
        + weights.w_bce * parts.l_bce
        + weights.w_dice * parts.l_dice
        + weights.lambda_s * spatial;
    Ok(LossReport {
        l_text: parts.l_text,
        l_bce: parts.l_bce,
        l_dice: parts.l_dice,
        l_spatial: spatial,
        total,
        skipped_spatial: parts.l_spatial.is_none(),
    })
}

/// Turns a spatial-loss result into the optional component expected by
/// [`LossParts`]: skip signals become `None`, other errors propagate.
pub fn spatial_component(result: Result<SpatialLoss, LossError>) -> Result<Option<f64>, LossError> {
    match result {
        Ok(loss) => Ok(Some(loss.value)),
        Err(e) if e.is_skip() => Ok(None),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand_stack() -> (AttentionStack, GroundTruthGrid) {
        (
            AttentionStack::new(1, 1, 2, vec![0.7, 0.1, 0.1, 0.1]).unwrap(),
            GroundTruthGrid::new(2, vec![1, 0, 0, 0]).unwrap(),
        )
    }

    #[test]
    fn aggregate_examples() {
        let (stack, _) = hand_stack();
        assert_eq!(aggregate_attention(&stack).grid(), stack.data());
        let two = AttentionStack::from_maps(1, 2, vec![vec![0.2], vec![0.4]]).unwrap();
        assert!((aggregate_attention(&two).grid()[0] - 0.3).abs() < 1e-15);
        assert!(matches!(
            AttentionStack::from_maps(1, 2, vec![vec![0.2; 4], vec![0.4; 9]]),
            Err(LossError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn background_mean_examples() {
        let (stack, gt) = hand_stack();
        let s = aggregate_attention(&stack);
        assert!((background_mean(&s, &gt).unwrap() - 0.1).abs() < 1e-15);
        let all_bg = GroundTruthGrid::new(2, vec![0; 4]).unwrap();
        assert!((background_mean(&s, &all_bg).unwrap() - 0.25).abs() < 1e-15);
        let all_fg = GroundTruthGrid::new(2, vec![1; 4]).unwrap();
        assert_eq!(background_mean(&s, &all_fg), Err(LossError::NoBackground));
    }

    #[test]
    fn spatial_hand_example() {
        let (stack, gt) = hand_stack();
        let out = spatial_attention_loss(&stack, &gt, DEFAULT_EPSILON_LOG).unwrap();
        assert!((out.background_mean - 0.1).abs() < 1e-12);
        assert!((out.separation - 0.36).abs() < 1e-12);
        assert!((out.value - (-(0.36f64).ln())).abs() < 1e-12);
        assert!((out.value - 1.0217).abs() < 1e-4);
    }

    #[test]
    fn spatial_constant_map_clamps() {
        let stack = AttentionStack::new(2, 1, 2, vec![0.3; 8]).unwrap();
        let gt = GroundTruthGrid::new(2, vec![1, 0, 0, 1]).unwrap();
        let out = spatial_attention_loss(&stack, &gt, 1e-8).unwrap();
        assert!(out.clamped);
        assert!((out.value + 1e-8f64.ln()).abs() < 1e-12);
        assert!(out.gradient.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn spatial_degenerate_grids_skip() {
        let stack = AttentionStack::new(1, 1, 2, vec![0.3; 4]).unwrap();
        let none = GroundTruthGrid::new(2, vec![0; 4]).unwrap();
        let all = GroundTruthGrid::new(2, vec![1; 4]).unwrap();
        assert_eq!(
            spatial_attention_loss(&stack, &none, 1e-8).unwrap_err(),
            LossError::SkipNoForeground
        );
        assert_eq!(
            spatial_attention_loss(&stack, &all, 1e-8).unwrap_err(),
            LossError::SkipNoBackground
        );
        assert_eq!(
            spatial_component(spatial_attention_loss(&stack, &all, 1e-8)),
            Ok(None)
        );
    }

    #[test]
    fn stack_rejects_negative_scores() {
        assert!(matches!(
            AttentionStack::new(1, 1, 1, vec![-0.1]),
            Err(LossError::NegativeAttention { .. })
        ));
        assert!(matches!(
            AttentionStack::new(1, 1, 1, vec![f64::NAN]),
            Err(LossError::NegativeAttention { .. })
        ));
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.0, 0.0], &[1.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(bce_loss(&[50.0, -50.0], &[1.0, 0.0]).unwrap() < 1e-9);
        assert!((bce_loss(&[50.0], &[0.0]).unwrap() - 50.0).abs() < 1e-9);
        assert!(matches!(
            bce_loss(&[0.0], &[0.0, 1.0]),
            Err(LossError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dice_examples() {
        let gt = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(dice_loss(&gt, &gt, 1.0).unwrap(), 0.0);
        let disjoint = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        assert!((dice_loss(&disjoint, &gt, 1.0).unwrap() - 8.0 / 9.0).abs() < 1e-15);
        assert_eq!(dice_loss(&[0.0; 4], &[0.0; 4], 1.0).unwrap(), 0.0);
        assert!(matches!(
            dice_loss(&[1.5], &[1.0], 1.0),
            Err(LossError::OutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn token_ce_examples() {
        let uniform = vec![0.3; 3 * 8];
        assert!((token_ce(&uniform, 8, &[1, 2, 7], -100).unwrap() - 8f64.ln()).abs() < 1e-12);
        let mut peaked = vec![0.0; 2 * 4];
        peaked[2] = 50.0;
        peaked[4 + 1] = 50.0;
        assert!(token_ce(&peaked, 4, &[2, 1], -100).unwrap() < 1e-15 + 3.0 * (-50f64).exp());
        assert_eq!(
            token_ce(&peaked, 4, &[-100, -100], -100),
            Err(LossError::EmptyAfterIgnore)
        );
        assert!(matches!(
            token_ce(&peaked, 4, &[4, 0], -100),
            Err(LossError::TargetOutOfVocab { target: 4, .. })
        ));
        // ignored positions do not contribute
        assert!(token_ce(&peaked, 4, &[2, -100], -100).unwrap() < 1e-15 + 3.0 * (-50f64).exp());
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        let parts = LossParts {
            l_text: 1.0,
            l_bce: 2.0,
            l_dice: 3.0,
            l_spatial: Some(0.5),
        };
        let r = total_loss(parts, &w).unwrap();
        assert!((r.total - 6.005).abs() < 1e-12);
        assert!(!r.skipped_spatial);

        let no_s = LossWeights {
            lambda_s: 0.0,
            ..w
        };
        let a = total_loss(parts, &no_s).unwrap().total;
        let b = total_loss(
            LossParts {
                l_spatial: Some(17.0),
                ..parts
            },
            &no_s,
        )
        .unwrap()
        .total;
        assert_eq!(a, b);

        let skipped = total_loss(
            LossParts {
                l_spatial: None,
                ..parts
            },
            &w,
        )
        .unwrap();
        assert!(skipped.skipped_spatial);
        assert_eq!(skipped.l_spatial, 0.0);
        assert_eq!(skipped.total, 6.0);

        assert!(matches!(
            total_loss(
                LossParts {
                    l_bce: f64::INFINITY,
                    ..parts
                },
                &w
            ),
            Err(LossError::NonFiniteComponent { name: "l_bce", .. })
        ));
    }

    #[test]
    fn report_serializes_flat() {
        let r = total_loss(
            LossParts {
                l_text: 1.0,
                l_bce: 0.0,
                l_dice: 0.0,
                l_spatial: None,
            },
            &LossWeights::default(),
        )
        .unwrap();
        let v = serde_json::to_value(r).unwrap();
        assert_eq!(v["skipped_spatial"], true);
        assert_eq!(v["total"], 1.0);
    }

    proptest! {
        #[test]
        fn losses_nonnegative(
            logits in proptest::collection::vec(-20.0f64..20.0, 1..32),
            seed in any::<u64>(),
        ) {
            let targets: Vec<f64> = logits.iter().enumerate()
                .map(|(i, _)| ((seed >> (i % 64)) & 1) as f64).collect();
            prop_assert!(bce_loss(&logits, &targets).unwrap() >= 0.0);
            let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
            let d = dice_loss(&probs, &targets, 1.0).unwrap();
            prop_assert!((0.0..1.0).contains(&d));
            let rows = logits.len() / 2;
            if rows > 0 {
                let ids: Vec<i64> = (0..rows).map(|i| ((seed >> i) & 1) as i64).collect();
                prop_assert!(token_ce(&logits[..rows * 2], 2, &ids, -100).unwrap() >= 0.0);
            }
        }

        #[test]
        fn spatial_permutation_invariant(
            data in proptest::collection::vec(0.0f64..1.0, 4 * 9),
            rot in 0usize..4,
        ) {
            let gt = GroundTruthGrid::new(3, vec![1, 0, 0, 0, 1, 0, 0, 0, 0]).unwrap();
            let stack = AttentionStack::new(2, 2, 3, data.clone()).unwrap();
            let mut maps: Vec<Vec<f64>> = data.chunks(9).map(|c| c.to_vec()).collect();
            maps.rotate_left(rot);
            let permuted = AttentionStack::from_maps(2, 2, maps).unwrap();
            let a = spatial_attention_loss(&stack, &gt, 1e-8).unwrap().value;
            let b = spatial_attention_loss(&permuted, &gt, 1e-8).unwrap().value;
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
