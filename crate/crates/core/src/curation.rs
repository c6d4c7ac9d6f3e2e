//! Point-prompt grids for mask proposal, and the automatic mask filter:
//! component-count consistency followed by per-category acceptable ranges
//! derived from a gold reference set.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{describe, Descriptor, ShapeDescriptors, GEOMETRY_CONVENTION};
use crate::mask::{connected_components, BinaryMask, Connectivity, MaskError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CurationError {
    #[error("region {width}x{height} is too small for a 4x4 prompt grid")]
    RegionTooSmall { width: usize, height: usize },
    #[error("need at least 2 gold masks, got {0}")]
    InsufficientGold(usize),
    #[error("no reference statistics for category {0:?}")]
    MissingCategoryStats(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

pub const GLOBAL_GRID_SIDE: usize = 4;
/// Aspect ratio at or above which the local grid collapses to a single line.
pub const ELONGATION_THRESHOLD: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(rename = "R")]
    pub rows: usize,
    #[serde(rename = "C")]
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: f64,
    pub y: f64,
}

/// 16 prompts at the cell centers of a 4×4 grid over the whole image,
/// row-major.
pub fn global_grid(width: usize, height: usize) -> Result<Vec<PointPrompt>, CurationError> {
    if width < GLOBAL_GRID_SIDE || height < GLOBAL_GRID_SIDE {
        return Err(CurationError::RegionTooSmall { width, height });
    }
    let n = GLOBAL_GRID_SIDE as f64;
    let mut points = Vec::with_capacity(GLOBAL_GRID_SIDE * GLOBAL_GRID_SIDE);
    for r in 0..GLOBAL_GRID_SIDE {
        for c in 0..GLOBAL_GRID_SIDE {
            points.push(PointPrompt {
                x: (2 * c + 1) as f64 * width as f64 / (2.0 * n),
                y: (2 * r + 1) as f64 * height as f64 / (2.0 * n),
            });
        }
    }
    Ok(points)
}

/// Grid dimensions for a crop of `h × w`. Elongated crops (aspect ≥ 2.5) get
/// `⌈aspect⌉ + 1` prompts along their long side; everything else gets 4×4.
pub fn local_grid(h: usize, w: usize) -> GridSpec {
    let (long, short) = (h.max(w).max(1), h.min(w).max(1));
    // long/short >= 2.5 in exact integer arithmetic
    if 2 * long >= 5 * short {
        GridSpec {
            rows: long.div_ceil(short) + 1,
            cols: 1,
        }
    } else {
        GridSpec { rows: 4, cols: 4 }
    }
}

/// Prompt positions inside an `h × w` crop whose top-left corner is at
/// `(x0, y0)`. For elongated crops the `R` prompts run along the long side.
pub fn local_points(x0: f64, y0: f64, h: usize, w: usize) -> Vec<PointPrompt> {
    let spec = local_grid(h, w);
    let (along, across) = if spec.cols == 1 && w > h {
        // horizontal crop: lay the rows along x
        (spec.cols, spec.rows)
    } else {
        (spec.rows, spec.cols)
    };
    let mut pts = Vec::with_capacity(along * across);
    for r in 0..along {
        for c in 0..across {
            pts.push(PointPrompt {
                x: x0 + (2 * c + 1) as f64 * w as f64 / (2 * across) as f64,
                y: y0 + (2 * r + 1) as f64 * h as f64 / (2 * along) as f64,
            });
        }
    }
    pts
}

/// Passes iff the mask has at least one component and exactly as many
/// components as it has boxes.
pub fn count_consistency(mask: &BinaryMask, bbox_count: usize) -> bool {
    count_consistency_with(mask, bbox_count, Connectivity::Eight)
}

pub fn count_consistency_with(mask: &BinaryMask, bbox_count: usize, connectivity: Connectivity) -> bool {
    let count = connected_components(mask, connectivity).count();
    count >= 1 && count == bbox_count
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: f64,
    pub std: f64,
}

impl Band {
    pub fn bounds(&self, k_sigma: f64) -> (f64, f64) {
        (self.mean - k_sigma * self.std, self.mean + k_sigma * self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptorBands {
    pub eccentricity: Band,
    pub circularity: Band,
    pub solidity: Band,
    pub symmetry: Band,
    pub extent: Band,
}

impl DescriptorBands {
    pub fn get(&self, d: Descriptor) -> Band {
        match d {
            Descriptor::Eccentricity => self.eccentricity,
            Descriptor::Circularity => self.circularity,
            Descriptor::Solidity => self.solidity,
            Descriptor::Symmetry => self.symmetry,
            Descriptor::Extent => self.extent,
        }
    }
}

/// Per-category reference statistics. Serialized as
/// `{"category", "convention", "n", "metrics": {name: {"mean", "std"}}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub category: String,
    pub convention: String,
    pub n: usize,
    pub metrics: DescriptorBands,
}

fn band(values: &[f64]) -> Band {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Band {
        mean,
        std: (ss / (n - 1.0)).sqrt(),
    }
}

/// Sample mean and (n−1) standard deviation per descriptor.
pub fn stats_from_descriptors(
    category: &str,
    descriptors: &[ShapeDescriptors],
) -> Result<ReferenceStats, CurationError> {
    if descriptors.len() < 2 {
        return Err(CurationError::InsufficientGold(descriptors.len()));
    }
    let col = |d: Descriptor| band(&descriptors.iter().map(|s| s.get(d)).collect::<Vec<_>>());
    Ok(ReferenceStats {
        category: category.to_string(),
        convention: GEOMETRY_CONVENTION.to_string(),
        n: descriptors.len(),
        metrics: DescriptorBands {
            eccentricity: col(Descriptor::Eccentricity),
            circularity: col(Descriptor::Circularity),
            solidity: col(Descriptor::Solidity),
            symmetry: col(Descriptor::Symmetry),
            extent: col(Descriptor::Extent),
        },
    })
}

pub fn derive_reference_stats(category: &str, gold: &[BinaryMask]) -> Result<ReferenceStats, CurationError> {
    if gold.len() < 2 {
        return Err(CurationError::InsufficientGold(gold.len()));
    }
    let descriptors = gold
        .par_iter()
        .map(describe)
        .collect::<Result<Vec<_>, _>>()?;
    stats_from_descriptors(category, &descriptors)
}

pub const DEFAULT_K_SIGMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeFailure {
    pub descriptor: Descriptor,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub passed: bool,
    pub failures: Vec<RangeFailure>,
}

impl FilterVerdict {
    fn from_failures(failures: Vec<RangeFailure>) -> Self {
        Self {
            passed: failures.is_empty(),
            failures,
        }
    }
}

/// Checks every descriptor against `[mean − kσ·std, mean + kσ·std]`
/// (inclusive) and records each violation with its bounds.
pub fn range_filter(d: &ShapeDescriptors, stats: &ReferenceStats, k_sigma: f64) -> FilterVerdict {
    let failures = Descriptor::ALL
        .iter()
        .filter_map(|&desc| {
            let value = d.get(desc);
            let (lower, upper) = stats.metrics.get(desc).bounds(k_sigma);
            (!(lower..=upper).contains(&value)).then_some(RangeFailure {
                descriptor: desc,
                value,
                lower,
                upper,
            })
        })
        .collect();
    FilterVerdict::from_failures(failures)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Item {
    pub id: String,
    pub mask: BinaryMask,
    pub bbox_count: usize,
    pub category: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Count,
    Range,
}

/// One line of the filter report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Outcome {
    pub id: String,
    pub category: String,
    pub components: usize,
    pub bbox_count: usize,
    pub passed: bool,
    pub dropped_by: Option<DropReason>,
    /// Absent when the item was dropped by the count check.
    pub descriptors: Option<ShapeDescriptors>,
    pub failures: Vec<RangeFailure>,
}

impl Stage2Outcome {
    pub fn verdict(&self) -> FilterVerdict {
        FilterVerdict {
            passed: self.passed,
            failures: self.failures.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub input: usize,
    pub kept: usize,
    pub dropped_by_count: usize,
    pub dropped_by_range: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterConfig {
    pub default_k_sigma: f64,
    pub per_category_k_sigma: HashMap<String, f64>,
    pub connectivity: Connectivity,
}

impl FilterConfig {
    pub fn new(default_k_sigma: f64) -> Self {
        Self {
            default_k_sigma,
            ..Default::default()
        }
    }

    pub fn k_sigma(&self, category: &str) -> f64 {
        self.per_category_k_sigma
            .get(category)
            .copied()
            .unwrap_or(self.default_k_sigma)
    }
}

pub fn run_stage2(
    items: &[Stage2Item],
    stats: &HashMap<String, ReferenceStats>,
    config: &FilterConfig,
) -> Result<(Vec<Stage2Outcome>, Stage2Summary), CurationError> {
    if let Some(missing) = items.iter().find(|i| !stats.contains_key(&i.category)) {
        return Err(CurationError::MissingCategoryStats(missing.category.clone()));
    }
    let outcomes = items
        .par_iter()
        .map(|item| evaluate_item(item, &stats[&item.category], config))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = outcomes.iter().fold(
        Stage2Summary {
            input: outcomes.len(),
            ..Default::default()
        },
        |mut s, o| {
            match o.dropped_by {
                None => s.kept += 1,
                Some(DropReason::Count) => s.dropped_by_count += 1,
                Some(DropReason::Range) => s.dropped_by_range += 1,
            }
            s
        },
    );
    Ok((outcomes, summary))
}

fn evaluate_item(
    item: &Stage2Item,
    stats: &ReferenceStats,
    config: &FilterConfig,
) -> Result<Stage2Outcome, CurationError> {
    let components = connected_components(&item.mask, config.connectivity).count();
    let mut outcome = Stage2Outcome {
        id: item.id.clone(),
        category: item.category.clone(),
        components,
        bbox_count: item.bbox_count,
        passed: false,
        dropped_by: Some(DropReason::Count),
        descriptors: None,
        failures: Vec::new(),
    };
    if components == 0 || components != item.bbox_count {
        return Ok(outcome);
    }
    let descriptors = crate::geometry::describe_with(&item.mask, config.connectivity)?;
    let verdict = range_filter(&descriptors, stats, config.k_sigma(&item.category));
    outcome.descriptors = Some(descriptors);
    outcome.passed = verdict.passed;
    outcome.dropped_by = (!verdict.passed).then_some(DropReason::Range);
    outcome.failures = verdict.failures;
    Ok(outcome)
}
