//! Binary masks and the operations every other module builds on: run-length
//! coding, connected components, tight bounding boxes and grid downsampling.
//!
//! Masks are stored row-major. Pixel `(r, c)` lives at index `r * width + c`.
//! Coordinates handed out to callers use `x = column`, `y = row`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::GroundTruthGrid;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("mask dimensions must be at least 1x1, got {height}x{width}")]
    InvalidDimensions { height: usize, width: usize },
    #[error("mask data has {actual} elements, expected {expected}")]
    DataLength { expected: usize, actual: usize },
    #[error("mask element at index {index} is {value}, expected 0 or 1")]
    NonBinary { index: usize, value: u8 },
    #[error("run lengths sum to {actual}, expected {expected}")]
    RunSumMismatch { expected: u64, actual: u64 },
    #[error("run {index} has zero length; only the leading background run may be empty")]
    InteriorZeroRun { index: usize },
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("grid size {d} is invalid for a {height}x{width} mask")]
    InvalidGridSize { d: usize, height: usize, width: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
}

/// H×W binary raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::InvalidDimensions { height, width });
        }
        if data.len() != height * width {
            return Err(MaskError::DataLength {
                expected: height * width,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(MaskError::NonBinary { index, value });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self, MaskError> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Result<Self, MaskError> {
        Self::new(height, width, vec![1; height * width])
    }

    /// Builds a mask from nested rows. Handy for small literal fixtures.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self, MaskError> {
        let height = rows.len();
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(height * width);
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(MaskError::DataLength {
                    expected: height * width,
                    actual: data.len() + row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(height, width, data)
    }

    /// Builds a mask from any predicate over `(row, col)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, MaskError> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value as u8;
    }

    /// Foreground pixel count.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Iterates `(row, col)` of foreground pixels in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| (i / w, i % w))
    }

    pub fn check_same_shape(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.shape() != other.shape() {
            return Err(MaskError::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// Pixel-wise union of two equally shaped masks.
    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a | b)
            .collect();
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Rotates the raster by 90° clockwise.
    pub fn rotate90(&self) -> BinaryMask {
        let (h, w) = self.shape();
        let mut data = vec![0; h * w];
        // new raster is w rows by h cols; (r, c) -> (c, h - 1 - r)
        for r in 0..h {
            for c in 0..w {
                data[c * h + (h - 1 - r)] = self.data[r * w + c];
            }
        }
        BinaryMask {
            height: w,
            width: h,
            data,
        }
    }

    /// Places this mask into a larger zero canvas at `(row_off, col_off)`.
    pub fn translated(&self, row_off: usize, col_off: usize, height: usize, width: usize) -> BinaryMask {
        assert!(row_off + self.height <= height && col_off + self.width <= width);
        let mut out = vec![0; height * width];
        for r in 0..self.height {
            let src = &self.data[r * self.width..(r + 1) * self.width];
            let start = (r + row_off) * width + col_off;
            out[start..start + self.width].copy_from_slice(src);
        }
        BinaryMask {
            height,
            width,
            data: out,
        }
    }
}

/// Row-major, background-first run-length form. Serialized as
/// `{"h": H, "w": W, "runs": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "w")]
    pub width: usize,
    pub runs: Vec<u64>,
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut len = 0u64;
    for &v in &mask.data {
        if v != current {
            runs.push(len);
            current = v;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    RleMask {
        height: mask.height,
        width: mask.width,
        runs,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask, MaskError> {
    if rle.height == 0 || rle.width == 0 {
        return Err(MaskError::InvalidDimensions {
            height: rle.height,
            width: rle.width,
        });
    }
    let expected = (rle.height * rle.width) as u64;
    if let Some(index) = rle.runs.iter().skip(1).position(|&r| r == 0) {
        return Err(MaskError::InteriorZeroRun { index: index + 1 });
    }
    let actual = rle
        .runs
        .iter()
        .try_fold(0u64, |acc, &r| acc.checked_add(r))
        .unwrap_or(u64::MAX);
    if actual != expected {
        return Err(MaskError::RunSumMismatch { expected, actual });
    }
    let mut data = Vec::with_capacity(expected as usize);
    for (i, &run) in rle.runs.iter().enumerate() {
        data.resize(data.len() + run as usize, (i % 2) as u8);
    }
    BinaryMask::new(rle.height, rle.width, data)
}

impl RleMask {
    pub fn decode(&self) -> Result<BinaryMask, MaskError> {
        rle_decode(self)
    }

    /// Foreground pixel count without materializing the raster.
    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).sum()
    }
}

impl From<&BinaryMask> for RleMask {
    fn from(mask: &BinaryMask) -> Self {
        rle_encode(mask)
    }
}

/// Tight inclusive box, `x` = column, `y` = row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }
}

pub fn mask_to_bbox(mask: &BinaryMask) -> Result<BBox, MaskError> {
    let mut bbox: Option<BBox> = None;
    for (y, x) in mask.foreground() {
        match bbox.as_mut() {
            None => {
                bbox = Some(BBox {
                    x_min: x,
                    y_min: y,
                    x_max: x,
                    y_max: y,
                })
            }
            Some(b) => {
                b.x_min = b.x_min.min(x);
                b.x_max = b.x_max.max(x);
                // row-major scan: y never decreases
                b.y_max = y;
            }
        }
    }
    bbox.ok_or(MaskError::EmptyMask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Component labels in row-major order; 0 is background and components are
/// numbered `1..=count` by first encounter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabeling {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    count: usize,
}

impl ComponentLabeling {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label_at(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Pixel count per component, indexed by `label - 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            if l != 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }

    /// Label of the largest component, ties resolved toward the smaller label.
    pub fn largest(&self) -> Option<u32> {
        let sizes = self.sizes();
        let mut best: Option<(usize, usize)> = None;
        for (i, &s) in sizes.iter().enumerate() {
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i as u32 + 1)
    }

    pub fn component_mask(&self, label: u32) -> BinaryMask {
        let data = self.labels.iter().map(|&l| (l == label) as u8).collect();
        BinaryMask {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentLabeling {
    let (h, w) = mask.shape();
    let mut labels = vec![0u32; h * w];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    let offsets = connectivity.offsets();
    for start in 0..h * w {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            let (r, c) = ((idx / w) as isize, (idx % w) as isize);
            for &(dr, dc) in offsets {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let n = nr as usize * w + nc as usize;
                if mask.data[n] != 0 && labels[n] == 0 {
                    labels[n] = count;
                    queue.push_back(n);
                }
            }
        }
    }
    ComponentLabeling {
        height: h,
        width: w,
        labels,
        count: count as usize,
    }
}

/// Downsamples to a `d×d` grid. Rows and columns are split proportionally
/// (cell `i` spans `[i*H/d, (i+1)*H/d)`), and a cell is set when any of its
/// pixels is foreground.
pub fn downsample_gt(mask: &BinaryMask, d: usize) -> Result<GroundTruthGrid, MaskError> {
    let (h, w) = mask.shape();
    if d == 0 || h < d || w < d {
        return Err(MaskError::InvalidGridSize {
            d,
            height: h,
            width: w,
        });
    }
    let mut cells = vec![0u8; d * d];
    for (r, c) in mask.foreground() {
        // inverse of the proportional partition: largest i with i*h/d <= r
        let gi = ((r + 1) * d - 1) / h;
        let gj = ((c + 1) * d - 1) / w;
        cells[gi * d + gj] = 1;
    }
    Ok(GroundTruthGrid::new(d, cells).expect("cells are binary and d*d long"))
}
