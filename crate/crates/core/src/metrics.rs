//! gIoU (mean per-sample IoU) and cIoU (cumulative intersection over
//! cumulative union), plus the four-dimension breakdown report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Granularity, Linguistic, Multiplicity, Reasoning};
use crate::mask::{BinaryMask, MaskError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("no samples accumulated")]
    EmptyAccumulator,
    #[error("cumulative union is zero")]
    ZeroUnion,
    #[error("unknown {dimension} label {label:?}")]
    UnknownBucketLabel { dimension: &'static str, label: String },
}

/// Pixel counts and IoU of one prediction against its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

/// IoU with the conventions empty/empty = 1 and empty-gt/non-empty-pred = 0.
pub fn score(pred: &BinaryMask, gt: &BinaryMask) -> Result<SampleScore, MetricsError> {
    pred.check_same_shape(gt)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p & g) as u64;
        union += (p | g) as u64;
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok(SampleScore {
        intersection: inter,
        union,
        iou,
    })
}

/// Mergeable accumulator: shards can be built independently and combined
/// with [`MetricsAccumulator::merge`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    pub per_sample_ious: Vec<f64>,
    pub cum_intersection: u64,
    pub cum_union: u64,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, pred: &BinaryMask, gt: &BinaryMask) -> Result<SampleScore, MetricsError> {
        let s = score(pred, gt)?;
        self.push(s);
        Ok(s)
    }

    pub fn push(&mut self, s: SampleScore) {
        self.per_sample_ious.push(s.iou);
        self.cum_intersection += s.intersection;
        self.cum_union += s.union;
    }

    pub fn merge(mut self, other: MetricsAccumulator) -> MetricsAccumulator {
        self.per_sample_ious.extend(other.per_sample_ious);
        self.cum_intersection += other.cum_intersection;
        self.cum_union += other.cum_union;
        self
    }

    pub fn len(&self) -> usize {
        self.per_sample_ious.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample_ious.is_empty()
    }

    pub fn giou(&self) -> Result<f64, MetricsError> {
        if self.per_sample_ious.is_empty() {
            return Err(MetricsError::EmptyAccumulator);
        }
        Ok(self.per_sample_ious.iter().sum::<f64>() / self.per_sample_ious.len() as f64)
    }

    pub fn ciou(&self) -> Result<f64, MetricsError> {
        if self.cum_union == 0 {
            return Err(MetricsError::ZeroUnion);
        }
        Ok(self.cum_intersection as f64 / self.cum_union as f64)
    }
}

impl FromIterator<SampleScore> for MetricsAccumulator {
    fn from_iter<I: IntoIterator<Item = SampleScore>>(iter: I) -> Self {
        let mut acc = MetricsAccumulator::new();
        iter.into_iter().for_each(|s| acc.push(s));
        acc
    }
}

/// Dimension labels exactly as they appear in a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawLabels {
    pub granularity: String,
    pub multiplicity: String,
    pub reasoning: String,
    pub linguistic: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScore {
    pub labels: RawLabels,
    pub score: SampleScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub giou: Option<f64>,
    pub ciou: Option<f64>,
    pub n: usize,
}

impl MetricCell {
    fn of(acc: &MetricsAccumulator) -> Self {
        Self {
            giou: acc.giou().ok(),
            ciou: acc.ciou().ok(),
            n: acc.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub dimension: String,
    pub label: String,
    #[serde(flatten)]
    pub metrics: MetricCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    /// Nine buckets in the order Semantic, Instance, Part, Single, Multiple,
    /// Explicit, Implicit, Short, Long.
    pub buckets: Vec<BucketRow>,
    /// Whole-set metric computed once over every sample. This is the
    /// headline "Avg." value.
    pub overall: MetricCell,
    /// Mean of the non-empty bucket values, for comparison with tables that
    /// average columns.
    pub mean_of_buckets: MetricCell,
}

pub const DIMENSIONS: [(&str, &[&str]); 4] = [
    ("granularity", &["semantic", "instance", "part"]),
    ("multiplicity", &["single", "multiple"]),
    ("reasoning", &["explicit", "implicit"]),
    ("linguistic", &["short", "long"]),
];

fn bucket_index(labels: &RawLabels) -> Result<[usize; 4], MetricsError> {
    let unknown = |dimension: &'static str, label: &str| MetricsError::UnknownBucketLabel {
        dimension,
        label: label.to_string(),
    };
    let g = labels
        .granularity
        .parse::<Granularity>()
        .map_err(|_| unknown("granularity", &labels.granularity))?;
    let m = labels
        .multiplicity
        .parse::<Multiplicity>()
        .map_err(|_| unknown("multiplicity", &labels.multiplicity))?;
    let r = labels
        .reasoning
        .parse::<Reasoning>()
        .map_err(|_| unknown("reasoning", &labels.reasoning))?;
    let l = labels
        .linguistic
        .parse::<Linguistic>()
        .map_err(|_| unknown("linguistic", &labels.linguistic))?;
    Ok([
        g as usize,
        3 + m as usize,
        5 + r as usize,
        7 + l as usize,
    ])
}

pub fn dimension_report(samples: &[LabeledScore]) -> Result<DimensionReport, MetricsError> {
    let mut buckets: Vec<MetricsAccumulator> = vec![MetricsAccumulator::new(); 9];
    let mut overall = MetricsAccumulator::new();
    for s in samples {
        for b in bucket_index(&s.labels)? {
            buckets[b].push(s.score);
        }
        overall.push(s.score);
    }
    let mut rows = Vec::with_capacity(9);
    let mut idx = 0;
    for (dimension, labels) in DIMENSIONS {
        for label in labels {
            rows.push(BucketRow {
                dimension: dimension.to_string(),
                label: label.to_string(),
                metrics: MetricCell::of(&buckets[idx]),
            });
            idx += 1;
        }
    }
    let mean = |f: fn(&MetricCell) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(|r| f(&r.metrics)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mean_of_buckets = MetricCell {
        giou: mean(|c| c.giou),
        ciou: mean(|c| c.ciou),
        n: rows.iter().filter(|r| r.metrics.n > 0).count(),
    };
    Ok(DimensionReport {
        buckets: rows,
        overall: MetricCell::of(&overall),
        mean_of_buckets,
    })
}

impl DimensionReport {
    /// Aligned text table: one column per bucket then "Avg.", each cell
    /// `gIoU/cIoU` in percent.
    pub fn to_table(&self) -> String {
        let cell = |c: &MetricCell| match (c.giou, c.ciou) {
            (Some(g), Some(ci)) => format!("{:.1}/{:.1}", g * 100.0, ci * 100.0),
            (Some(g), None) => format!("{:.1}/-", g * 100.0),
            _ => "-".to_string(),
        };
        let mut headers: Vec<String> = self.buckets.iter().map(|b| title(&b.label)).collect();
        headers.push("Avg.".into());
        let mut values: Vec<String> = self.buckets.iter().map(|b| cell(&b.metrics)).collect();
        values.push(cell(&self.overall));
        let mut counts: Vec<String> = self.buckets.iter().map(|b| b.metrics.n.to_string()).collect();
        counts.push(self.overall.n.to_string());
        let widths: Vec<usize> = headers
            .iter()
            .zip(&values)
            .map(|(h, v)| h.len().max(v.len()))
            .collect();
        let mut out = String::new();
        for (name, row) in [("", &headers), ("gIoU/cIoU", &values), ("n", &counts)] {
            let _ = write!(out, "{name:<10}");
            for (v, w) in row.iter().zip(&widths) {
                let _ = write!(out, " | {v:>w$}");
            }
            out.push('\n');
        }
        if let (Some(g), Some(c)) = (self.mean_of_buckets.giou, self.mean_of_buckets.ciou) {
            let _ = writeln!(
                out,
                "mean of {} bucket columns: {:.1}/{:.1}",
                self.mean_of_buckets.n,
                g * 100.0,
                c * 100.0
            );
        }
        out
    }
}

fn title(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[u8]]) -> BinaryMask {
        BinaryMask::from_rows(rows).unwrap()
    }

    #[test]
    fn update_examples() {
        let mut acc = MetricsAccumulator::new();
        let g = m(&[&[1, 1, 0, 0]]);
        assert_eq!(acc.update(&g, &g).unwrap().iou, 1.0);
        let s = acc.update(&m(&[&[0, 0, 1, 1]]), &g).unwrap();
        assert_eq!((s.iou, s.intersection, s.union), (0.0, 0, 4));
        let s = acc.update(&m(&[&[1, 0, 0, 0]]), &g).unwrap();
        assert_eq!((s.iou, s.intersection, s.union), (0.5, 1, 2));
        let z = BinaryMask::zeros(1, 4).unwrap();
        let s = acc.update(&z, &z).unwrap();
        assert_eq!((s.iou, s.intersection, s.union), (1.0, 0, 0));
        assert_eq!(acc.update(&g, &z).unwrap().iou, 0.0);
        assert!(matches!(
            acc.update(&BinaryMask::zeros(2, 2).unwrap(), &g),
            Err(MetricsError::Mask(MaskError::ShapeMismatch { .. }))
        ));
    }

    fn s(i: u64, u: u64) -> SampleScore {
        SampleScore {
            intersection: i,
            union: u,
            iou: if u == 0 { 1.0 } else { i as f64 / u as f64 },
        }
    }

    #[test]
    fn giou_ciou_examples() {
        let acc: MetricsAccumulator = [s(1, 2), s(4, 4)].into_iter().collect();
        assert_eq!(acc.giou().unwrap(), 0.75);
        assert!((acc.ciou().unwrap() - 5.0 / 6.0).abs() < 1e-12);
        let single: MetricsAccumulator = [s(3, 10)].into_iter().collect();
        assert!((single.giou().unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(MetricsAccumulator::new().giou(), Err(MetricsError::EmptyAccumulator));
        let empty: MetricsAccumulator = [s(0, 0), s(0, 0)].into_iter().collect();
        assert_eq!(empty.ciou(), Err(MetricsError::ZeroUnion));
        // equal unions make the two metrics coincide
        let eq: MetricsAccumulator = [s(1, 8), s(5, 8), s(8, 8)].into_iter().collect();
        assert!((eq.giou().unwrap() - eq.ciou().unwrap()).abs() < 1e-15);
    }

    #[test]
    fn ciou_favours_large_objects() {
        // tiny perfect mask (1 px) and a large half-wrong mask (I=50, U=100)
        let acc: MetricsAccumulator = [s(1, 1), s(50, 100)].into_iter().collect();
        assert_eq!(acc.giou().unwrap(), 0.75);
        assert!((acc.ciou().unwrap() - 51.0 / 101.0).abs() < 1e-15);
        assert!(acc.ciou().unwrap() < acc.giou().unwrap());
    }

    fn labels(g: &str, m: &str, r: &str, l: &str) -> RawLabels {
        RawLabels {
            granularity: g.into(),
            multiplicity: m.into(),
            reasoning: r.into(),
            linguistic: l.into(),
        }
    }

    #[test]
    fn report_examples() {
        let samples = vec![
            LabeledScore {
                labels: labels("semantic", "single", "explicit", "short"),
                score: s(1, 5),
            },
            LabeledScore {
                labels: labels("semantic", "single", "explicit", "long"),
                score: s(4, 5),
            },
        ];
        let r = dimension_report(&samples).unwrap();
        let get = |label: &str| r.buckets.iter().find(|b| b.label == label).unwrap();
        assert_eq!(get("semantic").metrics, r.overall);
        assert_eq!(get("instance").metrics.n, 0);
        assert_eq!(get("part").metrics.giou, None);
        assert!((get("short").metrics.giou.unwrap() - 0.2).abs() < 1e-15);
        assert!((get("long").metrics.giou.unwrap() - 0.8).abs() < 1e-15);
        assert!((r.overall.giou.unwrap() - 0.5).abs() < 1e-15);
        for (dimension, _) in DIMENSIONS {
            let n: usize = r
                .buckets
                .iter()
                .filter(|b| b.dimension == dimension)
                .map(|b| b.metrics.n)
                .sum();
            assert_eq!(n, r.overall.n);
        }
        let table = r.to_table();
        assert!(table.contains("Semantic"));
        assert!(table.contains("Avg."));
        assert!(table.contains("50.0/50.0"));

        let bad = vec![LabeledScore {
            labels: labels("semantic", "single", "explicit", "medium"),
            score: s(1, 1),
        }];
        assert_eq!(
            dimension_report(&bad),
            Err(MetricsError::UnknownBucketLabel {
                dimension: "linguistic",
                label: "medium".into()
            })
        );
    }
}
