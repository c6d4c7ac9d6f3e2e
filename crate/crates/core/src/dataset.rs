//! Corpus records: JSONL ingestion and validation, statistics, the
//! short/long instruction split and train/test leakage checks.
//!
//! A record is one instruction–answer pair with one or more target masks and
//! labels along four evaluation dimensions. Records are stored one per line
//! with alphabetized keys.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::categories::is_known_category;
use crate::mask::{mask_to_bbox, BBox, RleMask};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown label {0:?}")]
pub struct UnknownLabel(pub String);

macro_rules! label_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = UnknownLabel;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(UnknownLabel(other.to_string())),
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

label_enum!(Granularity { Semantic => "semantic", Instance => "instance", Part => "part" });
label_enum!(Multiplicity { Single => "single", Multiple => "multiple" });
label_enum!(Reasoning { Explicit => "explicit", Implicit => "implicit" });
label_enum!(Linguistic { Short => "short", Long => "long" });
label_enum!(Split { Train => "train", Test => "test" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub image_path: String,
    pub instruction: String,
    pub answer: String,
    pub masks: Vec<RleMask>,
    pub bboxes: Vec<BBox>,
    pub category: String,
    pub granularity: Granularity,
    pub multiplicity: Multiplicity,
    pub reasoning: Reasoning,
    pub linguistic: Linguistic,
    pub split: Split,
}

impl DatasetRecord {
    /// One line of canonical JSONL (keys alphabetized at every level).
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("records always serialize");
        // serde_json's default map is ordered by key
        serde_json::to_string(&value).expect("values always serialize")
    }
}

/// Record as it appears on disk, before labels are checked.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    image_path: String,
    instruction: String,
    answer: String,
    masks: Vec<RleMask>,
    bboxes: Vec<BBox>,
    category: String,
    granularity: String,
    multiplicity: String,
    reasoning: String,
    linguistic: String,
    split: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IssueKind {
    Malformed,
    BadRle,
    MaskCountMismatch,
    BboxMismatch,
    UnknownCategory,
    UnknownLabel,
    DuplicateId,
    MultiplicityMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    /// 1-based line number in the input.
    pub line: usize,
    pub id: Option<String>,
    pub kind: IssueKind,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct ValidationReport {
    pub records: Vec<DatasetRecord>,
    /// Each rejected record has at least one entry here.
    pub errors: Vec<Issue>,
    /// Findings that do not reject the record (e.g. a multiplicity label
    /// that disagrees with the mask count; the derived value is kept).
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

struct LineOutcome {
    line: usize,
    record: Option<DatasetRecord>,
    errors: Vec<Issue>,
    warnings: Vec<Issue>,
}

fn parse_label<T: FromStr<Err = UnknownLabel>>(
    field: &str,
    value: &str,
    issue: &mut impl FnMut(IssueKind, String),
) -> Option<T> {
    match value.parse() {
        Ok(v) => Some(v),
        Err(UnknownLabel(v)) => {
            issue(IssueKind::UnknownLabel, format!("{field}: unknown label {v:?}"));
            None
        }
    }
}

fn check_line(line_no: usize, text: &str) -> LineOutcome {
    let raw: RawRecord = match serde_json::from_str(text) {
        Ok(r) => r,
        Err(e) => {
            return LineOutcome {
                line: line_no,
                record: None,
                errors: vec![Issue {
                    line: line_no,
                    id: None,
                    kind: IssueKind::Malformed,
                    message: e.to_string(),
                }],
                warnings: Vec::new(),
            }
        }
    };
    let id = Some(raw.id.clone());
    let mut errors = Vec::new();
    let mut issue = |kind, message| {
        errors.push(Issue {
            line: line_no,
            id: id.clone(),
            kind,
            message,
        })
    };

    if raw.id.is_empty() {
        issue(IssueKind::Malformed, "id is empty".into());
    }
    if raw.masks.is_empty() || raw.masks.len() != raw.bboxes.len() {
        issue(
            IssueKind::MaskCountMismatch,
            format!("{} masks but {} bboxes", raw.masks.len(), raw.bboxes.len()),
        );
    }
    let first_shape = raw.masks.first().map(|m| (m.height, m.width));
    for (k, rle) in raw.masks.iter().enumerate() {
        if Some((rle.height, rle.width)) != first_shape {
            issue(IssueKind::BadRle, format!("mask {k} has a different size than mask 0"));
            continue;
        }
        let mask = match rle.decode() {
            Ok(m) => m,
            Err(e) => {
                issue(IssueKind::BadRle, format!("mask {k}: {e}"));
                continue;
            }
        };
        match mask_to_bbox(&mask) {
            Ok(derived) => {
                if let Some(given) = raw.bboxes.get(k) {
                    if *given != derived {
                        issue(
                            IssueKind::BboxMismatch,
                            format!("bbox {k} is {given:?}, mask gives {derived:?}"),
                        );
                    }
                }
            }
            Err(_) => issue(IssueKind::BadRle, format!("mask {k} has no foreground")),
        }
    }
    if !is_known_category(&raw.category) {
        issue(IssueKind::UnknownCategory, format!("unknown category {:?}", raw.category));
    }
    let granularity = parse_label::<Granularity>("granularity", &raw.granularity, &mut issue);
    let multiplicity = parse_label::<Multiplicity>("multiplicity", &raw.multiplicity, &mut issue);
    let reasoning = parse_label::<Reasoning>("reasoning", &raw.reasoning, &mut issue);
    let linguistic = parse_label::<Linguistic>("linguistic", &raw.linguistic, &mut issue);
    let split = parse_label::<Split>("split", &raw.split, &mut issue);

    let mut warnings = Vec::new();
    let derived = if raw.masks.len() >= 2 {
        Multiplicity::Multiple
    } else {
        Multiplicity::Single
    };
    if multiplicity.is_some_and(|m| m != derived) {
        warnings.push(Issue {
            line: line_no,
            id: id.clone(),
            kind: IssueKind::MultiplicityMismatch,
            message: format!(
                "labelled {} but has {} masks; using {derived}",
                raw.multiplicity,
                raw.masks.len()
            ),
        });
    }

    let record = match (granularity, multiplicity, reasoning, linguistic, split) {
        (Some(granularity), Some(_), Some(reasoning), Some(linguistic), Some(split)) if errors.is_empty() => {
            Some(DatasetRecord {
                id: raw.id,
                image_path: raw.image_path,
                instruction: raw.instruction,
                answer: raw.answer,
                masks: raw.masks,
                bboxes: raw.bboxes,
                category: raw.category,
                granularity,
                multiplicity: derived,
                reasoning,
                linguistic,
                split,
            })
        }
        _ => None,
    };
    LineOutcome {
        line: line_no,
        record,
        errors,
        warnings,
    }
}

/// Validates a JSONL stream. Lines are checked in parallel; duplicate ids are
/// resolved afterwards in line order (the first occurrence wins).
pub fn validate<R: BufRead>(reader: R) -> Result<ValidationReport, DatasetError> {
    let lines: Vec<(usize, String)> = reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)))
        .collect::<Result<_, _>>()?;
    let outcomes: Vec<LineOutcome> = lines
        .par_iter()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| check_line(*n, l))
        .collect();

    let mut report = ValidationReport::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for outcome in outcomes {
        report.warnings.extend(outcome.warnings);
        report.errors.extend(outcome.errors);
        if let Some(record) = outcome.record {
            let line = outcome.line;
            if let Some(first) = seen.get(&record.id) {
                report.errors.push(Issue {
                    line,
                    id: Some(record.id.clone()),
                    kind: IssueKind::DuplicateId,
                    message: format!("id already used on line {first}"),
                });
                continue;
            }
            seen.insert(record.id.clone(), line);
            report.records.push(record);
        }
    }
    Ok(report)
}

pub const DEFAULT_LINGUISTIC_THRESHOLD: usize = 20;

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// `short` when the instruction has fewer than `threshold` whitespace tokens.
pub fn classify_linguistic(text: &str, threshold: usize) -> Result<Linguistic, DatasetError> {
    match word_count(text) {
        0 => Err(DatasetError::EmptyInstruction),
        n if n < threshold => Ok(Linguistic::Short),
        _ => Ok(Linguistic::Long),
    }
}

pub const AREA_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mask_count: usize,
    pub qa_count: usize,
    pub class_count: usize,
    pub test_mask_count: usize,
    pub test_qa_count: usize,
    pub category_histogram: BTreeMap<String, usize>,
    /// Instruction length in whitespace tokens → record count.
    pub instruction_length_histogram: BTreeMap<usize, usize>,
    /// Mask area as a fraction of image area, 5% bins; the last bin is closed.
    pub area_ratio_histogram: Vec<AreaBin>,
    pub linguistic_threshold: usize,
}

#[derive(Default)]
struct Partial {
    masks: usize,
    qa: usize,
    test_masks: usize,
    test_qa: usize,
    categories: BTreeMap<String, usize>,
    lengths: BTreeMap<usize, usize>,
    areas: [usize; AREA_BINS],
}

impl Partial {
    fn add(mut self, r: &DatasetRecord) -> Self {
        self.qa += 1;
        self.masks += r.masks.len();
        if r.split == Split::Test {
            self.test_qa += 1;
            self.test_masks += r.masks.len();
        }
        *self.categories.entry(r.category.clone()).or_default() += 1;
        *self.lengths.entry(word_count(&r.instruction)).or_default() += 1;
        for m in &r.masks {
            let total = (m.height * m.width) as u64;
            let bin = ((m.area() * AREA_BINS as u64) / total).min(AREA_BINS as u64 - 1);
            self.areas[bin as usize] += 1;
        }
        self
    }

    fn merge(mut self, other: Partial) -> Self {
        self.masks += other.masks;
        self.qa += other.qa;
        self.test_masks += other.test_masks;
        self.test_qa += other.test_qa;
        for (k, v) in other.categories {
            *self.categories.entry(k).or_default() += v;
        }
        for (k, v) in other.lengths {
            *self.lengths.entry(k).or_default() += v;
        }
        for (a, b) in self.areas.iter_mut().zip(other.areas) {
            *a += b;
        }
        self
    }
}

pub fn stats(records: &[DatasetRecord], linguistic_threshold: usize) -> DatasetStats {
    let p = records
        .par_iter()
        .fold(Partial::default, |p, r| p.add(r))
        .reduce(Partial::default, Partial::merge);
    let width = 1.0 / AREA_BINS as f64;
    DatasetStats {
        mask_count: p.masks,
        qa_count: p.qa,
        class_count: p.categories.len(),
        test_mask_count: p.test_masks,
        test_qa_count: p.test_qa,
        category_histogram: p.categories,
        instruction_length_histogram: p.lengths,
        area_ratio_histogram: p
            .areas
            .iter()
            .enumerate()
            .map(|(i, &count)| AreaBin {
                lower: i as f64 * width,
                upper: (i + 1) as f64 * width,
                count,
            })
            .collect(),
        linguistic_threshold,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageLeak {
    pub image_path: String,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub train: usize,
    pub test: usize,
    pub id_leaks: Vec<String>,
    pub image_leaks: Vec<ImageLeak>,
    pub clean: bool,
}

pub fn split_check(records: &[DatasetRecord]) -> SplitReport {
    let mut ids: [HashSet<&str>; 2] = Default::default();
    let mut images: BTreeMap<&str, [Vec<String>; 2]> = BTreeMap::new();
    for r in records {
        let s = r.split as usize;
        ids[s].insert(&r.id);
        images.entry(&r.image_path).or_default()[s].push(r.id.clone());
    }
    let mut id_leaks: Vec<String> = ids[0].intersection(&ids[1]).map(|s| s.to_string()).collect();
    id_leaks.sort();
    let image_leaks: Vec<ImageLeak> = images
        .into_iter()
        .filter(|(_, [train, test])| !train.is_empty() && !test.is_empty())
        .map(|(path, [train_ids, test_ids])| ImageLeak {
            image_path: path.to_string(),
            train_ids,
            test_ids,
        })
        .collect();
    SplitReport {
        train: records.iter().filter(|r| r.split == Split::Train).count(),
        test: records.iter().filter(|r| r.split == Split::Test).count(),
        clean: id_leaks.is_empty() && image_leaks.is_empty(),
        id_leaks,
        image_leaks,
    }
}
