//! Curation, supervision and evaluation primitives for language-guided
//! remote-sensing segmentation datasets.

pub mod categories;
pub mod curation;
pub mod dataset;
pub mod geometry;
pub mod losses;
pub mod mask;
pub mod matching;
pub mod metrics;
pub mod qagen;
pub mod review;
pub mod tensor;

pub use categories::{is_known_category, CATEGORIES, CATEGORY_COUNT};
pub use curation::{
    global_grid, local_grid, range_filter, run_stage2, CurationError, FilterConfig, FilterVerdict,
    GridSpec, ReferenceStats, Stage2Item, Stage2Outcome, Stage2Summary,
};
pub use dataset::{
    DatasetError, DatasetRecord, DatasetStats, Granularity, Linguistic, Multiplicity, Reasoning,
    Split, ValidationReport,
};
pub use geometry::{describe, Descriptor, ShapeDescriptors};
pub use losses::{
    spatial_attention_loss, total_loss, AttentionStack, GroundTruthGrid, LossError, LossReport,
    LossWeights, SpatialLoss,
};
pub use mask::{
    connected_components, downsample_gt, mask_to_bbox, rle_decode, rle_encode, BBox, BinaryMask,
    Connectivity, MaskError, RleMask,
};
pub use matching::{
    hungarian, select_masks, AssignmentResult, CandidateSet, CostMatrix, CostWeights, MatchError,
    Matcher, TargetSet,
};
pub use metrics::{MetricsAccumulator, MetricsError, SampleScore};
pub use tensor::Tensor;
pub use qagen::{
    build_prompt, generate, parse_response, GeneratedQA, GenerationConfig, HttpGenerator,
    MockGenerator, PromptMode, PromptRequest, QaGenError, QaGenerator, TextGenerator,
};
pub use review::{
    Clock, ItemStatus, ManualClock, NewItem, Progress, ReviewDecision, ReviewError, ReviewItem,
    ReviewStore, Rubric, Stage, SystemClock, Verdict,
};
