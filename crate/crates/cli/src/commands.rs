use std::collections::{HashMap, HashSet};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use segcurate_core::curation::{
    derive_reference_stats, global_grid, local_grid, local_points, run_stage2, FilterConfig,
    ReferenceStats, Stage2Item,
};
use segcurate_core::dataset::{self, split_check, DatasetRecord};
use segcurate_core::losses::{
    bce_loss, dice_loss, spatial_attention_loss, spatial_component,
    token_ce, total_loss, AttentionStack, GroundTruthGrid, LossError, LossParts, LossWeights,
    DEFAULT_DICE_SMOOTH,
};
use segcurate_core::mask::{downsample_gt, mask_to_bbox, BinaryMask, Connectivity, RleMask};
use segcurate_core::matching::{sweep_queries, CandidateSet, CostWeights, Matcher, TargetSet};
use segcurate_core::metrics::{dimension_report, score, LabeledScore, RawLabels};
use segcurate_core::qagen::{
    GenerationConfig, HttpGenerator, ImageTransport, MockGenerator, PromptMode, PromptRequest,
    QaGenError, QaGenerator, TemplateSet, TextGenerator,
};
use segcurate_core::review::{NewItem, ReviewError, ReviewStore, SystemClock, DEFAULT_LEASE_TTL_MS};
use segcurate_core::tensor::Tensor;

use crate::server::{router, StaticDirs};
use crate::{
    Cli, Command, ConnectivityArg, EvalArgs, FilterCommand, GridCommand, LossCommand, MatchArgs,
    QaGenArgs, ReviewCommand, ServeArgs, SweepArgs, TransportArg,
};

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or malformed input; exit 2.
    Input(String),
    /// Well-formed input that fails a domain check; exit 1.
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Domain(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// A JSON array, a single JSON value, or JSONL.
fn read_one_or_many<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = read_text(path)?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Array(items)) => items
            .into_iter()
            .map(|v| serde_json::from_value(v).map_err(|e| CliError::Input(format!("{}: {e}", path.display()))))
            .collect(),
        Ok(v) => Ok(vec![serde_json::from_value(v)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?]),
        Err(_) => read_jsonl(path),
    }
}

fn read_dataset(path: &Path) -> Result<dataset::ValidationReport, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    dataset::validate(BufReader::new(file)).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn report_issues(report: &dataset::ValidationReport) {
    for issue in &report.errors {
        eprintln!("line {}: {:?}: {}", issue.line, issue.kind, issue.message);
    }
}

/// Compact JSON with object keys sorted, newline-terminated.
fn canonical<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("output serializes");
    let mut s = serde_json::to_string(&v).expect("value serializes");
    s.push('\n');
    s
}

struct Output {
    path: Option<PathBuf>,
}

impl Output {
    fn write(&self, text: &str) -> Result<(), CliError> {
        match &self.path {
            Some(p) => std::fs::write(p, text).map_err(|e| CliError::Input(format!("{}: {e}", p.display()))),
            None => {
                use std::io::Write;
                let mut out = std::io::stdout().lock();
                out.write_all(text.as_bytes())
                    .and_then(|_| out.flush())
                    .map_err(|e| CliError::Input(e.to_string()))
            }
        }
    }

    fn json<T: Serialize>(&self, value: &T) -> Result<(), CliError> {
        self.write(&canonical(value))
    }
}

fn decode(rle: &RleMask) -> Result<BinaryMask, CliError> {
    rle.decode().map_err(domain)
}

pub fn dispatch(cli: Cli) -> Result<i32, CliError> {
    if let Some(jobs) = cli.jobs {
        // a pool may already exist when called more than once in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
    }
    let out = Output { path: cli.out };
    let table = cli.table;
    match cli.command {
        Command::Grid(GridCommand::Global { width, height }) => {
            out.json(&global_grid(width, height).map_err(domain)?)?;
        }
        Command::Grid(GridCommand::Local { h, w, x0, y0 }) => {
            let spec = local_grid(h, w);
            let mut v = serde_json::to_value(spec).expect("grid serializes");
            if let (Some(x0), Some(y0)) = (x0, y0) {
                v["points"] = serde_json::to_value(local_points(x0, y0, h, w)).expect("points serialize");
            }
            out.json(&v)?;
        }
        Command::Filter(FilterCommand::DeriveStats { category, masks }) => {
            let rles: Vec<RleMask> = read_jsonl(&masks)?;
            let masks = rles.iter().map(decode).collect::<Result<Vec<_>, _>>()?;
            out.json(&derive_reference_stats(&category, &masks).map_err(domain)?)?;
        }
        Command::Filter(FilterCommand::Run {
            items,
            stats,
            k_sigma,
            category_k_sigma,
            connectivity,
        }) => filter_run(&out, table, &items, &stats, k_sigma, &category_k_sigma, connectivity)?,
        Command::Mask2bbox(args) => {
            let text = read_text(&args.mask)?;
            let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Input(e.to_string()))?;
            let bbox = |v: Value| -> Result<Value, CliError> {
                let rle: RleMask = serde_json::from_value(v).map_err(|e| CliError::Input(e.to_string()))?;
                let b = mask_to_bbox(&decode(&rle)?).map_err(domain)?;
                Ok(serde_json::to_value(b).expect("bbox serializes"))
            };
            let result = match value {
                Value::Array(items) => Value::Array(items.into_iter().map(bbox).collect::<Result<_, _>>()?),
                v => bbox(v)?,
            };
            out.json(&result)?;
        }
        Command::Loss(LossCommand::Eval { input, gradient }) => loss_eval(&out, &input, gradient)?,
        Command::Match(args) => match_masks(&out, &args)?,
        Command::Sweep(args) => sweep(&out, &args)?,
        Command::Eval(args) => return eval(&out, table, &args),
        Command::Stats(args) => {
            let report = read_dataset(&args.data)?;
            report_issues(&report);
            out.json(&dataset::stats(&report.records, args.threshold))?;
            return Ok(if report.is_clean() { 0 } else { 1 });
        }
        Command::Validate(args) => {
            let report = read_dataset(&args.data)?;
            let split = split_check(&report.records);
            if let Some(path) = &args.canonical {
                let text: String = report.records.iter().map(|r| r.to_canonical_json() + "\n").collect();
                std::fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            }
            let clean = report.is_clean() && split.clean;
            out.json(&json!({
                "records": report.records.len(),
                "errors": report.errors,
                "warnings": report.warnings,
                "split": split,
                "clean": clean,
            }))?;
            return Ok(if clean { 0 } else { 1 });
        }
        Command::QaGen(args) => return qa_gen(&out, &args, cli.jobs),
        Command::Review(ReviewCommand::Serve(args)) => serve(&args)?,
        Command::Audit(args) => {
            let store = ReviewStore::open(&args.log, Arc::new(SystemClock), DEFAULT_LEASE_TTL_MS)
                .map_err(|e| CliError::Input(e.to_string()))?;
            let batch = store.sample_audit(args.fraction, args.seed).map_err(|e| match e {
                ReviewError::InvalidFraction(_) => CliError::Input(e.to_string()),
                e => domain(e),
            })?;
            out.json(&batch)?;
        }
    }
    Ok(0)
}

#[derive(Deserialize)]
struct FilterItem {
    id: String,
    mask: RleMask,
    #[serde(default = "one")]
    bbox_count: usize,
    category: String,
}

fn one() -> usize {
    1
}

fn filter_run(
    out: &Output,
    table: bool,
    items: &Path,
    stats: &Path,
    k_sigma: f64,
    overrides: &[String],
    connectivity: ConnectivityArg,
) -> Result<(), CliError> {
    let raw: Vec<FilterItem> = read_jsonl(items)?;
    let items = raw
        .into_iter()
        .map(|i| {
            Ok(Stage2Item {
                mask: decode(&i.mask)?,
                id: i.id,
                bbox_count: i.bbox_count,
                category: i.category,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let stats: HashMap<String, ReferenceStats> = read_one_or_many::<ReferenceStats>(stats)?
        .into_iter()
        .map(|s| (s.category.clone(), s))
        .collect();
    let mut config = FilterConfig::new(k_sigma);
    config.connectivity = match connectivity {
        ConnectivityArg::Four => Connectivity::Four,
        ConnectivityArg::Eight => Connectivity::Eight,
    };
    for o in overrides {
        let (cat, k) = o
            .rsplit_once('=')
            .ok_or_else(|| CliError::Input(format!("expected CATEGORY=K, got {o:?}")))?;
        let k: f64 = k.parse().map_err(|_| CliError::Input(format!("bad k in {o:?}")))?;
        config.per_category_k_sigma.insert(cat.to_string(), k);
    }
    let (outcomes, summary) = run_stage2(&items, &stats, &config).map_err(domain)?;
    if table {
        let mut text = format!("{:<24} {:<6} {:<8} failures\n", "id", "kept", "dropped");
        for o in &outcomes {
            let failures: Vec<String> = o
                .failures
                .iter()
                .map(|f| format!("{}={:.4} not in [{:.4}, {:.4}]", f.descriptor.name(), f.value, f.lower, f.upper))
                .collect();
            let dropped = match o.dropped_by {
                Some(r) => serde_json::to_value(r).unwrap().as_str().unwrap_or("").to_string(),
                None => "-".into(),
            };
            text.push_str(&format!("{:<24} {:<6} {:<8} {}\n", o.id, o.passed, dropped, failures.join("; ")));
        }
        text.push_str(&format!(
            "input {} kept {} dropped_by_count {} dropped_by_range {}\n",
            summary.input, summary.kept, summary.dropped_by_count, summary.dropped_by_range
        ));
        return out.write(&text);
    }
    out.json(&json!({ "outcomes": outcomes, "summary": summary }))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MaskOrTensor {
    Rle(RleMask),
    Tensor(Tensor),
}

impl MaskOrTensor {
    fn values(&self) -> Result<Vec<f64>, CliError> {
        match self {
            MaskOrTensor::Rle(r) => Ok(decode(r)?.data().iter().map(|&v| v as f64).collect()),
            MaskOrTensor::Tensor(t) => Ok(t.data().to_vec()),
        }
    }
}

fn default_ignore() -> i64 {
    -100
}

fn default_smooth() -> f64 {
    DEFAULT_DICE_SMOOTH
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LossInput {
    /// Shape [M, N, d, d].
    attention: Option<Tensor>,
    /// Shape [d, d], entries 0 or 1.
    gt_grid: Option<Tensor>,
    /// Full-resolution mask, downsampled to d×d.
    gt_mask: Option<RleMask>,
    mask_logits: Option<Tensor>,
    mask_target: Option<MaskOrTensor>,
    /// Shape [L, V].
    text_logits: Option<Tensor>,
    text_targets: Option<Vec<i64>>,
    #[serde(default = "default_ignore")]
    ignore_id: i64,
    #[serde(default = "default_smooth")]
    dice_smooth: f64,
    #[serde(default)]
    weights: LossWeights,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn loss_eval(out: &Output, input: &Path, with_gradient: bool) -> Result<(), CliError> {
    let input: LossInput = read_json(input)?;
    let mut spatial_json = Value::Null;
    let l_spatial = match &input.attention {
        None => None,
        Some(att) => {
            let &[m, n, d, d2] = att.shape() else {
                return Err(CliError::Input(format!("attention must have shape [M, N, d, d], got {:?}", att.shape())));
            };
            if d != d2 {
                return Err(CliError::Input(format!("attention maps must be square, got {d}x{d2}")));
            }
            let stack = AttentionStack::new(m, n, d, att.data().to_vec()).map_err(domain)?;
            let gt = match (&input.gt_grid, &input.gt_mask) {
                (Some(g), None) => {
                    if g.shape() != [d, d] {
                        return Err(CliError::Input(format!("gt_grid must have shape [{d}, {d}]")));
                    }
                    let cells = g
                        .data()
                        .iter()
                        .map(|&v| if v == 0.0 || v == 1.0 { Ok(v as u8) } else { Err(domain(format!("gt_grid value {v} is not 0 or 1"))) })
                        .collect::<Result<Vec<u8>, _>>()?;
                    GroundTruthGrid::new(d, cells).map_err(domain)?
                }
                (None, Some(mask)) => downsample_gt(&decode(mask)?, d).map_err(domain)?,
                _ => return Err(CliError::Input("attention needs exactly one of gt_grid or gt_mask".into())),
            };
            let result = spatial_attention_loss(&stack, &gt, input.weights.epsilon_log);
            spatial_json = match &result {
                Ok(s) => {
                    let mut v = json!({
                        "value": s.value,
                        "background_mean": s.background_mean,
                        "separation": s.separation,
                        "clamped": s.clamped,
                    });
                    if with_gradient {
                        v["gradient"] = json!(s.gradient);
                    }
                    v
                }
                Err(e) if e.is_skip() => json!({ "skipped": e.to_string() }),
                Err(_) => Value::Null,
            };
            spatial_component(result).map_err(domain)?
        }
    };

    let (l_bce, l_dice) = match (&input.mask_logits, &input.mask_target) {
        (None, None) => (0.0, 0.0),
        (Some(logits), Some(target)) => {
            let targets = target.values()?;
            let probs: Vec<f64> = logits.data().iter().map(|&x| sigmoid(x)).collect();
            (
                bce_loss(logits.data(), &targets).map_err(domain)?,
                dice_loss(&probs, &targets, input.dice_smooth).map_err(domain)?,
            )
        }
        _ => return Err(CliError::Input("mask_logits and mask_target go together".into())),
    };

    let l_text = match (&input.text_logits, &input.text_targets) {
        (None, None) => 0.0,
        (Some(logits), Some(targets)) => {
            let &[_, vocab] = logits.shape() else {
                return Err(CliError::Input("text_logits must have shape [L, V]".into()));
            };
            token_ce(logits.data(), vocab, targets, input.ignore_id).map_err(domain)?
        }
        _ => return Err(CliError::Input("text_logits and text_targets go together".into())),
    };

    let report = total_loss(
        LossParts {
            l_text,
            l_bce,
            l_dice,
            l_spatial,
        },
        &input.weights,
    )
    .map_err(|e: LossError| domain(e))?;
    out.json(&json!({ "report": report, "spatial": spatial_json }))
}

fn read_targets(path: &Path) -> Result<TargetSet, CliError> {
    let rles: Vec<RleMask> = read_one_or_many(path)?;
    let masks = rles.iter().map(decode).collect::<Result<Vec<_>, _>>()?;
    TargetSet::new(masks).map_err(domain)
}

fn match_masks(out: &Output, args: &MatchArgs) -> Result<(), CliError> {
    let cands: Tensor = read_json(&args.candidates)?;
    let &[k, h, w] = cands.shape() else {
        return Err(CliError::Input(format!("candidates must have shape [k, H, W], got {:?}", cands.shape())));
    };
    let masks: Vec<Vec<f64>> = if k == 0 {
        Vec::new()
    } else {
        cands.data().chunks(h * w).map(<[f64]>::to_vec).collect()
    };
    let candidates = CandidateSet::new(h, w, masks).map_err(domain)?;
    let targets = read_targets(&args.targets)?;
    let matcher = Matcher::new(CostWeights {
        w_bce: args.w_bce,
        w_dice: args.w_dice,
    });
    out.json(&matcher.select_masks(&candidates, &targets).map_err(domain)?)
}

fn sweep(out: &Output, args: &SweepArgs) -> Result<(), CliError> {
    let targets = read_targets(&args.targets)?;
    let (h, w) = targets.shape();
    let seed = args.seed;
    let rows = sweep_queries(
        |k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).rotate_left(32));
            CandidateSet::new(h, w, (0..k).map(|_| (0..h * w).map(|_| rng.gen::<f64>()).collect()).collect())
        },
        &targets,
        &args.ks,
        CostWeights::default(),
    )
    .map_err(domain)?;

    if args.csv {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["k", "cost_evaluations", "bypassed", "total_cost"];
        if args.timing {
            header.push("wall_time_ms");
        }
        wtr.write_record(&header).map_err(|e| CliError::Input(e.to_string()))?;
        for r in &rows {
            let mut rec = vec![
                r.k.to_string(),
                r.cost_evaluations.to_string(),
                r.bypassed.to_string(),
                r.total_cost.to_string(),
            ];
            if args.timing {
                rec.push(format!("{:.3}", r.wall_time_ms));
            }
            wtr.write_record(&rec).map_err(|e| CliError::Input(e.to_string()))?;
        }
        let bytes = wtr.into_inner().map_err(|e| CliError::Input(e.to_string()))?;
        return out.write(&String::from_utf8(bytes).expect("csv is utf-8"));
    }
    let mut v = serde_json::to_value(&rows).expect("rows serialize");
    if !args.timing {
        for row in v.as_array_mut().expect("rows are an array") {
            row.as_object_mut().expect("row is an object").remove("wall_time_ms");
        }
    }
    out.json(&v)
}

#[derive(Deserialize)]
struct Prediction {
    id: String,
    #[serde(default)]
    masks: Vec<RleMask>,
    #[serde(default)]
    mask: Option<RleMask>,
}

fn union_of(masks: &[RleMask], shape: (usize, usize)) -> Result<BinaryMask, CliError> {
    let mut acc = BinaryMask::zeros(shape.0, shape.1).map_err(domain)?;
    for m in masks {
        acc = acc.union(&decode(m)?).map_err(domain)?;
    }
    Ok(acc)
}

fn labels_of(r: &DatasetRecord) -> RawLabels {
    RawLabels {
        granularity: r.granularity.as_str().into(),
        multiplicity: r.multiplicity.as_str().into(),
        reasoning: r.reasoning.as_str().into(),
        linguistic: r.linguistic.as_str().into(),
    }
}

fn eval(out: &Output, table: bool, args: &EvalArgs) -> Result<i32, CliError> {
    let report = read_dataset(&args.data)?;
    report_issues(&report);
    let preds: Vec<Prediction> = read_jsonl(&args.preds)?;
    let mut by_id: HashMap<String, Vec<RleMask>> = HashMap::new();
    for p in preds {
        let entry = by_id.entry(p.id).or_default();
        entry.extend(p.masks);
        entry.extend(p.mask);
    }
    let known: HashSet<&str> = report.records.iter().map(|r| r.id.as_str()).collect();
    let unmatched = by_id.keys().filter(|id| !known.contains(id.as_str())).count();
    let missing = report.records.iter().filter(|r| !by_id.contains_key(&r.id)).count();
    if missing > 0 {
        eprintln!("warning: {missing} records have no prediction; scored as empty masks");
    }
    let scores = report
        .records
        .par_iter()
        .map(|r| {
            let shape = (r.masks[0].height, r.masks[0].width);
            let gt = union_of(&r.masks, shape)?;
            let pred = union_of(by_id.get(&r.id).map(Vec::as_slice).unwrap_or(&[]), shape)?;
            Ok(LabeledScore {
                labels: labels_of(r),
                score: score(&pred, &gt).map_err(|e| domain(format!("{}: {e}", r.id)))?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let dims = dimension_report(&scores).map_err(domain)?;
    if table {
        out.write(&dims.to_table())?;
    } else {
        let mut v = serde_json::to_value(&dims).expect("report serializes");
        v["missing_predictions"] = json!(missing);
        v["unmatched_predictions"] = json!(unmatched);
        out.json(&v)?;
    }
    Ok(if report.is_clean() { 0 } else { 1 })
}

fn error_kind(e: &QaGenError) -> &'static str {
    match e {
        QaGenError::MissingCategory(_) => "missing_category",
        QaGenError::UnexpectedCategory => "unexpected_category",
        QaGenError::UnknownMode(_) => "unknown_mode",
        QaGenError::EmptyRegion => "empty_region",
        QaGenError::InvalidTemperature(_) => "invalid_temperature",
        QaGenError::Image { .. } => "image",
        QaGenError::Template { .. } => "template",
        QaGenError::Transport(_) => "transport",
        QaGenError::NonOkStatus { .. } => "non_ok_status",
        QaGenError::ParseFailure { .. } => "parse_failure",
    }
}

fn read_requests(path: &Path) -> Result<Vec<PromptRequest>, CliError> {
    let values: Vec<Value> = read_jsonl(path)?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            if let Some(mode) = v.get("mode").and_then(Value::as_str) {
                mode.parse::<PromptMode>()
                    .map_err(|e| CliError::Input(format!("request {}: {e}", i + 1)))?;
            }
            serde_json::from_value(v).map_err(|e| CliError::Input(format!("request {}: {e}", i + 1)))
        })
        .collect()
}

fn qa_gen(out: &Output, args: &QaGenArgs, jobs: Option<usize>) -> Result<i32, CliError> {
    let requests = read_requests(&args.requests)?;
    let templates = match &args.templates {
        Some(dir) => TemplateSet::from_dir(dir).map_err(|e| CliError::Input(e.to_string()))?,
        None => TemplateSet::builtin(),
    };
    if args.prompt_only {
        let mut failed = false;
        let prompts: Vec<Value> = requests
            .iter()
            .map(|r| match templates.render(r, !args.no_reasoning_trace) {
                Ok(p) => json!({ "id": r.id, "prompt": p }),
                Err(e) => {
                    failed = true;
                    json!({ "id": r.id, "error": { "kind": error_kind(&e), "message": e.to_string() } })
                }
            })
            .collect();
        out.json(&prompts)?;
        return Ok(if failed { 1 } else { 0 });
    }

    let cfg = GenerationConfig {
        endpoint: args.endpoint.clone(),
        model: args.model.clone(),
        temperature: args.temperature,
        reasoning_trace: !args.no_reasoning_trace,
        image_transport: match args.image_transport {
            TransportArg::None => ImageTransport::None,
            TransportArg::Reference => ImageTransport::Reference,
            TransportArg::Base64 => ImageTransport::Base64,
        },
        api_key_env: args.api_key_env.clone(),
        retry: args.retry,
        timeout_secs: args.timeout_secs,
        max_in_flight: args.max_in_flight.or(jobs).unwrap_or(4),
    };
    cfg.validate().map_err(|e| CliError::Input(e.to_string()))?;
    let client: Box<dyn TextGenerator> = if args.mock {
        Box::new(MockGenerator::deterministic(args.mock_category.clone()))
    } else {
        Box::new(HttpGenerator::new(&cfg).map_err(domain)?)
    };
    let generator = QaGenerator::new(client.as_ref(), cfg)
        .map_err(|e| CliError::Input(e.to_string()))?
        .with_templates(templates);
    let results = generator.generate_batch(&requests);
    let failed = results.iter().any(Result::is_err);
    let results: Vec<Value> = requests
        .iter()
        .zip(&results)
        .map(|(req, r)| match r {
            Ok(qa) => json!({ "id": req.id, "ok": qa }),
            Err(e) => json!({
                "id": req.id,
                "error": { "kind": error_kind(e), "message": e.to_string(), "raw": e.raw_response() },
            }),
        })
        .collect();
    out.json(&json!({ "results": results, "routed": generator.routing().snapshot() }))?;
    Ok(if failed { 1 } else { 0 })
}

fn serve(args: &ServeArgs) -> Result<(), CliError> {
    let store = Arc::new(
        ReviewStore::open(&args.log, Arc::new(SystemClock), args.lease_ttl_secs * 1000)
            .map_err(|e| CliError::Input(e.to_string()))?,
    );
    if let Some(items) = &args.items {
        let fresh: Vec<NewItem> = read_jsonl::<NewItem>(items)?
            .into_iter()
            .filter(|i| store.item(&i.id).is_none())
            .collect();
        let n = store.enqueue(fresh).map_err(domain)?;
        log::info!("enqueued {n} new items");
    }
    let app = router(
        store.clone(),
        StaticDirs {
            images: args.images.clone(),
            ui: args.ui.clone(),
        },
    );
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Input(e.to_string()))?;
    let addr = format!("{}:{}", args.host, args.port);
    let snapshot = args.snapshot.clone().map(|p| (p, args.snapshot_every_secs.max(1)));
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Input(format!("cannot bind {addr}: {e}")))?;
        eprintln!("review service listening on http://{}", listener.local_addr().map_err(|e| CliError::Input(e.to_string()))?);
        if let Some((path, every)) = snapshot {
            let store = store.clone();
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(std::time::Duration::from_secs(every));
                loop {
                    tick.tick().await;
                    if let Err(e) = store.write_snapshot(&path) {
                        log::warn!("snapshot failed: {e}");
                    }
                }
            });
        }
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Input(e.to_string()))
    })
}
