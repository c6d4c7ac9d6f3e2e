//! Question/answer generation through a text-generation endpoint: prompt
//! templates, the request wire format, pluggable clients and response
//! parsing.
//!
//! Responses are expected to end with a fenced JSON block. For QA prompts the
//! block carries `question` and `answer`; for category assignment it carries
//! `category`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::categories::is_known_category;
use crate::dataset::{Linguistic, Reasoning, DEFAULT_LINGUISTIC_THRESHOLD};
use crate::mask::BBox;

#[derive(Debug, Error)]
pub enum QaGenError {
    #[error("mode {0} needs a category")]
    MissingCategory(PromptMode),
    #[error("category assignment requests must not carry a category")]
    UnexpectedCategory,
    #[error("unknown prompt mode {0:?}")]
    UnknownMode(String),
    #[error("region lists no boxes")]
    EmptyRegion,
    #[error("temperature must be finite and non-negative, got {0}")]
    InvalidTemperature(f64),
    #[error("failed to read image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to read template {path}: {source}")]
    Template {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint answered with status {status}")]
    NonOkStatus { status: u16, body: String },
    #[error("could not parse response: {reason}")]
    ParseFailure { reason: String, raw: String },
}

impl QaGenError {
    /// Raw response text, kept for parse failures so the item can be reviewed.
    pub fn raw_response(&self) -> Option<&str> {
        match self {
            QaGenError::ParseFailure { raw, .. } => Some(raw),
            QaGenError::NonOkStatus { body, .. } => Some(body),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    SingleTarget,
    MultiTarget,
    CategoryAssignment,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::SingleTarget => "single_target",
            PromptMode::MultiTarget => "multi_target",
            PromptMode::CategoryAssignment => "category_assignment",
        }
    }
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = QaGenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single_target" => Ok(PromptMode::SingleTarget),
            "multi_target" => Ok(PromptMode::MultiTarget),
            "category_assignment" => Ok(PromptMode::CategoryAssignment),
            other => Err(QaGenError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Style {
    pub reasoning: Reasoning,
    pub linguistic: Linguistic,
}

impl Default for Style {
    fn default() -> Self {
        Style {
            reasoning: Reasoning::Explicit,
            linguistic: Linguistic::Short,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionRef {
    Bbox(BBox),
    Boxes(Vec<BBox>),
    /// Opaque reference to a stored mask (file name, RLE id, ...).
    Mask(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub mode: PromptMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default)]
    pub style: Style,
    pub region: RegionRef,
    pub image: String,
}

impl PromptRequest {
    pub fn validate(&self) -> Result<(), QaGenError> {
        let has_category = self.category.as_deref().is_some_and(|c| !c.trim().is_empty());
        match self.mode {
            PromptMode::SingleTarget | PromptMode::MultiTarget if !has_category => {
                return Err(QaGenError::MissingCategory(self.mode))
            }
            PromptMode::CategoryAssignment if self.category.is_some() => {
                return Err(QaGenError::UnexpectedCategory)
            }
            _ => {}
        }
        if matches!(&self.region, RegionRef::Boxes(b) if b.is_empty()) {
            return Err(QaGenError::EmptyRegion);
        }
        Ok(())
    }
}

const BUILTIN_SINGLE: &str = include_str!("../assets/prompts/single_target.txt");
const BUILTIN_MULTI: &str = include_str!("../assets/prompts/multi_target.txt");
const BUILTIN_ASSIGN: &str = include_str!("../assets/prompts/category_assignment.txt");

/// The three prompt templates. Slots: `{image}`, `{category}`, `{region}`,
/// `{style}` and `{reasoning}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub single_target: String,
    pub multi_target: String,
    pub category_assignment: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        TemplateSet {
            single_target: BUILTIN_SINGLE.to_string(),
            multi_target: BUILTIN_MULTI.to_string(),
            category_assignment: BUILTIN_ASSIGN.to_string(),
        }
    }

    /// Loads `single_target.txt`, `multi_target.txt` and
    /// `category_assignment.txt` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, QaGenError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|source| QaGenError::Template { path, source })
        };
        Ok(TemplateSet {
            single_target: read("single_target.txt")?,
            multi_target: read("multi_target.txt")?,
            category_assignment: read("category_assignment.txt")?,
        })
    }

    pub fn get(&self, mode: PromptMode) -> &str {
        match mode {
            PromptMode::SingleTarget => &self.single_target,
            PromptMode::MultiTarget => &self.multi_target,
            PromptMode::CategoryAssignment => &self.category_assignment,
        }
    }

    pub fn render(&self, req: &PromptRequest, reasoning_trace: bool) -> Result<String, QaGenError> {
        req.validate()?;
        let template = self.get(req.mode);
        let reasoning = if reasoning_trace { REASONING_CLAUSE } else { "" };
        let mut out = template
            .replace("{image}", &req.image)
            .replace("{region}", &describe_region(&req.region))
            .replace("{style}", &style_clause(req.style));
        out = if reasoning.is_empty() {
            out.replace("{reasoning}\n", "").replace("{reasoning}", "")
        } else {
            out.replace("{reasoning}", reasoning)
        };
        if let Some(category) = &req.category {
            out = out.replace("{category}", category.trim());
        }
        Ok(out)
    }
}

const REASONING_CLAUSE: &str =
    "Think through the scene step by step before you write the final answer.";

pub fn style_clause(style: Style) -> String {
    let reasoning = match style.reasoning {
        Reasoning::Explicit => {
            "Style: explicit. Refer to the target directly by its category name and its visible attributes such as colour, shape, size and position."
        }
        Reasoning::Implicit => {
            "Style: implicit. Do not name the target category; describe a purpose, function or situation so that finding the target requires reasoning about the scene."
        }
    };
    let linguistic = match style.linguistic {
        Linguistic::Short => format!(
            "Length: short. Keep the question under {DEFAULT_LINGUISTIC_THRESHOLD} words."
        ),
        Linguistic::Long => format!(
            "Length: long. Write a question of at least {DEFAULT_LINGUISTIC_THRESHOLD} words that also describes the surrounding context and spatial relations."
        ),
    };
    format!("{reasoning}\n{linguistic}")
}

fn describe_box(b: &BBox) -> String {
    format!(
        "the box from (x={}, y={}) to (x={}, y={})",
        b.x_min, b.y_min, b.x_max, b.y_max
    )
}

pub fn describe_region(region: &RegionRef) -> String {
    match region {
        RegionRef::Bbox(b) => describe_box(b),
        RegionRef::Boxes(boxes) => {
            let mut out = String::new();
            for (i, b) in boxes.iter().enumerate() {
                if i > 0 {
                    out.push_str("; ");
                }
                let _ = write!(out, "{}) {}", i + 1, describe_box(b));
            }
            out
        }
        RegionRef::Mask(reference) => format!("the masked region given by mask reference {reference}"),
    }
}

/// Renders the built-in template for `req` with the reasoning-trace clause on.
pub fn build_prompt(req: &PromptRequest) -> Result<String, QaGenError> {
    TemplateSet::builtin().render(req, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageTransport {
    /// No image field is sent.
    None,
    /// The image path is sent as a string.
    #[default]
    Reference,
    /// The file is read and sent as `{"base64": ...}`.
    Base64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub reasoning_trace: bool,
    pub image_transport: ImageTransport,
    /// Name of the environment variable holding a bearer token.
    pub api_key_env: Option<String>,
    /// Retry once on transport errors and 5xx answers.
    pub retry: bool,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            endpoint: "http://127.0.0.1:8080/generate".to_string(),
            model: String::new(),
            temperature: 1.0,
            reasoning_trace: true,
            image_transport: ImageTransport::Reference,
            api_key_env: None,
            retry: false,
            timeout_secs: 120,
            max_in_flight: 4,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), QaGenError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(QaGenError::InvalidTemperature(self.temperature));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImagePayload {
    Reference(String),
    Inline { base64: String },
}

/// Body of one generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImagePayload>,
}

pub trait TextGenerator: Send + Sync {
    /// Returns the response body as text.
    fn complete(&self, request: &GenerationRequest) -> Result<String, QaGenError>;
}

/// POSTs the request as JSON to a fixed endpoint.
pub struct HttpGenerator {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    retry: bool,
}

impl HttpGenerator {
    pub fn new(cfg: &GenerationConfig) -> Result<Self, QaGenError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| QaGenError::Transport(e.to_string()))?;
        let api_key = cfg
            .api_key_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok());
        Ok(HttpGenerator {
            client,
            endpoint: cfg.endpoint.clone(),
            api_key,
            retry: cfg.retry,
        })
    }

    fn attempt(&self, body: &[u8]) -> Result<String, QaGenError> {
        let mut builder = self
            .client
            .post(&self.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| QaGenError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| QaGenError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(QaGenError::NonOkStatus {
                status: status.as_u16(),
                body: text,
            });
        }
        Ok(text)
    }
}

impl TextGenerator for HttpGenerator {
    fn complete(&self, request: &GenerationRequest) -> Result<String, QaGenError> {
        let body = serde_json::to_vec(request).expect("request serializes");
        match self.attempt(&body) {
            Err(e) if self.retry && is_retryable(&e) => {
                log::warn!("retrying generation call after: {e}");
                self.attempt(&body)
            }
            other => other,
        }
    }
}

fn is_retryable(e: &QaGenError) -> bool {
    match e {
        QaGenError::Transport(_) => true,
        QaGenError::NonOkStatus { status, .. } => *status >= 500,
        _ => false,
    }
}

type Responder = dyn Fn(&GenerationRequest) -> Result<String, QaGenError> + Send + Sync;

/// In-process client for tests and dry runs. Records every request it sees.
pub struct MockGenerator {
    responder: Box<Responder>,
    seen: Mutex<Vec<GenerationRequest>>,
}

impl MockGenerator {
    pub fn new(
        responder: impl Fn(&GenerationRequest) -> Result<String, QaGenError> + Send + Sync + 'static,
    ) -> Self {
        MockGenerator {
            responder: Box::new(responder),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn fixed(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |_| Ok(text.clone()))
    }

    /// Answers assignment prompts with `category` and QA prompts with a
    /// question/answer pair derived from a hash of the prompt.
    pub fn deterministic(category: impl Into<String>) -> Self {
        let category = category.into();
        Self::new(move |req| {
            if req.prompt.contains("\"category\"") {
                return Ok(fenced(&serde_json::json!({ "category": category })));
            }
            let tag = fnv1a(req.prompt.as_bytes());
            Ok(fenced(&serde_json::json!({
                "question": format!("Which region matches request {tag:016x}?"),
                "answer": format!("The target region for request {tag:016x}."),
            })))
        })
    }

    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl TextGenerator for MockGenerator {
    fn complete(&self, request: &GenerationRequest) -> Result<String, QaGenError> {
        self.seen.lock().unwrap().push(request.clone());
        (self.responder)(request)
    }
}

fn fenced(value: &serde_json::Value) -> String {
    format!("Here is the result.\n```json\n{value}\n```\n")
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParsedContent {
    Qa { question: String, answer: String },
    Category { category: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub content: ParsedContent,
    pub warnings: Vec<String>,
}

/// Contents of every ``` fenced block, with a leading language tag removed.
fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let Some(close) = after.find("```") else { break };
        let body = &after[..close];
        let tag_len = body
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
            .unwrap_or(body.len());
        let body = if tag_len > 0 && body[tag_len..].starts_with(char::is_whitespace) {
            &body[tag_len..]
        } else {
            body
        };
        blocks.push(body.trim());
        rest = &after[close + 3..];
    }
    blocks
}

fn required_string(obj: &serde_json::Map<String, serde_json::Value>, key: &str) -> Option<String> {
    obj.get(key)?
        .as_str()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

/// Extracts the first fenced JSON object holding the keys `mode` needs
/// (`question` + `answer`, or `category`). Values are trimmed and must be
/// non-empty. A warning is attached when more than one fenced JSON object is
/// present.
pub fn parse_response(text: &str, mode: PromptMode) -> Result<ParsedResponse, QaGenError> {
    let failure = |reason: &str| QaGenError::ParseFailure {
        reason: reason.to_string(),
        raw: text.to_string(),
    };
    let objects: Vec<serde_json::Map<String, serde_json::Value>> = fenced_blocks(text)
        .into_iter()
        .filter_map(|b| match serde_json::from_str(b) {
            Ok(serde_json::Value::Object(m)) => Some(m),
            _ => None,
        })
        .collect();
    if objects.is_empty() {
        return Err(failure("no fenced JSON object found"));
    }
    let mut warnings = Vec::new();
    if objects.len() > 1 {
        warnings.push(format!(
            "response holds {} fenced JSON objects; using the first with the required keys",
            objects.len()
        ));
    }
    let content = objects.iter().find_map(|obj| match mode {
        PromptMode::CategoryAssignment => {
            required_string(obj, "category").map(|category| ParsedContent::Category { category })
        }
        PromptMode::SingleTarget | PromptMode::MultiTarget => {
            match (required_string(obj, "question"), required_string(obj, "answer")) {
                (Some(question), Some(answer)) => Some(ParsedContent::Qa { question, answer }),
                _ => None,
            }
        }
    });
    match content {
        Some(content) => Ok(ParsedResponse { content, warnings }),
        None => Err(failure(match mode {
            PromptMode::CategoryAssignment => "no fenced object with a non-empty \"category\"",
            _ => "no fenced object with non-empty \"question\" and \"answer\"",
        })),
    }
}

/// Text handed to [`parse_response`]. Bodies that are JSON (a provider
/// envelope) are flattened to their string leaves so escaped fences survive.
pub fn response_text(body: &str) -> String {
    fn leaves(v: &serde_json::Value, out: &mut Vec<String>) {
        match v {
            serde_json::Value::String(s) => out.push(s.clone()),
            serde_json::Value::Array(a) => a.iter().for_each(|x| leaves(x, out)),
            serde_json::Value::Object(m) => m.values().for_each(|x| leaves(x, out)),
            _ => {}
        }
    }
    match serde_json::from_str::<serde_json::Value>(body) {
        Ok(v @ (serde_json::Value::String(_) | serde_json::Value::Array(_) | serde_json::Value::Object(_))) => {
            let mut out = Vec::new();
            leaves(&v, &mut out);
            out.join("\n")
        }
        _ => body.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQA {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question: String,
    pub answer: String,
    /// Category used for the QA prompt: the request's, or the one assigned.
    pub category: String,
    /// Set when the category came from an assignment call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned_category: Option<String>,
    pub out_of_vocabulary: bool,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment_raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteReason {
    OutOfVocabulary,
    ParseFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutedRecord {
    pub id: Option<String>,
    pub image: String,
    pub reason: RouteReason,
    pub category: Option<String>,
    pub raw_response: String,
}

/// Append-only sink of records that need a human look.
#[derive(Debug, Default)]
pub struct ReviewRouting {
    items: Mutex<Vec<RoutedRecord>>,
}

impl ReviewRouting {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, record: RoutedRecord) {
        self.items.lock().unwrap().push(record);
    }

    pub fn len(&self) -> usize {
        self.items.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<RoutedRecord> {
        self.items.lock().unwrap().clone()
    }
}

/// Prompt rendering plus one client; shared across worker threads.
pub struct QaGenerator<'a> {
    client: &'a dyn TextGenerator,
    cfg: GenerationConfig,
    templates: TemplateSet,
    routing: ReviewRouting,
}

impl<'a> QaGenerator<'a> {
    pub fn new(client: &'a dyn TextGenerator, cfg: GenerationConfig) -> Result<Self, QaGenError> {
        cfg.validate()?;
        Ok(QaGenerator {
            client,
            cfg,
            templates: TemplateSet::builtin(),
            routing: ReviewRouting::new(),
        })
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = templates;
        self
    }

    pub fn routing(&self) -> &ReviewRouting {
        &self.routing
    }

    pub fn into_routing(self) -> ReviewRouting {
        self.routing
    }

    fn wire_request(&self, prompt: String, image: &str) -> Result<GenerationRequest, QaGenError> {
        let image = match self.cfg.image_transport {
            ImageTransport::None => None,
            ImageTransport::Reference => Some(ImagePayload::Reference(image.to_string())),
            ImageTransport::Base64 => {
                let bytes = std::fs::read(image).map_err(|source| QaGenError::Image {
                    path: PathBuf::from(image),
                    source,
                })?;
                Some(ImagePayload::Inline {
                    base64: base64::engine::general_purpose::STANDARD.encode(bytes),
                })
            }
        };
        Ok(GenerationRequest {
            model: self.cfg.model.clone(),
            prompt,
            temperature: self.cfg.temperature,
            image,
        })
    }

    fn call(&self, req: &PromptRequest) -> Result<(ParsedResponse, String), QaGenError> {
        let prompt = self.templates.render(req, self.cfg.reasoning_trace)?;
        let wire = self.wire_request(prompt, &req.image)?;
        let raw = self.client.complete(&wire)?;
        match parse_response(&response_text(&raw), req.mode) {
            Ok(parsed) => Ok((parsed, raw)),
            Err(_) => Err(QaGenError::ParseFailure {
                reason: "response has no usable fenced JSON object".to_string(),
                raw,
            }),
        }
    }

    fn route_failure(&self, req: &PromptRequest, err: &QaGenError) {
        if let QaGenError::ParseFailure { raw, .. } = err {
            self.routing.push(RoutedRecord {
                id: req.id.clone(),
                image: req.image.clone(),
                reason: RouteReason::ParseFailure,
                category: req.category.clone(),
                raw_response: raw.clone(),
            });
        }
    }

    /// Runs one request. Category-assignment requests first obtain a label,
    /// then continue with a single-target QA prompt for that label. Labels
    /// outside the known vocabulary are flagged and routed to review.
    pub fn generate(&self, req: &PromptRequest) -> Result<GeneratedQA, QaGenError> {
        let result = self.generate_inner(req);
        if let Err(e) = &result {
            self.route_failure(req, e);
        }
        result
    }

    fn generate_inner(&self, req: &PromptRequest) -> Result<GeneratedQA, QaGenError> {
        req.validate()?;
        let mut warnings = Vec::new();
        let (qa_req, assigned, assignment_raw) = if req.mode == PromptMode::CategoryAssignment {
            let (parsed, raw) = self.call(req)?;
            warnings.extend(parsed.warnings);
            let ParsedContent::Category { category } = parsed.content else {
                unreachable!("assignment mode parses to a category")
            };
            let next = PromptRequest {
                mode: PromptMode::SingleTarget,
                category: Some(category.clone()),
                ..req.clone()
            };
            (next, Some(category), Some(raw))
        } else {
            (req.clone(), None, None)
        };

        let out_of_vocabulary = assigned.as_deref().is_some_and(|c| !is_known_category(c));
        if out_of_vocabulary {
            self.routing.push(RoutedRecord {
                id: req.id.clone(),
                image: req.image.clone(),
                reason: RouteReason::OutOfVocabulary,
                category: assigned.clone(),
                raw_response: assignment_raw.clone().unwrap_or_default(),
            });
        }

        let (parsed, raw) = self.call(&qa_req)?;
        warnings.extend(parsed.warnings);
        let ParsedContent::Qa { question, answer } = parsed.content else {
            unreachable!("qa modes parse to question and answer")
        };
        Ok(GeneratedQA {
            id: req.id.clone(),
            question,
            answer,
            category: qa_req.category.unwrap_or_default(),
            assigned_category: assigned,
            out_of_vocabulary,
            raw_response: raw,
            assignment_raw_response: assignment_raw,
            warnings,
        })
    }

    /// Runs requests concurrently with at most `max_in_flight` calls open.
    /// Results come back in input order.
    pub fn generate_batch(&self, reqs: &[PromptRequest]) -> Vec<Result<GeneratedQA, QaGenError>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.max_in_flight.max(1))
            .build()
            .expect("thread pool");
        pool.install(|| reqs.par_iter().map(|r| self.generate(r)).collect())
    }
}

/// One-shot convenience wrapper around [`QaGenerator::generate`].
pub fn generate(
    req: &PromptRequest,
    cfg: &GenerationConfig,
    client: &dyn TextGenerator,
) -> Result<GeneratedQA, QaGenError> {
    QaGenerator::new(client, cfg.clone())?.generate(req)
}
