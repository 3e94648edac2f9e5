//! Schema-constrained inference: request assembly, pluggable backends, and
//! the strict parse / single-repair post-processing that turns raw replies
//! into validated structured reports.
//!
//! The backend contract is a plain synchronous function from request to
//! reply text. The mock backend is a pure function of the request digest
//! and a seed, which makes batch runs reproducible; the HTTP backend
//! speaks a generic chat-style JSON protocol with base64 PNG image parts.
//! Temperature is pinned to 0 everywhere.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arch_fit::{estimate_arch, radial_preclip, ArchCurve, FitError};
use crate::config::{PipelineConfig, VariantToggles};
use crate::dkb::{
    render_minimal_prompt, render_prompt, report_json_schema, validate_report, DentalOntology,
    StructuredReport, Violation,
};
use crate::exec;
use crate::flatten::{build_sampling, fitted_frame_x_bounds, flatten_mesh};
use crate::mesh_io::{parse_stl, MeshError};
use crate::render::{
    png_bytes, render_views, ArchSide, MultiViewSet, RenderError, RenderMesh, RenderMode,
    VIEW_NAMES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    Thinking,
    NonThinking,
}

impl InferenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::Thinking => "thinking",
            InferenceMode::NonThinking => "non-thinking",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

/// `[backend]` configuration section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub url: String,
    pub model_name: String,
    pub mode: InferenceMode,
    pub max_concurrency: usize,
    pub timeout_s: u64,
    /// Mock only: fraction of requests answered with a corrupted reply.
    pub corruption_rate: f64,
    /// Environment variable holding the HTTP backend credential.
    pub api_key_env: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            url: String::new(),
            model_name: "mock-vlm".into(),
            mode: InferenceMode::NonThinking,
            max_concurrency: 4,
            timeout_s: 60,
            corruption_rate: 0.0,
            api_key_env: "ARCHMAP_API_KEY".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncodedImage {
    pub view: String,
    pub png: Vec<u8>,
}

/// Everything a backend needs: three lossless view images, the task
/// prompt, the output schema, and decoding controls.
#[derive(Debug, Clone)]
pub struct InferenceRequest {
    pub arch: String,
    pub images: Vec<EncodedImage>,
    pub prompt: String,
    pub schema: serde_json::Value,
    pub temperature: f64,
    pub mode: InferenceMode,
    pub model_name: String,
}

impl InferenceRequest {
    /// Stable content digest; the mock backend keys its behavior on this.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.model_name.as_bytes());
        hasher.update([0]);
        hasher.update(self.mode.as_str().as_bytes());
        hasher.update([0]);
        hasher.update(self.temperature.to_le_bytes());
        hasher.update(self.arch.as_bytes());
        hasher.update([0]);
        hasher.update(self.prompt.as_bytes());
        hasher.update([0]);
        hasher.update(self.schema.to_string().as_bytes());
        for image in &self.images {
            hasher.update([0]);
            hasher.update(image.view.as_bytes());
            hasher.update([0]);
            hasher.update((image.png.len() as u64).to_le_bytes());
            hasher.update(&image.png);
        }
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Assembles the request for one arch: losslessly encoded views in
/// front/back/bottom order, the knowledge prompt (or the minimal prompt
/// when guidance is disabled), and temperature 0.
pub fn build_request(
    views: &MultiViewSet,
    ontology: Option<&DentalOntology>,
    mode: InferenceMode,
    model_name: &str,
) -> Result<InferenceRequest, RenderError> {
    let schema = report_json_schema();
    let arch_label = views.arch_side.arch_label();
    let prompt = match ontology {
        Some(o) => render_prompt(o, arch_label, &schema),
        None => render_minimal_prompt(arch_label, &schema),
    };
    let images = views
        .views
        .iter()
        .zip(VIEW_NAMES)
        .map(|(img, name)| Ok(EncodedImage { view: name.to_string(), png: png_bytes(img)? }))
        .collect::<Result<Vec<_>, RenderError>>()?;
    Ok(InferenceRequest {
        arch: arch_label.to_string(),
        images,
        prompt,
        schema,
        temperature: 0.0,
        mode,
        model_name: model_name.to_string(),
    })
}

#[derive(Debug, Error)]
pub enum BackendError {
    /// Transient transport failure; worth retrying.
    #[error("transport failure: {0}")]
    Transport(String),
    /// The backend answered with a non-success status.
    #[error("backend rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
}

#[derive(Debug, Error)]
pub enum InferError {
    #[error("backend unreachable after {attempts} attempts: {last}")]
    BackendUnreachable { attempts: u32, last: String },
    #[error("backend rejected request with status {status}: {body}")]
    BackendRejected { status: u16, body: String },
}

/// Behavioral contract for a reply source. Implementations must be safe to
/// call from concurrent batch workers.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &InferenceRequest) -> Result<String, BackendError>;
}

const INFER_ATTEMPTS: u32 = 3;

/// Calls the backend, retrying transient transport failures with
/// exponential backoff. A well-formed reply is never retried, even when
/// its content is invalid JSON; that is measured downstream, not retried.
pub fn infer(backend: &dyn Backend, request: &InferenceRequest) -> Result<String, InferError> {
    infer_with_backoff(backend, request, Duration::from_millis(100))
}

pub fn infer_with_backoff(
    backend: &dyn Backend,
    request: &InferenceRequest,
    base_delay: Duration,
) -> Result<String, InferError> {
    let mut last = String::new();
    for attempt in 0..INFER_ATTEMPTS {
        match backend.complete(request) {
            Ok(body) => return Ok(body),
            Err(BackendError::Rejected { status, body }) => {
                return Err(InferError::BackendRejected { status, body })
            }
            Err(BackendError::Transport(msg)) => {
                last = msg;
                if attempt + 1 < INFER_ATTEMPTS {
                    std::thread::sleep(base_delay * 2u32.pow(attempt));
                }
            }
        }
    }
    Err(InferError::BackendUnreachable { attempts: INFER_ATTEMPTS, last })
}

/// Result of post-processing one reply. `report` is present only when the
/// final parse succeeded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceOutcome {
    pub report: Option<StructuredReport>,
    pub json_valid: bool,
    pub repair_applied: bool,
    pub violations: Vec<Violation>,
    pub raw: String,
    pub latency_s: f64,
}

/// First balanced `{...}` block, honoring JSON string and escape rules.
/// Code fences and surrounding prose fall away for free.
fn extract_json_block(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let bytes = raw.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&raw[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Strict parse, then at most one extraction-only repair pass. Field
/// values are never altered; semantic validation runs against the
/// ontology when knowledge guidance is enabled.
pub fn parse_and_repair(raw: &str, ontology: Option<&DentalOntology>) -> InferenceOutcome {
    let mut repair_applied = false;
    let report: Option<StructuredReport> = match serde_json::from_str(raw) {
        Ok(report) => Some(report),
        Err(_) => extract_json_block(raw)
            .and_then(|block| serde_json::from_str(block).ok())
            .inspect(|_| repair_applied = true),
    };
    let violations = match (&report, ontology) {
        (Some(r), Some(o)) => validate_report(r, o),
        _ => Vec::new(),
    };
    InferenceOutcome {
        json_valid: report.is_some(),
        report,
        repair_applied,
        violations,
        raw: raw.to_string(),
        latency_s: 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    /// A prose reply without any JSON block.
    InvalidJson,
    /// Schema-shaped JSON carrying out-of-ontology labels.
    OutOfOntology,
}

/// Deterministic rule-based reply generator. Every reply is a pure
/// function of (request digest, seed): clean requests yield a consistent
/// permanent-arch report (sometimes wrapped in prose and a code fence to
/// exercise the repair path), corrupted ones yield either unparseable
/// prose or a report with out-of-vocabulary labels.
pub struct MockBackend {
    seed: u64,
    corruption_rate: f64,
    ontology: DentalOntology,
}

impl MockBackend {
    pub fn new(seed: u64, corruption_rate: f64) -> Self {
        MockBackend {
            seed,
            corruption_rate: corruption_rate.clamp(0.0, 1.0),
            ontology: DentalOntology::load_default().expect("bundled ontology loads"),
        }
    }

    pub fn from_config(cfg: &BackendConfig, seed: u64) -> Self {
        MockBackend::new(seed, cfg.corruption_rate)
    }

    fn hash01(&self, digest: &str, salt: &str) -> f64 {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(digest.as_bytes());
        hasher.update(salt.as_bytes());
        let out = hasher.finalize();
        let x = u64::from_le_bytes(out[..8].try_into().expect("8 bytes"));
        (x >> 11) as f64 / (1u64 << 53) as f64
    }

    /// The corruption decision for a request, exposed so tests and
    /// harnesses can compute expected rates exactly.
    pub fn corruption_for(&self, request: &InferenceRequest) -> Option<CorruptionKind> {
        let digest = request.digest();
        if self.hash01(&digest, "corrupt") < self.corruption_rate {
            if self.hash01(&digest, "kind") < 0.5 {
                Some(CorruptionKind::InvalidJson)
            } else {
                Some(CorruptionKind::OutOfOntology)
            }
        } else {
            None
        }
    }

    fn wraps_in_prose(&self, digest: &str) -> bool {
        self.hash01(digest, "fence") < 0.25
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &InferenceRequest) -> Result<String, BackendError> {
        let digest = request.digest();
        let mut report = crate::dkb::baseline_report(&self.ontology, &request.arch);
        report.notes = Some(format!("finding token {}", &digest[..12]));

        match self.corruption_for(request) {
            Some(CorruptionKind::InvalidJson) => {
                Ok("The arch presents a number of teeth, but a tally resists enumeration."
                    .to_string())
            }
            Some(CorruptionKind::OutOfOntology) => {
                report.dentition_stage = "chimeric".to_string();
                report.fdi_present.push(99);
                report.teeth_number += 1;
                Ok(serde_json::to_string(&report).expect("report serializes"))
            }
            None => {
                let body = serde_json::to_string(&report).expect("report serializes");
                if self.wraps_in_prose(&digest) {
                    Ok(format!(
                        "Here is the structured report.\n```json\n{body}\n```\nEnd of report."
                    ))
                } else {
                    Ok(body)
                }
            }
        }
    }
}

/// Generic chat-style HTTP JSON backend. Credentials come from the
/// environment; the endpoint URL from configuration.
pub struct HttpBackend {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_s))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpBackend {
            url: cfg.url.clone(),
            api_key: std::env::var(&cfg.api_key_env).ok(),
            client,
        })
    }
}

/// Wire payload: model name, decoding controls, and one user message with
/// a text part followed by the three image parts.
pub fn http_payload(request: &InferenceRequest) -> serde_json::Value {
    let mut content = vec![serde_json::json!({"type": "text", "text": request.prompt})];
    for image in &request.images {
        content.push(serde_json::json!({
            "type": "image",
            "view": image.view,
            "media_type": "image/png",
            "data": BASE64.encode(&image.png),
        }));
    }
    serde_json::json!({
        "model": request.model_name,
        "temperature": request.temperature,
        "mode": request.mode.as_str(),
        "response_format": {"type": "json_schema", "schema": request.schema},
        "messages": [{"role": "user", "content": content}],
    })
}

/// Pulls the reply text out of common chat-style response shapes; falls
/// back to the raw body when the shape is unknown.
pub fn extract_reply_text(body: &str) -> String {
    let Ok(value) = serde_json::from_str::<serde_json::Value>(body) else {
        return body.to_string();
    };
    if let Some(text) = value
        .pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
    {
        return text.to_string();
    }
    if let Some(text) = value.pointer("/content/0/text").and_then(|v| v.as_str()) {
        return text.to_string();
    }
    if let Some(text) = value.get("text").and_then(|v| v.as_str()) {
        return text.to_string();
    }
    body.to_string()
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &InferenceRequest) -> Result<String, BackendError> {
        let mut builder = self.client.post(&self.url).json(&http_payload(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Rejected { status: status.as_u16(), body });
        }
        Ok(extract_reply_text(&body))
    }
}

pub fn make_backend(cfg: &BackendConfig, seed: u64) -> Result<Box<dyn Backend>, InferError> {
    match cfg.kind {
        BackendKind::Mock => Ok(Box::new(MockBackend::from_config(cfg, seed))),
        BackendKind::Http => HttpBackend::from_config(cfg)
            .map(|b| Box::new(b) as Box<dyn Backend>)
            .map_err(|e| match e {
                BackendError::Transport(msg) => {
                    InferError::BackendUnreachable { attempts: 0, last: msg }
                }
                BackendError::Rejected { status, body } => {
                    InferError::BackendRejected { status, body }
                }
            }),
    }
}

// ---------------------------------------------------------------------------
// Full per-case pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error("unknown arch label `{0}` (expected upper or lower)")]
    Arch(String),
    #[error("case has neither a mesh nor pre-rendered views")]
    NoInput,
}

/// One unit of batch work.
#[derive(Debug, Clone)]
pub struct CaseSpec {
    pub id: String,
    pub arch: String,
    pub mesh_path: Option<PathBuf>,
}

/// Persisted per-case record: deliberately free of timestamps and
/// latencies so repeated runs overwrite byte-identical files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseReportFile {
    pub case_id: String,
    pub arch: String,
    pub model_name: String,
    pub mode: InferenceMode,
    pub variant: VariantToggles,
    pub seed: u64,
    pub request_digest: String,
    pub json_valid: bool,
    pub repair_applied: bool,
    pub fit: Option<ArchCurve>,
    pub report: Option<StructuredReport>,
    pub validation: Vec<Violation>,
}

#[derive(Debug)]
pub struct CaseSuccess {
    pub record: CaseReportFile,
    pub outcome: InferenceOutcome,
    pub view_pngs: Vec<Vec<u8>>,
}

#[derive(Debug)]
pub struct CaseResult {
    pub case_id: String,
    pub arch: String,
    pub result: Result<CaseSuccess, String>,
}

pub fn view_png_name(case_id: &str, arch: &str, view: &str, mode: RenderMode) -> String {
    format!("{case_id}_{arch}_{view}_{}.png", mode.as_str())
}

pub fn report_file_name(case_id: &str, arch: &str) -> String {
    format!("{case_id}_{arch}.report.json")
}

fn read_views_from_dir(
    dir: &Path,
    spec: &CaseSpec,
    arch_side: ArchSide,
    mode: RenderMode,
) -> Option<MultiViewSet> {
    let mut views = Vec::new();
    for view in VIEW_NAMES {
        let path = dir.join(view_png_name(&spec.id, &spec.arch, view, mode));
        let img = image::open(path).ok()?.to_rgb8();
        views.push(img);
    }
    Some(MultiViewSet { views, arch_side, render_mode: mode })
}

/// Runs the full pipeline for one case: parse, preclip, fit, flatten,
/// render, request, infer, post-process. With no mesh available the case
/// falls back to pre-rendered views in `artifacts_dir`. When
/// `artifacts_dir` is set, view PNGs and the report file are persisted.
pub fn run_case(
    spec: &CaseSpec,
    cfg: &PipelineConfig,
    backend: &dyn Backend,
    ontology: &DentalOntology,
    artifacts_dir: Option<&Path>,
) -> Result<CaseSuccess, CaseError> {
    let arch_side =
        ArchSide::from_arch_label(&spec.arch).ok_or_else(|| CaseError::Arch(spec.arch.clone()))?;
    let mode = cfg.render_mode;

    let (views, fit) = if let Some(mesh_path) = &spec.mesh_path {
        let bytes = std::fs::read(mesh_path)
            .map_err(|source| CaseError::Io { path: mesh_path.clone(), source })?;
        let mesh = parse_stl(&bytes)?;
        let projection = mesh.occlusal_projection();
        let preclipped = radial_preclip(&projection, cfg.arch_fit.clip_quantile);
        let curve = estimate_arch(&preclipped, &cfg.arch_fit)?;

        let render_mesh = if cfg.flatten_enabled {
            let (x_lo, x_hi) = fitted_frame_x_bounds(&mesh, &curve);
            let pad = (x_hi - x_lo).max(1e-9) * cfg.flatten.pad_fraction;
            let sampling = build_sampling(&curve, x_lo - pad, x_hi + pad, cfg.flatten.samples);
            RenderMesh::from(&flatten_mesh(&mesh, &curve, &sampling))
        } else {
            RenderMesh::from_fitted_frame(&mesh, &curve)
        };
        (render_views(&render_mesh, arch_side, mode, &cfg.render)?, Some(curve))
    } else {
        let dir = artifacts_dir.ok_or(CaseError::NoInput)?;
        let views = read_views_from_dir(dir, spec, arch_side, mode).ok_or(CaseError::NoInput)?;
        (views, None)
    };

    let ontology_for_prompt = cfg.dkb_enabled.then_some(ontology);
    let request = build_request(
        &views,
        ontology_for_prompt,
        cfg.backend.mode,
        &cfg.backend.model_name,
    )?;
    let digest = request.digest();

    let started = Instant::now();
    let raw = infer(backend, &request)?;
    let mut outcome = parse_and_repair(&raw, ontology_for_prompt);
    outcome.latency_s = started.elapsed().as_secs_f64();

    let record = CaseReportFile {
        case_id: spec.id.clone(),
        arch: spec.arch.clone(),
        model_name: cfg.backend.model_name.clone(),
        mode: cfg.backend.mode,
        variant: cfg.toggles(),
        seed: cfg.seed,
        request_digest: digest,
        json_valid: outcome.json_valid,
        repair_applied: outcome.repair_applied,
        fit,
        report: outcome.report.clone(),
        validation: outcome.violations.clone(),
    };
    let view_pngs: Vec<Vec<u8>> = request.images.iter().map(|i| i.png.clone()).collect();

    if let Some(dir) = artifacts_dir {
        persist_case(dir, &record, &views, &view_pngs)?;
    }

    Ok(CaseSuccess { record, outcome, view_pngs })
}

fn persist_case(
    dir: &Path,
    record: &CaseReportFile,
    views: &MultiViewSet,
    view_pngs: &[Vec<u8>],
) -> Result<(), CaseError> {
    std::fs::create_dir_all(dir).map_err(|source| CaseError::Io { path: dir.into(), source })?;
    for (png, view) in view_pngs.iter().zip(VIEW_NAMES) {
        let path = dir.join(view_png_name(&record.case_id, &record.arch, view, views.render_mode));
        std::fs::write(&path, png).map_err(|source| CaseError::Io { path, source })?;
    }
    let path = dir.join(report_file_name(&record.case_id, &record.arch));
    write_report_file(&path, record)
}

pub fn write_report_file(path: &Path, record: &CaseReportFile) -> Result<(), CaseError> {
    let mut body = serde_json::to_vec_pretty(record).expect("record serializes");
    body.push(b'\n');
    std::fs::write(path, body).map_err(|source| CaseError::Io { path: path.into(), source })
}

pub fn read_report_file(path: &Path) -> Result<CaseReportFile, CaseError> {
    let bytes =
        std::fs::read(path).map_err(|source| CaseError::Io { path: path.into(), source })?;
    serde_json::from_slice(&bytes).map_err(|e| CaseError::Io {
        path: path.into(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })
}

/// Runs a batch with bounded concurrency. Per-case failures become records
/// rather than aborting the batch, so N cases always yield N results in
/// input order.
pub fn run_batch(
    specs: &[CaseSpec],
    cfg: &PipelineConfig,
    backend: &dyn Backend,
    ontology: &DentalOntology,
    artifacts_dir: Option<&Path>,
) -> Vec<CaseResult> {
    let items: Vec<CaseSpec> = specs.to_vec();
    exec::map_bounded(items, cfg.backend.max_concurrency, |spec| CaseResult {
        case_id: spec.id.clone(),
        arch: spec.arch.clone(),
        result: run_case(&spec, cfg, backend, ontology, artifacts_dir).map_err(|e| e.to_string()),
    })
}
