//! Layout planning: where the visual condition goes (`box_v`), which region
//! depends on it (`box_r`), and an intensified prompt.
//!
//! Boxes are in planner pixels on a square canvas. [`plan_stub`] is a fixed
//! deterministic layout; [`plan_mllm`] asks a chat-completion service in three
//! sequential stages and degrades to the stub on any failure.

use std::time::Duration;

use base64::Engine as _;
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Result, SowError};
use crate::grid::{LatentGrid, RegionBox, TokenGrid};
use crate::raster;

pub const DEFAULT_CANVAS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerMode {
    Stub,
    Mllm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub mode: PlannerMode,
    pub canvas: usize,
    /// Allowed `box_v` side lengths in pixels, inclusive.
    pub clamp_min: usize,
    pub clamp_max: usize,
    pub timeout_secs: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            mode: PlannerMode::Stub,
            canvas: DEFAULT_CANVAS,
            clamp_min: 180,
            clamp_max: 256,
            timeout_secs: 30,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas == 0 {
            return Err(SowError::invalid("planner canvas must be positive"));
        }
        if self.clamp_min == 0 || self.clamp_min > self.clamp_max {
            return Err(SowError::invalid(format!(
                "planner clamp [{}, {}] is empty",
                self.clamp_min, self.clamp_max
            )));
        }
        if self.clamp_min > self.canvas {
            return Err(SowError::invalid("planner clamp_min exceeds the canvas"));
        }
        Ok(())
    }

    /// Pixels per token when the canvas is laid over `grid`.
    pub fn stride(&self, grid: TokenGrid) -> Result<usize> {
        if grid.height != grid.width {
            return Err(SowError::invalid("planner needs a square token grid"));
        }
        if grid.width == 0 || !self.canvas.is_multiple_of(grid.width) {
            return Err(SowError::invalid(format!(
                "canvas {} is not a multiple of the {}-token grid",
                self.canvas, grid.width
            )));
        }
        Ok(self.canvas / grid.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerRequest {
    pub condition_image: LatentGrid,
    pub user_prompt: String,
    pub canvas_size: usize,
}

impl PlannerRequest {
    pub fn new(condition_image: LatentGrid, user_prompt: impl Into<String>, canvas_size: usize) -> Result<Self> {
        if condition_image.is_empty() {
            return Err(SowError::invalid("condition image is empty"));
        }
        if canvas_size == 0 {
            return Err(SowError::invalid("canvas size must be positive"));
        }
        Ok(Self {
            condition_image,
            user_prompt: user_prompt.into(),
            canvas_size,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerResult {
    pub box_v: RegionBox,
    pub box_r: RegionBox,
    pub intensified_prompt: String,
}

impl PlannerResult {
    /// Pixel boxes divided by `stride`; both must already be stride-aligned.
    pub fn token_boxes(&self, stride: usize) -> Result<(RegionBox, RegionBox)> {
        let conv = |b: &RegionBox| {
            if [b.x, b.y, b.w, b.h].iter().any(|v| v % stride != 0) {
                return Err(SowError::InvalidPlan(format!(
                    "box {:?} is not aligned to stride {stride}",
                    <[usize; 4]>::from(*b)
                )));
            }
            Ok(RegionBox::new(b.x / stride, b.y / stride, b.w / stride, b.h / stride))
        };
        Ok((conv(&self.box_v)?, conv(&self.box_r)?))
    }
}

/// What the planner produced and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    #[serde(flatten)]
    pub result: PlannerResult,
    pub fallback: bool,
    pub warnings: Vec<String>,
    pub diagnostic: Option<String>,
}

/// A failed MLLM plan, carrying the stub result to use instead.
#[derive(Debug, Clone, Error)]
#[error("planner fell back to the stub layout: {diagnostic}")]
pub struct PlannerFallback {
    pub result: PlannerResult,
    pub warnings: Vec<String>,
    pub diagnostic: String,
}

/// `box_v` of side `(clamp_min + clamp_max) / 2`, centered horizontally with
/// its top at `ceil(canvas / 6)`; `box_r` spans `box_v`'s columns from its
/// bottom edge to the canvas bottom.
pub fn plan_stub(req: &PlannerRequest, cfg: &PlannerConfig) -> PlannerResult {
    let canvas = req.canvas_size;
    let side = ((cfg.clamp_min + cfg.clamp_max) / 2).min(canvas);
    let x = (canvas - side) / 2;
    let y = canvas.div_ceil(6).min(canvas - side);
    let box_v = RegionBox::new(x, y, side, side);
    let box_r = RegionBox::new(x, box_v.bottom(), side, canvas - box_v.bottom());
    PlannerResult {
        box_v,
        box_r,
        intensified_prompt: req.user_prompt.clone(),
    }
}

/// Validated boxes plus a note for every adjustment made.
#[derive(Debug, Clone, PartialEq)]
pub struct Validated {
    pub result: PlannerResult,
    pub warnings: Vec<String>,
}

fn round_to(v: usize, stride: usize) -> usize {
    (v + stride / 2) / stride * stride
}

/// Moves a `[start, start + len)` span inside `[0, canvas)`, keeping its length.
fn shift_inside(start: usize, len: usize, canvas: usize) -> usize {
    start.min(canvas - len)
}

/// Clamps `len` into `[lo, hi]` keeping the span's center where possible.
fn clamp_span(start: usize, len: usize, lo: usize, hi: usize) -> (usize, usize) {
    let new_len = len.clamp(lo, hi);
    let center2 = 2 * start + len;
    let new_start = center2.saturating_sub(new_len) / 2;
    (new_start, new_len)
}

/// Snaps both edges of a span to multiples of `stride`, keeping the span
/// nonempty and, for `box_v`, its length within `[lo, hi]` where the stride
/// allows it.
fn snap_span(start: usize, len: usize, stride: usize, canvas: usize, limits: Option<(usize, usize)>) -> (usize, usize) {
    let mut a = round_to(start, stride).min(canvas);
    let mut b = round_to(start + len, stride).min(canvas);
    if b <= a {
        if a + stride <= canvas {
            b = a + stride;
        } else {
            a = b - stride;
        }
    }
    if let Some((lo, hi)) = limits {
        let min_len = lo.div_ceil(stride) * stride;
        let max_len = (hi / stride * stride).max(min_len).min(canvas);
        while b - a < min_len {
            if b + stride <= canvas {
                b += stride;
            } else {
                a -= stride;
            }
        }
        while b - a > max_len {
            b -= stride;
        }
    }
    (a, b - a)
}

/// Enforces the layout rules: `box_v` sides clamped to
/// `[clamp_min, clamp_max]` about its center, both boxes shifted into the
/// canvas, and every edge snapped to the token stride. Idempotent.
pub fn validate_boxes(result: &PlannerResult, cfg: &PlannerConfig, stride: usize) -> Result<Validated> {
    cfg.validate()?;
    let canvas = cfg.canvas;
    if stride == 0 || !canvas.is_multiple_of(stride) {
        return Err(SowError::invalid(format!(
            "token stride {stride} does not divide canvas {canvas}"
        )));
    }
    let mut warnings = Vec::new();
    for (name, b) in [("box_v", &result.box_v), ("box_r", &result.box_r)] {
        if b.area() == 0 {
            return Err(SowError::InvalidPlan(format!("{name} has zero area")));
        }
    }
    let lo = cfg.clamp_min;
    // a stride coarser than the clamp range forces the next aligned side
    let hi = cfg.clamp_max.max(lo.div_ceil(stride) * stride).min(canvas);

    let bv = result.box_v;
    let (mut vx, vw) = clamp_span(bv.x, bv.w, lo, hi);
    let (mut vy, vh) = clamp_span(bv.y, bv.h, lo, hi);
    if (vw, vh) != (bv.w, bv.h) {
        warnings.push(format!(
            "box_v size {}x{} clamped to {}x{}",
            bv.w, bv.h, vw, vh
        ));
    }
    let (sx, sy) = (shift_inside(vx, vw, canvas), shift_inside(vy, vh, canvas));
    if (sx, sy) != (vx, vy) {
        warnings.push("box_v shifted inside the canvas".to_string());
        (vx, vy) = (sx, sy);
    }

    let br = result.box_r;
    let (rw, rh) = (br.w.min(canvas), br.h.min(canvas));
    if (rw, rh) != (br.w, br.h) {
        warnings.push("box_r cropped to the canvas size".to_string());
    }
    let (rx, ry) = (shift_inside(br.x, rw, canvas), shift_inside(br.y, rh, canvas));
    if (rx, ry) != (br.x, br.y) {
        warnings.push("box_r shifted inside the canvas".to_string());
    }

    let (vx2, vw2) = snap_span(vx, vw, stride, canvas, Some((lo, hi)));
    let (vy2, vh2) = snap_span(vy, vh, stride, canvas, Some((lo, hi)));
    let (rx2, rw2) = snap_span(rx, rw, stride, canvas, None);
    let (ry2, rh2) = snap_span(ry, rh, stride, canvas, None);
    let box_v = RegionBox::new(vx2, vy2, vw2, vh2);
    let box_r = RegionBox::new(rx2, ry2, rw2, rh2);
    if box_v.area() == 0 || box_r.area() == 0 {
        return Err(SowError::InvalidPlan("box collapsed to zero area".into()));
    }
    if vw2 > cfg.clamp_max || vh2 > cfg.clamp_max {
        warnings.push(format!(
            "box_v side {vw2}x{vh2} cannot meet the clamp at stride {stride}"
        ));
    }
    for w in &warnings {
        warn!("{w}");
    }
    Ok(Validated {
        result: PlannerResult {
            box_v,
            box_r,
            intensified_prompt: result.intensified_prompt.clone(),
        },
        warnings,
    })
}

/// One chat turn: text plus an optional PNG attachment.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub prompt: String,
    pub image_png: Option<Vec<u8>>,
}

/// A chat-completion style service. Implementations return the reply text.
pub trait MllmClient {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

/// Vendor-neutral HTTP client posting `{"model", "messages"}` JSON and
/// reading `choices[0].message.content`.
#[derive(Debug, Clone)]
pub struct HttpMllmClient {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

pub const ENV_ENDPOINT: &str = "MLLM_ENDPOINT";
pub const ENV_API_KEY: &str = "MLLM_API_KEY";
pub const ENV_MODEL: &str = "MLLM_MODEL";

impl HttpMllmClient {
    /// Reads `MLLM_ENDPOINT` (required), `MLLM_API_KEY` and `MLLM_MODEL`.
    pub fn from_env(timeout: Duration) -> Result<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .ok()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| SowError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        Ok(Self {
            endpoint,
            api_key: std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty()),
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".into()),
            timeout,
        })
    }

    pub fn request_body(&self, request: &ChatRequest) -> serde_json::Value {
        let mut content = vec![serde_json::json!({"type": "text", "text": request.prompt})];
        if let Some(png) = &request.image_png {
            let data = base64::engine::general_purpose::STANDARD.encode(png);
            content.push(serde_json::json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{data}")}
            }));
        }
        serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": 0,
        })
    }
}

impl MllmClient for HttpMllmClient {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(self.request_body(request))
            .map_err(|e| SowError::invalid(format!("MLLM request failed: {e}")))?;
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| SowError::invalid(format!("MLLM response is not JSON: {e}")))?;
        body.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .ok_or_else(|| SowError::invalid("MLLM response has no choices[0].message.content"))
    }
}

/// Prompt templates for the three stages, with `{USER_PROMPT}`, `{CANVAS}`
/// and `{BOX_V}` placeholders. Lines starting with `#` are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    pub describe: String,
    pub box_v: String,
    pub box_r: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            describe: include_str!("../templates/stage1_describe.txt").into(),
            box_v: include_str!("../templates/stage2_box_v.txt").into(),
            box_r: include_str!("../templates/stage3_box_r.txt").into(),
        }
    }
}

impl PromptTemplates {
    /// Loads `stage1_describe.txt`, `stage2_box_v.txt`, `stage3_box_r.txt` from `dir`.
    pub fn from_dir(dir: &std::path::Path) -> Result<Self> {
        let read = |n: &str| std::fs::read_to_string(dir.join(n));
        Ok(Self {
            describe: read("stage1_describe.txt")?,
            box_v: read("stage2_box_v.txt")?,
            box_r: read("stage3_box_r.txt")?,
        })
    }
}

pub fn render_template(template: &str, user_prompt: &str, canvas: usize, box_v: Option<&RegionBox>) -> String {
    let body: Vec<&str> = template.lines().filter(|l| !l.starts_with('#')).collect();
    let box_text = box_v
        .map(|b| format!("[{}, {}, {}, {}]", b.x, b.y, b.w, b.h))
        .unwrap_or_default();
    body.join("\n")
        .trim()
        .replace("{USER_PROMPT}", user_prompt)
        .replace("{CANVAS}", &canvas.to_string())
        .replace("{BOX_V}", &box_text)
}

/// First `[a, b, c, d]` group of four finite nonnegative numbers in `text`.
pub fn parse_box(text: &str) -> Result<RegionBox> {
    let mut rest = text;
    while let Some(open) = rest.find('[') {
        let after = &rest[open + 1..];
        let Some(close) = after.find(']') else { break };
        let inner = &after[..close];
        let nums: Vec<&str> = inner.split(',').map(str::trim).collect();
        if nums.len() == 4 {
            let parsed: Option<Vec<f64>> = nums.iter().map(|s| s.parse::<f64>().ok()).collect();
            if let Some(v) = parsed {
                if v.iter().all(|x| x.is_finite() && *x >= 0.0 && *x < 1e9) {
                    let r = |x: f64| x.round() as usize;
                    return Ok(RegionBox::new(r(v[0]), r(v[1]), r(v[2]), r(v[3])));
                }
            }
        }
        rest = &after[close..];
    }
    Err(SowError::invalid(format!(
        "no [x, y, width, height] box in response: {:?}",
        text.chars().take(80).collect::<String>()
    )))
}

fn clean_prompt(text: &str) -> Result<String> {
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .trim_matches('"');
    if line.is_empty() {
        return Err(SowError::invalid("empty intensified prompt"));
    }
    Ok(line.to_string())
}

fn mllm_stages(
    client: &dyn MllmClient,
    req: &PlannerRequest,
    templates: &PromptTemplates,
    cfg: &PlannerConfig,
    stride: usize,
) -> Result<Validated> {
    let canvas = req.canvas_size;
    let png = raster::encode_png(&req.condition_image)?;
    let describe = client.complete(&ChatRequest {
        prompt: render_template(&templates.describe, &req.user_prompt, canvas, None),
        image_png: Some(png.clone()),
    })?;
    let prompt = clean_prompt(&describe)?;
    let box_v = parse_box(&client.complete(&ChatRequest {
        prompt: render_template(&templates.box_v, &prompt, canvas, None),
        image_png: Some(png),
    })?)?;
    let box_r = parse_box(&client.complete(&ChatRequest {
        prompt: render_template(&templates.box_r, &prompt, canvas, Some(&box_v)),
        image_png: None,
    })?)?;
    validate_boxes(
        &PlannerResult {
            box_v,
            box_r,
            intensified_prompt: prompt,
        },
        cfg,
        stride,
    )
}

/// Validated stub layout; the stub geometry always validates.
pub fn plan_stub_validated(req: &PlannerRequest, cfg: &PlannerConfig, stride: usize) -> Result<Validated> {
    validate_boxes(&plan_stub(req, cfg), cfg, stride)
}

/// Three-stage MLLM planning. Any failure yields [`PlannerFallback`] holding
/// the validated stub layout.
pub fn plan_mllm(
    client: &dyn MllmClient,
    req: &PlannerRequest,
    templates: &PromptTemplates,
    cfg: &PlannerConfig,
    stride: usize,
) -> std::result::Result<Validated, PlannerFallback> {
    let cfg = PlannerConfig {
        canvas: req.canvas_size,
        ..cfg.clone()
    };
    mllm_stages(client, req, templates, &cfg, stride).map_err(|e| {
        let diagnostic = e.to_string();
        warn!("MLLM planning failed, using stub layout: {diagnostic}");
        let stub = plan_stub_validated(req, &cfg, stride).unwrap_or_else(|_| Validated {
            result: plan_stub(req, &cfg),
            warnings: vec!["stub layout could not be aligned to the token stride".into()],
        });
        PlannerFallback {
            result: stub.result,
            warnings: stub.warnings,
            diagnostic,
        }
    })
}

/// Runs the configured planner; never fails once the stub validates.
pub fn plan(
    req: &PlannerRequest,
    cfg: &PlannerConfig,
    stride: usize,
    client: Option<&dyn MllmClient>,
    templates: &PromptTemplates,
) -> Result<PlanOutcome> {
    let cfg = PlannerConfig {
        canvas: req.canvas_size,
        ..cfg.clone()
    };
    match (cfg.mode, client) {
        (PlannerMode::Mllm, Some(client)) => Ok(match plan_mllm(client, req, templates, &cfg, stride) {
            Ok(v) => PlanOutcome {
                result: v.result,
                fallback: false,
                warnings: v.warnings,
                diagnostic: None,
            },
            Err(f) => PlanOutcome {
                result: f.result,
                fallback: true,
                warnings: f.warnings,
                diagnostic: Some(f.diagnostic),
            },
        }),
        (PlannerMode::Mllm, None) => {
            let v = plan_stub_validated(req, &cfg, stride)?;
            Ok(PlanOutcome {
                result: v.result,
                fallback: true,
                warnings: v.warnings,
                diagnostic: Some("no MLLM client configured".into()),
            })
        }
        (PlannerMode::Stub, _) => {
            let v = plan_stub_validated(req, &cfg, stride)?;
            Ok(PlanOutcome {
                result: v.result,
                fallback: false,
                warnings: v.warnings,
                diagnostic: None,
            })
        }
    }
}
