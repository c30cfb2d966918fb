//! Desk-scale mechanism experiments. Each returns an [`ExperimentReport`]
//! whose CSV form is deterministic in `(config, seed)`.

pub mod stats;

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention_mod::ModulationConfig;
use crate::denoiser::{ConditionVector, DenoiserModel, GaussianMixtureDenoiser, LogitHook, ToyAttentionDenoiser};
use crate::engine::{EngineConfig, Generator};
use crate::error::{Result, SowError};
use crate::grid::{LatentGrid, RegionBox, TokenGrid};
use crate::planner::{PlannerConfig, PlannerRequest, PromptTemplates};
use crate::raster;
use crate::sampler::{ddim_step, ode_invert};
use crate::schedule::{NoiseSchedule, StepGrid};

pub const CSV_SCHEMA: &str = "sow-csv/1";
pub const EXPERIMENTS: [&str; 5] = [
    "merge",
    "attention_bias",
    "cycle_progress",
    "sensitivity",
    "disturb_reconstruct",
];

/// One CSV row: a sweep point, optionally for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub param: f64,
    pub seed: Option<u64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub name: String,
    pub param_name: String,
    pub metric_names: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Named scalar results (trend statistics).
    pub summary: Vec<(String, f64)>,
    pub outputs: Vec<PathBuf>,
}

impl ExperimentReport {
    fn new(name: &str, param_name: &str, metrics: &[&str]) -> Self {
        Self {
            name: name.into(),
            param_name: param_name.into(),
            metric_names: metrics.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            summary: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn push(&mut self, label: &str, param: f64, seed: Option<u64>, values: Vec<f64>) {
        self.rows.push(ReportRow {
            label: label.into(),
            param,
            seed,
            values,
        });
    }

    pub fn summary_value(&self, key: &str) -> Option<f64> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// Values of `metric` over rows with `label`, in row order.
    pub fn column(&self, label: &str, metric: &str) -> Vec<f64> {
        let Some(i) = self.metric_names.iter().position(|m| m == metric) else {
            return Vec::new();
        };
        self.rows
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.values[i])
            .collect()
    }

    /// Checks the report invariants: nonempty grid, finite metrics.
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(SowError::invalid(format!("{}: empty parameter grid", self.name)));
        }
        let bad = self
            .rows
            .iter()
            .flat_map(|r| r.values.iter())
            .chain(self.summary.iter().map(|(_, v)| v))
            .any(|v| !v.is_finite());
        if bad {
            return Err(SowError::invalid(format!("{}: non-finite metric", self.name)));
        }
        Ok(())
    }

    /// Rows sorted by `(label, param, seed)`, the on-disk order.
    fn sorted_rows(&self) -> Vec<&ReportRow> {
        let mut rows: Vec<&ReportRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            a.label
                .cmp(&b.label)
                .then(a.param.total_cmp(&b.param))
                .then(a.seed.cmp(&b.seed))
        });
        rows
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["schema".to_string(), "label".into(), self.param_name.clone(), "seed".into()];
        header.extend(self.metric_names.iter().cloned());
        w.write_record(&header)?;
        for r in self.sorted_rows() {
            let mut rec = vec![
                CSV_SCHEMA.to_string(),
                r.label.clone(),
                r.param.to_string(),
                r.seed.map(|s| s.to_string()).unwrap_or_default(),
            ];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.into_inner()
            .map_err(|e| SowError::invalid(format!("csv flush failed: {e}")))
    }

    pub fn summary_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["schema", "key", "value"])?;
        for (k, v) in &self.summary {
            w.write_record([CSV_SCHEMA, k, &v.to_string()])?;
        }
        w.into_inner()
            .map_err(|e| SowError::invalid(format!("csv flush failed: {e}")))
    }

    /// Writes `{name}.csv` and `{name}_summary.csv` into `dir`.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        let main = dir.join(format!("{}.csv", self.name));
        std::fs::write(&main, self.to_csv()?)?;
        let summary = dir.join(format!("{}_summary.csv", self.name));
        std::fs::write(&summary, self.summary_csv()?)?;
        self.outputs.push(main);
        self.outputs.push(summary);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionMetrics {
    pub mse: f64,
    pub cosine: f64,
    /// False when either region had zero norm and `cosine` was set to 0.
    pub cosine_defined: bool,
}

/// MSE and cosine similarity of `a` and `b` restricted to `region`.
pub fn region_metrics(a: &LatentGrid, b: &LatentGrid, region: &RegionBox) -> Result<RegionMetrics> {
    a.ensure_same_shape(b, "region_metrics")?;
    let ca = a.crop(region)?;
    let cb = b.crop(region)?;
    let (mut dot, mut na, mut nb, mut se) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in ca.iter().zip(cb.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
        se += (x - y) * (x - y);
    }
    let mse = se / ca.len() as f64;
    if na == 0.0 || nb == 0.0 {
        return Ok(RegionMetrics {
            mse,
            cosine: 0.0,
            cosine_defined: false,
        });
    }
    Ok(RegionMetrics {
        mse,
        cosine: dot / (na.sqrt() * nb.sqrt()),
        cosine_defined: true,
    })
}

/// Per-channel mean over a region.
pub fn region_mean(x: &LatentGrid, region: &RegionBox) -> Result<Vec<f64>> {
    let crop = x.crop(region)?;
    let n = (region.w * region.h) as f64;
    Ok(crop
        .array()
        .outer_iter()
        .map(|ch| ch.sum() / n)
        .collect())
}

/// Per-channel mean over every cell outside `region`.
pub fn complement_mean(x: &LatentGrid, region: &RegionBox) -> Result<Vec<f64>> {
    let (_, h, w) = x.shape();
    region.check_inside(x.token_grid())?;
    let n = h * w - region.area();
    if n == 0 {
        return Err(SowError::invalid("region covers the whole grid"));
    }
    Ok(x
        .array()
        .outer_iter()
        .map(|ch| {
            ch.indexed_iter()
                .filter(|((r, c), _)| !region.contains(*r, *c))
                .map(|(_, v)| *v)
                .sum::<f64>()
                / n as f64
        })
        .collect())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Deterministic denoising along a descending position list.
fn denoise(
    model: &dyn DenoiserModel,
    schedule: &NoiseSchedule,
    x: &LatentGrid,
    steps: &[usize],
    cond: Option<&ConditionVector>,
    mut hook: Option<&mut dyn LogitHook>,
) -> Result<LatentGrid> {
    let mut x = x.clone();
    for w in steps.windows(2) {
        x = crate::sampler::ddim_step_hooked(model, schedule, &x, w[0], w[1], cond, hook.as_mut().map(|h| &mut **h as &mut dyn LogitHook))?;
    }
    Ok(x)
}

fn ascending(stride: usize, top: usize) -> Vec<usize> {
    (0..=top / stride).map(|k| k * stride).collect()
}

fn descending(stride: usize, top: usize) -> Vec<usize> {
    let mut v = ascending(stride, top);
    v.reverse();
    v
}

fn check_stride(schedule: &NoiseSchedule, stride: usize, points: &[usize]) -> Result<()> {
    if stride == 0 || !schedule.num_steps().is_multiple_of(stride) {
        return Err(SowError::invalid(format!("stride {stride} must divide the schedule")));
    }
    if let Some(p) = points.iter().find(|&&p| p % stride != 0 || p > schedule.num_steps()) {
        return Err(SowError::invalid(format!("sweep point {p} is not on the stride-{stride} grid")));
    }
    Ok(())
}

// ---------------------------------------------------------------- merge

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub low: f64,
    pub high: f64,
    /// Schedule positions where the halves are spliced.
    pub steps: Vec<usize>,
    pub stride: usize,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            low: -0.6,
            high: 0.6,
            steps: (0..10).map(|k| k * 100).collect(),
            stride: 20,
        }
    }
}

/// Splices the left half of an inverted low field with the right half of an
/// inverted high field at each step and denoises. Blending index
/// `1 - |mean(left) - mean(right)| / |high - low|`.
pub fn merge_experiment(
    model: &dyn DenoiserModel,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize),
    cfg: &MergeConfig,
) -> Result<ExperimentReport> {
    check_stride(schedule, cfg.stride, &cfg.steps)?;
    let gap = (cfg.high - cfg.low).abs();
    if gap == 0.0 || shape.2 < 2 {
        return Err(SowError::invalid("merge needs distinct levels and width >= 2"));
    }
    let (c, h, w) = shape;
    let low = LatentGrid::filled(c, h, w, cfg.low);
    let high = LatentGrid::filled(c, h, w, cfg.high);
    let left = RegionBox::new(0, 0, w / 2, h);
    let right = RegionBox::new(w / 2, 0, w - w / 2, h);
    let points: Vec<Result<(f64, f64, f64)>> = cfg
        .steps
        .par_iter()
        .map(|&t| {
            let up = ascending(cfg.stride, t);
            let lo_t = ode_invert(model, schedule, &low, t, None, &up)?;
            let hi_t = ode_invert(model, schedule, &high, t, None, &up)?;
            let mut spliced = lo_t;
            spliced.copy_region_from(&hi_t, &right)?;
            let out = denoise(model, schedule, &spliced, &descending(cfg.stride, t), None, None)?;
            let ml = stats::mean(&region_mean(&out, &left)?);
            let mr = stats::mean(&region_mean(&out, &right)?);
            Ok((1.0 - (ml - mr).abs() / gap, ml, mr))
        })
        .collect();
    let mut report = ExperimentReport::new("merge", "t", &["blending_index", "mean_left", "mean_right"]);
    let mut index = Vec::new();
    for (&t, p) in cfg.steps.iter().zip(points) {
        let (b, ml, mr) = p?;
        index.push(b);
        report.push("merge", t as f64, None, vec![b, ml, mr]);
    }
    let ts: Vec<f64> = cfg.steps.iter().map(|&t| t as f64).collect();
    report.summary.push(("spearman_t_blending".into(), stats::spearman(&ts, &index)));
    report.validate()?;
    Ok(report)
}

// ---------------------------------------------------------------- attention bias

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bias {
    Baseline,
    Enhance,
    Suppress,
}

impl Bias {
    fn sign(self) -> f64 {
        match self {
            Bias::Baseline => 0.0,
            Bias::Enhance => 1.0,
            Bias::Suppress => -1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Bias::Baseline => "baseline",
            Bias::Enhance => "enhance",
            Bias::Suppress => "suppress",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionBiasConfig {
    pub seeds: u64,
    pub first_seed: u64,
    /// Logit offset added between target queries and source keys.
    pub offset: f64,
    /// Schedule position the images are inverted to before denoising.
    pub start: usize,
    pub stride: usize,
}

impl Default for AttentionBiasConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            first_seed: 0,
            offset: 3.0,
            start: 600,
            stride: 50,
        }
    }
}

/// `(source, target)` = lower-left and upper-right quartiles.
pub fn quartiles(grid: TokenGrid) -> (RegionBox, RegionBox) {
    let (hh, hw) = (grid.height / 2, grid.width / 2);
    (
        RegionBox::new(0, hh, hw, grid.height - hh),
        RegionBox::new(hw, 0, grid.width - hw, hh),
    )
}

/// Adds `offset` to every logit from a `target` query to a `source` key.
pub struct RegionBiasHook {
    pub pairs: Vec<(usize, usize)>,
    pub offset: f64,
}

impl RegionBiasHook {
    pub fn new(grid: TokenGrid, source: &RegionBox, target: &RegionBox, offset: f64) -> Self {
        let keys = source.tokens(grid);
        let pairs = target
            .tokens(grid)
            .into_iter()
            .flat_map(|q| keys.iter().map(move |&k| (q, k)))
            .collect();
        Self { pairs, offset }
    }
}

impl LogitHook for RegionBiasHook {
    fn apply(&mut self, _layer: usize, mut logits: Array3<f64>) -> Array3<f64> {
        if self.offset == 0.0 {
            return logits;
        }
        for mut head in logits.outer_iter_mut() {
            for &(q, k) in &self.pairs {
                head[[q, k]] += self.offset;
            }
        }
        logits
    }
}

/// Random quartile-constant image: each quartile gets its own color.
fn quartile_image(c: usize, grid: TokenGrid, rng: &mut ChaCha8Rng) -> LatentGrid {
    let colors: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..c).map(|_| rng.random_range(-0.8..0.8)).collect())
        .collect();
    let (hh, hw) = (grid.height / 2, grid.width / 2);
    LatentGrid::from_array(Array3::from_shape_fn((c, grid.height, grid.width), |(ch, r, col)| {
        let q = (r >= hh) as usize * 2 + (col >= hw) as usize;
        colors[q][ch]
    }))
}

/// Denoises quartile images with an attention offset from the upper-right
/// quartile (queries) to the lower-left quartile (keys). Transfer score: how
/// far the target's mean moved towards the source's mean, as a fraction of
/// the initial gap.
pub fn attention_bias_experiment(
    model: &ToyAttentionDenoiser,
    schedule: &NoiseSchedule,
    cfg: &AttentionBiasConfig,
) -> Result<ExperimentReport> {
    check_stride(schedule, cfg.stride, &[cfg.start])?;
    let grid = model.grid();
    let c = model.config().channels;
    let (source, target) = quartiles(grid);
    let seeds: Vec<u64> = (cfg.first_seed..cfg.first_seed + cfg.seeds).collect();
    let biases = [Bias::Baseline, Bias::Enhance, Bias::Suppress];
    let per_seed: Vec<Result<Vec<(f64, Vec<f64>, Vec<f64>)>>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = quartile_image(c, grid, &mut rng);
            let src = region_mean(&img, &source)?;
            let tgt = region_mean(&img, &target)?;
            let gap: Vec<f64> = src.iter().zip(&tgt).map(|(s, t)| s - t).collect();
            let gap2 = dot(&gap, &gap).max(1e-12);
            let x_t = ode_invert(model, schedule, &img, cfg.start, None, &ascending(cfg.stride, cfg.start))?;
            biases
                .iter()
                .map(|b| {
                    let mut hook = RegionBiasHook::new(grid, &source, &target, b.sign() * cfg.offset);
                    let out = denoise(
                        model,
                        schedule,
                        &x_t,
                        &descending(cfg.stride, cfg.start),
                        None,
                        Some(&mut hook),
                    )?;
                    let moved: Vec<f64> = region_mean(&out, &target)?
                        .iter()
                        .zip(&tgt)
                        .map(|(o, t)| o - t)
                        .collect();
                    Ok((dot(&moved, &gap) / gap2, src.clone(), region_mean(&out, &target)?))
                })
                .collect()
        })
        .collect();

    let mut report = ExperimentReport::new("attention_bias", "offset", &["transfer_score"]);
    let mut scores = vec![Vec::new(); 3];
    let mut source_stat = Vec::new();
    let mut target_stat = vec![Vec::new(); 3];
    for (&seed, res) in seeds.iter().zip(per_seed) {
        for (i, (score, src, out)) in res?.into_iter().enumerate() {
            report.push(biases[i].name(), biases[i].sign() * cfg.offset, Some(seed), vec![score]);
            scores[i].push(score);
            if i == 0 {
                source_stat.extend(src.iter().copied());
            }
            target_stat[i].extend(out);
        }
    }
    let enh: Vec<f64> = scores[1].iter().zip(&scores[0]).map(|(e, b)| e - b).collect();
    let sup: Vec<f64> = scores[0].iter().zip(&scores[2]).map(|(b, s)| b - s).collect();
    let te = stats::sign_test(&enh);
    let ts = stats::sign_test(&sup);
    for (i, b) in biases.iter().enumerate() {
        report.summary.push((format!("mean_score_{}", b.name()), stats::mean(&scores[i])));
        report.summary.push((
            format!("source_target_corr_{}", b.name()),
            stats::pearson(&source_stat, &target_stat[i]),
        ));
    }
    report.summary.push(("enhance_over_baseline_wins".into(), te.wins as f64));
    report.summary.push(("enhance_over_baseline_p".into(), te.p_value));
    report.summary.push(("baseline_over_suppress_wins".into(), ts.wins as f64));
    report.summary.push(("baseline_over_suppress_p".into(), ts.p_value));
    report.validate()?;
    Ok(report)
}

// ---------------------------------------------------------------- cycle progress

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleProgressConfig {
    pub seeds: u64,
    pub first_seed: u64,
    pub cycles: Vec<usize>,
    pub engine: EngineConfig,
    pub canvas: usize,
}

impl Default for CycleProgressConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            first_seed: 0,
            cycles: (1..=10).collect(),
            engine: EngineConfig::default(),
            canvas: 512,
        }
    }
}

/// Random condition: a saturated color plus mild texture.
pub fn condition_patch(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> LatentGrid {
    let color: Vec<f64> = (0..c)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.5..0.9))
        .collect();
    LatentGrid::from_array(Array3::from_shape_fn((c, h, w), |(ch, _, _)| {
        color[ch] + rng.random_range(-0.05..0.05)
    }))
}

/// Fraction of the seed canvas's background-to-`box_v` color gap closed in
/// `x`. The background is everything outside `box_v`.
pub fn background_similarity(x: &LatentGrid, seed_canvas: &LatentGrid, box_v: &RegionBox) -> Result<f64> {
    let cv = region_mean(seed_canvas, box_v)?;
    let d0 = dist(&complement_mean(seed_canvas, box_v)?, &cv).max(1e-12);
    let d = dist(&complement_mean(x, box_v)?, &region_mean(x, box_v)?);
    Ok(1.0 - d / d0)
}

/// Runs the generator with `eta = 0` for each cycle count and reports how
/// similar the condition-related region became to the condition.
pub fn cycle_progress_experiment(
    model: &dyn DenoiserModel,
    schedule: &NoiseSchedule,
    grid: StepGrid,
    shape: (usize, usize, usize),
    modulation: &ModulationConfig,
    cfg: &CycleProgressConfig,
    snapshots: Option<&Path>,
) -> Result<ExperimentReport> {
    let (c, h, w) = shape;
    let planner = PlannerConfig {
        canvas: cfg.canvas,
        ..Default::default()
    };
    let stride = planner.stride(TokenGrid::new(h, w))?;
    let stub = crate::planner::plan_stub_validated(
        &PlannerRequest::new(LatentGrid::zeros(c, 1, 1), "", cfg.canvas)?,
        &planner,
        stride,
    )?;
    let (box_v, _) = stub.result.token_boxes(stride)?;
    let seeds: Vec<u64> = (cfg.first_seed..cfg.first_seed + cfg.seeds).collect();
    let counts: Vec<usize> = std::iter::once(0).chain(cfg.cycles.iter().copied()).collect();

    let runs: Vec<Result<Vec<(f64, LatentGrid)>>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let patch = condition_patch(c, box_v.h, box_v.w, &mut rng);
            let req = PlannerRequest::new(patch, "a portrait", cfg.canvas)?;
            counts
                .iter()
                .map(|&n| {
                    let engine = EngineConfig {
                        cycles: n,
                        eta: Some(0.0),
                        ..cfg.engine.clone()
                    };
                    let gen = Generator {
                        model,
                        schedule,
                        grid,
                        engine,
                        modulation: *modulation,
                        planner: planner.clone(),
                        templates: PromptTemplates::default(),
                        client: None,
                        latent_shape: shape,
                        resize_condition: false,
                    };
                    let out = gen.generate(&req, seed, serde_json::Value::Null, None)?;
                    let seed_canvas = crate::engine::seed_initialize(
                        &req.condition_image,
                        &box_v,
                        cfg.engine.background,
                        shape,
                        &mut ChaCha8Rng::seed_from_u64(seed),
                    )?;
                    Ok((background_similarity(&out.output, &seed_canvas, &box_v)?, out.output))
                })
                .collect()
        })
        .collect();

    let mut report = ExperimentReport::new("cycle_progress", "cycles", &["similarity"]);
    let mut by_count = vec![Vec::new(); counts.len()];
    let mut first_snapshots = Vec::new();
    for (si, (&seed, res)) in seeds.iter().zip(runs).enumerate() {
        for (i, (sim, img)) in res?.into_iter().enumerate() {
            report.push("cycle_progress", counts[i] as f64, Some(seed), vec![sim]);
            by_count[i].push(sim);
            if si == 0 {
                first_snapshots.push(img);
            }
        }
    }
    let means: Vec<f64> = by_count.iter().map(|v| stats::mean(v)).collect();
    for (i, &n) in counts.iter().enumerate() {
        report.push("mean", n as f64, None, vec![means[i]]);
        report.summary.push((format!("mean_similarity_{n}"), means[i]));
        report.summary.push((format!("se_similarity_{n}"), stats::std_error(&by_count[i])));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = counts[1..].iter().map(|&n| n as f64).zip(means[1..].iter().copied()).unzip();
    report.summary.push(("spearman_cycles_similarity".into(), stats::spearman(&xs, &ys)));
    // largest drop between consecutive cycle counts, in standard errors
    let worst = (2..counts.len())
        .map(|i| {
            let se = stats::std_error(&by_count[i]).max(stats::std_error(&by_count[i - 1])).max(1e-12);
            (means[i] - means[i - 1]) / se
        })
        .fold(f64::INFINITY, f64::min);
    report.summary.push(("worst_step_change_in_se".into(), if worst.is_finite() { worst } else { 0.0 }));
    if let Some(dir) = snapshots {
        std::fs::create_dir_all(dir)?;
        for (i, img) in first_snapshots.iter().enumerate() {
            let p = dir.join(format!("cycle_{:02}.png", counts[i]));
            raster::save_latent(img, &p)?;
            report.outputs.push(p);
        }
        let p = dir.join("cycle_grid.png");
        raster::save_latent(&raster::tile(&first_snapshots, first_snapshots.len())?, &p)?;
        report.outputs.push(p);
    }
    report.validate()?;
    Ok(report)
}

// ---------------------------------------------------------------- sensitivity

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub seeds: u64,
    pub first_seed: u64,
    pub class_id: u32,
    pub guidance_scale: f64,
    /// Steps on the sampling grid over the whole schedule.
    pub sampling_steps: usize,
    /// Conditional window length, in sampling steps.
    pub window: usize,
    /// Window starts, as schedule positions.
    pub window_starts: Vec<usize>,
    /// Class mixture used by [`SensitivityConfig::model`].
    pub classes: usize,
    pub class_variance: f64,
    pub mixture_seed: u64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            first_seed: 0,
            class_id: 1,
            guidance_scale: 3.0,
            sampling_steps: 20,
            window: 10,
            window_starts: vec![1000, 900, 800, 700, 600, 500],
            classes: 4,
            class_variance: 1.0,
            mixture_seed: 7,
        }
    }
}

impl SensitivityConfig {
    /// The configured class mixture and the class's direction in it.
    pub fn model(&self, shape: (usize, usize, usize)) -> Result<(GaussianMixtureDenoiser, Vec<f64>)> {
        let model = class_mixture(shape, self.classes, self.class_variance, self.mixture_seed)?;
        let direction = class_direction(&model, self.class_id)?;
        Ok((model, direction))
    }
}

/// Mixture with one uniform-color component per class, colors drawn from
/// `seed`. Conditioning on class `k` restricts it to component `k`.
pub fn class_mixture(shape: (usize, usize, usize), classes: usize, variance: f64, seed: u64) -> Result<GaussianMixtureDenoiser> {
    let (c, h, w) = shape;
    if classes == 0 {
        return Err(SowError::invalid("class mixture needs at least one class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = (0..classes)
        .map(|_| {
            let color: Vec<f64> = (0..c).map(|_| rng.random_range(-0.8..0.8)).collect();
            LatentGrid::from_array(Array3::from_shape_fn((c, h, w), |(ch, _, _)| color[ch]))
        })
        .collect();
    GaussianMixtureDenoiser::new(vec![1.0 / classes as f64; classes], means, vec![variance; classes])
}

/// Per-channel offset of class `class_id` from the mixture's mean color.
pub fn class_direction(model: &GaussianMixtureDenoiser, class_id: u32) -> Result<Vec<f64>> {
    let full = model.means()[0].token_grid().full_box();
    let k = class_id as usize % model.components();
    let mut mixture = vec![0.0; model.means()[0].shape().0];
    for (w, m) in model.weights().iter().zip(model.means()) {
        for (acc, v) in mixture.iter_mut().zip(region_mean(m, &full)?) {
            *acc += w * v;
        }
    }
    let class = region_mean(&model.means()[k], &full)?;
    Ok(class.iter().zip(&mixture).map(|(a, b)| a - b).collect())
}

/// Unconditional sampling with the condition switched on for a window of
/// steps. Response score: projection of the output's mean shift (against the
/// same noise sampled unconditionally) onto `direction`, the class's
/// per-channel offset from the unconditional mean.
pub fn sensitivity_experiment(
    model: &dyn DenoiserModel,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize),
    direction: &[f64],
    cfg: &SensitivityConfig,
) -> Result<ExperimentReport> {
    let grid = StepGrid::new(schedule, cfg.sampling_steps)?;
    let steps: Vec<usize> = {
        let mut v = grid.positions(0, cfg.sampling_steps)?;
        v.reverse();
        v
    };
    check_stride(schedule, grid.stride, &cfg.window_starts)?;
    if cfg.window == 0 {
        return Err(SowError::invalid("conditioning window must be nonempty"));
    }
    let cond = ConditionVector::new(cfg.class_id, cfg.guidance_scale)?;
    if direction.len() != shape.0 {
        return Err(SowError::invalid("class direction needs one entry per channel"));
    }
    let norm = dot(direction, direction).sqrt();
    if !(norm > 0.0) {
        return Err(SowError::invalid("class direction must be nonzero"));
    }
    let full = TokenGrid::new(shape.1, shape.2).full_box();
    let top = schedule.num_steps();
    let mut windows: Vec<(String, f64, Option<(usize, usize)>)> = cfg
        .window_starts
        .iter()
        .map(|&s| {
            let end = s.saturating_sub(cfg.window * grid.stride);
            ("window".to_string(), s as f64, Some((s, end)))
        })
        .collect();
    windows.push(("full".into(), top as f64, Some((top, 0))));

    let seeds: Vec<u64> = (cfg.first_seed..cfg.first_seed + cfg.seeds).collect();
    let run = |seed: u64, window: Option<(usize, usize)>| -> Result<LatentGrid> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = LatentGrid::standard_normal(shape.0, shape.1, shape.2, &mut rng);
        for w in steps.windows(2) {
            let active = window.is_some_and(|(s, e)| w[0] <= s && w[0] > e);
            let c = if active { Some(&cond) } else { None };
            x = ddim_step(model, schedule, &x, w[0], w[1], c)?;
        }
        Ok(x)
    };
    let results: Vec<Result<Vec<f64>>> = seeds
        .par_iter()
        .map(|&seed| {
            let base = region_mean(&run(seed, None)?, &full)?;
            windows
                .iter()
                .map(|(_, _, win)| {
                    let out = region_mean(&run(seed, *win)?, &full)?;
                    let shift: Vec<f64> = out.iter().zip(&base).map(|(o, b)| o - b).collect();
                    Ok(dot(&shift, direction) / norm)
                })
                .collect()
        })
        .collect();

    let mut report = ExperimentReport::new("sensitivity", "window_start", &["response"]);
    let mut per_window = vec![Vec::new(); windows.len()];
    let mut early_wins = 0.0;
    let (first, last) = (0, cfg.window_starts.len().saturating_sub(1));
    for (&seed, res) in seeds.iter().zip(results) {
        let scores = res?;
        for (i, (label, param, _)) in windows.iter().enumerate() {
            report.push(label, *param, Some(seed), vec![scores[i]]);
            per_window[i].push(scores[i]);
        }
        if scores[first] > scores[last] {
            early_wins += 1.0;
        }
    }
    let means: Vec<f64> = per_window.iter().map(|v| stats::mean(v)).collect();
    let starts: Vec<f64> = cfg.window_starts.iter().map(|&s| s as f64).collect();
    report.summary.push((
        "spearman_start_response".into(),
        stats::spearman(&starts, &means[..cfg.window_starts.len()]),
    ));
    report.summary.push(("early_over_late_wins".into(), early_wins));
    report.summary.push(("mean_response_full".into(), means[windows.len() - 1]));
    report.summary.push(("mean_response_earliest".into(), means[first]));
    report.summary.push(("mean_response_latest".into(), means[last]));
    report.validate()?;
    Ok(report)
}

// ---------------------------------------------------------------- disturb / reconstruct

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbConfig {
    pub seeds: u64,
    pub first_seed: u64,
    /// Square patch sides, in tokens.
    pub sizes: Vec<usize>,
    pub canvas: usize,
    /// Positions where the inverted patch is stuck into the noise canvas.
    pub stick_steps: Vec<usize>,
    /// Length of the disturbance window, in schedule positions.
    pub disturb_len: usize,
    pub stride: usize,
    /// Region prior variance the toy runs with here; large values make
    /// region-level structure settle early, as it does for natural images.
    pub region_variance: f64,
}

impl Default for DisturbConfig {
    fn default() -> Self {
        Self {
            seeds: 4,
            first_seed: 0,
            sizes: vec![8, 4],
            canvas: 16,
            stick_steps: (0..10).map(|k| k * 100).collect(),
            disturb_len: 100,
            stride: 20,
            region_variance: 100.0,
        }
    }
}

/// Smooth random source patch.
fn source_patch(c: usize, size: usize, rng: &mut ChaCha8Rng) -> LatentGrid {
    let coef: Vec<[f64; 3]> = (0..c)
        .map(|_| [rng.random_range(-0.6..0.6), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
        .collect();
    LatentGrid::from_array(Array3::from_shape_fn((c, size, size), |(ch, r, col)| {
        let (u, v) = (r as f64 / size as f64, col as f64 / size as f64);
        let k = coef[ch];
        k[0] + k[1] * (std::f64::consts::PI * u).cos() + k[2] * (std::f64::consts::PI * v).cos()
    }))
}

/// Inverts a patch to `t`, sticks it into a noise canvas, denoises the canvas
/// for `disturb_len` positions, then extracts the patch and finishes its
/// reconstruction alone. Reports MSE and cosine similarity to the source.
pub fn disturb_reconstruct_experiment(
    model: &ToyAttentionDenoiser,
    schedule: &NoiseSchedule,
    cfg: &DisturbConfig,
) -> Result<ExperimentReport> {
    check_stride(schedule, cfg.stride, &cfg.stick_steps)?;
    if !cfg.disturb_len.is_multiple_of(cfg.stride) {
        return Err(SowError::invalid("disturb_len must be a multiple of stride"));
    }
    if cfg.sizes.iter().any(|&s| s == 0 || s > cfg.canvas) {
        return Err(SowError::invalid("patch sizes must lie in 1..=canvas"));
    }
    let model = &model.with_region_variance(cfg.region_variance)?;
    let c = model.config().channels;
    let canvas_model = model.with_grid(TokenGrid::new(cfg.canvas, cfg.canvas));
    let seeds: Vec<u64> = (cfg.first_seed..cfg.first_seed + cfg.seeds).collect();
    let mut jobs = Vec::new();
    for &size in &cfg.sizes {
        for &t in &cfg.stick_steps {
            for &seed in &seeds {
                jobs.push((size, t, seed));
            }
        }
    }
    let results: Vec<Result<RegionMetrics>> = jobs
        .par_iter()
        .map(|&(size, t, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = source_patch(c, size, &mut rng);
            let patch_model = model.with_grid(TokenGrid::new(size, size));
            let v_t = ode_invert(&patch_model, schedule, &src, t, None, &ascending(cfg.stride, t))?;
            let mut noise_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 << 32));
            let mut canvas = LatentGrid::standard_normal(c, cfg.canvas, cfg.canvas, &mut noise_rng);
            let off = (cfg.canvas - size) / 2;
            let region = RegionBox::new(off, off, size, size);
            canvas.paste(&region, &v_t)?;
            let end = t.saturating_sub(cfg.disturb_len);
            let disturb: Vec<usize> = (end / cfg.stride..=t / cfg.stride).rev().map(|k| k * cfg.stride).collect();
            let disturbed = denoise(&canvas_model, schedule, &canvas, &disturb, None, None)?;
            let extracted = disturbed.crop(&region)?;
            let out = denoise(&patch_model, schedule, &extracted, &descending(cfg.stride, end), None, None)?;
            region_metrics(&out, &src, &TokenGrid::new(size, size).full_box())
        })
        .collect();

    let mut report = ExperimentReport::new("disturb_reconstruct", "stick_step", &["mse", "cosine"]);
    let mut curves: Vec<Vec<f64>> = Vec::new();
    let mut it = jobs.iter().zip(results);
    for &size in &cfg.sizes {
        let label = format!("size_{size}");
        let mut curve = Vec::new();
        for &t in &cfg.stick_steps {
            let (mut sims, mut errs) = (Vec::new(), Vec::new());
            for _ in &seeds {
                let ((_, _, seed), m) = it.next().expect("one result per job");
                let m = m?;
                report.push(&label, t as f64, Some(*seed), vec![m.mse, m.cosine]);
                sims.push(m.cosine);
                errs.push(m.mse);
            }
            curve.push(stats::mean(&sims));
            report.push(&format!("mean_{label}"), t as f64, None, vec![stats::mean(&errs), stats::mean(&sims)]);
        }
        let ts: Vec<f64> = cfg.stick_steps.iter().map(|&t| -(t as f64)).collect();
        report.summary.push((format!("spearman_earlier_stick_similarity_{size}"), stats::spearman(&ts, &curve)));
        curves.push(curve);
    }
    if curves.len() >= 2 {
        // largest size vs smallest size
        let (imax, imin) = {
            let mut idx: Vec<usize> = (0..cfg.sizes.len()).collect();
            idx.sort_by_key(|&i| cfg.sizes[i]);
            (idx[idx.len() - 1], idx[0])
        };
        let n = cfg.stick_steps.len() as f64;
        let dominated = curves[imax]
            .iter()
            .zip(&curves[imin])
            .filter(|(a, b)| a >= b)
            .count() as f64;
        report.summary.push(("large_dominates_fraction".into(), dominated / n));
    }
    report.validate()?;
    Ok(report)
}
