use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SowError};
use crate::grid::{LatentGrid, TokenGrid};
use crate::schedule::NoiseSchedule;

use super::weights::{Tensor, WeightFile};
use super::{ensure_finite, ConditionVector, DenoiserModel, LogitHook};

const TIME_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    /// Random Fourier frequencies per token coordinate pair.
    pub pos_features: usize,
    pub hidden: usize,
    pub classes: usize,
    pub class_dim: usize,
    /// Prior variance of a token around its attention context.
    pub prior_variance: f64,
    /// Share of the context taken from the feedforward path instead of attention.
    pub ff_weight: f64,
    /// Prior variance of the attention-pooled region mean. When positive the
    /// first layer shrinks its pooled observations by the gain of a pool of
    /// that many effective tokens; 0 pools with the per-token gain.
    #[serde(default)]
    pub region_variance: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            heads: 4,
            head_dim: 8,
            layers: 2,
            pos_features: 8,
            hidden: 16,
            classes: 8,
            class_dim: 4,
            prior_variance: 1.0,
            ff_weight: 0.2,
            region_variance: 0.0,
            seed: 0,
        }
    }
}

impl ToyConfig {
    fn feature_dim(&self) -> usize {
        self.channels + 2 * self.pos_features + TIME_FEATURES + self.class_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(SowError::invalid(format!("toy denoiser {name} must be positive")));
        }
        if !(self.prior_variance > 0.0 && self.prior_variance.is_finite()) {
            return Err(SowError::invalid("prior_variance must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ff_weight) {
            return Err(SowError::invalid("ff_weight must lie in [0, 1]"));
        }
        if !(self.region_variance >= 0.0 && self.region_variance.is_finite()) {
            return Err(SowError::invalid("region_variance must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AttentionLayer {
    /// `feature_dim x heads*head_dim`
    query: Array2<f64>,
    key: Array2<f64>,
    /// `heads x channels x channels`, applied as `V_h y_j`.
    value: Array3<f64>,
}

/// A tiny self-attention denoiser with one token per grid cell.
///
/// It predicts `x_0` as a Gaussian posterior mean whose prior is centred on an
/// attention-pooled context, so information moves between tokens in
/// proportion to the attention weights and to the noise level: near the data
/// end every token keeps its own value, near pure noise it is dominated by
/// what it attends to. Logits `A = Q K^T / sqrt(d_k)` are built from the noisy
/// input, position, time and class features and can be rewritten per layer
/// through a [`LogitHook`] before the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAttentionDenoiser {
    config: ToyConfig,
    grid: TokenGrid,
    /// `2 x pos_features`
    pos_freqs: Array2<f64>,
    layers: Vec<AttentionLayer>,
    ff_in: Array2<f64>,
    ff_out: Array2<f64>,
    class_embed: Array2<f64>,
    class_mean: Array2<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Vec<f64> {
    let n: usize = shape.iter().product();
    // f32-representable so a saved model reloads bit-identically
    (0..n)
        .map(|_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32 as f64)
        .collect()
}

fn to_f32(a: impl IntoIterator<Item = f64>) -> Vec<f32> {
    a.into_iter().map(|v| v as f32).collect()
}

impl ToyAttentionDenoiser {
    /// Random weights drawn from `config.seed`.
    pub fn new(config: ToyConfig, grid: TokenGrid) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d_in = config.feature_dim();
        let qk = config.heads * config.head_dim;
        let c = config.channels;
        let in_scale = 1.0 / (d_in as f64).sqrt();

        let pos_freqs =
            Array2::from_shape_vec((2, config.pos_features), gaussian(&mut rng, &[2, config.pos_features], 0.6))
                .expect("shape");
        let layers = (0..config.layers)
            .map(|_| {
                let query = Array2::from_shape_vec((d_in, qk), gaussian(&mut rng, &[d_in, qk], in_scale))
                    .expect("shape");
                let key = Array2::from_shape_vec((d_in, qk), gaussian(&mut rng, &[d_in, qk], in_scale))
                    .expect("shape");
                let mut value = Array3::from_shape_vec(
                    (config.heads, c, c),
                    gaussian(&mut rng, &[config.heads, c, c], 0.1),
                )
                .expect("shape");
                for h in 0..config.heads {
                    for i in 0..c {
                        value[[h, i, i]] = (value[[h, i, i]] + 1.0) as f32 as f64;
                    }
                }
                AttentionLayer { query, key, value }
            })
            .collect();
        let ff_in = Array2::from_shape_vec(
            (d_in, config.hidden),
            gaussian(&mut rng, &[d_in, config.hidden], in_scale),
        )
        .expect("shape");
        let ff_out = Array2::from_shape_vec(
            (config.hidden, c),
            gaussian(&mut rng, &[config.hidden, c], 0.1 / (config.hidden as f64).sqrt()),
        )
        .expect("shape");
        let class_embed = Array2::from_shape_vec(
            (config.classes, config.class_dim),
            gaussian(&mut rng, &[config.classes, config.class_dim], 1.0),
        )
        .expect("shape");
        let class_mean = Array2::from_shape_vec(
            (config.classes, c),
            gaussian(&mut rng, &[config.classes, c], 0.8),
        )
        .expect("shape");

        Ok(Self {
            config,
            grid,
            pos_freqs,
            layers,
            ff_in,
            ff_out,
            class_embed,
            class_mean,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn grid(&self) -> TokenGrid {
        self.grid
    }

    /// The same weights laid over another token grid. Positions are encoded
    /// from absolute token coordinates, so no weight depends on the grid.
    pub fn with_grid(&self, grid: TokenGrid) -> Self {
        Self {
            grid,
            ..self.clone()
        }
    }

    /// The same weights with another region prior variance.
    pub fn with_region_variance(&self, region_variance: f64) -> Result<Self> {
        let config = ToyConfig {
            region_variance,
            ..self.config
        };
        config.validate()?;
        Ok(Self {
            config,
            ..self.clone()
        })
    }

    /// Per-class mean offset the conditional prior adds, one value per channel.
    pub fn class_mean(&self, class_id: u32) -> Vec<f64> {
        let row = class_id as usize % self.config.classes;
        self.class_mean.row(row).to_vec()
    }

    /// Zeroes every attention value matrix, leaving only the feedforward path.
    pub fn zero_value_weights(&mut self) {
        for layer in &mut self.layers {
            layer.value.fill(0.0);
        }
    }

    fn check_input(&self, x_t: &LatentGrid) -> Result<()> {
        let (c, h, w) = x_t.shape();
        if c != self.config.channels || h != self.grid.height || w != self.grid.width {
            return Err(SowError::invalid(format!(
                "toy denoiser expects {}x{}x{} input, got {c}x{h}x{w}",
                self.config.channels, self.grid.height, self.grid.width
            )));
        }
        Ok(())
    }

    /// Token-major view of a grid: `tokens x channels`.
    fn tokens(x: &LatentGrid) -> Array2<f64> {
        let (c, h, w) = x.shape();
        x.array()
            .to_shape((c, h * w))
            .expect("contiguous grid")
            .t()
            .to_owned()
    }

    fn untokens(tokens: &Array2<f64>, grid: TokenGrid) -> LatentGrid {
        let c = tokens.ncols();
        let arr = tokens
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, grid.height, grid.width))
            .expect("token count matches grid");
        LatentGrid::from_array(arr)
    }

    fn features(
        &self,
        x_t: &LatentGrid,
        t: usize,
        schedule: &NoiseSchedule,
        condition: Option<&ConditionVector>,
    ) -> Array2<f64> {
        let cfg = &self.config;
        let n = self.grid.len();
        let mut f = Array2::zeros((n, cfg.feature_dim()));
        f.slice_mut(s![.., ..cfg.channels]).assign(&Self::tokens(x_t));
        let p0 = cfg.channels;
        for idx in 0..n {
            let (row, col) = self.grid.coords(idx);
            for k in 0..cfg.pos_features {
                let phase = self.pos_freqs[[0, k]] * row as f64 + self.pos_freqs[[1, k]] * col as f64;
                f[[idx, p0 + 2 * k]] = phase.sin();
                f[[idx, p0 + 2 * k + 1]] = phase.cos();
            }
        }
        let t0 = p0 + 2 * cfg.pos_features;
        let tau = t as f64 / schedule.num_steps() as f64;
        let time = [
            (std::f64::consts::PI * tau).sin(),
            (std::f64::consts::PI * tau).cos(),
            (8.0 * tau).sin(),
            (8.0 * tau).cos(),
        ];
        for (k, v) in time.iter().enumerate() {
            f.column_mut(t0 + k).fill(*v);
        }
        if let Some(cond) = condition {
            let c0 = t0 + TIME_FEATURES;
            let row = self.class_embed.row(cond.class_id as usize % cfg.classes);
            for idx in 0..n {
                f.slice_mut(s![idx, c0..]).assign(&row);
            }
        }
        f
    }

    fn feedforward(&self, features: &Array2<f64>, condition: Option<&ConditionVector>) -> Array2<f64> {
        let mut out = features.dot(&self.ff_in).mapv(f64::tanh).dot(&self.ff_out);
        if let Some(cond) = condition {
            let mean = self.class_mean.row(cond.class_id as usize % self.config.classes);
            out += &mean;
        }
        out
    }

    fn layer_logits(&self, layer: &AttentionLayer, features: &Array2<f64>) -> Array3<f64> {
        let cfg = &self.config;
        let n = features.nrows();
        let q = features.dot(&layer.query);
        let k = features.dot(&layer.key);
        let scale = 1.0 / (cfg.head_dim as f64).sqrt();
        let mut logits = Array3::zeros((cfg.heads, n, n));
        for h in 0..cfg.heads {
            let cols = h * cfg.head_dim..(h + 1) * cfg.head_dim;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols]);
            let a = qh.dot(&kh.t()) * scale;
            logits.index_axis_mut(Axis(0), h).assign(&a);
        }
        logits
    }

    /// Pre-softmax logits of every layer for this input, without any hook.
    pub fn attention_logits(
        &self,
        schedule: &NoiseSchedule,
        x_t: &LatentGrid,
        t: usize,
        condition: Option<&ConditionVector>,
    ) -> Result<Vec<Array3<f64>>> {
        self.check_input(x_t)?;
        schedule.alpha_bar(t)?;
        let features = self.features(x_t, t, schedule, condition);
        Ok(self
            .layers
            .iter()
            .map(|l| self.layer_logits(l, &features))
            .collect())
    }

    /// Post-softmax attention of every layer, after `hook` if given.
    pub fn attention_probs(
        &self,
        schedule: &NoiseSchedule,
        x_t: &LatentGrid,
        t: usize,
        condition: Option<&ConditionVector>,
        mut hook: Option<&mut dyn LogitHook>,
    ) -> Result<Vec<Array3<f64>>> {
        let logits = self.attention_logits(schedule, x_t, t, condition)?;
        logits
            .into_iter()
            .enumerate()
            .map(|(l, a)| {
                let a = match hook.as_deref_mut() {
                    Some(h) => self.run_hook(h, l, a)?,
                    None => a,
                };
                Ok(softmax_rows(a))
            })
            .collect()
    }

    fn run_hook(&self, hook: &mut dyn LogitHook, layer: usize, logits: Array3<f64>) -> Result<Array3<f64>> {
        let dim = logits.dim();
        let out = hook.apply(layer, logits);
        if out.dim() != dim {
            return Err(SowError::contract(format!(
                "logit hook on layer {layer} returned shape {:?}, expected {:?}",
                out.dim(),
                dim
            )));
        }
        Ok(out)
    }

    fn signal_gain(&self, alpha_bar: f64) -> f64 {
        let s2 = self.config.prior_variance;
        alpha_bar * s2 / (alpha_bar * s2 + 1.0 - alpha_bar)
    }

    /// `x_0` estimate of the feedforward path alone (what the model computes
    /// when every attention value matrix is zero).
    pub fn feedforward_x0(
        &self,
        schedule: &NoiseSchedule,
        x_t: &LatentGrid,
        t: usize,
        condition: Option<&ConditionVector>,
    ) -> Result<LatentGrid> {
        self.check_input(x_t)?;
        let ab = schedule.alpha_bar(t)?;
        let g = self.signal_gain(ab);
        let features = self.features(x_t, t, schedule, condition);
        let ff = self.feedforward(&features, condition);
        let u = Self::tokens(x_t) / ab.sqrt();
        let rho = self.config.ff_weight;
        let y = &u * g + &(ff * ((1.0 - g) * rho));
        Ok(Self::untokens(&y, self.grid))
    }

    /// Posterior-mean estimate of `x_0`, the core of the forward pass.
    pub fn predict_x0(
        &self,
        schedule: &NoiseSchedule,
        x_t: &LatentGrid,
        t: usize,
        condition: Option<&ConditionVector>,
        mut hook: Option<&mut dyn LogitHook>,
    ) -> Result<LatentGrid> {
        self.check_input(x_t)?;
        let cfg = &self.config;
        let ab = schedule.alpha_bar(t)?;
        let g = self.signal_gain(ab);
        let rho = cfg.ff_weight;
        let features = self.features(x_t, t, schedule, condition);
        let ff = self.feedforward(&features, condition);
        let u = Self::tokens(x_t) / ab.sqrt();
        let own = &u * g;
        let mut y = &own + &(&ff * ((1.0 - g) * rho));
        for (l, layer) in self.layers.iter().enumerate() {
            let mut logits = self.layer_logits(layer, &features);
            if let Some(h) = hook.as_deref_mut() {
                logits = self.run_hook(h, l, logits)?;
            }
            let probs = softmax_rows(logits);
            let context = if l == 0 && cfg.region_variance > 0.0 {
                self.region_context(&probs, layer, &u, &(&y - &own), ab)
            } else {
                let mut context = Array2::<f64>::zeros(y.raw_dim());
                for h in 0..cfg.heads {
                    let values = y.dot(&layer.value.index_axis(Axis(0), h).t());
                    context += &probs.index_axis(Axis(0), h).dot(&values);
                }
                context / cfg.heads as f64
            };
            let prior = context * (1.0 - rho) + &ff * rho;
            y = &own + &(prior * (1.0 - g));
        }
        Ok(Self::untokens(&y, self.grid))
    }

    /// Attention pooling where each query shrinks its pooled observations
    /// as an estimate of a shared region mean: a pool of `n_eff` tokens
    /// (inverse sum of squared weights) sees noise variance
    /// `(s^2 + (1 - ab) / ab) / n_eff`.
    fn region_context(
        &self,
        probs: &Array3<f64>,
        layer: &AttentionLayer,
        u: &Array2<f64>,
        rest: &Array2<f64>,
        ab: f64,
    ) -> Array2<f64> {
        let cfg = &self.config;
        let noise = cfg.prior_variance + (1.0 - ab) / ab;
        let mut context = Array2::<f64>::zeros(u.raw_dim());
        for h in 0..cfg.heads {
            let p = probs.index_axis(Axis(0), h);
            let v = layer.value.index_axis(Axis(0), h);
            let pooled_u = p.dot(&u.dot(&v.t()));
            let pooled_rest = p.dot(&rest.dot(&v.t()));
            for (i, row) in p.outer_iter().enumerate() {
                let n_eff = 1.0 / row.iter().map(|w| w * w).sum::<f64>();
                let gain = cfg.region_variance / (cfg.region_variance + noise / n_eff);
                for c in 0..u.ncols() {
                    context[[i, c]] += gain * pooled_u[[i, c]] + pooled_rest[[i, c]];
                }
            }
        }
        context / cfg.heads as f64
    }

    fn forward(
        &self,
        schedule: &NoiseSchedule,
        x_t: &LatentGrid,
        t: usize,
        condition: Option<&ConditionVector>,
        hook: Option<&mut dyn LogitHook>,
    ) -> Result<LatentGrid> {
        let ab = schedule.alpha_bar(t)?;
        let one_minus = 1.0 - ab;
        if one_minus < 1e-12 {
            return Err(SowError::NearDataSingularity {
                t,
                one_minus_alpha_bar: one_minus,
            });
        }
        let x0 = self.predict_x0(schedule, x_t, t, condition, hook)?;
        let eps = x_t
            .axpby(1.0, &x0, -ab.sqrt())?
            .scaled(1.0 / one_minus.sqrt());
        ensure_finite(eps, t)
    }

    fn int_header(&self) -> Vec<u32> {
        let c = &self.config;
        [c.channels, c.heads, c.head_dim, c.layers, c.pos_features, c.hidden, c.classes, c.class_dim]
            .iter()
            .map(|&v| v as u32)
            .collect()
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let mut tensors = vec![Tensor {
            name: "pos_freqs".into(),
            dims: self.pos_freqs.shape().to_vec(),
            values: to_f32(self.pos_freqs.iter().copied()),
        }];
        for (l, layer) in self.layers.iter().enumerate() {
            tensors.push(Tensor {
                name: format!("layer{l}.query"),
                dims: layer.query.shape().to_vec(),
                values: to_f32(layer.query.iter().copied()),
            });
            tensors.push(Tensor {
                name: format!("layer{l}.key"),
                dims: layer.key.shape().to_vec(),
                values: to_f32(layer.key.iter().copied()),
            });
            tensors.push(Tensor {
                name: format!("layer{l}.value"),
                dims: layer.value.shape().to_vec(),
                values: to_f32(layer.value.iter().copied()),
            });
        }
        for (name, arr) in [
            ("ff_in", &self.ff_in),
            ("ff_out", &self.ff_out),
            ("class_embed", &self.class_embed),
            ("class_mean", &self.class_mean),
        ] {
            tensors.push(Tensor {
                name: name.into(),
                dims: arr.shape().to_vec(),
                values: to_f32(arr.iter().copied()),
            });
        }
        let mut ints = self.int_header();
        ints.push((self.config.seed & 0xffff_ffff) as u32);
        ints.push((self.config.seed >> 32) as u32);
        WeightFile {
            ints,
            scalars: vec![
                self.config.prior_variance,
                self.config.ff_weight,
                self.config.region_variance,
            ],
            tensors,
        }
    }

    pub fn from_weight_file(wf: &WeightFile, grid: TokenGrid) -> Result<Self> {
        if wf.ints.len() != 10 || wf.scalars.len() != 3 {
            return Err(SowError::invalid("weight file header does not describe a toy denoiser"));
        }
        let i = |k: usize| wf.ints[k] as usize;
        let config = ToyConfig {
            channels: i(0),
            heads: i(1),
            head_dim: i(2),
            layers: i(3),
            pos_features: i(4),
            hidden: i(5),
            classes: i(6),
            class_dim: i(7),
            seed: wf.ints[8] as u64 | (wf.ints[9] as u64) << 32,
            prior_variance: wf.scalars[0],
            ff_weight: wf.scalars[1],
            region_variance: wf.scalars[2],
        };
        config.validate()?;
        let d_in = config.feature_dim();
        let qk = config.heads * config.head_dim;
        let c = config.channels;
        let load2 = |name: &str, shape: (usize, usize)| -> Result<Array2<f64>> {
            let t = wf.tensor(name)?;
            if t.dims != [shape.0, shape.1] {
                return Err(SowError::invalid(format!("tensor `{name}` has dims {:?}", t.dims)));
            }
            Ok(Array2::from_shape_vec(shape, t.values.iter().map(|&v| v as f64).collect())
                .expect("dims checked"))
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let value_name = format!("layer{l}.value");
            let vt = wf.tensor(&value_name)?;
            if vt.dims != [config.heads, c, c] {
                return Err(SowError::invalid(format!("tensor `{value_name}` has dims {:?}", vt.dims)));
            }
            layers.push(AttentionLayer {
                query: load2(&format!("layer{l}.query"), (d_in, qk))?,
                key: load2(&format!("layer{l}.key"), (d_in, qk))?,
                value: Array3::from_shape_vec(
                    (config.heads, c, c),
                    vt.values.iter().map(|&v| v as f64).collect(),
                )
                .expect("dims checked"),
            });
        }
        Ok(Self {
            pos_freqs: load2("pos_freqs", (2, config.pos_features))?,
            ff_in: load2("ff_in", (d_in, config.hidden))?,
            ff_out: load2("ff_out", (config.hidden, c))?,
            class_embed: load2("class_embed", (config.classes, config.class_dim))?,
            class_mean: load2("class_mean", (config.classes, c))?,
            layers,
            config,
            grid,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let out = BufWriter::new(File::create(path)?);
        self.to_weight_file().write(out)
    }

    pub fn load(path: &Path, grid: TokenGrid) -> Result<Self> {
        let wf = WeightFile::read(BufReader::new(File::open(path)?))?;
        Self::from_weight_file(&wf, grid)
    }
}

/// Row-wise softmax over the key axis of `heads x queries x keys` logits.
pub fn softmax_rows(mut logits: Array3<f64>) -> Array3<f64> {
    for mut row in logits.lanes_mut(Axis(2)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    logits
}

impl DenoiserModel for ToyAttentionDenoiser {
    fn predict_eps(
        &self,
        schedule: &NoiseSchedule,
        x_t: &LatentGrid,
        t: usize,
        condition: Option<&ConditionVector>,
    ) -> Result<LatentGrid> {
        self.forward(schedule, x_t, t, condition, None)
    }

    fn predict_eps_hooked(
        &self,
        schedule: &NoiseSchedule,
        x_t: &LatentGrid,
        t: usize,
        condition: Option<&ConditionVector>,
        hook: &mut dyn LogitHook,
    ) -> Result<LatentGrid> {
        self.forward(schedule, x_t, t, condition, Some(hook))
    }

    fn attention_layers(&self) -> usize {
        self.layers.len()
    }
}
