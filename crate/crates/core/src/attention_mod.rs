//! Dynamic attention modulation.
//!
//! Two additive logit offsets steer information flow between regions:
//! `P-` pushes conditional-region queries away from keys outside the
//! conditional region, `P+` pulls condition-related queries towards the
//! conditional region. Both fade with the cycle index through a cosine decay
//! `gamma`, and `P+` also fades with distance from the condition's center.
//! The offsets are only applied when the diffusion indicator `R_c` exceeds the
//! threshold `tau`, with strength `sqrt(R_c - tau)`.

use log::warn;
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SowError};
use crate::grid::{RegionBox, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModulationConfig {
    pub omega_minus: f64,
    pub omega_plus: f64,
    /// Decay horizon, in cycles (also the range distances are rescaled to).
    #[serde(rename = "T")]
    pub horizon: f64,
    pub a_time_minus: f64,
    pub a_time_plus: f64,
    pub a_dis: f64,
    pub tau: f64,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            omega_minus: 0.04,
            omega_plus: 0.145,
            horizon: 10.0,
            a_time_minus: 0.5,
            a_time_plus: 0.8,
            a_dis: 0.3,
            tau: 0.273,
        }
    }
}

impl ModulationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("omega_minus", self.omega_minus),
            ("omega_plus", self.omega_plus),
            ("a_time_minus", self.a_time_minus),
            ("a_time_plus", self.a_time_plus),
            ("a_dis", self.a_dis),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(SowError::invalid(format!("modulation {name} must be positive, got {v}")));
        }
        if !(self.horizon >= 1.0 && self.horizon.is_finite()) {
            return Err(SowError::invalid(format!("modulation T must be >= 1, got {}", self.horizon)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(SowError::invalid(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

/// Cosine decay `((1 + cos(pi (2T - x) / T)) / 2)^a`: 1 at `x = 0`, 0 at `x = T`.
///
/// Arguments outside `[0, T]` are clamped (with a warning) since the cosine
/// would otherwise wrap around and grow again.
pub fn gamma(x: f64, horizon: f64, a: f64) -> f64 {
    let x = if x < 0.0 || x > horizon {
        warn!("gamma argument {x} outside [0, {horizon}], clamping");
        x.clamp(0.0, horizon)
    } else {
        x
    };
    let base = 0.5 * (1.0 + (std::f64::consts::PI * (2.0 * horizon - x) / horizon).cos());
    // cos(pi) lands a hair above -1 in floating point
    let base = if x == horizon { 0.0 } else { base.max(0.0) };
    base.powf(a)
}

/// Boolean query -> key masks over the token grid, `tokens x tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationMasks {
    /// Queries in `box_v`, keys outside `box_v`.
    pub cond_to_noncond: Array2<bool>,
    /// Queries in `box_r`, keys in `box_v`.
    pub related_to_cond: Array2<bool>,
    pub grid: TokenGrid,
}

pub fn build_masks(box_v: &RegionBox, box_r: &RegionBox, grid: TokenGrid) -> Result<ModulationMasks> {
    box_v.check_inside(grid)?;
    box_r.check_inside(grid)?;
    let n = grid.len();
    let in_v: Vec<bool> = (0..n)
        .map(|i| {
            let (r, c) = grid.coords(i);
            box_v.contains(r, c)
        })
        .collect();
    let in_r: Vec<bool> = (0..n)
        .map(|i| {
            let (r, c) = grid.coords(i);
            box_r.contains(r, c)
        })
        .collect();
    let cond_to_noncond = Array2::from_shape_fn((n, n), |(q, k)| in_v[q] && !in_v[k]);
    let related_to_cond = Array2::from_shape_fn((n, n), |(q, k)| in_r[q] && in_v[k]);
    Ok(ModulationMasks {
        cond_to_noncond,
        related_to_cond,
        grid,
    })
}

/// Distance of each `box_r` token to the conditional center, rescaled to `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    /// `(token index, rescaled distance)` for every token of `box_r`, row-major.
    pub values: Vec<(usize, f64)>,
    pub horizon: f64,
}

impl DistanceField {
    pub fn get(&self, token: usize) -> Option<f64> {
        self.values.iter().find(|(i, _)| *i == token).map(|(_, d)| *d)
    }
}

/// Affine map of `distances` onto `[0, horizon]`; all zeros when every
/// distance is equal (including the single-value case).
pub fn rescale_distances(distances: &[f64], horizon: f64) -> Vec<f64> {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let max = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if !(span > 0.0) {
        return vec![0.0; distances.len()];
    }
    distances
        .iter()
        .map(|d| {
            if *d == max {
                horizon
            } else {
                (d - min) / span * horizon
            }
        })
        .collect()
}

/// Euclidean distance from a token's center to a point, in token units.
fn token_distance(grid: TokenGrid, token: usize, point: (f64, f64)) -> f64 {
    let (row, col) = grid.coords(token);
    let dx = col as f64 + 0.5 - point.0;
    let dy = row as f64 + 0.5 - point.1;
    (dx * dx + dy * dy).sqrt()
}

pub fn distance_field(
    box_r: &RegionBox,
    box_v: &RegionBox,
    grid: TokenGrid,
    horizon: f64,
) -> Result<DistanceField> {
    box_r.check_inside(grid)?;
    box_v.check_inside(grid)?;
    let center = box_v.center();
    let tokens = box_r.tokens(grid);
    let raw: Vec<f64> = tokens
        .iter()
        .map(|&t| token_distance(grid, t, center))
        .collect();
    let scaled = rescale_distances(&raw, horizon);
    Ok(DistanceField {
        values: tokens.into_iter().zip(scaled).collect(),
        horizon,
    })
}

/// `P- = -M_{c->nc} * gamma(cycle; T, a_time_minus) * omega_minus`.
pub fn compute_p_minus(masks: &ModulationMasks, cycle: usize, cfg: &ModulationConfig) -> Array2<f64> {
    let weight = gamma(cycle as f64, cfg.horizon, cfg.a_time_minus) * cfg.omega_minus;
    masks
        .cond_to_noncond
        .mapv(|m| if m { -weight } else { 0.0 })
}

/// `P+ = M_{cr->c} * gamma(D_q; T, a_dis) * gamma(cycle; T, a_time_plus) * omega_plus`,
/// with `D_q` the rescaled distance of the query token.
pub fn compute_p_plus(
    masks: &ModulationMasks,
    dfield: &DistanceField,
    cycle: usize,
    cfg: &ModulationConfig,
) -> Array2<f64> {
    let time = gamma(cycle as f64, cfg.horizon, cfg.a_time_plus) * cfg.omega_plus;
    let n = masks.grid.len();
    let mut per_query = vec![0.0; n];
    for &(token, d) in &dfield.values {
        per_query[token] = gamma(d, dfield.horizon, cfg.a_dis) * time;
    }
    Array2::from_shape_fn((n, n), |(q, k)| {
        if masks.related_to_cond[[q, k]] {
            per_query[q]
        } else {
            0.0
        }
    })
}

/// Diffusion indicator for one layer's logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcValue {
    pub value: f64,
    /// False when every head had zero condition-directed mass, in which case
    /// `value` is 0 and carries no signal.
    pub defined: bool,
}

/// Per-head min-max normalised logits, `(A - min) / (max - min)`. A constant
/// head maps to all ones.
pub fn minmax_normalize(logits: &Array3<f64>) -> Array3<f64> {
    let mut out = logits.clone();
    for mut head in out.axis_iter_mut(Axis(0)) {
        let min = head.iter().copied().fold(f64::INFINITY, f64::min);
        let max = head.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        if range > 0.0 {
            head.mapv_inplace(|v| (v - min) / range);
        } else {
            head.fill(1.0);
        }
    }
    out
}

/// `R_c`: mean over heads of the share of `box_r`'s condition-directed
/// attention held by the `ceil(m / 5)` `box_r` tokens closest to `center`.
///
/// A token's condition-directed attention is the sum of its normalised logits
/// over keys in `box_v`.
pub fn compute_rc(
    logits: &Array3<f64>,
    grid: TokenGrid,
    box_r: &RegionBox,
    box_v: &RegionBox,
    center: (f64, f64),
) -> Result<RcValue> {
    let (heads, nq, nk) = logits.dim();
    if heads == 0 || nq != grid.len() || nk != grid.len() {
        return Err(SowError::invalid(format!(
            "logits {:?} do not cover a {}x{} grid",
            logits.dim(),
            grid.height,
            grid.width
        )));
    }
    box_r.check_inside(grid)?;
    box_v.check_inside(grid)?;
    let norm = minmax_normalize(logits);
    let mut related: Vec<(usize, f64)> = box_r
        .tokens(grid)
        .into_iter()
        .map(|t| (t, token_distance(grid, t, center)))
        .collect();
    // stable: ties keep row-major order
    related.sort_by(|a, b| a.1.total_cmp(&b.1));
    let m = related.len();
    let k = m.div_ceil(5);
    let cond_keys = box_v.tokens(grid);

    // running mean over heads: exact when every head has the same share
    let mut mean = 0.0;
    let mut defined = false;
    for h in 0..heads {
        let head = norm.index_axis(Axis(0), h);
        let mass: Vec<f64> = related
            .iter()
            .map(|&(q, _)| cond_keys.iter().map(|&key| head[[q, key]]).sum())
            .collect();
        let total: f64 = mass.iter().sum();
        let share = if total > 0.0 {
            defined = true;
            mass[..k].iter().sum::<f64>() / total
        } else {
            0.0
        };
        mean += (share - mean) / (h + 1) as f64;
    }
    if !defined {
        warn!("R_c undefined: no condition-directed attention mass");
        return Ok(RcValue {
            value: 0.0,
            defined: false,
        });
    }
    Ok(RcValue { value: mean, defined })
}

/// Gated update `A' = A + sqrt(max(0, R_c - tau)) * range_h * (P+ + P-)`, with
/// `range_h = max - min` of head `h`'s logits. With the gate closed the input
/// is returned untouched; entries outside both masks never change.
pub fn modulate(
    logits: Array3<f64>,
    p_plus: &Array2<f64>,
    p_minus: &Array2<f64>,
    r_c: f64,
    cfg: &ModulationConfig,
) -> Result<Array3<f64>> {
    let (_, nq, nk) = logits.dim();
    if p_plus.dim() != (nq, nk) || p_minus.dim() != (nq, nk) {
        return Err(SowError::invalid(format!(
            "offset shapes {:?}/{:?} do not match logits {:?}",
            p_plus.dim(),
            p_minus.dim(),
            logits.dim()
        )));
    }
    let gate = (r_c - cfg.tau).max(0.0).sqrt();
    if !(gate > 0.0) {
        return Ok(logits);
    }
    let mut out = logits;
    for mut head in out.axis_iter_mut(Axis(0)) {
        let min = head.iter().copied().fold(f64::INFINITY, f64::min);
        let max = head.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let strength = gate * (max - min);
        ndarray::Zip::from(&mut head)
            .and(p_plus)
            .and(p_minus)
            .for_each(|a, &pp, &pm| {
                let offset = pp + pm;
                if offset != 0.0 {
                    *a += strength * offset;
                }
            });
    }
    Ok(out)
}

/// Everything needed to modulate one generation's attention.
#[derive(Debug, Clone)]
pub struct RegionModulator {
    pub masks: ModulationMasks,
    pub dfield: DistanceField,
    pub box_v: RegionBox,
    pub box_r: RegionBox,
    pub config: ModulationConfig,
}

impl RegionModulator {
    pub fn new(box_v: RegionBox, box_r: RegionBox, grid: TokenGrid, config: ModulationConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            masks: build_masks(&box_v, &box_r, grid)?,
            dfield: distance_field(&box_r, &box_v, grid, config.horizon)?,
            box_v,
            box_r,
            config,
        })
    }

    pub fn rc(&self, logits: &Array3<f64>) -> Result<RcValue> {
        compute_rc(logits, self.masks.grid, &self.box_r, &self.box_v, self.box_v.center())
    }

    /// Offsets `P+ + P-` for a cycle index, kept separate for inspection.
    pub fn offsets(&self, cycle: usize) -> (Array2<f64>, Array2<f64>) {
        let cycle = cycle.min(self.config.horizon.floor() as usize);
        (
            compute_p_plus(&self.masks, &self.dfield, cycle, &self.config),
            compute_p_minus(&self.masks, cycle, &self.config),
        )
    }

    /// Applies the gated update with this layer's own `R_c`.
    pub fn apply_layer(&self, logits: Array3<f64>, p_plus: &Array2<f64>, p_minus: &Array2<f64>) -> Array3<f64> {
        let rc = match self.rc(&logits) {
            Ok(rc) => rc.value,
            Err(_) => return logits,
        };
        let dim = logits.dim();
        modulate(logits, p_plus, p_minus, rc, &self.config).unwrap_or_else(|_| Array3::zeros(dim))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[allow(clippy::approx_constant)]
    fn gamma_fixed_points() {
        assert_eq!(gamma(0.0, 10.0, 0.5), 1.0);
        assert_eq!(gamma(10.0, 10.0, 0.5), 0.0);
        assert!((gamma(5.0, 10.0, 0.5) - 0.7071067811865476).abs() < 1e-12);
    }

    #[test]
    fn gamma_clamps_out_of_range() {
        assert_eq!(gamma(-3.0, 10.0, 0.5), 1.0);
        assert_eq!(gamma(14.0, 10.0, 0.5), 0.0);
    }

    #[test]
    fn gamma_is_monotone_nonincreasing() {
        for a in [0.1, 0.3, 0.5, 0.8, 2.0] {
            let vals: Vec<f64> = (0..=10_000).map(|i| gamma(i as f64 * 1e-3, 10.0, a)).collect();
            assert!(vals.windows(2).all(|w| w[1] <= w[0]), "a={a}");
            if a >= 0.5 {
                assert!(vals.windows(2).all(|w| (w[0] - w[1]).abs() < 0.05), "continuity a={a}");
            }
        }
    }

    #[test]
    fn full_cover_box_has_no_outside_keys() {
        let g = TokenGrid::new(3, 3);
        let m = build_masks(&g.full_box(), &RegionBox::new(0, 0, 1, 1), g).unwrap();
        assert!(m.cond_to_noncond.iter().all(|&b| !b));
    }

    #[test]
    fn single_token_box_counts() {
        let g = TokenGrid::new(2, 2);
        let m = build_masks(&RegionBox::new(1, 0, 1, 1), &RegionBox::new(0, 1, 2, 1), g).unwrap();
        let q = g.index(0, 1);
        assert_eq!(m.cond_to_noncond.row(q).iter().filter(|&&b| b).count(), 3);
        assert_eq!(m.cond_to_noncond.iter().filter(|&&b| b).count(), 3);
    }

    #[test]
    fn related_mask_counts() {
        let g = TokenGrid::new(6, 6);
        let bv = RegionBox::new(1, 0, 3, 2);
        let br = RegionBox::new(0, 3, 4, 3);
        let m = build_masks(&bv, &br, g).unwrap();
        assert_eq!(m.related_to_cond.iter().filter(|&&b| b).count(), 12 * 6);
        // disjoint boxes give disjoint supports
        assert!(m
            .related_to_cond
            .iter()
            .zip(m.cond_to_noncond.iter())
            .all(|(a, b)| !(*a && *b)));
    }

    #[test]
    fn masks_reject_outside_boxes() {
        let g = TokenGrid::new(4, 4);
        assert!(build_masks(&RegionBox::new(3, 3, 2, 2), &RegionBox::new(0, 0, 1, 1), g).is_err());
    }

    #[test]
    fn distance_rescaling() {
        assert_eq!(rescale_distances(&[1.0, 3.0], 10.0), vec![0.0, 10.0]);
        assert_eq!(rescale_distances(&[1.0, 2.0, 3.0], 10.0), vec![0.0, 5.0, 10.0]);
        assert_eq!(rescale_distances(&[2.5; 8], 10.0), vec![0.0; 8]);
        assert_eq!(rescale_distances(&[4.0], 10.0), vec![0.0]);
    }

    #[test]
    fn collinear_distance_field() {
        let g = TokenGrid::new(1, 4);
        let f = distance_field(&RegionBox::new(1, 0, 3, 1), &RegionBox::new(0, 0, 1, 1), g, 10.0).unwrap();
        let d: Vec<f64> = f.values.iter().map(|v| v.1).collect();
        assert_eq!(d, vec![0.0, 5.0, 10.0]);
    }

    #[test]
    fn single_token_field_is_zero() {
        let g = TokenGrid::new(3, 3);
        let f = distance_field(&RegionBox::new(2, 2, 1, 1), &RegionBox::new(0, 0, 1, 1), g, 10.0).unwrap();
        assert_eq!(f.values, vec![(8, 0.0)]);
    }

    fn fixture() -> (ModulationMasks, DistanceField, ModulationConfig) {
        let g = TokenGrid::new(1, 4);
        let bv = RegionBox::new(0, 0, 1, 1);
        let br = RegionBox::new(1, 0, 3, 1);
        (
            build_masks(&bv, &br, g).unwrap(),
            distance_field(&br, &bv, g, 10.0).unwrap(),
            ModulationConfig::default(),
        )
    }

    #[test]
    fn p_minus_values() {
        let (m, _, cfg) = fixture();
        assert!(compute_p_minus(&m, 10, &cfg).iter().all(|&v| v == 0.0));
        let p0 = compute_p_minus(&m, 0, &cfg);
        assert_eq!(p0[[0, 1]], -0.04);
        assert_eq!(p0[[1, 0]], 0.0);
        let p5 = compute_p_minus(&m, 5, &cfg);
        assert!((p5[[0, 2]] + 0.028284271247461905).abs() < 1e-12);
    }

    #[test]
    fn p_plus_values() {
        let (m, f, cfg) = fixture();
        assert!(compute_p_plus(&m, &f, 10, &cfg).iter().all(|&v| v == 0.0));
        let p = compute_p_plus(&m, &f, 0, &cfg);
        // query 1 is nearest (D=0), query 3 farthest (D=T)
        assert_eq!(p[[1, 0]], 0.145);
        assert_eq!(p[[3, 0]], 0.0);
        assert!(p[[2, 0]] > 0.0 && p[[2, 0]] < 0.145);
        assert_eq!(p[[1, 2]], 0.0);
    }

    #[test]
    fn rc_uniform_is_one_fifth() {
        let g = TokenGrid::new(6, 5);
        let bv = RegionBox::new(0, 0, 5, 2);
        let br = RegionBox::new(0, 2, 5, 4);
        assert_eq!(br.area(), 20);
        let logits = Array3::from_elem((1, 30, 30), 0.37);
        let rc = compute_rc(&logits, g, &br, &bv, bv.center()).unwrap();
        assert_eq!(rc.value, 0.2);
        assert!(rc.defined);
    }

    #[test]
    fn rc_concentrated_is_one() {
        let g = TokenGrid::new(2, 5);
        let bv = RegionBox::new(2, 0, 1, 1);
        let br = RegionBox::new(0, 1, 5, 1);
        let mut logits = Array3::zeros((1, 10, 10));
        // closest box_r token to the center of bv is directly below it
        logits[[0, g.index(1, 2), g.index(0, 2)]] = 3.0;
        let rc = compute_rc(&logits, g, &br, &bv, bv.center()).unwrap();
        assert_eq!(rc.value, 1.0);
    }

    #[test]
    fn rc_averages_heads() {
        // m = 10, k = 2; head 0 uniform (0.2), head 1 puts 0.6 on the closest two
        let g = TokenGrid::new(3, 5);
        let bv = RegionBox::new(2, 0, 1, 1);
        let br = RegionBox::new(0, 1, 5, 2);
        let mut logits = Array3::from_elem((2, 15, 15), 1.0);
        let key = g.index(0, 2);
        let mut order: Vec<usize> = br.tokens(g);
        order.sort_by(|&a, &b| {
            token_distance(g, a, bv.center()).total_cmp(&token_distance(g, b, bv.center()))
        });
        // min 0, max 1: closest two get 3 units each, the other eight 0.5 each -> 6 / 10
        logits.index_axis_mut(Axis(0), 1).fill(0.0);
        for (i, &q) in order.iter().enumerate() {
            logits[[1, q, key]] = if i < 2 { 1.0 } else { 0.5 / 3.0 };
        }
        let rc = compute_rc(&logits, g, &br, &bv, bv.center()).unwrap();
        // head 1 ratio = 2 / (2 + 8/6) = 0.6
        assert!((rc.value - 0.4).abs() < 1e-12, "{}", rc.value);
    }

    #[test]
    fn rc_without_mass_is_flagged() {
        let g = TokenGrid::new(2, 2);
        let bv = RegionBox::new(0, 0, 1, 1);
        let br = RegionBox::new(0, 1, 2, 1);
        let mut logits = Array3::zeros((1, 4, 4));
        logits[[0, 0, 3]] = 1.0;
        let rc = compute_rc(&logits, g, &br, &bv, bv.center()).unwrap();
        assert_eq!(rc, RcValue { value: 0.0, defined: false });
    }

    #[test]
    fn closed_gate_is_identity() {
        let (m, f, cfg) = fixture();
        let logits = Array3::from_shape_fn((2, 4, 4), |(h, q, k)| (h * 16 + q * 4 + k) as f64 * 0.1);
        let pp = compute_p_plus(&m, &f, 0, &cfg);
        let pm = compute_p_minus(&m, 0, &cfg);
        for rc in [0.0, 0.2, 0.273] {
            assert_eq!(modulate(logits.clone(), &pp, &pm, rc, &cfg).unwrap(), logits);
        }
    }

    #[test]
    fn gate_strength_scales_with_sqrt() {
        let (m, f, cfg) = fixture();
        let logits = Array3::from_shape_fn((1, 4, 4), |(_, q, k)| (q * 4 + k) as f64);
        let pp = compute_p_plus(&m, &f, 0, &cfg);
        let pm = compute_p_minus(&m, 0, &cfg);
        let out = modulate(logits.clone(), &pp, &pm, cfg.tau + 0.01, &cfg).unwrap();
        let range = 15.0;
        let delta = out[[0, 1, 0]] - logits[[0, 1, 0]];
        assert!((delta - 0.1 * range * 0.145).abs() < 1e-9);
        assert_eq!(out[[0, 2, 3]], logits[[0, 2, 3]]);
    }
}
