//! Spatial latent fields and the token geometry they are laid out on.

use std::io::{Read, Write};

use ndarray::{s, Array3, ArrayView3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SowError};

const GRID_MAGIC: &[u8; 4] = b"SOWG";
const GRID_VERSION: u32 = 1;

/// Token layout of a latent grid: one token per spatial cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major token index.
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }

    pub fn full_box(&self) -> RegionBox {
        RegionBox::new(0, 0, self.width, self.height)
    }
}

/// Axis-aligned rectangle in `[x, y, width, height]` form, `(x, y)` the top-left corner.
///
/// Used both in pixel space (planner output) and in token space (masks, replacement).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", from = "[usize; 4]")]
pub struct RegionBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl From<RegionBox> for [usize; 4] {
    fn from(b: RegionBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl From<[usize; 4]> for RegionBox {
    fn from(v: [usize; 4]) -> Self {
        RegionBox::new(v[0], v[1], v[2], v[3])
    }
}

impl RegionBox {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.y && row < self.bottom() && col >= self.x && col < self.right()
    }

    /// Continuous center, in the same units as the box.
    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    pub fn fits(&self, grid: TokenGrid) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= grid.width && self.bottom() <= grid.height
    }

    pub fn check_inside(&self, grid: TokenGrid) -> Result<()> {
        if self.fits(grid) {
            Ok(())
        } else {
            Err(SowError::invalid(format!(
                "box {:?} does not lie inside a {}x{} grid",
                <[usize; 4]>::from(*self),
                grid.height,
                grid.width
            )))
        }
    }

    /// Token indices covered by the box, row-major.
    pub fn tokens(&self, grid: TokenGrid) -> Vec<usize> {
        (self.y..self.bottom())
            .flat_map(|r| (self.x..self.right()).map(move |c| grid.index(r, c)))
            .collect()
    }

    pub fn intersects(&self, other: &RegionBox) -> bool {
        self.x < other.right()
            && other.x < self.right()
            && self.y < other.bottom()
            && other.y < self.bottom()
    }
}

/// A real-valued `channels x height x width` field holding `x_t` or `v_t` states.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    data: Array3<f64>,
}

impl LatentGrid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            data: Array3::from_elem((channels, height, width), value),
        }
    }

    pub fn from_array(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let data = Array3::from_shape_vec((channels, height, width), values)
            .map_err(|e| SowError::invalid(format!("grid shape: {e}")))?;
        Ok(Self { data })
    }

    /// Standard-normal field drawn from `rng`, in row-major order.
    pub fn standard_normal<R: Rng + ?Sized>(
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let values = (0..channels * height * width)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            data: Array3::from_shape_vec((channels, height, width), values)
                .expect("length matches shape"),
        }
    }

    pub fn noise_like<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let (c, h, w) = self.shape();
        Self::standard_normal(c, h, w, rng)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn token_grid(&self) -> TokenGrid {
        let (_, h, w) = self.data.dim();
        TokenGrid::new(h, w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn array(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn array_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_array(self) -> Array3<f64> {
        self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.data.iter()
    }

    pub fn ensure_same_shape(&self, other: &LatentGrid, what: &str) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(SowError::invalid(format!(
                "{what}: shape {:?} does not match {:?}",
                other.shape(),
                self.shape()
            )))
        }
    }

    /// `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &LatentGrid, b: f64) -> Result<LatentGrid> {
        self.ensure_same_shape(other, "linear combination")?;
        let mut out = self.data.clone();
        Zip::from(&mut out)
            .and(&other.data)
            .for_each(|o, &y| *o = a * *o + b * y);
        Ok(Self { data: out })
    }

    pub fn scaled(&self, a: f64) -> LatentGrid {
        Self {
            data: self.data.mapv(|v| a * v),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.sum() / self.data.len() as f64
        }
    }

    /// Mean squared difference to `other`.
    pub fn mse(&self, other: &LatentGrid) -> Result<f64> {
        self.ensure_same_shape(other, "mse")?;
        let sum: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len().max(1) as f64)
    }

    /// Copy of the box region, `channels x box.h x box.w`.
    pub fn crop(&self, region: &RegionBox) -> Result<LatentGrid> {
        region.check_inside(self.token_grid())?;
        Ok(Self {
            data: self
                .data
                .slice(s![.., region.y..region.bottom(), region.x..region.right()])
                .to_owned(),
        })
    }

    /// Writes `patch` (shaped like the box) into the box region.
    pub fn paste(&mut self, region: &RegionBox, patch: &LatentGrid) -> Result<()> {
        region.check_inside(self.token_grid())?;
        let (pc, ph, pw) = patch.shape();
        if pc != self.channels() || ph != region.h || pw != region.w {
            return Err(SowError::ResizeRequired {
                got: (ph, pw),
                want: (region.h, region.w),
            });
        }
        self.data
            .slice_mut(s![.., region.y..region.bottom(), region.x..region.right()])
            .assign(&patch.data);
        Ok(())
    }

    /// Overwrites the box region with the same region of `source`.
    pub fn copy_region_from(&mut self, source: &LatentGrid, region: &RegionBox) -> Result<()> {
        self.ensure_same_shape(source, "region copy")?;
        region.check_inside(self.token_grid())?;
        let src = source
            .data
            .slice(s![.., region.y..region.bottom(), region.x..region.right()]);
        self.data
            .slice_mut(s![.., region.y..region.bottom(), region.x..region.right()])
            .assign(&src);
        Ok(())
    }

    /// Channel vector of one token.
    pub fn token(&self, row: usize, col: usize) -> Vec<f64> {
        self.data.slice(s![.., row, col]).to_vec()
    }

    /// Hex SHA-256 over the shape and the little-endian bytes of every value.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let (c, h, w) = self.shape();
        for d in [c, h, w] {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in self.data.iter() {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Flat binary form: `b"SOWG"`, `u32` version, `u32` channels/height/width, then
    /// `f64` values in row-major order, all little-endian.
    pub fn write_bin<W: Write>(&self, mut out: W) -> Result<()> {
        let (c, h, w) = self.shape();
        out.write_all(GRID_MAGIC)?;
        out.write_all(&GRID_VERSION.to_le_bytes())?;
        for d in [c, h, w] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in self.data.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_bin<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(SowError::invalid("not a latent grid file (bad magic)"));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != GRID_VERSION {
            return Err(SowError::invalid(format!("unsupported grid version {version}")));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            input.read_exact(&mut word)?;
            *d = u32::from_le_bytes(word) as usize;
        }
        let n = dims[0] * dims[1] * dims[2];
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        Self::from_vec(dims[0], dims[1], dims[2], values)
    }
}
