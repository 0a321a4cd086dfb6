//! Three-axis rotary positional embedding.
//!
//! The feature vector is split into four contiguous parts laid out as
//! `[time | height | width | unrotated]`. Each of the first three parts is
//! a standard 1-D rotary embedding driven by the token's position along
//! its axis; the last part carries no position information.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token position `(τ, i, j)` in patch units.
pub type GridPos = [usize; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApplySite {
    /// Rotate the normalized token stream entering the attention sub-block.
    #[default]
    PostFirstNorm,
    /// Rotate queries and keys only.
    AttentionQk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub d_model: usize,
    /// Fractions of `d_model` for the time, height and width parts.
    pub fractions: [f64; 3],
    pub max_wavelength: f64,
    #[serde(default)]
    pub apply_site: ApplySite,
}

impl RopeConfig {
    pub fn new(d_model: usize) -> Self {
        Self { d_model, fractions: [0.10, 0.25, 0.25], max_wavelength: 10_000.0, apply_site: ApplySite::PostFirstNorm }
    }

    /// Sizes of the `[time, height, width, unrotated]` parts.
    ///
    /// Each rotated part gets `2·round(f·D/2)` features; the remainder goes
    /// to the unrotated part.
    pub fn part_sizes(&self) -> Result<[usize; 4]> {
        let d = self.d_model;
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config("rope.fractions", "each fraction must lie in [0, 1]"));
        }
        if self.fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::config("rope.fractions", "fractions sum to more than 1"));
        }
        if self.max_wavelength <= 0.0 {
            return Err(Error::config("rope.max_wavelength", "must be positive"));
        }
        let sizes: Vec<usize> = self
            .fractions
            .iter()
            .map(|f| 2 * (f * d as f64 / 2.0).round() as usize)
            .collect();
        let rotated: usize = sizes.iter().sum();
        if rotated > d {
            return Err(Error::config(
                "rope.fractions",
                format!("rounded parts need {rotated} features but d_model is {d}"),
            ));
        }
        Ok([sizes[0], sizes[1], sizes[2], d - rotated])
    }
}

/// Per-row rotation coefficients for a fixed sequence of positions.
///
/// Pair `p` of row `r` rotates columns `(2p, 2p+1)` by the angle whose cosine
/// and sine are stored at `r * pairs + p`.
#[derive(Clone, Debug)]
pub struct RowRotations {
    pub pairs: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RowRotations {
    pub fn rows(&self) -> usize {
        if self.pairs == 0 {
            0
        } else {
            self.cos.len() / self.pairs
        }
    }

    /// Rotates the leading `2·pairs` columns of each row in place.
    /// `inverse` applies the transposed rotation (used for gradients).
    pub(crate) fn rotate_in_place(&self, data: &mut [f64], cols: usize, inverse: bool) {
        let rows = data.len() / cols.max(1);
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            for p in 0..self.pairs {
                let c = self.cos[r * self.pairs + p];
                let s = if inverse { -self.sin[r * self.pairs + p] } else { self.sin[r * self.pairs + p] };
                let (x0, x1) = (row[2 * p], row[2 * p + 1]);
                row[2 * p] = c * x0 - s * x1;
                row[2 * p + 1] = s * x0 + c * x1;
            }
        }
    }
}

/// Cosine/sine lookup for every position of a `(T', H', W')` grid.
#[derive(Clone, Debug)]
pub struct RotationTable {
    grid: [usize; 3],
    parts: [usize; 4],
    cos: Vec<f64>,
    sin: Vec<f64>,
}

pub fn build_rotation_table(cfg: &RopeConfig, grid: [usize; 3]) -> Result<RotationTable> {
    if grid.iter().any(|&g| g == 0) {
        return Err(Error::config("grid", format!("all grid dims must be >= 1, got {grid:?}")));
    }
    let parts = cfg.part_sizes()?;
    let pairs = (parts[0] + parts[1] + parts[2]) / 2;
    let n_pos = grid[0] * grid[1] * grid[2];
    let mut cos = Vec::with_capacity(n_pos * pairs);
    let mut sin = Vec::with_capacity(n_pos * pairs);
    for t in 0..grid[0] {
        for h in 0..grid[1] {
            for w in 0..grid[2] {
                let coord = [t, h, w];
                for axis in 0..3 {
                    let d_axis = parts[axis];
                    for p in 0..d_axis / 2 {
                        let angle = axis_angle(coord[axis], p, d_axis, cfg.max_wavelength);
                        cos.push(angle.cos());
                        sin.push(angle.sin());
                    }
                }
            }
        }
    }
    Ok(RotationTable { grid, parts, cos, sin })
}

/// Angle for pair `p` of an axis part with `d_axis` features at coordinate `n`.
pub fn axis_angle(n: usize, p: usize, d_axis: usize, max_wavelength: f64) -> f64 {
    n as f64 * max_wavelength.powf(-2.0 * p as f64 / d_axis as f64)
}

impl RotationTable {
    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn part_sizes(&self) -> [usize; 4] {
        self.parts
    }

    pub fn pairs(&self) -> usize {
        (self.parts[0] + self.parts[1] + self.parts[2]) / 2
    }

    pub fn d_model(&self) -> usize {
        self.parts.iter().sum()
    }

    fn position_index(&self, pos: GridPos) -> Result<usize> {
        if pos.iter().zip(&self.grid).any(|(p, g)| p >= g) {
            return Err(Error::Range(format!("position {pos:?} outside grid {:?}", self.grid)));
        }
        Ok((pos[0] * self.grid[1] + pos[1]) * self.grid[2] + pos[2])
    }

    /// `(cos, sin)` of every rotated pair at `pos`.
    pub fn coefficients(&self, pos: GridPos) -> Result<(&[f64], &[f64])> {
        let i = self.position_index(pos)? * self.pairs();
        let p = self.pairs();
        Ok((&self.cos[i..i + p], &self.sin[i..i + p]))
    }

    pub fn rows_for(&self, positions: &[GridPos]) -> Result<RowRotations> {
        let pairs = self.pairs();
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &pos in positions {
            let (c, s) = self.coefficients(pos)?;
            cos.extend_from_slice(c);
            sin.extend_from_slice(s);
        }
        Ok(RowRotations { pairs, cos, sin })
    }
}

/// Rotates each row of `x` (N×D) by the rotation of its grid position.
pub fn apply_rope(x: &Tensor, table: &RotationTable, positions: &[GridPos]) -> Result<Tensor> {
    if x.cols() != table.d_model() {
        return Err(Error::shape("apply_rope", format!("{} features vs table width {}", x.cols(), table.d_model())));
    }
    if positions.len() != x.rows() {
        return Err(Error::shape("apply_rope", format!("{} positions for {} rows", positions.len(), x.rows())));
    }
    let rot = table.rows_for(positions)?;
    let mut out = x.clone();
    let cols = out.cols();
    rot.rotate_in_place(out.data_mut(), cols, false);
    out.ensure_finite("apply_rope")
}

/// All grid positions in row-major `(τ, i, j)` order.
pub fn grid_positions(grid: [usize; 3]) -> Vec<GridPos> {
    let mut out = Vec::with_capacity(grid.iter().product());
    for t in 0..grid[0] {
        for h in 0..grid[1] {
            for w in 0..grid[2] {
                out.push([t, h, w]);
            }
        }
    }
    out
}
