//! Token masking: i.i.d. random masking, multiblock masking and latent-loss
//! patch subselection.
//!
//! Counting rules: the number of kept tokens is `max(1, round((1-ratio)·n))`;
//! the number of subsampled loss tokens is `ceil(fraction·n)` (with a 1e-9
//! slack so that exact products such as `0.1·30` are not rounded up).

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    RandomIid,
    Multiblock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiblockSpec {
    pub num_blocks: usize,
    pub block_area_range: (f64, f64),
    pub aspect_ratio_range: (f64, f64),
}

impl Default for MultiblockSpec {
    fn default() -> Self {
        Self { num_blocks: 8, block_area_range: (0.3, 0.3), aspect_ratio_range: (0.75, 1.50) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mode: MaskMode,
    pub mask_ratio: f64,
    #[serde(default)]
    pub multiblock: MultiblockSpec,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { mode: MaskMode::RandomIid, mask_ratio: 0.95, multiblock: MultiblockSpec::default() }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask.mask_ratio", "must lie in [0, 1)"));
        }
        let mb = &self.multiblock;
        let (a0, a1) = mb.block_area_range;
        let (r0, r1) = mb.aspect_ratio_range;
        if !(0.0 < a0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::config("mask.multiblock.block_area_range", "need 0 < lo <= hi <= 1"));
        }
        if !(0.0 < r0 && r0 <= r1) {
            return Err(Error::config("mask.multiblock.aspect_ratio_range", "need 0 < lo <= hi"));
        }
        Ok(())
    }
}

pub fn keep_count(n_tokens: usize, ratio: f64) -> usize {
    (((1.0 - ratio) * n_tokens as f64).round() as usize).clamp(1, n_tokens)
}

/// Sorted indices of the tokens left visible.
pub fn random_mask(n_tokens: usize, ratio: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n_tokens == 0 {
        return Err(Error::Contract("random_mask needs at least one token".into()));
    }
    let keep = keep_count(n_tokens, ratio);
    if keep == n_tokens {
        return Ok((0..n_tokens).collect());
    }
    let mut idx = sample(rng, n_tokens, keep).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn subsample_count(n_tokens: usize, fraction: f64) -> usize {
    ((fraction * n_tokens as f64 - 1e-9).ceil() as usize).clamp(1, n_tokens)
}

/// Sorted token indices on which the latent loss is computed.
pub fn subsample_latent_patches(n_tokens: usize, fraction: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Contract(format!("loss patch fraction {fraction} outside (0, 1]")));
    }
    let k = subsample_count(n_tokens, fraction);
    if k == n_tokens {
        return Ok((0..n_tokens).collect());
    }
    let mut idx = sample(rng, n_tokens, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Block height/width in patches for an area fraction and aspect ratio
/// (`height / width`). When one side overflows the grid it is clamped and
/// the other side is recomputed to preserve the requested area.
fn block_shape(h_grid: usize, w_grid: usize, area: f64, aspect: f64) -> (usize, usize) {
    let target = area * (h_grid * w_grid) as f64;
    let mut h = (target * aspect).sqrt().round().max(1.0) as usize;
    let mut w = (target / aspect).sqrt().round().max(1.0) as usize;
    if h > h_grid {
        h = h_grid;
        w = ((target / h as f64).round() as usize).clamp(1, w_grid);
    }
    if w > w_grid {
        w = w_grid;
        h = ((target / w as f64).round() as usize).clamp(1, h_grid);
    }
    (h, w)
}

/// Per-token mask over the `(T', H', W')` grid in row-major order; `true`
/// means masked. Each block is a spatial rectangle repeated over all time
/// steps.
pub fn multiblock_mask(grid: [usize; 3], spec: &MultiblockSpec, rng: &mut impl Rng) -> Result<Vec<bool>> {
    let [t, hg, wg] = grid;
    if hg < 2 || wg < 2 || t == 0 {
        return Err(Error::Contract(format!("multiblock masking needs a spatial grid of at least 2x2, got {grid:?}")));
    }
    let mut spatial = vec![false; hg * wg];
    for _ in 0..spec.num_blocks {
        let (a0, a1) = spec.block_area_range;
        let (r0, r1) = spec.aspect_ratio_range;
        let area = if a1 > a0 { rng.random_range(a0..=a1) } else { a0 };
        let aspect = if r1 > r0 { rng.random_range(r0..=r1) } else { r0 };
        let (bh, bw) = block_shape(hg, wg, area, aspect);
        let top = rng.random_range(0..=hg - bh);
        let left = rng.random_range(0..=wg - bw);
        for i in top..top + bh {
            for j in left..left + bw {
                spatial[i * wg + j] = true;
            }
        }
    }
    Ok((0..t).flat_map(|_| spatial.iter().copied()).collect())
}
