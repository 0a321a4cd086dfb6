//! Splitting clips into `t×h×w` patch tokens and back.
//!
//! Tokens are numbered in row-major `(τ, i, j)` grid order; each token is
//! the row-major flattening of its `(dt, dh, dw, channel)` block.

use crate::error::{Error, Result};
use crate::rope::{grid_positions, GridPos};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    RawPatches,
    Embedded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub tokens: Tensor,
    pub positions: Vec<GridPos>,
    pub kind: TokenKind,
}

/// Patch grid `(T', H', W')` for a `(T, H, W)` input.
pub fn patch_grid(input: [usize; 3], patch: [usize; 3]) -> Result<[usize; 3]> {
    if patch.iter().any(|&p| p == 0) || input.iter().zip(&patch).any(|(d, p)| d % p != 0 || *d == 0) {
        return Err(Error::config(
            "patch_size",
            format!("input {input:?} is not divisible into patches {patch:?}"),
        ));
    }
    Ok([input[0] / patch[0], input[1] / patch[1], input[2] / patch[2]])
}

/// Patchifies a `T×H×W×C` array (or `T×H×W`, treated as `C = 1`).
pub fn patchify_array(data: &Tensor, patch: [usize; 3]) -> Result<Tensor> {
    let s = data.shape();
    let (dims, ch) = match s.len() {
        3 => ([s[0], s[1], s[2]], 1),
        4 => ([s[0], s[1], s[2]], s[3]),
        _ => return Err(Error::shape("patchify", format!("expected T×H×W[×C], got {s:?}"))),
    };
    let grid = patch_grid(dims, patch)?;
    let n = grid.iter().product::<usize>();
    let p_len = patch.iter().product::<usize>() * ch;
    let src = data.data();
    let mut out = Vec::with_capacity(n * p_len);
    for gt in 0..grid[0] {
        for gh in 0..grid[1] {
            for gw in 0..grid[2] {
                for dt in 0..patch[0] {
                    for dh in 0..patch[1] {
                        let t = gt * patch[0] + dt;
                        let h = gh * patch[1] + dh;
                        let w0 = gw * patch[2];
                        let base = ((t * dims[1] + h) * dims[2] + w0) * ch;
                        out.extend_from_slice(&src[base..base + patch[2] * ch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, p_len], out)
}

/// Inverse of [`patchify_array`].
pub fn unpatchify_array(tokens: &Tensor, dims: [usize; 3], channels: usize, patch: [usize; 3]) -> Result<Tensor> {
    let grid = patch_grid(dims, patch)?;
    let n = grid.iter().product::<usize>();
    let p_len = patch.iter().product::<usize>() * channels;
    if tokens.rows() != n || tokens.cols() != p_len {
        return Err(Error::shape("unpatchify", format!("{:?} for {n} patches of {p_len}", tokens.shape())));
    }
    let mut out = vec![0.0; dims.iter().product::<usize>() * channels];
    let src = tokens.data();
    let mut k = 0;
    for gt in 0..grid[0] {
        for gh in 0..grid[1] {
            for gw in 0..grid[2] {
                for dt in 0..patch[0] {
                    for dh in 0..patch[1] {
                        let t = gt * patch[0] + dt;
                        let h = gh * patch[1] + dh;
                        let base = ((t * dims[1] + h) * dims[2] + gw * patch[2]) * channels;
                        let len = patch[2] * channels;
                        out[base..base + len].copy_from_slice(&src[k..k + len]);
                        k += len;
                    }
                }
            }
        }
    }
    let shape = if channels == 1 { dims.to_vec() } else { vec![dims[0], dims[1], dims[2], channels] };
    Tensor::new(shape, out)
}

/// Raw patch tokens of an RGB clip (`T×H×W×3`).
pub fn patchify(frames: &Tensor, patch: [usize; 3]) -> Result<TokenBatch> {
    let s = frames.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::shape("patchify", format!("expected T×H×W×3, got {s:?}")));
    }
    let grid = patch_grid([s[0], s[1], s[2]], patch)?;
    Ok(TokenBatch {
        tokens: patchify_array(frames, patch)?,
        positions: grid_positions(grid),
        kind: TokenKind::RawPatches,
    })
}

pub fn unpatchify(tokens: &Tensor, dims: [usize; 3], patch: [usize; 3]) -> Result<Tensor> {
    unpatchify_array(tokens, dims, 3, patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_patch_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = Tensor::uniform(&[2, 16, 16, 3], 1.0, &mut rng);
        let tb = patchify(&v, [2, 16, 16]).unwrap();
        assert_eq!(tb.tokens.shape(), &[1, 1536]);
    }

    #[test]
    fn full_scale_token_count() {
        assert_eq!(patch_grid([16, 224, 224], [2, 16, 16]).unwrap(), [8, 14, 14]);
        assert_eq!(patch_grid([16, 224, 224], [2, 16, 16]).unwrap().iter().product::<usize>(), 1568);
    }

    #[test]
    fn indivisible_rejected() {
        assert!(patch_grid([3, 16, 16], [2, 16, 16]).is_err());
    }

    #[test]
    fn token_layout() {
        // value encodes (t, h, w, c) so we can check which pixels land where
        let dims = [4, 4, 4];
        let data: Vec<f64> = (0..4 * 4 * 4 * 3).map(|v| v as f64).collect();
        let v = Tensor::new(vec![4, 4, 4, 3], data).unwrap();
        let tb = patchify(&v, [2, 2, 2]).unwrap();
        assert_eq!(tb.positions[1], [0, 0, 1]);
        // token 1 = grid (0,0,1): first pixel is (t=0,h=0,w=2)
        assert_eq!(tb.tokens.row(1)[0], ((0 * 4 + 0) * 4 + 2) as f64 * 3.0);
        let back = unpatchify(&tb.tokens, dims, [2, 2, 2]).unwrap();
        assert_eq!(back, v);
    }
}
