//! Procedural video clips used as training and evaluation data.
//!
//! Two generators are provided. `MovingShapes` renders one to three
//! antialiased discs/squares that all translate with one constant velocity;
//! the clip label is the octant of that velocity. `GradientField` renders a
//! smooth scene around moving discs and ships a per-pixel depth analog: the
//! distance to the nearest disc. Coordinates are `(x, y)` = (column, row),
//! with `y` growing downwards. Shapes wrap around the frame edges.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MOTION_CLASSES: usize = 8;

/// Depth values outside this open interval are treated as missing.
pub const DEPTH_VALID_RANGE: (f64, f64) = (0.001, 10.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    MovingShapes,
    /// The zero-velocity arm of `MovingShapes`.
    StaticShapes,
    GradientField,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl VideoDims {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionLabel {
    Direction(u8),
    Static,
}

impl MotionLabel {
    pub fn class(self) -> Option<usize> {
        match self {
            MotionLabel::Direction(c) => Some(c as usize),
            MotionLabel::Static => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: SynthKind,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// `T×H×W×3`, values in `[0, 1]`.
    pub frames: Tensor,
    pub label: Option<MotionLabel>,
    /// `T×H×W` depth analog; zero marks background.
    pub dense_target: Option<Tensor>,
    /// Shared shape velocity in pixels per frame.
    pub velocity: Option<[f64; 2]>,
    pub provenance: Provenance,
}

impl VideoClip {
    pub fn dims(&self) -> VideoDims {
        let s = self.frames.shape();
        VideoDims::new(s[0], s[1], s[2])
    }
}

/// Octant of a velocity vector: class `c` covers angles `[c·π/4, (c+1)·π/4)`.
pub fn velocity_octant(v: [f64; 2]) -> u8 {
    let angle = v[1].atan2(v[0]).rem_euclid(2.0 * PI);
    ((angle / (PI / 4.0)).floor() as u8).min(7)
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Disc,
    Square,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: ShapeKind,
    center: [f64; 2],
    radius: f64,
    color: [f64; 3],
}

/// Signed offset from `c` to `p` on a ring of length `len`, in `[-len/2, len/2)`.
fn wrap_delta(p: f64, c: f64, len: f64) -> f64 {
    (p - c + len / 2.0).rem_euclid(len) - len / 2.0
}

fn coverage(shape: &Shape, x: f64, y: f64, w: f64, h: f64) -> f64 {
    let dx = wrap_delta(x, shape.center[0], w);
    let dy = wrap_delta(y, shape.center[1], h);
    let sdf = match shape.kind {
        ShapeKind::Disc => (dx * dx + dy * dy).sqrt() - shape.radius,
        ShapeKind::Square => dx.abs().max(dy.abs()) - shape.radius,
    };
    (0.5 - sdf).clamp(0.0, 1.0)
}

pub fn synth_video(kind: SynthKind, seed: u64, dims: VideoDims) -> Result<VideoClip> {
    if dims.frames == 0 || dims.height == 0 || dims.width == 0 {
        return Err(Error::config("dims", "video dims must be positive"));
    }
    match kind {
        SynthKind::MovingShapes | SynthKind::StaticShapes => moving_shapes(kind, seed, dims),
        SynthKind::GradientField => gradient_field(seed, dims),
    }
}

fn moving_shapes(kind: SynthKind, seed: u64, dims: VideoDims) -> Result<VideoClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (dims.width as f64, dims.height as f64);
    let side = w.min(h);
    let n_shapes = rng.random_range(1..=3);
    let class: u8 = rng.random_range(0..MOTION_CLASSES as u8);
    // keep away from octant boundaries so the label is unambiguous
    let angle = (class as f64 + rng.random_range(0.15..0.85)) * PI / 4.0;
    let speed = rng.random_range(0.06..0.12) * side;
    let velocity = match kind {
        SynthKind::StaticShapes => [0.0, 0.0],
        _ => [speed * angle.cos(), speed * angle.sin()],
    };
    let background = [rng.random_range(0.0..0.2), rng.random_range(0.0..0.2), rng.random_range(0.0..0.2)];
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| Shape {
            kind: if rng.random_bool(0.5) { ShapeKind::Disc } else { ShapeKind::Square },
            center: [rng.random_range(0.0..w), rng.random_range(0.0..h)],
            radius: rng.random_range(0.12..0.22) * side,
            color: [rng.random_range(0.3..1.0), rng.random_range(0.3..1.0), rng.random_range(0.3..1.0)],
        })
        .collect();

    let mut data = Vec::with_capacity(dims.frames * dims.height * dims.width * 3);
    for f in 0..dims.frames {
        let moved: Vec<Shape> = shapes
            .iter()
            .map(|s| Shape {
                center: [s.center[0] + velocity[0] * f as f64, s.center[1] + velocity[1] * f as f64],
                ..*s
            })
            .collect();
        for y in 0..dims.height {
            for x in 0..dims.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut rgb = background;
                for s in &moved {
                    let a = coverage(s, px, py, w, h);
                    for c in 0..3 {
                        rgb[c] = rgb[c] * (1.0 - a) + s.color[c] * a;
                    }
                }
                data.extend_from_slice(&rgb);
            }
        }
    }
    let frames = Tensor::new(vec![dims.frames, dims.height, dims.width, 3], data)?;
    let label = match kind {
        SynthKind::StaticShapes => MotionLabel::Static,
        _ => MotionLabel::Direction(velocity_octant(velocity)),
    };
    Ok(VideoClip {
        frames,
        label: Some(label),
        dense_target: None,
        velocity: Some(velocity),
        provenance: Provenance { generator: kind, seed },
    })
}

fn gradient_field(seed: u64, dims: VideoDims) -> Result<VideoClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (dims.width as f64, dims.height as f64);
    let side = w.max(h);
    let n = rng.random_range(1..=3);
    let discs: Vec<([f64; 2], [f64; 2], f64)> = (0..n)
        .map(|_| {
            let c = [rng.random_range(0.0..w), rng.random_range(0.0..h)];
            let a = rng.random_range(0.0..2.0 * PI);
            let s = rng.random_range(0.0..0.08) * side;
            let r = rng.random_range(0.08..0.16) * side;
            (c, [s * a.cos(), s * a.sin()], r)
        })
        .collect();
    let phase = rng.random_range(0.0..1.0);
    let cutoff = 0.35 * side;

    let mut frames = Vec::with_capacity(dims.frames * dims.height * dims.width * 3);
    let mut depth = Vec::with_capacity(dims.frames * dims.height * dims.width);
    for f in 0..dims.frames {
        let tf = f as f64;
        for y in 0..dims.height {
            for x in 0..dims.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let dist = discs
                    .iter()
                    .map(|(c, v, r)| {
                        let dx = wrap_delta(px, c[0] + v[0] * tf, w);
                        let dy = wrap_delta(py, c[1] + v[1] * tf, h);
                        ((dx * dx + dy * dy).sqrt() - r).max(0.0)
                    })
                    .fold(f64::INFINITY, f64::min);
                let d = if dist > cutoff { 0.0 } else { 0.5 + 4.0 * dist / side };
                depth.push(d);
                let shade = 1.0 / (1.0 + dist / 2.0);
                let wave = 0.5 + 0.5 * (2.0 * PI * (px / w + py / h + phase + 0.05 * tf)).sin();
                frames.extend_from_slice(&[shade, 0.2 + 0.6 * wave * (1.0 - shade), if d == 0.0 { 0.0 } else { 0.5 }]);
            }
        }
    }
    Ok(VideoClip {
        frames: Tensor::new(vec![dims.frames, dims.height, dims.width, 3], frames)?,
        label: None,
        dense_target: Some(Tensor::new(vec![dims.frames, dims.height, dims.width], depth)?),
        velocity: None,
        provenance: Provenance { generator: SynthKind::GradientField, seed },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: VideoDims = VideoDims { frames: 4, height: 16, width: 16 };

    #[test]
    fn deterministic_in_seed() {
        for kind in [SynthKind::MovingShapes, SynthKind::GradientField] {
            assert_eq!(synth_video(kind, 17, DIMS).unwrap(), synth_video(kind, 17, DIMS).unwrap());
        }
        assert_ne!(
            synth_video(SynthKind::MovingShapes, 1, DIMS).unwrap().frames,
            synth_video(SynthKind::MovingShapes, 2, DIMS).unwrap().frames
        );
    }

    #[test]
    fn static_arm_is_constant_over_time() {
        let clip = synth_video(SynthKind::StaticShapes, 5, DIMS).unwrap();
        assert_eq!(clip.label, Some(MotionLabel::Static));
        let per_frame = 16 * 16 * 3;
        let d = clip.frames.data();
        for f in 1..4 {
            assert_eq!(&d[..per_frame], &d[f * per_frame..(f + 1) * per_frame]);
        }
    }

    #[test]
    fn values_in_unit_range() {
        for kind in [SynthKind::MovingShapes, SynthKind::GradientField] {
            for seed in 0..20 {
                let clip = synth_video(kind, seed, DIMS).unwrap();
                assert!(clip.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn depth_has_valid_and_background_pixels() {
        let clip = synth_video(SynthKind::GradientField, 3, VideoDims::new(2, 32, 32)).unwrap();
        let d = clip.dense_target.unwrap();
        assert!(d.data().iter().any(|&v| v > DEPTH_VALID_RANGE.0));
        assert!(d.data().iter().all(|&v| v == 0.0 || (0.5..10.0).contains(&v)));
    }

    #[test]
    fn octant_boundaries() {
        assert_eq!(velocity_octant([1.0, 0.0]), 0);
        assert_eq!(velocity_octant([0.0, 1.0]), 2);
        assert_eq!(velocity_octant([-1.0, -1e-9]), 4);
        assert_eq!(velocity_octant([1.0, -1e-9]), 7);
    }
}
