//! Per-frame skeleton features and the preprocessing steps applied to them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token widths of a motion: `body_joints` tokens of `joint_dim` features,
/// one root token and one feet token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MotionLayout {
    pub body_joints: usize,
    pub joint_dim: usize,
    pub root_dim: usize,
    pub feet_dim: usize,
}

impl MotionLayout {
    /// 21 non-root joints with 3 rifke + 6 rot6d + 3 velocity features,
    /// a 4-d root token (y rotation velocity, planar velocity, height) and
    /// four binary foot contacts.
    pub const STANDARD: MotionLayout = MotionLayout {
        body_joints: 21,
        joint_dim: 12,
        root_dim: 4,
        feet_dim: 4,
    };

    pub fn body_len(&self) -> usize {
        self.body_joints * self.joint_dim
    }

    /// Scalars per frame across all three groups.
    pub fn frame_len(&self) -> usize {
        self.body_len() + self.root_dim + self.feet_dim
    }
}

impl Default for MotionLayout {
    fn default() -> Self {
        Self::STANDARD
    }
}

/// A variable-length skeleton sequence, stored time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    layout: MotionLayout,
    fps: f32,
    frames: usize,
    body: Vec<f32>,
    root: Vec<f32>,
    feet: Vec<f32>,
}

impl MotionSequence {
    /// Builds a sequence, checking shapes, finiteness and binary contacts.
    pub fn new(
        layout: MotionLayout,
        fps: f32,
        body: Vec<f32>,
        root: Vec<f32>,
        feet: Vec<f32>,
    ) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Invalid(format!("fps must be positive, got {fps}")));
        }
        let body_len = layout.body_len();
        if body_len == 0 || !body.len().is_multiple_of(body_len) {
            return Err(Error::Layout(format!(
                "body payload of {} values is not a multiple of {}x{}",
                body.len(),
                layout.body_joints,
                layout.joint_dim
            )));
        }
        let frames = body.len() / body_len;
        if frames == 0 {
            return Err(Error::Invalid("motion has no frames".into()));
        }
        if root.len() != frames * layout.root_dim {
            return Err(Error::Layout(format!(
                "root payload has {} values, expected {}",
                root.len(),
                frames * layout.root_dim
            )));
        }
        if feet.len() != frames * layout.feet_dim {
            return Err(Error::Layout(format!(
                "feet payload has {} values, expected {}",
                feet.len(),
                frames * layout.feet_dim
            )));
        }
        if let Some(v) = body.iter().chain(root.iter()).find(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite motion feature {v}")));
        }
        if let Some(v) = feet.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid(format!("foot contact {v} is not binary")));
        }
        Ok(Self {
            layout,
            fps,
            frames,
            body,
            root,
            feet,
        })
    }

    pub fn layout(&self) -> MotionLayout {
        self.layout
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `[T, body_joints, joint_dim]` row-major.
    pub fn body(&self) -> &[f32] {
        &self.body
    }

    /// `[T, root_dim]` row-major.
    pub fn root(&self) -> &[f32] {
        &self.root
    }

    /// `[T, feet_dim]` row-major.
    pub fn feet(&self) -> &[f32] {
        &self.feet
    }

    pub fn body_frame(&self, t: usize) -> &[f32] {
        let n = self.layout.body_len();
        &self.body[t * n..(t + 1) * n]
    }

    pub fn root_frame(&self, t: usize) -> &[f32] {
        let n = self.layout.root_dim;
        &self.root[t * n..(t + 1) * n]
    }

    pub fn feet_frame(&self, t: usize) -> &[f32] {
        let n = self.layout.feet_dim;
        &self.feet[t * n..(t + 1) * n]
    }

    /// Keeps at most `max_frames` frames, sampled at uniformly spaced indices
    /// `round(i * (T - 1) / (max_frames - 1))`. First and last frames are
    /// always kept; sequences already within the cap are returned unchanged.
    ///
    /// # Panics
    /// If `max_frames < 2`.
    pub fn downsample(&self, max_frames: usize) -> MotionSequence {
        assert!(max_frames >= 2, "max_frames must be at least 2");
        if self.frames <= max_frames {
            return self.clone();
        }
        let indices = downsample_indices(self.frames, max_frames);
        let pick = |src: &[f32], width: usize| -> Vec<f32> {
            indices
                .iter()
                .flat_map(|&t| src[t * width..(t + 1) * width].iter().copied())
                .collect()
        };
        MotionSequence {
            layout: self.layout,
            fps: self.fps,
            frames: max_frames,
            body: pick(&self.body, self.layout.body_len()),
            root: pick(&self.root, self.layout.root_dim),
            feet: pick(&self.feet, self.layout.feet_dim),
        }
    }
}

/// Frame indices kept when reducing `frames` to `max_frames`.
pub fn downsample_indices(frames: usize, max_frames: usize) -> Vec<usize> {
    let span = frames - 1;
    let steps = max_frames - 1;
    // round-half-up of i * span / steps in integer arithmetic
    (0..max_frames)
        .map(|i| (2 * i * span + steps) / (2 * steps))
        .collect()
}

/// Finite-difference joint velocities: `v[t] = (p[t] - p[t-1]) * fps` for
/// `t >= 1`, with `v[0]` replicated from `v[1]` (zero for a single frame).
///
/// `positions` is `[frames, joints, 3]` row-major.
pub fn compute_velocities(positions: &[f32], frames: usize, fps: f32) -> Result<Vec<f32>> {
    if frames == 0 || !positions.len().is_multiple_of(frames) || !(positions.len() / frames).is_multiple_of(3) {
        return Err(Error::Invalid(format!(
            "{} position values do not form {frames} frames of 3-d joints",
            positions.len()
        )));
    }
    if let Some(v) = positions.iter().find(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite position {v}")));
    }
    let width = positions.len() / frames;
    let mut out = vec![0.0f32; positions.len()];
    for t in 1..frames {
        for k in 0..width {
            out[t * width + k] = (positions[t * width + k] - positions[(t - 1) * width + k]) * fps;
        }
    }
    if frames > 1 {
        let (first, rest) = out.split_at_mut(width);
        first.copy_from_slice(&rest[..width]);
    }
    Ok(out)
}

/// Default contact threshold on foot speed, in the units of the magnitudes
/// passed to [`compute_feet_contact`].
pub const DEFAULT_CONTACT_THRESHOLD: f32 = 0.05;

/// Binary foot contacts: 1 where the speed is strictly below `threshold`.
///
/// # Panics
/// If `threshold` is not positive.
pub fn compute_feet_contact(magnitudes: &[f32], threshold: f32) -> Vec<f32> {
    assert!(threshold > 0.0, "contact threshold must be positive");
    magnitudes
        .iter()
        .map(|&m| if m < threshold { 1.0 } else { 0.0 })
        .collect()
}
