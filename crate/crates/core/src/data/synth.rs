//! Deterministic synthetic text-motion corpus.
//!
//! Each pair is drawn from one of up to eight motion archetypes (walk, wave,
//! jump, ...). Within an archetype, three binary attributes (speed, size,
//! side) change the trajectory and are spelled out in the captions, so pairs
//! stay distinguishable while same-archetype captions share vocabulary.

use std::f32::consts::TAU;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{Dataset, MotionRef, Source, Split, TextMotionPair};
use super::motion::{compute_feet_contact, compute_velocities, MotionLayout, MotionSequence, DEFAULT_CONTACT_THRESHOLD};
use crate::error::{Error, Result};

pub const MAX_ARCHETYPES: usize = 8;

const ARCHETYPES: [(&str, &str, &str); MAX_ARCHETYPES] = [
    ("walk", "walks", "is walking"),
    ("wave", "waves a hand", "is waving"),
    ("jump", "jumps up", "is jumping"),
    ("kick", "kicks a leg", "is kicking"),
    ("squat", "squats down", "is squatting"),
    ("spin", "spins around", "is spinning"),
    ("clap", "claps hands", "is clapping"),
    ("stretch", "stretches both arms", "is stretching"),
];

// Rest pose of the 21 non-root joints (x left, y up, z forward), meters.
const REST: [[f32; 3]; 21] = [
    [0.10, 0.90, 0.00],  // 0 left hip
    [-0.10, 0.90, 0.00], // 1 right hip
    [0.00, 1.05, 0.00],  // 2 spine1
    [0.10, 0.50, 0.00],  // 3 left knee
    [-0.10, 0.50, 0.00], // 4 right knee
    [0.00, 1.20, 0.00],  // 5 spine2
    [0.10, 0.10, 0.00],  // 6 left ankle
    [-0.10, 0.10, 0.00], // 7 right ankle
    [0.00, 1.30, 0.00],  // 8 spine3
    [0.10, 0.02, 0.10],  // 9 left foot
    [-0.10, 0.02, 0.10], // 10 right foot
    [0.00, 1.50, 0.00],  // 11 neck
    [0.08, 1.42, 0.00],  // 12 left collar
    [-0.08, 1.42, 0.00], // 13 right collar
    [0.00, 1.65, 0.00],  // 14 head
    [0.18, 1.42, 0.00],  // 15 left shoulder
    [-0.18, 1.42, 0.00], // 16 right shoulder
    [0.20, 1.15, 0.00],  // 17 left elbow
    [-0.20, 1.15, 0.00], // 18 right elbow
    [0.22, 0.90, 0.00],  // 19 left wrist
    [-0.22, 0.90, 0.00], // 20 right wrist
];

const LEFT_LEG: [usize; 3] = [3, 6, 9];
const RIGHT_LEG: [usize; 3] = [4, 7, 10];
const LEFT_ARM: [usize; 3] = [17, 19, 15];
const RIGHT_ARM: [usize; 3] = [18, 20, 16];
// left ankle, left foot, right ankle, right foot
const FEET: [usize; 4] = [6, 9, 7, 10];

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_pairs: usize,
    pub n_archetypes: usize,
    /// The last `test_pairs` pairs go to the test split, the rest to train.
    pub test_pairs: usize,
    pub base_frames: usize,
    pub frame_jitter: usize,
    pub fps: f32,
    pub noise: f32,
}

impl SynthConfig {
    pub fn new(seed: u64, n_pairs: usize, n_archetypes: usize) -> Self {
        Self {
            seed,
            n_pairs,
            n_archetypes,
            test_pairs: 0,
            base_frames: 24,
            frame_jitter: 12,
            fps: 20.0,
            noise: 0.01,
        }
    }

    pub fn with_test_pairs(mut self, test_pairs: usize) -> Self {
        self.test_pairs = test_pairs;
        self
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.n_pairs == 0 {
            return Err(Error::Invalid("n_pairs must be at least 1".into()));
        }
        if !(2..=MAX_ARCHETYPES).contains(&self.n_archetypes) {
            return Err(Error::Invalid(format!(
                "n_archetypes must be in 2..={MAX_ARCHETYPES}, got {}",
                self.n_archetypes
            )));
        }
        if self.test_pairs > self.n_pairs {
            return Err(Error::Invalid("test_pairs exceeds n_pairs".into()));
        }
        if self.base_frames < 2 {
            return Err(Error::Invalid("base_frames must be at least 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut ds = Dataset::new("synthetic", MotionLayout::STANDARD);
        for i in 0..self.n_pairs {
            let archetype = i % self.n_archetypes;
            let attrs = Attributes::from_index(i / self.n_archetypes);
            let motion = self.motion(&mut rng, archetype, attrs)?;
            let split = if i >= self.n_pairs - self.test_pairs {
                Split::Test
            } else {
                Split::Train
            };
            ds.pairs.push(TextMotionPair {
                id: format!("synth-{i:05}"),
                texts: captions(archetype, attrs),
                motion: MotionRef::Memory(Arc::new(motion)),
                source: Source::Synthetic,
                split,
                label: Some(ARCHETYPES[archetype].0.to_string()),
            });
        }
        Ok(ds)
    }

    fn motion(&self, rng: &mut ChaCha8Rng, archetype: usize, attrs: Attributes) -> Result<MotionSequence> {
        let frames = self.base_frames + rng.random_range(0..=self.frame_jitter);
        let freq = if attrs.fast { 1.2 } else { 0.5 } * rng.random_range(0.9..1.1);
        let amp = if attrs.big { 1.0 } else { 0.45 } * rng.random_range(0.9..1.1);
        let phase0 = rng.random_range(0.0..TAU);
        let side = if attrs.left { 1.0f32 } else { -1.0 };

        let mut pos = vec![0.0f32; frames * 21 * 3];
        let mut swing = vec![0.0f32; frames * 21];
        let mut root = vec![0.0f32; frames * 4];
        for t in 0..frames {
            let phi = TAU * freq * t as f32 / self.fps + phase0;
            let (s, c) = phi.sin_cos();
            let mut p = REST;
            let mut yaw_rate = 0.0;
            let mut vel = [0.0f32, 0.0];
            let mut height = 0.9f32;
            match archetype {
                0 => {
                    for (k, &j) in LEFT_LEG.iter().enumerate() {
                        p[j][2] += amp * 0.15 * (k + 1) as f32 * s;
                        p[RIGHT_LEG[k]][2] -= amp * 0.15 * (k + 1) as f32 * s;
                    }
                    for (k, &j) in LEFT_ARM.iter().take(2).enumerate() {
                        p[j][2] -= amp * 0.1 * (k + 1) as f32 * s;
                        p[RIGHT_ARM[k]][2] += amp * 0.1 * (k + 1) as f32 * s;
                    }
                    vel = [side * 0.2, 0.6 + freq * 0.5];
                }
                1 => {
                    let arm = if attrs.left { LEFT_ARM } else { RIGHT_ARM };
                    p[arm[0]][1] += 0.4;
                    p[arm[1]][1] += 0.8;
                    p[arm[1]][0] += side * amp * 0.25 * s;
                    p[arm[0]][0] += side * amp * 0.1 * s;
                }
                2 => {
                    let lift = amp * 0.3 * s.max(0.0);
                    for q in p.iter_mut() {
                        q[1] += lift;
                    }
                    height += lift;
                    vel = [side * 0.1, 0.0];
                }
                3 => {
                    let leg = if attrs.left { LEFT_LEG } else { RIGHT_LEG };
                    let kick = amp * s.max(0.0);
                    for (k, &j) in leg.iter().enumerate() {
                        p[j][2] += kick * 0.2 * (k + 1) as f32;
                        p[j][1] += kick * 0.1 * k as f32;
                    }
                }
                4 => {
                    let dip = amp * 0.3 * (1.0 - c) * 0.5;
                    for (j, q) in p.iter_mut().enumerate() {
                        if !LEFT_LEG.contains(&j) && !RIGHT_LEG.contains(&j) {
                            q[1] -= dip;
                        }
                    }
                    p[3][2] += dip * 0.6;
                    p[4][2] += dip * 0.6;
                    height -= dip;
                }
                5 => {
                    yaw_rate = side * amp * TAU * freq;
                    for &j in LEFT_ARM.iter().chain(RIGHT_ARM.iter()) {
                        p[j][1] += 0.2 * amp;
                        p[j][0] *= 1.0 + 0.5 * amp;
                    }
                }
                6 => {
                    let close = amp * (1.0 + s) * 0.5;
                    for &j in &[19usize, 20] {
                        p[j][0] *= 1.0 - close;
                        p[j][1] += 0.3;
                        p[j][2] += 0.3;
                    }
                    for &j in &[17usize, 18] {
                        p[j][2] += 0.15;
                    }
                }
                _ => {
                    let up = amp * 0.6 * (1.0 - c) * 0.5;
                    for &j in LEFT_ARM.iter().chain(RIGHT_ARM.iter()) {
                        p[j][1] += up * if j == 15 || j == 16 { 0.2 } else { 1.0 };
                    }
                    vel = [side * 0.05, 0.0];
                }
            }
            // Lean towards the attribute side so symmetric archetypes still
            // encode it in the pose.
            for &j in &[2usize, 5, 8, 11, 14] {
                p[j][0] += side * 0.04 * amp * (j as f32 / 14.0);
            }
            for j in 0..21 {
                pos[(t * 21 + j) * 3..(t * 21 + j) * 3 + 3].copy_from_slice(&p[j]);
                swing[t * 21 + j] = (p[j][2] - REST[j][2]) * 1.5 + (p[j][1] - REST[j][1]) * 0.5;
            }
            root[t * 4..t * 4 + 4].copy_from_slice(&[yaw_rate, vel[0], vel[1], height]);
        }

        let vel = compute_velocities(&pos, frames, self.fps)?;
        let mut foot_speed = vec![0.0f32; frames * 4];
        for t in 0..frames {
            for (k, &j) in FEET.iter().enumerate() {
                let v = &vel[(t * 21 + j) * 3..(t * 21 + j) * 3 + 3];
                let planar = [v[0] + root[t * 4 + 1], v[1], v[2] + root[t * 4 + 2]];
                foot_speed[t * 4 + k] = planar.iter().map(|x| x * x).sum::<f32>().sqrt();
            }
        }
        let feet = compute_feet_contact(&foot_speed, DEFAULT_CONTACT_THRESHOLD);

        let noise = Normal::new(0.0f32, self.noise).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut body = Vec::with_capacity(frames * 252);
        for t in 0..frames {
            let yaw = if archetype == 5 { root[t * 4] * t as f32 / self.fps } else { 0.0 };
            // Channels are centered on the rest pose and identity rotation so
            // the per-pair signal is not swamped by a shared offset.
            for j in 0..21 {
                let b = (t * 21 + j) * 3;
                body.extend((0..3).map(|d| pos[b + d] - REST[j][d]));
                let r = rot6d(swing[t * 21 + j], yaw);
                body.extend(r.iter().zip(IDENTITY_6D).map(|(a, i)| a - i));
                body.extend(vel[b..b + 3].iter().map(|v| v * 0.5));
            }
        }
        for v in body.iter_mut().chain(root.iter_mut()) {
            *v += noise.sample(rng);
        }
        MotionSequence::new(MotionLayout::STANDARD, self.fps, body, root, feet)
    }
}

/// Generates a dataset with default frame settings and no test split.
pub fn synth_dataset(seed: u64, n_pairs: usize, n_archetypes: usize) -> Result<Dataset> {
    SynthConfig::new(seed, n_pairs, n_archetypes).generate()
}

#[derive(Clone, Copy, Debug)]
struct Attributes {
    fast: bool,
    big: bool,
    left: bool,
}

impl Attributes {
    fn from_index(i: usize) -> Self {
        let combo = i % 8;
        Attributes {
            fast: combo & 1 != 0,
            big: combo & 2 != 0,
            left: combo & 4 != 0,
        }
    }
}

const IDENTITY_6D: [f32; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// First two columns of `R_y(yaw) * R_x(pitch)`.
fn rot6d(pitch: f32, yaw: f32) -> [f32; 6] {
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    [cy, 0.0, -sy, sy * sp, cp, cy * sp]
}

fn captions(archetype: usize, a: Attributes) -> Vec<String> {
    let (_, verb, progressive) = ARCHETYPES[archetype];
    let side = if a.left { "left" } else { "right" };
    let (speed1, speed2) = if a.fast { ("quickly", "fast") } else { ("slowly", "slow") };
    let (size1, size2) = if a.big { ("large", "wildly") } else { ("small", "gently") };
    vec![
        format!("a person {verb} {speed1} with {size1} movements to the {side}"),
        format!("someone {progressive} {size2} and {speed2} toward the {side}"),
    ]
}

pub fn archetype_name(archetype: usize) -> &'static str {
    ARCHETYPES[archetype].0
}
