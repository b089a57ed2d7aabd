//! Motion data: per-frame skeleton features, the binary tensor format, the
//! manifest, joint-dataset unification and a synthetic generator.

mod dataset;
mod format;
mod motion;
mod synth;

pub use dataset::{unify, Dataset, JointDataset, MotionRef, Source, Split, TextMotionPair};
pub use format::{
    decode_motion, encode_motion, peek_motion_header, read_motion, write_motion, MOTION_MAGIC,
    MOTION_VERSION,
};
pub use motion::{
    compute_feet_contact, compute_velocities, downsample_indices, MotionLayout, MotionSequence,
    DEFAULT_CONTACT_THRESHOLD,
};
pub use synth::{archetype_name, synth_dataset, SynthConfig, MAX_ARCHETYPES};
