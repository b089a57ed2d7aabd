//! Binary motion tensor files.
//!
//! ```text
//! "MOTF" | version u16 | fps f32 | frames u32 | group count u8
//! per group: tag u8 (0 body, 1 root, 2 feet) | token count u16 | token dim u16
//! group payloads as f32, time-major, row-major, in header order
//! ```
//! All integers and floats are little-endian. Groups are always written in
//! tag order, which is also the only order the reader accepts.

use std::path::Path;

use super::motion::{MotionLayout, MotionSequence};
use crate::bytes::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const MOTION_MAGIC: &[u8; 4] = b"MOTF";
pub const MOTION_VERSION: u16 = 1;

const TAG_BODY: u8 = 0;
const TAG_ROOT: u8 = 1;
const TAG_FEET: u8 = 2;

pub fn encode_motion(m: &MotionSequence) -> Result<Vec<u8>> {
    let layout = m.layout();
    let frames = u32::try_from(m.frames())
        .map_err(|_| Error::Invalid("too many frames for the motion format".into()))?;
    let dim = |v: usize| {
        u16::try_from(v).map_err(|_| Error::Invalid(format!("token dimension {v} exceeds u16")))
    };
    let mut w = ByteWriter::new();
    w.bytes(MOTION_MAGIC);
    w.u16(MOTION_VERSION);
    w.f32(m.fps());
    w.u32(frames);
    w.u8(3);
    w.u8(TAG_BODY);
    w.u16(dim(layout.body_joints)?);
    w.u16(dim(layout.joint_dim)?);
    w.u8(TAG_ROOT);
    w.u16(1);
    w.u16(dim(layout.root_dim)?);
    w.u8(TAG_FEET);
    w.u16(1);
    w.u16(dim(layout.feet_dim)?);
    w.f32s(m.body());
    w.f32s(m.root());
    w.f32s(m.feet());
    Ok(w.into_inner())
}

pub fn decode_motion(bytes: &[u8], path: &Path) -> Result<MotionSequence> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(MOTION_MAGIC)?;
    let version = r.u16()?;
    if version != MOTION_VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let fps = r.f32()?;
    let frames = r.u32()? as usize;
    let groups = r.u8()?;
    if groups != 3 {
        return Err(r.err(format!("expected 3 groups, found {groups}")));
    }
    let mut shapes = [(0usize, 0usize); 3];
    for (expected, slot) in [TAG_BODY, TAG_ROOT, TAG_FEET].into_iter().zip(shapes.iter_mut()) {
        let tag = r.u8()?;
        if tag != expected {
            return Err(r.err(format!("group tag {tag} out of order, expected {expected}")));
        }
        *slot = (r.u16()? as usize, r.u16()? as usize);
    }
    if shapes[1].0 != 1 || shapes[2].0 != 1 {
        return Err(r.err("root and feet groups must hold exactly one token"));
    }
    let layout = MotionLayout {
        body_joints: shapes[0].0,
        joint_dim: shapes[0].1,
        root_dim: shapes[1].1,
        feet_dim: shapes[2].1,
    };
    let body = r.f32s(frames * layout.body_len())?;
    let root = r.f32s(frames * layout.root_dim)?;
    let feet = r.f32s(frames * layout.feet_dim)?;
    r.finish()?;
    MotionSequence::new(layout, fps, body, root, feet).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_motion(path: &Path, m: &MotionSequence) -> Result<()> {
    write_file(path, &encode_motion(m)?)
}

pub fn read_motion(path: &Path) -> Result<MotionSequence> {
    decode_motion(&read_file(path)?, path)
}

const HEADER_LEN: usize = 30;

/// Reads only the header of a motion file and returns its layout and frame
/// count, checking the file size against the declared payload.
pub fn peek_motion_header(path: &Path) -> Result<(MotionLayout, usize)> {
    use std::io::Read;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    let mut head = Vec::with_capacity(HEADER_LEN);
    file.take(HEADER_LEN as u64)
        .read_to_end(&mut head)
        .map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&head, path);
    r.magic(MOTION_MAGIC)?;
    let version = r.u16()?;
    if version != MOTION_VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let _fps = r.f32()?;
    let frames = r.u32()? as usize;
    if r.u8()? != 3 {
        return Err(r.err("expected 3 groups"));
    }
    let mut shapes = [(0usize, 0usize); 3];
    for (expected, slot) in [TAG_BODY, TAG_ROOT, TAG_FEET].into_iter().zip(shapes.iter_mut()) {
        if r.u8()? != expected {
            return Err(r.err("group tags out of order"));
        }
        *slot = (r.u16()? as usize, r.u16()? as usize);
    }
    let layout = MotionLayout {
        body_joints: shapes[0].0,
        joint_dim: shapes[0].1,
        root_dim: shapes[1].1,
        feet_dim: shapes[2].1,
    };
    let expected = HEADER_LEN + 4 * frames * layout.frame_len();
    if file_len != expected || shapes[1].0 != 1 || shapes[2].0 != 1 {
        return Err(Error::format(
            path,
            format!("payload size {file_len} does not match header (expected {expected})"),
        ));
    }
    Ok((layout, frames))
}
