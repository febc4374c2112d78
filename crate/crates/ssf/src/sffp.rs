//! SFFP v1: bit-exact frame-pair persistence.
//!
//! Layout (all little-endian): magic `"SFFP"`, `u32` version, `u32`
//! section count, then sections of `8`-byte space-padded ASCII tag,
//! `u64` payload length, payload. Required sections: `PT0`/`PT1`
//! (f32 N x 3 positions), `GM0`/`GM1` (u8 ground masks), `EGO`
//! (f64 4x4 row-major), `DT` (f64 seconds). Optional: `GF0`
//! (f64 N x 3 ground-truth flow), `CL0` (u8 class ids).
//!
//! Positions are stored single-precision; writing quantizes to f32, so
//! round-trips are bit-exact exactly when the in-memory positions are
//! f32-representable (the synthetic generator guarantees this). Flow and
//! the ego transform stay double so exact ground truth survives a
//! round-trip.

use std::fs;
use std::path::Path;

use ssf_core::{FramePair, PointCloud, RigidTransform};

use crate::error::{IoError, Result};

pub const MAGIC: &str = "SFFP";
pub const VERSION: u32 = 1;

fn tag8(tag: &str) -> [u8; 8] {
    let mut out = [b' '; 8];
    out[..tag.len()].copy_from_slice(tag.as_bytes());
    out
}

struct SectionWriter {
    buf: Vec<u8>,
    count: u32,
}

impl SectionWriter {
    fn new() -> Self {
        SectionWriter { buf: Vec::new(), count: 0 }
    }

    fn section(&mut self, tag: &str, payload: &[u8]) {
        self.buf.extend_from_slice(&tag8(tag));
        self.buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(payload);
        self.count += 1;
    }
}

fn points_f32(points: &[[f64; 3]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 12);
    for p in points {
        for &c in p {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    out
}

fn vecs_f64(points: &[[f64; 3]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 24);
    for p in points {
        for &c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

fn mask_u8(mask: &[bool]) -> Vec<u8> {
    mask.iter().map(|&b| b as u8).collect()
}

fn ego_bytes(t: &RigidTransform) -> Vec<u8> {
    let mut m = [[0.0f64; 4]; 4];
    for r in 0..3 {
        m[r][..3].copy_from_slice(&t.rotation[r]);
        m[r][3] = t.translation[r];
    }
    m[3][3] = 1.0;
    let mut out = Vec::with_capacity(128);
    for row in &m {
        for &v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn frame_pair_bytes(pair: &FramePair) -> Result<Vec<u8>> {
    pair.validate()?;
    let mut w = SectionWriter::new();
    w.section("PT0", &points_f32(&pair.cloud_t.positions));
    w.section("GM0", &mask_u8(&pair.cloud_t.ground_mask));
    w.section("PT1", &points_f32(&pair.cloud_t1.positions));
    w.section("GM1", &mask_u8(&pair.cloud_t1.ground_mask));
    w.section("EGO", &ego_bytes(&pair.ego_motion));
    w.section("DT", &pair.dt.to_le_bytes());
    if let Some(gf) = &pair.cloud_t.gt_flow {
        w.section("GF0", &vecs_f64(gf));
    }
    if let Some(cl) = &pair.cloud_t.class_id {
        w.section("CL0", cl);
    }
    let mut file = Vec::with_capacity(w.buf.len() + 12);
    file.extend_from_slice(MAGIC.as_bytes());
    file.extend_from_slice(&VERSION.to_le_bytes());
    file.extend_from_slice(&w.count.to_le_bytes());
    file.extend_from_slice(&w.buf);
    Ok(file)
}

pub fn write_frame_pair(pair: &FramePair, path: &Path) -> Result<()> {
    fs::write(path, frame_pair_bytes(pair)?)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if n > self.data.len() - self.pos {
            return Err(IoError::Truncated { section: section.into() });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }
}

fn parse_points_f32(payload: &[u8], section: &str) -> Result<Vec<[f64; 3]>> {
    if payload.len() % 12 != 0 {
        return Err(IoError::Structure {
            section: section.into(),
            message: format!("payload length {} is not a multiple of 12", payload.len()),
        });
    }
    let mut out = Vec::with_capacity(payload.len() / 12);
    for chunk in payload.chunks_exact(12) {
        let mut p = [0.0f64; 3];
        for (i, c) in chunk.chunks_exact(4).enumerate() {
            p[i] = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        }
        out.push(p);
    }
    Ok(out)
}

fn parse_vecs_f64(payload: &[u8], section: &str) -> Result<Vec<[f64; 3]>> {
    if payload.len() % 24 != 0 {
        return Err(IoError::Structure {
            section: section.into(),
            message: format!("payload length {} is not a multiple of 24", payload.len()),
        });
    }
    let mut out = Vec::with_capacity(payload.len() / 24);
    for chunk in payload.chunks_exact(24) {
        let mut p = [0.0f64; 3];
        for (i, c) in chunk.chunks_exact(8).enumerate() {
            p[i] = f64::from_le_bytes(c.try_into().unwrap());
        }
        out.push(p);
    }
    Ok(out)
}

fn parse_mask(payload: &[u8], section: &str) -> Result<Vec<bool>> {
    for &b in payload {
        if b > 1 {
            return Err(IoError::Structure {
                section: section.into(),
                message: format!("mask byte {b} is not 0 or 1"),
            });
        }
    }
    Ok(payload.iter().map(|&b| b == 1).collect())
}

fn parse_ego(payload: &[u8]) -> Result<RigidTransform> {
    if payload.len() != 128 {
        return Err(IoError::Structure {
            section: "EGO".into(),
            message: format!("expected 128 bytes for a 4x4 f64 matrix, found {}", payload.len()),
        });
    }
    let mut m = [0.0f64; 16];
    for (i, c) in payload.chunks_exact(8).enumerate() {
        m[i] = f64::from_le_bytes(c.try_into().unwrap());
    }
    if m[12..15] != [0.0, 0.0, 0.0] || m[15] != 1.0 {
        return Err(IoError::Structure {
            section: "EGO".into(),
            message: "bottom matrix row is not [0, 0, 0, 1]".into(),
        });
    }
    let mut rotation = [[0.0f64; 3]; 3];
    let mut translation = [0.0f64; 3];
    for r in 0..3 {
        rotation[r].copy_from_slice(&m[r * 4..r * 4 + 3]);
        translation[r] = m[r * 4 + 3];
    }
    Ok(RigidTransform { rotation, translation })
}

pub fn frame_pair_from_bytes(data: &[u8]) -> Result<FramePair> {
    let mut r = Reader { data, pos: 0 };
    let magic = r.take(4, "header")?;
    if magic != MAGIC.as_bytes() {
        return Err(IoError::BadMagic {
            expected: MAGIC,
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(IoError::VersionMismatch { format: "SFFP", expected: VERSION, found: version });
    }
    let count = r.u32("header")?;

    // `count` is untrusted input; size the vec from what the buffer could
    // actually hold (16 bytes per empty section) rather than the header.
    let cap = (count as usize).min((data.len() - r.pos) / 16);
    let mut sections: Vec<(String, &[u8])> = Vec::with_capacity(cap);
    for i in 0..count {
        let tag_bytes = r.take(8, &format!("section {i} tag"))?;
        let tag = String::from_utf8_lossy(tag_bytes).trim_end().to_string();
        let len = r.u64(&tag)? as usize;
        let payload = r.take(len, &tag)?;
        if sections.iter().any(|(t, _)| *t == tag) {
            return Err(IoError::Structure {
                section: tag,
                message: "section appears twice".into(),
            });
        }
        sections.push((tag, payload));
    }

    let get = |tag: &str| -> Result<&[u8]> {
        sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| *p)
            .ok_or_else(|| IoError::Structure {
                section: tag.into(),
                message: "required section missing".into(),
            })
    };

    let pt0 = parse_points_f32(get("PT0")?, "PT0")?;
    let gm0 = parse_mask(get("GM0")?, "GM0")?;
    let pt1 = parse_points_f32(get("PT1")?, "PT1")?;
    let gm1 = parse_mask(get("GM1")?, "GM1")?;
    let ego = parse_ego(get("EGO")?)?;
    let dt_payload = get("DT")?;
    if dt_payload.len() != 8 {
        return Err(IoError::Structure {
            section: "DT".into(),
            message: format!("expected 8 bytes, found {}", dt_payload.len()),
        });
    }
    let dt = f64::from_le_bytes(dt_payload.try_into().unwrap());

    let mut cloud_t = PointCloud::new(pt0, gm0);
    if let Some((_, payload)) = sections.iter().find(|(t, _)| t == "GF0") {
        let gf = parse_vecs_f64(payload, "GF0")?;
        if gf.len() != cloud_t.len() {
            return Err(IoError::Structure {
                section: "GF0".into(),
                message: format!("{} flow rows for {} points", gf.len(), cloud_t.len()),
            });
        }
        cloud_t.gt_flow = Some(gf);
    }
    if let Some((_, payload)) = sections.iter().find(|(t, _)| t == "CL0") {
        if payload.len() != cloud_t.len() {
            return Err(IoError::Structure {
                section: "CL0".into(),
                message: format!("{} class ids for {} points", payload.len(), cloud_t.len()),
            });
        }
        cloud_t.class_id = Some(payload.to_vec());
    }

    let pair = FramePair { cloud_t, cloud_t1: PointCloud::new(pt1, gm1), ego_motion: ego, dt };
    pair.validate()?;
    Ok(pair)
}

pub fn read_frame_pair(path: &Path) -> Result<FramePair> {
    frame_pair_from_bytes(&fs::read(path)?)
}
