//! Binary formats for avatars and decoders, text pose files, and the synthetic avatar.
//!
//! Every binary file is `"SQZM" | u32 version | 4-byte kind` followed by sections
//! `4-byte tag | u64 payload length | payload`, all little-endian. Numeric arrays are
//! stored structure-of-arrays so a loaded file is a plain copy of the in-memory data.

mod synth;

use std::fmt::Write as _;
use std::path::Path;

pub use synth::{default_camera, synth_avatar, SynthAvatar, SynthConfig};

use crate::decoder::{LinearDecoder, TeacherConfig};
use crate::error::{Error, Result};
use crate::quant::QuantizedLinearDecoder;
use crate::splat::{validate_splatset, Gaussian, Pose, RigidTransform, Skeleton, SkinWeights, SplatSet, SH_COEFFS};

pub const MAGIC: [u8; 4] = *b"SQZM";
pub const VERSION: u32 = 1;
pub const KIND_AVATAR: &str = "AVTR";
pub const KIND_DECODER: &str = "LDEC";
pub const KIND_QUANTIZED: &str = "QDEC";

/// Avatar file contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Avatar {
    pub splats: SplatSet,
    pub skeleton: Skeleton,
    pub lut: Option<Vec<u32>>,
    /// Configuration of the teacher decoder that drives this avatar, if any.
    pub teacher: Option<TeacherConfig>,
}

/// Either decoder file kind.
#[derive(Clone, Debug, PartialEq)]
pub enum DecoderFile {
    Float(LinearDecoder),
    Quantized(QuantizedLinearDecoder),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(kind: &str) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(kind.as_bytes());
        Writer { buf }
    }

    fn section(&mut self, tag: &str, payload: &[u8]) {
        self.buf.extend_from_slice(tag.as_bytes());
        self.buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(payload);
    }
}

#[derive(Default)]
struct Payload(Vec<u8>);

impl Payload {
    fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }
    fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn i32s(&mut self, v: impl IntoIterator<Item = i32>) -> &mut Self {
        v.into_iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
        self
    }
    fn u32s(&mut self, v: impl IntoIterator<Item = u32>) -> &mut Self {
        v.into_iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
        self
    }
    fn f32s(&mut self, v: impl IntoIterator<Item = f32>) -> &mut Self {
        v.into_iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
        self
    }
}

/// Bounds-checked little-endian reader over one section payload.
struct Reader<'a> {
    section: &'a str,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(section: &'a str, data: &'a [u8]) -> Self {
        Reader { section, data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.data.len() - self.pos;
        if n > left {
            return Err(Error::Truncated {
                section: self.section.to_string(),
                expected: self.pos + n,
                actual: self.data.len(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Bytes needed for `count` elements of `size` bytes, checked against what is left
    /// before anything is allocated.
    fn array_bytes(&mut self, count: usize, size: usize) -> Result<&'a [u8]> {
        let n = count
            .checked_mul(size)
            .ok_or_else(|| self.malformed(format!("element count {count} overflows")))?;
        self.take(n)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let b = self.array_bytes(count, 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn u32s(&mut self, count: usize) -> Result<Vec<u32>> {
        let b = self.array_bytes(count, 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn i32s(&mut self, count: usize) -> Result<Vec<i32>> {
        let b = self.array_bytes(count, 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn i8s(&mut self, count: usize) -> Result<Vec<i8>> {
        Ok(self.array_bytes(count, 1)?.iter().map(|b| *b as i8).collect())
    }

    fn malformed(&self, message: impl Into<String>) -> Error {
        Error::Malformed {
            section: self.section.to_string(),
            message: message.into(),
        }
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.malformed(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

struct Sections<'a> {
    list: Vec<(String, &'a [u8])>,
}

impl<'a> Sections<'a> {
    fn get(&self, tag: &str) -> Option<&'a [u8]> {
        self.list.iter().find(|(t, _)| t == tag).map(|(_, p)| *p)
    }

    fn require(&self, tag: &'static str) -> Result<Reader<'a>> {
        self.get(tag).map(|p| Reader::new(tag, p)).ok_or_else(|| Error::Malformed {
            section: tag.to_string(),
            message: "section missing".into(),
        })
    }

    fn optional(&self, tag: &'static str) -> Option<Reader<'a>> {
        self.get(tag).map(|p| Reader::new(tag, p))
    }
}

fn parse<'a>(bytes: &'a [u8], expected: &'static str) -> Result<Sections<'a>> {
    if bytes.len() < 12 {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                found: bytes[..4].try_into().expect("4 bytes"),
            });
        }
        return Err(Error::Truncated {
            section: "header".into(),
            expected: 12,
            actual: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..4].try_into().expect("4 bytes"),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let kind = String::from_utf8_lossy(&bytes[8..12]).into_owned();
    if kind != expected {
        return Err(Error::WrongKind { found: kind, expected });
    }
    let mut list: Vec<(String, &[u8])> = Vec::new();
    let mut pos = 12;
    while pos < bytes.len() {
        if bytes.len() - pos < 12 {
            return Err(Error::Truncated {
                section: "section header".into(),
                expected: 12,
                actual: bytes.len() - pos,
            });
        }
        let tag = String::from_utf8_lossy(&bytes[pos..pos + 4]).into_owned();
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().expect("8 bytes"));
        pos += 12;
        let left = bytes.len() - pos;
        if len > left as u64 {
            return Err(Error::Truncated {
                section: tag,
                expected: usize::try_from(len).unwrap_or(usize::MAX),
                actual: left,
            });
        }
        if list.iter().any(|(t, _)| *t == tag) {
            return Err(Error::Malformed {
                section: tag,
                message: "duplicate section".into(),
            });
        }
        let len = len as usize;
        list.push((tag, &bytes[pos..pos + len]));
        pos += len;
    }
    Ok(Sections { list })
}

/// File kind tag of a container, after checking magic and version.
pub fn file_kind(bytes: &[u8]) -> Result<String> {
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            section: "header".into(),
            expected: 12,
            actual: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..4].try_into().expect("4 bytes"),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    Ok(String::from_utf8_lossy(&bytes[8..12]).into_owned())
}

fn lut_payload(lut: &[u32]) -> Vec<u8> {
    let mut p = Payload::default();
    p.u32(lut.len() as u32).u32s(lut.iter().copied());
    p.0
}

fn read_lut(s: &Sections) -> Result<Option<Vec<u32>>> {
    match s.optional("LUT_") {
        None => Ok(None),
        Some(mut r) => {
            let n = r.usize()?;
            let lut = r.u32s(n)?;
            r.finish()?;
            Ok(Some(lut))
        }
    }
}

pub fn save_avatar(a: &Avatar) -> Vec<u8> {
    let s = &a.splats;
    let mut w = Writer::new(KIND_AVATAR);

    let mut p = Payload::default();
    p.u32(s.grid_h as u32).u32(s.grid_w as u32);
    let mut bits = vec![0u8; s.mask.len().div_ceil(8)];
    for (i, m) in s.mask.iter().enumerate() {
        if *m {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    p.0.extend_from_slice(&bits);
    w.section("MASK", &p.0);

    let g = &s.gaussians;
    let mut p = Payload::default();
    p.u32(g.len() as u32);
    for k in 0..3 {
        p.f32s(g.iter().map(|x| x.mu[k]));
    }
    for k in 0..4 {
        p.f32s(g.iter().map(|x| x.rot[k]));
    }
    for k in 0..3 {
        p.f32s(g.iter().map(|x| x.log_scale[k]));
    }
    p.f32s(g.iter().map(|x| x.delta));
    for k in 0..SH_COEFFS {
        p.f32s(g.iter().map(|x| x.sh[k]));
    }
    w.section("GAUS", &p.0);

    let sk = &a.skeleton;
    let mut p = Payload::default();
    p.u32(sk.n_joints() as u32).i32s(sk.parent.iter().copied());
    for k in 0..4 {
        p.f32s(sk.rest_local.iter().map(|t| t.rot[k]));
    }
    for k in 0..3 {
        p.f32s(sk.rest_local.iter().map(|t| t.trans[k]));
    }
    w.section("SKEL", &p.0);

    let sw = &sk.skin_weights;
    let mut p = Payload::default();
    p.u32(sw.len() as u32);
    for k in 0..4 {
        p.u32s(sw.iter().map(|x| x.joints[k]));
    }
    for k in 0..4 {
        p.f32s(sw.iter().map(|x| x.weights[k]));
    }
    w.section("SKIN", &p.0);

    if let Some(lut) = &a.lut {
        w.section("LUT_", &lut_payload(lut));
    }
    if let Some(t) = &a.teacher {
        let mut p = Payload::default();
        p.u32(t.n_joints as u32)
            .u32(t.out_h as u32)
            .u32(t.out_w as u32)
            .u32(t.hidden as u32)
            .u32(t.coarse_h as u32)
            .u32(t.coarse_w as u32)
            .u8(t.linear as u8)
            .u64(t.seed);
        w.section("TCHR", &p.0);
    }
    w.buf
}

fn soa<const N: usize>(r: &mut Reader, n: usize) -> Result<Vec<[f32; N]>> {
    let cols: Vec<Vec<f32>> = (0..N).map(|_| r.f32s(n)).collect::<Result<_>>()?;
    Ok((0..n).map(|i| std::array::from_fn(|k| cols[k][i])).collect())
}

pub fn load_avatar(bytes: &[u8]) -> Result<Avatar> {
    let s = parse(bytes, KIND_AVATAR)?;

    let mut r = s.require("MASK")?;
    let (h, w) = (r.usize()?, r.usize()?);
    let cells = h.checked_mul(w).ok_or_else(|| r.malformed("grid size overflows"))?;
    let bits = r.array_bytes(cells.div_ceil(8), 1)?;
    let mask: Vec<bool> = (0..cells).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
    r.finish()?;

    let mut r = s.require("GAUS")?;
    let n = r.usize()?;
    if n.checked_mul(4 * (3 + 4 + 3 + 1 + SH_COEFFS)) != Some(r.data.len() - 4) {
        return Err(Error::Truncated {
            section: "GAUS".into(),
            expected: 4 + n.saturating_mul(4 * (3 + 4 + 3 + 1 + SH_COEFFS)),
            actual: r.data.len(),
        });
    }
    let mu = soa::<3>(&mut r, n)?;
    let rot = soa::<4>(&mut r, n)?;
    let log_scale = soa::<3>(&mut r, n)?;
    let delta = r.f32s(n)?;
    let sh = soa::<SH_COEFFS>(&mut r, n)?;
    r.finish()?;
    let gaussians = (0..n)
        .map(|i| Gaussian {
            mu: mu[i],
            rot: rot[i],
            log_scale: log_scale[i],
            delta: delta[i],
            sh: sh[i],
        })
        .collect();
    let splats = SplatSet::from_mask(h, w, mask, gaussians).map_err(|e| Error::Malformed {
        section: "GAUS".into(),
        message: e.to_string(),
    })?;
    if let Some(v) = validate_splatset(&splats).first() {
        return Err(Error::Malformed {
            section: "GAUS".into(),
            message: v.to_string(),
        });
    }

    let mut r = s.require("SKEL")?;
    let j = r.usize()?;
    let parent = r.i32s(j)?;
    let rot = soa::<4>(&mut r, j)?;
    let trans = soa::<3>(&mut r, j)?;
    r.finish()?;
    let rest: Vec<RigidTransform> = rot
        .into_iter()
        .zip(trans)
        .map(|(rot, trans)| RigidTransform { rot, trans })
        .collect();

    let mut r = s.require("SKIN")?;
    let m = r.usize()?;
    let joints = (0..4).map(|_| r.u32s(m)).collect::<Result<Vec<_>>>()?;
    let weights = (0..4).map(|_| r.f32s(m)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    if m != n {
        return Err(Error::Malformed {
            section: "SKIN".into(),
            message: format!("{m} skin weights for {n} gaussians"),
        });
    }
    let skin = (0..m)
        .map(|i| SkinWeights {
            joints: std::array::from_fn(|k| joints[k][i]),
            weights: std::array::from_fn(|k| weights[k][i]),
        })
        .collect();
    let skeleton = Skeleton::new(parent, rest, skin).map_err(|e| Error::Malformed {
        section: "SKEL".into(),
        message: e.to_string(),
    })?;

    let lut = read_lut(&s)?;
    if let Some(l) = &lut {
        if l.len() != n {
            return Err(Error::Malformed {
                section: "LUT_".into(),
                message: format!("{} entries for {n} gaussians", l.len()),
            });
        }
    }
    let teacher = match s.optional("TCHR") {
        None => None,
        Some(mut r) => {
            let t = TeacherConfig {
                n_joints: r.usize()?,
                out_h: r.usize()?,
                out_w: r.usize()?,
                hidden: r.usize()?,
                coarse_h: r.usize()?,
                coarse_w: r.usize()?,
                linear: r.u8()? != 0,
                seed: r.u64()?,
            };
            r.finish()?;
            Some(t)
        }
    };
    Ok(Avatar {
        splats,
        skeleton,
        lut,
        teacher,
    })
}

fn decoder_header(ld: &LinearDecoder) -> Vec<u8> {
    let mut p = Payload::default();
    p.u32(ld.pose_dim as u32).u32(ld.d as u32).u32(ld.n_corr as u32).u32(ld.sh_d as u32);
    p.0
}

fn write_shared(w: &mut Writer, ld: &LinearDecoder) {
    w.section("DHDR", &decoder_header(ld));
    let mut p = Payload::default();
    p.f32s(ld.p_mean.iter().copied());
    w.section("PMEA", &p.0);
    let mut p = Payload::default();
    p.f32s(ld.b_p.iter().copied());
    w.section("BPOS", &p.0);
    let mut p = Payload::default();
    p.f32s(ld.sh_expand.iter().copied());
    w.section("SHEX", &p.0);
    let mut p = Payload::default();
    p.f32s(ld.sh_mean.iter().copied());
    w.section("SHMU", &p.0);
    if let Some(lut) = &ld.lut {
        w.section("LUT_", &lut_payload(lut));
    }
}

fn whole_f32(s: &Sections, tag: &'static str, count: usize) -> Result<Vec<f32>> {
    let mut r = s.require(tag)?;
    let v = r.f32s(count)?;
    r.finish()?;
    Ok(v)
}

/// Reads everything but `B_c`, which is left empty.
fn read_shared(s: &Sections) -> Result<LinearDecoder> {
    let mut r = s.require("DHDR")?;
    let (pose_dim, d, n_corr, sh_d) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    r.finish()?;
    if sh_d == 0 || sh_d > SH_COEFFS || d > pose_dim {
        return Err(Error::Malformed {
            section: "DHDR".into(),
            message: format!("invalid shape d={d} pose_dim={pose_dim} sh_d={sh_d}"),
        });
    }
    let p_mean = whole_f32(s, "PMEA", pose_dim)?;
    let b_p = whole_f32(s, "BPOS", pose_dim * d)?;
    let sh_expand = whole_f32(s, "SHEX", sh_d * SH_COEFFS)?;
    let sh_mean: [f32; SH_COEFFS] = whole_f32(s, "SHMU", SH_COEFFS)?.try_into().expect("27 values");
    Ok(LinearDecoder {
        pose_dim,
        d,
        n_corr,
        sh_d,
        p_mean,
        b_p,
        b_c: Vec::new(),
        sh_expand,
        sh_mean,
        lut: read_lut(s)?,
    })
}

fn b_c_len(ld: &LinearDecoder) -> Result<usize> {
    ld.n_corr
        .checked_mul(ld.raw_width())
        .and_then(|v| v.checked_mul(ld.code_len()))
        .ok_or_else(|| Error::Malformed {
            section: "DHDR".into(),
            message: "decoder size overflows".into(),
        })
}

fn malformed_from(section: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Validation(message) => Error::Malformed {
            section: section.to_string(),
            message,
        },
        other => other,
    }
}

pub fn save_decoder(ld: &LinearDecoder) -> Vec<u8> {
    let mut w = Writer::new(KIND_DECODER);
    write_shared(&mut w, ld);
    let mut p = Payload::default();
    p.f32s(ld.b_c.iter().copied());
    w.section("BCOR", &p.0);
    w.buf
}

pub fn load_decoder(bytes: &[u8]) -> Result<LinearDecoder> {
    let s = parse(bytes, KIND_DECODER)?;
    let mut ld = read_shared(&s)?;
    ld.b_c = whole_f32(&s, "BCOR", b_c_len(&ld)?)?;
    ld.validate().map_err(malformed_from("BCOR"))?;
    Ok(ld)
}

pub fn save_quantized(q: &QuantizedLinearDecoder) -> Vec<u8> {
    let mut w = Writer::new(KIND_QUANTIZED);
    write_shared(&mut w, &q.meta);
    let bytes: Vec<u8> = q.weights.iter().map(|v| *v as u8).collect();
    w.section("QWTS", &bytes);
    let mut p = Payload::default();
    p.f32s(q.weight_scales.iter().copied());
    w.section("WSCL", &p.0);
    let mut p = Payload::default();
    p.f32s([q.activation_scale]).u32(q.zero_columns as u32);
    w.section("ASCL", &p.0);
    w.buf
}

pub fn load_quantized(bytes: &[u8]) -> Result<QuantizedLinearDecoder> {
    let s = parse(bytes, KIND_QUANTIZED)?;
    let meta = read_shared(&s)?;
    let n = b_c_len(&meta)?;
    let mut r = s.require("QWTS")?;
    let weights = r.i8s(n)?;
    r.finish()?;
    let weight_scales = whole_f32(&s, "WSCL", n / meta.code_len().max(1))?;
    let mut r = s.require("ASCL")?;
    let activation_scale = r.f32s(1)?[0];
    let zero_columns = r.usize()?;
    r.finish()?;
    let q = QuantizedLinearDecoder {
        meta,
        weights,
        weight_scales,
        activation_scale,
        zero_columns,
    };
    q.validate().map_err(malformed_from("QWTS"))?;
    Ok(q)
}

/// Loads either decoder kind, dispatching on the file kind.
pub fn load_any_decoder(bytes: &[u8]) -> Result<DecoderFile> {
    match file_kind(bytes)?.as_str() {
        KIND_QUANTIZED => Ok(DecoderFile::Quantized(load_quantized(bytes)?)),
        _ => Ok(DecoderFile::Float(load_decoder(bytes)?)),
    }
}

/// Pose sequence as text: a `frames dim` header line, then one line of values per frame.
pub fn poses_to_string(poses: &[Pose]) -> String {
    let dim = poses.first().map_or(0, |p| p.dim());
    let mut out = format!("{} {}\n", poses.len(), dim);
    for p in poses {
        let line: Vec<String> = p.to_vector_f32().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn poses_from_str(text: &str) -> Result<Vec<Pose>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Malformed {
        section: "pose header".into(),
        message: "empty pose file".into(),
    })?;
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Malformed {
            section: "pose header".into(),
            message: e.to_string(),
        })?;
    let [frames, dim] = nums[..] else {
        return Err(Error::Malformed {
            section: "pose header".into(),
            message: format!("expected 'frames dim', got {header:?}"),
        });
    };
    let mut poses = Vec::with_capacity(frames.min(1 << 16));
    for (i, line) in lines.enumerate() {
        let section = || format!("pose {i}");
        let v: Vec<f32> = line
            .split_whitespace()
            .map(|t| t.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Malformed {
                section: section(),
                message: e.to_string(),
            })?;
        if v.len() != dim {
            return Err(Error::Malformed {
                section: section(),
                message: format!("expected {dim} values, got {}", v.len()),
            });
        }
        let p = Pose::from_vector_f32(&v).map_err(malformed_from("pose"))?;
        p.validate().map_err(malformed_from("pose"))?;
        poses.push(p);
    }
    if poses.len() != frames {
        return Err(Error::Truncated {
            section: "poses".into(),
            expected: frames,
            actual: poses.len(),
        });
    }
    Ok(poses)
}

pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    Ok(std::fs::write(path, bytes)?)
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

#[cfg(test)]
mod tests;
