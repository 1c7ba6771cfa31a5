//! Binary little-endian splat point clouds.
//!
//! Raw values on disk: `x y z`, log scales `scale_0..2`, quaternion
//! `rot_0..3` (w first), logit `opacity`, and degree-0 SH coefficients
//! `f_dc_0..2`. Extra properties are ignored on import.

use std::io::{Read, Write};

use thiserror::Error;

use crate::gaussian::{normalize_quat, Aabb, Gaussian, GaussianSet};

/// Degree-0 real spherical harmonic constant.
pub const SH_C0: f64 = 0.28209479177387814;
/// Opacities are clamped to `[OPACITY_EPS, 1 - OPACITY_EPS]` before the logit.
pub const OPACITY_EPS: f64 = 1e-6;

const EXPORT_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
    "rot_2", "rot_3",
];

#[derive(Debug, Error)]
pub enum PlyError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("byte {offset}: {message}")]
    Header { offset: usize, message: String },
    #[error("missing required vertex property `{0}`")]
    MissingProperty(String),
    #[error("truncated vertex data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("vertex {index}: {message}")]
    BadVertex { index: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    properties: Vec<(String, Scalar)>,
}

impl Element {
    fn stride(&self) -> usize {
        self.properties.iter().map(|(_, s)| s.size()).sum()
    }
}

struct Header {
    elements: Vec<Element>,
    bounds: Option<Aabb>,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PlyError> {
    let err = |offset: usize, message: String| PlyError::Header { offset, message };
    let mut offset = 0;
    let mut elements: Vec<Element> = Vec::new();
    let mut bounds = None;
    let mut line_no = 0;
    loop {
        let rest = &bytes[offset..];
        let Some(len) = rest.iter().position(|&b| b == b'\n') else {
            return Err(err(offset, "header is not terminated by end_header".into()));
        };
        let line = std::str::from_utf8(&rest[..len]).map_err(|_| err(offset, "header is not ASCII".into()))?;
        let line = line.trim_end_matches('\r');
        let start = offset;
        offset += len + 1;
        let words: Vec<&str> = line.split_whitespace().collect();
        if line_no == 0 {
            if line != "ply" {
                return Err(err(0, "missing `ply` signature".into()));
            }
            line_no += 1;
            continue;
        }
        line_no += 1;
        match words.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(err(start, format!("unsupported format `{other}`"))),
            ["comment", "bounds", vals @ ..] => {
                let v: Result<Vec<f64>, _> = vals.iter().map(|s| s.parse::<f64>()).collect();
                match v {
                    Ok(v) if v.len() == 6 => {
                        bounds = Some(
                            Aabb::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
                                .map_err(|e| err(start, e.to_string()))?,
                        );
                    }
                    _ => return Err(err(start, "bounds comment needs six numbers".into())),
                }
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| err(start, format!("bad element count `{count}`")))?;
                elements.push(Element { name: name.to_string(), count, properties: Vec::new() });
            }
            ["property", "list", ..] => return Err(err(start, "list properties are not supported".into())),
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| err(start, format!("unknown property type `{ty}`")))?;
                let el = elements.last_mut().ok_or_else(|| err(start, "property before any element".into()))?;
                el.properties.push((name.to_string(), ty));
            }
            ["end_header"] => break,
            _ => return Err(err(start, format!("unrecognized header line `{line}`"))),
        }
    }
    Ok(Header { elements, bounds, data_start: offset })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn import_splat_ply<R: Read>(mut source: R) -> Result<GaussianSet, PlyError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let header = parse_header(&bytes)?;
    let mut data_offset = header.data_start;
    let mut vertex = None;
    for el in &header.elements {
        if el.name == "vertex" {
            vertex = Some((el, data_offset));
            break;
        }
        data_offset += el.count * el.stride();
    }
    let Some((el, start)) = vertex else {
        return Err(PlyError::Header { offset: header.data_start, message: "no vertex element".into() });
    };
    let required = ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity"]
        .into_iter()
        .chain(["f_dc_0", "f_dc_1", "f_dc_2"]);
    let mut columns = Vec::new();
    for name in required {
        let mut off = 0;
        let mut found = None;
        for (p, ty) in &el.properties {
            if p == name {
                found = Some((off, *ty));
                break;
            }
            off += ty.size();
        }
        columns.push(found.ok_or_else(|| PlyError::MissingProperty(name.to_string()))?);
    }
    let stride = el.stride();
    let expected = start + el.count * stride;
    if bytes.len() < expected {
        return Err(PlyError::Truncated { expected, actual: bytes.len() });
    }
    let mut gaussians = Vec::with_capacity(el.count);
    for index in 0..el.count {
        let row = &bytes[start + index * stride..start + (index + 1) * stride];
        let v: Vec<f64> = columns.iter().map(|&(off, ty)| ty.read(&row[off..])).collect();
        if let Some(k) = v.iter().position(|x| !x.is_finite()) {
            return Err(PlyError::BadVertex { index, message: format!("non-finite value in column {k}") });
        }
        let rot = normalize_quat([v[6], v[7], v[8], v[9]])
            .map_err(|e| PlyError::BadVertex { index, message: e.to_string() })?;
        gaussians.push(Gaussian {
            mu: [v[0], v[1], v[2]],
            scale: [v[3].exp(), v[4].exp(), v[5].exp()],
            rot,
            opacity: sigmoid(v[10]),
            color: [11, 12, 13].map(|k| (v[k] * SH_C0 + 0.5).clamp(0.0, 1.0)),
        });
    }
    let bounds = header
        .bounds
        .or_else(|| Aabb::enclosing(gaussians.iter().map(|g| &g.mu), 0.0))
        .unwrap_or_else(Aabb::unit);
    Ok(GaussianSet::new(gaussians, bounds))
}

/// Writes `set` with a `comment bounds` header line; returns the byte count.
pub fn export_splat_ply<W: Write>(set: &GaussianSet, mut sink: W) -> Result<u64, PlyError> {
    let b = &set.bounds;
    let mut buf = format!(
        "ply\nformat binary_little_endian 1.0\ncomment bounds {} {} {} {} {} {}\nelement vertex {}\n",
        b.min[0],
        b.min[1],
        b.min[2],
        b.max[0],
        b.max[1],
        b.max[2],
        set.len()
    )
    .into_bytes();
    for p in EXPORT_PROPERTIES {
        buf.extend_from_slice(format!("property float {p}\n").as_bytes());
    }
    buf.extend_from_slice(b"end_header\n");
    for g in &set.gaussians {
        let dc = g.color.map(|c| (c - 0.5) / SH_C0);
        let opacity = logit(g.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS));
        let values = [
            g.mu[0],
            g.mu[1],
            g.mu[2],
            dc[0],
            dc[1],
            dc[2],
            opacity,
            g.scale[0].ln(),
            g.scale[1].ln(),
            g.scale[2].ln(),
            g.rot[0],
            g.rot[1],
            g.rot[2],
            g.rot[3],
        ];
        for v in values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(buf.len() as u64)
}
