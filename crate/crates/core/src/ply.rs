//! Import and export of 3DGS-style binary PLY files.
//!
//! Only the DC spherical-harmonic band is read (`f_dc_*`); higher bands are
//! skipped. Scales are stored in log space and opacity as a logit, matching
//! the in-memory representation.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{GaussianPrimitive, GaussianScene};

/// Zeroth-order real spherical harmonic, `1 / (2 sqrt(pi))`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
    "rot_3", "f_dc_0", "f_dc_1", "f_dc_2",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    /// `(name, type)`; list properties are rejected.
    properties: Vec<(String, Scalar)>,
}

impl Element {
    fn stride(&self) -> usize {
        self.properties.iter().map(|(_, t)| t.size()).sum()
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<Element>, usize)> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Import("missing end_header".into()))?;
    let mut body = end + END.len();
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) != Some(&b'\n') {
        return Err(Error::Import("end_header not followed by newline".into()));
    }
    body += 1;
    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Import("header is not UTF-8".into()))?;
    let mut lines = text.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(Error::Import("missing 'ply' magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    for line in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                match parts.next() {
                    Some("binary_little_endian") => {}
                    Some(other) => {
                        return Err(Error::Unsupported(format!("PLY format {other}")));
                    }
                    None => return Err(Error::Import("empty format line".into())),
                }
                saw_format = true;
            }
            Some("element") => {
                let name = parts.next().unwrap_or_default().to_string();
                let count = parts
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::Import(format!("bad element line: {line}")))?;
                elements.push(Element {
                    name,
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let elem = elements
                    .last_mut()
                    .ok_or_else(|| Error::Import("property before element".into()))?;
                let ty = parts.next().unwrap_or_default();
                if ty == "list" {
                    return Err(Error::Unsupported(format!(
                        "list property in element {}",
                        elem.name
                    )));
                }
                let scalar = Scalar::parse(ty)
                    .ok_or_else(|| Error::Import(format!("unknown property type {ty}")))?;
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Import(format!("bad property line: {line}")))?;
                elem.properties.push((name.to_string(), scalar));
            }
            Some("comment") | Some("obj_info") | None => {}
            Some(other) => return Err(Error::Import(format!("unexpected header keyword {other}"))),
        }
    }
    if !saw_format {
        return Err(Error::Import("missing format line".into()));
    }
    Ok((elements, body))
}

/// Parses a binary little-endian 3DGS PLY.
pub fn parse_ply(bytes: &[u8]) -> Result<GaussianScene> {
    let (elements, mut offset) = parse_header(bytes)?;
    let mut vertex = None;
    for el in &elements {
        if el.name == "vertex" {
            vertex = Some(el);
            break;
        }
        offset += el.count * el.stride();
    }
    let vertex = vertex.ok_or_else(|| Error::Import("no vertex element".into()))?;

    let mut columns: HashMap<&str, (usize, Scalar)> = HashMap::new();
    let mut at = 0;
    for (name, ty) in &vertex.properties {
        columns.insert(name.as_str(), (at, *ty));
        at += ty.size();
    }
    let missing: Vec<&str> = REQUIRED
        .iter()
        .filter(|n| !columns.contains_key(*n))
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Import(format!(
            "missing vertex properties: {}",
            missing.join(", ")
        )));
    }

    let stride = vertex.stride();
    let needed = offset + vertex.count * stride;
    if bytes.len() < needed {
        return Err(Error::Import(format!(
            "vertex data truncated: {} bytes, need {needed}",
            bytes.len()
        )));
    }
    let mut prims = Vec::with_capacity(vertex.count);
    for i in 0..vertex.count {
        let row = &bytes[offset + i * stride..offset + (i + 1) * stride];
        let get = |name: &str| {
            let (pos, ty) = columns[name];
            ty.read(&row[pos..])
        };
        prims.push(GaussianPrimitive {
            position: [get("x"), get("y"), get("z")],
            log_scale: [get("scale_0"), get("scale_1"), get("scale_2")],
            rotation: [get("rot_0"), get("rot_1"), get("rot_2"), get("rot_3")],
            opacity_logit: get("opacity"),
            color: [
                get("f_dc_0") * SH_C0 + 0.5,
                get("f_dc_1") * SH_C0 + 0.5,
                get("f_dc_2") * SH_C0 + 0.5,
            ],
        });
    }
    GaussianScene::new(prims)
}

pub fn import_ply(path: impl AsRef<Path>) -> Result<GaussianScene> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes)
}

/// Encodes the scene with float32 3DGS property naming.
pub fn encode_ply(scene: &GaussianScene) -> Vec<u8> {
    let names = [
        "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
        "rot_0", "rot_1", "rot_2", "rot_3",
    ];
    let mut out = String::from("ply\nformat binary_little_endian 1.0\n");
    out.push_str(&format!("element vertex {}\n", scene.len()));
    for n in names {
        out.push_str(&format!("property float {n}\n"));
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    for p in scene.primitives() {
        let dc = p.color.map(|c| (c - 0.5) / SH_C0);
        let row = [
            p.position[0],
            p.position[1],
            p.position[2],
            dc[0],
            dc[1],
            dc[2],
            p.opacity_logit,
            p.log_scale[0],
            p.log_scale[1],
            p.log_scale[2],
            p.rotation[0],
            p.rotation[1],
            p.rotation[2],
            p.rotation[3],
        ];
        for v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

pub fn export_ply(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ply(scene)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_vertex(props: &[(&str, f32)]) -> Vec<u8> {
        let mut s = String::from("ply\nformat binary_little_endian 1.0\ncomment test\n");
        s.push_str("element vertex 1\n");
        for (n, _) in props {
            s.push_str(&format!("property float {n}\n"));
        }
        s.push_str("end_header\n");
        let mut b = s.into_bytes();
        for (_, v) in props {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    fn full(rot: [f32; 4], dc: [f32; 3]) -> Vec<(&'static str, f32)> {
        vec![
            ("x", 1.0),
            ("y", 2.0),
            ("z", 3.0),
            ("nx", 0.0),
            ("ny", 0.0),
            ("nz", 0.0),
            ("f_dc_0", dc[0]),
            ("f_dc_1", dc[1]),
            ("f_dc_2", dc[2]),
            ("f_rest_0", 9.0),
            ("opacity", -0.5),
            ("scale_0", -2.0),
            ("scale_1", -3.0),
            ("scale_2", -4.0),
            ("rot_0", rot[0]),
            ("rot_1", rot[1]),
            ("rot_2", rot[2]),
            ("rot_3", rot[3]),
        ]
    }

    #[test]
    fn zero_dc_maps_to_mid_gray() {
        let scene = parse_ply(&one_vertex(&full([1.0, 0.0, 0.0, 0.0], [0.0; 3]))).unwrap();
        assert_eq!(scene.primitives()[0].color, [0.5, 0.5, 0.5]);
        assert_eq!(scene.primitives()[0].log_scale, [-2.0, -3.0, -4.0]);
    }

    #[test]
    fn unit_quaternion_kept() {
        let scene = parse_ply(&one_vertex(&full([0.5, 0.5, 0.5, 0.5], [0.0; 3]))).unwrap();
        assert_eq!(scene.primitives()[0].rotation, [0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn missing_properties_listed() {
        let props: Vec<_> = full([1.0, 0.0, 0.0, 0.0], [0.0; 3])
            .into_iter()
            .filter(|(n, _)| *n != "opacity" && *n != "rot_2")
            .collect();
        match parse_ply(&one_vertex(&props)) {
            Err(Error::Import(msg)) => {
                assert!(msg.contains("opacity") && msg.contains("rot_2"), "{msg}")
            }
            other => panic!("expected import error, got {other:?}"),
        }
    }

    #[test]
    fn ascii_rejected() {
        let text = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(parse_ply(text), Err(Error::Unsupported(_))));
    }

    #[test]
    fn export_import_round_trip() {
        let scene = GaussianScene::new(vec![
            GaussianPrimitive {
                position: [0.25, -1.5, 4.0],
                log_scale: [-2.0, -2.5, -3.0],
                rotation: [0.5, 0.5, 0.5, 0.5],
                opacity_logit: 1.25,
                color: [0.1, 0.7, 0.9],
            },
            GaussianPrimitive {
                position: [3.0, 0.0, -1.0],
                log_scale: [0.0, 0.1, 0.2],
                rotation: [1.0, 0.0, 0.0, 0.0],
                opacity_logit: -3.0,
                color: [1.2, -0.1, 0.5],
            },
        ])
        .unwrap();
        let back = parse_ply(&encode_ply(&scene)).unwrap();
        assert_eq!(back.len(), scene.len());
        for (a, b) in back.primitives().iter().zip(scene.primitives()) {
            let pairs = a
                .position
                .iter()
                .zip(&b.position)
                .chain(a.log_scale.iter().zip(&b.log_scale))
                .chain(a.rotation.iter().zip(&b.rotation))
                .chain(a.color.iter().zip(&b.color))
                .chain(std::iter::once((&a.opacity_logit, &b.opacity_logit)));
            for (x, y) in pairs {
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
    }
}
