//! PLY reading and writing for vertex clouds.
//!
//! Reads `ascii` and `binary_little_endian` files with any scalar property
//! types; x/y/z are required, red/green/blue and `source` are picked up when
//! present and every other property or element is skipped. Writes x/y/z as
//! `double`, so binary round trips are bit-exact and ascii output uses the
//! shortest representation that parses back to the same value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CloudError, PointCloud};
use crate::geometry::Point3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlyFormat {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
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

    fn read_le(self, b: &[u8]) -> f64 {
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

#[derive(Debug, Clone)]
enum Property {
    Scalar(Scalar, String),
    List(Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    binary: bool,
    elements: Vec<Element>,
    source_id: Option<String>,
    body_start: usize,
}

fn malformed(m: impl Into<String>) -> CloudError {
    CloudError::MalformedHeader(m.into())
}

fn parse_header(bytes: &[u8]) -> Result<Header, CloudError> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(malformed("missing end_header"));
        };
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| malformed("header is not text"))?
            .trim_end_matches('\r')
            .to_string();
        pos += nl + 1;
        let done = line.trim() == "end_header";
        lines.push(line);
        if done {
            break;
        }
    }
    if lines.first().map(|l| l.trim()) != Some("ply") {
        return Err(malformed("missing 'ply' magic"));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut source_id = None;
    for line in &lines[1..lines.len() - 1] {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [] => {}
            ["format", fmt, _version] => {
                binary = Some(match *fmt {
                    "ascii" => false,
                    "binary_little_endian" => true,
                    other => return Err(malformed(format!("unsupported format '{other}'"))),
                })
            }
            ["comment", "source_id", rest @ ..] => source_id = Some(rest.join(" ")),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| malformed(format!("bad element count '{count}'")))?,
                properties: Vec::new(),
            }),
            ["property", "list", ct, it, _name] => {
                let el = elements.last_mut().ok_or_else(|| malformed("property before element"))?;
                let ct = Scalar::parse(ct).ok_or_else(|| malformed(format!("unknown type '{ct}'")))?;
                let it = Scalar::parse(it).ok_or_else(|| malformed(format!("unknown type '{it}'")))?;
                el.properties.push(Property::List(ct, it));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| malformed("property before element"))?;
                let ty = Scalar::parse(ty).ok_or_else(|| malformed(format!("unknown type '{ty}'")))?;
                el.properties.push(Property::Scalar(ty, name.to_string()));
            }
            _ => return Err(malformed(format!("unrecognized header line '{line}'"))),
        }
    }
    let binary = binary.ok_or_else(|| malformed("missing format line"))?;
    let vertex = elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| malformed("no vertex element"))?;
    for axis in ["x", "y", "z"] {
        if !vertex
            .properties
            .iter()
            .any(|p| matches!(p, Property::Scalar(_, n) if n == axis))
        {
            return Err(malformed(format!("vertex element lacks property '{axis}'")));
        }
    }
    Ok(Header {
        binary,
        elements,
        source_id,
        body_start: pos,
    })
}

/// Sequential reader over either body encoding.
enum Body<'a> {
    Ascii(std::str::SplitAsciiWhitespace<'a>),
    Binary(&'a [u8], usize),
}

impl Body<'_> {
    fn next(&mut self, ty: Scalar, what: &str) -> Result<f64, CloudError> {
        match self {
            Body::Ascii(tokens) => {
                let tok = tokens
                    .next()
                    .ok_or_else(|| CloudError::TruncatedBody(format!("body ends inside {what}")))?;
                tok.parse::<f64>()
                    .map_err(|_| CloudError::TruncatedBody(format!("bad number '{tok}' in {what}")))
            }
            Body::Binary(bytes, pos) => {
                let n = ty.size();
                if *pos + n > bytes.len() {
                    return Err(CloudError::TruncatedBody(format!("body ends inside {what}")));
                }
                let v = ty.read_le(&bytes[*pos..*pos + n]);
                *pos += n;
                Ok(v)
            }
        }
    }
}

/// Parse a PLY document. `default_source` labels the cloud unless the file
/// carries a `comment source_id` line.
pub fn parse_ply(bytes: &[u8], default_source: &str) -> Result<PointCloud, CloudError> {
    let header = parse_header(bytes)?;
    let body_bytes = &bytes[header.body_start..];
    let mut body = if header.binary {
        Body::Binary(body_bytes, 0)
    } else {
        let text = std::str::from_utf8(body_bytes).map_err(|_| CloudError::TruncatedBody("ascii body is not text".into()))?;
        Body::Ascii(text.split_ascii_whitespace())
    };
    let mut cloud = None;
    for el in &header.elements {
        let is_vertex = el.name == "vertex";
        let slot = |name: &str| {
            el.properties
                .iter()
                .position(|p| matches!(p, Property::Scalar(_, n) if n == name))
        };
        let (xi, yi, zi) = (slot("x"), slot("y"), slot("z"));
        let rgb = [slot("red"), slot("green"), slot("blue")];
        let has_rgb = is_vertex && rgb.iter().all(|s| s.is_some());
        let src = if is_vertex { slot("source") } else { None };
        let mut points = Vec::with_capacity(if is_vertex { el.count } else { 0 });
        let mut colors = Vec::new();
        let mut sources = Vec::new();
        let mut row = vec![0f64; el.properties.len()];
        for r in 0..el.count {
            let what = format!("{} {r}", el.name);
            for (k, prop) in el.properties.iter().enumerate() {
                match prop {
                    Property::Scalar(ty, _) => row[k] = body.next(*ty, &what)?,
                    Property::List(ct, it) => {
                        let n = body.next(*ct, &what)?;
                        if !(n >= 0.0) {
                            return Err(CloudError::TruncatedBody(format!("negative list length in {what}")));
                        }
                        for _ in 0..n as usize {
                            body.next(*it, &what)?;
                        }
                    }
                }
            }
            if is_vertex {
                points.push(Point3::new(row[xi.unwrap()], row[yi.unwrap()], row[zi.unwrap()]));
                if has_rgb {
                    colors.push(rgb.map(|s| row[s.unwrap()].clamp(0.0, 255.0) as u8));
                }
                if let Some(s) = src {
                    sources.push(row[s] as u32);
                }
            }
        }
        if is_vertex {
            cloud = Some(PointCloud {
                points,
                colors: has_rgb.then_some(colors),
                source_id: header.source_id.clone().unwrap_or_else(|| default_source.to_string()),
                sources: src.map(|_| sources),
            });
        }
    }
    let cloud = cloud.expect("vertex element checked in header");
    cloud.validate()?;
    Ok(cloud)
}

pub fn read_ply(path: &Path) -> Result<PointCloud, CloudError> {
    let bytes = std::fs::read(path).map_err(|source| CloudError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_ply(&bytes, &stem)
}

/// Serialize a cloud. Deterministic: identical clouds give identical bytes.
pub fn ply_bytes(cloud: &PointCloud, format: PlyFormat) -> Result<Vec<u8>, CloudError> {
    cloud.validate()?;
    let mut out = String::from("ply\n");
    out.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    if !cloud.source_id.is_empty() {
        out.push_str(&format!("comment source_id {}\n", cloud.source_id.replace('\n', " ")));
    }
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.colors.is_some() {
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if cloud.sources.is_some() {
        out.push_str("property uint source\n");
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    for i in 0..cloud.len() {
        let p = cloud.points[i];
        match format {
            PlyFormat::Ascii => {
                let mut line = format!("{} {} {}", p.x, p.y, p.z);
                if let Some(c) = &cloud.colors {
                    line.push_str(&format!(" {} {} {}", c[i][0], c[i][1], c[i][2]));
                }
                if let Some(s) = &cloud.sources {
                    line.push_str(&format!(" {}", s[i]));
                }
                line.push('\n');
                bytes.extend_from_slice(line.as_bytes());
            }
            PlyFormat::BinaryLittleEndian => {
                for v in [p.x, p.y, p.z] {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(c) = &cloud.colors {
                    bytes.extend_from_slice(&c[i]);
                }
                if let Some(s) = &cloud.sources {
                    bytes.extend_from_slice(&s[i].to_le_bytes());
                }
            }
        }
    }
    Ok(bytes)
}

pub fn write_ply(cloud: &PointCloud, path: &Path, format: PlyFormat) -> Result<(), CloudError> {
    let bytes = ply_bytes(cloud, format)?;
    std::fs::write(path, bytes).map_err(|source| CloudError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three() -> PointCloud {
        PointCloud::new(
            vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 2.0, 3.0), Point3::new(-1.0, -2.0, -3.0)],
            "three",
        )
    }

    #[test]
    fn binary_round_trip() {
        let mut c = three();
        c.points[0].x = 0.1 + 0.2;
        c.colors = Some(vec![[1, 2, 3], [255, 0, 7], [9, 9, 9]]);
        c.sources = Some(vec![0, 1, 4]);
        let back = parse_ply(&ply_bytes(&c, PlyFormat::BinaryLittleEndian).unwrap(), "x").unwrap();
        assert_eq!(back, c);
        for (a, b) in back.points.iter().zip(&c.points) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
        }
    }

    #[test]
    fn ascii_round_trip() {
        let mut c = three();
        c.points[1].y = std::f64::consts::PI * 1e-7;
        let back = parse_ply(&ply_bytes(&c, PlyFormat::Ascii).unwrap(), "x").unwrap();
        assert_eq!(back.points, c.points);
        assert_eq!(back.source_id, "three");
    }

    #[test]
    fn truncated_ascii_body() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n";
        assert!(matches!(parse_ply(text.as_bytes(), "t"), Err(CloudError::TruncatedBody(_))));
    }

    #[test]
    fn truncated_binary_body() {
        let mut bytes = ply_bytes(&three(), PlyFormat::BinaryLittleEndian).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(parse_ply(&bytes, "t"), Err(CloudError::TruncatedBody(_))));
    }

    #[test]
    fn extra_properties_and_elements_are_skipped() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nproperty float ny\nproperty float nz\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n1 2 3 0 0 1\n4 5 6 0 1 0\n3 0 1 1\n";
        let c = parse_ply(text.as_bytes(), "n").unwrap();
        assert_eq!(c.points, vec![Point3::new(1.0, 2.0, 3.0), Point3::new(4.0, 5.0, 6.0)]);
        assert!(c.colors.is_none());
    }

    #[test]
    fn float32_binary() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n".to_vec();
        for v in [1.5f32, -2.0, 0.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&[10, 20, 30]);
        let c = parse_ply(&bytes, "f").unwrap();
        assert_eq!(c.points[0], Point3::new(1.5, -2.0, 0.25));
        assert_eq!(c.colors.unwrap()[0], [10, 20, 30]);
    }

    #[test]
    fn malformed_headers() {
        for text in [
            "plx\nformat ascii 1.0\nend_header\n",
            "ply\nformat binary_big_endian 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty quad x\nend_header\n",
        ] {
            assert!(matches!(parse_ply(text.as_bytes(), "m"), Err(CloudError::MalformedHeader(_))), "{text}");
        }
    }
}
