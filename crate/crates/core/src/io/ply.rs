//! PLY point cloud reader and writer (ASCII and binary little-endian).
//!
//! Only the `vertex` element is interpreted: `x`, `y`, `z` and, when present,
//! `red`, `green`, `blue`. Other elements and properties are parsed and skipped.

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::scene_model::{ScenePointCloud, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

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
    fn parse(name: &str) -> Result<Scalar> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(bad(format!("unknown property type `{other}`"))),
        })
    }

    fn read_le(self, r: &mut impl Read) -> Result<f64> {
        let mut buf = [0u8; 8];
        let n = match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        };
        r.read_exact(&mut buf[..n])
            .map_err(|e| bad(format!("truncated binary body: {e}")))?;
        Ok(match self {
            Scalar::I8 => buf[0] as i8 as f64,
            Scalar::U8 => buf[0] as f64,
            Scalar::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(buf),
        })
    }

    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
    }
}

#[derive(Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

fn bad(message: impl Into<String>) -> Error {
    Error::format("PLY", message)
}

fn read_header(r: &mut impl BufRead) -> Result<(PlyFormat, Vec<Element>)> {
    let mut line = String::new();
    let mut next_line = |line: &mut String| -> Result<()> {
        line.clear();
        let n = r.read_line(line).map_err(|e| bad(e.to_string()))?;
        if n == 0 {
            return Err(bad("unexpected end of header"));
        }
        Ok(())
    };
    next_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(bad("missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        next_line(&mut line)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(bad(format!("unsupported format `{other}`"))),
                })
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad(format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, _name] => elements
                .last_mut()
                .ok_or_else(|| bad("property before element"))?
                .props
                .push(Property::List {
                    count: Scalar::parse(count)?,
                    item: Scalar::parse(item)?,
                }),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| bad("property before element"))?
                .props
                .push(Property::Scalar {
                    name: name.to_string(),
                    ty: Scalar::parse(ty)?,
                }),
            _ => return Err(bad(format!("unrecognized header line `{}`", line.trim_end()))),
        }
    }
    Ok((format.ok_or_else(|| bad("missing format line"))?, elements))
}

/// Column indices of the vertex attributes we care about.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<([usize; 3], bool)>,
}

fn vertex_layout(el: &Element) -> Result<VertexLayout> {
    let find = |name: &str| {
        el.props
            .iter()
            .position(|p| matches!(p, Property::Scalar { name: n, .. } if n == name))
    };
    let xyz = [
        find("x").ok_or_else(|| bad("vertex has no `x`"))?,
        find("y").ok_or_else(|| bad("vertex has no `y`"))?,
        find("z").ok_or_else(|| bad("vertex has no `z`"))?,
    ];
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => {
            let integer = matches!(&el.props[r], Property::Scalar { ty, .. } if ty.is_integer());
            Some(([r, g, b], integer))
        }
        _ => None,
    };
    Ok(VertexLayout { xyz, rgb })
}

pub fn read_ply(mut r: impl BufRead) -> Result<ScenePointCloud> {
    let (format, elements) = read_header(&mut r)?;
    let mut positions = Vec::new();
    let mut colors: Option<Vec<[f32; 3]>> = None;
    let mut tokens = AsciiTokens::default();
    let mut seen_vertex = false;
    for el in &elements {
        let is_vertex = el.name == "vertex" && !seen_vertex;
        let layout = if is_vertex { Some(vertex_layout(el)?) } else { None };
        if is_vertex {
            seen_vertex = true;
            positions.reserve(el.count);
            if layout.as_ref().unwrap().rgb.is_some() {
                colors = Some(Vec::with_capacity(el.count));
            }
        }
        let mut row = vec![0.0f64; el.props.len()];
        for _ in 0..el.count {
            for (k, prop) in el.props.iter().enumerate() {
                match (prop, format) {
                    (Property::Scalar { ty, .. }, PlyFormat::BinaryLittleEndian) => row[k] = ty.read_le(&mut r)?,
                    (Property::Scalar { .. }, PlyFormat::Ascii) => row[k] = tokens.next_f64(&mut r)?,
                    (Property::List { count, item }, PlyFormat::BinaryLittleEndian) => {
                        let n = count.read_le(&mut r)? as usize;
                        for _ in 0..n {
                            item.read_le(&mut r)?;
                        }
                    }
                    (Property::List { .. }, PlyFormat::Ascii) => {
                        let n = tokens.next_f64(&mut r)? as usize;
                        for _ in 0..n {
                            tokens.next_f64(&mut r)?;
                        }
                    }
                }
            }
            if let Some(layout) = &layout {
                positions.push(Vec3::new(row[layout.xyz[0]], row[layout.xyz[1]], row[layout.xyz[2]]));
                if let (Some((rgb, integer)), Some(colors)) = (&layout.rgb, colors.as_mut()) {
                    let channel = |v: f64| if *integer { v as f32 / 255.0 } else { v as f32 };
                    colors.push([channel(row[rgb[0]]), channel(row[rgb[1]]), channel(row[rgb[2]])]);
                }
            }
        }
        if is_vertex {
            break;
        }
    }
    if !seen_vertex {
        return Err(bad("file has no vertex element"));
    }
    ScenePointCloud::new(positions, colors)
}

#[derive(Default)]
struct AsciiTokens {
    pending: std::collections::VecDeque<String>,
}

impl AsciiTokens {
    fn next_f64(&mut self, r: &mut impl BufRead) -> Result<f64> {
        while self.pending.is_empty() {
            let mut line = String::new();
            if r.read_line(&mut line).map_err(|e| bad(e.to_string()))? == 0 {
                return Err(bad("truncated ASCII body"));
            }
            self.pending.extend(line.split_whitespace().map(str::to_string));
        }
        let t = self.pending.pop_front().unwrap();
        t.parse().map_err(|_| bad(format!("bad number `{t}`")))
    }
}

/// Write positions as doubles and, when present, colors as 8-bit channels.
pub fn write_ply(mut w: impl Write, cloud: &ScenePointCloud, format: PlyFormat) -> Result<()> {
    let io = |e: std::io::Error| bad(e.to_string());
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(w, "ply\nformat {fmt} 1.0\nelement vertex {}\n", cloud.len()).map_err(io)?;
    w.write_all(b"property double x\nproperty double y\nproperty double z\n")
        .map_err(io)?;
    if cloud.colors.is_some() {
        w.write_all(b"property uchar red\nproperty uchar green\nproperty uchar blue\n")
            .map_err(io)?;
    }
    w.write_all(b"end_header\n").map_err(io)?;
    let to_u8 = |c: f32| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (i, p) in cloud.positions.iter().enumerate() {
        let rgb = cloud.colors.as_ref().map(|c| c[i].map(to_u8));
        match format {
            PlyFormat::Ascii => {
                write!(w, "{} {} {}", p.x, p.y, p.z).map_err(io)?;
                if let Some([r, g, b]) = rgb {
                    write!(w, " {r} {g} {b}").map_err(io)?;
                }
                w.write_all(b"\n").map_err(io)?;
            }
            PlyFormat::BinaryLittleEndian => {
                for c in p.iter() {
                    w.write_all(&c.to_le_bytes()).map_err(io)?;
                }
                if let Some(rgb) = rgb {
                    w.write_all(&rgb).map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roundtrip(cloud: &ScenePointCloud, format: PlyFormat) -> ScenePointCloud {
        let mut buf = Vec::new();
        write_ply(&mut buf, cloud, format).unwrap();
        read_ply(&buf[..]).unwrap()
    }

    #[test]
    fn reads_foreign_layouts() {
        let text = "ply\nformat ascii 1.0\ncomment made elsewhere\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nproperty float intensity\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 1 2 255 0 0 0.5\n3 4 5 0 255 0 0.1\n3 0 1 1\n";
        let c = read_ply(text.as_bytes()).unwrap();
        assert_eq!(c.positions[1], Vec3::new(3.0, 4.0, 5.0));
        assert_eq!(c.colors.unwrap()[0], [1.0, 0.0, 0.0]);

        // Binary body with a face element declared before the vertices.
        let mut bin = b"ply\nformat binary_little_endian 1.0\nelement face 1\nproperty list uchar int vertex_indices\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
        bin.push(2);
        bin.extend(7i32.to_le_bytes());
        bin.extend(8i32.to_le_bytes());
        for v in [1.5f32, -2.0, 0.25] {
            bin.extend(v.to_le_bytes());
        }
        let c = read_ply(&bin[..]).unwrap();
        assert_eq!(c.positions, vec![Vec3::new(1.5, -2.0, 0.25)]);
        assert!(c.colors.is_none());
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(read_ply(&b"plx\n"[..]).is_err());
        assert!(read_ply(&b"ply\nformat binary_big_endian 1.0\nend_header\n"[..]).is_err());
        assert!(read_ply(&b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n"[..]).is_err());
        assert!(read_ply(&b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n"[..]).is_err());
    }

    proptest! {
        #[test]
        fn write_then_read_is_identity(
            pts in prop::collection::vec((-1e3..1e3f64, -1e3..1e3f64, -1e3..1e3f64, 0u8..=255, 0u8..=255, 0u8..=255), 1..40),
            binary in any::<bool>(),
            with_color in any::<bool>(),
        ) {
            let cloud = ScenePointCloud::new(
                pts.iter().map(|(x, y, z, ..)| Vec3::new(*x, *y, *z)).collect(),
                with_color.then(|| pts.iter().map(|(.., r, g, b)| [*r as f32 / 255.0, *g as f32 / 255.0, *b as f32 / 255.0]).collect()),
            ).unwrap();
            let format = if binary { PlyFormat::BinaryLittleEndian } else { PlyFormat::Ascii };
            prop_assert_eq!(roundtrip(&cloud, format), cloud);
        }
    }
}
