//! PLY point-cloud files (ASCII and binary little-endian).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ply(cloud: &PointCloud, format: PlyFormat, mut w: impl Write) -> Result<()> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let colors = cloud.colors.as_deref();
    write!(w, "ply\nformat {fmt} 1.0\nelement vertex {}\n", cloud.len())?;
    write!(w, "property float x\nproperty float y\nproperty float z\n")?;
    if colors.is_some() {
        write!(w, "property uchar red\nproperty uchar green\nproperty uchar blue\n")?;
    }
    writeln!(w, "end_header")?;
    match format {
        PlyFormat::Ascii => {
            for (i, p) in cloud.points.iter().enumerate() {
                write!(w, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
                if let Some(c) = colors {
                    let c = c[i].map(to_u8);
                    write!(w, " {} {} {}", c[0], c[1], c[2])?;
                }
                writeln!(w)?;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut buf = Vec::with_capacity(cloud.len() * 15);
            for (i, p) in cloud.points.iter().enumerate() {
                for x in [p.x, p.y, p.z] {
                    buf.extend_from_slice(&(x as f32).to_le_bytes());
                }
                if let Some(c) = colors {
                    buf.extend(c[i].map(to_u8));
                }
            }
            w.write_all(&buf)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_ply(cloud: &PointCloud, format: PlyFormat, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_ply(cloud, format, std::io::BufWriter::new(f))
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("PLY", reason)
}

/// Reads the vertex element; extra vertex properties are ignored.
pub fn read_ply(r: impl Read) -> Result<PointCloud> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let next_line = |r: &mut BufReader<_>, line: &mut String| -> Result<()> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(bad("truncated header"));
        }
        Ok(())
    };
    next_line(&mut r, &mut line)?;
    if line.trim() != "ply" {
        return Err(bad("missing magic"));
    }
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    loop {
        next_line(&mut r, &mut line)?;
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, _] => return Err(bad(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                if count.is_some() {
                    return Err(bad("only a single vertex element is supported"));
                }
                in_vertex = *name == "vertex";
                if !in_vertex {
                    return Err(bad(format!("unsupported element {name}")));
                }
                count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
            }
            ["property", "list", ..] => return Err(bad("list properties are not supported")),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown type {ty}")))?;
                props.push((name.to_string(), s));
            }
            _ => return Err(bad(format!("unexpected header line {:?}", line.trim()))),
        }
    }
    let format = format.ok_or_else(|| bad("missing format"))?;
    let count = count.ok_or_else(|| bad("missing vertex element"))?;
    let find = |n: &str| props.iter().position(|(p, _)| p == n);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(bad("vertex needs x, y, z")),
    };
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    match format {
        PlyFormat::Ascii => {
            let mut rest = String::new();
            r.read_to_string(&mut rest)?;
            let mut tokens = rest.split_whitespace();
            for _ in 0..count {
                let mut row = Vec::with_capacity(props.len());
                for _ in 0..props.len() {
                    let tok = tokens.next().ok_or_else(|| bad("truncated vertex data"))?;
                    row.push(tok.parse::<f64>().map_err(|_| bad(format!("bad value {tok:?}")))?);
                }
                rows.push(row);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
            let mut bytes = vec![0u8; stride * count];
            r.read_exact(&mut bytes).map_err(|_| bad("truncated vertex data"))?;
            for chunk in bytes.chunks_exact(stride) {
                let mut off = 0;
                let row = props
                    .iter()
                    .map(|(_, s)| {
                        let v = s.read_le(&chunk[off..off + s.size()]);
                        off += s.size();
                        v
                    })
                    .collect();
                rows.push(row);
            }
        }
    }
    let points = rows.iter().map(|r| Vector3::new(r[ix], r[iy], r[iz])).collect();
    let colors = rgb.map(|[a, b, c]| {
        rows.iter()
            .map(|r| [(r[a] / 255.0) as f32, (r[b] / 255.0) as f32, (r[c] / 255.0) as f32])
            .collect()
    });
    Ok(PointCloud {
        points,
        colors,
        capture_index: vec![0; count],
    })
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    read_ply(std::fs::File::open(path)?)
}
