//! Portable float map I/O.
//!
//! Writes little-endian (`-1.0` scale), bottom-up rows. INVALID map entries
//! are stored as `+inf` and read back as INVALID.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Dims;
use crate::stereo::{DepthMap, DisparityMap, ScalarMap};

/// Decoded PFM contents, rows top-down.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Pfm {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let tag = if self.channels == 3 { "PF" } else { "Pf" };
        write!(w, "{tag}\n{} {}\n-1.0\n", self.width, self.height)?;
        let stride = self.width * self.channels;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for row in (0..self.height).rev() {
            for x in &self.data[row * stride..(row + 1) * stride] {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut header = Vec::new();
        // Header is three whitespace-separated tokens after the magic.
        let mut tokens: Vec<String> = Vec::new();
        while tokens.len() < 4 {
            header.clear();
            let n = r.read_until(b'\n', &mut header)?;
            if n == 0 {
                return Err(Error::format("PFM", "truncated header"));
            }
            let line = std::str::from_utf8(&header).map_err(|_| Error::format("PFM", "non-ASCII header"))?;
            tokens.extend(line.split_whitespace().map(str::to_owned));
        }
        let channels = match tokens[0].as_str() {
            "Pf" => 1,
            "PF" => 3,
            other => return Err(Error::format("PFM", format!("bad magic {other:?}"))),
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format("PFM", format!("bad dimension {s:?}")))
        };
        let width = parse(&tokens[1])?;
        let height = parse(&tokens[2])?;
        let scale: f32 = tokens[3]
            .parse()
            .map_err(|_| Error::format("PFM", format!("bad scale {:?}", tokens[3])))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::format("PFM", "scale must be nonzero"));
        }
        let little = scale < 0.0;
        let n = width * height * channels;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::format("PFM", "truncated pixel data"))?;
        let stride = width * channels;
        let mut data = vec![0.0f32; n];
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let x = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            let (row, col) = (i / stride, i % stride);
            data[(height - 1 - row) * stride + col] = x;
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }

    pub fn from_map(map: &ScalarMap) -> Self {
        let dims = map.dims();
        Self {
            width: dims.width,
            height: dims.height,
            channels: 1,
            data: map
                .values()
                .iter()
                .map(|&x| if x >= 0.0 && x.is_finite() { x } else { f32::INFINITY })
                .collect(),
        }
    }

    fn map_values(&self) -> Result<(Dims, Vec<f32>)> {
        if self.channels != 1 {
            return Err(Error::format("PFM", "expected a single-channel map"));
        }
        let dims = Dims::new(self.width, self.height)?;
        let values = self
            .data
            .iter()
            .map(|&x| {
                if x.is_finite() && x >= 0.0 {
                    x
                } else {
                    ScalarMap::INVALID
                }
            })
            .collect();
        Ok((dims, values))
    }

    pub fn to_depth(&self) -> Result<DepthMap> {
        let (dims, values) = self.map_values()?;
        DepthMap::from_values(dims, values)
    }

    pub fn to_disparity(&self) -> Result<DisparityMap> {
        let (dims, values) = self.map_values()?;
        DisparityMap::from_values(dims, values)
    }
}

pub fn save_depth(depth: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    Pfm::from_map(depth).save(path)
}

pub fn load_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    Pfm::load(path)?.to_depth()
}
