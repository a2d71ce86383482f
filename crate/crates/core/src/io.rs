//! File formats: PFM for float imagery, binary PGM for labels, CSV and JSON
//! for tables and structured results.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::learn::PolicyParams;
use crate::map::{same_dims, DepthMap, LabelMap, NormalMap};
use crate::metrics::{MetricsReport, TraceRow};
use crate::refine::{Anchor, AnchorSet};

/// A float image in top-to-bottom row order, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PfmImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Pfm(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::LengthMismatch {
                expected: width * height * channels,
                found: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::Pfm(format!("non-finite value {bad}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn from_scalars(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        Self::new(width, height, 1, values.iter().map(|&x| x as f32).collect())
    }

    pub fn from_depth(depth: &DepthMap) -> Result<Self> {
        Self::from_scalars(depth.width(), depth.height(), depth.values())
    }

    pub fn from_normals(nmap: &NormalMap) -> Result<Self> {
        let data = nmap
            .normals()
            .iter()
            .flat_map(|n| [n.x as f32, n.y as f32, n.z as f32])
            .collect();
        Self::new(nmap.width(), nmap.height(), 3, data)
    }

    pub fn from_kappa(nmap: &NormalMap) -> Result<Self> {
        Self::from_scalars(nmap.width(), nmap.height(), nmap.kappa())
    }

    fn expect_channels(&self, channels: usize) -> Result<()> {
        if self.channels != channels {
            return Err(Error::Pfm(format!(
                "expected {channels} channel(s), found {}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn to_scalars(&self) -> Result<Vec<f64>> {
        self.expect_channels(1)?;
        Ok(self.data.iter().map(|&x| x as f64).collect())
    }

    pub fn to_depth(&self) -> Result<DepthMap> {
        DepthMap::new(self.width, self.height, self.to_scalars()?)
    }

    /// Normals are renormalized after widening to f64. `kappa` defaults to
    /// one everywhere.
    pub fn to_normals(&self, kappa: Option<&PfmImage>) -> Result<NormalMap> {
        self.expect_channels(3)?;
        let normals = self
            .data
            .chunks_exact(3)
            .map(|c| {
                let n = Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64);
                let norm = n.norm();
                if norm == 0.0 {
                    Err(Error::NonUnitNormal(0.0))
                } else {
                    Ok(n / norm)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let kappa = match kappa {
            Some(k) => {
                same_dims(self.dims(), k.dims())?;
                k.to_scalars()?
            }
            None => vec![1.0; self.width * self.height],
        };
        NormalMap::new(self.width, self.height, normals, kappa)
    }
}

/// Encode as little-endian PFM (negative scale), rows bottom to top.
pub fn encode_pfm(img: &PfmImage) -> Vec<u8> {
    let tag = if img.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row_len = img.width * img.channels;
    out.reserve(img.data.len() * 4);
    if row_len > 0 {
        for row in img.data.chunks_exact(row_len).rev() {
            for x in row {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Pfm("unexpected end of header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Pfm("header is not ASCII".into()))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<PfmImage> {
    let mut pos = 0;
    let channels = match header_token(bytes, &mut pos)? {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::Pfm(format!("unknown magic '{other}'"))),
    };
    let mut dim = |what: &str| -> Result<usize> {
        let tok = header_token(bytes, &mut pos)?;
        tok.parse()
            .map_err(|_| Error::Pfm(format!("invalid {what} '{tok}'")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let tok = header_token(bytes, &mut pos)?;
    let scale: f64 = tok
        .parse()
        .map_err(|_| Error::Pfm(format!("invalid scale '{tok}'")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Pfm(format!("invalid scale '{tok}'")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Pfm("missing separator after scale".into()));
    }
    pos += 1;
    let payload = &bytes[pos..];
    let expected = width * height * channels * 4;
    if payload.len() != expected {
        return Err(Error::Pfm(format!(
            "payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let little = scale < 0.0;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let row_len = width * channels;
    let mut data = Vec::with_capacity(values.len());
    if row_len > 0 {
        for row in values.chunks_exact(row_len).rev() {
            data.extend_from_slice(row);
        }
    }
    PfmImage::new(width, height, channels, data)
}

pub fn read_pfm(path: &Path) -> Result<PfmImage> {
    decode_pfm(&fs::read(path)?)
}

pub fn write_pfm(path: &Path, img: &PfmImage) -> Result<()> {
    fs::write(path, encode_pfm(img))?;
    Ok(())
}

/// Binary PGM; 8-bit when every label fits, otherwise 16-bit big-endian.
pub fn encode_pgm(labels: &LabelMap) -> Result<Vec<u8>> {
    let max = labels.labels().iter().copied().max().unwrap_or(0);
    if max > u16::MAX as u32 {
        return Err(Error::Pgm(format!("label {max} exceeds 16 bits")));
    }
    let maxval = if max <= 255 { 255 } else { 65535 };
    let mut out = format!("P5\n{} {}\n{maxval}\n", labels.width(), labels.height()).into_bytes();
    for &l in labels.labels() {
        if maxval == 255 {
            out.push(l as u8);
        } else {
            out.extend_from_slice(&(l as u16).to_be_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let mut pos = 0;
    let mut token = || -> Result<&str> {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Pgm("unexpected end of header".into()));
        }
        std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Pgm("header is not ASCII".into()))
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(Error::Pgm(format!("unsupported magic '{magic}'")));
    }
    let mut number = |what: &str| -> Result<usize> {
        let tok = token()?;
        tok.parse().map_err(|_| Error::Pgm(format!("invalid {what} '{tok}'")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Pgm(format!("invalid maxval {maxval}")));
    }
    pos += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let payload = bytes.get(pos..).unwrap_or_default();
    let expected = width * height * bpp;
    if payload.len() != expected {
        return Err(Error::Pgm(format!(
            "payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let labels = if bpp == 1 {
        payload.iter().map(|&b| b as u32).collect()
    } else {
        payload
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as u32)
            .collect()
    };
    LabelMap::new(width, height, labels)
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(labels)?)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct AnchorRecord {
    u: i64,
    v: i64,
    depth: f64,
}

/// Anchors from a `u,v,depth` CSV. Errors name the 1-based data row.
pub fn read_anchors(path: &Path, dims: (usize, usize)) -> Result<AnchorSet> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut anchors = Vec::new();
    for (index, record) in reader.deserialize::<AnchorRecord>().enumerate() {
        let row = index + 1;
        let r = record.map_err(|e| Error::CsvRow {
            row,
            message: e.to_string(),
        })?;
        if r.u < 0 || r.v < 0 || r.u >= dims.0 as i64 || r.v >= dims.1 as i64 {
            return Err(Error::CsvRow {
                row,
                message: format!("anchor ({}, {}) outside {}x{} image", r.u, r.v, dims.0, dims.1),
            });
        }
        anchors.push(Anchor {
            u: r.u as usize,
            v: r.v as usize,
            depth: r.depth,
        });
    }
    AnchorSet::new(anchors, dims).map_err(|e| match e {
        Error::InvalidAnchor { index, reason, .. } => Error::CsvRow {
            row: index + 1,
            message: reason,
        },
        other => other,
    })
}

pub fn write_anchors(path: &Path, anchors: &AnchorSet) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["u", "v", "depth"])?;
    for a in anchors.iter() {
        w.serialize(a)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["iteration", "rmse", "abs_rel", "mean_normal_error_deg"])?;
    }
    w.flush()?;
    Ok(())
}

/// Metrics table with caller-chosen leading key columns.
pub fn write_metrics_csv(path: &Path, key_names: &[&str], rows: &[(Vec<String>, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = key_names.to_vec();
    header.extend(MetricsReport::csv_header());
    w.write_record(&header)?;
    for (keys, report) in rows {
        if keys.len() != key_names.len() {
            return Err(Error::LengthMismatch {
                expected: key_names.len(),
                found: keys.len(),
            });
        }
        let mut record = keys.clone();
        record.extend(report.csv_row());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct LossRecord {
    epoch: usize,
    loss: f64,
}

pub fn write_training_log(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if losses.is_empty() {
        w.write_record(["epoch", "loss"])?;
    }
    for (epoch, &loss) in losses.iter().enumerate() {
        w.serialize(LossRecord { epoch, loss })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_params(path: &Path) -> Result<PolicyParams> {
    read_json(path)
}
