//! Raw binary formats for projection stacks (`RAWP`), volumes (`RAWV`) and
//! Radon lookup tables (`RAWL`), plus 16-bit PGM slice export.
//!
//! Every raw file is one ASCII header line terminated by `\n`, followed by
//! little-endian `f32` values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::consistency::RadonLut;
use crate::geometry::DetectorSpec;
use crate::phantom::{Grid, ProjectionStack, Volume};
use crate::{Error, Result};

fn write_payload(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Splits a raw file into its header fields and payload.
fn read_raw(path: &Path, magic: &str, n_fields: usize) -> Result<(Vec<String>, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    r.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let fields: Vec<String> = header.split_whitespace().map(str::to_string).collect();
    if fields.first().map(String::as_str) != Some(magic) || fields.len() != n_fields + 1 {
        return Err(Error::format(
            path,
            format!("expected '{magic}' header with {n_fields} fields, got '{}'", header.trim_end()),
        ));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, "payload length is not a multiple of 4"));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((fields[1..].to_vec(), data))
}

fn parse<T: std::str::FromStr>(path: &Path, field: &str, name: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::format(path, format!("bad {name} '{field}'")))
}

fn check_len(path: &Path, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::format(path, format!("payload has {got} values, header implies {expected}")));
    }
    Ok(())
}

/// Header `RAWP n_views nv nu du dv`, view-major payload. The format has
/// no principal point, so only centered detectors can be stored.
pub fn write_stack(stack: &ProjectionStack, path: &Path) -> Result<()> {
    stack.validate()?;
    let d = stack.detector;
    if d != DetectorSpec::centered(d.nu, d.nv, d.du, d.dv) {
        return Err(Error::validation("detector", "RAWP stores centered detectors only"));
    }
    let mut w = create(path)?;
    (|| {
        writeln!(w, "RAWP {} {} {} {} {}", stack.n_views, d.nv, d.nu, d.du, d.dv)?;
        write_payload(&mut w, &stack.data)?;
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

pub fn read_stack(path: &Path) -> Result<ProjectionStack> {
    let (f, data) = read_raw(path, "RAWP", 5)?;
    let n_views: usize = parse(path, &f[0], "n_views")?;
    let nv: usize = parse(path, &f[1], "nv")?;
    let nu: usize = parse(path, &f[2], "nu")?;
    let du: f64 = parse(path, &f[3], "du")?;
    let dv: f64 = parse(path, &f[4], "dv")?;
    check_len(path, data.len(), n_views * nv * nu)?;
    let stack = ProjectionStack {
        detector: DetectorSpec::centered(nu, nv, du, dv),
        n_views,
        data,
    };
    stack.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(stack)
}

/// Header `RAWV nx ny nz sx sy sz ox oy oz`, z-major payload (`x` fastest).
/// The origin is the center of voxel `(0, 0, 0)` in mm.
pub fn write_volume(vol: &Volume, path: &Path) -> Result<()> {
    let g = vol.grid;
    g.validate()?;
    if vol.data.len() != g.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} voxels", g.len()),
            actual: format!("{}", vol.data.len()),
        });
    }
    let mut w = create(path)?;
    (|| {
        writeln!(
            w,
            "RAWV {} {} {} {} {} {} {} {} {}",
            g.nx, g.ny, g.nz, g.spacing[0], g.spacing[1], g.spacing[2], g.origin[0], g.origin[1], g.origin[2]
        )?;
        write_payload(&mut w, &vol.data)?;
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (f, data) = read_raw(path, "RAWV", 9)?;
    let grid = Grid {
        nx: parse(path, &f[0], "nx")?,
        ny: parse(path, &f[1], "ny")?,
        nz: parse(path, &f[2], "nz")?,
        spacing: [parse(path, &f[3], "sx")?, parse(path, &f[4], "sy")?, parse(path, &f[5], "sz")?],
        origin: [parse(path, &f[6], "ox")?, parse(path, &f[7], "oy")?, parse(path, &f[8], "oz")?],
    };
    grid.validate().map_err(|e| Error::format(path, e.to_string()))?;
    check_len(path, data.len(), grid.len())?;
    Ok(Volume { grid, data })
}

/// Header `RAWL n_views n_theta n_s`; tables in view order, each `theta`
/// major. Debug output only, there is no reader.
pub fn write_luts(luts: &[RadonLut], path: &Path) -> Result<()> {
    let first = luts
        .first()
        .ok_or_else(|| Error::validation("luts", "nothing to write"))?
        .grid;
    if luts.iter().any(|l| l.grid != first) {
        return Err(Error::validation("luts", "tables have different grids"));
    }
    let mut w = create(path)?;
    (|| {
        writeln!(w, "RAWL {} {} {}", luts.len(), first.n_theta, first.n_s)?;
        for lut in luts {
            write_payload(&mut w, &lut.values)?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

/// Linear gray mapping: `lo` maps to 0, `hi` to 65535, values outside
/// are clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    /// Window spanning the range of `values`; a constant image gets a
    /// unit-width window starting at its value.
    pub fn from_range(values: &[f32]) -> Self {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v as f64), b.max(v as f64)));
        if !(hi > lo) {
            let lo = if lo.is_finite() { lo } else { 0.0 };
            return Self { lo, hi: lo + 1.0 };
        }
        Self { lo, hi }
    }

    pub fn gray(&self, v: f32) -> u16 {
        let t = ((v as f64 - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        (t * 65535.0).round() as u16
    }
}

/// Binary 16-bit PGM (`P5`, maxval 65535, big-endian samples). Row 0 of
/// the image is `y` index 0.
pub fn write_pgm(image: &[f32], width: usize, window: Window, path: &Path) -> Result<()> {
    if width == 0 || image.len() % width != 0 {
        return Err(Error::validation("image", "length is not a multiple of the width"));
    }
    if !(window.hi > window.lo) {
        return Err(Error::validation("window", "hi must exceed lo"));
    }
    let height = image.len() / width;
    let mut w = create(path)?;
    (|| {
        write!(w, "P5\n{width} {height}\n65535\n")?;
        let mut buf = Vec::with_capacity(image.len() * 2);
        for &v in image {
            buf.extend_from_slice(&window.gray(v).to_be_bytes());
        }
        w.write_all(&buf)?;
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

/// Reads a 16-bit binary PGM written by [`write_pgm`]: `(width, height, samples)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(Error::format(path, "not a 16-bit binary PGM"));
    }
    let width: usize = parse(path, &fields[1], "width")?;
    let height: usize = parse(path, &fields[2], "height")?;
    let body = bytes.get(pos..).unwrap_or(&[]);
    check_len(path, body.len() / 2, width * height)?;
    let samples = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((width, height, samples))
}

/// Places equally sized images side by side.
pub fn tile_horizontal(images: &[&[f32]], width: usize) -> Result<Vec<f32>> {
    let len = images.first().map(|i| i.len()).unwrap_or(0);
    if width == 0 || len == 0 || len % width != 0 || images.iter().any(|i| i.len() != len) {
        return Err(Error::validation("images", "panels must be non-empty and equally sized"));
    }
    let height = len / width;
    let mut out = Vec::with_capacity(len * images.len());
    for y in 0..height {
        for img in images {
            out.extend_from_slice(&img[y * width..(y + 1) * width]);
        }
    }
    Ok(out)
}
