//! Grayscale image codecs (binary PGM and 8-bit PNG) and the SLPF float-grid dump format.

use std::io::{Cursor, Read, Write};

use crate::error::{Error, Result};
use crate::grid::Grid;

const SLPF_MAGIC: &[u8; 4] = b"SLPF";

/// Quantizes a `[0,1]` grid to 8-bit with round-half-up and clamping.
pub fn quantize(grid: &Grid) -> Vec<u8> {
    grid.data()
        .iter()
        .map(|&v| {
            let v = if v.is_finite() { v } else { 0.0 };
            (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
        })
        .collect()
}

pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Grid> {
    Grid::from_vec(
        height,
        width,
        bytes.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

pub fn encode_pgm(grid: &Grid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(quantize(grid));
    out
}

fn pgm_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Decode("truncated PGM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Grid> {
    let mut pos = 0;
    if pgm_token(bytes, &mut pos)? != "P5" {
        return Err(Error::Decode("not a binary PGM".into()));
    }
    let parse = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::Decode(format!("bad PGM header field {s:?}")))
    };
    let width = parse(pgm_token(bytes, &mut pos)?)?;
    let height = parse(pgm_token(bytes, &mut pos)?)?;
    let maxval = parse(pgm_token(bytes, &mut pos)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Decode(format!("unsupported PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    if width == 0 || height == 0 || bytes.len() < pos + n {
        return Err(Error::Decode("truncated PGM raster".into()));
    }
    let scale = maxval as f64;
    Grid::from_vec(
        height,
        width,
        bytes[pos..pos + n].iter().map(|&b| b as f64 / scale).collect(),
    )
}

pub fn decode_png(bytes: &[u8]) -> Result<Grid> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Decode(e.to_string()))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Decode(format!(
                "expected 8-bit grayscale PNG, got {:?}",
                other.color()
            )))
        }
    };
    from_bytes(
        gray.height() as usize,
        gray.width() as usize,
        gray.as_raw(),
    )
}

pub fn encode_png(grid: &Grid) -> Result<Vec<u8>> {
    let buf = image::GrayImage::from_raw(grid.width() as u32, grid.height() as u32, quantize(grid))
        .ok_or_else(|| Error::Dimension("raster size".into()))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Decode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Decodes either accepted format, sniffing the magic bytes.
pub fn decode(bytes: &[u8]) -> Result<Grid> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else {
        Err(Error::Decode("unrecognized image format (PNG or P5 PGM expected)".into()))
    }
}

/// Writes a displacement field as `SLPF`: magic, u32 H, u32 W, f32 u-grid, f32 v-grid (LE).
pub fn encode_slpf(u: &Grid, v: &Grid) -> Result<Vec<u8>> {
    u.check_same(v)?;
    let mut out = Vec::with_capacity(12 + 8 * u.data().len());
    out.write_all(SLPF_MAGIC)?;
    out.write_all(&(u.height() as u32).to_le_bytes())?;
    out.write_all(&(u.width() as u32).to_le_bytes())?;
    for g in [u, v] {
        for &x in g.data() {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(out)
}

pub fn decode_slpf(bytes: &[u8]) -> Result<(Grid, Grid)> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SLPF_MAGIC {
        return Err(Error::Decode("bad SLPF magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let h = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let w = u32::from_le_bytes(word) as usize;
    let mut grids = Vec::with_capacity(2);
    for _ in 0..2 {
        let mut data = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            r.read_exact(&mut word)?;
            data.push(f32::from_le_bytes(word) as f64);
        }
        grids.push(Grid::from_vec(h, w, data)?);
    }
    let v = grids.pop().unwrap();
    let u = grids.pop().unwrap();
    Ok((u, v))
}
