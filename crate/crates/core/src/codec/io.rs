//! `GIVVID1` arrays and PPM/PGM frame directories.
//!
//! A `GIVVID1` file is the 7-byte magic, four `u64` little-endian dims
//! `(F, C, H, W)` and then `F·C·H·W` little-endian `f32` values, frame-major.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Mask, Video};
use crate::error::{Error, Result};

pub const VIDEO_MAGIC: &[u8; 7] = b"GIVVID1";

/// A raw `F × C × H × W` array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct GivvidArray {
    pub dims: [usize; 4],
    pub data: Vec<f32>,
}

impl GivvidArray {
    pub fn into_video(self, path: &Path) -> Result<Video> {
        let [f, c, h, w] = self.dims;
        if c != 3 {
            return Err(Error::format(path, format!("expected 3 channels, found {c}")));
        }
        Video::new(f, h, w, self.data)
    }

    pub fn into_mask(self, path: &Path) -> Result<Mask> {
        let [f, c, h, w] = self.dims;
        if c != 1 {
            return Err(Error::format(path, format!("expected 1 channel, found {c}")));
        }
        Mask::new(f, h, w, self.data)
    }
}

impl From<&Video> for GivvidArray {
    fn from(v: &Video) -> Self {
        Self {
            dims: [v.frames(), 3, v.height(), v.width()],
            data: v.data().to_vec(),
        }
    }
}

impl From<&Mask> for GivvidArray {
    fn from(m: &Mask) -> Self {
        Self {
            dims: [m.frames(), 1, m.height(), m.width()],
            data: m.data().to_vec(),
        }
    }
}

pub fn write_givvid(path: &Path, array: &GivvidArray) -> Result<()> {
    let mut buf = Vec::with_capacity(7 + 32 + 4 * array.data.len());
    buf.extend_from_slice(VIDEO_MAGIC);
    for d in array.dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &array.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_givvid(path: &Path) -> Result<GivvidArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 39 || &bytes[..7] != VIDEO_MAGIC {
        return Err(Error::format(path, "missing GIVVID1 header"));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 7 + 8 * i;
        *d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format(path, "dims overflow"))?;
    let body = &bytes[39..];
    if Some(body.len()) != n.checked_mul(4) {
        return Err(Error::format(
            path,
            format!("dims {dims:?} need {n} values, file holds {} bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(GivvidArray { dims, data })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn frame_name(k: usize, ext: &str) -> String {
    format!("frame_{k:04}.{ext}")
}

/// Writes each frame as `frame_NNNN.ppm` (3 channels) or `.pgm` (1 channel).
pub fn write_pnm_dir(dir: &Path, array: &GivvidArray) -> Result<()> {
    let [f, c, h, w] = array.dims;
    let (magic, ext) = match c {
        3 => ("P6", "ppm"),
        1 => ("P5", "pgm"),
        _ => return Err(Error::format(dir, format!("cannot write {c}-channel frames"))),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plane = h * w;
    for k in 0..f {
        let frame = &array.data[k * c * plane..(k + 1) * c * plane];
        let mut buf = format!("{magic}\n{w} {h}\n255\n").into_bytes();
        for p in 0..plane {
            for ch in 0..c {
                buf.push(quantize(frame[ch * plane + p]));
            }
        }
        let path = dir.join(frame_name(k, ext));
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Header tokens of a binary PNM file, skipping `#` comments.
fn pnm_header(bytes: &[u8], path: &Path) -> Result<(String, usize, usize, usize, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated PNM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    i += 1;
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad PNM header field {s:?}")))
    };
    Ok((
        tokens[0].clone(),
        num(&tokens[1])?,
        num(&tokens[2])?,
        num(&tokens[3])?,
        i,
    ))
}

fn sorted_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Reads a directory of 8-bit PPM or PGM frames in lexicographic order.
pub fn read_pnm_dir(dir: &Path) -> Result<GivvidArray> {
    let paths = sorted_frames(dir)?;
    if paths.is_empty() {
        return Err(Error::format(dir, "no .ppm or .pgm frames"));
    }
    let mut dims: Option<[usize; 4]> = None;
    let mut data = Vec::new();
    for path in &paths {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (magic, w, h, maxval, start) = pnm_header(&bytes, path)?;
        let c = match magic.as_str() {
            "P6" => 3,
            "P5" => 1,
            other => return Err(Error::format(path, format!("unsupported PNM kind {other}"))),
        };
        if maxval == 0 || maxval > 255 {
            return Err(Error::format(path, format!("unsupported maxval {maxval}")));
        }
        let plane = w * h;
        let raster = bytes
            .get(start..start + plane * c)
            .ok_or_else(|| Error::format(path, "truncated raster"))?;
        match dims {
            None => dims = Some([0, c, h, w]),
            Some([_, c0, h0, w0]) if (c0, h0, w0) != (c, h, w) => {
                return Err(Error::format(path, "frame size differs from the first frame"));
            }
            _ => {}
        }
        let scale = maxval as f32;
        for ch in 0..c {
            for p in 0..plane {
                data.push(raster[p * c + ch] as f32 / scale);
            }
        }
    }
    let mut dims = dims.expect("at least one frame");
    dims[0] = paths.len();
    Ok(GivvidArray { dims, data })
}
