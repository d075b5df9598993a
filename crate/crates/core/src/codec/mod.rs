//! Invertible stand-in for a 3D video VAE.
//!
//! A video of `F` frames is packed into `f = (F - 1) / tf + 1` latent frames:
//! frame 0 alone, then consecutive groups of `tf` frames. Within a latent
//! frame every `sf × sf` pixel patch of every frame in the group becomes one
//! latent cell (space-to-depth), giving `3·sf²·tf` channels. Frame 0 is
//! replicated across its group so every latent frame has the same layout.
//!
//! Pixel values `p` in `[0, 1]` map to `2(p - 0.5)` in `[-1, 1]`. The map and
//! its inverse are exact for every `p >= 0.25` and for every `p` on the
//! `2^-25` lattice, which includes every multiple of `2^-16`.

mod io;
mod media;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_givvid, read_pnm_dir, write_givvid, write_pnm_dir, GivvidArray, VIDEO_MAGIC};
pub use media::{LatentBlock, Mask, Video};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecMode {
    /// Pure rearrangement; `channels` must equal `3·sf²·tf`.
    LosslessPacking,
    /// Packing followed by a fixed orthonormal projection to `channels`.
    Projected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub spatial_factor: usize,
    pub temporal_factor: usize,
    pub channels: usize,
    pub mode: CodecMode,
    /// Seeds the projection matrix in projected mode.
    #[serde(default)]
    pub projection_seed: u64,
}

impl CodecConfig {
    pub fn lossless(spatial_factor: usize, temporal_factor: usize) -> Self {
        Self {
            spatial_factor,
            temporal_factor,
            channels: 3 * spatial_factor * spatial_factor * temporal_factor,
            mode: CodecMode::LosslessPacking,
            projection_seed: 0,
        }
    }

    /// 2×2 spatial, 2× temporal, 24 channels.
    pub fn desk() -> Self {
        Self::lossless(2, 2)
    }

    /// The production compression ratios: 8× spatial, 4× temporal, 16
    /// channels. Only expressible in projected mode.
    pub fn production() -> Self {
        Self {
            spatial_factor: 8,
            temporal_factor: 4,
            channels: 16,
            mode: CodecMode::Projected,
            projection_seed: 0,
        }
    }

    /// Values per latent cell before any projection.
    pub fn packed_channels(&self) -> usize {
        3 * self.spatial_factor * self.spatial_factor * self.temporal_factor
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial_factor == 0 || self.temporal_factor == 0 || self.channels == 0 {
            return Err(Error::Config("codec factors and channels must be positive".into()));
        }
        match self.mode {
            CodecMode::LosslessPacking if self.channels != self.packed_channels() => Err(Error::Config(format!(
                "lossless packing needs {} channels, config has {}",
                self.packed_channels(),
                self.channels
            ))),
            CodecMode::Projected if self.channels > self.packed_channels() => Err(Error::Config(format!(
                "projection cannot widen {} packed channels to {}",
                self.packed_channels(),
                self.channels
            ))),
            _ => Ok(()),
        }
    }
}

/// Latent dimensions `(f, c, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentShape {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// `f = ceil((F-1)/tf) + 1`, `h = H/sf`, `w = W/sf`.
///
/// Frame counts with `(F-1)` not divisible by `tf` are rejected rather than
/// padded.
pub fn latent_shape(frames: usize, height: usize, width: usize, cfg: &CodecConfig) -> Result<LatentShape> {
    cfg.validate()?;
    if frames == 0 {
        return Err(Error::Shape {
            axis: "frame",
            detail: "video has no frames".into(),
        });
    }
    if !(frames - 1).is_multiple_of(cfg.temporal_factor) {
        return Err(Error::Shape {
            axis: "frame",
            detail: format!(
                "{frames} frames: (F-1) is not divisible by temporal factor {}",
                cfg.temporal_factor
            ),
        });
    }
    for (axis, len) in [("height", height), ("width", width)] {
        if len == 0 || len % cfg.spatial_factor != 0 {
            return Err(Error::Shape {
                axis,
                detail: format!("{len} is not divisible by spatial factor {}", cfg.spatial_factor),
            });
        }
    }
    Ok(LatentShape {
        frames: (frames - 1).div_ceil(cfg.temporal_factor) + 1,
        channels: cfg.channels,
        height: height / cfg.spatial_factor,
        width: width / cfg.spatial_factor,
    })
}

/// Inverse of [`latent_shape`]'s frame law.
pub fn video_frames(latent_frames: usize, cfg: &CodecConfig) -> usize {
    (latent_frames - 1) * cfg.temporal_factor + 1
}

#[inline]
fn to_latent(p: f32) -> f32 {
    (p - 0.5) * 2.0
}

#[inline]
fn to_pixel(z: f32) -> f32 {
    z * 0.5 + 0.5
}

/// Source video frame for slot `tt` of latent frame `lf`.
#[inline]
fn source_frame(lf: usize, tt: usize, tf: usize) -> usize {
    if lf == 0 {
        0
    } else {
        1 + (lf - 1) * tf + tt
    }
}

/// Fixed linear maps of projected mode, row-major `f64`.
struct Projection {
    /// `channels × packed`, orthonormal rows.
    rows: Vec<f64>,
    /// `(3·sf²) × channels`: pseudo-inverse of the projection applied to a
    /// replicated first frame.
    first_inverse: Vec<f64>,
}

impl Projection {
    fn new(cfg: &CodecConfig) -> Self {
        let d = cfg.packed_channels();
        let c = cfg.channels;
        let per_frame = d / cfg.temporal_factor;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.projection_seed);
        let g = DMatrix::<f64>::from_fn(d, c, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        let p = DMatrix::<f64>::from_fn(c, d, |k, j| q[(j, k)]);
        let replicated = DMatrix::<f64>::from_fn(c, per_frame, |k, j| {
            (0..cfg.temporal_factor).map(|t| p[(k, t * per_frame + j)]).sum()
        });
        let pinv = replicated
            .pseudo_inverse(1e-12)
            .expect("pseudo-inverse of a finite matrix");
        Self {
            rows: p.transpose().as_slice().to_vec(),
            first_inverse: pinv.transpose().as_slice().to_vec(),
        }
    }
}

/// Packs one latent cell's `3·sf²·tf` values in channel order.
fn pack_cell(v: &Video, lf: usize, y: usize, x: usize, cfg: &CodecConfig, cell: &mut [f32]) {
    let (sf, tf) = (cfg.spatial_factor, cfg.temporal_factor);
    let mut i = 0;
    for tt in 0..tf {
        let frame = source_frame(lf, tt, tf);
        for ch in 0..3 {
            for dy in 0..sf {
                for dx in 0..sf {
                    cell[i] = to_latent(v.get(frame, ch, y * sf + dy, x * sf + dx));
                    i += 1;
                }
            }
        }
    }
}

pub fn encode(v: &Video, cfg: &CodecConfig) -> Result<LatentBlock> {
    let shape = latent_shape(v.frames(), v.height(), v.width(), cfg)?;
    let mut z = LatentBlock::zeros(shape.frames, shape.channels, shape.height, shape.width);
    let packed = cfg.packed_channels();
    let proj = match cfg.mode {
        CodecMode::Projected => Some(Projection::new(cfg)),
        CodecMode::LosslessPacking => None,
    };
    let mut cell = vec![0.0f32; packed];
    for lf in 0..shape.frames {
        for y in 0..shape.height {
            for x in 0..shape.width {
                pack_cell(v, lf, y, x, cfg, &mut cell);
                match &proj {
                    None => {
                        for (c, &val) in cell.iter().enumerate() {
                            z.set(lf, c, y, x, val);
                        }
                    }
                    Some(p) => {
                        for k in 0..shape.channels {
                            let row = &p.rows[k * packed..(k + 1) * packed];
                            let s: f64 = row.iter().zip(&cell).map(|(&a, &b)| a * b as f64).sum();
                            z.set(lf, k, y, x, s as f32);
                        }
                    }
                }
            }
        }
    }
    Ok(z)
}

/// Inverse of [`encode`]; output pixels are clamped to `[0, 1]`.
pub fn decode(z: &LatentBlock, cfg: &CodecConfig) -> Result<Video> {
    cfg.validate()?;
    if z.channels() != cfg.channels {
        return Err(Error::Shape {
            axis: "channel",
            detail: format!("latent has {} channels, codec expects {}", z.channels(), cfg.channels),
        });
    }
    if z.frames() == 0 {
        return Err(Error::Shape {
            axis: "frame",
            detail: "latent has no frames".into(),
        });
    }
    let (sf, tf) = (cfg.spatial_factor, cfg.temporal_factor);
    let frames = video_frames(z.frames(), cfg);
    let mut v = Video::filled(frames, z.height() * sf, z.width() * sf, 0.0);
    let packed = cfg.packed_channels();
    let proj = match cfg.mode {
        CodecMode::Projected => Some(Projection::new(cfg)),
        CodecMode::LosslessPacking => None,
    };
    let mut cell = vec![0.0f32; packed];
    for lf in 0..z.frames() {
        for y in 0..z.height() {
            for x in 0..z.width() {
                match &proj {
                    None => {
                        for (c, slot) in cell.iter_mut().enumerate() {
                            *slot = z.get(lf, c, y, x);
                        }
                    }
                    Some(p) if lf == 0 => {
                        // only the first slot is read back below
                        for (j, slot) in cell[..3 * sf * sf].iter_mut().enumerate() {
                            let row = &p.first_inverse[j * cfg.channels..(j + 1) * cfg.channels];
                            let s: f64 = row
                                .iter()
                                .enumerate()
                                .map(|(k, &a)| a * z.get(lf, k, y, x) as f64)
                                .sum();
                            *slot = s as f32;
                        }
                    }
                    Some(p) => {
                        for (j, slot) in cell.iter_mut().enumerate() {
                            let s: f64 = (0..cfg.channels)
                                .map(|k| p.rows[k * packed + j] * z.get(lf, k, y, x) as f64)
                                .sum();
                            *slot = s as f32;
                        }
                    }
                }
                let per_frame = 3 * sf * sf;
                let slots = if lf == 0 { 1 } else { tf };
                for tt in 0..slots {
                    let frame = source_frame(lf, tt, tf);
                    for ch in 0..3 {
                        for dy in 0..sf {
                            for dx in 0..sf {
                                let within = (ch * sf + dy) * sf + dx;
                                let val = cell[tt * per_frame + within];
                                v.set(frame, ch, y * sf + dy, x * sf + dx, to_pixel(val).clamp(0.0, 1.0));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(v)
}
