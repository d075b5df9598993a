//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use vidinsert::codec::{encode, CodecConfig, LatentBlock, Mask, Video};
use vidinsert::conditioning::{ConditionBundle, Presence, Quintuple};
use vidinsert::diffusion::NoiseSchedule;
use vidinsert::sampler::EpsModel;
use vidinsert::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_video(frames: usize, h: usize, w: usize, seed: u64) -> Video {
    let mut r = rng(seed);
    let data = (0..frames * 3 * h * w).map(|_| r.random::<f32>()).collect();
    Video::new(frames, h, w, data).unwrap()
}

pub fn random_latent(dims: [usize; 4], seed: u64) -> LatentBlock {
    let mut r = rng(seed);
    let n = dims.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
    LatentBlock::new(dims[0], dims[1], dims[2], dims[3], data).unwrap()
}

pub fn random_mask(h: usize, w: usize, seed: u64) -> Mask {
    let mut r = rng(seed);
    let data = (0..h * w).map(|_| if r.random::<bool>() { 1.0 } else { 0.0 }).collect();
    Mask::new(1, h, w, data).unwrap()
}

/// Video whose every value is distinct: `(offset + index) / 4096`.
pub fn tagged_video(frames: usize, h: usize, w: usize, offset: usize) -> Video {
    let n = frames * 3 * h * w;
    let data = (0..n).map(|i| ((offset + i) % 4096) as f32 / 4096.0).collect();
    Video::new(frames, h, w, data).unwrap()
}

pub fn random_quintuple(n: usize, frames: usize, h: usize, w: usize, seed: u64) -> Quintuple {
    Quintuple {
        prompt: "a blue square moves left".into(),
        refs: (0..n)
            .map(|i| random_video(1, h, w, seed * 31 + i as u64 + 1))
            .collect(),
        mask: random_mask(h, w, seed ^ 0x55),
        cond: random_video(frames, h, w, seed ^ 0xaa),
        target: random_video(frames, h, w, seed ^ 0xff),
    }
}

/// Pixel-to-latent value of the lossless codec.
fn latent_value(p: f32) -> f32 {
    (p - 0.5) * 2.0
}

/// Expected packed value of channel `k` at latent cell `(lf, y, x)` of a
/// lossless encoding, computed from the channel order
/// `(slot in group, rgb, dy, dx)` and the frame law.
fn packed(v: &Video, lf: usize, k: usize, y: usize, x: usize, sf: usize, tf: usize) -> f32 {
    let (slot, rest) = (k / (3 * sf * sf), k % (3 * sf * sf));
    let (ch, rest) = (rest / (sf * sf), rest % (sf * sf));
    let (dy, dx) = (rest / sf, rest % sf);
    let frame = if lf == 0 { 0 } else { 1 + (lf - 1) * tf + slot };
    latent_value(v.get(frame, ch, y * sf + dy, x * sf + dx))
}

/// Checks every element of the assembled model input against its
/// definition. Returns the number of elements checked.
pub fn audit_assembly(
    n: usize,
    frames: usize,
    h: usize,
    w: usize,
    sf: usize,
    tf: usize,
) -> std::result::Result<usize, String> {
    let codec = CodecConfig::lossless(sf, tf);
    let c = codec.channels;
    let mut q = Quintuple {
        prompt: "x".into(),
        refs: (0..n).map(|i| tagged_video(1, h, w, 1000 * (i + 1))).collect(),
        mask: random_mask(h, w, 3),
        cond: tagged_video(frames, h, w, 7),
        target: tagged_video(frames, h, w, 11),
    };
    q.mask.set(0, 0, 0, 1.0);
    let bundle = ConditionBundle::encode(&q, &codec, Presence::ALL).map_err(|e| e.to_string())?;
    let z_probe = encode(&q.target, &codec).map_err(|e| e.to_string())?;
    let dims = z_probe.dims();
    let mut z_t = LatentBlock::zeros(dims[0], dims[1], dims[2], dims[3]);
    for (i, v) in z_t.data_mut().iter_mut().enumerate() {
        *v = -(i as f32) - 1.0;
    }
    let input = bundle.input(&z_t).map_err(|e| e.to_string())?;
    let (f, lh, lw) = (dims[0], dims[2], dims[3]);
    let want = [n + f, 2 * c, lh, lw];
    if input.dims() != want {
        return Err(format!("shape {:?}, expected {want:?}", input.dims()));
    }
    let mut checked = 0;
    for fr in 0..n + f {
        for ch in 0..2 * c {
            for y in 0..lh {
                for x in 0..lw {
                    let expected = if fr < n {
                        if ch < c {
                            packed(&q.refs[fr], 0, ch, y, x, sf, tf)
                        } else {
                            let mut s = 0.0f64;
                            for dy in 0..sf {
                                for dx in 0..sf {
                                    s += q.mask.get(0, y * sf + dy, x * sf + dx) as f64;
                                }
                            }
                            (s / (sf * sf) as f64) as f32
                        }
                    } else if ch < c {
                        z_t.get(fr - n, ch, y, x)
                    } else {
                        packed(&q.cond, fr - n, ch - c, y, x, sf, tf)
                    };
                    let got = input.get(fr, ch, y, x);
                    if got.to_bits() != expected.to_bits() {
                        return Err(format!("element ({fr},{ch},{y},{x}) is {got}, expected {expected}"));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(checked)
}

/// A denoiser that knows the clean latent and so returns the exact noise.
pub struct TrueNoise<'a> {
    pub z0: &'a LatentBlock,
    pub schedule: &'a NoiseSchedule,
}

impl EpsModel for TrueNoise<'_> {
    fn predict_eps(&self, _bundle: &ConditionBundle, z_t: &LatentBlock, t: usize) -> Result<LatentBlock> {
        let ab = self.schedule.alpha_bar(t);
        let mut eps = z_t.clone();
        for (e, &z0) in eps.data_mut().iter_mut().zip(self.z0.data()) {
            *e = ((*e as f64 - ab.sqrt() * z0 as f64) / (1.0 - ab).sqrt()) as f32;
        }
        Ok(eps)
    }
}

/// Naive multi-head attention in `f64`: `softmax(q kᵀ / √d) v` per head.
pub fn reference_attention(q: &[f64], k: &[f64], v: &[f64], m: usize, n: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; m * d];
    for h in 0..heads {
        for i in 0..m {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (0..dh)
                        .map(|e| q[i * d + h * dh + e] * k[j * d + h * dh + e])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for j in 0..n {
                for e in 0..dh {
                    out[i * d + h * dh + e] += ex[j] / z * v[j * d + h * dh + e];
                }
            }
        }
    }
    out
}
