//! Building the model input from target, condition, reference and mask
//! latents, plus condition dropout.
//!
//! The model sees `(n + f) × 2c × h × w`: `n` image frames (reference latent
//! beside the downsampled first-frame mask) followed by `f` video frames (noisy
//! target beside the erased condition video).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{encode, CodecConfig, LatentBlock, Mask, Video};
use crate::error::{Error, Result};

/// One training record.
#[derive(Clone, Debug, PartialEq)]
pub struct Quintuple {
    pub prompt: String,
    /// Single-frame reference images, each `H × W` like the videos.
    pub refs: Vec<Video>,
    /// First-frame target mask.
    pub mask: Mask,
    /// The video with the instance erased.
    pub cond: Video,
    /// The original video.
    pub target: Video,
}

impl Quintuple {
    pub fn validate(&self) -> Result<()> {
        let (f, h, w) = (self.target.frames(), self.target.height(), self.target.width());
        if (self.cond.frames(), self.cond.height(), self.cond.width()) != (f, h, w) {
            return Err(Error::dims(
                "quintuple",
                &[f, 3, h, w],
                &[self.cond.frames(), 3, self.cond.height(), self.cond.width()],
            ));
        }
        if (self.mask.frames(), self.mask.height(), self.mask.width()) != (1, h, w) {
            return Err(Error::dims(
                "quintuple",
                &[1, 1, h, w],
                &[self.mask.frames(), 1, self.mask.height(), self.mask.width()],
            ));
        }
        for r in &self.refs {
            if (r.frames(), r.height(), r.width()) != (1, h, w) {
                return Err(Error::dims(
                    "quintuple",
                    &[1, 3, h, w],
                    &[r.frames(), 3, r.height(), r.width()],
                ));
            }
        }
        Ok(())
    }
}

/// Which conditions survived dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presence {
    pub prompt: bool,
    pub refs: bool,
    pub mask: bool,
}

impl Presence {
    pub const ALL: Presence = Presence {
        prompt: true,
        refs: true,
        mask: true,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutPolicy {
    pub p_prompt: f64,
    pub p_ref: f64,
    pub p_mask: f64,
    pub seed: u64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        Self {
            p_prompt: 0.2,
            p_ref: 0.2,
            p_mask: 0.5,
            seed: 0,
        }
    }
}

impl DropoutPolicy {
    pub fn none() -> Self {
        Self {
            p_prompt: 0.0,
            p_ref: 0.0,
            p_mask: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_prompt", self.p_prompt),
            ("p_ref", self.p_ref),
            ("p_mask", self.p_mask),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {name}={p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Independent stream for one sample, keyed by the policy seed.
    pub fn rng_for(&self, sample: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(sample);
        rng
    }

    /// Draws the three keep/drop decisions. Always consumes exactly three
    /// uniforms, in the order prompt, references, mask.
    pub fn draw(&self, rng: &mut impl Rng) -> Presence {
        let (a, b, c): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        Presence {
            prompt: a >= self.p_prompt,
            refs: b >= self.p_ref,
            mask: c >= self.p_mask,
        }
    }
}

/// Replaces dropped conditions by their null forms: empty prompt, neutral
/// gray references (zero latents, count kept) and an all-zero mask.
pub fn apply_condition_dropout(q: &Quintuple, policy: &DropoutPolicy, rng: &mut impl Rng) -> (Quintuple, Presence) {
    let presence = policy.draw(rng);
    (null_out(q, presence), presence)
}

/// `q` with every condition absent from `presence` nulled.
pub fn null_out(q: &Quintuple, presence: Presence) -> Quintuple {
    let mut out = q.clone();
    if !presence.prompt {
        out.prompt.clear();
    }
    if !presence.refs {
        for r in &mut out.refs {
            r.data_mut().fill(0.5);
        }
    }
    if !presence.mask {
        out.mask.data_mut().fill(0.0);
    }
    out
}

/// Byte-level prompt tokens.
pub fn tokenize(prompt: &str) -> Vec<usize> {
    prompt.bytes().map(usize::from).collect()
}

fn channel_concat(op: &'static str, a: &LatentBlock, b: &LatentBlock) -> Result<LatentBlock> {
    if (a.frames(), a.height(), a.width()) != (b.frames(), b.height(), b.width()) {
        return Err(Error::contract(
            op,
            format!(
                "shapes {:?} and {:?} differ outside the channel axis",
                a.dims(),
                b.dims()
            ),
        ));
    }
    let (ca, cb) = (a.channels(), b.channels());
    let plane = a.height() * a.width();
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    for f in 0..a.frames() {
        data.extend_from_slice(&a.data()[f * ca * plane..(f + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[f * cb * plane..(f + 1) * cb * plane]);
    }
    LatentBlock::new(a.frames(), ca + cb, a.height(), a.width(), data)
}

/// Noisy target channels followed by condition channels.
pub fn assemble_video_latent(z_target_t: &LatentBlock, z_cond: &LatentBlock) -> Result<LatentBlock> {
    if z_target_t.dims() != z_cond.dims() {
        return Err(Error::contract(
            "assemble_video_latent",
            format!("shapes {:?} and {:?} differ", z_target_t.dims(), z_cond.dims()),
        ));
    }
    channel_concat("assemble_video_latent", z_target_t, z_cond)
}

/// Area mean of `mask` frame 0 over `H/h × W/w` blocks.
pub fn downsample_mask(mask: &Mask, h: usize, w: usize) -> Result<Vec<f32>> {
    let (mh, mw) = (mask.height(), mask.width());
    if h == 0 || w == 0 || mh % h != 0 || mw % w != 0 {
        return Err(Error::contract(
            "downsample_mask",
            format!("mask {mh}×{mw} does not tile into {h}×{w}"),
        ));
    }
    let (fy, fx) = (mh / h, mw / w);
    let area = (fy * fx) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0f64;
            for dy in 0..fy {
                for dx in 0..fx {
                    s += mask.get(0, y * fy + dy, x * fx + dx) as f64;
                }
            }
            out.push((s / area) as f32);
        }
    }
    Ok(out)
}

/// Reference latents beside the downsampled mask repeated over `n × c`.
pub fn assemble_image_latent(z_ref: &LatentBlock, mask: &Mask) -> Result<LatentBlock> {
    if mask.frames() != 1 {
        return Err(Error::contract(
            "assemble_image_latent",
            format!("expected a single-frame mask, got {} frames", mask.frames()),
        ));
    }
    let small = downsample_mask(mask, z_ref.height(), z_ref.width())?;
    let (n, c) = (z_ref.frames(), z_ref.channels());
    let mut data = Vec::with_capacity(n * c * small.len());
    for _ in 0..n * c {
        data.extend_from_slice(&small);
    }
    let repeated = LatentBlock::new(n, c, z_ref.height(), z_ref.width(), data)?;
    channel_concat("assemble_image_latent", z_ref, &repeated)
}

/// Image frames first, then video frames.
pub fn assemble_input(z_image: &LatentBlock, z_video_t: &LatentBlock) -> Result<LatentBlock> {
    let img = z_image.dims();
    let vid = z_video_t.dims();
    if img[1..] != vid[1..] {
        return Err(Error::contract(
            "assemble_input",
            format!("image latent {img:?} and video latent {vid:?} disagree"),
        ));
    }
    z_image.concat_frames(z_video_t)
}

/// Everything the model needs besides the noisy target.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    /// `n × 2c × h × w`.
    pub z_image: LatentBlock,
    /// `f × c × h × w`.
    pub z_cond: LatentBlock,
    pub tokens: Vec<usize>,
    pub presence: Presence,
}

impl ConditionBundle {
    /// Encodes the conditions of `q` (the target is left out).
    pub fn encode(q: &Quintuple, codec: &CodecConfig, presence: Presence) -> Result<Self> {
        q.validate()?;
        let q = null_out(q, presence);
        let z_cond = encode(&q.cond, codec)?;
        let mut z_ref = LatentBlock::zeros(0, z_cond.channels(), z_cond.height(), z_cond.width());
        for r in &q.refs {
            z_ref = z_ref.concat_frames(&encode(r, codec)?)?;
        }
        Ok(Self {
            z_image: assemble_image_latent(&z_ref, &q.mask)?,
            z_cond,
            tokens: tokenize(&q.prompt),
            presence,
        })
    }

    pub fn n(&self) -> usize {
        self.z_image.frames()
    }

    /// `(n + f) × 2c × h × w` model input around the noisy target `z_t`.
    pub fn input(&self, z_t: &LatentBlock) -> Result<LatentBlock> {
        assemble_input(&self.z_image, &assemble_video_latent(z_t, &self.z_cond)?)
    }

    /// Same bundle with the prompt emptied.
    pub fn without_text(&self) -> Self {
        let mut b = self.clone();
        b.tokens.clear();
        b.presence.prompt = false;
        b
    }

    /// Same bundle with reference latents and mask channels zeroed; `n` is
    /// kept.
    pub fn without_image(&self) -> Self {
        let mut b = self.clone();
        b.z_image.data_mut().fill(0.0);
        b.presence.refs = false;
        b.presence.mask = false;
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: usize, c: usize, h: usize, w: usize, offset: f32) -> LatentBlock {
        let n = frames * c * h * w;
        LatentBlock::new(frames, c, h, w, (0..n).map(|i| offset + i as f32).collect()).unwrap()
    }

    #[test]
    fn video_latent_concat() {
        let zt = seq(7, 16, 2, 3, 0.0);
        let zc = seq(7, 16, 2, 3, 10_000.0);
        let out = assemble_video_latent(&zt, &zc).unwrap();
        assert_eq!(out.dims(), [7, 32, 2, 3]);
        assert_eq!(out.get(2, 16 + 3, 1, 2), zc.get(2, 3, 1, 2));
        assert_eq!(out.get(2, 3, 1, 2), zt.get(2, 3, 1, 2));
        let zero = LatentBlock::zeros(7, 16, 2, 3);
        let out = assemble_video_latent(&zt, &zero).unwrap();
        for f in 0..7 {
            assert!(out.frame(f)[16 * 6..].iter().all(|&v| v == 0.0));
        }
        assert!(assemble_video_latent(&zt, &seq(6, 16, 2, 3, 0.0)).is_err());
    }

    #[test]
    fn image_latent_repeats_mask() {
        let z_ref = seq(2, 16, 2, 2, 0.0);
        let mut mask = Mask::zeros(1, 4, 4);
        mask.set(0, 0, 0, 1.0);
        mask.set(0, 0, 1, 1.0);
        let out = assemble_image_latent(&z_ref, &mask).unwrap();
        assert_eq!(out.dims(), [2, 32, 2, 2]);
        for f in 0..2 {
            for ch in 16..32 {
                assert_eq!(out.get(f, ch, 0, 0), 0.5);
                assert_eq!(out.get(f, ch, 1, 1), 0.0);
            }
        }
        let ones = Mask::new(1, 4, 4, vec![1.0; 16]).unwrap();
        let out = assemble_image_latent(&z_ref, &ones).unwrap();
        assert!((0..2).all(|f| out.frame(f)[16 * 4..].iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn mask_block_mean() {
        let m = Mask::new(1, 2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(downsample_mask(&m, 1, 1).unwrap(), vec![0.5]);
        assert!(downsample_mask(&m, 3, 1).is_err());
    }

    #[test]
    fn input_concat() {
        let img = seq(1, 32, 2, 2, 0.0);
        let vid = seq(7, 32, 2, 2, 1000.0);
        let out = assemble_input(&img, &vid).unwrap();
        assert_eq!(out.frames(), 8);
        for k in 0..7 {
            assert_eq!(out.frame(1 + k), vid.frame(k));
        }
        let empty = LatentBlock::zeros(0, 32, 2, 2);
        assert_eq!(assemble_input(&empty, &vid).unwrap(), vid);
        assert!(assemble_input(&seq(1, 30, 2, 2, 0.0), &vid).is_err());
    }

    fn quintuple() -> Quintuple {
        Quintuple {
            prompt: "a red circle".into(),
            refs: vec![Video::filled(1, 4, 4, 0.9)],
            mask: Mask::new(1, 4, 4, vec![1.0; 16]).unwrap(),
            cond: Video::filled(5, 4, 4, 0.2),
            target: Video::filled(5, 4, 4, 0.3),
        }
    }

    #[test]
    fn dropout_extremes() {
        let q = quintuple();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (same, p) = apply_condition_dropout(&q, &DropoutPolicy::none(), &mut rng);
        assert_eq!(same, q);
        assert_eq!(p, Presence::ALL);
        let all = DropoutPolicy {
            p_prompt: 1.0,
            p_ref: 1.0,
            p_mask: 1.0,
            seed: 0,
        };
        let (null, p) = apply_condition_dropout(&q, &all, &mut rng);
        assert_eq!((p.prompt, p.refs, p.mask), (false, false, false));
        let b = ConditionBundle::encode(&null, &CodecConfig::desk(), p).unwrap();
        assert!(b.tokens.is_empty());
        assert_eq!(b.n(), 1);
        assert!(b.z_image.data().iter().all(|&v| v == 0.0));
        assert_eq!(
            b,
            ConditionBundle::encode(&q, &CodecConfig::desk(), Presence::ALL)
                .unwrap()
                .without_image()
                .without_text()
        );
    }

    #[test]
    fn dropout_frequencies_and_reproducibility() {
        let policy = DropoutPolicy::default();
        let mut counts = [0usize; 3];
        for i in 0..10_000 {
            let p = policy.draw(&mut policy.rng_for(i));
            counts[0] += !p.prompt as usize;
            counts[1] += !p.refs as usize;
            counts[2] += !p.mask as usize;
        }
        for (count, want) in counts.iter().zip([0.2, 0.2, 0.5]) {
            assert!((*count as f64 / 10_000.0 - want).abs() < 0.02, "{counts:?}");
        }
        assert_eq!(policy.draw(&mut policy.rng_for(5)), policy.draw(&mut policy.rng_for(5)));
    }

    #[test]
    fn bundle_input_shape() {
        let q = quintuple();
        let b = ConditionBundle::encode(&q, &CodecConfig::desk(), Presence::ALL).unwrap();
        let z_t = LatentBlock::zeros(3, 24, 2, 2);
        assert_eq!(b.input(&z_t).unwrap().dims(), [4, 48, 2, 2]);
        assert_eq!(b.tokens, tokenize("a red circle"));
    }
}
