//! Inserting a reference subject into a condition video with a trained
//! checkpoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{decode, latent_shape, Mask, Video};
use crate::conditioning::{ConditionBundle, Presence, Quintuple};
use crate::diffusion::DdimPlan;
use crate::error::{Error, Result};
use crate::sampler::{initial_noise, sample, GuidanceBundles, GuidanceConfig};

use super::train::Checkpoint;

#[derive(Clone, Debug, PartialEq)]
pub struct EditRequest {
    pub cond: Video,
    pub refs: Vec<Video>,
    pub prompt: String,
    /// First-frame placement; `None` feeds all-zero mask channels.
    pub mask: Option<Mask>,
    pub guidance: GuidanceConfig,
    pub seed: u64,
}

/// Encodes the conditions, runs guided DDIM sampling and decodes the
/// result.
pub fn edit(ckpt: &Checkpoint, req: &EditRequest) -> Result<Video> {
    req.guidance.validate()?;
    let model = &ckpt.state.model;
    let m = model.config();
    let (f, h, w) = (req.cond.frames(), req.cond.height(), req.cond.width());
    let shape = latent_shape(f, h, w, &ckpt.codec)?;
    if (shape.height, shape.width) != (m.latent_height, m.latent_width) {
        return Err(Error::Config(format!(
            "checkpoint expects a {}x{} latent grid, a {h}x{w} video gives {}x{}",
            m.latent_height, m.latent_width, shape.height, shape.width
        )));
    }
    if shape.frames + req.refs.len() > m.max_frames {
        return Err(Error::Config(format!(
            "{} latent frames plus {} references exceed the checkpoint's max_frames {}",
            shape.frames,
            req.refs.len(),
            m.max_frames
        )));
    }
    if req.guidance.steps > ckpt.schedule.steps() {
        return Err(Error::Config(format!(
            "{} sampling steps exceed the checkpoint's {}-step schedule",
            req.guidance.steps,
            ckpt.schedule.steps()
        )));
    }
    let presence = Presence {
        mask: req.mask.is_some(),
        ..Presence::ALL
    };
    let q = Quintuple {
        prompt: req.prompt.clone(),
        refs: req.refs.clone(),
        mask: req.mask.clone().unwrap_or_else(|| Mask::zeros(1, h, w)),
        cond: req.cond.clone(),
        target: req.cond.clone(),
    };
    let bundle = ConditionBundle::encode(&q, &ckpt.codec, presence)?;
    let bundles = GuidanceBundles::from_full(bundle);
    let plan = DdimPlan::new(ckpt.schedule.steps(), req.guidance.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let noise = initial_noise(bundles.text_img.z_cond.dims(), &mut rng);
    let z0 = sample(model, &bundles, &plan, &req.guidance, &ckpt.schedule, noise)?;
    decode(&z0, &ckpt.codec)
}

/// Mean squared error over the pixels where any frame of `mask` is set,
/// taken over every frame and channel. `mask` may have one frame (applied to
/// all) or one per frame.
pub fn masked_mse(a: &Video, b: &Video, mask: &Mask) -> Result<f64> {
    let dims = |v: &Video| [v.frames(), 3, v.height(), v.width()];
    if dims(a) != dims(b) {
        return Err(Error::dims("masked_mse", &dims(a), &dims(b)));
    }
    if (mask.height(), mask.width()) != (a.height(), a.width()) || (mask.frames() != 1 && mask.frames() != a.frames()) {
        return Err(Error::dims(
            "masked_mse",
            &[mask.frames(), 1, mask.height(), mask.width()],
            &dims(a),
        ));
    }
    let (mut sum, mut count) = (0.0f64, 0usize);
    for k in 0..a.frames() {
        let mk = if mask.frames() == 1 { 0 } else { k };
        for y in 0..a.height() {
            for x in 0..a.width() {
                if mask.get(mk, y, x) == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let d = a.get(k, c, y, x) as f64 - b.get(k, c, y, x) as f64;
                    sum += d * d;
                }
                count += 3;
            }
        }
    }
    if count == 0 {
        return Err(Error::contract("masked_mse", "mask selects no pixels"));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{RunConfig, Trainer};
    use crate::model::ModelConfig;
    use crate::synth::{generate_record, PipelineStages, SynthConfig};

    fn setup() -> (Checkpoint, Quintuple) {
        let mut cfg = RunConfig::desk(9);
        cfg.model = ModelConfig {
            depth: 1,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            time_dim: 8,
            latent_height: 8,
            latent_width: 8,
            ..ModelConfig::default()
        };
        cfg.schedule.steps = 50;
        cfg.guidance.steps = 5;
        let synth = SynthConfig {
            height: 16,
            width: 16,
            frames: 5,
            ..SynthConfig::default()
        };
        let q = generate_record(&synth, 3, 0, &PipelineStages::oracle())
            .unwrap()
            .quintuple();
        let data = vec![q.clone()];
        let mut tr = Trainer::new(&cfg, &data).unwrap();
        tr.step().unwrap();
        (tr.checkpoint(), q)
    }

    fn request(q: &Quintuple, seed: u64) -> EditRequest {
        EditRequest {
            cond: q.cond.clone(),
            refs: q.refs.clone(),
            prompt: q.prompt.clone(),
            mask: Some(q.mask.clone()),
            guidance: GuidanceConfig {
                s1: 2.0,
                s2: 1.5,
                steps: 5,
            },
            seed,
        }
    }

    #[test]
    fn same_seed_gives_identical_output() {
        let (ckpt, q) = setup();
        let a = edit(&ckpt, &request(&q, 4)).unwrap();
        let b = edit(&ckpt, &request(&q, 4)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.frames(), a.height(), a.width()), (5, 16, 16));
        let c = edit(&ckpt, &request(&q, 5)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn omitted_mask_matches_explicit_zero_mask() {
        let (ckpt, q) = setup();
        let mut none = request(&q, 1);
        none.mask = None;
        let mut zero = request(&q, 1);
        zero.mask = Some(Mask::zeros(1, 16, 16));
        assert_eq!(edit(&ckpt, &none).unwrap(), edit(&ckpt, &zero).unwrap());
    }

    #[test]
    fn wrong_resolution_is_a_config_error() {
        let (ckpt, q) = setup();
        let mut req = request(&q, 1);
        req.cond = Video::filled(5, 32, 32, 0.5);
        req.refs = vec![Video::filled(1, 32, 32, 0.5)];
        req.mask = None;
        assert!(matches!(edit(&ckpt, &req), Err(Error::Config(_))));
    }

    #[test]
    fn masked_mse_counts_only_masked_pixels() {
        let a = Video::filled(2, 2, 2, 0.0);
        let mut b = Video::filled(2, 2, 2, 0.0);
        b.set(0, 0, 0, 0, 1.0);
        b.set(1, 2, 1, 1, 3.0);
        let mut m = Mask::zeros(1, 2, 2);
        m.set(0, 0, 0, 1.0);
        // Two frames, three channels at one pixel; one value differs by 1.
        assert!((masked_mse(&a, &b, &m).unwrap() - 1.0 / 6.0).abs() < 1e-12);
        assert!(masked_mse(&a, &b, &Mask::zeros(1, 2, 2)).is_err());
    }
}
