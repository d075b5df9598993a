//! DDIM sampling with single- and dual-condition classifier-free guidance.
//!
//! Guidance is evaluated in its affine form. For dual guidance the combined
//! prediction is
//!
//! ```text
//! (1 - s1)·ε∅∅ + (s1 - s2)·εt∅ + s2·εti
//! ```
//!
//! which is the usual nested extrapolation with the terms regrouped. Each
//! element is combined in `f64` and terms with a zero coefficient are left
//! out, so `s1 = s2 = 1` returns `εti` bit for bit and `s2 = 0` reproduces
//! single guidance exactly.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::LatentBlock;
use crate::conditioning::ConditionBundle;
use crate::diffusion::{ddim_with, DdimPlan, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::GivTransformer;

/// Text scale `s1`, image scale `s2` and the number of DDIM steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub s1: f64,
    pub s2: f64,
    pub steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s1: 6.0,
            s2: 1.5,
            steps: 50,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s1 >= 0.0 && self.s1.is_finite()) || !(self.s2 >= 0.0 && self.s2.is_finite()) {
            return Err(Error::Config(format!(
                "guidance scales must be finite and non-negative, got s1={} s2={}",
                self.s1, self.s2
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("guidance needs at least one step".into()));
        }
        Ok(())
    }

    /// Coefficients of `(ε∅∅, εt∅, εti)` in the combined prediction.
    pub fn coefficients(&self) -> [f64; 3] {
        [1.0 - self.s1, self.s1 - self.s2, self.s2]
    }
}

fn affine(op: &'static str, terms: &[(f64, &LatentBlock)]) -> Result<LatentBlock> {
    let first = terms[0].1;
    for (_, b) in &terms[1..] {
        if b.dims() != first.dims() {
            return Err(Error::contract(
                op,
                format!("prediction shapes differ: {:?} vs {:?}", first.dims(), b.dims()),
            ));
        }
    }
    let [f, c, h, w] = first.dims();
    let live: Vec<(f64, &[f32])> = terms
        .iter()
        .filter(|(k, _)| *k != 0.0)
        .map(|(k, b)| (*k, b.data()))
        .collect();
    let data = (0..first.data().len())
        .map(|i| live.iter().map(|(k, d)| k * d[i] as f64).sum::<f64>() as f32)
        .collect();
    LatentBlock::new(f, c, h, w, data)
}

/// Single-condition guidance `ε∅ + s1·(εt - ε∅)`.
pub fn cfg_epsilon(eps_uncond: &LatentBlock, eps_text: &LatentBlock, s1: f64) -> Result<LatentBlock> {
    affine("cfg_epsilon", &[(1.0 - s1, eps_uncond), (s1, eps_text)])
}

/// Dual guidance `ε∅∅ + s1·(εt∅ - ε∅∅) + s2·(εti - εt∅)`.
pub fn dual_cfg_epsilon(
    eps_null_null: &LatentBlock,
    eps_text_null: &LatentBlock,
    eps_text_img: &LatentBlock,
    s1: f64,
    s2: f64,
) -> Result<LatentBlock> {
    affine(
        "dual_cfg_epsilon",
        &[(1.0 - s1, eps_null_null), (s1 - s2, eps_text_null), (s2, eps_text_img)],
    )
}

/// A noise predictor: given the conditions and the noisy target latent at
/// timestep `t`, returns the predicted noise for the target frames.
pub trait EpsModel {
    fn predict_eps(&self, bundle: &ConditionBundle, z_t: &LatentBlock, t: usize) -> Result<LatentBlock>;
}

impl EpsModel for GivTransformer<f32> {
    fn predict_eps(&self, bundle: &ConditionBundle, z_t: &LatentBlock, t: usize) -> Result<LatentBlock> {
        self.predict(&bundle.input(z_t)?, bundle.n(), t, &bundle.tokens)
    }
}

impl<M: EpsModel + ?Sized> EpsModel for &M {
    fn predict_eps(&self, bundle: &ConditionBundle, z_t: &LatentBlock, t: usize) -> Result<LatentBlock> {
        (**self).predict_eps(bundle, z_t, t)
    }
}

/// The three condition sets guidance compares: nothing, text only, and text
/// with the image condition.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceBundles {
    pub null_null: ConditionBundle,
    pub text_null: ConditionBundle,
    pub text_img: ConditionBundle,
}

impl GuidanceBundles {
    /// Derives the dropped variants from a fully conditioned bundle. The
    /// condition video is kept in all three.
    pub fn from_full(full: ConditionBundle) -> Self {
        let text_null = full.without_image();
        Self {
            null_null: text_null.without_text(),
            text_null,
            text_img: full,
        }
    }

    fn check(&self) -> Result<()> {
        let dims = self.text_img.z_cond.dims();
        let img = self.text_img.z_image.dims();
        for b in [&self.null_null, &self.text_null] {
            if b.z_cond != self.text_img.z_cond {
                return Err(Error::contract("sample", "bundles disagree on the condition video"));
            }
            if b.z_image.dims() != img {
                return Err(Error::dims("sample", &b.z_image.dims(), &img));
            }
        }
        if dims[0] == 0 {
            return Err(Error::contract("sample", "condition video has no latent frames"));
        }
        Ok(())
    }
}

/// Standard-normal starting latent.
pub fn initial_noise(dims: [usize; 4], rng: &mut impl Rng) -> LatentBlock {
    let [f, c, h, w] = dims;
    let data = (0..f * c * h * w)
        .map(|_| Distribution::<f32>::sample(&StandardNormal, rng))
        .collect();
    LatentBlock::new(f, c, h, w, data).expect("length matches dims")
}

/// Runs the DDIM plan from `noise` and returns the final clean latent.
///
/// Every step re-assembles each bundle around the current noisy latent. Model
/// calls whose guidance coefficient is exactly zero are skipped; they could
/// not change the combined prediction.
pub fn sample(
    model: &impl EpsModel,
    bundles: &GuidanceBundles,
    plan: &DdimPlan,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
    noise: LatentBlock,
) -> Result<LatentBlock> {
    guidance.validate()?;
    bundles.check()?;
    if noise.dims() != bundles.text_img.z_cond.dims() {
        return Err(Error::dims("sample", &noise.dims(), &bundles.text_img.z_cond.dims()));
    }
    if plan.timesteps()[0] > schedule.steps() {
        return Err(Error::contract(
            "sample",
            format!(
                "plan starts at {} beyond schedule length {}",
                plan.timesteps()[0],
                schedule.steps()
            ),
        ));
    }
    let coeffs = guidance.coefficients();
    let sources = [&bundles.null_null, &bundles.text_null, &bundles.text_img];
    let mut z = noise;
    for (t, t_prev) in plan.pairs() {
        let mut preds = Vec::with_capacity(3);
        for (k, b) in coeffs.iter().zip(sources) {
            if *k != 0.0 {
                preds.push((*k, model.predict_eps(b, &z, t)?));
            }
        }
        let eps = match preds.as_slice() {
            [] => LatentBlock::zeros(z.frames(), z.channels(), z.height(), z.width()),
            [(k, e)] if *k == 1.0 => e.clone(),
            _ => {
                let terms: Vec<(f64, &LatentBlock)> = preds.iter().map(|(k, e)| (*k, e)).collect();
                affine("sample", &terms)?
            }
        };
        if eps.dims() != z.dims() {
            return Err(Error::dims("sample", &eps.dims(), &z.dims()));
        }
        z = ddim_with(&z, &eps, schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    }
    Ok(z)
}
